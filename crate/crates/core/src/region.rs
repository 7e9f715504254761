//! Instance-aware region selection: scene-cut detection, tokenspan-frozen
//! phrase/box association, mask synthesis, and the three-way training-clip
//! sampler (precise / random / null-prompt).
//!
//! Prompt tokens are whitespace-split words; tokenspans are half-open
//! `[start, end)` index ranges into them. Boxes are normalized corner pairs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::MaskSequence;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalized box with 0 ≤ x0 < x1 ≤ 1 and 0 ≤ y0 < y1 ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoxF { x0, y0, x1, y1 };
        if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
            return Err(Error::arg(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// Pixel footprint on a `w × h` frame: floor/ceil rasterization, with a
    /// 1-pixel minimum at the box center if the footprint is empty.
    pub fn rasterize(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.x0 * w as f64).floor() as usize;
        let x1 = ((self.x1 * w as f64).ceil() as usize).min(w);
        let y0 = (self.y0 * h as f64).floor() as usize;
        let y1 = ((self.y1 * h as f64).ceil() as usize).min(h);
        if x0 >= x1 || y0 >= y1 {
            let cx = (((self.x0 + self.x1) / 2.0) * w as f64) as usize;
            let cy = (((self.y0 + self.y1) / 2.0) * h as f64) as usize;
            let cx = cx.min(w - 1);
            let cy = cy.min(h - 1);
            return (cx, cy, cx + 1, cy + 1);
        }
        (x0, y0, x1, y1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhraseSpan {
    pub text: String,
    /// Half-open token index range into the prompt.
    pub span: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Detection {
    /// Index into `phrases`.
    pub phrase: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn boxf(&self) -> Result<BoxF> {
        BoxF::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// Per-clip detector output, loaded from JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionAnnotation {
    pub prompt: String,
    pub phrases: Vec<PhraseSpan>,
    /// Per-frame detections.
    pub frames: Vec<Vec<Detection>>,
}

impl DetectionAnnotation {
    pub fn from_json(text: &str) -> Result<Self> {
        let ann: DetectionAnnotation = serde_json::from_str(text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn prompt_tokens(&self) -> Vec<&str> {
        self.prompt.split_whitespace().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n_tokens = self.prompt_tokens().len();
        let mut spans: Vec<[usize; 2]> = Vec::new();
        for p in &self.phrases {
            let [s, e] = p.span;
            if s >= e || e > n_tokens {
                return Err(Error::arg(format!(
                    "phrase '{}' span {:?} out of bounds for {n_tokens} prompt tokens",
                    p.text, p.span
                )));
            }
            for other in &spans {
                if s < other[1] && other[0] < e {
                    return Err(Error::arg(format!(
                        "phrase spans {other:?} and {:?} overlap",
                        p.span
                    )));
                }
            }
            spans.push(p.span);
        }
        for (fi, dets) in self.frames.iter().enumerate() {
            for d in dets {
                if d.phrase >= self.phrases.len() {
                    return Err(Error::arg(format!(
                        "frame {fi}: phrase index {} out of range",
                        d.phrase
                    )));
                }
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(Error::arg(format!(
                        "frame {fi}: score {} not in [0,1]",
                        d.score
                    )));
                }
                d.boxf()?;
            }
        }
        Ok(())
    }
}

/// Frame indices where a new scene starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneReport {
    pub cuts: Vec<usize>,
}

impl SceneReport {
    pub fn is_single_scene(&self) -> bool {
        self.cuts.is_empty()
    }
}

/// Cut at frame i iff the mean absolute difference to frame i−1 (on the
/// 0–255 scale) strictly exceeds `threshold`.
pub fn detect_scene_cuts<E: Scalar>(frames: &Tensor<E>, threshold: f64) -> Result<SceneReport> {
    if frames.rank() != 4 || frames.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "expected [f, c, w, h] with f >= 1, got {:?}",
            frames.shape()
        )));
    }
    let f = frames.shape()[0];
    let per_frame: usize = frames.shape()[1..].iter().product();
    let mut cuts = Vec::new();
    for i in 1..f {
        let a = &frames.data()[(i - 1) * per_frame..i * per_frame];
        let b = &frames.data()[i * per_frame..(i + 1) * per_frame];
        let mad: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .sum::<f64>()
            / per_frame as f64;
        if mad > threshold {
            cuts.push(i);
        }
    }
    Ok(SceneReport { cuts })
}

/// Per-phrase box track over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseTrack {
    pub phrase_index: usize,
    pub phrase: String,
    pub boxes: Vec<BoxF>,
}

/// Freeze the phrase set from the first frame and track each phrase's box
/// through the clip; frames with no accepted detection inherit the nearest
/// earlier box.
pub fn associate_tokenspan(
    ann: &DetectionAnnotation,
    score_threshold: f64,
) -> Result<Vec<PhraseTrack>> {
    ann.validate()?;
    if ann.frames.is_empty() {
        return Err(Error::EmptyAssociation);
    }
    // Best first-frame detection per phrase; ties to the higher score.
    let mut first: Vec<Option<(f64, BoxF)>> = vec![None; ann.phrases.len()];
    for d in &ann.frames[0] {
        if d.score >= score_threshold {
            let b = d.boxf()?;
            let slot = &mut first[d.phrase];
            if slot.is_none_or(|(s, _)| d.score > s) {
                *slot = Some((d.score, b));
            }
        }
    }
    let mut tracks: Vec<PhraseTrack> = first
        .iter()
        .enumerate()
        .filter_map(|(i, slot)| {
            slot.map(|(_, b)| PhraseTrack {
                phrase_index: i,
                phrase: ann.phrases[i].text.clone(),
                boxes: vec![b],
            })
        })
        .collect();
    if tracks.is_empty() {
        return Err(Error::EmptyAssociation);
    }
    for dets in &ann.frames[1..] {
        for track in tracks.iter_mut() {
            // Only detections matching a frozen first-frame phrase count;
            // new tokenspans are ignored wholesale.
            let best = dets
                .iter()
                .filter(|d| d.phrase == track.phrase_index && d.score >= score_threshold)
                .max_by(|a, b| a.score.total_cmp(&b.score));
            let next = match best {
                Some(d) => d.boxf()?,
                None => *track.boxes.last().unwrap(),
            };
            track.boxes.push(next);
        }
    }
    Ok(tracks)
}

/// Mask families for instance masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStyle {
    /// Exact box footprint.
    Box,
    /// Box expanded by a fixed 10% margin per side.
    Dilated,
    /// Box dilated by seeded random outward bumps.
    RandomShape,
}

fn stamp_rect(mask: &mut [u8], w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) {
    for x in x0..x1.min(w) {
        for y in y0..y1.min(h) {
            mask[x * h + y] = 1;
        }
    }
}

fn stamp_disc(mask: &mut [u8], w: usize, h: usize, cx: i64, cy: i64, r: i64) {
    for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                mask[x as usize * h + y as usize] = 1;
            }
        }
    }
}

fn frames_to_mask<E: Scalar>(
    frames: Vec<Vec<u8>>,
    w: usize,
    h: usize,
    latent: (usize, usize),
) -> Result<MaskSequence<E>> {
    let f = frames.len();
    let data: Vec<E> = frames
        .into_iter()
        .flatten()
        .map(|v| if v == 0 { E::zero() } else { E::one() })
        .collect();
    let m = Tensor::new(vec![f, 1, w, h], data)?;
    MaskSequence::new(m, latent)
}

/// Per-frame binary mask covering (at least) each frame's box footprint.
pub fn synthesize_instance_mask<E: Scalar>(
    boxes: &[BoxF],
    frame_size: (usize, usize),
    latent: (usize, usize),
    style: MaskStyle,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSequence<E>> {
    let (w, h) = frame_size;
    if w == 0 || h == 0 || boxes.is_empty() {
        return Err(Error::arg("frame size and track must be non-empty"));
    }
    let mut frames = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (x0, y0, x1, y1) = b.rasterize(w, h);
        let mut mask = vec![0u8; w * h];
        stamp_rect(&mut mask, w, h, x0, y0, x1, y1);
        match style {
            MaskStyle::Box => {}
            MaskStyle::Dilated => {
                let mx = (((x1 - x0) as f64) * 0.1).ceil() as usize;
                let my = (((y1 - y0) as f64) * 0.1).ceil() as usize;
                stamp_rect(
                    &mut mask,
                    w,
                    h,
                    x0.saturating_sub(mx),
                    y0.saturating_sub(my),
                    x1 + mx,
                    y1 + my,
                );
            }
            MaskStyle::RandomShape => {
                // Outward-only perturbation: discs centered on the box
                // boundary can only add pixels, never remove the box.
                let bumps = rng.gen_range(4..12);
                let rmax = (((x1 - x0).max(y1 - y0) as f64) * 0.4).ceil() as i64;
                for _ in 0..bumps {
                    let r = rng.gen_range(1..=rmax.max(1));
                    let (cx, cy) = match rng.gen_range(0..4u8) {
                        0 => (rng.gen_range(x0..x1) as i64, y0 as i64),
                        1 => (rng.gen_range(x0..x1) as i64, y1 as i64 - 1),
                        2 => (x0 as i64, rng.gen_range(y0..y1) as i64),
                        _ => (x1 as i64 - 1, rng.gen_range(y0..y1) as i64),
                    };
                    stamp_disc(&mut mask, w, h, cx, cy, r);
                }
            }
        }
        frames.push(mask);
    }
    frames_to_mask(frames, w, h, latent)
}

/// Area-fraction bounds for random masks.
pub const RANDOM_MASK_MIN_FRACTION: f64 = 0.05;
pub const RANDOM_MASK_MAX_FRACTION: f64 = 0.60;

/// One of {static rectangle, moving rectangle, free-form stroke}, with the
/// per-frame area fraction kept inside [5%, 60%].
pub fn synthesize_random_mask<E: Scalar>(
    frame_size: (usize, usize),
    f: usize,
    latent: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<MaskSequence<E>> {
    let (w, h) = frame_size;
    if w == 0 || h == 0 || f == 0 {
        return Err(Error::arg("frame size and frame count must be positive"));
    }
    let total = (w * h) as f64;
    let kind = rng.gen_range(0..3u8);
    let mut frames = Vec::with_capacity(f);
    match kind {
        // Static or moving rectangle of a fixed sampled area fraction.
        0 | 1 => {
            let frac = rng.gen_range(RANDOM_MASK_MIN_FRACTION..RANDOM_MASK_MAX_FRACTION);
            let area = (frac * total).max(1.0);
            // Aspect jitter, clamped to the frame.
            let aspect = rng.gen_range(0.5..2.0);
            let mut rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let mut rh = ((area / rw as f64).round() as usize).clamp(1, h);
            // Integer rounding may push the footprint outside the bounds;
            // nudge the dimensions back in.
            while (rw * rh) as f64 > RANDOM_MASK_MAX_FRACTION * total && rw.max(rh) > 1 {
                if rw >= rh {
                    rw -= 1;
                } else {
                    rh -= 1;
                }
            }
            while ((rw * rh) as f64) < RANDOM_MASK_MIN_FRACTION * total && (rw < w || rh < h) {
                if rw <= rh && rw < w {
                    rw += 1;
                } else {
                    rh += 1;
                }
            }
            let (rw, rh) = (rw, rh);
            let max_x = w - rw;
            let max_y = h - rh;
            let sx = if max_x == 0 {
                0
            } else {
                rng.gen_range(0..=max_x)
            };
            let sy = if max_y == 0 {
                0
            } else {
                rng.gen_range(0..=max_y)
            };
            // Moving rectangles drift by at most one pixel per frame.
            let (mut x, mut y) = (sx, sy);
            for _ in 0..f {
                let mut mask = vec![0u8; w * h];
                stamp_rect(&mut mask, w, h, x, y, x + rw, y + rh);
                frames.push(mask);
                if kind == 1 {
                    let dx: i64 = rng.gen_range(-1..=1);
                    let dy: i64 = rng.gen_range(-1..=1);
                    x = (x as i64 + dx).clamp(0, max_x as i64) as usize;
                    y = (y as i64 + dy).clamp(0, max_y as i64) as usize;
                }
            }
        }
        // Free-form stroke: a random walk stamped with discs until the area
        // reaches a sampled target; stamp radius is capped so a single stamp
        // cannot overshoot the upper bound.
        _ => {
            let target = rng.gen_range(RANDOM_MASK_MIN_FRACTION..0.5) * total;
            let r = (((0.05 * total) / std::f64::consts::PI).sqrt().floor() as i64).max(1);
            let mut mask = vec![0u8; w * h];
            let mut cx = rng.gen_range(0..w) as i64;
            let mut cy = rng.gen_range(0..h) as i64;
            loop {
                stamp_disc(&mut mask, w, h, cx, cy, r);
                let area = mask.iter().filter(|v| **v == 1).count() as f64;
                if area >= target {
                    break;
                }
                cx = (cx + rng.gen_range(-r..=r)).clamp(0, w as i64 - 1);
                cy = (cy + rng.gen_range(-r..=r)).clamp(0, h as i64 - 1);
            }
            for _ in 0..f {
                frames.push(mask.clone());
            }
        }
    }
    frames_to_mask(frames, w, h, latent)
}

/// The three training-clip families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipKind {
    Precise,
    Random,
    NullPrompt,
}

#[derive(Debug, Clone)]
pub struct ClipSample<E: Scalar> {
    pub kind: ClipKind,
    pub masks: MaskSequence<E>,
    /// Empty iff `kind == NullPrompt`.
    pub prompt: String,
    /// The tracked phrase behind a precise mask.
    pub phrase: Option<String>,
    /// True when a precise draw fell back to a random mask because
    /// association failed.
    pub fallback: bool,
}

/// Draw one training clip: kind ~ Categorical(probs) over
/// (precise, random, null-prompt).
pub fn sample_training_clip<E: Scalar>(
    ann: &DetectionAnnotation,
    f: usize,
    frame_size: (usize, usize),
    latent: (usize, usize),
    probs: (f64, f64, f64),
    score_threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample<E>> {
    let (p0, p1, p2) = probs;
    if p0 < 0.0 || p1 < 0.0 || p2 < 0.0 || (p0 + p1 + p2 - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "probabilities must be nonnegative and sum to 1, got {probs:?}"
        )));
    }
    let u: f64 = rng.gen();
    let kind = if u < p0 {
        ClipKind::Precise
    } else if u < p0 + p1 {
        ClipKind::Random
    } else {
        ClipKind::NullPrompt
    };
    match kind {
        ClipKind::Precise => match associate_tokenspan(ann, score_threshold) {
            Ok(tracks) => {
                let track = tracks.choose(rng).unwrap();
                let style = *[MaskStyle::Box, MaskStyle::Dilated, MaskStyle::RandomShape]
                    .choose(rng)
                    .unwrap();
                let boxes: Vec<BoxF> = track.boxes.iter().take(f).copied().collect();
                let boxes = if boxes.len() < f {
                    let last = *boxes.last().ok_or(Error::EmptyAssociation)?;
                    let mut b = boxes;
                    b.resize(f, last);
                    b
                } else {
                    boxes
                };
                let masks = synthesize_instance_mask(&boxes, frame_size, latent, style, rng)?;
                Ok(ClipSample {
                    kind,
                    masks,
                    prompt: ann.prompt.clone(),
                    phrase: Some(track.phrase.clone()),
                    fallback: false,
                })
            }
            Err(Error::EmptyAssociation) => Ok(ClipSample {
                kind: ClipKind::Random,
                masks: synthesize_random_mask(frame_size, f, latent, rng)?,
                prompt: ann.prompt.clone(),
                phrase: None,
                fallback: true,
            }),
            Err(e) => Err(e),
        },
        ClipKind::Random => Ok(ClipSample {
            kind,
            masks: synthesize_random_mask(frame_size, f, latent, rng)?,
            prompt: ann.prompt.clone(),
            phrase: None,
            fallback: false,
        }),
        ClipKind::NullPrompt => Ok(ClipSample {
            kind,
            masks: synthesize_random_mask(frame_size, f, latent, rng)?,
            prompt: String::new(),
            phrase: None,
            fallback: false,
        }),
    }
}

/// Write each mask frame as a binary PGM (P5, maxval 255, 0/255 values) named
/// `<prefix>_<frame>.pgm` under `dir`.
pub fn write_masks_pgm<E: Scalar>(
    mask: &Tensor<E>,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<std::path::PathBuf>> {
    if mask.rank() != 4 || mask.shape()[1] != 1 {
        return Err(Error::shape(format!(
            "expected [f, 1, w, h], got {:?}",
            mask.shape()
        )));
    }
    let (f, w, h) = (mask.shape()[0], mask.shape()[2], mask.shape()[3]);
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(f);
    for fi in 0..f {
        // PGM rows are image rows: height lines of width pixels.
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                bytes.push(if mask.get(&[fi, 0, x, y]) == E::zero() {
                    0
                } else {
                    255
                });
            }
        }
        let path = dir.join(format!("{prefix}_{fi:04}.pgm"));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
