//! Evaluation metrics: background preservation (BP), temporal consistency
//! (TC), and an embedding-pluggable CLIP-style score (CS).
//!
//! BP averages over all background pixels jointly (not per frame) and is
//! reported on the 0–255 scale. TC and CS are cosine similarities ×100.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::MaskSequence;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A metric value, or a marker for inputs where it has no meaning
/// (e.g. BP with no background pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Defined(v) => write!(f, "{v}"),
            MetricValue::Undefined => write!(f, "undefined"),
        }
    }
}

/// Mean L1 distance ×255 over pixels outside the mask, jointly across all
/// frames and channels. Pixel values are on the [0, 1] scale.
pub fn background_preservation<E: Scalar>(
    original: &Tensor<E>,
    result: &Tensor<E>,
    mask: &MaskSequence<E>,
) -> Result<MetricValue> {
    if original.shape() != result.shape() {
        return Err(Error::shape(format!(
            "original {:?} vs result {:?}",
            original.shape(),
            result.shape()
        )));
    }
    if original.rank() != 4 {
        return Err(Error::shape(format!(
            "expected [f, c, w, h], got {:?}",
            original.shape()
        )));
    }
    let (f, c, w, h) = (
        original.shape()[0],
        original.shape()[1],
        original.shape()[2],
        original.shape()[3],
    );
    if mask.m.shape() != [f, 1, w, h] {
        return Err(Error::shape(format!(
            "mask {:?} does not match frames [{f}, 1, {w}, {h}]",
            mask.m.shape()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for fi in 0..f {
        for x in 0..w {
            for y in 0..h {
                if mask.m.get(&[fi, 0, x, y]) != E::zero() {
                    continue;
                }
                for ch in 0..c {
                    let a = original.get(&[fi, ch, x, y]).as_f64();
                    let b = result.get(&[fi, ch, x, y]).as_f64();
                    sum += (a - b).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(MetricValue::Undefined);
    }
    Ok(MetricValue::Defined(sum / count as f64 * 255.0))
}

fn cosine_f64(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Mean cosine similarity over consecutive frame-feature pairs, ×100.
pub fn temporal_consistency(frame_features: &[Vec<f64>]) -> Result<MetricValue> {
    if frame_features.len() < 2 {
        return Err(Error::arg("need at least two frame features"));
    }
    let dim = frame_features[0].len();
    if frame_features.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("frame features must share one dimension"));
    }
    let mut sum = 0.0;
    for pair in frame_features.windows(2) {
        match cosine_f64(&pair[0], &pair[1]) {
            Some(c) => sum += c,
            None => return Ok(MetricValue::Undefined),
        }
    }
    Ok(MetricValue::Defined(
        sum / (frame_features.len() - 1) as f64 * 100.0,
    ))
}

/// Mean over frames of 100·cosine(frame, text), clamped at 0 from below.
pub fn clip_style_score(frame_features: &[Vec<f64>], text_feature: &[f64]) -> Result<MetricValue> {
    if frame_features.is_empty() {
        return Err(Error::arg("need at least one frame feature"));
    }
    if frame_features.iter().any(|v| v.len() != text_feature.len()) {
        return Err(Error::shape(format!(
            "feature dims do not match text dim {}",
            text_feature.len()
        )));
    }
    let mut sum = 0.0;
    for f in frame_features {
        match cosine_f64(f, text_feature) {
            Some(c) => sum += 100.0 * c,
            None => return Ok(MetricValue::Undefined),
        }
    }
    Ok(MetricValue::Defined(
        (sum / frame_features.len() as f64).max(0.0),
    ))
}

/// Deterministic map from frames or text to fixed-dim feature vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    /// Embed one `[c, w, h]` frame.
    fn embed_frame<E: Scalar>(&self, frame: &Tensor<E>) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Test provider: a seeded random projection of channel-mean-pooled pixels;
/// text is hashed into the same space. Deterministic per seed.
pub struct SeededEmbeddingProvider {
    dim: usize,
    seed: u64,
}

impl SeededEmbeddingProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        SeededEmbeddingProvider { dim, seed }
    }

    fn projection(&self, in_dim: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ in_dim as u64);
        Tensor::randn(vec![in_dim, self.dim], &mut rng)
    }
}

impl EmbeddingProvider for SeededEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame<E: Scalar>(&self, frame: &Tensor<E>) -> Result<Vec<f64>> {
        if frame.rank() != 3 {
            return Err(Error::shape(format!(
                "expected [c, w, h], got {:?}",
                frame.shape()
            )));
        }
        let c = frame.shape()[0];
        let per = frame.len() / c;
        let pooled: Vec<f64> = (0..c)
            .map(|ch| {
                frame.data()[ch * per..(ch + 1) * per]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / per as f64
            })
            .collect();
        let proj = self.projection(c);
        Ok((0..self.dim)
            .map(|j| (0..c).map(|i| pooled[i] * proj.get(&[i, j])).sum())
            .collect())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        // Stable FNV-1a hash seeds a per-text stream.
        let mut hash = 0xcbf29ce484222325u64;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ hash);
        Ok(Tensor::<f64>::randn(vec![self.dim], &mut rng)
            .data()
            .to_vec())
    }
}

/// Embed every frame of a `[f, c, w, h]` clip.
pub fn embed_clip<E: Scalar>(
    provider: &impl EmbeddingProvider,
    frames: &Tensor<E>,
) -> Result<Vec<Vec<f64>>> {
    if frames.rank() != 4 {
        return Err(Error::shape(format!(
            "expected [f, c, w, h], got {:?}",
            frames.shape()
        )));
    }
    (0..frames.shape()[0])
        .map(|fi| {
            let frame = frames.slice_axis(0, fi, fi + 1)?;
            let frame = frame.reshape(&frames.shape()[1..])?;
            provider.embed_frame(&frame)
        })
        .collect()
}

/// One evaluated clip for CSV reporting.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub clip_id: String,
    pub cs: MetricValue,
    pub bp: MetricValue,
    pub tc: MetricValue,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("clip_id,cs,bp,tc\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.clip_id, r.cs, r.bp, r.tc));
    }
    s
}
