//! `vidin`: batch front end for the video-inpainting toolkit.
//!
//! Exit codes: 0 success, 1 validation, 2 I/O, 3 numeric failure.
//! Every subcommand echoes its fully resolved configuration (seed included)
//! and writes outputs via temp-file + rename so failures leave no partial
//! files behind.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vidin_core::attention::{attention_cost_report, TextEmbedding};
use vidin_core::ckpt::{
    layer_similarity_report, load_checkpoint, merge, pad_input_channels, save_checkpoint,
    task_vector, Checkpoint, LayerClassifier, MergeRecipe, TensorRecord,
};
use vidin_core::diffusion::{
    build_schedule, ddim_sample, parse_train_config, train_toy, LatentClip, MaskSequence,
    SamplerConfig, ToyCodec, ToyDenoiser, TrainConfig, TrainSample,
};
use vidin_core::region::{
    associate_tokenspan, sample_training_clip, synthesize_instance_mask, synthesize_random_mask,
    write_masks_pgm, ClipKind, DetectionAnnotation, MaskStyle,
};
use vidin_core::tensor::Tensor;
use vidin_core::Error as CoreError;

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

struct CliError {
    code: u8,
    msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.msg)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Io(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        msg: msg.into(),
    }
}

fn io_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_IO,
        msg: msg.into(),
    }
}

fn numeric(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_NUMERIC,
        msg: msg.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

/// Atomic text/bytes write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(format!("{}: {e}", dir.display())))?;
    let name = path
        .file_name()
        .ok_or_else(|| validation(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| io_err(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| io_err(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(io_err(format!("checkpoint not found: {}", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// "WxH" → (w, h).
fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((w, h))
}

/// "a,b,c" → (a, b, c).
fn parse_probs(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    Ok((parts[0], parts[1], parts[2]))
}

#[derive(Parser)]
#[command(name = "vidin", version, about = "Video-inpainting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MaskMode {
    /// Box mask following the tracked instance.
    Instance,
    /// Random static/moving/stroke mask.
    Random,
    /// Categorical draw over precise/random/null-prompt per `--probs`.
    Mixed,
}

#[derive(Subcommand)]
enum Cmd {
    /// Merge inpainting and personalization task vectors into a base model.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        inpaint: PathBuf,
        #[arg(long)]
        personalized: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Layer whose input channels are zero-padded in the base and
        /// personalized checkpoints before differencing (e.g. conv_in).
        #[arg(long)]
        pad_layer: Option<String>,
        #[arg(long, default_value_t = 4)]
        pad_from: usize,
        #[arg(long, default_value_t = 9)]
        pad_to: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate training masks from a detection annotation.
    MaskGen {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "mixed")]
        mode: MaskMode,
        #[arg(long, value_parser = parse_probs, default_value = "0.7,0.2,0.1")]
        probs: (f64, f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, value_parser = parse_size, default_value = "32x24")]
        frame_size: (usize, usize),
        #[arg(long, value_parser = parse_size, default_value = "16x12")]
        latent_size: (usize, usize),
        #[arg(long, default_value_t = 0.2)]
        score_threshold: f64,
        /// Re-check that instance masks cover their boxes before exiting.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Overfit the toy denoiser on a synthetic clip.
    TrainToy {
        /// Flat key=value file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run DDIM inpainting with a trained toy denoiser.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 14.0)]
        cfg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, value_parser = parse_size, default_value = "16x12")]
        latent_size: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-wise cosine-similarity table between two checkpoints.
    Analyze {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention cost table for a motion-block configuration.
    CostReport {
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, value_parser = parse_size, default_value = "4x4")]
        target: (usize, usize),
        #[arg(long, default_value_t = 77)]
        text_len: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 320)]
        channels: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Merge {
            base,
            inpaint,
            personalized,
            alpha,
            beta,
            pad_layer,
            pad_from,
            pad_to,
            out,
        } => cmd_merge(
            &base,
            &inpaint,
            &personalized,
            alpha,
            beta,
            pad_layer.as_deref(),
            pad_from,
            pad_to,
            &out,
        ),
        Cmd::MaskGen {
            annotations,
            mode,
            probs,
            seed,
            frames,
            frame_size,
            latent_size,
            score_threshold,
            verify,
            out_dir,
        } => cmd_mask_gen(
            &annotations,
            mode,
            probs,
            seed,
            frames,
            frame_size,
            latent_size,
            score_threshold,
            verify,
            &out_dir,
        ),
        Cmd::TrainToy { config, out_dir } => cmd_train_toy(config.as_deref(), &out_dir),
        Cmd::Sample {
            ckpt,
            steps,
            cfg,
            seed,
            frames,
            latent_size,
            out,
        } => cmd_sample(&ckpt, steps, cfg, seed, frames, latent_size, &out),
        Cmd::Analyze { a, b, out } => cmd_analyze(&a, &b, &out),
        Cmd::CostReport {
            frames,
            width,
            height,
            target,
            text_len,
            batch,
            channels,
            out,
        } => cmd_cost_report(
            frames,
            width,
            height,
            target,
            text_len,
            batch,
            channels,
            out.as_deref(),
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_merge(
    base: &Path,
    inpaint: &Path,
    personalized: &Path,
    alpha: f64,
    beta: f64,
    pad_layer: Option<&str>,
    pad_from: usize,
    pad_to: usize,
    out: &Path,
) -> CliResult<()> {
    println!(
        "config: {}",
        json!({
            "subcommand": "merge",
            "base": base, "inpaint": inpaint, "personalized": personalized,
            "alpha": alpha, "beta": beta,
            "pad_layer": pad_layer, "pad_from": pad_from, "pad_to": pad_to,
            "out": out,
        })
    );
    let recipe = MergeRecipe::new(alpha, beta)?;
    for w in recipe.warnings() {
        eprintln!("warning: {w}");
    }
    let mut theta_base = load_ckpt(base)?;
    let theta_ip = load_ckpt(inpaint)?;
    let mut theta_p = load_ckpt(personalized)?;
    if let Some(layer) = pad_layer {
        // The non-inpainting checkpoints lack the mask/masked-latent input
        // channels; zero-pad them so the task vectors line up.
        theta_base = pad_input_channels(&theta_base, layer, pad_from, pad_to)?;
        theta_p = pad_input_channels(&theta_p, layer, pad_from, pad_to)?;
    }
    let tau_ip = task_vector(&theta_ip, &theta_base)?;
    let tau_p = task_vector(&theta_p, &theta_base)?;
    let (merged, unmatched) = merge(&theta_base, &tau_ip, &tau_p, recipe)?;
    save_checkpoint(&merged, out)?;
    let report = out.with_extension("unmatched.txt");
    let mut lines: Vec<String> = Vec::new();
    lines.extend(
        tau_ip
            .only_in_a
            .iter()
            .map(|k| format!("inpaint-only: {k}")),
    );
    lines.extend(
        tau_ip
            .only_in_b
            .iter()
            .map(|k| format!("base-only (vs inpaint): {k}")),
    );
    lines.extend(
        tau_p
            .only_in_a
            .iter()
            .map(|k| format!("personalized-only: {k}")),
    );
    lines.extend(
        tau_p
            .only_in_b
            .iter()
            .map(|k| format!("base-only (vs personalized): {k}")),
    );
    lines.extend(
        unmatched
            .iter()
            .map(|k| format!("delta without base key: {k}")),
    );
    write_atomic(&report, lines.join("\n").as_bytes())?;
    println!(
        "wrote {} ({} tensors) and {} ({} unmatched keys)",
        out.display(),
        merged.len(),
        report.display(),
        lines.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mask_gen(
    annotations: &Path,
    mode: MaskMode,
    probs: (f64, f64, f64),
    seed: u64,
    frames: usize,
    frame_size: (usize, usize),
    latent_size: (usize, usize),
    score_threshold: f64,
    verify: bool,
    out_dir: &Path,
) -> CliResult<()> {
    let mode_name = match mode {
        MaskMode::Instance => "instance",
        MaskMode::Random => "random",
        MaskMode::Mixed => "mixed",
    };
    println!(
        "config: {}",
        json!({
            "subcommand": "mask-gen",
            "annotations": annotations, "mode": mode_name,
            "probs": [probs.0, probs.1, probs.2], "seed": seed,
            "frames": frames, "frame_size": frame_size, "latent_size": latent_size,
            "score_threshold": score_threshold, "verify": verify, "out_dir": out_dir,
        })
    );
    if (probs.0 + probs.1 + probs.2 - 1.0).abs() > 1e-9
        || probs.0 < 0.0
        || probs.1 < 0.0
        || probs.2 < 0.0
    {
        return Err(validation(format!(
            "probabilities must be nonnegative and sum to 1, got {probs:?}"
        )));
    }
    let ann = DetectionAnnotation::from_file(annotations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (kind, prompt, phrase, masks, boxes) = match mode {
        MaskMode::Instance => {
            let tracks = associate_tokenspan(&ann, score_threshold)?;
            let track = &tracks[0];
            let mut boxes: Vec<_> = track.boxes.iter().take(frames).copied().collect();
            let last = *boxes
                .last()
                .ok_or_else(|| validation("annotation has no frames"))?;
            boxes.resize(frames, last);
            let masks = synthesize_instance_mask::<f32>(
                &boxes,
                frame_size,
                latent_size,
                MaskStyle::Box,
                &mut rng,
            )?;
            (
                "precise".to_string(),
                ann.prompt.clone(),
                Some(track.phrase.clone()),
                masks,
                Some(boxes),
            )
        }
        MaskMode::Random => {
            let masks = synthesize_random_mask::<f32>(frame_size, frames, latent_size, &mut rng)?;
            ("random".to_string(), ann.prompt.clone(), None, masks, None)
        }
        MaskMode::Mixed => {
            let s = sample_training_clip::<f32>(
                &ann,
                frames,
                frame_size,
                latent_size,
                probs,
                score_threshold,
                &mut rng,
            )?;
            let kind = match s.kind {
                ClipKind::Precise => "precise",
                ClipKind::Random => "random",
                ClipKind::NullPrompt => "null-prompt",
            };
            (kind.to_string(), s.prompt, s.phrase, s.masks, None)
        }
    };

    if verify {
        if let Some(boxes) = &boxes {
            let (w, h) = frame_size;
            for (fi, b) in boxes.iter().enumerate() {
                let (x0, y0, x1, y1) = b.rasterize(w, h);
                for x in x0..x1 {
                    for y in y0..y1 {
                        if masks.m.get(&[fi, 0, x, y]) != 1.0 {
                            return Err(numeric(format!(
                                "verify failed: frame {fi} mask does not cover its box"
                            )));
                        }
                    }
                }
            }
            println!("verify: instance masks cover all boxes");
        } else {
            println!("verify: nothing to check for mode {mode_name}");
        }
    }

    let paths = write_masks_pgm(&masks.m, out_dir, "mask")?;
    let files: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let manifest = serde_json::to_vec_pretty(&json!({
        "kind": kind,
        "prompt": prompt,
        "phrase": phrase,
        "seed": seed,
        "mask_files": files,
    }))
    .expect("manifest is valid JSON");
    write_atomic(&out_dir.join("manifest.json"), &manifest)?;
    println!("wrote {} masks to {}", files.len(), out_dir.display());
    Ok(())
}

/// Synthetic single-clip dataset used by `train-toy` and as the known
/// latents for `sample` smoke runs: seeded normal latents and a centered box
/// mask occupying the middle quarter of the frame.
fn synthetic_clip(seed: u64, frames: usize, latent: (usize, usize)) -> CliResult<TrainSample<f64>> {
    let (w1, h1) = latent;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c11b);
    let z0 = LatentClip::new(Tensor::<f64>::randn(vec![frames, 4, w1, h1], &mut rng))?;
    let mut m = Tensor::<f64>::zeros(vec![frames, 1, w1, h1]);
    for fi in 0..frames {
        for x in w1 / 4..(3 * w1).div_ceil(4) {
            for y in h1 / 4..(3 * h1).div_ceil(4) {
                m.set(&[fi, 0, x, y], 1.0);
            }
        }
    }
    Ok(TrainSample {
        z0,
        mask: MaskSequence::new(m, latent)?,
        text: TextEmbedding::null(TOY_D_TEXT),
    })
}

const TOY_D_TEXT: usize = 4;
const TOY_HEADS: usize = 2;
const TOY_DGA_TARGET: (usize, usize) = (8, 6);
const TOY_FRAMES: usize = 8;
const TOY_LATENT: (usize, usize) = (16, 12);

fn cmd_train_toy(config: Option<&Path>, out_dir: &Path) -> CliResult<()> {
    let cfg = match config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| io_err(format!("{}: {e}", p.display())))?;
            parse_train_config(&text)?
        }
        None => TrainConfig::default(),
    };
    println!(
        "config: {}",
        json!({
            "subcommand": "train-toy",
            "steps": cfg.steps, "lr": cfg.lr, "seed": cfg.seed,
            "t_fixed": cfg.t_fixed, "t_steps": cfg.t_steps,
            "beta_start": cfg.beta_start, "beta_end": cfg.beta_end,
            "frames": TOY_FRAMES, "latent_size": TOY_LATENT,
            "d_text": TOY_D_TEXT, "heads": TOY_HEADS, "dga_target": TOY_DGA_TARGET,
            "out_dir": out_dir,
        })
    );
    let dataset = vec![synthetic_clip(cfg.seed, TOY_FRAMES, TOY_LATENT)?];
    let mut denoiser: ToyDenoiser<f64> = ToyDenoiser::init(
        cfg.seed,
        TOY_D_TEXT,
        TOY_HEADS,
        TOY_DGA_TARGET,
        cfg.t_steps,
        true,
    )?;
    let losses = train_toy(&mut denoiser, &dataset, &cfg)?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(numeric("training diverged: non-finite loss"));
    }

    let mut ckpt = Checkpoint::new();
    for (name, t) in denoiser.named_tensors() {
        ckpt.insert(name, TensorRecord::from_tensor(t));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(format!("{}: {e}", out_dir.display())))?;
    save_checkpoint(&ckpt, &out_dir.join("toy.ckpt"))?;
    let meta = serde_json::to_vec_pretty(&json!({
        "d_text": TOY_D_TEXT,
        "heads": TOY_HEADS,
        "dga_target": [TOY_DGA_TARGET.0, TOY_DGA_TARGET.1],
        "t_max": cfg.t_steps,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
    }))
    .expect("meta is valid JSON");
    write_atomic(&out_dir.join("toy.meta.json"), &meta)?;
    write_atomic(
        &out_dir.join("loss.csv"),
        vidin_core::diffusion::loss_curve_csv(&losses).as_bytes(),
    )?;
    println!(
        "wrote {}: initial loss {:.6}, final loss {:.6}",
        out_dir.display(),
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

struct ToyMeta {
    d_text: usize,
    heads: usize,
    dga_target: (usize, usize),
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
}

fn read_toy_meta(ckpt_path: &Path) -> CliResult<ToyMeta> {
    let meta_path = ckpt_path.with_extension("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| io_err(format!("{}: {e}", meta_path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(CoreError::from)?;
    let get_u = |key: &str| {
        v.get(key)
            .and_then(|x| x.as_u64())
            .map(|x| x as usize)
            .ok_or_else(|| validation(format!("{}: missing field `{key}`", meta_path.display())))
    };
    let get_f = |key: &str| {
        v.get(key)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| validation(format!("{}: missing field `{key}`", meta_path.display())))
    };
    let target = v
        .get("dga_target")
        .and_then(|x| x.as_array())
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| {
            validation(format!(
                "{}: missing field `dga_target`",
                meta_path.display()
            ))
        })?;
    Ok(ToyMeta {
        d_text: get_u("d_text")?,
        heads: get_u("heads")?,
        dga_target: target,
        t_max: get_u("t_max")?,
        beta_start: get_f("beta_start")?,
        beta_end: get_f("beta_end")?,
    })
}

fn cmd_sample(
    ckpt_path: &Path,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    frames: usize,
    latent: (usize, usize),
    out: &Path,
) -> CliResult<()> {
    println!(
        "config: {}",
        json!({
            "subcommand": "sample",
            "ckpt": ckpt_path, "steps": steps, "cfg": cfg_scale, "seed": seed,
            "frames": frames, "latent_size": latent, "out": out,
        })
    );
    let meta = read_toy_meta(ckpt_path)?;
    let ckpt = load_ckpt(ckpt_path)?;
    let mut denoiser: ToyDenoiser<f64> = ToyDenoiser::init(
        0,
        meta.d_text,
        meta.heads,
        meta.dga_target,
        meta.t_max,
        true,
    )?;
    let mut load_errors = Vec::new();
    denoiser.visit_tensors_mut(|name, t| match ckpt.get(name) {
        Some(rec) if rec.shape == t.shape() => *t = rec.to_tensor(),
        Some(rec) => load_errors.push(format!(
            "`{name}`: checkpoint shape {:?} vs expected {:?}",
            rec.shape,
            t.shape()
        )),
        None => load_errors.push(format!("`{name}`: missing from checkpoint")),
    });
    if !load_errors.is_empty() {
        return Err(validation(load_errors.join("; ")));
    }

    let sched = build_schedule(meta.t_max, meta.beta_start, meta.beta_end)?;
    let clip = synthetic_clip(seed, frames, latent)?;
    let sampler = SamplerConfig::new(steps, cfg_scale, seed);
    let result = ddim_sample(
        |input| denoiser.forward(input),
        &clip.mask,
        &clip.z0,
        &clip.text,
        &sched,
        &sampler,
    )?;
    if result.latents.z.data().iter().any(|v| !v.is_finite()) {
        return Err(numeric("sampling produced non-finite latents"));
    }
    let decoded = ToyCodec::default_seeded(0).decode(&result.latents)?;

    let mut out_ckpt = Checkpoint::new();
    out_ckpt.insert("latents", TensorRecord::from_tensor(&result.latents.z));
    out_ckpt.insert("decoded", TensorRecord::from_tensor(&decoded));
    out_ckpt.insert("mask", TensorRecord::from_tensor(&clip.mask.m_bar));
    save_checkpoint(&out_ckpt, out)?;
    println!(
        "wrote {} (latents {:?}, decoded {:?})",
        out.display(),
        result.latents.z.shape(),
        decoded.shape()
    );
    Ok(())
}

fn cmd_analyze(a: &Path, b: &Path, out: &Path) -> CliResult<()> {
    println!(
        "config: {}",
        json!({ "subcommand": "analyze", "a": a, "b": b, "out": out })
    );
    let ca = load_ckpt(a)?;
    let cb = load_ckpt(b)?;
    let report = layer_similarity_report(&ca, &cb, &LayerClassifier::default())?;
    write_atomic(out, report.to_csv().as_bytes())?;
    println!(
        "wrote {} ({} layers, {} groups, {} unclassified)",
        out.display(),
        report.rows.len(),
        report.group_means.len(),
        report.unclassified.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cost_report(
    frames: usize,
    width: usize,
    height: usize,
    target: (usize, usize),
    text_len: usize,
    batch: usize,
    channels: usize,
    out: Option<&Path>,
) -> CliResult<()> {
    println!(
        "config: {}",
        json!({
            "subcommand": "cost-report",
            "frames": frames, "width": width, "height": height,
            "target": target, "text_len": text_len, "batch": batch, "channels": channels,
        })
    );
    if target.0 > width || target.1 > height || target.0 == 0 || target.1 == 0 {
        return Err(validation(format!(
            "target {target:?} must be within 1..={width}x{height}"
        )));
    }
    let report = attention_cost_report(batch, frames, channels, width, height, target, text_len);
    let csv = report.to_csv();
    print!("{csv}");
    let (num, den) = report.dga_reduction();
    println!("dga map reduction: {num}/{den} = {}x", num / den.max(1));
    if let Some(p) = out {
        write_atomic(p, csv.as_bytes())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
