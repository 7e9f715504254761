//! Checkpoint codec and task-vector merging.
//!
//! Checkpoints are ordered name → tensor maps stored in the "CKPT1" container
//! (fixed little-endian f32 payload, JSON header). Merging follows the
//! task-vector recipe θ_new = θ_base + α·τ_ip + β·τ_p over the shared key
//! set, with unmatched keys reported rather than silently dropped.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 5] = b"CKPT1";

/// One stored tensor: f32 values plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::shape(format!(
                "record shape {shape:?} inconsistent with {} values",
                data.len()
            )));
        }
        Ok(TensorRecord { shape, data })
    }

    pub fn from_tensor<E: Scalar>(t: &Tensor<E>) -> Self {
        TensorRecord {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| E::from_f64(*v as f64)).collect(),
        )
        .expect("record invariant")
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// Ordered map name → tensor record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, rec: TensorRecord) {
        let name = name.into();
        assert!(!name.is_empty(), "checkpoint names must be non-empty");
        self.entries.insert(name, rec);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Serialize to the CKPT1 container at `path`, writing to a temp file in the
/// same directory and renaming into place on success.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = Vec::new();
    let mut offset = 0u64;
    for (name, rec) in ckpt.iter() {
        header.push(HeaderEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: rec.shape.clone(),
            offset,
            nbytes: rec.nbytes() as u64,
        });
        offset += rec.nbytes() as u64;
    }
    // BTreeMap iteration is already name-sorted, matching the format's
    // sorted-header requirement.
    let header_json = serde_json::to_vec(&header)?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy())
            .unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, rec) in ckpt.iter() {
        for v in &rec.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 13 {
        return Err(Error::format("file", "shorter than fixed preamble"));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::format("magic", "expected CKPT1"));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|l| l.checked_add(13).is_some_and(|end| end <= bytes.len()))
        .ok_or_else(|| Error::format("header_length", "exceeds file size"))?;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&bytes[13..13 + header_len])
        .map_err(|e| Error::format("header", format!("invalid JSON: {e}")))?;
    let payload = &bytes[13 + header_len..];
    let mut ckpt = Checkpoint::new();
    let mut prev_name: Option<&str> = None;
    for e in &header {
        if e.name.is_empty() {
            return Err(Error::format("name", "empty tensor name"));
        }
        if let Some(p) = prev_name {
            if p >= e.name.as_str() {
                return Err(Error::format("name", "header entries not sorted by name"));
            }
        }
        prev_name = Some(&e.name);
        if e.dtype != "f32" {
            return Err(Error::format(
                "dtype",
                format!("unsupported dtype {}", e.dtype),
            ));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count as u64 * 4 != e.nbytes {
            return Err(Error::format(
                "nbytes",
                format!(
                    "entry {}: shape {:?} does not match nbytes {}",
                    e.name, e.shape, e.nbytes
                ),
            ));
        }
        let range = usize::try_from(e.offset).ok().and_then(|start| {
            usize::try_from(e.nbytes)
                .ok()
                .and_then(|n| start.checked_add(n).map(|end| (start, end)))
        });
        let Some((start, end)) = range else {
            return Err(Error::format(
                "offset",
                format!("entry {}: offset/nbytes overflow", e.name),
            ));
        };
        if end > payload.len() {
            return Err(Error::format(
                "offset",
                format!("entry {}: payload range {start}..{end} truncated", e.name),
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ckpt.insert(&e.name, TensorRecord::new(e.shape.clone(), data)?);
    }
    let expected: usize = header.iter().map(|e| e.nbytes as usize).sum();
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!(
                "payload is {} bytes, header promises {expected}",
                payload.len()
            ),
        ));
    }
    Ok(ckpt)
}

/// Zero-pad the input-channel axis (axis 1) of the named tensor from `from`
/// to `to` channels; original weights occupy channels `0..from`.
pub fn pad_input_channels(
    ckpt: &Checkpoint,
    layer: &str,
    from: usize,
    to: usize,
) -> Result<Checkpoint> {
    let rec = ckpt.get(layer).ok_or_else(|| Error::Merge {
        key: layer.to_string(),
        message: "no such tensor".to_string(),
    })?;
    if rec.shape.len() < 2 || rec.shape[1] != from {
        return Err(Error::shape(format!(
            "tensor {layer} has shape {:?}, expected input-channel axis of size {from}",
            rec.shape
        )));
    }
    if to < from {
        return Err(Error::arg("target channel count below source"));
    }
    let mut shape = rec.shape.clone();
    shape[1] = to;
    let tail: usize = rec.shape[2..].iter().product();
    let mut data = vec![0.0f32; shape.iter().product()];
    for o in 0..rec.shape[0] {
        for c in 0..from {
            let src = (o * from + c) * tail;
            let dst = (o * to + c) * tail;
            data[dst..dst + tail].copy_from_slice(&rec.data[src..src + tail]);
        }
    }
    let mut out = ckpt.clone();
    out.insert(layer, TensorRecord::new(shape, data)?);
    Ok(out)
}

/// Per-tensor difference over the shared key set, with unmatched keys from
/// either side listed explicitly.
#[derive(Debug, Clone, Default)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, TensorRecord>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

pub fn task_vector(a: &Checkpoint, b: &Checkpoint) -> Result<TaskVector> {
    let mut tv = TaskVector::default();
    for (name, ra) in a.iter() {
        match b.get(name) {
            None => tv.only_in_a.push(name.to_string()),
            Some(rb) => {
                if ra.shape != rb.shape {
                    return Err(Error::Merge {
                        key: name.to_string(),
                        message: format!("shape conflict: {:?} vs {:?}", ra.shape, rb.shape),
                    });
                }
                let data = ra.data.iter().zip(&rb.data).map(|(x, y)| x - y).collect();
                tv.deltas
                    .insert(name.to_string(), TensorRecord::new(ra.shape.clone(), data)?);
            }
        }
    }
    for (name, _) in b.iter() {
        if a.get(name).is_none() {
            tv.only_in_b.push(name.to_string());
        }
    }
    Ok(tv)
}

/// α/β blending coefficients. Values outside the recommended ranges
/// α ∈ [0.5, 1.5], β ∈ [1, 2] are allowed but flagged by `warnings()`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeRecipe {
    pub alpha: f64,
    pub beta: f64,
}

impl MergeRecipe {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::arg("alpha and beta must be finite"));
        }
        Ok(MergeRecipe { alpha, beta })
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(0.5..=1.5).contains(&self.alpha) {
            w.push(format!(
                "alpha {} outside recommended range [0.5, 1.5]",
                self.alpha
            ));
        }
        if !(1.0..=2.0).contains(&self.beta) {
            w.push(format!(
                "beta {} outside recommended range [1, 2]",
                self.beta
            ));
        }
        w
    }
}

/// θ_new = θ_base + α·τ_ip + β·τ_p over keys of `base`; τ entries missing a
/// base key are reported in the returned unmatched list.
pub fn merge(
    base: &Checkpoint,
    tau_ip: &TaskVector,
    tau_p: &TaskVector,
    recipe: MergeRecipe,
) -> Result<(Checkpoint, Vec<String>)> {
    let mut out = Checkpoint::new();
    let mut unmatched: Vec<String> = Vec::new();
    for (name, rb) in base.iter() {
        let mut acc: Vec<f64> = rb.data.iter().map(|v| *v as f64).collect();
        for (tv, coef) in [(tau_ip, recipe.alpha), (tau_p, recipe.beta)] {
            if let Some(d) = tv.deltas.get(name) {
                if d.shape != rb.shape {
                    return Err(Error::Merge {
                        key: name.to_string(),
                        message: format!(
                            "shape conflict: base {:?} vs delta {:?}",
                            rb.shape, d.shape
                        ),
                    });
                }
                for (a, v) in acc.iter_mut().zip(&d.data) {
                    *a += coef * *v as f64;
                }
            }
        }
        out.insert(
            name,
            TensorRecord::new(
                rb.shape.clone(),
                acc.into_iter().map(|v| v as f32).collect(),
            )?,
        );
    }
    for tv in [tau_ip, tau_p] {
        for name in tv.deltas.keys() {
            if base.get(name).is_none() && !unmatched.contains(name) {
                unmatched.push(name.clone());
            }
        }
    }
    Ok((out, unmatched))
}

/// The six name-based layer types of the similarity taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerType {
    Conv,
    Query,
    Key,
    Value,
    OutputProjection,
    Ffn,
}

impl LayerType {
    pub const ALL: [LayerType; 6] = [
        LayerType::Conv,
        LayerType::Query,
        LayerType::Key,
        LayerType::Value,
        LayerType::OutputProjection,
        LayerType::Ffn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LayerType::Conv => "conv",
            LayerType::Query => "query",
            LayerType::Key => "key",
            LayerType::Value => "value",
            LayerType::OutputProjection => "output_projection",
            LayerType::Ffn => "ffn",
        }
    }
}

/// Down/middle/up block regions of a UNet-style parameter name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockRegion {
    Down,
    Middle,
    Up,
}

impl BlockRegion {
    pub const ALL: [BlockRegion; 3] = [BlockRegion::Down, BlockRegion::Middle, BlockRegion::Up];

    pub fn label(self) -> &'static str {
        match self {
            BlockRegion::Down => "down",
            BlockRegion::Middle => "middle",
            BlockRegion::Up => "up",
        }
    }
}

/// Name-pattern classifier mapping a tensor name to (layer type, region).
/// Default patterns match the common "to_q/to_k/to_v/to_out/conv/ff" and
/// "down_blocks/mid_block/up_blocks" conventions.
pub struct LayerClassifier {
    type_rules: Vec<(String, LayerType)>,
    region_rules: Vec<(String, BlockRegion)>,
}

impl Default for LayerClassifier {
    fn default() -> Self {
        LayerClassifier {
            type_rules: vec![
                ("to_q".into(), LayerType::Query),
                ("to_k".into(), LayerType::Key),
                ("to_v".into(), LayerType::Value),
                ("to_out".into(), LayerType::OutputProjection),
                ("conv".into(), LayerType::Conv),
                ("ff".into(), LayerType::Ffn),
            ],
            region_rules: vec![
                ("down_blocks".into(), BlockRegion::Down),
                ("mid_block".into(), BlockRegion::Middle),
                ("up_blocks".into(), BlockRegion::Up),
            ],
        }
    }
}

impl LayerClassifier {
    pub fn with_rules(
        type_rules: Vec<(String, LayerType)>,
        region_rules: Vec<(String, BlockRegion)>,
    ) -> Self {
        LayerClassifier {
            type_rules,
            region_rules,
        }
    }

    pub fn classify(&self, name: &str) -> Option<(LayerType, BlockRegion)> {
        let ty = self
            .type_rules
            .iter()
            .find(|(pat, _)| name.contains(pat.as_str()))
            .map(|(_, t)| *t)?;
        let region = self
            .region_rules
            .iter()
            .find(|(pat, _)| name.contains(pat.as_str()))
            .map(|(_, r)| *r)?;
        Some((ty, region))
    }
}

/// Cosine similarity, or `Undefined` when either operand has zero norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Defined(f64),
    Undefined,
}

impl Similarity {
    pub fn value(self) -> Option<f64> {
        match self {
            Similarity::Defined(v) => Some(v),
            Similarity::Undefined => None,
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Similarity {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        Similarity::Undefined
    } else {
        Similarity::Defined(dot / (na.sqrt() * nb.sqrt()))
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityRow {
    pub name: String,
    pub layer_type: Option<LayerType>,
    pub region: Option<BlockRegion>,
    pub similarity: Similarity,
}

#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    /// Mean similarity per (type, region) cell over classified, defined rows.
    pub group_means: BTreeMap<(LayerType, BlockRegion), f64>,
    pub unclassified: Vec<String>,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,layer_type,region,similarity\n");
        for r in &self.rows {
            let sim = match r.similarity {
                Similarity::Defined(v) => format!("{v}"),
                Similarity::Undefined => "undefined".to_string(),
            };
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.name,
                r.layer_type.map(|t| t.label()).unwrap_or("-"),
                r.region.map(|t| t.label()).unwrap_or("-"),
                sim
            ));
        }
        s.push_str("\ngroup,region,mean_similarity\n");
        for ((t, g), v) in &self.group_means {
            s.push_str(&format!("{},{},{v}\n", t.label(), g.label()));
        }
        s
    }
}

/// Per-shared-tensor cosine similarity, grouped by the classifier into
/// layer-type × block-region cells.
pub fn layer_similarity_report(
    a: &Checkpoint,
    b: &Checkpoint,
    classifier: &LayerClassifier,
) -> Result<SimilarityReport> {
    let mut rows = Vec::new();
    let mut unclassified = Vec::new();
    let mut sums: BTreeMap<(LayerType, BlockRegion), (f64, usize)> = BTreeMap::new();
    for (name, ra) in a.iter() {
        let Some(rb) = b.get(name) else { continue };
        if ra.shape != rb.shape {
            return Err(Error::Merge {
                key: name.to_string(),
                message: format!("shape conflict: {:?} vs {:?}", ra.shape, rb.shape),
            });
        }
        let sim = cosine(&ra.data, &rb.data);
        let cls = classifier.classify(name);
        if cls.is_none() {
            unclassified.push(name.to_string());
        }
        if let (Some((t, g)), Similarity::Defined(v)) = (cls, sim) {
            let e = sums.entry((t, g)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        rows.push(SimilarityRow {
            name: name.to_string(),
            layer_type: cls.map(|c| c.0),
            region: cls.map(|c| c.1),
            similarity: sim,
        });
    }
    if rows.is_empty() {
        return Err(Error::Merge {
            key: String::new(),
            message: "no shared keys between checkpoints".to_string(),
        });
    }
    let group_means = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    Ok(SimilarityReport {
        rows,
        group_means,
        unclassified,
    })
}

/// One cell of an α/β sensitivity sweep: either the evaluator's metric map
/// or the error it produced.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub metrics: std::result::Result<BTreeMap<String, f64>, String>,
}

/// Evaluate every (α, β) grid cell; evaluator failures are captured per cell
/// and the sweep continues.
pub fn sensitivity_sweep(
    base: &Checkpoint,
    tau_ip: &TaskVector,
    tau_p: &TaskVector,
    alphas: &[f64],
    betas: &[f64],
    mut evaluator: impl FnMut(&Checkpoint) -> Result<BTreeMap<String, f64>>,
) -> Result<Vec<SweepCell>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::arg("sweep grids must be non-empty"));
    }
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let recipe = MergeRecipe::new(alpha, beta)?;
            let metrics = merge(base, tau_ip, tau_p, recipe)
                .map_err(|e| e.to_string())
                .and_then(|(ckpt, _)| evaluator(&ckpt).map_err(|e| e.to_string()));
            cells.push(SweepCell {
                alpha,
                beta,
                metrics,
            });
        }
    }
    Ok(cells)
}

pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    // Stable union of metric names across successful cells.
    let mut names: Vec<String> = Vec::new();
    for c in cells {
        if let Ok(m) = &c.metrics {
            for k in m.keys() {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
    }
    let mut s = String::from("alpha,beta,status");
    for n in &names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for c in cells {
        match &c.metrics {
            Ok(m) => {
                s.push_str(&format!("{},{},ok", c.alpha, c.beta));
                for n in &names {
                    s.push(',');
                    if let Some(v) = m.get(n) {
                        s.push_str(&format!("{v}"));
                    }
                }
                s.push('\n');
            }
            Err(e) => {
                s.push_str(&format!(
                    "{},{},error: {}\n",
                    c.alpha,
                    c.beta,
                    e.replace(',', ";")
                ));
            }
        }
    }
    s
}
