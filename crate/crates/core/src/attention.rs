//! The motion-capture block: two temporal attentions, a damped global
//! attention (DGA) over a spatially downsampled joint sequence, and a textual
//! cross-attention, composed as pre-norm residual sublayers.
//!
//! Inputs are video feature tensors `[b, f, c, w1, h1]`. Temporal attention
//! packs to `[(b·w1·h1), f, c]` and attends over frames per spatial site; DGA
//! resizes each frame to `(w1', h1')` and attends over the joint sequence of
//! length `L = f·w1'·h1'`; cross-attention uses the same resized visual tokens
//! as queries against text-embedding keys/values. No positional encodings are
//! used, so tokens are unordered under plain self-attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{NodeId, Tape};
use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{ResizeMode, Scalar, Tensor};

/// Q/K/V/output projection weights for one multi-head attention layer.
/// For self-attention all four are `d_model × d_model`; for cross-attention
/// `wk`/`wv` are `d_text × d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams<E: Scalar> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub heads: usize,
}

impl<E: Scalar> AttentionParams<E> {
    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    fn validate_self(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if w.shape() != [d, d] {
                return Err(Error::shape(format!(
                    "attention weight {name} must be [{d}, {d}], got {:?}",
                    w.shape()
                )));
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "d_model {d} not divisible by heads {}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Per-sublayer normalization scale/shift over the channel axis.
#[derive(Debug, Clone)]
pub struct NormParams<E: Scalar> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
}

impl<E: Scalar> NormParams<E> {
    pub fn identity(c: usize) -> Self {
        NormParams {
            scale: Tensor::full(vec![c], E::one()),
            shift: Tensor::zeros(vec![c]),
        }
    }
}

/// Text conditioning tokens: `[l_text, d_text]`.
#[derive(Debug, Clone)]
pub struct TextEmbedding<E: Scalar> {
    pub tokens: Tensor<E>,
}

impl<E: Scalar> TextEmbedding<E> {
    pub fn new(tokens: Tensor<E>) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape(format!(
                "text embedding must be [l_text, d_text], got {:?}",
                tokens.shape()
            )));
        }
        Ok(TextEmbedding { tokens })
    }

    /// The reserved null prompt: a single all-zeros token.
    pub fn null(d_text: usize) -> Self {
        TextEmbedding {
            tokens: Tensor::zeros(vec![1, d_text]),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// All parameters of one motion-capture block.
#[derive(Debug, Clone)]
pub struct MotionBlockParams<E: Scalar> {
    pub temporal1: AttentionParams<E>,
    pub temporal2: AttentionParams<E>,
    pub dga: AttentionParams<E>,
    /// Downsampled spatial size (w1', h1') used by DGA and cross-attention.
    pub dga_target: (usize, usize),
    pub cross: AttentionParams<E>,
    /// Pre-norm parameters for the four sublayers, in application order.
    pub norms: [NormParams<E>; 4],
}

impl<E: Scalar> MotionBlockParams<E> {
    pub fn d_model(&self) -> usize {
        self.temporal1.d_model()
    }

    pub fn d_text(&self) -> usize {
        self.cross.wk.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        self.temporal1.validate_self()?;
        self.temporal2.validate_self()?;
        self.dga.validate_self()?;
        let d = self.d_model();
        let dt = self.d_text();
        if self.cross.wq.shape() != [d, d] || self.cross.wo.shape() != [d, d] {
            return Err(Error::shape("cross wq/wo must be d_model x d_model"));
        }
        if self.cross.wk.shape() != [dt, d] || self.cross.wv.shape() != [dt, d] {
            return Err(Error::shape("cross wk/wv must be d_text x d_model"));
        }
        if self.dga_target.0 == 0 || self.dga_target.1 == 0 {
            return Err(Error::arg("dga target sizes must be >= 1"));
        }
        Ok(())
    }

    /// Parameter tensors under their serialized names
    /// ("motion.<layer>.<matrix>").
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (layer, p) in [
            ("temporal1", &self.temporal1),
            ("temporal2", &self.temporal2),
            ("dga", &self.dga),
            ("cross", &self.cross),
        ] {
            out.push((format!("motion.{layer}.wq"), &p.wq));
            out.push((format!("motion.{layer}.wk"), &p.wk));
            out.push((format!("motion.{layer}.wv"), &p.wv));
            out.push((format!("motion.{layer}.wo"), &p.wo));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("motion.norm{}.scale", i + 1), &n.scale));
            out.push((format!("motion.norm{}.shift", i + 1), &n.shift));
        }
        out
    }

    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<E>)) {
        for (layer, p) in [
            ("temporal1", &mut self.temporal1),
            ("temporal2", &mut self.temporal2),
            ("dga", &mut self.dga),
            ("cross", &mut self.cross),
        ] {
            f(&format!("motion.{layer}.wq"), &mut p.wq);
            f(&format!("motion.{layer}.wk"), &mut p.wk);
            f(&format!("motion.{layer}.wv"), &mut p.wv);
            f(&format!("motion.{layer}.wo"), &mut p.wo);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            f(&format!("motion.norm{}.scale", i + 1), &mut n.scale);
            f(&format!("motion.norm{}.shift", i + 1), &mut n.shift);
        }
    }
}

/// Leaf node ids for all block parameters registered on a tape, in the same
/// order as [`MotionBlockParams::named_tensors`].
pub struct MotionBlockNodes {
    pub by_name: Vec<(String, NodeId)>,
}

impl MotionBlockNodes {
    pub fn id(&self, name: &str) -> NodeId {
        self.by_name
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .expect("unknown parameter name")
    }
}

/// Register every block parameter as a tape leaf.
pub fn register_block<E: Scalar>(
    tape: &mut Tape<E>,
    params: &MotionBlockParams<E>,
) -> MotionBlockNodes {
    let by_name = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let id = tape.leaf(t.clone());
            (name, id)
        })
        .collect();
    MotionBlockNodes { by_name }
}

struct AttnNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

fn attn_nodes(nodes: &MotionBlockNodes, layer: &str) -> AttnNodes {
    AttnNodes {
        wq: nodes.id(&format!("motion.{layer}.wq")),
        wk: nodes.id(&format!("motion.{layer}.wk")),
        wv: nodes.id(&format!("motion.{layer}.wv")),
        wo: nodes.id(&format!("motion.{layer}.wo")),
    }
}

/// Multi-head attention over token sequences already shaped `[B, L, c]`
/// (queries) and `[B, Lk, c_kv]` (keys/values), built from tape primitives.
fn taped_mha<E: Scalar>(
    tape: &mut Tape<E>,
    q_tokens: NodeId,
    kv_tokens: NodeId,
    p: &AttnNodes,
    heads: usize,
) -> Result<NodeId> {
    let q_shape = tape.value(q_tokens).shape().to_vec();
    let kv_shape = tape.value(kv_tokens).shape().to_vec();
    let (batch, lq) = (q_shape[0], q_shape[1]);
    let lk = kv_shape[1];
    let d = tape.value(p.wq).shape()[1];
    if !d.is_multiple_of(heads) {
        return Err(Error::arg(format!(
            "d_model {d} not divisible by heads {heads}"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(q_tokens, p.wq)?;
    let k = tape.matmul(kv_tokens, p.wk)?;
    let v = tape.matmul(kv_tokens, p.wv)?;
    let split = |tape: &mut Tape<E>, t: NodeId, l: usize| -> Result<NodeId> {
        let t = tape.reshape(t, &[batch, l, heads, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[batch * heads, l, dh])
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(probs, vh)?;
    let ctx = tape.reshape(ctx, &[batch, heads, lq, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let merged = tape.reshape(ctx, &[batch, lq, d])?;
    tape.matmul(merged, p.wo)
}

/// [b,f,c,w,h] -> [(b·w·h), f, c]; self-inverse permutation [0,3,4,1,2].
fn pack_temporal<E: Scalar>(tape: &mut Tape<E>, x: NodeId) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    let (b, f, c, w, h) = (s[0], s[1], s[2], s[3], s[4]);
    let p = tape.permute(x, &[0, 3, 4, 1, 2])?;
    tape.reshape(p, &[b * w * h, f, c])
}

fn unpack_temporal<E: Scalar>(
    tape: &mut Tape<E>,
    tokens: NodeId,
    shape: &[usize],
) -> Result<NodeId> {
    let (b, f, c, w, h) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let r = tape.reshape(tokens, &[b, w, h, f, c])?;
    tape.permute(r, &[0, 3, 4, 1, 2])
}

/// [b,f,c,w,h] -> [b, f·w·h, c] keeping (f, w, h) order within the sequence.
fn pack_joint<E: Scalar>(tape: &mut Tape<E>, x: NodeId) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    let (b, f, c, w, h) = (s[0], s[1], s[2], s[3], s[4]);
    let p = tape.permute(x, &[0, 1, 3, 4, 2])?;
    tape.reshape(p, &[b, f * w * h, c])
}

fn unpack_joint<E: Scalar>(tape: &mut Tape<E>, tokens: NodeId, shape: &[usize]) -> Result<NodeId> {
    let (b, f, c, w, h) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let r = tape.reshape(tokens, &[b, f, w, h, c])?;
    tape.permute(r, &[0, 1, 4, 2, 3])
}

fn check_input<E: Scalar>(x: &Tensor<E>, d_model: usize) -> Result<()> {
    if x.rank() != 5 {
        return Err(Error::shape(format!(
            "expected [b, f, c, w1, h1], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[2] != d_model {
        return Err(Error::shape(format!(
            "channel dim {} does not match d_model {}",
            x.shape()[2],
            d_model
        )));
    }
    Ok(())
}

/// Temporal attention on the tape: per spatial site, self-attention across
/// the frame axis.
pub fn temporal_attention_taped<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    p: &AttentionNodeIds,
    heads: usize,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let tokens = pack_temporal(tape, x)?;
    let out = taped_mha(tape, tokens, tokens, &p.0, heads)?;
    unpack_temporal(tape, out, &shape)
}

// Thin newtype so callers outside this module can hold attention leaf ids.
pub struct AttentionNodeIds(AttnNodes);

/// Damped global attention on the tape: resize to (w1', h1'), attend over the
/// joint sequence of length f·w1'·h1', resize back.
pub fn damped_global_attention_taped<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    p: &AttentionNodeIds,
    heads: usize,
    target: (usize, usize),
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (w, h) = (shape[3], shape[4]);
    if target.0 > w || target.1 > h {
        return Err(Error::arg(format!(
            "dga target {target:?} exceeds input spatial size ({w}, {h})"
        )));
    }
    let small = tape.resize(x, target, ResizeMode::Bilinear)?;
    let tokens = pack_joint(tape, small)?;
    let out = taped_mha(tape, tokens, tokens, &p.0, heads)?;
    let small_shape = tape.value(small).shape().to_vec();
    let back = unpack_joint(tape, out, &small_shape)?;
    tape.resize(back, (w, h), ResizeMode::Bilinear)
}

/// Textual cross-attention on the tape: resized visual tokens as queries,
/// text tokens (`[b, l_text, d_text]`) as keys and values.
pub fn textual_cross_attention_taped<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    text: NodeId,
    p: &AttentionNodeIds,
    heads: usize,
    target: (usize, usize),
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (w, h) = (shape[3], shape[4]);
    if target.0 > w || target.1 > h {
        return Err(Error::arg(format!(
            "cross target {target:?} exceeds input spatial size ({w}, {h})"
        )));
    }
    let d_text = tape.value(p.0.wk).shape()[0];
    if tape.value(text).shape()[2] != d_text {
        return Err(Error::shape(format!(
            "text dim {} does not match cross wk/wv input dim {}",
            tape.value(text).shape()[2],
            d_text
        )));
    }
    let small = tape.resize(x, target, ResizeMode::Bilinear)?;
    let tokens = pack_joint(tape, small)?;
    let out = taped_mha(tape, tokens, text, &p.0, heads)?;
    let small_shape = tape.value(small).shape().to_vec();
    let back = unpack_joint(tape, out, &small_shape)?;
    tape.resize(back, (w, h), ResizeMode::Bilinear)
}

/// Pre-norm over the channel axis in token space, returned in [b,f,c,w,h].
fn pre_norm<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let tokens = pack_joint(tape, x)?;
    let normed = tape.layer_norm(tokens, scale, shift)?;
    unpack_joint(tape, normed, &shape)
}

/// Full block on the tape: residual pre-norm composition in the order
/// temporal1, temporal2, DGA, cross.
pub fn motion_block_forward_taped<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    text: NodeId,
    nodes: &MotionBlockNodes,
    params: &MotionBlockParams<E>,
) -> Result<NodeId> {
    check_input(tape.value(x), params.d_model())?;
    let t1 = AttentionNodeIds(attn_nodes(nodes, "temporal1"));
    let t2 = AttentionNodeIds(attn_nodes(nodes, "temporal2"));
    let dga = AttentionNodeIds(attn_nodes(nodes, "dga"));
    let cross = AttentionNodeIds(attn_nodes(nodes, "cross"));
    let norm_ids: Vec<(NodeId, NodeId)> = (1..=4)
        .map(|i| {
            (
                nodes.id(&format!("motion.norm{i}.scale")),
                nodes.id(&format!("motion.norm{i}.shift")),
            )
        })
        .collect();

    let mut cur = x;
    let n = pre_norm(tape, cur, norm_ids[0].0, norm_ids[0].1)?;
    let a = temporal_attention_taped(tape, n, &t1, params.temporal1.heads)?;
    cur = tape.add(cur, a)?;

    let n = pre_norm(tape, cur, norm_ids[1].0, norm_ids[1].1)?;
    let a = temporal_attention_taped(tape, n, &t2, params.temporal2.heads)?;
    cur = tape.add(cur, a)?;

    let n = pre_norm(tape, cur, norm_ids[2].0, norm_ids[2].1)?;
    let a = damped_global_attention_taped(tape, n, &dga, params.dga.heads, params.dga_target)?;
    cur = tape.add(cur, a)?;

    let n = pre_norm(tape, cur, norm_ids[3].0, norm_ids[3].1)?;
    let a = textual_cross_attention_taped(
        tape,
        n,
        text,
        &cross,
        params.cross.heads,
        params.dga_target,
    )?;
    tape.add(cur, a)
}

fn single_attn_tape<E: Scalar>(
    x: &Tensor<E>,
    p: &AttentionParams<E>,
    layer: &str,
    run: impl FnOnce(&mut Tape<E>, NodeId, &AttentionNodeIds) -> Result<NodeId>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let nodes = AttentionNodeIds(AttnNodes {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        wv: tape.leaf(p.wv.clone()),
        wo: tape.leaf(p.wo.clone()),
    });
    let _ = layer;
    let out = run(&mut tape, xid, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Temporal attention on plain tensors (no norm, no residual).
pub fn temporal_attention<E: Scalar>(x: &Tensor<E>, p: &AttentionParams<E>) -> Result<Tensor<E>> {
    p.validate_self()?;
    check_input(x, p.d_model())?;
    single_attn_tape(x, p, "temporal", |tape, xid, nodes| {
        temporal_attention_taped(tape, xid, nodes, p.heads)
    })
}

/// Damped global attention on plain tensors.
pub fn damped_global_attention<E: Scalar>(
    x: &Tensor<E>,
    p: &AttentionParams<E>,
    target: (usize, usize),
) -> Result<Tensor<E>> {
    p.validate_self()?;
    check_input(x, p.d_model())?;
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::arg("dga target sizes must be >= 1"));
    }
    single_attn_tape(x, p, "dga", |tape, xid, nodes| {
        damped_global_attention_taped(tape, xid, nodes, p.heads, target)
    })
}

/// Textual cross-attention on plain tensors.
pub fn textual_cross_attention<E: Scalar>(
    x: &Tensor<E>,
    text: &TextEmbedding<E>,
    p: &AttentionParams<E>,
    target: (usize, usize),
) -> Result<Tensor<E>> {
    check_input(x, p.wq.shape()[0])?;
    let b = x.shape()[0];
    let (l, dt) = (text.len(), text.dim());
    if p.wk.shape()[0] != dt || p.wv.shape()[0] != dt {
        return Err(Error::shape(format!(
            "cross wk/wv input dim {} does not match text dim {dt}",
            p.wk.shape()[0]
        )));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let text_b = broadcast_text(&text.tokens, b)?;
    let tid = tape.leaf(text_b);
    let nodes = AttentionNodeIds(AttnNodes {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        wv: tape.leaf(p.wv.clone()),
        wo: tape.leaf(p.wo.clone()),
    });
    let _ = (l, dt);
    let out = textual_cross_attention_taped(&mut tape, xid, tid, &nodes, p.heads, target)?;
    Ok(tape.value(out).clone())
}

/// Replicate `[l, d]` text tokens into `[b, l, d]`.
pub fn broadcast_text<E: Scalar>(tokens: &Tensor<E>, b: usize) -> Result<Tensor<E>> {
    let refs: Vec<&Tensor<E>> = vec![tokens; b];
    let stacked = Tensor::concat(&refs, 0)?;
    stacked.reshape(&[b, tokens.shape()[0], tokens.shape()[1]])
}

/// Full block forward on plain tensors.
pub fn motion_block_forward<E: Scalar>(
    x: &Tensor<E>,
    text: &TextEmbedding<E>,
    params: &MotionBlockParams<E>,
) -> Result<Tensor<E>> {
    params.validate()?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let text_b = broadcast_text(&text.tokens, x.shape()[0])?;
    let tid = tape.leaf(text_b);
    let nodes = register_block(&mut tape, params);
    let out = motion_block_forward_taped(&mut tape, xid, tid, &nodes, params)?;
    Ok(tape.value(out).clone())
}

/// How new-layer output projections are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    /// Zero-init all `wo` so the untrained block is the identity map.
    Zero,
    /// Kaiming-init `wo` like the other projections.
    Kaiming,
}

/// Block construction options; `d_model` must be divisible by `heads`.
#[derive(Debug, Clone)]
pub struct MotionBlockConfig {
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
    pub dga_target: (usize, usize),
    pub output_init: OutputInit,
}

impl Default for MotionBlockConfig {
    fn default() -> Self {
        MotionBlockConfig {
            d_model: 8,
            d_text: 8,
            heads: 8,
            dga_target: (4, 4),
            output_init: OutputInit::Zero,
        }
    }
}

fn kaiming<E: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<E>
where
    StandardNormal: Distribution<f64>,
{
    // Fan-in mode with gain sqrt(2): std = sqrt(2 / fan_in).
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..fan_in * fan_out)
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// Build a motion block: temporal weights come from `pretrained` entries when
/// present (under their serialized names), everything else is Kaiming with
/// zero output projections by default.
pub fn init_motion_block<E: Scalar>(
    seed: u64,
    cfg: &MotionBlockConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MotionBlockParams<E>> {
    let d = cfg.d_model;
    if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
        return Err(Error::arg(format!(
            "d_model {d} not divisible by heads {}",
            cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk_self = |_layer: &str| -> AttentionParams<E> {
        let wq = kaiming(&mut rng, d, d);
        let wk = kaiming(&mut rng, d, d);
        let wv = kaiming(&mut rng, d, d);
        let wo = match cfg.output_init {
            OutputInit::Zero => Tensor::zeros(vec![d, d]),
            OutputInit::Kaiming => kaiming(&mut rng, d, d),
        };
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            heads: cfg.heads,
        }
    };
    let temporal1 = mk_self("temporal1");
    let temporal2 = mk_self("temporal2");
    let dga = mk_self("dga");
    let cross = AttentionParams {
        wq: kaiming(&mut rng, d, d),
        wk: kaiming(&mut rng, cfg.d_text, d),
        wv: kaiming(&mut rng, cfg.d_text, d),
        wo: match cfg.output_init {
            OutputInit::Zero => Tensor::zeros(vec![d, d]),
            OutputInit::Kaiming => kaiming(&mut rng, d, d),
        },
        heads: cfg.heads,
    };
    let mut params = MotionBlockParams {
        temporal1,
        temporal2,
        dga,
        dga_target: cfg.dga_target,
        cross,
        norms: [
            NormParams::identity(d),
            NormParams::identity(d),
            NormParams::identity(d),
            NormParams::identity(d),
        ],
    };
    if let Some(ckpt) = pretrained {
        let mut load_err = None;
        params.visit_tensors_mut(|name, tensor| {
            if load_err.is_some() || !name.contains("temporal") {
                return;
            }
            if let Some(rec) = ckpt.get(name) {
                let loaded: Tensor<E> = rec.to_tensor();
                if loaded.shape() != tensor.shape() {
                    load_err = Some(Error::Load {
                        entry: name.to_string(),
                        message: format!(
                            "checkpoint shape {:?} does not match expected {:?}",
                            loaded.shape(),
                            tensor.shape()
                        ),
                    });
                    return;
                }
                *tensor = loaded;
            }
        });
        if let Some(e) = load_err {
            return Err(e);
        }
    }
    Ok(params)
}

/// Attention-map size accounting for one block configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub b: usize,
    pub f: usize,
    pub w1: usize,
    pub h1: usize,
    pub target: (usize, usize),
    pub l_text: usize,
    /// Temporal attention: b·w1·h1 maps of f² elements each.
    pub temporal_map_count: u128,
    pub temporal_map_elems: u128,
    pub temporal_total: u128,
    /// Full global attention over all f·w1·h1 tokens, per batch element.
    pub naive_global_elems: u128,
    /// DGA joint sequence length L = f·w1'·h1'.
    pub dga_sequence_len: u128,
    pub dga_elems: u128,
    /// Standard cross-attention map: Lq·Lk = (f·w1'·h1')·l_text.
    pub cross_standard_elems: u128,
    /// Quoted cross-attention figures: (f·w1·h1·l_text)² and (f·l_text)².
    /// These do not match the standard Lq·Lk map size; both are reported.
    pub cross_quoted_full: u128,
    pub cross_quoted_reduced: u128,
}

impl CostReport {
    /// Exact reduction factor naive/DGA as a (numerator, denominator) pair;
    /// equals ((w1·h1)/(w1'·h1'))².
    pub fn dga_reduction(&self) -> (u128, u128) {
        (self.naive_global_elems, self.dga_elems)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mechanism,map_count,map_elems,total_elems\n");
        s.push_str(&format!(
            "temporal,{},{},{}\n",
            self.temporal_map_count, self.temporal_map_elems, self.temporal_total
        ));
        s.push_str(&format!(
            "naive_global,{},{},{}\n",
            self.b,
            self.naive_global_elems,
            self.b as u128 * self.naive_global_elems
        ));
        s.push_str(&format!(
            "dga,{},{},{}\n",
            self.b,
            self.dga_elems,
            self.b as u128 * self.dga_elems
        ));
        s.push_str(&format!(
            "cross_standard,{},{},{}\n",
            self.b,
            self.cross_standard_elems,
            self.b as u128 * self.cross_standard_elems
        ));
        s.push_str(&format!(
            "cross_quoted_full,1,{},{}\n",
            self.cross_quoted_full, self.cross_quoted_full
        ));
        s.push_str(&format!(
            "cross_quoted_reduced,1,{},{}\n",
            self.cross_quoted_reduced, self.cross_quoted_reduced
        ));
        s
    }
}

pub fn attention_cost_report(
    b: usize,
    f: usize,
    _c: usize,
    w1: usize,
    h1: usize,
    target: (usize, usize),
    l_text: usize,
) -> CostReport {
    let (w1p, h1p) = target;
    let fu = f as u128;
    let temporal_map_count = (b * w1 * h1) as u128;
    let temporal_map_elems = fu * fu;
    let naive_len = fu * (w1 * h1) as u128;
    let dga_len = fu * (w1p * h1p) as u128;
    let lt = l_text as u128;
    CostReport {
        b,
        f,
        w1,
        h1,
        target,
        l_text,
        temporal_map_count,
        temporal_map_elems,
        temporal_total: temporal_map_count * temporal_map_elems,
        naive_global_elems: naive_len * naive_len,
        dga_sequence_len: dga_len,
        dga_elems: dga_len * dga_len,
        cross_standard_elems: dga_len * lt,
        cross_quoted_full: (naive_len * lt) * (naive_len * lt),
        cross_quoted_reduced: (fu * lt) * (fu * lt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, rel_err};
    use crate::reference::naive_attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, d: usize, d_text: usize, heads: usize) -> MotionBlockParams<f64> {
        let cfg = MotionBlockConfig {
            d_model: d,
            d_text,
            heads,
            dga_target: (2, 2),
            output_init: OutputInit::Kaiming,
        };
        init_motion_block(seed, &cfg, None).unwrap()
    }

    #[test]
    fn temporal_single_frame_is_projection() {
        // f=1: singleton softmax, so out = x·wv·wo per token.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(1, 4, 4, 2).temporal1;
        let x = Tensor::<f64>::randn(vec![1, 1, 4, 3, 3], &mut rng);
        let out = temporal_attention(&x, &p).unwrap();
        let proj = p.wv.matmul(&p.wo).unwrap();
        for site in 0..9 {
            let (wi, hi) = (site / 3, site % 3);
            let tok = Tensor::new(
                vec![1, 4],
                (0..4)
                    .map(|c| x.get(&[0, 0, c, wi, hi]))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let want = tok.matmul(&proj).unwrap();
            for c in 0..4 {
                assert!((out.get(&[0, 0, c, wi, hi]) - want.get(&[0, c])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn temporal_constant_frames_stay_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(2, 4, 4, 2).temporal1;
        // Same value at each site for every frame.
        let base = Tensor::<f64>::randn(vec![1, 1, 4, 2, 2], &mut rng);
        let x = Tensor::from_fn(vec![1, 3, 4, 2, 2], |i| base.get(&[0, 0, i[2], i[3], i[4]]));
        let out = temporal_attention(&x, &p).unwrap();
        for c in 0..4 {
            for wi in 0..2 {
                for hi in 0..2 {
                    let v0 = out.get(&[0, 0, c, wi, hi]);
                    for f in 1..3 {
                        assert!((out.get(&[0, f, c, wi, hi]) - v0).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_matches_per_site_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(3, 4, 4, 2).temporal1;
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let out = temporal_attention(&x, &p).unwrap();
        for wi in 0..2 {
            for hi in 0..2 {
                // Per-site token sequence [1, f, c].
                let toks = Tensor::from_fn(vec![1, 2, 4], |i| x.get(&[0, i[1], i[2], wi, hi]));
                let q = toks.matmul(&p.wq).unwrap();
                let k = toks.matmul(&p.wk).unwrap();
                let v = toks.matmul(&p.wv).unwrap();
                let site = naive_attention(&q, &k, &v, p.heads).matmul(&p.wo).unwrap();
                for f in 0..2 {
                    for c in 0..4 {
                        let got = out.get(&[0, f, c, wi, hi]);
                        let want = site.get(&[0, f, c]);
                        assert!(
                            rel_err(got, want) < 1e-5,
                            "site ({wi},{hi}) f{f} c{c}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_is_spatially_local() {
        // Zeroing all sites but one changes nothing at the other sites
        // relative to the all-zero input.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(4, 4, 4, 2).temporal1;
        let zero = Tensor::<f64>::zeros(vec![1, 2, 4, 2, 2]);
        let zero_out = temporal_attention(&zero, &p).unwrap();
        let mut x = zero.clone();
        for f in 0..2 {
            for c in 0..4 {
                x.set(&[0, f, c, 1, 1], rng.gen_range(-1.0..1.0));
            }
        }
        let out = temporal_attention(&x, &p).unwrap();
        for f in 0..2 {
            for c in 0..4 {
                for wi in 0..2 {
                    for hi in 0..2 {
                        if (wi, hi) == (1, 1) {
                            continue;
                        }
                        let a = out.get(&[0, f, c, wi, hi]);
                        let b = zero_out.get(&[0, f, c, wi, hi]);
                        assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_commutes_with_frame_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(5, 4, 4, 2).temporal1;
        let x = Tensor::<f64>::randn(vec![1, 3, 4, 2, 2], &mut rng);
        let out = temporal_attention(&x, &p).unwrap();
        // Reverse the frame order.
        let xr = Tensor::from_fn(vec![1, 3, 4, 2, 2], |i| {
            x.get(&[0, 2 - i[1], i[2], i[3], i[4]])
        });
        let out_r = temporal_attention(&xr, &p).unwrap();
        let want = Tensor::from_fn(vec![1, 3, 4, 2, 2], |i| {
            out.get(&[0, 2 - i[1], i[2], i[3], i[4]])
        });
        assert!(out_r.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn dga_constant_input_stays_constant() {
        let p = random_params(6, 4, 4, 2).dga;
        let x = Tensor::<f64>::full(vec![1, 2, 4, 4, 4], 0.7);
        let out = damped_global_attention(&x, &p, (2, 2)).unwrap();
        for c in 0..4 {
            let v = out.get(&[0, 0, c, 0, 0]);
            for f in 0..2 {
                for wi in 0..4 {
                    for hi in 0..4 {
                        assert!((out.get(&[0, f, c, wi, hi]) - v).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn dga_matches_composition_oracle() {
        // f=2, 2x2 grid, target 1x1: resize -> attention over L=2 -> resize.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(7, 4, 4, 2).dga;
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let got = damped_global_attention(&x, &p, (1, 1)).unwrap();

        let small = x.resize_spatial((1, 1), ResizeMode::Bilinear).unwrap();
        let toks = Tensor::from_fn(vec![1, 2, 4], |i| small.get(&[0, i[1], i[2], 0, 0]));
        let q = toks.matmul(&p.wq).unwrap();
        let k = toks.matmul(&p.wk).unwrap();
        let v = toks.matmul(&p.wv).unwrap();
        let attended = naive_attention(&q, &k, &v, p.heads).matmul(&p.wo).unwrap();
        let back = Tensor::from_fn(vec![1, 2, 4, 1, 1], |i| attended.get(&[0, i[1], i[2]]))
            .resize_spatial((2, 2), ResizeMode::Bilinear)
            .unwrap();
        assert!(got.max_abs_diff(&back) < 1e-9);
    }

    #[test]
    fn dga_rejects_oversized_target() {
        let p = random_params(8, 4, 4, 2).dga;
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 2, 2]);
        assert!(damped_global_attention(&x, &p, (3, 2)).is_err());
        assert!(damped_global_attention(&x, &p, (0, 1)).is_err());
    }

    #[test]
    fn cross_single_token_injects_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(9, 4, 3, 2).cross;
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let tok = Tensor::<f64>::randn(vec![1, 3], &mut rng);
        let text = TextEmbedding::new(tok.clone()).unwrap();
        let out = textual_cross_attention(&x, &text, &p, (2, 2)).unwrap();
        let want = tok.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        for f in 0..2 {
            for c in 0..4 {
                for wi in 0..2 {
                    for hi in 0..2 {
                        assert!((out.get(&[0, f, c, wi, hi]) - want.get(&[0, c])).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(10, 4, 3, 2).cross;
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let text = TextEmbedding::new(Tensor::<f64>::randn(vec![3, 3], &mut rng)).unwrap();
        let got = textual_cross_attention(&x, &text, &p, (2, 2)).unwrap();

        // target == input size, so resize is identity: oracle attends the
        // flattened visual tokens against the text directly.
        let toks = Tensor::from_fn(vec![1, 8, 4], |i| {
            let (f, wi, hi) = (i[1] / 4, (i[1] % 4) / 2, i[1] % 2);
            x.get(&[0, f, i[2], wi, hi])
        });
        let q = toks.matmul(&p.wq).unwrap();
        let text3 = text.tokens.reshape(&[1, 3, 3]).unwrap();
        let k = text3.matmul(&p.wk).unwrap();
        let v = text3.matmul(&p.wv).unwrap();
        let site = naive_attention(&q, &k, &v, p.heads).matmul(&p.wo).unwrap();
        for f in 0..2 {
            for c in 0..4 {
                for wi in 0..2 {
                    for hi in 0..2 {
                        let got_v = got.get(&[0, f, c, wi, hi]);
                        let want_v = site.get(&[0, f * 4 + wi * 2 + hi, c]);
                        assert!(rel_err(got_v, want_v) < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_invariant_to_permuting_identical_text_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(11, 4, 3, 2).cross;
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let row = Tensor::<f64>::randn(vec![1, 3], &mut rng);
        let dup = Tensor::concat(&[&row, &row, &row], 0).unwrap();
        let a = textual_cross_attention(&x, &TextEmbedding::new(dup.clone()).unwrap(), &p, (2, 2))
            .unwrap();
        let b = textual_cross_attention(&x, &TextEmbedding::new(row).unwrap(), &p, (2, 2)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut params = random_params(12, 4, 3, 2);
        for p in [
            &mut params.temporal1,
            &mut params.temporal2,
            &mut params.dga,
            &mut params.cross,
        ] {
            p.wo = Tensor::zeros(vec![4, 4]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let text = TextEmbedding::new(Tensor::<f64>::randn(vec![2, 3], &mut rng)).unwrap();
        let out = motion_block_forward(&x, &text, &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn freshly_initialized_block_is_identity() {
        let cfg = MotionBlockConfig {
            d_model: 4,
            d_text: 3,
            heads: 2,
            dga_target: (2, 2),
            ..Default::default()
        };
        let params: MotionBlockParams<f64> = init_motion_block(13, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 2, 2], &mut rng);
        let text = TextEmbedding::new(Tensor::<f64>::randn(vec![2, 3], &mut rng)).unwrap();
        let out = motion_block_forward(&x, &text, &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn degenerate_single_frame_single_site_runs() {
        let params = random_params(14, 4, 3, 2);
        let x = Tensor::<f64>::full(vec![1, 1, 4, 1, 1], 0.3);
        let text = TextEmbedding::new(Tensor::<f64>::full(vec![1, 3], 0.1)).unwrap();
        let mut params = params;
        params.dga_target = (1, 1);
        let out = motion_block_forward(&x, &text, &params).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = MotionBlockConfig::default();
        let a: MotionBlockParams<f32> = init_motion_block(42, &cfg, None).unwrap();
        let b: MotionBlockParams<f32> = init_motion_block(42, &cfg, None).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let c: MotionBlockParams<f32> = init_motion_block(43, &cfg, None).unwrap();
        assert_ne!(a.temporal1.wq, c.temporal1.wq);
    }

    #[test]
    fn kaiming_sample_variance_in_expected_band() {
        let cfg = MotionBlockConfig {
            d_model: 64,
            d_text: 64,
            heads: 8,
            dga_target: (2, 2),
            output_init: OutputInit::Zero,
        };
        let p: MotionBlockParams<f64> = init_motion_block(99, &cfg, None).unwrap();
        // Pool wq from three layers: 3 * 4096 = 12288 >= 10k samples.
        let samples: Vec<f64> = [&p.temporal1.wq, &p.temporal2.wq, &p.dga.wq]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 64.0;
        assert!(var > 0.8 * expected && var < 1.2 * expected, "var {var}");
    }

    #[test]
    fn pretrained_temporal_weights_pass_through() {
        use crate::ckpt::{Checkpoint, TensorRecord};
        let cfg = MotionBlockConfig {
            d_model: 4,
            d_text: 4,
            heads: 2,
            dga_target: (2, 2),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = Tensor::<f32>::randn(vec![4, 4], &mut rng);
        let mut ckpt = Checkpoint::new();
        ckpt.insert("motion.temporal1.wq", TensorRecord::from_tensor(&w));
        let p: MotionBlockParams<f32> = init_motion_block(15, &cfg, Some(&ckpt)).unwrap();
        assert_eq!(p.temporal1.wq, w);

        let bad = Tensor::<f32>::zeros(vec![3, 3]);
        let mut ckpt2 = Checkpoint::new();
        ckpt2.insert("motion.temporal1.wq", TensorRecord::from_tensor(&bad));
        let err = init_motion_block::<f32>(15, &cfg, Some(&ckpt2)).unwrap_err();
        assert!(err.to_string().contains("motion.temporal1.wq"));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let params = random_params(20, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 4, 4], &mut rng);
        let text = Tensor::<f64>::randn(vec![2, 3], &mut rng);
        // Fixed random readout makes the output scalar.
        let readout = Tensor::<f64>::randn(vec![1, 2, 4, 4, 4], &mut rng);

        let run = |p: &MotionBlockParams<f64>| -> f64 {
            let out =
                motion_block_forward(&x, &TextEmbedding::new(text.clone()).unwrap(), p).unwrap();
            out.mul(&readout).unwrap().sum()
        };

        // Tape gradients for every parameter.
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let tid = tape.leaf(broadcast_text(&text, 1).unwrap());
        let nodes = register_block(&mut tape, &params);
        let out = motion_block_forward_taped(&mut tape, xid, tid, &nodes, &params).unwrap();
        let grads = tape.backward(out, &readout).unwrap();

        for (name, tensor) in params.named_tensors() {
            let got = grads.get_or_zeros(nodes.id(&name), tensor.shape());
            let mut f = |t: &Tensor<f64>| -> f64 {
                let mut p2 = params.clone();
                p2.visit_tensors_mut(|n, slot| {
                    if n == name {
                        *slot = t.clone();
                    }
                });
                run(&p2)
            };
            let fd = finite_diff_grad(&mut f, tensor, 1e-3);
            for (g, w) in got.data().iter().zip(fd.data()) {
                assert!(rel_err(*g, *w) < 1e-4, "param {name}: tape {g} vs fd {w}");
            }
        }
    }

    #[test]
    fn cost_report_arithmetic() {
        // f=16, w1=h1=8, target 4x4: DGA 256^2 vs naive 1024^2.
        let r = attention_cost_report(1, 16, 8, 8, 8, (4, 4), 5);
        assert_eq!(r.dga_sequence_len, 256);
        assert_eq!(r.dga_elems, 256 * 256);
        assert_eq!(r.naive_global_elems, 1024 * 1024);
        assert_eq!(r.naive_global_elems / r.dga_elems, 16);

        // Boundary: target == (w1, h1) makes DGA equal to naive global.
        let r2 = attention_cost_report(1, 4, 8, 6, 5, (6, 5), 3);
        assert_eq!(r2.dga_elems, r2.naive_global_elems);

        // f=16, target 8x6 -> L = 768.
        let r3 = attention_cost_report(1, 16, 8, 16, 12, (8, 6), 7);
        assert_eq!(r3.dga_sequence_len, 768);

        // Quoted cross reduction factor at w1=8, h1=6: (w1*h1)^2 = 2304.
        let r4 = attention_cost_report(1, 2, 8, 8, 6, (8, 6), 4);
        assert_eq!(r4.cross_quoted_full / r4.cross_quoted_reduced, 2304);
    }

    #[test]
    fn dga_never_exceeds_naive_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let w1 = rng.gen_range(1..10usize);
            let h1 = rng.gen_range(1..10usize);
            let t = (rng.gen_range(1..=w1), rng.gen_range(1..=h1));
            let r = attention_cost_report(1, rng.gen_range(1..8), 8, w1, h1, t, 3);
            assert!(r.dga_elems <= r.naive_global_elems);
        }
    }
}
