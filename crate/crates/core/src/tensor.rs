//! Dense row-major tensors and the numeric primitives shared by every module.
//!
//! Production code runs at `f32`; test oracles instantiate the same ops at
//! `f64`. All operations return fresh tensors (views may copy).

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type for tensors: `f32` in production, `f64` in oracle/test mode.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Interpolation mode for [`Tensor::resize_spatial`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Bilinear with align-corners=false semantics. The default.
    Bilinear,
    Nearest,
}

/// Dense n-dimensional array with row-major contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dimension");
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: E) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dimension");
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> E) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape, data }
    }

    /// Standard-normal fill; draws are made in f64 so f32 and f64 tensors
    /// share the same random stream for a given rng state.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                E::from_f64(v)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn get(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: E) {
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat] = v;
    }

    /// Relabel the shape; the row-major data order is unchanged.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        if new_shape.contains(&0) {
            return Err(Error::shape(format!(
                "zero-sized dimension in {new_shape:?}"
            )));
        }
        if numel(new_shape) != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) into {:?} ({} elems)",
                self.shape,
                self.len(),
                new_shape,
                numel(new_shape)
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorder axes. `order[j]` names the old axis landing at new position `j`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if order.len() != rank {
            return Err(Error::arg(format!(
                "permutation {order:?} has wrong length for rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &o in order {
            if o >= rank || seen[o] {
                return Err(Error::arg(format!(
                    "{order:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[o] = true;
        }
        let new_shape: Vec<usize> = order.iter().map(|&o| self.shape[o]).collect();
        let old_strides = self.strides();
        let mut out = Tensor::zeros(new_shape.clone());
        let mut idx = vec![0usize; rank];
        for flat in 0..out.data.len() {
            let src: usize = (0..rank).map(|j| idx[j] * old_strides[order[j]]).sum();
            out.data[flat] = self.data[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < new_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|v| v * c)
    }

    /// Sum of all elements, accumulated at f64.
    pub fn sum(&self) -> E {
        E::from_f64(self.data.iter().map(|v| v.as_f64()).sum::<f64>())
    }

    pub fn mean(&self) -> E {
        E::from_f64(self.sum().as_f64() / self.len() as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::arg(format!("concat axis {axis} out of rank {rank}")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for ax in 0..rank {
                if ax != axis && p.shape[ax] != first.shape[ax] {
                    return Err(Error::shape(format!(
                        "concat shape mismatch on axis {ax}: {:?} vs {:?}",
                        p.shape, first.shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::arg(format!("slice axis {axis} out of rank {rank}")));
        }
        if start >= end || end > self.shape[axis] {
            return Err(Error::arg(format!(
                "slice [{start}, {end}) out of bounds for axis size {}",
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut out_shape = self.shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + (end - start) * inner]);
        }
        Tensor::new(out_shape, data)
    }

    /// Batched matrix product over the last two axes. Leading batch dims must
    /// match exactly, or one operand may be rank 2 and is shared across the
    /// other's batch.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::shape("matmul operands must have rank >= 2"));
        }
        let (m, k1) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k1 != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims mismatch: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let a_batch = &self.shape[..self.rank() - 2];
        let b_batch = &other.shape[..other.rank() - 2];
        let (batch_shape, a_shared, b_shared) = if a_batch == b_batch {
            (a_batch.to_vec(), false, false)
        } else if b_batch.is_empty() {
            (a_batch.to_vec(), false, true)
        } else if a_batch.is_empty() {
            (b_batch.to_vec(), true, false)
        } else {
            return Err(Error::shape(format!(
                "matmul batch dims incompatible: {:?} x {:?}",
                self.shape, other.shape
            )));
        };
        let batches: usize = batch_shape.iter().product();
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![E::zero(); batches * m * n];
        let k = k1;
        for b in 0..batches {
            let a_off = if a_shared { 0 } else { b * m * k };
            let b_off = if b_shared { 0 } else { b * k * n };
            let o_off = b * m * n;
            for i in 0..m {
                for p in 0..k {
                    let av = self.data[a_off + i * k + p];
                    let brow = &other.data[b_off + p * n..b_off + (p + 1) * n];
                    let orow = &mut data[o_off + i * n..o_off + (i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::arg(format!(
                "softmax axis {axis} out of rank {}",
                self.rank()
            )));
        }
        let lanes = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut mx = E::neg_infinity();
                for l in 0..lanes {
                    let v = self.data[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = E::zero();
                for l in 0..lanes {
                    let e = (self.data[base + l * inner] - mx).exp();
                    out.data[base + l * inner] = e;
                    denom = denom + e;
                }
                for l in 0..lanes {
                    out.data[base + l * inner] = out.data[base + l * inner] / denom;
                }
            }
        }
        Ok(out)
    }

    /// Resample the last two axes to `(w, h)`. The map is linear in the input,
    /// so its transpose distributes gradients in the backward pass.
    pub fn resize_spatial(&self, target: (usize, usize), mode: ResizeMode) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("resize needs rank >= 2"));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::arg("resize target dimension must be >= 1"));
        }
        let (w_in, h_in) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (w_out, h_out) = target;
        if (w_in, h_in) == (w_out, h_out) {
            return Ok(self.clone());
        }
        let mut out_shape = self.shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = w_out;
        out_shape[r - 1] = h_out;
        let planes: usize = self.shape[..r - 2].iter().product();
        let w_taps = resize_taps(w_in, w_out, mode);
        let h_taps = resize_taps(h_in, h_out, mode);
        let mut data = vec![E::zero(); planes * w_out * h_out];
        for p in 0..planes {
            let src = &self.data[p * w_in * h_in..(p + 1) * w_in * h_in];
            let dst = &mut data[p * w_out * h_out..(p + 1) * w_out * h_out];
            for (x, wt) in w_taps.iter().enumerate() {
                for (y, ht) in h_taps.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for &(xi, xw) in wt {
                        for &(yi, yw) in ht {
                            acc += xw * yw * src[xi * h_in + yi].as_f64();
                        }
                    }
                    dst[x * h_out + y] = E::from_f64(acc);
                }
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Transpose of [`Tensor::resize_spatial`]: scatter an output-sized tensor
    /// back to input size with the same interpolation weights.
    pub fn resize_spatial_transpose(
        &self,
        source: (usize, usize),
        mode: ResizeMode,
    ) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("resize needs rank >= 2"));
        }
        let (w_out, h_out) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (w_in, h_in) = source;
        if (w_in, h_in) == (w_out, h_out) {
            return Ok(self.clone());
        }
        let mut out_shape = self.shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = w_in;
        out_shape[r - 1] = h_in;
        let planes: usize = self.shape[..r - 2].iter().product();
        let w_taps = resize_taps(w_in, w_out, mode);
        let h_taps = resize_taps(h_in, h_out, mode);
        let mut data = vec![E::zero(); planes * w_in * h_in];
        for p in 0..planes {
            let src = &self.data[p * w_out * h_out..(p + 1) * w_out * h_out];
            let dst = &mut data[p * w_in * h_in..(p + 1) * w_in * h_in];
            for (x, wt) in w_taps.iter().enumerate() {
                for (y, ht) in h_taps.iter().enumerate() {
                    let g = src[x * h_out + y].as_f64();
                    for &(xi, xw) in wt {
                        for &(yi, yw) in ht {
                            let cell = &mut dst[xi * h_in + yi];
                            *cell = E::from_f64(cell.as_f64() + xw * yw * g);
                        }
                    }
                }
            }
        }
        Tensor::new(out_shape, data)
    }
}

/// Per-output-coordinate (source index, weight) taps for a 1-D resize.
fn resize_taps(n_in: usize, n_out: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| match mode {
            ResizeMode::Nearest => {
                let src = ((i as f64 + 0.5) * scale).floor() as isize;
                let src = src.clamp(0, n_in as isize - 1) as usize;
                vec![(src, 1.0)]
            }
            ResizeMode::Bilinear => {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let x0 = src.floor();
                let frac = src - x0;
                let i0 = (x0 as isize).clamp(0, n_in as isize - 1) as usize;
                let i1 = (x0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
                if i0 == i1 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            }
        })
        .collect()
}

/// Multi-head scaled dot-product attention:
/// `softmax(q·kᵀ / sqrt(d/heads)) · v` per head, heads concatenated.
pub fn scaled_dot_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
) -> Result<Tensor<E>> {
    if q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank() {
        return Err(Error::shape("attention operands must share rank >= 2"));
    }
    let r = q.rank();
    let d = q.shape()[r - 1];
    let dv = v.shape()[r - 1];
    let lq = q.shape()[r - 2];
    let lk = k.shape()[r - 2];
    if k.shape()[r - 1] != d {
        return Err(Error::shape("q/k feature dims differ"));
    }
    if v.shape()[r - 2] != lk {
        return Err(Error::shape("k/v sequence lengths differ"));
    }
    if q.shape()[..r - 2] != k.shape()[..r - 2] || q.shape()[..r - 2] != v.shape()[..r - 2] {
        return Err(Error::shape("attention batch dims differ"));
    }
    if heads == 0 || !d.is_multiple_of(heads) || !dv.is_multiple_of(heads) {
        return Err(Error::arg(format!(
            "feature dims ({d}, {dv}) not divisible by heads {heads}"
        )));
    }
    let dh = d / heads;
    let dvh = dv / heads;
    let batch: usize = q.shape()[..r - 2].iter().product();
    // [B, L, H*dh] -> [B*H, L, dh]
    let split = |t: &Tensor<E>, l: usize, dim: usize| -> Result<Tensor<E>> {
        t.reshape(&[batch, l, heads, dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * heads, l, dim])
    };
    let qh = split(q, lq, dh)?;
    let kh = split(k, lk, dh)?;
    let vh = split(v, lk, dvh)?;
    let kt = kh.permute(&[0, 2, 1])?;
    let scores = qh.matmul(&kt)?.scale(E::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = scores.softmax(2)?;
    let ctx = probs.matmul(&vh)?;
    let merged = ctx
        .reshape(&[batch, heads, lq, dvh])?
        .permute(&[0, 2, 1, 3])?;
    let mut out_shape = q.shape()[..r - 2].to_vec();
    out_shape.push(lq);
    out_shape.push(dv);
    merged.reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_relabels_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect::<Vec<_>>()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn pack_unpack_round_trip_bit_exact() {
        // [b=1,f=2,c=1,w=2,h=2] -> [(b*w*h)=4, f=2, c=1] and back.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::randn(vec![1, 2, 1, 2, 2], &mut rng);
        let packed = x
            .permute(&[0, 3, 4, 1, 2])
            .unwrap()
            .reshape(&[4, 2, 1])
            .unwrap();
        let back = packed
            .reshape(&[1, 2, 2, 2, 1])
            .unwrap()
            .permute(&[0, 3, 4, 1, 2])
            .unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn pack_of_constant_frames_yields_per_site_sequences() {
        // Frame 0 all 1s, frame 1 all 2s: each packed site sequence is [1, 2].
        let x = Tensor::<f64>::from_fn(vec![1, 2, 1, 2, 2], |idx| (idx[1] + 1) as f64);
        let packed = x
            .permute(&[0, 3, 4, 1, 2])
            .unwrap()
            .reshape(&[4, 2, 1])
            .unwrap();
        // Index oracle: packed[(s, f, 0)] must equal f+1 for every site s.
        for s in 0..4 {
            for f in 0..2 {
                assert_eq!(packed.get(&[s, f, 0]), (f + 1) as f64);
            }
        }
    }

    #[test]
    fn permute_identity_and_transpose() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.permute(&[0, 1]).unwrap(), t);
        let tr = t.permute(&[1, 0]).unwrap();
        assert_eq!(tr.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
    }

    #[test]
    fn permute_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::randn(vec![2, 3, 4], &mut rng);
        let p = t.permute(&[1, 2, 0]).unwrap();
        let back = p.permute(&[2, 0, 1]).unwrap();
        // Index-walk oracle on a few coordinates plus full equality.
        assert_eq!(p.get(&[2, 3, 1]), t.get(&[1, 2, 3]));
        assert_eq!(back, t);
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Tensor::<f32>::randn(vec![3, 3], &mut rng);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i[0] == i[1] { 1.0f32 } else { 0.0 });
        assert_eq!(m.matmul(&eye).unwrap(), m);
        assert!(a.matmul(&Tensor::<f64>::zeros(vec![3, 1])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Tensor::<f32>::randn(vec![4, 5], &mut rng);
        let b = Tensor::<f32>::randn(vec![5, 3], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for p in 0..5 {
                    acc += a.get(&[i, p]) as f64 * b.get(&[p, j]) as f64;
                }
                let got = c.get(&[i, j]) as f64;
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let t = Tensor::new(vec![3], vec![0.0f32, 0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let big = Tensor::new(vec![2], vec![1000.0f32, 0.0]).unwrap();
        let s = big.softmax(0).unwrap();
        assert!(s.data()[0].is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (got, want) in s.data().iter().zip(exps.iter().map(|e| e / denom)) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_constancy_and_identity() {
        let t = Tensor::<f32>::full(vec![1, 1, 4, 4], 3.0);
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            let r = t.resize_spatial((2, 2), mode).unwrap();
            assert_eq!(r.shape(), &[1, 1, 2, 2]);
            for &v in r.data() {
                assert!((v - 3.0).abs() < 1e-6);
            }
        }
        let same = t.resize_spatial((4, 4), ResizeMode::Bilinear).unwrap();
        assert_eq!(same, t);
        assert!(t.resize_spatial((0, 2), ResizeMode::Bilinear).is_err());
    }

    #[test]
    fn resize_bilinear_matches_closed_form() {
        // 2x2 [[0,1],[2,3]] upsampled to 4x4, align-corners=false.
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let r = t.resize_spatial((4, 4), ResizeMode::Bilinear).unwrap();
        let sample = |x: f64, y: f64| -> f64 {
            // Closed-form bilinear over the 2x2 grid with edge clamping.
            let sx = (x + 0.5) * 0.5 - 0.5;
            let sy = (y + 0.5) * 0.5 - 0.5;
            let cx = sx.clamp(0.0, 1.0);
            let cy = sy.clamp(0.0, 1.0);
            // value(x, y) = 2x + y on the source grid.
            2.0 * cx + cy
        };
        for x in 0..4 {
            for y in 0..4 {
                let want = sample(x as f64, y as f64);
                let got = r.get(&[0, 0, x, y]);
                assert!(
                    (got - want).abs() < 1e-12,
                    "({x},{y}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn attention_singleton_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::randn(vec![1, 3, 4], &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 1, 4], &mut rng);
        let v = Tensor::<f64>::randn(vec![1, 1, 4], &mut rng);
        let out = scaled_dot_attention(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.get(&[0, i, j]) - v.get(&[0, 0, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::<f64>::randn(vec![1, 2, 4], &mut rng);
        let krow = Tensor::<f64>::randn(vec![1, 1, 4], &mut rng);
        let k = Tensor::concat(&[&krow, &krow, &krow], 1).unwrap();
        let v = Tensor::<f64>::randn(vec![1, 3, 4], &mut rng);
        let out = scaled_dot_attention(&q, &k, &v, 1).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mean = (v.get(&[0, 0, j]) + v.get(&[0, 1, j]) + v.get(&[0, 2, j])) / 3.0;
                assert!((out.get(&[0, i, j]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (lq, lk, d, heads) = (3usize, 4usize, 8usize, 2usize);
        let q = Tensor::<f64>::randn(vec![1, lq, d], &mut rng);
        let k = Tensor::<f64>::randn(vec![1, lk, d], &mut rng);
        let v = Tensor::<f64>::randn(vec![1, lk, d], &mut rng);
        let got = scaled_dot_attention(&q, &k, &v, heads).unwrap();
        let want = crate::reference::naive_attention(&q, &k, &v, heads);
        let denom = want.max_abs().max(1e-9);
        assert!(got.max_abs_diff(&want) / denom < 1e-5);
        assert!(scaled_dot_attention(&q, &k, &v, 3).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 2..16),
            shift in -5.0f64..5.0,
        ) {
            let n = vals.len();
            let t = Tensor::new(vec![n], vals).unwrap();
            let s = t.softmax(0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let shifted = t.map(|v| v + shift).softmax(0).unwrap();
            prop_assert!(s.max_abs_diff(&shifted) < 1e-6);
        }

        #[test]
        fn reshape_permute_round_trips(
            dims in proptest::collection::vec(1usize..5, 2..4),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(dims.clone(), &mut rng);
            let flat = t.reshape(&[t.len()]).unwrap();
            prop_assert_eq!(flat.reshape(&dims).unwrap(), t.clone());
            let order: Vec<usize> = (0..dims.len()).rev().collect();
            let mut inv = vec![0usize; dims.len()];
            for (j, &o) in order.iter().enumerate() { inv[o] = j; }
            let back = t.permute(&order).unwrap().permute(&inv).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
