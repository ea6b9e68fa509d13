//! Row-at-a-time inference kernels.
//!
//! Every kernel processes one row with a fixed summation order, so running a
//! sequence through them row by row with a [`KvCache`] gives the same bits as
//! running the whole sequence at once.

use num_traits::Float;

use super::{AttentionMask, Tensor};
use crate::error::{Error, Result};

/// `out = x · w` for `w` stored `[in × out]`; accumulates over `in` in
/// ascending order.
pub fn linear<T: Float>(x: &[T], w: &Tensor<T>, out: &mut [T]) {
    let n = w.cols();
    debug_assert_eq!(x.len() * n, w.numel());
    debug_assert_eq!(out.len(), n);
    out.fill(T::zero());
    let wd = w.data();
    for (k, &xk) in x.iter().enumerate() {
        let wr = &wd[k * n..(k + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o = *o + xk * wv;
        }
    }
}

pub fn linear_vec<T: Float>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    linear(x, w, &mut out);
    out
}

pub fn rms_norm<T: Float>(x: &[T], w: &[T], eps: T) -> Vec<T> {
    let d = T::from(x.len()).unwrap();
    let mut ms = T::zero();
    for &v in x {
        ms = ms + v * v;
    }
    let inv = T::one() / (ms / d + eps).sqrt();
    x.iter().zip(w).map(|(&v, &g)| v * inv * g).collect()
}

pub fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Rotates interleaved pairs of every head in place.
pub fn rope<T: Float>(x: &mut [T], n_heads: usize, position: usize, base: f64) {
    let hd = x.len() / n_heads;
    for i in 0..hd / 2 {
        let theta = position as f64 * base.powf(-2.0 * i as f64 / hd as f64);
        let (c, s) = (T::from(theta.cos()).unwrap(), T::from(theta.sin()).unwrap());
        for h in 0..n_heads {
            let j = h * hd + 2 * i;
            let (x0, x1) = (x[j], x[j + 1]);
            x[j] = x0 * c - x1 * s;
            x[j + 1] = x0 * s + x1 * c;
        }
    }
}

/// Attention of a single query row over keys `lo..=hi` of `keys`/`values`
/// (row-major, width `d`), summing in ascending key order.
pub fn attend<T: Float>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n_heads: usize,
    lo: usize,
    hi: usize,
) -> Vec<T> {
    let d = q.len();
    let hd = d / n_heads;
    let scale = T::one() / T::from(hd).unwrap().sqrt();
    let mut out = vec![T::zero(); d];
    let mut scores = Vec::with_capacity(hi + 1 - lo);
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        scores.clear();
        let mut max = T::neg_infinity();
        for j in lo..=hi {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let mut s = T::zero();
            for (&a, &b) in qh.iter().zip(kh) {
                s = s + a * b;
            }
            let s = s * scale;
            max = max.max(s);
            scores.push(s);
        }
        let mut z = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z = z + *s;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (jj, &s) in scores.iter().enumerate() {
            let p = s / z;
            let j = lo + jj;
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o = *o + p * v;
            }
        }
    }
    out
}

/// Full-sequence attention through the single-row kernel.
pub fn attend_all<T: Float>(
    q: &[T],
    keys: &[T],
    values: &[T],
    d: usize,
    n_heads: usize,
    mask: &AttentionMask,
) -> Vec<T> {
    let mut out = Vec::with_capacity(q.len());
    for i in 0..mask.len() {
        let (lo, hi) = mask.range(i);
        out.extend(attend(&q[i * d..(i + 1) * d], keys, values, n_heads, lo, hi));
    }
    out
}

/// Per-layer key/value rows appended one position at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T = f32> {
    width: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Float> KvCache<T> {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            width,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    /// Positions cached in `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.iter().all(Vec::is_empty)
    }

    /// Appends the key/value rows for `position`, which must be the next one.
    pub fn append(&mut self, layer: usize, position: usize, k: &[T], v: &[T]) -> Result<()> {
        let len = self.len(layer);
        if position != len {
            return Err(Error::State(format!(
                "cache layer {layer} holds {len} positions, query offset {position}"
            )));
        }
        if k.len() != self.width || v.len() != self.width {
            return Err(Error::Dimension(format!(
                "cache width {} got k {} v {}",
                self.width,
                k.len(),
                v.len()
            )));
        }
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
        Ok(())
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// Drops every position at or after `len` in all layers.
    pub fn truncate(&mut self, len: usize) {
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.width);
            v.truncate(len * self.width);
        }
    }

    pub fn clear(&mut self) {
        self.truncate(0);
    }
}
