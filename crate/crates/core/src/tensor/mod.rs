//! Dense tensors, a parameter store with a freeze mask, and the two execution
//! paths built on them: a recorded graph with reverse-mode differentiation
//! (`graph`, f64) and row-wise inference kernels with KV caches (`kernels`).

pub mod checkpoint;
pub mod graph;
pub mod kernels;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use kernels::KvCache;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// 2-D convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); numel],
        }
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters, their accumulated gradients and the set of names
/// excluded from optimizer updates.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    frozen: BTreeSet<ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients. Parameters not reached by
    /// the recorded computation keep a zero contribution.
    pub fn accumulate_grads(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            for (dst, &src) in self.grads[id.0].data_mut().iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) {
        debug_assert_eq!(grad.shape(), self.grads[id.0].shape());
        self.grads[id.0] = grad;
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let ids: Vec<_> = self
            .index
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, &id)| id)
            .collect();
        let n = ids.len();
        self.frozen.extend(ids);
        n
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.frozen.iter().map(|&id| self.name(id)).collect()
    }
}

/// Per-query inclusive key ranges. Every query attends to a contiguous span
/// of absolute key indices, which covers causal, look-ahead, sliding-window and
/// block-diagonal masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    ranges: Vec<(usize, usize)>,
}

impl AttentionMask {
    pub fn from_ranges(ranges: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(lo, hi)) = ranges.iter().find(|(lo, hi)| lo > hi) {
            return Err(Error::Argument(format!("empty mask range {lo}..={hi}")));
        }
        Ok(Self { ranges })
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        Self {
            ranges: (0..len).map(|i| (0, i)).collect(),
        }
    }

    /// Query `i` sees keys `0..=i + limits[i]`, clipped to the sequence.
    pub fn lookahead(limits: &[usize]) -> Self {
        let n = limits.len();
        Self {
            ranges: limits
                .iter()
                .enumerate()
                .map(|(i, &la)| (0, (i + la).min(n - 1)))
                .collect(),
        }
    }

    /// Query `i` sees keys `max(0, i - width)..=i`.
    pub fn window(len: usize, width: usize) -> Self {
        Self {
            ranges: (0..len).map(|i| (i.saturating_sub(width), i)).collect(),
        }
    }

    /// Independent causal blocks laid out back to back.
    pub fn block_causal(blocks: usize, block_len: usize) -> Self {
        let mut ranges = Vec::with_capacity(blocks * block_len);
        for b in 0..blocks {
            let start = b * block_len;
            for j in 0..block_len {
                ranges.push((start, start + j));
            }
        }
        Self { ranges }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn range(&self, query: usize) -> (usize, usize) {
        self.ranges[query]
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn max_key(&self) -> usize {
        self.ranges.iter().map(|r| r.1).max().unwrap_or(0)
    }

    /// Dense boolean form, `allowed[q][k]`.
    pub fn to_dense(&self, keys: usize) -> Vec<Vec<bool>> {
        self.ranges
            .iter()
            .map(|&(lo, hi)| (0..keys).map(|k| k >= lo && k <= hi).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn freeze_prefix_marks_only_matching() {
        let mut store = ParameterStore::new();
        let a = store.insert("dt.w", Tensor::zeros(vec![1])).unwrap();
        let b = store.insert("tt.w", Tensor::zeros(vec![1])).unwrap();
        assert_eq!(store.freeze_prefix("dt."), 1);
        assert!(store.is_frozen(a));
        assert!(!store.is_frozen(b));
    }

    #[test]
    fn masks() {
        assert_eq!(AttentionMask::causal(3).ranges(), &[(0, 0), (0, 1), (0, 2)]);
        assert_eq!(
            AttentionMask::lookahead(&[1, 0]).ranges(),
            &[(0, 1), (0, 1)]
        );
        assert_eq!(AttentionMask::window(4, 2).range(3), (1, 3));
        let m = AttentionMask::block_causal(2, 2);
        assert_eq!(m.ranges(), &[(0, 0), (0, 1), (2, 2), (2, 3)]);
    }
}
