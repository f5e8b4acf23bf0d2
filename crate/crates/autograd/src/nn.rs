//! Functional building blocks for small networks plus named parameter sets.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;

use crate::graph::grad;
use crate::ops::*;
use crate::tensor::{Array, Tensor};

pub use crate::ops::gelu;

/// Named parameter arrays of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all arrays.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Wraps every array as a gradient-tracked leaf.
    pub fn vars(&self) -> VarSet {
        VarSet {
            map: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::variable(v.clone())))
                .collect(),
        }
    }

    /// Wraps every array as a constant (inference).
    pub fn constants(&self) -> VarSet {
        VarSet {
            map: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::constant(v.clone())))
                .collect(),
        }
    }
}

/// Graph leaves for one forward pass, keyed like the [`ParamSet`] they came from.
pub struct VarSet {
    map: BTreeMap<String, Tensor>,
}

impl VarSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Gradients of `loss` for every parameter, as plain arrays.
    pub fn grads(&self, loss: &Tensor) -> ParamSet {
        let leaves: Vec<&Tensor> = self.map.values().collect();
        let gs = grad(loss, &leaves, false);
        ParamSet {
            tensors: self
                .map
                .keys()
                .cloned()
                .zip(gs.into_iter().map(|g| g.value().clone()))
                .collect(),
        }
    }
}

/// `x @ w + b` over the last axis of `x`; `w` is `(in, out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let shape = x.shape().to_vec();
    let inner = *shape.last().expect("linear input has at least one axis");
    let rows = x.len() / inner.max(1);
    let y = x.reshape(&[rows, inner]).matmul(w);
    let y = match b {
        Some(b) => add(&y, b),
        None => y,
    };
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(&out_shape)
}

/// Normalizes over the last axis, then applies the affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let last = x.ndim() - 1;
    let centered = sub(x, &mean_axis(x, last));
    let var = mean_axis(&centered.square(), last);
    let normed = div(&centered, &sqrt(&var.add_scalar(eps)));
    add(&mul(&normed, gamma), beta)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let last = x.ndim() - 1;
    // the shift is a constant; softmax is invariant to it
    let max = x
        .value()
        .map_axis(ndarray::Axis(last), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .insert_axis(ndarray::Axis(last));
    let shifted = sub(x, &Tensor::constant(max));
    let e = exp(&shifted);
    div(&e, &sum_axis(&e, last))
}

/// Inverted dropout with keep-mask drawn from `rng`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Tensor {
    if p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    mul_const(x, Array::from_shape_vec(IxDyn(x.shape()), mask).unwrap())
}

/// Mean squared error between `pred` and `target` (broadcast).
pub fn mse(pred: &Tensor, target: &Tensor) -> Tensor {
    sub(pred, target).square().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let s = softmax(&x).to_vec();
        assert_abs_diff_eq!(s[0] + s[1] + s[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[5], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = layer_norm(&x, &Tensor::scalar(1.0), &Tensor::scalar(0.0), 0.0).to_vec();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]);
        let y = gelu(&x).to_vec();
        assert_abs_diff_eq!(y[0], 0.0);
        assert_abs_diff_eq!(y[1], 0.841_192, epsilon = 1e-5);
        assert_abs_diff_eq!(y[2], -0.158_808, epsilon = 1e-5);
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::constant(Array::from_elem(IxDyn(&[20_000]), 1.0));
        let y = dropout(&x, 0.1, &mut rng);
        let mean = y.value().mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let x = Tensor::zeros(&[2, 3, 4]);
        let w = Tensor::zeros(&[4, 5]);
        let b = Tensor::from_vec(&[5], vec![1.0; 5]);
        let y = linear(&x, &w, Some(&b));
        assert_eq!(y.shape(), &[2, 3, 5]);
        assert!(y.to_vec().iter().all(|&v| v == 1.0));
    }
}
