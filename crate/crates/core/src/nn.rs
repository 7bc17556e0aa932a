//! Small dense feed-forward networks with hand-written backprop.
//!
//! The last layer produces a single logit; callers apply the logistic
//! squashing themselves so losses can be computed in logit space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dense<T: Real> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, weights: vec![T::zero(); in_dim * out_dim], bias: vec![T::zero(); out_dim], activation }
    }

    /// Uniform Glorot initialisation.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
        Self { in_dim, out_dim, weights, bias: vec![T::zero(); out_dim], activation }
    }

    fn forward_into(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            out.push(self.activation.apply(acc));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Real> {
    pub layers: Vec<Dense<T>>,
}

/// Activations of every layer from one forward pass.
pub struct Tape<T> {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn logit(&self) -> T {
        self.activations.last().expect("non-empty tape")[0]
    }
}

/// Gradients with the same shape as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: mlp.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl<T: Real> Mlp<T> {
    /// `dims = [input, hidden..., 1]`; hidden layers use `hidden`, the last is linear.
    pub fn random<R: Rng>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 || dims.contains(&0) {
            return Err(Error::config(format!("invalid network shape {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::Identity } else { hidden };
                Dense::random(dims[l], dims[l + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 {
            return Err(Error::config(format!("invalid network shape {dims:?}")));
        }
        let n = dims.len() - 1;
        Ok(Self {
            layers: (0..n)
                .map(|l| {
                    let act = if l + 1 == n { Activation::Identity } else { hidden };
                    Dense::zeros(dims[l], dims[l + 1], act)
                })
                .collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Feature { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// Output logit. Panics on dimension mismatch; see [`Mlp::check_input`].
    pub fn logit(&self, x: &[T]) -> T {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    pub fn forward(&self, x: &[T]) -> Tape<T> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward_into(activations.last().unwrap(), &mut out);
            activations.push(out);
        }
        Tape { activations }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logit`,
    /// and returns `d loss / d input`.
    pub fn backward(&self, tape: &Tape<T>, dlogit: T, grads: &mut MlpGrads<T>) -> Vec<T> {
        let mut delta = vec![dlogit];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.activations[l + 1];
            let input = &tape.activations[l];
            // delta currently holds dL/d(output); convert to dL/d(pre-activation).
            for (d, y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(*y);
            }
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            let mut dx = vec![T::zero(); layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                gb[o] += d;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    gw[row + i] += d * input[i];
                    dx[i] += d * layer.weights[row + i];
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in the same order as [`MlpGrads::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut T {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn sq_norm(&self) -> T {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).fold(T::zero(), |acc, &w| acc + w * w)
    }

    /// `params -= lr * grads`.
    pub fn apply(&mut self, grads: &MlpGrads<T>, lr: T) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[l]) {
                *w -= lr * *g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.bias[l]) {
                *b -= lr * *g;
            }
        }
    }

    /// Adds `2 * coeff * params` to `grads` (gradient of `coeff * ||params||^2`).
    pub fn add_l2_grad(&self, coeff: T, grads: &mut MlpGrads<T>) {
        let two = T::lit(2.0);
        for (l, layer) in self.layers.iter().enumerate() {
            for (g, w) in grads.weights[l].iter_mut().zip(&layer.weights) {
                *g += two * coeff * *w;
            }
            for (g, b) in grads.bias[l].iter_mut().zip(&layer.bias) {
                *g += two * coeff * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn zero_network_outputs_zero_logit() {
        let m = Mlp::<f64>::zeros(&[4, 3, 1], Activation::Tanh).unwrap();
        assert_eq!(m.logit(&[1.0, 2.0, 3.0, 4.0]), 0.0);
    }

    #[test]
    fn shape_validation() {
        assert!(Mlp::<f64>::zeros(&[4], Activation::Tanh).is_err());
        assert!(Mlp::<f64>::zeros(&[4, 2], Activation::Tanh).is_err());
        let m = Mlp::<f64>::zeros(&[4, 1], Activation::Tanh).unwrap();
        assert!(matches!(m.check_input(&[0.0; 3]), Err(Error::Feature { expected: 4, got: 3 })));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(1, Stream::Training, 0);
        for act in [Activation::Tanh, Activation::Identity] {
            let mut m = Mlp::<f64>::random(&[5, 4, 3, 1], act, &mut rng).unwrap();
            for l in &mut m.layers {
                for b in &mut l.bias {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
            let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
            let tape = m.forward(&x);
            let mut g = MlpGrads::zeros_like(&m);
            let dx = m.backward(&tape, 1.0, &mut g);
            let flat = g.flatten();
            let h = 1e-6;
            for p in 0..m.num_params() {
                let mut plus = m.clone();
                *plus.param_mut(p) += h;
                let mut minus = m.clone();
                *minus.param_mut(p) -= h;
                let fd = (plus.logit(&x) - minus.logit(&x)) / (2.0 * h);
                assert!((fd - flat[p]).abs() < 1e-7 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", flat[p]);
            }
            for i in 0..5 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (m.logit(&xp) - m.logit(&xm)) / (2.0 * h);
                assert!((fd - dx[i]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let mut rng = stream_rng(2, Stream::Training, 0);
        let m = Mlp::<f32>::random(&[3, 2, 1], Activation::Tanh, &mut rng).unwrap();
        let y = m.logit(&[0.1, 0.2, 0.3]);
        assert!(y.is_finite());
    }
}
