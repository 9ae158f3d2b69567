//! Compositions over the primitive graph ops: activations, layer norm,
//! losses, and row-wise masked softmax. Everything here inherits exact
//! higher-order differentiability from the primitives.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Additive mask bias for inadmissible attention entries. Large enough that
/// `exp` underflows to exactly zero after the row-max shift.
pub const MASK_NEG: f64 = -1e30;

impl<E: Element> Graph<E> {
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// GELU in the exact error-function form `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let s = self.scale(x, 1.0 / std::f64::consts::SQRT_2)?;
        let e = self.erf(s)?;
        let onep = self.add_scalar(e, 1.0)?;
        let half = self.scale(x, 0.5)?;
        self.mul(half, onep)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let nx = self.scale(x, -1.0)?;
        let e = self.exp(nx)?;
        let denom = self.add_scalar(e, 1.0)?;
        self.recip(denom)
    }

    /// Layer norm over the last (feature) axis of a rank-1 or rank-2 input.
    /// `gain` and `bias` are rank-1 with the feature extent.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (x2, rank1) = match shape.len() {
            1 => (self.reshape(x, &[1, shape[0]])?, true),
            2 => (x, false),
            _ => {
                return Err(Error::shape(
                    "layer_norm",
                    format!("expects rank 1 or 2, got {shape:?}"),
                ))
            }
        };
        let k = *self.shape(x2).last().unwrap();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [k] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} shape {:?} does not match feature extent {k}", self.shape(v)),
                ));
            }
        }
        let xhat = self.normalize_rows(x2, eps)?;
        let scaled = self.mul(xhat, gain)?;
        let out = self.add(scaled, bias)?;
        if rank1 {
            self.reshape(out, &shape)
        } else {
            Ok(out)
        }
    }

    /// `(x - mean) / sqrt(var + eps)` per row of a rank-2 tensor.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let k = self.shape(x)[1];
        let mu = self.row_sum(x)?;
        let mu = self.scale(mu, 1.0 / k as f64)?;
        let mu_b = self.broadcast_cols(mu, k)?;
        let xc = self.sub(x, mu_b)?;
        let sq = self.mul(xc, xc)?;
        let var = self.row_sum(sq)?;
        let var = self.scale(var, 1.0 / k as f64)?;
        let var_eps = self.add_scalar(var, eps)?;
        let sigma = self.sqrt(var_eps)?;
        let inv = self.recip(sigma)?;
        let inv_b = self.broadcast_cols(inv, k)?;
        self.mul(xc, inv_b)
    }

    /// Sum of squared differences over all elements; rank-0 output.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Row-wise softmax of a rank-2 score matrix with an optional additive
    /// mask bias (0 for admissible entries, [`MASK_NEG`] otherwise).
    ///
    /// The row-max shift is detached; softmax is shift-invariant, so the
    /// gradient stays exact while `exp` stays in range.
    pub fn softmax_rows(&mut self, scores: Var, mask_bias: Option<&Tensor<E>>) -> Result<Var> {
        if self.shape(scores).len() != 2 {
            return Err(Error::shape(
                "softmax_rows",
                format!("expects rank 2, got {:?}", self.shape(scores)),
            ));
        }
        let biased = match mask_bias {
            Some(bias) => {
                let b = self.constant(bias.clone());
                self.add(scores, b)?
            }
            None => scores,
        };
        let (r, c) = (self.shape(biased)[0], self.shape(biased)[1]);
        let mut maxes = Vec::with_capacity(r * c);
        {
            let v = self.value(biased);
            for i in 0..r {
                let m = v.row(i).iter().cloned().fold(E::from_f64(f64::NEG_INFINITY), E::max);
                maxes.extend(std::iter::repeat(m).take(c));
            }
        }
        let shift = self.constant(Tensor::new(vec![r, c], maxes)?);
        let z = self.sub(biased, shift)?;
        let e = self.exp(z)?;
        let denom = self.row_sum(e)?;
        let inv = self.recip(denom)?;
        let inv_b = self.broadcast_cols(inv, c)?;
        self.mul(e, inv_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent high-precision erf: Taylor series for small |x|, and the
    /// continued-fraction complement for large |x|. Used only as an oracle.
    pub fn erf_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return -erf_oracle(-x);
        }
        if x < 3.0 {
            // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
            let mut term = x;
            let mut sum = x;
            let mut n = 0usize;
            while term.abs() > 1e-18 * sum.abs().max(1.0) {
                n += 1;
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        } else {
            // erfc(x) via the Lentz continued fraction, erf = 1 - erfc
            let mut f = x;
            for k in (1..120).rev() {
                f = x + (k as f64 / 2.0) / f;
            }
            let erfc = (-x * x).exp() / (f * std::f64::consts::PI.sqrt());
            1.0 - erfc
        }
    }

    #[test]
    fn erf_primitive_matches_series_oracle() {
        let mut g: Graph = Graph::new();
        for &x in &[-4.0, -1.0, -0.3, 0.0, 0.5, 1.0, 2.5, 3.5, 6.0] {
            let v = g.constant(Tensor::scalar(x));
            let e = g.erf(v).unwrap();
            let got = g.value(e).item().unwrap();
            assert!((got - erf_oracle(x)).abs() < 1e-14, "erf({x}): {got} vs {}", erf_oracle(x));
        }
    }

    #[test]
    fn gelu_point_values() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-9);
        // oracle: 0.5 * (1 + erf(1/sqrt(2)))
        let expect = 0.5 * (1.0 + erf_oracle(1.0 / std::f64::consts::SQRT_2));
        assert!((v[2] - expect).abs() < 1e-6, "gelu(1) = {} vs {}", v[2], expect);
        assert!((v[2] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_and_constant_vectors() {
        let mut g: Graph = Graph::new();
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(zero, gain, bias, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let c = g.constant(Tensor::full(&[4], 3.7));
        let y = g.layer_norm(c, gain, bias, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1 -> [-1, 1] as eps -> 0
        let mut g: Graph = Graph::new();
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        let v = g.value(y).data().to_vec();
        assert!((v[0] + 1.0).abs() < 1e-7 && (v[1] - 1.0).abs() < 1e-7, "{v:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let mut g: Graph = Graph::new();
        let scores = g.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let bias = Tensor::new(vec![2, 3], vec![0.0, MASK_NEG, 0.0, 0.0, 0.0, MASK_NEG]).unwrap();
        let p = g.softmax_rows(scores, Some(&bias)).unwrap();
        let v = g.value(p);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(1, 2), 0.0);
        for i in 0..2 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
