//! Attention activations over focus scores and the entropy functional.
//!
//! Every activation maps a finite score vector onto the probability simplex.
//! Forward and vector-Jacobian rules are plain slice functions so that the
//! autodiff tape and the metric code share one implementation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};

/// Squared-norm floor below which spherical softmax falls back to uniform.
pub const SPHERICAL_EPS: f64 = 1e-12;

/// Tolerance on the simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Softmax,
    Sparsemax,
    SphericalSoftmax,
    /// Softmax scores whose argmax is used at prediction time.
    Hard,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Softmax,
        ActivationKind::Sparsemax,
        ActivationKind::SphericalSoftmax,
        ActivationKind::Hard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Softmax => "softmax",
            ActivationKind::Sparsemax => "sparsemax",
            ActivationKind::SphericalSoftmax => "spherical_softmax",
            ActivationKind::Hard => "hard",
        }
    }

    /// Applies the activation to one score vector.
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::Softmax | ActivationKind::Hard => softmax(z),
            ActivationKind::Sparsemax => sparsemax(z),
            ActivationKind::SphericalSoftmax => spherical_softmax(z).0,
        }
    }

    /// Vector-Jacobian product: given scores `z`, the forward output `alpha`
    /// and an upstream gradient, returns the gradient with respect to `z`.
    pub fn backward(self, z: &[f64], alpha: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::Softmax | ActivationKind::Hard => softmax_backward(alpha, upstream),
            ActivationKind::Sparsemax => sparsemax_backward(alpha, upstream),
            ActivationKind::SphericalSoftmax => spherical_softmax_backward(z, alpha, upstream),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SdcError::Config(format!("unknown activation {s:?}")))
    }
}

/// A probability vector over the segments of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector(Vec<f64>);

impl AttentionVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(SdcError::Contract("empty attention vector".into()));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(SdcError::Contract(format!(
                "attention entries must be finite and non-negative: {alpha:?}"
            )));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(SdcError::Contract(format!(
                "attention sums to {total}, not 1"
            )));
        }
        Ok(AttentionVector(alpha))
    }

    pub fn uniform(m: usize) -> Self {
        AttentionVector(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, j: usize) -> Self {
        let mut v = vec![0.0; m];
        v[j] = 1.0;
        AttentionVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for AttentionVector {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

pub fn softmax_backward(alpha: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = alpha.iter().zip(upstream).map(|(a, g)| a * g).sum();
    alpha
        .iter()
        .zip(upstream)
        .map(|(a, g)| a * (g - dot))
        .collect()
}

/// Threshold `tau` of the simplex projection together with the support size.
pub fn sparsemax_threshold(z: &[f64]) -> (f64, usize) {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (j, v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (j + 1) as f64;
        if *v > (cumsum - 1.0) / k {
            support = j + 1;
            support_sum = cumsum;
        }
    }
    ((support_sum - 1.0) / support as f64, support)
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    let (tau, _) = sparsemax_threshold(z);
    z.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// Projection Jacobian applied to `upstream`: on the support the gradient
/// minus its support mean, zero elsewhere. Coordinates sitting exactly on the
/// threshold are treated as off-support.
pub fn sparsemax_backward(alpha: &[f64], upstream: &[f64]) -> Vec<f64> {
    let (count, total) = alpha
        .iter()
        .zip(upstream)
        .filter(|(a, _)| **a > 0.0)
        .fold((0usize, 0.0), |(c, s), (_, g)| (c + 1, s + g));
    let mean = if count > 0 { total / count as f64 } else { 0.0 };
    alpha
        .iter()
        .zip(upstream)
        .map(|(a, g)| if *a > 0.0 { g - mean } else { 0.0 })
        .collect()
}

/// `alpha_i = z_i^2 / sum_j z_j^2`. Returns the uniform vector and `true`
/// when the squared norm is at most [`SPHERICAL_EPS`].
pub fn spherical_softmax(z: &[f64]) -> (Vec<f64>, bool) {
    let norm2: f64 = z.iter().map(|v| v * v).sum();
    if norm2 <= SPHERICAL_EPS {
        return (vec![1.0 / z.len() as f64; z.len()], true);
    }
    (z.iter().map(|v| v * v / norm2).collect(), false)
}

pub fn spherical_softmax_backward(z: &[f64], alpha: &[f64], upstream: &[f64]) -> Vec<f64> {
    let norm2: f64 = z.iter().map(|v| v * v).sum();
    if norm2 <= SPHERICAL_EPS {
        return vec![0.0; z.len()];
    }
    let dot: f64 = alpha.iter().zip(upstream).map(|(a, g)| a * g).sum();
    z.iter()
        .zip(upstream)
        .map(|(zk, g)| 2.0 * zk / norm2 * (g - dot))
        .collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(alpha: &[f64]) -> f64 {
    alpha
        .iter()
        .filter(|a| **a > 0.0)
        .map(|a| -a * a.ln())
        .sum()
}

/// Gradient of [`entropy`]. Zero coordinates get a zero gradient.
pub fn entropy_grad(alpha: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .map(|a| if *a > 0.0 { -(a.ln() + 1.0) } else { 0.0 })
        .collect()
}

/// Index of the largest weight; ties go to the lowest index.
pub fn hard_select(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (j, a) in alpha.iter().enumerate().skip(1) {
        if *a > alpha[best] {
            best = j;
        }
    }
    best
}
