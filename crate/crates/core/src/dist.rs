//! Density kernels for the closed family set, affine maps with pointwise
//! nonlinearities, and the standard normal CDF and inverse CDF.
//!
//! Everything here works on per-datapoint vectors with diagonal scales;
//! batched (matrix) evaluation lives in the gradient engine.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093454835606594728112;
pub const SQRT_2PI: f64 = 2.5066282746310005024157652848110;

/// Bernoulli probabilities are clamped to this closed interval before
/// taking logs, so observed-bit likelihoods never produce -inf.
pub const BERNOULLI_PROB_MIN: f64 = 1e-7;
pub const BERNOULLI_PROB_MAX: f64 = 1.0 - 1e-7;

/// Diagonal Gaussian: independent per-dimension means and scales, sigma > 0.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// Sum over dimensions of the diagonal Gaussian log density.
pub fn gaussian_logpdf(x: ArrayView1<f64>, p: &GaussianParams) -> f64 {
    debug_assert_eq!(x.len(), p.mean.len());
    debug_assert_eq!(x.len(), p.sigma.len());
    let mut acc = 0.0;
    for d in 0..x.len() {
        let s = p.sigma[d];
        let r = x[d] - p.mean[d];
        acc += -0.5 * LN_2PI - s.ln() - r * r / (2.0 * s * s);
    }
    acc
}

pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * x * x
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Sum over dimensions of the Bernoulli log mass. `x` entries must be 0 or 1;
/// probabilities are clamped into [BERNOULLI_PROB_MIN, BERNOULLI_PROB_MAX].
pub fn bernoulli_logpmf(x: ArrayView1<f64>, prob: ArrayView1<f64>) -> f64 {
    debug_assert_eq!(x.len(), prob.len());
    let mut acc = 0.0;
    for d in 0..x.len() {
        let a = prob[d].clamp(BERNOULLI_PROB_MIN, BERNOULLI_PROB_MAX);
        acc += x[d] * a.ln() + (1.0 - x[d]) * (1.0 - a).ln();
    }
    acc
}

/// Pointwise nonlinearity applied after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlin {
    Tanh,
    Sigmoid,
    None,
}

impl Nonlin {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlin::Tanh => x.tanh(),
            Nonlin::Sigmoid => sigmoid(x),
            Nonlin::None => x,
        }
    }

    /// Derivative expressed through the output value, so no extra state is
    /// needed on the backward pass.
    pub fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Nonlin::Tanh => 1.0 - y * y,
            Nonlin::Sigmoid => y * (1.0 - y),
            Nonlin::None => 1.0,
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map with one weight matrix per parent (child_dim x parent_dim),
/// a bias, and a pointwise nonlinearity.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub weights: Vec<Array2<f64>>,
    pub bias: Array1<f64>,
    pub nonlinearity: Nonlin,
}

/// nonlin(sum_i W_i p_i + b) for per-datapoint parent vectors.
pub fn apply_affine(map: &AffineMap, parents: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    if parents.len() != map.weights.len() {
        return Err(Error::Shape(format!(
            "affine map expects {} parents, got {}",
            map.weights.len(),
            parents.len()
        )));
    }
    let d = map.bias.len();
    let mut pre = map.bias.clone();
    for (w, p) in map.weights.iter().zip(parents) {
        if w.nrows() != d || w.ncols() != p.len() {
            return Err(Error::Shape(format!(
                "weight {}x{} incompatible with child dim {} and parent dim {}",
                w.nrows(),
                w.ncols(),
                d,
                p.len()
            )));
        }
        pre += &w.dot(p);
    }
    Ok(pre.mapv(|v| map.nonlinearity.apply(v)))
}

// Cumulative normal after Hart, double-precision rational fit for |x| below
// 7.07, continued-fraction tail above. The tail branch returns the upper tail
// mass directly, which keeps it accurate in a relative sense.
fn std_normal_sf_abs(xabs: f64) -> f64 {
    debug_assert!(xabs >= 0.0);
    if xabs > 37.0 {
        return 0.0;
    }
    let e = (-xabs * xabs / 2.0).exp();
    if xabs < 7.07106781186547 {
        let mut b = 3.52624965998911e-2 * xabs + 0.700383064443688;
        b = b * xabs + 6.37396220353165;
        b = b * xabs + 33.912866078383;
        b = b * xabs + 112.079291497871;
        b = b * xabs + 221.213596169931;
        b = b * xabs + 220.206867912376;
        let num = e * b;
        b = 8.83883476483184e-2 * xabs + 1.75566716318264;
        b = b * xabs + 16.064177579207;
        b = b * xabs + 86.7807322029461;
        b = b * xabs + 296.564248779674;
        b = b * xabs + 637.333633378831;
        b = b * xabs + 793.826512519948;
        b = b * xabs + 440.413735824752;
        num / b
    } else {
        let mut b = xabs + 0.65;
        b = xabs + 4.0 / b;
        b = xabs + 3.0 / b;
        b = xabs + 2.0 / b;
        b = xabs + 1.0 / b;
        e / b / 2.506628274631
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        1.0 - std_normal_sf_abs(x)
    } else {
        std_normal_sf_abs(-x)
    }
}

// Acklam's rational approximation to the standard normal quantile,
// used as the initializer for one Newton step.
fn acklam(u: f64) -> f64 {
    const A: [f64; 6] = [
        -39.6968302866538,
        220.946098424521,
        -275.928510446969,
        138.357751867269,
        -30.6647980661472,
        2.50662827745924,
    ];
    const B: [f64; 5] = [
        -54.4760987982241,
        161.585836858041,
        -155.698979859887,
        66.8013118877197,
        -13.2806815528857,
    ];
    const C: [f64; 6] = [
        -7.78489400243029e-3,
        -0.322396458041136,
        -2.40075827716184,
        -2.54973253934373,
        4.37466414146497,
        2.93816398269878,
    ];
    const D: [f64; 4] = [
        7.78469570904146e-3,
        0.32246712907004,
        2.445134137143,
        3.75440866190742,
    ];
    const LOW: f64 = 0.02425;
    if u < LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal quantile. Strictly increasing, accurate to about 4e-10
/// absolute over u in [1e-12, 1 - 1e-12].
///
/// The Newton refinement runs in tail space (solving sf(z) = min(u, 1-u)),
/// which avoids the cancellation that a direct CDF residual suffers near 1.
pub fn gaussian_inverse_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "inverse cdf argument must lie strictly inside (0, 1), got {u}"
        )));
    }
    if u == 0.5 {
        return Ok(0.0);
    }
    // 1 - u is exact for u >= 0.5, so the tail mass carries full precision.
    let t = if u < 0.5 { u } else { 1.0 - u };
    let mut z = acklam(u).abs();
    let pdf = std_normal_pdf(z);
    if pdf > 0.0 {
        z += (std_normal_sf_abs(z) - t) / pdf;
    }
    Ok(if u < 0.5 { -z } else { z })
}

/// Derivative of the standard normal quantile at its output point z:
/// d/du inverse_cdf(u) = 1 / pdf(z).
pub fn gaussian_inverse_cdf_deriv(z: f64) -> f64 {
    SQRT_2PI * (0.5 * z * z).exp()
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the two
/// empirical cdfs. Sorts both slices in place.
pub fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst = 0.0f64;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        let gap = (i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs();
        worst = worst.max(gap);
    }
    worst
}
