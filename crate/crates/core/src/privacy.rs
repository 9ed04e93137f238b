//! Local differential privacy for sign compression.
//!
//! The noise scale comes from the exact Gaussian-mechanism condition
//!
//! ```text
//! Φ(Δ/(2σ) − εσ/Δ) − e^ε · Φ(−Δ/(2σ) − εσ/Δ) ≤ δ
//! ```
//!
//! solved for the smallest admissible σ by bisection. The compressor
//! [`dpsign`] then emits +1 for coordinate `i` with probability `Φ(g_i/σ)`,
//! which is the law of `sign(g_i + N(0, σ²))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{GradVector, SignVector};

/// Relative width at which bisection on σ stops.
pub const SIGMA_REL_TOL: f64 = 1e-9;

const BRACKET_LO: f64 = 1e-6;
const BRACKET_HI: f64 = 1e6;
const MAX_BRACKET_STEPS: usize = 200;

/// Standard normal CDF.
///
/// The lower tail is computed directly from `erfc`; the upper half is its
/// complement, so `Φ(x) + Φ(−x) == 1` up to a single rounding.
pub fn normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("normal_cdf of non-finite value {x}")));
    }
    Ok(normal_cdf_unchecked(x))
}

#[inline]
pub(crate) fn normal_cdf_unchecked(x: f64) -> f64 {
    let tail = 0.5 * libm::erfc(x.abs() * std::f64::consts::FRAC_1_SQRT_2);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

fn check_budget(epsilon: f64, delta: f64, sensitivity: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::Domain(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    Ok(())
}

/// Left-hand side of the Gaussian-mechanism condition. The mechanism with
/// noise scale `sigma` is (ε, δ)-DP iff the result is `<= delta`.
pub fn agm_condition(epsilon: f64, delta: f64, sensitivity: f64, sigma: f64) -> Result<f64> {
    check_budget(epsilon, delta, sensitivity)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(agm_lhs(epsilon, sensitivity, sigma))
}

fn agm_lhs(epsilon: f64, sensitivity: f64, sigma: f64) -> f64 {
    let half_ratio = sensitivity / (2.0 * sigma);
    let shift = epsilon * sigma / sensitivity;
    let upper = normal_cdf_unchecked(half_ratio - shift);
    let lower = normal_cdf_unchecked(-half_ratio - shift);
    // e^ε·Φ(b) evaluated in log space so large ε cannot produce inf·0.
    let scaled = if lower > 0.0 {
        (epsilon + lower.ln()).exp()
    } else {
        0.0
    };
    upper - scaled
}

/// Smallest σ satisfying the Gaussian-mechanism condition, to relative
/// tolerance [`SIGMA_REL_TOL`]. The returned value always satisfies the
/// condition.
pub fn calibrate_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    check_budget(epsilon, delta, sensitivity)?;
    let valid = |sigma: f64| agm_lhs(epsilon, sensitivity, sigma) <= delta;
    let fail = |reason| Error::Calibration {
        epsilon,
        delta,
        sensitivity,
        reason,
    };

    let mut lo = sensitivity * BRACKET_LO;
    let mut hi = sensitivity * BRACKET_HI;
    let mut steps = 0;
    while !valid(hi) {
        lo = hi;
        hi *= 10.0;
        steps += 1;
        if steps > MAX_BRACKET_STEPS || !hi.is_finite() {
            return Err(fail("no admissible sigma found above the bracket"));
        }
    }
    steps = 0;
    while valid(lo) {
        hi = lo;
        lo /= 10.0;
        steps += 1;
        if steps > MAX_BRACKET_STEPS || lo == 0.0 {
            return Err(fail("condition holds for vanishing sigma"));
        }
    }

    // Invariant: lo invalid, hi valid.
    while hi - lo > SIGMA_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if valid(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Privacy parameters of the sign compressor with a calibrated noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
    sensitivity: f64,
    sigma: f64,
}

impl PrivacyParams {
    pub fn calibrate(epsilon: f64, delta: f64, sensitivity: f64) -> Result<Self> {
        let sigma = calibrate_sigma(epsilon, delta, sensitivity)?;
        Ok(Self {
            epsilon,
            delta,
            sensitivity,
            sigma,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Probability that [`dpsign`] maps a coordinate of value `g` to +1.
    pub fn positive_probability(&self, g: f64) -> f64 {
        normal_cdf_unchecked(g / self.sigma)
    }
}

/// Scale `grad` in place so its L2 norm is at most `bound`. Returns the
/// factor applied (1 when no clipping happened).
pub fn clip_in_place(grad: &mut [f64], bound: f64) -> Result<f64> {
    if bound.is_nan() || bound <= 0.0 {
        return Err(Error::Domain(format!("clip bound must be positive, got {bound}")));
    }
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= bound {
        return Ok(1.0);
    }
    let scale = bound / norm;
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok(scale)
}

/// Per-example L2 clipping: unchanged when `‖grad‖ <= bound`, otherwise
/// rescaled onto the sphere of radius `bound`.
pub fn clip_per_example(grad: &GradVector, bound: f64) -> Result<GradVector> {
    let mut out = grad.clone();
    clip_in_place(&mut out, bound)?;
    Ok(out)
}

/// Differentially private 1-bit compressor.
pub fn dpsign<R: Rng + ?Sized>(grad: &[f64], params: &PrivacyParams, rng: &mut R) -> SignVector {
    SignVector::from_raw(
        grad.iter()
            .map(|&g| {
                let u: f64 = rng.random();
                if u < params.positive_probability(g) {
                    1
                } else {
                    -1
                }
            })
            .collect(),
    )
}
