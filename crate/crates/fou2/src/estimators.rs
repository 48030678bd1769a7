//! Estimators of the driving correlations `(ρ, η₁₂)` from discretely
//! observed stationary paths, in two families.
//!
//! The **first kind** inverts the lag-`s` covariance relations exactly:
//! `Γ₁₂(s)` and `Γ₂₁(s)` decompose into `e^{-α_i s} C₀` plus a memory
//! integral weighted by `(ρ ± η₁₂)/2`, so three product-moment averages
//! (lag 0, lag `+s`, lag `-s`) with coefficients built from the memory
//! integrals recover `ρ` and `η₁₂` identically. The coefficients need the
//! marginal parameters `(H_i, α_i, ν_i)`, which are treated as known.
//!
//! The **second kind** normalizes increment products over a shrinking step
//! `Δ_n`: at high frequency the pair behaves like the driving bifractional
//! pair, so `Σ (Y¹_{(k+1)Δ}-Y¹_{kΔ})(Y²_{(k+1)Δ}-Y²_{kΔ}) / (ν₁ν₂ n Δ^H)`
//! converges to `ρ` (and the antisymmetrized version to `η₁₂` for `H < 1`)
//! without involving the reversion rates at all.
//!
//! The limit theory splits at `H = H₁+H₂ = 3/2`. Below it the normalized
//! error `√n (ρ̂_n - ρ)/√(V₁V₂)` is asymptotically Gaussian with variance
//! given by a summable series of Gaussian product moments
//! ([`asymp_var_first`], [`asymp_var_second`]); at the boundary the rate
//! gains a `√log n`; above it the rate drops to `n^{2-H}` and the limit is
//! non-Gaussian, with variance in closed form ([`noncentral_var_limit`])
//! and higher cumulants expressed by cyclic chain integrals over power-law
//! kernels ([`cumulant_limit`]). [`clt_experiment`] drives all of this
//! against simulated paths: Kolmogorov–Smirnov distance to the analytic
//! normal limit, a variance-scaling regression across a ladder of sample
//! sizes, and the excess-kurtosis trend of the normalized errors.

use crate::gaussian_core::{gaussian_product_moment, sample_cumulants};
use crate::model::{
    cov_profile, cross_cov, cross_cov_zero, cross_memory, fou_stat_var, simulate_2fou, CovMethod,
    Fou2Params,
};
use crate::rng::path_rng;
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;
use std::io::Write as IoWrite;

/// Default truncation for the asymptotic-variance lag series; the terms
/// decay like `k^{2H-4}`, so 400 lags leave a tail below 1e-3 of the head
/// even at `H = 1.4`, and the returned bound reports the actual remainder.
pub const DEFAULT_VAR_CUTOFF: usize = 400;

/// Default step exponent for second-kind experiments, `Δ_n = n^{-γ}`.
/// Any `γ ∈ (1/2, 1)` makes `n Δ_n → ∞` and `n Δ_n² → 0` simultaneously.
pub const DEFAULT_GAMMA: f64 = 0.6;

/// Default first-kind lag.
pub const DEFAULT_LAG: usize = 1;

// ---------------------------------------------------------------------
// First-kind inversion coefficients
// ---------------------------------------------------------------------

/// Weights of the three product-moment averages in the first-kind
/// estimators at integer lag `s`: `ρ̂` uses `(a1, a2, a3)` on the lag-0,
/// lag-`+s` (component 1 leads), and lag-`-s` averages; `η̂` uses
/// `(b1, b2, b3)` on the same averages.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoefficientSet {
    /// Integer lag of the shifted product moments.
    pub s: usize,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

/// Builds the first-kind coefficients from the memory integrals
/// `e^{-α₁ s} I₁₂(s)` and `e^{-α₂ s} I₂₁(s)`.
///
/// With `D = ν₁ν₂ H(H-1)`:
/// `a1 = -(1/I₁₂ + 1/I₂₁)/D`, `a2 = 1/(D e^{-α₁ s} I₁₂)`,
/// `a3 = 1/(D e^{-α₂ s} I₂₁)`, `b1 = (1/I₂₁ - 1/I₁₂)/D`, `b2 = a2`,
/// `b3 = -a3`. Plugged into the model's own covariances these return `ρ`
/// and `η₁₂` exactly: the `C₀` contributions cancel and the memory terms
/// reduce to `(ρ+η)/2 ± (ρ-η)/2` — see the identity test below. `H = 1`
/// is rejected: every denominator carries the factor `H(H-1)`.
pub fn first_kind_coeffs(p: &Fou2Params, s: usize) -> Result<CoefficientSet> {
    p.validate()?;
    if s == 0 {
        return Err(Error::InvalidParams("first-kind lag s must be at least 1".into()));
    }
    if p.is_h_one() {
        return Err(Error::Unsupported(
            "H = 1: the product-moment inversion degenerates (coefficients carry 1/(H(H-1)))"
                .into(),
        ));
    }
    let h = p.h();
    let sf = s as f64;
    let den = p.nu1 * p.nu2 * h * (h - 1.0);
    let m12 = cross_memory(p, 1, 2, sf)?; // e^{-α₁ s} I₁₂(s)
    let m21 = cross_memory(p, 2, 1, sf)?; // e^{-α₂ s} I₂₁(s)
    let inv12 = (-p.alpha1 * sf).exp() / m12; // 1 / I₁₂(s)
    let inv21 = (-p.alpha2 * sf).exp() / m21; // 1 / I₂₁(s)
    let a2 = 1.0 / (den * m12);
    let a3 = 1.0 / (den * m21);
    Ok(CoefficientSet {
        s,
        a1: -(inv12 + inv21) / den,
        a2,
        a3,
        b1: (inv21 - inv12) / den,
        b2: a2,
        b3: -a3,
    })
}

// ---------------------------------------------------------------------
// Point estimators
// ---------------------------------------------------------------------

/// First-kind estimates `(ρ̂_n, η̂_n)` from paths sampled at integer
/// times.
///
/// The paths must hold at least `s + 2` points; with `L` points the
/// estimator index is `n = L - s - 1`, so a caller wanting `ρ̂_n` supplies
/// `n + s + 1` points. The averages are
/// `m₀ = (1/n) Σ_{j=1..n} Y¹_j Y²_j`,
/// `m₊ = (1/n) Σ_{j=1..n-s} Y¹_{j+s} Y²_j`,
/// `m₋ = (1/n) Σ_{j=1..n-s} Y¹_j Y²_{j+s}`, and the estimates are
/// `ρ̂ = a1 m₀ + a2 m₊ + a3 m₋`, `η̂ = b1 m₀ + b2 m₊ + b3 m₋`. Only
/// index differences enter, so a common shift of the time origin leaves
/// the estimate unchanged.
pub fn estimate_first_kind(y1: &[f64], y2: &[f64], c: &CoefficientSet) -> Result<(f64, f64)> {
    if y1.len() != y2.len() {
        return Err(Error::Dim(format!(
            "paths have different lengths ({} vs {})",
            y1.len(),
            y2.len()
        )));
    }
    if y1.len() < c.s + 2 {
        return Err(Error::Dim(format!(
            "need at least s + 2 = {} points, got {}",
            c.s + 2,
            y1.len()
        )));
    }
    let n = y1.len() - c.s - 1;
    let nf = n as f64;
    let mut m0 = 0.0;
    for j in 1..=n {
        m0 += y1[j] * y2[j];
    }
    let (mut mp, mut mm) = (0.0, 0.0);
    if n > c.s {
        for j in 1..=(n - c.s) {
            mp += y1[j + c.s] * y2[j];
            mm += y1[j] * y2[j + c.s];
        }
    }
    m0 /= nf;
    mp /= nf;
    mm /= nf;
    Ok((
        c.a1 * m0 + c.a2 * mp + c.a3 * mm,
        c.b1 * m0 + c.b2 * mp + c.b3 * mm,
    ))
}

/// Exact expectation of the first-kind estimates at index `n`:
/// `E[ρ̂_n] = a1 C₀ + (n-s)/n (a2 Γ₁₂(s) + a3 Γ₂₁(s))` and likewise with
/// the `b`-weights, so the bias is `O(1/n)` — the shifted averages are
/// short of `s` products.
pub fn first_kind_mean(p: &Fou2Params, c: &CoefficientSet, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidParams("estimator index n must be at least 1".into()));
    }
    let sf = c.s as f64;
    let c0 = cross_cov_zero(p);
    let g12 = cross_cov(p, -sf)?; // Γ₁₂(s) = Cov(Y¹_{t+s}, Y²_t)
    let g21 = cross_cov(p, sf)?; // Γ₂₁(s) = Cov(Y¹_t, Y²_{t+s})
    let w = if n > c.s { (n - c.s) as f64 / n as f64 } else { 0.0 };
    Ok((
        c.a1 * c0 + w * (c.a2 * g12 + c.a3 * g21),
        c.b1 * c0 + w * (c.b2 * g12 + c.b3 * g21),
    ))
}

/// Second-kind estimates from paths observed on the grid `kΔ`,
/// `k = 0..=n`:
/// `ρ̃_n = Σ_k (Y¹_{(k+1)Δ}-Y¹_{kΔ})(Y²_{(k+1)Δ}-Y²_{kΔ}) / (ν₁ν₂ n Δ^H)`
/// and
/// `η̃_n = Σ_k (Y¹_{kΔ} Y²_{(k+1)Δ} - Y¹_{(k+1)Δ} Y²_{kΔ}) / (ν₁ν₂ n Δ^H)`.
///
/// `η̃` is only meaningful for `H < 1` (the lag expansion that motivates
/// it carries an `O(s^{1-H})` remainder), so `None` is returned otherwise.
/// The `η̃` summand is antisymmetric under swapping the components, hence
/// exactly zero for identical paths and exactly negated for swapped ones.
/// No reversion rate enters.
pub fn estimate_second_kind(
    y1: &[f64],
    y2: &[f64],
    delta: f64,
    p: &Fou2Params,
) -> Result<(f64, Option<f64>)> {
    if y1.len() != y2.len() {
        return Err(Error::Dim(format!(
            "paths have different lengths ({} vs {})",
            y1.len(),
            y2.len()
        )));
    }
    if y1.len() < 2 {
        return Err(Error::Dim("need at least two observations".into()));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParams(format!("step delta = {delta} must be positive")));
    }
    let n = y1.len() - 1;
    let scale = p.nu1 * p.nu2 * n as f64 * delta.powf(p.h());
    let mut inc = 0.0;
    let mut anti = 0.0;
    for k in 0..n {
        inc += (y1[k + 1] - y1[k]) * (y2[k + 1] - y2[k]);
        anti += y1[k] * y2[k + 1] - y1[k + 1] * y2[k];
    }
    let eta = if p.h() < 1.0 && !p.is_h_one() { Some(anti / scale) } else { None };
    Ok((inc / scale, eta))
}

/// Exact expectation of `ρ̃_n` at step `Δ`:
/// `[2C₀ - Γ₁₂(Δ) - Γ₂₁(Δ)] / (ν₁ν₂ Δ^H)`, independent of `n` by
/// stationarity; it approaches `ρ` at rate `Δ^{min(1, 2-H)}`.
pub fn second_kind_mean_rho(p: &Fou2Params, delta: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParams(format!("step delta = {delta} must be positive")));
    }
    let c0 = cross_cov_zero(p);
    let g12 = cross_cov(p, -delta)?;
    let g21 = cross_cov(p, delta)?;
    Ok((2.0 * c0 - g12 - g21) / (p.nu1 * p.nu2 * delta.powf(p.h())))
}

// ---------------------------------------------------------------------
// Normalization regimes
// ---------------------------------------------------------------------

/// Normalization rate of the estimator error, selected by `H = H₁+H₂`:
/// `√n` below `3/2`, `√(n/log n)` at the boundary, `n^{2-H}` above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Normalization {
    #[serde(rename = "sqrt_n")]
    SqrtN,
    #[serde(rename = "sqrt_n_over_log_n")]
    SqrtNOverLogN,
    #[serde(rename = "n_pow_2_minus_H")]
    NPow2MinusH,
}

impl Normalization {
    /// Regime for a given Hurst sum; the boundary is detected to 1e-9.
    pub fn for_h(h: f64) -> Normalization {
        if (h - 1.5).abs() <= 1e-9 {
            Normalization::SqrtNOverLogN
        } else if h < 1.5 {
            Normalization::SqrtN
        } else {
            Normalization::NPow2MinusH
        }
    }

    /// The rate value at sample size `n` (`h` only enters above the
    /// boundary).
    pub fn rate(self, n: usize, h: f64) -> f64 {
        let nf = n as f64;
        match self {
            Normalization::SqrtN => nf.sqrt(),
            Normalization::SqrtNOverLogN => (nf / nf.ln()).sqrt(),
            Normalization::NPow2MinusH => nf.powf(2.0 - h),
        }
    }
}

/// One replication's estimates with its normalized error
/// `rate(n) · (ρ-estimate - ρ) / √(V₁V₂)` (the `√(V₁V₂)` factor applies
/// to the first kind only; second-kind errors are already scale-free).
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub rho: f64,
    pub eta: Option<f64>,
    pub n: usize,
    /// Observation step (second kind); `None` on the integer grid.
    pub delta: Option<f64>,
    pub normalization: Normalization,
    pub normalized_error: f64,
    pub replication: usize,
}

// ---------------------------------------------------------------------
// Asymptotic variances, H < 3/2
// ---------------------------------------------------------------------

/// An asymptotic variance together with the bound on its series
/// truncation error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AsympVar {
    pub value: f64,
    /// Bound on the dropped tail, from the fitted `k^{2H-4}` decay of the
    /// last computed terms.
    pub tail_bound: f64,
}

/// Limit variance of `√n (ρ̂_n - ρ) / √(V₁V₂)` for `H < 3/2`: with
/// `F_k = a1 Y¹_k Y²_k + a2 Y¹_{k+s} Y²_k + a3 Y¹_k Y²_{k+s}`,
/// `σ² = [Var(F₀) + 2 Σ_{k≥1} Cov(F₀, F_k)] / (V₁V₂)`, every moment
/// expanded by the Gaussian product-moment formula from the model's
/// stationary covariances. The series is truncated at `k_max` and the
/// dropped tail bounded through the `k^{2H-4}` decay of its terms.
pub fn asymp_var_first(p: &Fou2Params, c: &CoefficientSet, k_max: usize) -> Result<AsympVar> {
    p.validate()?;
    let h = p.h();
    if h >= 1.5 {
        return Err(Error::Unsupported(format!(
            "H = {h} >= 3/2: the lag series diverges; use noncentral_var_limit"
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidParams("series cutoff k_max must be at least 1".into()));
    }
    let s = c.s;
    let lags: Vec<f64> = (0..=k_max + s).map(|k| k as f64).collect();
    let prof = cov_profile(p, &lags, CovMethod::Quadrature)?;
    // E[Y^{ca}_{ta} Y^{cb}_{tb}] from the profile; τ = tb - ta.
    let cov = |ca: usize, ta: i64, cb: usize, tb: i64| -> f64 {
        let tau = tb - ta;
        let k = tau.unsigned_abs() as usize;
        match (ca, cb) {
            (1, 1) => prof.g11[k],
            (2, 2) => prof.g22[k],
            (1, 2) => {
                if tau >= 0 {
                    prof.g21[k]
                } else {
                    prof.g12[k]
                }
            }
            _ => {
                if tau >= 0 {
                    prof.g12[k]
                } else {
                    prof.g21[k]
                }
            }
        }
    };
    // The three product terms of F as (weight, (component, offset) pairs).
    let terms: [(f64, (usize, i64), (usize, i64)); 3] = [
        (c.a1, (1, 0), (2, 0)),
        (c.a2, (1, s as i64), (2, 0)),
        (c.a3, (1, 0), (2, s as i64)),
    ];
    let cov_f = |k: i64| -> Result<f64> {
        let mut total = 0.0;
        for &(wa, xa, ya) in &terms {
            for &(wb, xb, yb) in &terms {
                let vars = [xa, ya, (xb.0, xb.1 + k), (yb.0, yb.1 + k)];
                let mut cmat = Array2::<f64>::zeros((4, 4));
                for i in 0..4 {
                    for j in 0..4 {
                        cmat[[i, j]] = cov(vars[i].0, vars[i].1, vars[j].0, vars[j].1);
                    }
                }
                let e4 = gaussian_product_moment(&[1, 1, 1, 1], &cmat)?;
                total += wa * wb * (e4 - cmat[[0, 1]] * cmat[[2, 3]]);
            }
        }
        Ok(total)
    };
    let mut series: Vec<f64> = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        series.push(cov_f(k as i64)?);
    }
    let sum = series[0] + 2.0 * series[1..].iter().sum::<f64>();
    let v12 = fou_stat_var(p.h1, p.alpha1, p.nu1)? * fou_stat_var(p.h2, p.alpha2, p.nu2)?;
    Ok(AsympVar {
        value: sum / v12,
        tail_bound: tail_bound(&series, k_max, h) / v12,
    })
}

/// Limit variance of `√n (ρ̃_n - ρ)` for `H < 3/2`. At high frequency the
/// estimator error is driven by the increment products of the underlying
/// bifractional pair, so the series needs only the increment covariances
/// `c_ii(τ) = (|τ+1|^{2H_i} + |τ-1|^{2H_i} - 2|τ|^{2H_i})/2` and
/// `c₁₂(τ) = [φ(τ+1) + φ(τ-1) - 2φ(τ)]/2` with
/// `φ(x) = (ρ - η₁₂ sign x)|x|^H`:
/// `σ² = Σ_{τ∈ℤ} [c₁₁(τ) c₂₂(τ) + c₁₂(τ) c₁₂(-τ)]`. No reversion rate
/// or volatility enters.
pub fn asymp_var_second(p: &Fou2Params, k_max: usize) -> Result<AsympVar> {
    p.validate()?;
    let h = p.h();
    if h >= 1.5 {
        return Err(Error::Unsupported(format!(
            "H = {h} >= 3/2: the increment-product series diverges"
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidParams("series cutoff k_max must be at least 1".into()));
    }
    let auto = |tau: f64, hi: f64| -> f64 {
        0.5 * ((tau + 1.0).abs().powf(2.0 * hi) + (tau - 1.0).abs().powf(2.0 * hi)
            - 2.0 * tau.abs().powf(2.0 * hi))
    };
    let phi = |x: f64, e: f64| -> f64 {
        if x == 0.0 {
            0.0
        } else {
            (p.rho - e * x.signum()) * x.abs().powf(h)
        }
    };
    let cross = |tau: f64, e: f64| -> f64 {
        0.5 * (phi(tau + 1.0, e) + phi(tau - 1.0, e) - 2.0 * phi(tau, e))
    };
    // Both products are even in τ: c₁₂(-τ) equals the η-negated c₁₂(τ).
    let term = |tau: f64| -> f64 {
        auto(tau, p.h1) * auto(tau, p.h2) + cross(tau, p.eta12) * cross(tau, -p.eta12)
    };
    let series: Vec<f64> = (0..=k_max).map(|k| term(k as f64)).collect();
    let sum = series[0] + 2.0 * series[1..].iter().sum::<f64>();
    Ok(AsympVar { value: sum, tail_bound: tail_bound(&series, k_max, h) })
}

/// Bounds `2 Σ_{k>K} |term_k|` by fitting the `k^{2H-4}` decay constant on
/// the last computed terms and integrating the power law past `K`.
fn tail_bound(series: &[f64], k_max: usize, h: f64) -> f64 {
    let lo = k_max.saturating_sub(10).max(1);
    let mut cfit: f64 = 0.0;
    for k in lo..=k_max {
        cfit = cfit.max(series[k].abs() * (k as f64).powf(4.0 - 2.0 * h));
    }
    2.0 * cfit * (k_max as f64).powf(2.0 * h - 3.0) / (3.0 - 2.0 * h)
}

/// The boundary-regime tail constant
/// `ℓ = ν₁²ν₂²/(4α₁²α₂²) [(ρ²-η₁₂²) H²(H-1)² + 4H₁H₂(2H₁-1)(2H₂-1)]`,
/// the limit of `k (r₁₁r₂₂ + r₁₂r₂₁)(k)` at `H = 3/2`; the variance of
/// `√(n/log n) (ρ̂_n - ρ)/√(V₁V₂)` converges to
/// `2 (a1+a2+a3)² ℓ / (V₁V₂)`.
fn boundary_tail_constant(p: &Fou2Params) -> f64 {
    let h = p.h();
    let nn = p.nu1 * p.nu1 * p.nu2 * p.nu2;
    let aa = p.alpha1 * p.alpha1 * p.alpha2 * p.alpha2;
    nn / (4.0 * aa)
        * ((p.rho * p.rho - p.eta12 * p.eta12) * h * h * (h - 1.0) * (h - 1.0)
            + 4.0 * p.h1 * p.h2 * (2.0 * p.h1 - 1.0) * (2.0 * p.h2 - 1.0))
}

// ---------------------------------------------------------------------
// Non-central regime, H > 3/2
// ---------------------------------------------------------------------

/// Closed-form limit variance of `n^{2-H} (ρ̂_n - ρ)/√(V₁V₂)` for
/// `H > 3/2`:
/// `(a1+a2+a3)² · 2 [(ρ²-η₁₂²) H²(H-1)² + 4H₁H₂(2H₁-1)(2H₂-1)] /
/// (α₁^{2-2H₁} α₂^{2-2H₂} Γ(2H₁+1) Γ(2H₂+1) (2H-3)(2H-2))`,
/// equivalently `2 (a1+a2+a3)² ℓ / (V₁V₂ (2H-3)(2H-2))` with the same
/// tail constant `ℓ` as the boundary regime — the two regimes share one
/// constant, the `H > 3/2` one just divides by the pole factor that
/// produces the `log n` at the boundary.
///
/// The constant is pinned three independent ways: the covariance-tail
/// summation `Var((1/n)ΣF) ≈ (2/n²) Σ_d (n-d) C d^{2H-4}` with
/// `C = (Σa)² ℓ`, the exact finite-`n` Gaussian moment summation, and
/// Monte Carlo (see the tests).
pub fn noncentral_var_limit(p: &Fou2Params, c: &CoefficientSet) -> Result<f64> {
    p.validate()?;
    let h = p.h();
    if h <= 1.5 {
        return Err(Error::Unsupported(format!(
            "H = {h} <= 3/2: the non-central limit needs H > 3/2"
        )));
    }
    let asum = c.a1 + c.a2 + c.a3;
    let num = 2.0
        * ((p.rho * p.rho - p.eta12 * p.eta12) * h * h * (h - 1.0) * (h - 1.0)
            + 4.0 * p.h1 * p.h2 * (2.0 * p.h1 - 1.0) * (2.0 * p.h2 - 1.0));
    let den = p.alpha1.powf(2.0 - 2.0 * p.h1)
        * p.alpha2.powf(2.0 - 2.0 * p.h2)
        * gamma(2.0 * p.h1 + 1.0)
        * gamma(2.0 * p.h2 + 1.0)
        * (2.0 * h - 3.0)
        * (2.0 * h - 2.0);
    Ok(asum * asum * num / den)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CumulantEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Power-law kernel `z(x, y) = coef · w(x, y) · |x-y|^β` with a weight
/// that may depend on the sign of `x - y`.
#[derive(Debug, Clone, Copy)]
struct ChainKernel {
    coef: f64,
    beta: f64,
    w_gt: f64,
    w_le: f64,
}

/// The normalized large-lag covariance kernels on `[0,1]²`: `z_{ii}` is
/// the rescaled autocovariance tail of component `i`, `z₁₂`/`z₂₁` the two
/// orientations of the cross tail, whose weights `(ρ ∓ η₁₂)` depend on
/// which component leads.
fn chain_kernel(p: &Fou2Params, i: usize, j: usize) -> ChainKernel {
    let h = p.h();
    if i == j {
        let (hi, ai) = if i == 1 { (p.h1, p.alpha1) } else { (p.h2, p.alpha2) };
        ChainKernel {
            coef: 2.0 * hi * (2.0 * hi - 1.0) / (ai.powf(2.0 - 2.0 * hi) * gamma(2.0 * hi + 1.0)),
            beta: 2.0 * hi - 2.0,
            w_gt: 1.0,
            w_le: 1.0,
        }
    } else {
        let coef = h * (h - 1.0)
            / (p.alpha1.powf(1.0 - p.h1)
                * p.alpha2.powf(1.0 - p.h2)
                * (gamma(2.0 * p.h1 + 1.0) * gamma(2.0 * p.h2 + 1.0)).sqrt());
        let (w_gt, w_le) = if i == 1 {
            (p.rho - p.eta12, p.rho + p.eta12)
        } else {
            (p.rho + p.eta12, p.rho - p.eta12)
        };
        ChainKernel { coef, beta: h - 2.0, w_gt, w_le }
    }
}

/// Limit of the order-`p` cumulant of `n^{2-H}(ρ̂_n - ρ)/√(V₁V₂)` for
/// `H > 3/2`, `p ∈ {2, 3, 4}`:
/// `(p-1)!/2 · (a1+a2+a3)^p Σ ∫_{[0,1]^p} Π_m z_{i_m j_m}(x_m, x_{m+1})`,
/// the sum running over index chains with `i_{m+1} = 3 - j_m`
/// (cyclically), so consecutive kernels always switch component.
///
/// The prefactor comes from the diagram count for cyclic cumulants of
/// products of two Gaussians: `(p-1)! 2^{p-1}` distinct connected
/// pairings (`κ_p` of a χ²₁ is `2^{p-1}(p-1)!`), and the `2^p` chain
/// orientations double-count each undirected diagram once, leaving
/// `(p-1)!/2` in front of the plain chain sum. At `p = 2` this
/// reproduces [`noncentral_var_limit`] exactly.
///
/// Each chain integral is estimated by Monte Carlo with the power-law
/// links importance-sampled exactly: `x_{m+1}` is drawn from the density
/// `∝ |t - x_m|^{β_m}` on `[0,1]`, which cancels the singular factor and
/// leaves the bounded normalization `((x^γ + (1-x)^γ)/γ, γ = β+1)` as the
/// weight. The chain is rotated so the one factor evaluated directly is
/// the mildest (`β > -1/2` always holds for it when `H > 3/2`), keeping
/// the estimator variance finite. Chains whose cross kernels vanish
/// (`ρ = η₁₂ = 0`) are dropped exactly; for `p = 3` that excludes every
/// chain, reproducing the vanishing third cumulant.
pub fn cumulant_limit(
    p: &Fou2Params,
    c: &CoefficientSet,
    order: usize,
    samples: usize,
    seed: u64,
) -> Result<CumulantEstimate> {
    p.validate()?;
    let h = p.h();
    if h <= 1.5 {
        return Err(Error::Unsupported(format!(
            "H = {h} <= 3/2: chain cumulants describe the non-central regime only"
        )));
    }
    if !(2..=4).contains(&order) {
        return Err(Error::InvalidParams(format!("cumulant order {order} not in {{2, 3, 4}}")));
    }
    if samples == 0 {
        return Err(Error::InvalidParams("sample count must be positive".into()));
    }
    let mut total = 0.0;
    let mut var_total = 0.0;
    for mask in 0u32..(1 << order) {
        let j: Vec<usize> = (0..order).map(|m| 1 + ((mask >> m) & 1) as usize).collect();
        let kers: Vec<ChainKernel> = (0..order)
            .map(|m| {
                let i = 3 - j[(m + order - 1) % order];
                chain_kernel(p, i, j[m])
            })
            .collect();
        if kers.iter().any(|k| k.w_gt == 0.0 && k.w_le == 0.0) {
            continue; // the chain's integrand is identically zero
        }
        // Close the cycle on the mildest singularity.
        let close = (0..order)
            .max_by(|&a, &b| kers[a].beta.total_cmp(&kers[b].beta))
            .expect("order >= 2");
        let rot: Vec<ChainKernel> = (1..=order).map(|m| kers[(close + m) % order]).collect();
        let mut rng = path_rng(seed, u64::from(mask));
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let x1: f64 = rng.gen();
            let mut x = x1;
            let mut w = 1.0;
            for ker in &rot[..order - 1] {
                let g = ker.beta + 1.0;
                let lm = x.powf(g);
                let rm = (1.0 - x).powf(g);
                let u = rng.gen::<f64>() * (lm + rm);
                let t = if u < lm {
                    x - (lm - u).powf(1.0 / g)
                } else {
                    x + (u - lm).powf(1.0 / g)
                };
                let t = t.clamp(0.0, 1.0);
                w *= ker.coef * (if x > t { ker.w_gt } else { ker.w_le }) * (lm + rm) / g;
                x = t;
            }
            let ker = rot[order - 1];
            let d = x - x1;
            let val = if d == 0.0 {
                0.0
            } else {
                w * ker.coef
                    * (if d > 0.0 { ker.w_gt } else { ker.w_le })
                    * d.abs().powf(ker.beta)
            };
            sum += val;
            sum2 += val * val;
        }
        let nf = samples as f64;
        let mean = sum / nf;
        total += mean;
        var_total += ((sum2 / nf - mean * mean) / nf).max(0.0);
    }
    let asum = c.a1 + c.a2 + c.a3;
    let pref = 0.5 * (1..order).product::<usize>() as f64 * asum.powi(order as i32);
    Ok(CumulantEstimate { value: pref * total, std_error: pref.abs() * var_total.sqrt() })
}

// ---------------------------------------------------------------------
// Monte Carlo CLT experiment
// ---------------------------------------------------------------------

/// Which estimator family an experiment drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExperimentKind {
    #[serde(rename = "first_kind")]
    FirstKind,
    #[serde(rename = "second_kind")]
    SecondKind,
}

/// Configuration of a [`clt_experiment`] run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub params: Fou2Params,
    pub kind: ExperimentKind,
    /// First-kind lag (ignored by second-kind runs).
    pub lag: usize,
    /// Sample sizes, ascending; the largest one feeds the KS statistic.
    pub n_ladder: Vec<usize>,
    /// Replications per sample size.
    pub replications: usize,
    /// Second-kind step exponent: `Δ_n = n^{-gamma}`.
    pub gamma: f64,
    pub seed: u64,
}

/// Per-replication normalized error, tagged by its ladder rung.
#[derive(Debug, Clone, Copy)]
pub struct ErrorRow {
    pub n: usize,
    pub replication: usize,
    pub normalized_error: f64,
}

/// Outcome of a [`clt_experiment`]: the analytic limit variance used as
/// the KS reference, per-rung variances of the raw errors with the fitted
/// log-log slope, per-rung excess kurtosis of the normalized errors, the
/// KS distance at the largest rung, and that rung's full replication
/// reports.
#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub kind: ExperimentKind,
    pub h: f64,
    pub normalization: Normalization,
    /// Analytic limit variance of the normalized error.
    pub sigma2: f64,
    pub n_ladder: Vec<usize>,
    /// Sample variance of the raw (un-normalized) errors per rung.
    pub var_ladder: Vec<f64>,
    /// Excess kurtosis `κ₄/κ₂²` of the normalized errors per rung.
    pub kappa4: Vec<f64>,
    /// Least-squares slope of `log Var` against `log n`.
    pub var_slope: f64,
    /// Kolmogorov–Smirnov distance of the largest rung's normalized
    /// errors to `N(0, sigma2)`.
    pub ks_stat: f64,
    /// Replication reports at the largest rung.
    pub estimates: Vec<EstimatorReport>,
    #[serde(skip)]
    pub errors: Vec<ErrorRow>,
}

impl CltReport {
    /// Serializes everything but the raw error rows.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidParams(format!("report serialization: {e}")))
    }

    /// Writes one CSV row per replication and rung.
    pub fn write_errors_csv<W: IoWrite>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,replication,normalized_error")?;
        for r in &self.errors {
            writeln!(out, "{},{},{:.16e}", r.n, r.replication, r.normalized_error)?;
        }
        Ok(())
    }
}

/// Kolmogorov–Smirnov distance of a sample to `N(0, sigma²)`.
pub fn ks_statistic(xs: &[f64], sigma: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Dim("KS statistic needs a non-empty sample".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParams(format!("sigma = {sigma} must be positive")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParams(format!("KS reference: {e}")))?;
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = normal.cdf(*x);
        d = d.max((f - i as f64 / m).abs()).max(((i + 1) as f64 / m - f).abs());
    }
    Ok(d)
}

/// Unbiased sample variance.
fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Least-squares slope of `ys` on `xs`.
fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Distinct simulation seed per ladder rung, so streams never overlap
/// across rungs.
fn rung_seed(seed: u64, n: usize) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs replicated estimations across the sample-size ladder and checks
/// the advertised limit behavior: per-rung error variances and their
/// log-log slope (`-1` below the boundary, `2H-4` above), the excess
/// kurtosis trend of the normalized errors, and the KS distance of the
/// largest rung to the analytic normal limit `N(0, σ̂²)`. `σ̂²` is always
/// the analytic limit — the experiment tests the variance formula, not
/// just Gaussianity. Replications occupy disjoint counter streams of the
/// seed, and each rung mixes `n` into the seed.
///
/// Second-kind runs are restricted to `H < 3/2` (the regime with a
/// second-kind central limit theorem) and observe on `kΔ_n` with
/// `Δ_n = n^{-gamma}`.
pub fn clt_experiment(cfg: &ExperimentConfig) -> Result<CltReport> {
    let p = &cfg.params;
    p.validate()?;
    let h = p.h();
    if cfg.n_ladder.is_empty() {
        return Err(Error::InvalidParams("sample-size ladder must be non-empty".into()));
    }
    if cfg.n_ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams("sample-size ladder must be strictly increasing".into()));
    }
    if cfg.replications < 8 {
        return Err(Error::InvalidParams("need at least 8 replications".into()));
    }
    let norm = Normalization::for_h(h);
    // First-kind coefficients double as the input to the variance
    // formulas; second-kind runs need neither.
    let (coeffs, scale, sigma2) = match cfg.kind {
        ExperimentKind::FirstKind => {
            let c = first_kind_coeffs(p, cfg.lag)?;
            let v12 = (fou_stat_var(p.h1, p.alpha1, p.nu1)?
                * fou_stat_var(p.h2, p.alpha2, p.nu2)?)
            .sqrt();
            let s2 = match norm {
                Normalization::SqrtN => asymp_var_first(p, &c, DEFAULT_VAR_CUTOFF)?.value,
                Normalization::SqrtNOverLogN => {
                    let asum = c.a1 + c.a2 + c.a3;
                    2.0 * asum * asum * boundary_tail_constant(p) / (v12 * v12)
                }
                Normalization::NPow2MinusH => noncentral_var_limit(p, &c)?,
            };
            (Some(c), v12, s2)
        }
        ExperimentKind::SecondKind => {
            if h >= 1.5 - 1e-9 {
                return Err(Error::Unsupported(format!(
                    "H = {h}: second-kind experiments need H < 3/2"
                )));
            }
            if !(cfg.gamma > 0.5 && cfg.gamma < 1.0) {
                return Err(Error::InvalidParams(format!(
                    "gamma = {} outside (1/2, 1): the step conditions nΔ→∞, nΔ²→0 fail",
                    cfg.gamma
                )));
            }
            (None, 1.0, asymp_var_second(p, DEFAULT_VAR_CUTOFF)?.value)
        }
    };
    let last = cfg.n_ladder.len() - 1;
    let mut var_ladder = Vec::with_capacity(cfg.n_ladder.len());
    let mut kappa4 = Vec::with_capacity(cfg.n_ladder.len());
    let mut errors: Vec<ErrorRow> = Vec::new();
    let mut estimates: Vec<EstimatorReport> = Vec::new();
    let mut ks_stat = f64::NAN;
    for (li, &n) in cfg.n_ladder.iter().enumerate() {
        let (grid, delta): (Vec<f64>, Option<f64>) = match cfg.kind {
            ExperimentKind::FirstKind => {
                ((0..=n + cfg.lag).map(|i| i as f64).collect(), None)
            }
            ExperimentKind::SecondKind => {
                let d = (n as f64).powf(-cfg.gamma);
                ((0..=n).map(|k| k as f64 * d).collect(), Some(d))
            }
        };
        let paths = simulate_2fou(p, &grid, cfg.replications, rung_seed(cfg.seed, n))?;
        let rate = norm.rate(n, h);
        let mut raw = Vec::with_capacity(cfg.replications);
        let mut nerr = Vec::with_capacity(cfg.replications);
        for r in 0..cfg.replications {
            let y1 = paths.y1.row(r);
            let y2 = paths.y2.row(r);
            let y1 = y1.to_slice().expect("paths are row-contiguous");
            let y2 = y2.to_slice().expect("paths are row-contiguous");
            let (rho_e, eta_e) = match cfg.kind {
                ExperimentKind::FirstKind => {
                    let (rho_e, eta_e) =
                        estimate_first_kind(y1, y2, coeffs.as_ref().expect("set above"))?;
                    (rho_e, Some(eta_e))
                }
                ExperimentKind::SecondKind => {
                    estimate_second_kind(y1, y2, delta.expect("set above"), p)?
                }
            };
            let err = rho_e - p.rho;
            let ne = rate * err / scale;
            raw.push(err);
            nerr.push(ne);
            errors.push(ErrorRow { n, replication: r, normalized_error: ne });
            if li == last {
                estimates.push(EstimatorReport {
                    rho: rho_e,
                    eta: eta_e,
                    n,
                    delta,
                    normalization: norm,
                    normalized_error: ne,
                    replication: r,
                });
            }
        }
        var_ladder.push(sample_var(&raw));
        let k2 = sample_cumulants(&nerr, 2)?;
        kappa4.push(sample_cumulants(&nerr, 4)? / (k2 * k2));
        if li == last {
            ks_stat = ks_statistic(&nerr, sigma2.sqrt())?;
        }
    }
    let lx: Vec<f64> = cfg.n_ladder.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = var_ladder.iter().map(|v| v.ln()).collect();
    let var_slope = if cfg.n_ladder.len() >= 2 { ls_slope(&lx, &ly) } else { f64::NAN };
    Ok(CltReport {
        kind: cfg.kind,
        h,
        normalization: norm,
        sigma2,
        n_ladder: cfg.n_ladder.clone(),
        var_ladder,
        kappa4,
        var_slope,
        ks_stat,
        estimates,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::coherence_ellipse;
    use approx::assert_relative_eq;

    fn p_a() -> Fou2Params {
        Fou2Params::new(0.4, 0.35, 1.0, 2.0, 1.0, 1.5, 0.6, 0.25).unwrap()
    }

    fn p_b() -> Fou2Params {
        Fou2Params::new(0.65, 0.75, 0.8, 1.3, 1.0, 1.0, 0.3, -0.2).unwrap()
    }

    /// Independent components below the boundary (H = 0.9).
    fn p_indep() -> Fou2Params {
        Fou2Params::new(0.6, 0.3, 1.0, 2.0, 1.0, 1.5, 0.0, 0.0).unwrap()
    }

    /// Above the boundary (H = 1.7) with both correlations on.
    fn p_heavy() -> Fou2Params {
        Fou2Params::new(0.85, 0.85, 1.0, 1.3, 1.0, 1.0, 0.4, 0.1).unwrap()
    }

    /// A seeded random admissible parameter set: Hurst pair away from the
    /// log-regime H = 1, correlations drawn from 0.7 of the coherence
    /// ellipse.
    fn random_params(k: u64, h_cap: f64) -> Fou2Params {
        let mut rng = path_rng(9876, k);
        loop {
            let h1 = 0.15 + 0.75 * rng.gen::<f64>();
            let h2 = 0.15 + 0.75 * rng.gen::<f64>();
            if (h1 + h2 - 1.0).abs() < 0.05 || h1 + h2 >= h_cap {
                continue;
            }
            let a1 = 0.4 + 1.1 * rng.gen::<f64>();
            let a2 = 0.4 + 1.1 * rng.gen::<f64>();
            let n1 = 0.5 + 1.5 * rng.gen::<f64>();
            let n2 = 0.5 + 1.5 * rng.gen::<f64>();
            let (ea, eb) = coherence_ellipse(h1, h2);
            let th = std::f64::consts::TAU * rng.gen::<f64>();
            let rho = (0.7 * ea * th.cos()).clamp(-0.9, 0.9);
            let eta = (0.7 * eb * th.sin()).clamp(-0.9, 0.9);
            if let Ok(p) = Fou2Params::new(h1, h2, a1, a2, n1, n2, rho, eta) {
                return p;
            }
        }
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (m, (sample_var(xs) / xs.len() as f64).sqrt())
    }

    /// Simulates and runs the first-kind estimator over replications.
    fn mc_first(p: &Fou2Params, c: &CoefficientSet, n: usize, m: usize, seed: u64) -> Vec<(f64, f64)> {
        let grid: Vec<f64> = (0..=n + c.s).map(|i| i as f64).collect();
        let paths = simulate_2fou(p, &grid, m, seed).unwrap();
        (0..m)
            .map(|r| {
                let y1 = paths.y1.row(r);
                let y2 = paths.y2.row(r);
                estimate_first_kind(y1.to_slice().unwrap(), y2.to_slice().unwrap(), c).unwrap()
            })
            .collect()
    }

    #[test]
    fn first_kind_coefficients_match_reference() {
        // Independently derived by high-precision quadrature of the
        // memory integrals at s = 1 for the p_a parameter set.
        let c = first_kind_coeffs(&p_a(), 1).unwrap();
        assert_eq!(c.s, 1);
        assert_relative_eq!(c.a1, 3.538139100774404, max_relative = 1e-12);
        assert_relative_eq!(c.a2, -6.535305216148778, max_relative = 1e-12);
        assert_relative_eq!(c.a3, -8.3787068889512802, max_relative = 1e-12);
        assert_relative_eq!(c.b1, 1.270269760828845, max_relative = 1e-12);
        assert_eq!(c.b2, c.a2);
        assert_eq!(c.b3, -c.a3);
    }

    #[test]
    fn coefficient_identity_recovers_the_driving_correlations() {
        // The lagged covariances at the fixture, by high-precision 2-D
        // quadrature of the moving-average representation.
        let pa = p_a();
        assert_relative_eq!(cross_cov(&pa, -1.0).unwrap(), 0.04999386082884831, max_relative = 1e-10);
        assert_relative_eq!(cross_cov(&pa, 1.0).unwrap(), 0.021429148155669311, max_relative = 1e-10);
        let mut sets = vec![pa, p_b()];
        for k in 0..5 {
            sets.push(random_params(k, 1.9));
        }
        for (i, p) in sets.iter().enumerate() {
            let lags: &[usize] = if i < 2 { &[1, 2, 3] } else { &[1] };
            for &s in lags {
                let c = first_kind_coeffs(p, s).unwrap();
                let c0 = cross_cov_zero(p);
                let g12 = cross_cov(p, -(s as f64)).unwrap();
                let g21 = cross_cov(p, s as f64).unwrap();
                let rho = c.a1 * c0 + c.a2 * g12 + c.a3 * g21;
                let eta = c.b1 * c0 + c.b2 * g12 + c.b3 * g21;
                assert!(
                    (rho - p.rho).abs() < 1e-8,
                    "set {i}, s = {s}: rho identity off by {:e}",
                    rho - p.rho
                );
                assert!(
                    (eta - p.eta12).abs() < 1e-8,
                    "set {i}, s = {s}: eta identity off by {:e}",
                    eta - p.eta12
                );
            }
        }
    }

    #[test]
    fn equal_rates_drop_the_symmetric_eta_weight() {
        // With α₁ = α₂ the two memory integrals coincide, so the lag-0
        // average carries no weight in the η estimator.
        let p = Fou2Params::new(0.4, 0.35, 1.3, 1.3, 1.0, 1.5, 0.2, 0.1).unwrap();
        let c = first_kind_coeffs(&p, 2).unwrap();
        assert!(c.b1.abs() < 1e-14, "b1 = {:e}", c.b1);
    }

    #[test]
    fn first_kind_estimate_matches_hand_computed_sums() {
        let c = CoefficientSet { s: 1, a1: 0.5, a2: -2.0, a3: 1.5, b1: 1.0, b2: -2.0, b3: -1.5 };
        let y1 = [0.5, 1.0, 2.0, 3.0];
        let y2 = [1.0, -1.0, 2.0, 0.5];
        // n = 2: m0 = (1*(-1) + 2*2)/2, m+ = 2*(-1)/2, m- = 1*2/2.
        let (rho, eta) = estimate_first_kind(&y1, &y2, &c).unwrap();
        assert_relative_eq!(rho, 4.25, max_relative = 1e-14);
        assert_relative_eq!(eta, 2.0, max_relative = 1e-14);
        // Only relative positions matter: slicing junk off the front of a
        // longer buffer reproduces the value bit for bit.
        let big1 = [[9.0, -7.0].as_slice(), y1.as_slice()].concat();
        let big2 = [[3.0, 11.0].as_slice(), y2.as_slice()].concat();
        let (rho2, eta2) = estimate_first_kind(&big1[2..], &big2[2..], &c).unwrap();
        assert_eq!(rho, rho2);
        assert_eq!(eta, eta2);
    }

    #[test]
    fn all_zero_paths_give_zero_estimates() {
        let c = first_kind_coeffs(&p_a(), 1).unwrap();
        let z = [0.0; 12];
        assert_eq!(estimate_first_kind(&z, &z, &c).unwrap(), (0.0, 0.0));
        let (r, e) = estimate_second_kind(&z, &z, 0.1, &p_a()).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(e, Some(0.0));
    }

    #[test]
    fn first_kind_bias_follows_the_expectation_formula() {
        // At n = 120 the O(1/n) edge deficit is visible; the Monte Carlo
        // mean must sit on the exact expectation, not on (ρ, η).
        let p = p_a();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let n = 120;
        let ests = mc_first(&p, &c, n, 600, 41);
        let (mean_r, se_r) = mean_and_se(&ests.iter().map(|e| e.0).collect::<Vec<_>>());
        let (mean_e, se_e) = mean_and_se(&ests.iter().map(|e| e.1).collect::<Vec<_>>());
        let (exp_r, exp_e) = first_kind_mean(&p, &c, n).unwrap();
        assert!(
            (mean_r - exp_r).abs() <= 3.0 * se_r,
            "rho mean {mean_r} vs expectation {exp_r} (se {se_r})"
        );
        assert!(
            (mean_e - exp_e).abs() <= 3.0 * se_e,
            "eta mean {mean_e} vs expectation {exp_e} (se {se_e})"
        );
        assert!(first_kind_mean(&p, &c, 0).is_err());
    }

    #[test]
    fn first_kind_estimator_concentrates_on_rho() {
        let p = Fou2Params::new(0.4, 0.35, 1.0, 2.0, 1.0, 1.0, 0.3, 0.1).unwrap();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let ests = mc_first(&p, &c, 2000, 200, 42);
        let (mean_r, se_r) = mean_and_se(&ests.iter().map(|e| e.0).collect::<Vec<_>>());
        let (mean_e, se_e) = mean_and_se(&ests.iter().map(|e| e.1).collect::<Vec<_>>());
        assert!(
            (mean_r - 0.3).abs() <= 3.0 * se_r + 1e-3,
            "rho mean {mean_r} (se {se_r})"
        );
        assert!(
            (mean_e - 0.1).abs() <= 3.0 * se_e + 1e-3,
            "eta mean {mean_e} (se {se_e})"
        );
    }

    #[test]
    fn second_kind_estimate_matches_hand_computed_sums() {
        let p = p_a();
        let y1 = [1.0, 2.0, 4.0];
        let y2 = [3.0, 5.0, 8.0];
        let scale = 1.0 * 1.5 * 2.0 * 0.5f64.powf(0.75);
        let (rho, eta) = estimate_second_kind(&y1, &y2, 0.5, &p).unwrap();
        assert_relative_eq!(rho, 8.0 / scale, max_relative = 1e-14);
        assert_relative_eq!(eta.unwrap(), -5.0 / scale, max_relative = 1e-14);
        // Swapping the components negates the antisymmetric sum exactly.
        let (_, eta_sw) = estimate_second_kind(&y2, &y1, 0.5, &p).unwrap();
        assert_eq!(eta_sw.unwrap(), -eta.unwrap());
        // Identical components: every antisymmetric term is exactly zero.
        let (_, eta_same) = estimate_second_kind(&y1, &y1, 0.5, &p).unwrap();
        assert_eq!(eta_same.unwrap(), 0.0);
        // Above H = 1 the η estimator is withheld.
        let (_, eta_hi) = estimate_second_kind(&y1, &y2, 0.5, &p_b()).unwrap();
        assert!(eta_hi.is_none());
    }

    #[test]
    fn second_kind_bias_vanishes_with_the_step() {
        let p = p_a();
        // ρ side: the exact mean approaches ρ at rate Δ^{min(1, 2-H)}.
        let gaps: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&d| (second_kind_mean_rho(&p, d).unwrap() - p.rho).abs())
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps {gaps:?}");
        assert!(gaps[2] < 0.02 * p.rho.abs(), "final gap {}", gaps[2]);
        // η side: slower (Δ^{1-H} here is Δ^{0.25}), but the exact mean
        // climbs monotonically toward +η with shrinking gaps.
        let eta_mean = |d: f64| -> f64 {
            let num = cross_cov(&p, d).unwrap() - cross_cov(&p, -d).unwrap();
            num / (p.nu1 * p.nu2 * d.powf(p.h()))
        };
        let egaps: Vec<f64> =
            [0.1, 0.02, 0.002].iter().map(|&d| (eta_mean(d) - p.eta12).abs()).collect();
        assert!(egaps[0] > egaps[1] && egaps[1] > egaps[2], "eta gaps {egaps:?}");
        assert!(eta_mean(0.002) > 0.0, "eta mean should have the sign of eta by now");
    }

    #[test]
    fn second_kind_estimator_concentrates_on_rho() {
        let p = p_a();
        let n = 4000;
        let delta = (n as f64).powf(-0.6);
        let grid: Vec<f64> = (0..=n).map(|k| k as f64 * delta).collect();
        let m = 200;
        let paths = simulate_2fou(&p, &grid, m, 43).unwrap();
        let (mut rhos, mut etas) = (Vec::new(), Vec::new());
        for r in 0..m {
            let (rho, eta) = estimate_second_kind(
                paths.y1.row(r).to_slice().unwrap(),
                paths.y2.row(r).to_slice().unwrap(),
                delta,
                &p,
            )
            .unwrap();
            rhos.push(rho);
            etas.push(eta.unwrap());
        }
        let (mean_r, se_r) = mean_and_se(&rhos);
        let exact_r = second_kind_mean_rho(&p, delta).unwrap();
        assert!(
            (mean_r - exact_r).abs() <= 3.0 * se_r,
            "rho mean {mean_r} vs exact {exact_r} (se {se_r})"
        );
        assert!((mean_r - p.rho).abs() < 0.02, "rho mean {mean_r} vs rho {}", p.rho);
        let (mean_e, se_e) = mean_and_se(&etas);
        let exact_e = (cross_cov(&p, delta).unwrap() - cross_cov(&p, -delta).unwrap())
            / (p.nu1 * p.nu2 * delta.powf(p.h()));
        assert!(
            (mean_e - exact_e).abs() <= 3.0 * se_e,
            "eta mean {mean_e} vs exact {exact_e} (se {se_e})"
        );
    }

    #[test]
    fn asymp_var_first_agrees_with_monte_carlo_when_independent() {
        let p = p_indep();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let av = asymp_var_first(&p, &c, DEFAULT_VAR_CUTOFF).unwrap();
        assert!(av.value > 0.0 && av.tail_bound < 0.05 * av.value);
        let n = 4000;
        let scale = (fou_stat_var(p.h1, p.alpha1, p.nu1).unwrap()
            * fou_stat_var(p.h2, p.alpha2, p.nu2).unwrap())
        .sqrt();
        let nerr: Vec<f64> = mc_first(&p, &c, n, 500, 44)
            .iter()
            .map(|e| (n as f64).sqrt() * e.0 / scale)
            .collect();
        let sv = sample_var(&nerr);
        assert!(
            (sv - av.value).abs() <= 0.2 * av.value,
            "sample variance {sv} vs analytic {}",
            av.value
        );
    }

    #[test]
    fn asymp_var_tail_bound_covers_truncation() {
        for p in [p_a(), p_b()] {
            let c = first_kind_coeffs(&p, 1).unwrap();
            let short = asymp_var_first(&p, &c, 200).unwrap();
            let long = asymp_var_first(&p, &c, 400).unwrap();
            assert!(
                (short.value - long.value).abs() <= short.tail_bound,
                "H = {}: |{} - {}| > bound {}",
                p.h(),
                short.value,
                long.value,
                short.tail_bound
            );
            assert!(long.tail_bound < short.tail_bound);
            let s2 = asymp_var_second(&p, 200).unwrap();
            let s4 = asymp_var_second(&p, 400).unwrap();
            assert!((s2.value - s4.value).abs() <= s2.tail_bound);
        }
    }

    #[test]
    fn asymp_var_positive_for_valid_parameters() {
        let mut sets = vec![p_a(), p_b(), p_indep()];
        for k in 10..14 {
            sets.push(random_params(k, 1.45));
        }
        for p in &sets {
            let c = first_kind_coeffs(p, 1).unwrap();
            let av = asymp_var_first(p, &c, 150).unwrap();
            assert!(av.value.is_finite() && av.value > 0.0, "H = {}: {av:?}", p.h());
            let av2 = asymp_var_second(p, 150).unwrap();
            assert!(av2.value.is_finite() && av2.value > 0.0, "H = {}: {av2:?}", p.h());
        }
    }

    #[test]
    fn noncentral_variance_matches_simulation_above_the_boundary() {
        let p = p_heavy();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let v = noncentral_var_limit(&p, &c).unwrap();
        assert!(v > 0.0);
        let n = 4000;
        let h = p.h();
        let scale = (fou_stat_var(p.h1, p.alpha1, p.nu1).unwrap()
            * fou_stat_var(p.h2, p.alpha2, p.nu2).unwrap())
        .sqrt();
        let nerr: Vec<f64> = mc_first(&p, &c, n, 600, 45)
            .iter()
            .map(|e| (n as f64).powf(2.0 - h) * (e.0 - p.rho) / scale)
            .collect();
        let sv = sample_var(&nerr);
        assert!(
            (sv - v).abs() <= 0.15 * v,
            "sample variance {sv} vs analytic {v} (ratio {})",
            sv / v
        );
    }

    #[test]
    fn exact_gaussian_summation_confirms_the_noncentral_constant() {
        // Var(ρ̂_n) computed in closed form (Gaussian product moments over
        // every ordered pair of summands, with exact edge counts), scaled
        // by n^{2(2-H)}/(V₁V₂). Deterministic — no Monte Carlo — so it
        // pins the constant of the non-central limit.
        let p = p_heavy();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let closed = noncentral_var_limit(&p, &c).unwrap();
        let h = p.h();
        let s = c.s as i64;
        let n_max: usize = 1024;
        let lags: Vec<f64> = (0..=n_max + c.s).map(|k| k as f64).collect();
        let prof = cov_profile(&p, &lags, CovMethod::Quadrature).unwrap();
        let cov = |ca: usize, ta: i64, cb: usize, tb: i64| -> f64 {
            let tau = tb - ta;
            let k = tau.unsigned_abs() as usize;
            match (ca, cb) {
                (1, 1) => prof.g11[k],
                (2, 2) => prof.g22[k],
                (1, 2) => {
                    if tau >= 0 {
                        prof.g21[k]
                    } else {
                        prof.g12[k]
                    }
                }
                _ => {
                    if tau >= 0 {
                        prof.g12[k]
                    } else {
                        prof.g21[k]
                    }
                }
            }
        };
        let v12 = fou_stat_var(p.h1, p.alpha1, p.nu1).unwrap()
            * fou_stat_var(p.h2, p.alpha2, p.nu2).unwrap();
        let exact_var = |n: usize| -> f64 {
            let nl = n as i64;
            let terms: [(f64, i64, i64, i64); 3] =
                [(c.a1, 0, 0, nl), (c.a2, s, 0, nl - s), (c.a3, 0, s, nl - s)];
            let mut total = 0.0;
            for &(wa, ua, va, na) in &terms {
                for &(wb, ub, vb, nb) in &terms {
                    for d in (1 - na)..=(nb - 1) {
                        let cnt = na.min(nb - d) - 1i64.max(1 - d) + 1;
                        if cnt <= 0 {
                            continue;
                        }
                        let vars = [(1, ua), (2, va), (1, d + ub), (2, d + vb)];
                        let mut cmat = Array2::<f64>::zeros((4, 4));
                        for i in 0..4 {
                            for j in 0..4 {
                                cmat[[i, j]] =
                                    cov(vars[i].0, vars[i].1, vars[j].0, vars[j].1);
                            }
                        }
                        let e4 = gaussian_product_moment(&[1, 1, 1, 1], &cmat).unwrap();
                        total += wa * wb * cnt as f64 * (e4 - cmat[[0, 1]] * cmat[[2, 3]]);
                    }
                }
            }
            let nf = n as f64;
            nf.powf(2.0 * (2.0 - h)) * (total / (nf * nf)) / v12
        };
        let v256 = exact_var(256);
        let v512 = exact_var(512);
        let v1024 = exact_var(1024);
        println!("exact scaled variance: n=256 {v256}, n=512 {v512}, n=1024 {v1024}, closed {closed}");
        // The scaled variance approaches the limit monotonically...
        assert!(
            (v1024 / closed - 1.0).abs() < (v256 / closed - 1.0).abs(),
            "not approaching: {v256} -> {v1024} vs {closed}"
        );
        // ...and Richardson extrapolation in the n^{3-2H} correction lands
        // on the closed form.
        let theta = 2f64.powf(3.0 - 2.0 * h);
        let extrap = (v1024 - theta * v512) / (1.0 - theta);
        assert!(
            (extrap / closed - 1.0).abs() < 0.05,
            "extrapolated {extrap} vs closed {closed}"
        );
    }

    #[test]
    fn zero_total_weight_kills_the_noncentral_variance() {
        let p = p_heavy();
        let c = CoefficientSet { s: 1, a1: 1.0, a2: 2.0, a3: -3.0, b1: 0.0, b2: 0.0, b3: 0.0 };
        assert_eq!(noncentral_var_limit(&p, &c).unwrap(), 0.0);
    }

    #[test]
    fn chain_cumulant_matches_closed_form_variance() {
        let p = p_heavy();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let exact = noncentral_var_limit(&p, &c).unwrap();
        let est = cumulant_limit(&p, &c, 2, 200_000, 46).unwrap();
        assert!(est.std_error > 0.0);
        assert!(
            (est.value - exact).abs() <= 3.0 * est.std_error,
            "chain MC {} ± {} vs closed form {exact}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn third_cumulant_vanishes_without_cross_correlation() {
        // Every length-3 chain must use a cross kernel (auto kernels
        // alternate components, impossible on an odd cycle), so at
        // ρ = η = 0 all chains are dropped exactly.
        let p = Fou2Params::new(0.85, 0.85, 1.0, 1.3, 1.0, 1.0, 0.0, 0.0).unwrap();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let est = cumulant_limit(&p, &c, 3, 1000, 7).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn fourth_cumulant_positive_inside_the_wedge() {
        // With ρ ± η > 0 every chain integrand is non-negative, so the
        // fourth cumulant is strictly positive — the limit is genuinely
        // non-Gaussian.
        let p = p_heavy();
        let c = first_kind_coeffs(&p, 1).unwrap();
        let est = cumulant_limit(&p, &c, 4, 150_000, 47).unwrap();
        assert!(est.value > 0.0, "kappa4 = {} ± {}", est.value, est.std_error);
        assert!(est.value > 2.0 * est.std_error);
    }

    fn base_cfg(p: Fou2Params, kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            params: p,
            kind,
            lag: 1,
            n_ladder: vec![500, 1000, 2000, 4000],
            replications: 300,
            gamma: DEFAULT_GAMMA,
            seed: 48,
        }
    }

    #[test]
    fn first_kind_experiment_is_gaussian_in_the_clt_regime() {
        let p = Fou2Params::new(0.4, 0.3, 1.0, 2.0, 1.0, 1.5, 0.3, 0.1).unwrap();
        let mut cfg = base_cfg(p, ExperimentKind::FirstKind);
        cfg.replications = 500;
        let rep = clt_experiment(&cfg).unwrap();
        assert_eq!(rep.normalization, Normalization::SqrtN);
        assert!(rep.sigma2 > 0.0);
        assert_eq!(rep.estimates.len(), 500);
        assert_eq!(rep.errors.len(), 4 * 500);
        // 1% critical value of the one-sample KS statistic at M = 500.
        assert!(rep.ks_stat < 0.0728, "KS = {}", rep.ks_stat);
        assert!((rep.var_slope + 1.0).abs() <= 0.15, "slope = {}", rep.var_slope);
        let k_first = rep.kappa4[0].abs();
        let k_last = rep.kappa4.last().unwrap().abs();
        // Excess kurtosis stays Gaussian-small; 0.44 ≈ 2 SE at M = 500.
        assert!(k_last <= k_first + 0.44, "kappa4 {:?}", rep.kappa4);
        assert!(k_last < 0.66, "kappa4 {:?}", rep.kappa4);
    }

    #[test]
    fn variance_scaling_tracks_the_heavy_regime() {
        let mut cfg = base_cfg(p_heavy(), ExperimentKind::FirstKind);
        cfg.replications = 400;
        cfg.seed = 49;
        let rep = clt_experiment(&cfg).unwrap();
        assert_eq!(rep.normalization, Normalization::NPow2MinusH);
        // Raw error variance decays like n^{2H-4} = n^{-0.6} here.
        assert!((rep.var_slope + 0.6).abs() <= 0.2, "slope = {}", rep.var_slope);
        let c = first_kind_coeffs(&cfg.params, 1).unwrap();
        assert_eq!(rep.sigma2, noncentral_var_limit(&cfg.params, &c).unwrap());
    }

    #[test]
    fn second_kind_experiment_is_gaussian_below_the_boundary() {
        let p = Fou2Params::new(0.45, 0.4, 0.7, 1.2, 1.0, 1.0, 0.3, 0.15).unwrap();
        let mut cfg = base_cfg(p, ExperimentKind::SecondKind);
        cfg.seed = 50;
        let rep = clt_experiment(&cfg).unwrap();
        assert_eq!(rep.normalization, Normalization::SqrtN);
        // 1% critical value of the KS statistic at M = 300.
        assert!(rep.ks_stat < 0.094, "KS = {}", rep.ks_stat);
        assert!((rep.var_slope + 1.0).abs() <= 0.15, "slope = {}", rep.var_slope);
        assert!(rep.estimates[0].eta.is_some());
        assert!(rep.estimates[0].delta.is_some());
    }

    #[test]
    fn normalization_tag_tracks_the_hurst_sum() {
        assert_eq!(Normalization::for_h(1.2), Normalization::SqrtN);
        assert_eq!(Normalization::for_h(1.5 - 1e-10), Normalization::SqrtNOverLogN);
        assert_eq!(Normalization::for_h(1.5 + 1e-10), Normalization::SqrtNOverLogN);
        assert_eq!(Normalization::for_h(1.7), Normalization::NPow2MinusH);
        assert_eq!(Normalization::SqrtN.rate(100, 1.2), 10.0);
        assert_relative_eq!(
            Normalization::SqrtNOverLogN.rate(100, 1.5),
            (100.0f64 / 100.0f64.ln()).sqrt(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            Normalization::NPow2MinusH.rate(16, 1.75),
            2.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn experiment_report_round_trips_json_and_csv() {
        let mut cfg = base_cfg(p_a(), ExperimentKind::FirstKind);
        cfg.n_ladder = vec![200, 400];
        cfg.replications = 40;
        cfg.seed = 51;
        let rep = clt_experiment(&cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        for key in
            ["kind", "h", "normalization", "sigma2", "n_ladder", "var_ladder", "kappa4", "var_slope", "ks_stat", "estimates"]
        {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(v["kind"], "first_kind");
        assert_eq!(v["normalization"], "sqrt_n");
        assert_eq!(v["estimates"].as_array().unwrap().len(), 40);
        let e0 = &v["estimates"][0];
        for key in ["rho", "eta", "n", "normalization", "normalized_error", "replication"] {
            assert!(e0.get(key).is_some(), "missing estimate key {key}");
        }
        assert!(v.get("errors").is_none(), "raw errors belong to the CSV only");
        let mut csv = Vec::new();
        rep.write_errors_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,replication,normalized_error");
        assert_eq!(lines.len(), 1 + 2 * 40);
        assert!(lines[1].starts_with("200,0,"));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let pa = p_a();
        let c = first_kind_coeffs(&pa, 1).unwrap();
        // Lag and regime preconditions on the coefficients.
        assert!(first_kind_coeffs(&pa, 0).is_err());
        let p_log = Fou2Params::new(0.6, 0.4, 1.0, 2.0, 1.0, 1.0, 0.5, 0.3).unwrap();
        assert!(matches!(first_kind_coeffs(&p_log, 1), Err(Error::Unsupported(_))));
        // Path-shape preconditions.
        assert!(matches!(estimate_first_kind(&[1.0; 5], &[1.0; 4], &c), Err(Error::Dim(_))));
        assert!(matches!(estimate_first_kind(&[1.0; 2], &[1.0; 2], &c), Err(Error::Dim(_))));
        assert!(matches!(estimate_second_kind(&[1.0], &[1.0], 0.1, &pa), Err(Error::Dim(_))));
        assert!(estimate_second_kind(&[1.0; 3], &[1.0; 3], 0.0, &pa).is_err());
        assert!(second_kind_mean_rho(&pa, -0.5).is_err());
        // Regime splits of the variance formulas.
        assert!(matches!(asymp_var_first(&p_heavy(), &c, 100), Err(Error::Unsupported(_))));
        assert!(matches!(asymp_var_second(&p_heavy(), 100), Err(Error::Unsupported(_))));
        assert!(matches!(noncentral_var_limit(&pa, &c), Err(Error::Unsupported(_))));
        assert!(matches!(cumulant_limit(&pa, &c, 2, 10, 1), Err(Error::Unsupported(_))));
        let ph = p_heavy();
        let ch = first_kind_coeffs(&ph, 1).unwrap();
        assert!(cumulant_limit(&ph, &ch, 5, 10, 1).is_err());
        assert!(cumulant_limit(&ph, &ch, 2, 0, 1).is_err());
        assert!(asymp_var_first(&pa, &c, 0).is_err());
        // KS statistic preconditions.
        assert!(ks_statistic(&[], 1.0).is_err());
        assert!(ks_statistic(&[0.1], 0.0).is_err());
        // Experiment configuration checks.
        let mut cfg = base_cfg(p_a(), ExperimentKind::FirstKind);
        cfg.n_ladder.clear();
        assert!(clt_experiment(&cfg).is_err());
        let mut cfg = base_cfg(p_a(), ExperimentKind::FirstKind);
        cfg.n_ladder = vec![100, 100];
        assert!(clt_experiment(&cfg).is_err());
        let mut cfg = base_cfg(p_a(), ExperimentKind::FirstKind);
        cfg.replications = 2;
        assert!(clt_experiment(&cfg).is_err());
        let mut cfg = base_cfg(p_a(), ExperimentKind::SecondKind);
        cfg.gamma = 1.2;
        assert!(clt_experiment(&cfg).is_err());
        let p_hi = Fou2Params::new(0.8, 0.75, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = base_cfg(p_hi, ExperimentKind::SecondKind);
        assert!(matches!(clt_experiment(&cfg), Err(Error::Unsupported(_))));
    }
}
