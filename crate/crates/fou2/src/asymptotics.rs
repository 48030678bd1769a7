//! Short-maturity large-deviation asymptotics for fractional stochastic
//! volatility: the rate function of the rescaled log-price, its quartic
//! expansion at the money, and the induced smile and skew limits.
//!
//! The model is `dS_t = S_t σ(V_t) dW_t` with `V` a Volterra Gaussian
//! process `V_t = ∫₀ᵗ K_H(t,s) dB_s` of self-similarity index `H + 1/2`,
//! and `d⟨W,B⟩_t = ρ dt`. Over a short horizon the log-price, rescaled by
//! `t^{1/2-H}`, satisfies a large-deviation principle whose rate function
//! is a Cameron–Martin variational problem:
//!
//! ```text
//! J(x) = inf_f  ½‖ḟ‖²_{L²[0,1]}
//!        + ½ (x - ρ ∫₀¹ σ(f̂(t)) ḟ(t) dt)² / ((1-ρ²) ∫₀¹ σ(f̂(t))² dt),
//! f̂(t) = ∫₀ᵗ K_H(t,u) ḟ(u) du.
//! ```
//!
//! [`energy_J`] minimizes this energy by a Ritz method: `ḟ` is expanded in
//! the first `N` elements of the orthonormal Fourier basis of `L²[0,1]`
//! (constant, then paired cosines/sines), the kernel fold `f̂` is evaluated
//! by a graded product quadrature that exploits the self-similarity
//! `K_H(t, tv) = t^{H-1/2} K_H(1, v)`, and the resulting smooth
//! finite-dimensional problem is solved by multi-start Nelder–Mead with an
//! exact-gradient descent polish. Enlarging the basis can only lower the
//! reported value, so `J` is approached from above.
//!
//! At the money the rate function admits the quartic expansion
//! `J(x) = x²/(2σ(0)²) + J₃x³/6 + J₄x⁴/24 + O(x⁵)` whose coefficients are
//! explicit in four inner products of the kernel fold of the constant
//! function ([`kernel_inner_products`]); [`energy_expansion_coeffs`]
//! assembles them together with the equivalent smile coefficients. The
//! smile limit is `Σ(x) = |x|/√(2J(x))` ([`sigma_lim`]), the skew decays
//! like `t^{H-1/2}` ([`skew_asymptotic`]), and on moderate-deviation
//! scales the smile is the explicit quadratic polynomial of
//! [`moderate_smile`] — no optimization involved.

use std::collections::HashMap;
use std::fmt::Write as FmtWrite;
use std::io::Write as IoWrite;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{fbm_kernel, KernelSpec};
use crate::quad::gauss_legendre;
use crate::rng::path_rng;
use crate::{Error, Result};

/// Default number of Fourier basis elements for the Ritz minimization.
pub const DEFAULT_BASIS_N: usize = 5;

/// Default node budget of the outer time quadrature in [`energy_J`].
pub const DEFAULT_RITZ_GRID: usize = 256;

/// Affine volatility functions are floored at this fraction of `σ(0)` so
/// that the spot variance `∫σ²` in the energy denominator stays positive.
const AFFINE_FLOOR_FRAC: f64 = 1e-3;

/// Seed of the deterministic multi-start perturbations in [`energy_J`].
const MULTISTART_SEED: u64 = 0x5249_545A;

/// Nodes per quadrature panel (outer time rule).
const OUTER_PANEL_PTS: usize = 8;

/// Nodes per quadrature panel (inner kernel rule).
const INNER_PANEL_PTS: usize = 12;

// ---------------------------------------------------------------------
// Volatility model
// ---------------------------------------------------------------------

/// Shape of the volatility function `σ(·)` applied to the Volterra factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaFn {
    /// `σ(x) = σ₀ exp(η x / 2)` — log-normal volatility, always positive.
    Exponential,
    /// `σ(x) = max(σ₀ + η x, 10⁻³ σ₀)` — affine with a small positive floor.
    Affine,
}

/// A one-factor fractional volatility model: Volterra kernel, spot level
/// `σ₀`, vol-of-vol `η`, and leverage correlation `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolModel {
    /// Kernel of the driving Volterra factor. Only its index `H` enters
    /// the short-time energy; the family tag selects the sampling kernel
    /// in path-level Monte Carlo.
    pub kernel: KernelSpec,
    /// Spot volatility `σ(0) = σ₀ > 0`.
    pub sigma0: f64,
    /// Vol-of-vol slope `η ≥ 0` of the volatility function.
    pub eta_vol: f64,
    /// Correlation `ρ ∈ (-1, 1)` between price and factor drivers.
    pub rho: f64,
    /// Shape of `σ(·)`.
    pub sigma_fn: SigmaFn,
}

impl VolModel {
    /// Validating constructor.
    pub fn new(
        kernel: KernelSpec,
        sigma0: f64,
        eta_vol: f64,
        rho: f64,
        sigma_fn: SigmaFn,
    ) -> Result<Self> {
        let m = VolModel { kernel, sigma0, eta_vol, rho, sigma_fn };
        m.validate()?;
        Ok(m)
    }

    /// Checks kernel parameters, `σ₀ > 0`, `η ≥ 0`, `ρ ∈ (-1, 1)`.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return Err(Error::InvalidParams(format!(
                "sigma0 must be positive and finite, got {}",
                self.sigma0
            )));
        }
        if !(self.eta_vol >= 0.0) || !self.eta_vol.is_finite() {
            return Err(Error::InvalidParams(format!(
                "eta_vol must be nonnegative and finite, got {}",
                self.eta_vol
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidParams(format!(
                "rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Self-similarity index `H` of the kernel.
    pub fn h(&self) -> f64 {
        self.kernel.h()
    }

    /// The volatility function `σ(x)`.
    pub fn sigma(&self, x: f64) -> f64 {
        match self.sigma_fn {
            SigmaFn::Exponential => self.sigma0 * (0.5 * self.eta_vol * x).exp(),
            SigmaFn::Affine => {
                (self.sigma0 + self.eta_vol * x).max(AFFINE_FLOOR_FRAC * self.sigma0)
            }
        }
    }

    /// First derivative `σ'(0)`.
    pub fn dsigma0(&self) -> f64 {
        match self.sigma_fn {
            SigmaFn::Exponential => 0.5 * self.sigma0 * self.eta_vol,
            SigmaFn::Affine => self.eta_vol,
        }
    }

    /// Second derivative `σ''(0)`.
    pub fn d2sigma0(&self) -> f64 {
        match self.sigma_fn {
            SigmaFn::Exponential => 0.25 * self.sigma0 * self.eta_vol * self.eta_vol,
            SigmaFn::Affine => 0.0,
        }
    }

    /// `√(1-ρ²)`, the orthogonal part of the price driver.
    pub fn rho_bar(&self) -> f64 {
        (1.0 - self.rho * self.rho).sqrt()
    }

    /// Parses a model from `key = value` lines (`#` starts a comment).
    ///
    /// Keys: `h`, `sigma0`, `eta_vol`, `rho` (required); `sigma_fn` is
    /// `exponential` (default) or `affine`; `a` selects a reverting kernel
    /// with rate `a`; `p_log` and `c_log` together select the
    /// log-modulated kernel. `a` and `p_log`/`c_log` are exclusive.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut nums: HashMap<&str, f64> = HashMap::new();
        let mut sigma_fn = SigmaFn::Exponential;
        let mut saw_sigma_fn = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParams(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "sigma_fn" {
                if saw_sigma_fn {
                    return Err(Error::InvalidParams(format!(
                        "line {}: duplicate parameter `sigma_fn`",
                        lineno + 1
                    )));
                }
                saw_sigma_fn = true;
                sigma_fn = match value {
                    "exponential" => SigmaFn::Exponential,
                    "affine" => SigmaFn::Affine,
                    other => {
                        return Err(Error::InvalidParams(format!(
                            "line {}: sigma_fn must be `exponential` or `affine`, got `{other}`",
                            lineno + 1
                        )))
                    }
                };
                continue;
            }
            let slot = match key {
                "h" => "h",
                "a" => "a",
                "p_log" => "p_log",
                "c_log" => "c_log",
                "sigma0" => "sigma0",
                "eta_vol" => "eta_vol",
                "rho" => "rho",
                other => {
                    return Err(Error::InvalidParams(format!(
                        "line {}: unknown parameter `{other}`",
                        lineno + 1
                    )))
                }
            };
            let parsed: f64 = value.parse().map_err(|_| {
                Error::InvalidParams(format!("line {}: `{value}` is not a number", lineno + 1))
            })?;
            if nums.insert(slot, parsed).is_some() {
                return Err(Error::InvalidParams(format!(
                    "line {}: duplicate parameter `{slot}`",
                    lineno + 1
                )));
            }
        }
        let get = |k: &str| {
            nums.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidParams(format!("missing parameter `{k}`")))
        };
        let h = get("h")?;
        let kernel = match (nums.get("a"), nums.get("p_log"), nums.get("c_log")) {
            (Some(&a), None, None) => KernelSpec::Fou { h, a },
            (None, Some(&p), Some(&c)) => KernelSpec::LogFbm { h, p, c },
            (None, None, None) => KernelSpec::Fbm { h },
            (None, _, _) => {
                return Err(Error::InvalidParams(
                    "log-modulated kernel needs both `p_log` and `c_log`".into(),
                ))
            }
            (Some(_), _, _) => {
                return Err(Error::InvalidParams(
                    "`a` and `p_log`/`c_log` are mutually exclusive".into(),
                ))
            }
        };
        VolModel::new(kernel, get("sigma0")?, get("eta_vol")?, get("rho")?, sigma_fn)
    }

    /// Serializes back to the `key = value` format accepted by
    /// [`VolModel::from_key_values`].
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "h = {}", self.h()).expect("string write");
        match self.kernel {
            KernelSpec::Fbm { .. } => {}
            KernelSpec::Fou { a, .. } => writeln!(out, "a = {a}").expect("string write"),
            KernelSpec::LogFbm { p, c, .. } => {
                writeln!(out, "p_log = {p}").expect("string write");
                writeln!(out, "c_log = {c}").expect("string write");
            }
        }
        writeln!(out, "sigma0 = {}", self.sigma0).expect("string write");
        writeln!(out, "eta_vol = {}", self.eta_vol).expect("string write");
        writeln!(out, "rho = {}", self.rho).expect("string write");
        let tag = match self.sigma_fn {
            SigmaFn::Exponential => "exponential",
            SigmaFn::Affine => "affine",
        };
        writeln!(out, "sigma_fn = {tag}").expect("string write");
        out
    }
}

// ---------------------------------------------------------------------
// Quadrature workspace
// ---------------------------------------------------------------------

/// Panel boundaries grading geometrically from `edge·ratioᴸ` up to `edge`,
/// then uniform panels over the middle; mirrored into `1` when `both_ends`.
fn graded_breaks(levels: usize, ratio: f64, edge: f64, both_ends: bool) -> Vec<f64> {
    let mut breaks = Vec::with_capacity(2 * levels + 9);
    for k in (0..=levels).rev() {
        breaks.push(edge * ratio.powi(k as i32));
    }
    let right_edge = if both_ends { 1.0 - edge } else { 1.0 };
    let mid_panels = 7;
    for j in 1..=mid_panels {
        breaks.push(edge + (right_edge - edge) * j as f64 / mid_panels as f64);
    }
    if both_ends {
        for k in 1..=levels {
            breaks.push(1.0 - edge * ratio.powi(k as i32));
        }
    }
    breaks
}

/// Composite Gauss–Legendre rule over consecutive panels.
fn panel_rule(breaks: &[f64], pts: usize) -> (Vec<f64>, Vec<f64>) {
    let base = gauss_legendre(pts);
    let mut nodes = Vec::with_capacity((breaks.len() - 1) * pts);
    let mut weights = Vec::with_capacity((breaks.len() - 1) * pts);
    for w in breaks.windows(2) {
        let half = 0.5 * (w[1] - w[0]);
        let mid = 0.5 * (w[0] + w[1]);
        for (&x, &gw) in base.nodes.iter().zip(&base.weights) {
            nodes.push(mid + half * x);
            weights.push(half * gw);
        }
    }
    (nodes, weights)
}

/// Product rule for `∫₀¹ K_H(1,v) q(v) dv`: panel Gauss–Legendre nodes
/// graded into both endpoints with the kernel folded into the weights.
/// The uncovered stubs `[0, ~1e-13]` and `[~1-1e-13, 1]` contribute
/// `O(stub^{2H})` after the fold and are dropped.
struct FoldedKernelRule {
    /// Quadrature nodes `v_q ∈ (0,1)`, ascending, grouped by panel.
    nodes: Vec<f64>,
    /// Kernel-folded weights `ω_q = w_q K_H(1, v_q)`.
    omega: Vec<f64>,
    /// Panel boundaries (length `nodes.len()/pts + 1`).
    breaks: Vec<f64>,
}

/// Builds the folded kernel rule for index `h`.
fn folded_kernel_rule(h: f64) -> Result<FoldedKernelRule> {
    let breaks = graded_breaks(20, 0.25, 0.1, true);
    let (nodes, weights) = panel_rule(&breaks, INNER_PANEL_PTS);
    let mut omega = Vec::with_capacity(nodes.len());
    for (&v, &w) in nodes.iter().zip(&weights) {
        omega.push(w * fbm_kernel(h, 1.0, v)?);
    }
    Ok(FoldedKernelRule { nodes, omega, breaks })
}

/// Outer time rule on `[0,1]`: `grid_size/8` panels of 8 Gauss–Legendre
/// nodes, graded geometrically toward `t = 0` where the fold `t^{H+1/2}`
/// has unbounded derivatives.
fn outer_time_rule(grid_size: usize) -> (Vec<f64>, Vec<f64>) {
    let panels = grid_size / OUTER_PANEL_PTS;
    let mid = (panels / 2).min(8);
    let levels = panels - mid - 1;
    let edge = 0.5;
    let mut breaks = Vec::with_capacity(panels + 1);
    breaks.push(0.0);
    for k in (0..levels).rev() {
        breaks.push(edge * 0.5f64.powi(k as i32));
    }
    for j in 1..=mid {
        breaks.push(edge + (1.0 - edge) * j as f64 / mid as f64);
    }
    panel_rule(&breaks, OUTER_PANEL_PTS)
}

/// Precomputed discretization of the Ritz problem for one `(H, N, G)`:
/// outer nodes/weights, the kernel-fold matrix `M[i,k] ≈ (K ė_k)(t_i)`,
/// and the basis matrix `E[i,k] = ė_k(t_i)`.
struct RitzWorkspace {
    wt: Vec<f64>,
    fold: Array2<f64>,
    basis: Array2<f64>,
}

/// Orthonormal Fourier basis of `L²[0,1]` indexed from 1:
/// `ė₁ = 1`, `ė_{2n} = √2 cos(2πn·)`, `ė_{2n+1} = √2 sin(2πn·)`.
fn basis_fn(k: usize, s: f64) -> f64 {
    debug_assert!(k >= 1);
    if k == 1 {
        return 1.0;
    }
    let n = (k / 2) as f64;
    let arg = 2.0 * std::f64::consts::PI * n * s;
    if k % 2 == 0 {
        std::f64::consts::SQRT_2 * arg.cos()
    } else {
        std::f64::consts::SQRT_2 * arg.sin()
    }
}

fn workspace_cache() -> &'static Mutex<HashMap<(u64, usize, usize), Arc<RitzWorkspace>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, usize, usize), Arc<RitzWorkspace>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Builds (or fetches from the per-process cache) the Ritz workspace.
/// The kernel fold uses self-similarity: for each outer node,
/// `∫₀ᵗ K_H(t,u) ė_k(u) du = t^{H+1/2} Σ_q ω_q ė_k(t v_q)`, which is exact
/// in the scaling and leaves only smooth-factor quadrature error.
fn ritz_workspace(h: f64, n_basis: usize, grid_size: usize) -> Result<Arc<RitzWorkspace>> {
    let key = (h.to_bits(), n_basis, grid_size);
    if let Some(ws) = workspace_cache().lock().expect("workspace lock").get(&key) {
        return Ok(ws.clone());
    }
    let rule = folded_kernel_rule(h)?;
    let (t, wt) = outer_time_rule(grid_size);
    let g = t.len();
    let mut fold = Array2::zeros((g, n_basis));
    let mut basis = Array2::zeros((g, n_basis));
    for (i, &ti) in t.iter().enumerate() {
        let scale = ti.powf(h + 0.5);
        for k in 1..=n_basis {
            let mut acc = 0.0;
            for (&v, &om) in rule.nodes.iter().zip(&rule.omega) {
                acc += om * basis_fn(k, ti * v);
            }
            fold[[i, k - 1]] = scale * acc;
            basis[[i, k - 1]] = basis_fn(k, ti);
        }
    }
    let ws = Arc::new(RitzWorkspace { wt, fold, basis });
    workspace_cache()
        .lock()
        .expect("workspace lock")
        .insert(key, ws.clone());
    Ok(ws)
}

// ---------------------------------------------------------------------
// Energy functional and its minimization
// ---------------------------------------------------------------------

/// The discretized energy as a function of the Fourier coefficients of `ḟ`.
struct RitzObjective<'a> {
    ws: &'a RitzWorkspace,
    model: &'a VolModel,
    x: f64,
}

impl RitzObjective<'_> {
    /// `σ` and `σ'` at one point of the folded path.
    fn sigma_pair(&self, v: f64) -> (f64, f64) {
        let m = self.model;
        match m.sigma_fn {
            SigmaFn::Exponential => {
                let s = m.sigma0 * (0.5 * m.eta_vol * v).exp();
                (s, 0.5 * m.eta_vol * s)
            }
            SigmaFn::Affine => {
                let raw = m.sigma0 + m.eta_vol * v;
                let floor = AFFINE_FLOOR_FRAC * m.sigma0;
                if raw > floor {
                    (raw, m.eta_vol)
                } else {
                    (floor, 0.0)
                }
            }
        }
    }

    /// Energy value at coefficients `c`. Non-finite intermediate values
    /// (possible only for extreme coefficients) map to `+∞` so the
    /// optimizer backs away.
    fn value(&self, c: &[f64]) -> f64 {
        let cv = ArrayView1::from(c);
        let fhat = self.ws.fold.dot(&cv);
        let fdot = self.ws.basis.dot(&cv);
        let mut p = 0.0;
        let mut q = 0.0;
        for (i, &w) in self.ws.wt.iter().enumerate() {
            let (s, _) = self.sigma_pair(fhat[i]);
            p += w * s * fdot[i];
            q += w * s * s;
        }
        let m = self.model;
        let r = self.x - m.rho * p;
        let rb2 = 1.0 - m.rho * m.rho;
        let v = 0.5 * cv.dot(&cv) + 0.5 * r * r / (rb2 * q);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    /// Energy and its exact gradient in `c`.
    fn value_grad(&self, c: &[f64]) -> (f64, Vec<f64>) {
        let n = c.len();
        let cv = ArrayView1::from(c);
        let fhat = self.ws.fold.dot(&cv);
        let fdot = self.ws.basis.dot(&cv);
        let g = self.ws.wt.len();
        let mut p = 0.0;
        let mut q = 0.0;
        // Per-node multipliers of the chain rule:
        //   ∂P/∂c = Mᵀ (w σ' ḟ) + Eᵀ (w σ),  ∂Q/∂c = Mᵀ (2 w σ σ').
        let mut ap = Array1::zeros(g);
        let mut bp = Array1::zeros(g);
        let mut aq = Array1::zeros(g);
        for (i, &w) in self.ws.wt.iter().enumerate() {
            let (s, sp) = self.sigma_pair(fhat[i]);
            p += w * s * fdot[i];
            q += w * s * s;
            ap[i] = w * sp * fdot[i];
            bp[i] = w * s;
            aq[i] = 2.0 * w * s * sp;
        }
        let m = self.model;
        let r = self.x - m.rho * p;
        let rb2 = 1.0 - m.rho * m.rho;
        let value = 0.5 * cv.dot(&cv) + 0.5 * r * r / (rb2 * q);
        let gp = self.ws.fold.t().dot(&ap) + self.ws.basis.t().dot(&bp);
        let gq = self.ws.fold.t().dot(&aq);
        let mut grad = Vec::with_capacity(n);
        let s1 = -r * m.rho / (rb2 * q);
        let s2 = -0.5 * r * r / (rb2 * q * q);
        for k in 0..n {
            grad.push(c[k] + s1 * gp[k] + s2 * gq[k]);
        }
        (if value.is_finite() { value } else { f64::INFINITY }, grad)
    }
}

/// Plain Nelder–Mead on `f`, started from `x0` with initial simplex step
/// `step`. Stops when the simplex function spread falls below `ftol`
/// (relative to the best value) or after `max_iter` reflections.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    step: f64,
    ftol: f64,
    max_iter: usize,
) -> (f64, Vec<f64>) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        // Order the simplex by value.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).expect("finite ordering"));
        let best = idx[0];
        let worst = idx[n];
        let second_worst = idx[n - 1];
        if (fv[worst] - fv[best]).abs() <= ftol * (1.0 + fv[best].abs()) {
            break;
        }
        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for &i in idx.iter().take(n) {
            for k in 0..n {
                centroid[k] += simplex[i][k] / n as f64;
            }
        }
        let shift = |alpha: f64| -> Vec<f64> {
            (0..n)
                .map(|k| centroid[k] + alpha * (centroid[k] - simplex[worst][k]))
                .collect()
        };
        let reflected = shift(1.0);
        let fr = f(&reflected);
        if fr < fv[best] {
            let expanded = shift(2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                fv[worst] = fe;
            } else {
                simplex[worst] = reflected;
                fv[worst] = fr;
            }
        } else if fr < fv[second_worst] {
            simplex[worst] = reflected;
            fv[worst] = fr;
        } else {
            let contracted = if fr < fv[worst] { shift(0.5) } else { shift(-0.5) };
            let fc = f(&contracted);
            if fc < fv[worst].min(fr) {
                simplex[worst] = contracted;
                fv[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let anchor = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for k in 0..n {
                        simplex[i][k] = anchor[k] + 0.5 * (simplex[i][k] - anchor[k]);
                    }
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=n {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    (fv[best], simplex[best].clone())
}

/// Gradient-descent polish with Armijo backtracking. Returns the refined
/// value and whether the gradient norm criterion was met.
fn gradient_polish(
    obj: &RitzObjective<'_>,
    c: &mut Vec<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> (f64, bool) {
    let (mut value, mut grad) = obj.value_grad(c);
    for _ in 0..max_iter {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() <= grad_tol * (1.0 + value.abs()) {
            return (value, true);
        }
        let mut step = 1.0;
        let mut advanced = false;
        while step > 1e-18 {
            let trial: Vec<f64> = c
                .iter()
                .zip(&grad)
                .map(|(&ck, &gk)| ck - step * gk)
                .collect();
            let ft = obj.value(&trial);
            if ft <= value - 1e-4 * step * gnorm2 {
                *c = trial;
                let (v, g) = obj.value_grad(c);
                value = v;
                grad = g;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            // Line search stalled at numerical resolution.
            let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
            return (value, gnorm2.sqrt() <= grad_tol * (1.0 + value.abs()));
        }
    }
    let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
    (value, gnorm2.sqrt() <= grad_tol * (1.0 + value.abs()))
}

/// Ritz minimization core: multi-start Nelder–Mead plus gradient polish.
/// Returns `(J, coefficients, converged)`; errors only if every start
/// produced a non-finite value.
fn energy_min(
    x: f64,
    model: &VolModel,
    n_basis: usize,
    grid_size: usize,
) -> Result<(f64, Vec<f64>, bool)> {
    model.validate()?;
    if n_basis == 0 || n_basis > 64 {
        return Err(Error::InvalidParams(format!(
            "n_basis must lie in 1..=64, got {n_basis}"
        )));
    }
    if grid_size < 64 {
        return Err(Error::InvalidParams(format!(
            "grid_size must be at least 64, got {grid_size}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidParams(format!("x must be finite, got {x}")));
    }
    if x == 0.0 {
        // The zero path is optimal: both quadratic penalties vanish.
        return Ok((0.0, vec![0.0; n_basis], true));
    }
    let ws = ritz_workspace(model.h(), n_basis, grid_size)?;
    let obj = RitzObjective { ws: &ws, model, x };

    // Deterministic multi-start: the origin plus four Gaussian
    // perturbations scaled to the size of the expected minimizer.
    let scale = 0.25 * x.abs() / model.sigma0 + 0.05;
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n_basis]];
    for j in 1..=4u64 {
        let mut rng = path_rng(MULTISTART_SEED, j);
        starts.push(
            (0..n_basis)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        );
    }

    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for start in &starts {
        let (_, coarse) = nelder_mead(
            &|c: &[f64]| obj.value(c),
            start,
            0.1 * scale + 0.01,
            1e-13,
            4000 * n_basis,
        );
        let mut c = coarse;
        let (value, converged) = gradient_polish(&obj, &mut c, 1e-9, 400);
        if !value.is_finite() {
            continue;
        }
        match &best {
            Some((v, _, _)) if *v <= value => {}
            _ => best = Some((value, c, converged)),
        }
    }
    best.ok_or_else(|| {
        Error::Optimizer(format!(
            "all {} starts produced non-finite energy at x = {x}",
            starts.len()
        ))
    })
}

/// Minimizes the short-time energy functional at log-moneyness scale `x`.
///
/// Returns the rate-function value `J(x)` together with the optimal
/// Fourier coefficients of `ḟ`. The minimization uses `n_basis` basis
/// elements and an outer time quadrature of `grid_size` nodes (graded
/// toward `t = 0`); the workspace for each `(H, n_basis, grid_size)` is
/// built once per process and cached. Enlarging `n_basis` can only lower
/// the result (the bases are nested), so values converge to `J` from
/// above. Errors with [`Error::Optimizer`] only if every start of the
/// multi-start search failed.
#[allow(non_snake_case)]
pub fn energy_J(
    x: f64,
    model: &VolModel,
    n_basis: usize,
    grid_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let (j, coeffs, _) = energy_min(x, model, n_basis, grid_size)?;
    Ok((j, coeffs))
}

/// Signature of a rate-function evaluator, as returned by [`rate_builder`].
pub type RateFn = fn(f64, &VolModel, usize, usize) -> Result<(f64, Vec<f64>)>;

/// Returns the rate-function evaluator for a kernel family.
///
/// All three families share one evaluator — the short-time limit energy
/// depends on the kernel only through its index `H` and the `t^{H+1/2}`
/// fold scaling, and reversion or log-modulation enters the asymptotics
/// only through the speed normalization, not the variational problem. The
/// returned function pointer is therefore identical across families,
/// which callers may check with `==`.
pub fn rate_builder(kernel: &KernelSpec) -> RateFn {
    match kernel {
        KernelSpec::Fbm { .. } => energy_J,
        KernelSpec::Fou { .. } => energy_J,
        KernelSpec::LogFbm { .. } => energy_J,
    }
}

// ---------------------------------------------------------------------
// Rate profiles
// ---------------------------------------------------------------------

/// One evaluated point of a rate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Log-moneyness scale `x`.
    pub x: f64,
    /// Rate-function value `J(x)`.
    pub j: f64,
    /// Optimal Fourier coefficients of `ḟ` at this `x`.
    pub coeffs: Vec<f64>,
    /// Whether the gradient polish met its tolerance at the best start.
    pub converged: bool,
}

/// The rate function evaluated over a grid of `x` values, with enough
/// metadata to reuse it across smile and skew evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    /// Kernel index `H` of the model the profile was built for.
    pub h: f64,
    /// Spot volatility `σ(0)` of that model.
    pub sigma0: f64,
    /// Basis size used by the Ritz minimization.
    pub n_basis: usize,
    /// Outer quadrature node budget.
    pub grid_size: usize,
    /// Evaluated points, in strictly increasing `x`.
    pub points: Vec<RatePoint>,
}

impl RateProfile {
    /// `J(x)` by exact match or linear interpolation between neighboring
    /// grid points. Errors outside the covered range.
    pub fn j_at(&self, x: f64) -> Result<f64> {
        let first = self.points.first().ok_or_else(|| {
            Error::InvalidParams("rate profile has no points".into())
        })?;
        let last = self.points.last().expect("nonempty");
        if x < first.x || x > last.x {
            return Err(Error::InvalidParams(format!(
                "x = {x} outside profile range [{}, {}]",
                first.x, last.x
            )));
        }
        let pos = self
            .points
            .partition_point(|p| p.x < x);
        if pos < self.points.len() && (self.points[pos].x - x).abs() <= 1e-12 * (1.0 + x.abs()) {
            return Ok(self.points[pos].j);
        }
        if pos > 0 && (self.points[pos - 1].x - x).abs() <= 1e-12 * (1.0 + x.abs()) {
            return Ok(self.points[pos - 1].j);
        }
        let (lo, hi) = (&self.points[pos - 1], &self.points[pos]);
        let w = (x - lo.x) / (hi.x - lo.x);
        Ok(lo.j + w * (hi.j - lo.j))
    }

    /// The smile limit `Σ(x) = |x| / √(2 J(x))`, with the at-the-money
    /// continuation `Σ(0) = σ(0)`.
    pub fn sigma_at(&self, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Ok(self.sigma0);
        }
        let j = self.j_at(x)?;
        if !(j > 0.0) {
            return Err(Error::Optimizer(format!(
                "rate function vanishes at x = {x}; smile limit undefined"
            )));
        }
        Ok(x.abs() / (2.0 * j).sqrt())
    }

    /// Writes `x,J,Sigma` rows in full float precision.
    pub fn write_csv<W: IoWrite>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,J,Sigma")?;
        for p in &self.points {
            let sigma = self.sigma_at(p.x)?;
            writeln!(out, "{:.16e},{:.16e},{:.16e}", p.x, p.j, sigma)?;
        }
        Ok(())
    }

    /// Pretty-printed JSON of the whole profile.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidParams(format!("profile serialization: {e}")))
    }

    /// Parses a profile previously serialized by [`RateProfile::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidParams(format!("profile deserialization: {e}")))
    }
}

/// Evaluates the rate function over a strictly increasing grid of `x`
/// values (in parallel) and validates the shape of the result: `J ≥ 0`
/// everywhere, `J(0) ≤ 10⁻¹⁰` when the grid contains zero, and moderate
/// monotonicity on each side of the money (tolerance `10⁻⁶`, the Ritz
/// optimization error floor). Shape violations indicate optimizer
/// failures and surface as [`Error::Optimizer`].
pub fn rate_profile(
    model: &VolModel,
    xs: &[f64],
    n_basis: usize,
    grid_size: usize,
) -> Result<RateProfile> {
    model.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidParams("empty x grid".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("non-finite x in grid".into()));
    }
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams(
            "x grid must be strictly increasing".into(),
        ));
    }
    // Materialize the shared workspace before fanning out.
    ritz_workspace(model.h(), n_basis, grid_size)?;
    let points: Vec<RatePoint> = xs
        .par_iter()
        .map(|&x| {
            energy_min(x, model, n_basis, grid_size).map(|(j, coeffs, converged)| RatePoint {
                x,
                j,
                coeffs,
                converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for p in &points {
        if p.x == 0.0 && p.j > 1e-10 {
            return Err(Error::Optimizer(format!(
                "J(0) = {} exceeds the zero tolerance",
                p.j
            )));
        }
    }
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let violates = if a.x >= 0.0 {
            b.j < a.j - 1e-6
        } else if b.x <= 0.0 {
            b.j > a.j + 1e-6
        } else {
            false
        };
        if violates {
            return Err(Error::Optimizer(format!(
                "rate profile not monotone between x = {} (J = {}) and x = {} (J = {})",
                a.x, a.j, b.x, b.j
            )));
        }
    }
    Ok(RateProfile {
        h: model.h(),
        sigma0: model.sigma0,
        n_basis,
        grid_size,
        points,
    })
}

// ---------------------------------------------------------------------
// Kernel inner products and the quartic energy expansion
// ---------------------------------------------------------------------

/// The four inner products of the kernel fold of the constant function
/// that drive the quartic expansion of the energy. With
/// `(K1)(t) = ∫₀ᵗ K_H(t,s) ds` and `(K̄1)(u) = ∫ᵤ¹ K_H(t,u) dt`:
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelInnerProducts {
    /// `⟨K1, 1⟩ = ∫₀¹ (K1)(t) dt`.
    pub k1_one: f64,
    /// `⟨(K1)², 1⟩`.
    pub k1_sq_one: f64,
    /// `⟨(K̄1)², 1⟩`.
    pub k1bar_sq_one: f64,
    /// `⟨K1, K̄1⟩`.
    pub k1_k1bar: f64,
}

/// `∫ₐᵇ K_H(1,v) v^{H+1/2} dv` by a single Gauss–Legendre panel (used for
/// partial panels away from the endpoints, where the integrand is smooth).
fn k1_moment_panel(h: f64, a: f64, b: f64) -> Result<f64> {
    let base = gauss_legendre(INNER_PANEL_PTS);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (&x, &w) in base.nodes.iter().zip(&base.weights) {
        let v: f64 = mid + half * x;
        acc += half * w * fbm_kernel(h, 1.0, v)? * v.powf(h + 0.5);
    }
    Ok(acc)
}

/// Computes the four kernel inner products for index `h ∈ (0,1)`.
///
/// Self-similarity reduces everything to moments of `K_H(1,·)`: with
/// `A₁ = ∫₀¹K_H(1,v)dv` and `A₁' = ∫₀¹K_H(1,v)v^{H+1/2}dv`,
///
/// ```text
/// ⟨K1,1⟩ = A₁/(H+3/2),          ⟨(K1)²,1⟩ = A₁²/(2H+2),
/// ⟨K1,K̄1⟩ = A₁A₁'/(2H+2),
/// ⟨(K̄1)²,1⟩ = (1/(H+1)) ∫₀¹ K_H(1,w) w^{-H-3/2} G(w) dw,
///              G(w) = ∫₀ʷ K_H(1,v) v^{H+1/2} dv.
/// ```
///
/// The last one is evaluated by nested quadrature over the same graded
/// panels and doubles as an accuracy check: it equals the double integral
/// of the fractional Brownian covariance, `1/(2H+2)` exactly.
pub fn kernel_inner_products(h: f64) -> Result<KernelInnerProducts> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidParams(format!(
            "kernel index must lie in (0,1), got {h}"
        )));
    }
    let rule = folded_kernel_rule(h)?;
    let a1: f64 = rule.omega.iter().sum();
    let a1m: f64 = rule
        .nodes
        .iter()
        .zip(&rule.omega)
        .map(|(&v, &om)| om * v.powf(h + 0.5))
        .sum();

    // G at the panel boundaries, cumulatively (free: reuse the rule), then
    // the in-panel remainder by a fresh single-panel moment.
    let pts = INNER_PANEL_PTS;
    let n_panels = rule.breaks.len() - 1;
    let mut cum = vec![0.0; n_panels + 1];
    for p in 0..n_panels {
        let mut s = 0.0;
        for q in p * pts..(p + 1) * pts {
            s += rule.omega[q] * rule.nodes[q].powf(h + 0.5);
        }
        cum[p + 1] = cum[p] + s;
    }
    let mut d = 0.0;
    for (q, (&w, &om)) in rule.nodes.iter().zip(&rule.omega).enumerate() {
        let panel = q / pts;
        let g = cum[panel] + k1_moment_panel(h, rule.breaks[panel], w)?;
        d += om * w.powf(-h - 1.5) * g;
    }
    d /= h + 1.0;

    Ok(KernelInnerProducts {
        k1_one: a1 / (h + 1.5),
        k1_sq_one: a1 * a1 / (2.0 * h + 2.0),
        k1bar_sq_one: d,
        k1_k1bar: a1 * a1m / (2.0 * h + 2.0),
    })
}

/// Taylor data of the energy and of the induced smile at the money.
///
/// `J(x) = j2·x²/2 + j3·x³/6 + j4·x⁴/24 + O(x⁵)` and, on moderate scales,
/// `Σ(x) = sigma0 + sigma1·x + sigma2·x² + ...` — note `sigma2` is the
/// *coefficient* of `x²`, i.e. half the second derivative of `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionCoeffs {
    /// `J''(0) = 1/σ(0)²`.
    pub j2: f64,
    /// `J'''(0)`.
    pub j3: f64,
    /// `J⁗(0)`.
    pub j4: f64,
    /// `Σ(0) = σ(0)`.
    pub sigma0: f64,
    /// `Σ'(0)`.
    pub sigma1: f64,
    /// `Σ''(0)/2`.
    pub sigma2: f64,
}

/// Assembles the quartic energy expansion and the smile coefficients from
/// the kernel inner products and the derivatives of `σ` at zero.
///
/// The coefficients depend on the kernel family only through its index
/// `H`, matching [`rate_builder`]. They satisfy the exact relations
/// `sigma1 = -j3·σ(0)³/6` and `sigma2 = (j3²σ(0)⁵ - j4·σ(0)³)/24`.
pub fn energy_expansion_coeffs(model: &VolModel) -> Result<ExpansionCoeffs> {
    model.validate()?;
    let ip = kernel_inner_products(model.h())?;
    let (a, b, d, c) = (ip.k1_one, ip.k1_sq_one, ip.k1bar_sq_one, ip.k1_k1bar);
    let s0 = model.sigma0;
    let s1 = model.dsigma0();
    let s2 = model.d2sigma0();
    let rho = model.rho;
    let r2 = rho * rho;
    let j2 = 1.0 / (s0 * s0);
    let j3 = -6.0 * rho * s1 * a / s0.powi(4);
    let j4 = 12.0 * s1 * s1 / s0.powi(6) * (9.0 * r2 * a * a - r2 * b - d - 2.0 * r2 * c)
        - 12.0 * s2 / s0.powi(5) * r2 * b;
    let sigma1 = rho * s1 * a / s0;
    let sigma2 = s1 * s1 / s0.powi(3)
        * (-3.0 * r2 * a * a + 0.5 * r2 * b + 0.5 * d + r2 * c)
        + s2 / (s0 * s0) * 0.5 * r2 * b;
    Ok(ExpansionCoeffs {
        j2,
        j3,
        j4,
        sigma0: s0,
        sigma1,
        sigma2,
    })
}

// ---------------------------------------------------------------------
// Smile, skew, and moderate deviations
// ---------------------------------------------------------------------

/// The short-maturity smile limit `Σ(x) = |x|/√(2J(x))` at `x ≠ 0`, read
/// from a precomputed [`RateProfile`].
pub fn sigma_lim(x: f64, profile: &RateProfile) -> Result<f64> {
    if x == 0.0 {
        return Err(Error::InvalidParams(
            "sigma_lim needs x != 0; at the money the limit is σ(0)".into(),
        ));
    }
    profile.sigma_at(x)
}

/// Short-maturity skew approximation at maturity `t`:
/// `[(Σ(x) - Σ(-x)) / (2x)] · t^{H-1/2}` with `H` taken from the profile.
/// Requires `x > 0` and `t > 0`, and a profile covering `±x`.
pub fn skew_asymptotic(x: f64, t: f64, profile: &RateProfile) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidParams(format!(
            "skew_asymptotic needs x > 0, got {x}"
        )));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParams(format!(
            "skew_asymptotic needs t > 0, got {t}"
        )));
    }
    let up = profile.sigma_at(x)?;
    let down = profile.sigma_at(-x)?;
    Ok((up - down) / (2.0 * x) * t.powf(profile.h - 0.5))
}

/// The `β` window `(2H/5, H/2]` on which the quadratic moderate-deviation
/// smile expansion is valid to its stated order.
pub fn moderate_window(h: f64) -> (f64, f64) {
    (0.4 * h, 0.5 * h)
}

/// Moderate-deviation smile: implied volatility at log-moneyness
/// `x·t^{1/2-H+β}`, expanded to second order,
/// `Σ(0) + Σ'(0)·x·t^β + (Σ''(0)/2)·x²·t^{2β}`.
///
/// `β` outside the window of [`moderate_window`] degrades the error
/// guarantee but not the formula, so it only triggers a warning on
/// standard error rather than a failure.
pub fn moderate_smile(x: f64, t: f64, beta: f64, model: &VolModel) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParams(format!(
            "moderate_smile needs finite t > 0, got {t}"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParams(format!(
            "moderate_smile needs finite beta > 0, got {beta}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidParams(format!("x must be finite, got {x}")));
    }
    let (lo, hi) = moderate_window(model.h());
    if !(beta > lo && beta <= hi) {
        eprintln!(
            "warning: beta = {beta} outside the moderate-deviation window ({lo}, {hi}] for H = {}",
            model.h()
        );
    }
    let coeffs = energy_expansion_coeffs(model)?;
    let tb = t.powf(beta);
    Ok(coeffs.sigma0 + coeffs.sigma1 * x * tb + coeffs.sigma2 * x * x * tb * tb)
}
