//! Volterra kernels (fBm, fOU, log-modulated fBm), the covariance matrices
//! they induce for the joint vector (V_{t₁..t_N}, B_{t₁..t_N}), and exact
//! Gaussian path sampling via Cholesky factorization.
//!
//! Covariance entries are integrals of kernel products with algebraic
//! endpoint singularities (at u → 0 and u → tⱼ). They are evaluated on a
//! composite quadrature grid shared by all entries: per inter-grid panel,
//! a plain Gauss rule away from the endpoints plus dyadically refined
//! levels and a power-graded stub toward each singular endpoint. The grid
//! is built once per (kernel, time grid) and every covariance entry is a
//! weighted dot product over it.

use crate::linalg::{cholesky_with_jitter, lower_tri_matmul};
use crate::quad::{gauss_legendre, integrate};
use crate::rng::normal_columns;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

/// Volterra kernel family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Fractional Brownian motion kernel K_H(t,s).
    Fbm { h: f64 },
    /// Fractional Ornstein–Uhlenbeck kernel: K_H minus the mean-reversion
    /// convolution term, rate a > 0.
    Fou { h: f64, a: f64 },
    /// Log-modulated kernel C·(t−s)^{H−1/2}(−log(t−s))^{−p} on t−s < 1.
    LogFbm { h: f64, p: f64, c: f64 },
}

impl KernelSpec {
    pub fn h(&self) -> f64 {
        match *self {
            KernelSpec::Fbm { h } => h,
            KernelSpec::Fou { h, .. } => h,
            KernelSpec::LogFbm { h, .. } => h,
        }
    }

    /// Enforce the family's parameter ranges.
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Fbm { h } => {
                if !(h > 0.0 && h < 1.0) {
                    return Err(Error::InvalidParams(format!("fBm Hurst {h} not in (0,1)")));
                }
            }
            KernelSpec::Fou { h, a } => {
                if !(h > 0.0 && h < 1.0) {
                    return Err(Error::InvalidParams(format!("fOU Hurst {h} not in (0,1)")));
                }
                if !(a > 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "fOU mean reversion {a} must be > 0"
                    )));
                }
            }
            KernelSpec::LogFbm { h, p, c } => {
                if !(h > 0.0 && h <= 0.5) {
                    return Err(Error::InvalidParams(format!(
                        "log-modulated Hurst {h} not in (0, 1/2]"
                    )));
                }
                if !(p > 1.0) {
                    return Err(Error::InvalidParams(format!(
                        "log exponent p = {p} must be > 1"
                    )));
                }
                if !(c > 0.0) {
                    return Err(Error::InvalidParams(format!("scale C = {c} must be > 0")));
                }
            }
        }
        Ok(())
    }

    /// Kernel value K(t,s) for 0 < s < t.
    pub fn evaluate(&self, t: f64, s: f64) -> Result<f64> {
        match *self {
            KernelSpec::Fbm { h } => fbm_kernel(h, t, s),
            KernelSpec::Fou { h, a } => fou_kernel(h, a, t, s),
            KernelSpec::LogFbm { h, p, c } => logfbm_kernel(h, p, c, t, s),
        }
    }
}

/// Normalization constant c_H = (2H·Γ(3/2−H)/(Γ(H+1/2)Γ(2−2H)))^{1/2}.
pub fn fbm_kernel_const(h: f64) -> f64 {
    (2.0 * h * gamma(1.5 - h) / (gamma(h + 0.5) * gamma(2.0 - 2.0 * h))).sqrt()
}

/// Closed-form fBm covariance ½(|t|^{2H} + |s|^{2H} − |t−s|^{2H}).
pub fn fbm_cov(h: f64, t: f64, s: f64) -> f64 {
    0.5 * (t.abs().powf(2.0 * h) + s.abs().powf(2.0 * h) - (t - s).abs().powf(2.0 * h))
}

fn check_times(t: f64, s: f64) -> Result<()> {
    if !(s > 0.0) {
        return Err(Error::InvalidParams(format!("kernel time s = {s} must be > 0")));
    }
    if !(s < t) {
        return Err(Error::InvalidParams(format!("kernel times need s < t, got s={s}, t={t}")));
    }
    Ok(())
}

/// fBm Volterra kernel
/// K_H(t,s) = c_H[(t/s)^{H−1/2}(t−s)^{H−1/2}
///            − (H−1/2)s^{1/2−H}∫_s^t u^{H−3/2}(u−s)^{H−1/2}du].
/// The inner integral is evaluated adaptively after the log substitution
/// u = s·e^x, which turns the t/s ≫ 1 boundary layer into a single-scale
/// integrand with only an algebraic singularity at x = 0:
///   ∫_s^t u^{H−3/2}(u−s)^{H−1/2} du
///     = s^{2H−1} ∫_0^{ln(t/s)} e^{(H−1/2)x}(e^x−1)^{H−1/2} dx.
pub fn fbm_kernel(h: f64, t: f64, s: f64) -> Result<f64> {
    check_times(t, s)?;
    if (h - 0.5).abs() < 1e-15 {
        return Ok(1.0); // c_{1/2} = 1 and the bracket collapses to 1
    }
    let ch = fbm_kernel_const(h);
    let direct = (t / s).powf(h - 0.5) * (t - s).powf(h - 0.5);
    let l = (t / s).ln();
    let inner = integrate(
        |x| ((h - 0.5) * x).exp() * x.exp_m1().powf(h - 0.5),
        0.0,
        l,
        f64::MIN_POSITIVE,
        1e-10,
        600,
    )?
    .value;
    // s^{1/2−H}·s^{2H−1} = s^{H−1/2}, combined to dodge over/underflow
    Ok(ch * (direct - (h - 0.5) * s.powf(h - 0.5) * inner))
}

/// fOU Volterra kernel K(t,s) = K_H(t,s) − a∫_s^t e^{−a(t−u)}K_H(u,s)du.
/// a = 0 degenerates to the fBm kernel.
pub fn fou_kernel(h: f64, a: f64, t: f64, s: f64) -> Result<f64> {
    check_times(t, s)?;
    if a < 0.0 {
        return Err(Error::InvalidParams(format!("mean reversion a = {a} must be ≥ 0")));
    }
    let base = fbm_kernel(h, t, s)?;
    if a == 0.0 {
        return Ok(base);
    }
    // substitution u = s + (t−s)v^{1/(H+1/2)} regularizes K_H(u,s) ~ (u−s)^{H−1/2}
    let gam = 1.0 / (h + 0.5);
    let dt = t - s;
    let inner_err: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let conv = integrate(
        |v| {
            let u = (s + dt * v.powf(gam)).min(t * (1.0 - 1e-16));
            if u <= s {
                return 0.0; // sub-ulp offset rounded onto s; integrand is O(1) · dv there
            }
            match fbm_kernel(h, u, s) {
                Ok(k) => (-a * (t - u)).exp() * k * dt * gam * v.powf(gam - 1.0),
                Err(e) => {
                    *inner_err.borrow_mut() = Some(e);
                    0.0
                }
            }
        },
        0.0,
        1.0,
        f64::MIN_POSITIVE,
        1e-8,
        400,
    )?;
    if let Some(e) = inner_err.into_inner() {
        return Err(e);
    }
    Ok(base - a * conv.value)
}

/// Log-modulated kernel C(t−s)^{H−1/2}(−log(t−s))^{−p}, valid for t−s < 1.
pub fn logfbm_kernel(h: f64, p: f64, c: f64, t: f64, s: f64) -> Result<f64> {
    check_times(t, s)?;
    if t - s >= 1.0 {
        return Err(Error::InvalidParams(format!(
            "log-modulated kernel needs t−s < 1, got {}",
            t - s
        )));
    }
    let d = t - s;
    Ok(c * d.powf(h - 0.5) * (-d.ln()).powf(-p))
}

// ---------------------------------------------------------------------------
// Composite quadrature grid for covariance assembly
// ---------------------------------------------------------------------------

/// Geometric refinement toward singular endpoints: LEVELS panels shrinking
/// by RATIO, then a power-graded stub matched to the leading exponent.
const REFINE_LEVELS: usize = 8;
const REFINE_RATIO: f64 = 4.0;
const GL_SMOOTH: usize = 16;
const GL_LEVEL: usize = 12;
const GL_STUB: usize = 12;

/// Quadrature nodes/weights on (0, t_N) such that for every grid index j,
/// ∫₀^{t_j} f(u) du ≈ Σ_{q < prefix[j]} w_q f(u_q), with refinement toward
/// u = 0 and toward every grid point (where kernel singularities sit).
struct UGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// prefix[j] = node count covering (0, grid[j]]
    prefix: Vec<usize>,
}

/// Append a plain Gauss–Legendre rule on [a, b].
fn push_gl(nodes: &mut Vec<f64>, weights: &mut Vec<f64>, rule: &crate::quad::GaussRule, a: f64, b: f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        nodes.push(mid + half * x);
        weights.push(half * w);
    }
}

/// Append a power-graded rule for ∫_{e−δ}^{e} f(u) du with u = e − δz^γ
/// (toward the right endpoint e) or ∫_e^{e+δ} with u = e + δz^γ (left).
fn push_graded(
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
    rule: &crate::quad::GaussRule,
    endpoint: f64,
    delta: f64,
    gam: f64,
    toward_right: bool,
) {
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let z = 0.5 * (x + 1.0); // map GL [−1,1] to (0,1)
        let wz = 0.5 * w;
        let jac = delta * gam * z.powf(gam - 1.0);
        let u = if toward_right {
            endpoint - delta * z.powf(gam)
        } else {
            endpoint + delta * z.powf(gam)
        };
        nodes.push(u);
        weights.push(wz * jac);
    }
}

/// Append a quadrature for ∫_a^b f(u)du where f carries a |u−e|^β factor at
/// one endpoint e (β > −1): geometric panels shrinking toward e by
/// REFINE_RATIO, plus a graded stub with exponent 1/(1+β) when β < 0.
fn push_refined(
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
    rule_level: &crate::quad::GaussRule,
    rule_stub: &crate::quad::GaussRule,
    a: f64,
    b: f64,
    beta: f64,
    toward_right: bool,
) {
    let w = b - a;
    let gam = if beta < 0.0 { 1.0 / (1.0 + beta) } else { 1.0 };
    let mut frac = 1.0;
    for _ in 0..REFINE_LEVELS {
        let next = frac / REFINE_RATIO;
        let (lo, hi) = if toward_right {
            (b - w * frac, b - w * next)
        } else {
            (a + w * next, a + w * frac)
        };
        push_gl(nodes, weights, rule_level, lo, hi);
        frac = next;
    }
    let endpoint = if toward_right { b } else { a };
    push_graded(nodes, weights, rule_stub, endpoint, w * frac, gam, toward_right);
}

impl UGrid {
    fn build(grid: &[f64], h: f64) -> UGrid {
        let rule_smooth = gauss_legendre(GL_SMOOTH);
        let rule_level = gauss_legendre(GL_LEVEL);
        let rule_stub = gauss_legendre(GL_STUB);
        // worst singular exponents among the assembled integrands: kernels
        // behave like u^{−|H−1/2|} as u→0 (both regimes), so products go
        // like u^{−|2H−1|}; at u→t the diagonal entries carry (t−u)^{2H−1}
        let beta_left = -(2.0 * h - 1.0).abs();
        let beta_right = 2.0 * h - 1.0;

        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut prefix = Vec::with_capacity(grid.len());
        let mut lo = 0.0;
        for (p, &hi) in grid.iter().enumerate() {
            let mid = 0.5 * (lo + hi);
            // left half of the panel
            if p == 0 {
                push_refined(
                    &mut nodes,
                    &mut weights,
                    &rule_level,
                    &rule_stub,
                    0.0,
                    mid,
                    beta_left,
                    false,
                );
            } else {
                push_gl(&mut nodes, &mut weights, &rule_smooth, lo, mid);
            }
            // right half: refine toward the grid point hi
            push_refined(
                &mut nodes,
                &mut weights,
                &rule_level,
                &rule_stub,
                mid,
                hi,
                beta_right,
                true,
            );
            prefix.push(nodes.len());
            lo = hi;
        }
        UGrid { nodes, weights, prefix }
    }
}

fn validate_grid(kernel: &KernelSpec, grid: &[f64]) -> Result<()> {
    kernel.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidParams("empty time grid".into()));
    }
    if !(grid[0] > 0.0) {
        return Err(Error::InvalidParams(
            "grid must start after t = 0 (V₀ = 0 is data, not a sample)".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams("grid must be strictly increasing".into()));
    }
    if let KernelSpec::LogFbm { .. } = kernel {
        let t_max = *grid.last().unwrap();
        if t_max > 1.0 {
            return Err(Error::InvalidParams(format!(
                "log-modulated kernel lives on t−s < 1; grid end {t_max} > 1"
            )));
        }
    }
    Ok(())
}

/// Kernel values K(t_i, u_q) for every grid time and quadrature node with
/// u_q < t_i (other entries stay zero and are never referenced).
fn kernel_matrix(kernel: &KernelSpec, grid: &[f64], ug: &UGrid) -> Result<Array2<f64>> {
    let n = grid.len();
    let q = ug.nodes.len();
    let mut km = Array2::<f64>::zeros((n, q));
    match *kernel {
        KernelSpec::Fbm { h } => {
            for i in 0..n {
                for qi in 0..ug.prefix[i] {
                    km[[i, qi]] = fbm_kernel(h, grid[i], ug.nodes[qi])?;
                }
            }
        }
        KernelSpec::LogFbm { h, p, c } => {
            for i in 0..n {
                for qi in 0..ug.prefix[i] {
                    km[[i, qi]] = logfbm_kernel(h, p, c, grid[i], ug.nodes[qi])?;
                }
            }
        }
        KernelSpec::Fou { h, a } => {
            // Column sweep: for fixed s = u_q, accumulate the convolution
            //   M_i = ∫_s^{t_i} e^{−a(t_i−u)} K_H(u,s) du
            // incrementally over grid panels, rescaling by e^{−aΔ} between
            // panels so nothing overflows. K(t_i,s) = K_H(t_i,s) − a·M_i.
            let gl = gauss_legendre(GL_SMOOTH);
            let rule_level = gauss_legendre(GL_LEVEL);
            let rule_stub = gauss_legendre(GL_STUB);
            for qi in 0..q {
                let s = ug.nodes[qi];
                // first grid index with t_i > s
                let i0 = ug.prefix.iter().position(|&pf| pf > qi).expect("node within grid span");
                let mut m = 0.0; // ∫ e^{−a(t_cur − u)} K_H(u,s) du up to t_cur
                let mut t_cur = s;
                for i in i0..n {
                    let t_next = grid[i];
                    m *= (-a * (t_next - t_cur)).exp();
                    let mut inc_nodes = Vec::new();
                    let mut inc_weights = Vec::new();
                    if i == i0 {
                        // K_H(u,s) ~ (u−s)^{H−1/2} at the left endpoint
                        push_refined(
                            &mut inc_nodes,
                            &mut inc_weights,
                            &rule_level,
                            &rule_stub,
                            s,
                            t_next,
                            h - 0.5,
                            false,
                        );
                    } else {
                        push_gl(&mut inc_nodes, &mut inc_weights, &gl, t_cur, t_next);
                    }
                    let mut add = 0.0;
                    for (&u, &w) in inc_nodes.iter().zip(&inc_weights) {
                        if u <= s {
                            continue; // sub-ulp node rounded onto s; weight is negligible
                        }
                        add += w * (-a * (t_next - u)).exp() * fbm_kernel(h, u, s)?;
                    }
                    m += add;
                    km[[i, qi]] = fbm_kernel(h, t_next, s)? - a * m;
                    t_cur = t_next;
                }
            }
        }
    }
    Ok(km)
}

/// Covariance of the joint Gaussian vector (V_{t₁..t_N}, B_{t₁..t_N}) for a
/// Volterra process V_t = ∫₀^t K(t,u) dB_u:
///   Cov(V_t,V_s) = ∫₀^{s∧t} K(t,u)K(s,u) du,
///   Cov(V_t,B_s) = ∫₀^{s∧t} K(t,u) du,
///   Cov(B_t,B_s) = s∧t.
/// Layout: indices 0..N are V, N..2N are B.
pub fn covariance_blocks(kernel: &KernelSpec, grid: &[f64]) -> Result<Array2<f64>> {
    validate_grid(kernel, grid)?;
    let n = grid.len();
    let ug = UGrid::build(grid, kernel.h());
    let km = kernel_matrix(kernel, grid, &ug)?;
    let mut cov = Array2::<f64>::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..=i {
            // V–V
            let mut vv = 0.0;
            for qi in 0..ug.prefix[j] {
                vv += ug.weights[qi] * km[[i, qi]] * km[[j, qi]];
            }
            cov[[i, j]] = vv;
            cov[[j, i]] = vv;
        }
        for j in 0..n {
            // V_i – B_j over (0, t_i ∧ t_j)
            let pf = ug.prefix[i.min(j)];
            let mut vb = 0.0;
            for qi in 0..pf {
                vb += ug.weights[qi] * km[[i, qi]];
            }
            cov[[i, n + j]] = vb;
            cov[[n + j, i]] = vb;
        }
    }
    for i in 0..n {
        for j in 0..n {
            cov[[n + i, n + j]] = grid[i.min(j)];
        }
    }
    Ok(cov)
}

// ---------------------------------------------------------------------------
// Path sampling
// ---------------------------------------------------------------------------

/// Exact joint samples of (V, B) on a grid, with per-path RNG streams.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub kernel: KernelSpec,
    pub grid: Vec<f64>,
    /// process values, (n_paths, n_grid)
    pub v: Array2<f64>,
    /// driving Brownian motion at grid times, (n_paths, n_grid)
    pub b: Array2<f64>,
    /// Brownian increments; db[.,0] = B_{t₁} − B_0 = B_{t₁}
    pub db: Array2<f64>,
    pub seed: u64,
}

const SAMPLE_CHUNK: usize = 512;

/// Draw `n_paths` exact joint samples from a (2N)×(2N) covariance produced
/// by [`covariance_blocks`]. Column j of the normal draw uses the
/// (seed, path j) stream, so results do not depend on chunking.
pub fn cholesky_sample(
    cov: &Array2<f64>,
    kernel: &KernelSpec,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    let n = grid.len();
    if cov.nrows() != 2 * n || cov.ncols() != 2 * n {
        return Err(Error::Dim(format!(
            "covariance {}x{} does not match grid of {n} points",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let (l, _jitter) = cholesky_with_jitter(cov)?;
    let mut v = Array2::<f64>::zeros((n_paths, n));
    let mut b = Array2::<f64>::zeros((n_paths, n));
    let mut start = 0;
    while start < n_paths {
        let m = SAMPLE_CHUNK.min(n_paths - start);
        let xi = normal_columns(seed, start as u64, 2 * n, m);
        let y = lower_tri_matmul(&l, &xi); // (2n, m)
        for j in 0..m {
            for i in 0..n {
                v[[start + j, i]] = y[[i, j]];
                b[[start + j, i]] = y[[n + i, j]];
            }
        }
        start += m;
    }
    let mut db = b.clone();
    for i in (1..n).rev() {
        let prev = db.column(i - 1).to_owned();
        let mut col = db.column_mut(i);
        col -= &prev;
    }
    Ok(PathBundle {
        kernel: kernel.clone(),
        grid: grid.to_vec(),
        v,
        b,
        db,
        seed,
    })
}

/// Convenience: covariance build + sampling in one call.
pub fn sample_paths(kernel: &KernelSpec, grid: &[f64], n_paths: usize, seed: u64) -> Result<PathBundle> {
    let cov = covariance_blocks(kernel, grid)?;
    cholesky_sample(&cov, kernel, grid, n_paths, seed)
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.v.nrows()
    }

    /// CSV export with columns path_id, t, V, B (17 significant digits).
    pub fn write_csv<W: IoWrite>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path_id,t,V,B")?;
        for p in 0..self.n_paths() {
            for (g, &t) in self.grid.iter().enumerate() {
                writeln!(
                    out,
                    "{},{:.16e},{:.16e},{:.16e}",
                    p,
                    t,
                    self.v[[p, g]],
                    self.b[[p, g]]
                )?;
            }
        }
        Ok(())
    }

    /// Cache key from (kernel, grid, n_paths, seed).
    fn cache_key(kernel: &KernelSpec, grid: &[f64], n_paths: usize, seed: u64) -> u64 {
        let mut hasher = DefaultHasher::new();
        serde_json::to_string(kernel).expect("kernel serializes").hash(&mut hasher);
        for &t in grid {
            t.to_bits().hash(&mut hasher);
        }
        n_paths.hash(&mut hasher);
        seed.hash(&mut hasher);
        hasher.finish()
    }

    fn cache_path(dir: &Path, key: u64) -> PathBuf {
        dir.join(format!("paths_{key:016x}.bin"))
    }

    /// Write the bundle to a binary cache file in `dir`; returns the path.
    pub fn write_cache(&self, dir: &Path) -> Result<PathBuf> {
        let key = Self::cache_key(&self.kernel, &self.grid, self.n_paths(), self.seed);
        let path = Self::cache_path(dir, key);
        let kernel_json = serde_json::to_string(&self.kernel)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        out.write_all(b"FOU2PB1\n")?;
        let (np, ng) = (self.n_paths() as u64, self.grid.len() as u64);
        out.write_all(&(kernel_json.len() as u64).to_le_bytes())?;
        out.write_all(kernel_json.as_bytes())?;
        out.write_all(&np.to_le_bytes())?;
        out.write_all(&ng.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        for &t in &self.grid {
            out.write_all(&t.to_le_bytes())?;
        }
        for arr in [&self.v, &self.b] {
            for &x in arr.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(path)
    }

    /// Load a bundle from the cache if an exact (kernel, grid, n_paths,
    /// seed) match exists; `None` on miss or any mismatch.
    pub fn load_cache(
        dir: &Path,
        kernel: &KernelSpec,
        grid: &[f64],
        n_paths: usize,
        seed: u64,
    ) -> Option<PathBundle> {
        let key = Self::cache_key(kernel, grid, n_paths, seed);
        let bytes = std::fs::read(Self::cache_path(dir, key)).ok()?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
            let out = bytes.get(*pos..*pos + n)?;
            *pos += n;
            Some(out)
        };
        if take(&mut pos, 8)? != b"FOU2PB1\n" {
            return None;
        }
        let u64_at = |pos: &mut usize| -> Option<u64> {
            Some(u64::from_le_bytes(take(pos, 8)?.try_into().ok()?))
        };
        let klen = u64_at(&mut pos)? as usize;
        let kjson = std::str::from_utf8(take(&mut pos, klen)?).ok()?;
        let cached_kernel: KernelSpec = serde_json::from_str(kjson).ok()?;
        if &cached_kernel != kernel {
            return None;
        }
        let np = u64_at(&mut pos)? as usize;
        let ng = u64_at(&mut pos)? as usize;
        let file_seed = u64_at(&mut pos)?;
        if np != n_paths || ng != grid.len() || file_seed != seed {
            return None;
        }
        let f64_at = |pos: &mut usize| -> Option<f64> {
            Some(f64::from_le_bytes(take(pos, 8)?.try_into().ok()?))
        };
        let mut cached_grid = Vec::with_capacity(ng);
        for _ in 0..ng {
            cached_grid.push(f64_at(&mut pos)?);
        }
        if cached_grid != grid {
            return None;
        }
        let read_mat = |pos: &mut usize| -> Option<Array2<f64>> {
            let mut m = Array2::<f64>::zeros((np, ng));
            for i in 0..np {
                for j in 0..ng {
                    m[[i, j]] = f64_at(pos)?;
                }
            }
            Some(m)
        };
        let v = read_mat(&mut pos)?;
        let b = read_mat(&mut pos)?;
        let mut db = b.clone();
        for i in (1..ng).rev() {
            let prev = db.column(i - 1).to_owned();
            let mut col = db.column_mut(i);
            col -= &prev;
        }
        Some(PathBundle {
            kernel: kernel.clone(),
            grid: grid.to_vec(),
            v,
            b,
            db,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::s;

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::Fbm { h: 0.3 }.validate().is_ok());
        assert!(KernelSpec::Fbm { h: 0.0 }.validate().is_err());
        assert!(KernelSpec::Fbm { h: 1.0 }.validate().is_err());
        assert!(KernelSpec::Fou { h: 0.3, a: 1.0 }.validate().is_ok());
        assert!(KernelSpec::Fou { h: 0.3, a: 0.0 }.validate().is_err());
        assert!(KernelSpec::LogFbm { h: 0.25, p: 2.0, c: 1.0 }.validate().is_ok());
        assert!(KernelSpec::LogFbm { h: 0.7, p: 2.0, c: 1.0 }.validate().is_err());
        assert!(KernelSpec::LogFbm { h: 0.25, p: 1.0, c: 1.0 }.validate().is_err());
    }

    #[test]
    fn brownian_kernel_is_one() {
        for (t, s) in [(1.0, 0.2), (0.5, 0.499), (3.0, 0.01)] {
            assert_eq!(fbm_kernel(0.5, t, s).unwrap(), 1.0);
        }
        assert!(fbm_kernel(0.3, 1.0, 0.0).is_err());
        assert!(fbm_kernel(0.3, 0.5, 0.6).is_err());
    }

    #[test]
    fn ugrid_weights_integrate_one_exactly() {
        let grid = [0.2, 0.5, 0.9, 1.4];
        let ug = UGrid::build(&grid, 0.3);
        for (j, &t) in grid.iter().enumerate() {
            let total: f64 = ug.weights[..ug.prefix[j]].iter().sum();
            // graded stubs integrate constants to ~1e−10 relative, not to
            // machine precision (fractional-power jacobian)
            assert_relative_eq!(total, t, max_relative = 1e-9);
        }
        // nodes strictly inside (0, t_N) and strictly increasing panels
        assert!(ug.nodes.iter().all(|&u| u > 0.0 && u < 1.4));
    }

    #[test]
    fn fbm_kernel_matches_high_precision_oracle() {
        // reference values computed with 30-digit arithmetic from the same
        // kernel formula (independent integrator)
        let cases = [
            (0.2, 0.8523350525217139),
            (0.5, 0.8730141143386681),
            (0.9, 1.1636694133450491),
            (0.99, 1.8353117680618571),
            (1e-4, 2.6498437966382425),
        ];
        for (s, expect) in cases {
            let k = fbm_kernel(0.3, 1.0, s).unwrap();
            assert_relative_eq!(k, expect, max_relative = 1e-9);
        }
    }

    #[test]
    fn fbm_variance_from_kernel_quadrature() {
        // ∫₀¹ K_H(1,u)² du = Var(B^H₁) = 1
        for h in [0.3, 0.7] {
            let kernel = KernelSpec::Fbm { h };
            let cov = covariance_blocks(&kernel, &[1.0]).unwrap();
            assert_relative_eq!(cov[[0, 0]], 1.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn fbm_cross_covariance_from_kernel_quadrature() {
        // ∫₀^{0.5} K_H(1,u)K_H(0.5,u) du = ½(1 + 0.5^{2H} − 0.5^{2H}) at H=0.3
        let kernel = KernelSpec::Fbm { h: 0.3 };
        let grid = [0.5, 1.0];
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let expect = fbm_cov(0.3, 1.0, 0.5);
        assert_relative_eq!(cov[[1, 0]], expect, max_relative = 1e-4);
        // and the full 5-point-grid check at tighter tolerance
        let grid = [0.15, 0.33, 0.5, 0.78, 1.0];
        for h in [0.3, 0.7] {
            let cov = covariance_blocks(&KernelSpec::Fbm { h }, &grid).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let expect = fbm_cov(h, grid[i], grid[j]);
                    assert_relative_eq!(cov[[i, j]], expect, max_relative = 1e-5, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn fou_kernel_degenerate_cases() {
        // a = 0 reduces to the fBm kernel
        let k0 = fou_kernel(0.3, 0.0, 0.8, 0.3).unwrap();
        let kf = fbm_kernel(0.3, 0.8, 0.3).unwrap();
        assert_eq!(k0, kf);
        // H = 1/2, a = 1: classical OU kernel e^{−(t−s)}
        for (t, s) in [(1.0, 0.3), (0.7, 0.5), (2.0, 0.1)] {
            let k = fou_kernel(0.5, 1.0, t, s).unwrap();
            assert_relative_eq!(k, (-(t - s)).exp(), max_relative = 1e-6);
        }
    }

    #[test]
    fn fou_kernel_matrix_matches_pointwise_kernel() {
        // the incremental column sweep must agree with the direct double
        // quadrature of the public fou_kernel
        let kernel = KernelSpec::Fou { h: 0.3, a: 1.5 };
        let grid = [0.25, 0.6, 1.0];
        let ug = UGrid::build(&grid, 0.3);
        let km = kernel_matrix(&kernel, &grid, &ug).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            // probe a few interior nodes
            for qi in [0usize, ug.prefix[0] / 2, ug.prefix[i] - 1] {
                let u = ug.nodes[qi];
                if u >= t {
                    continue;
                }
                let direct = fou_kernel(0.3, 1.5, t, u).unwrap();
                assert_relative_eq!(km[[i, qi]], direct, max_relative = 2e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn logfbm_kernel_values() {
        // −log(t−s) = 1 at t−s = 1/e: value C·e^{−(H−1/2)}·1 = e^{0.25} for H=0.25
        let v = logfbm_kernel(0.25, 2.0, 1.0, 1.0, 1.0 - (-1.0f64).exp()).unwrap();
        assert_relative_eq!(v, (0.25f64).exp(), max_relative = 1e-12);
        // short-distance behaviour: exactly representable d = 2^{−40} so the
        // t − s subtraction inside the kernel reproduces d bit-for-bit
        let d = 0.5f64.powi(40);
        let v = logfbm_kernel(0.25, 2.0, 1.0, 1.0, 1.0 - d).unwrap();
        let expect = d.powf(-0.25) * (-(d.ln())).powf(-2.0);
        assert_relative_eq!(v, expect, max_relative = 1e-12);
        // ratio isolates the log factor
        let d = 0.5f64.powi(10);
        let r = logfbm_kernel(0.3, 1.5, 2.0, 1.0, 1.0 - d).unwrap() / (2.0 * d.powf(0.3 - 0.5));
        assert_relative_eq!(r, (-(d.ln())).powf(-1.5), max_relative = 1e-12);
        // domain restriction
        assert!(logfbm_kernel(0.25, 2.0, 1.0, 2.5, 0.5).is_err());
    }

    #[test]
    fn brownian_covariance_blocks_are_exact() {
        let kernel = KernelSpec::Fbm { h: 0.5 };
        let grid = [0.3, 0.7, 1.1];
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let n = 3;
        for i in 0..n {
            for j in 0..n {
                let expect = grid[i.min(j)];
                assert_relative_eq!(cov[[i, j]], expect, max_relative = 1e-9); // V–V
                assert_relative_eq!(cov[[i, n + j]], expect, max_relative = 1e-9); // V–B
                assert_eq!(cov[[n + i, n + j]], expect); // B–B
            }
        }
    }

    #[test]
    fn covariance_symmetric_and_psd() {
        for kernel in [
            KernelSpec::Fbm { h: 0.3 },
            KernelSpec::Fou { h: 0.7, a: 2.0 },
            KernelSpec::LogFbm { h: 0.25, p: 1.5, c: 1.0 },
        ] {
            let grid: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
            let cov = covariance_blocks(&kernel, &grid).unwrap();
            let m = cov.nrows();
            for i in 0..m {
                for j in 0..m {
                    assert!(
                        (cov[[i, j]] - cov[[j, i]]).abs() < 1e-12,
                        "{kernel:?} asymmetric at ({i},{j})"
                    );
                }
            }
            // PSD up to −1e−10·scale: shifting by 1e−10·(tr/m) must factor
            let mut shifted = cov.clone();
            let shift = 1e-10 * cov.diag().sum() / m as f64;
            for i in 0..m {
                shifted[[i, i]] += shift;
            }
            assert!(
                crate::linalg::cholesky_in_place(&mut shifted).is_ok(),
                "{kernel:?} covariance more than −1e−10 indefinite"
            );
        }
    }

    #[test]
    fn grid_validation_errors() {
        let k = KernelSpec::Fbm { h: 0.3 };
        assert!(covariance_blocks(&k, &[]).is_err());
        assert!(covariance_blocks(&k, &[0.0, 0.5]).is_err());
        assert!(covariance_blocks(&k, &[0.5, 0.4]).is_err());
        let lk = KernelSpec::LogFbm { h: 0.25, p: 1.5, c: 1.0 };
        assert!(covariance_blocks(&lk, &[0.5, 1.2]).is_err());
    }

    #[test]
    fn identity_covariance_sampling_moments() {
        let kernel = KernelSpec::Fbm { h: 0.5 };
        let grid = [1.0, 2.0];
        let cov = Array2::<f64>::eye(4);
        let m = 10_000;
        let bundle = cholesky_sample(&cov, &kernel, &grid, m, 99).unwrap();
        // sample covariance of the 4 coordinates ≈ I within 3 SE (SE ≈ 1/√M)
        let cols: Vec<Vec<f64>> = (0..2)
            .map(|i| bundle.v.column(i).to_vec())
            .chain((0..2).map(|i| bundle.b.column(i).to_vec()))
            .collect();
        let se = 1.0 / (m as f64).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let mean_i = cols[i].iter().sum::<f64>() / m as f64;
                let mean_j = cols[j].iter().sum::<f64>() / m as f64;
                let c: f64 = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .map(|(&a, &b)| (a - mean_i) * (b - mean_j))
                    .sum::<f64>()
                    / m as f64;
                let expect = if i == j { 1.0 } else { 0.0 };
                let tol = if i == j { 3.0 * se * 2.0f64.sqrt() } else { 3.0 * se };
                assert!(
                    (c - expect).abs() < tol,
                    "entry ({i},{j}): {c} vs {expect} (tol {tol})"
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_stream_stable() {
        let kernel = KernelSpec::Fbm { h: 0.3 };
        let grid = [0.25, 0.5, 0.75, 1.0];
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let b1 = cholesky_sample(&cov, &kernel, &grid, 7, 11).unwrap();
        let b2 = cholesky_sample(&cov, &kernel, &grid, 7, 11).unwrap();
        assert_eq!(b1.v, b2.v);
        assert_eq!(b1.b, b2.b);
        // prefix stability: first 3 paths of a 7-path run equal a 3-path run
        let b3 = cholesky_sample(&cov, &kernel, &grid, 3, 11).unwrap();
        assert_eq!(b3.v, b1.v.slice(s![..3, ..]).to_owned());
    }

    #[test]
    fn sampled_brownian_increments_are_white() {
        let kernel = KernelSpec::Fou { h: 0.7, a: 1.0 };
        let grid: Vec<f64> = (1..=8).map(|k| k as f64 * 0.125).collect();
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let m = 10_000;
        let bundle = cholesky_sample(&cov, &kernel, &grid, m, 4242).unwrap();
        let mf = m as f64;
        for k in 0..8 {
            let col = bundle.db.column(k);
            let var = col.iter().map(|&x| x * x).sum::<f64>() / mf;
            let expect = 0.125;
            let se = expect * (2.0 / mf).sqrt();
            assert!(
                (var - expect).abs() < 3.0 * se,
                "increment {k} variance {var} vs {expect}"
            );
            if k + 1 < 8 {
                let next = bundle.db.column(k + 1);
                let covar = col
                    .iter()
                    .zip(next.iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
                    / mf;
                let corr = covar / expect;
                assert!(corr.abs() < 3.0 / mf.sqrt(), "lag-1 corr {corr} at {k}");
            }
        }
    }

    #[test]
    fn fbm_sample_covariance_matches_closed_form() {
        // smaller pre-check of the acceptance criterion (6-point grid)
        let h = 0.3;
        let kernel = KernelSpec::Fbm { h };
        let grid: Vec<f64> = (1..=6).map(|k| k as f64 / 6.0).collect();
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let m = 10_000;
        let bundle = cholesky_sample(&cov, &kernel, &grid, m, 2025).unwrap();
        let mf = m as f64;
        for i in 0..6 {
            for j in 0..=i {
                let expect = fbm_cov(h, grid[i], grid[j]);
                let c: f64 = bundle
                    .v
                    .column(i)
                    .iter()
                    .zip(bundle.v.column(j).iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
                    / mf;
                let vi = fbm_cov(h, grid[i], grid[i]);
                let vj = fbm_cov(h, grid[j], grid[j]);
                let se = ((vi * vj + expect * expect) / mf).sqrt();
                assert!(
                    (c - expect).abs() < 3.5 * se,
                    "V–V ({i},{j}): {c} vs {expect} (SE {se})"
                );
            }
        }
    }

    #[test]
    fn csv_and_cache_roundtrip() {
        let kernel = KernelSpec::Fou { h: 0.3, a: 1.0 };
        let grid = [0.5, 1.0];
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let bundle = cholesky_sample(&cov, &kernel, &grid, 3, 5).unwrap();

        let mut csv = Vec::new();
        bundle.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "path_id,t,V,B");
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,"), "row: {first}");

        let dir = tempfile::tempdir().unwrap();
        let path = bundle.write_cache(dir.path()).unwrap();
        assert!(path.exists());
        let loaded = PathBundle::load_cache(dir.path(), &kernel, &grid, 3, 5).unwrap();
        assert_eq!(loaded.v, bundle.v);
        assert_eq!(loaded.b, bundle.b);
        assert_eq!(loaded.db, bundle.db);
        // key mismatch → miss
        assert!(PathBundle::load_cache(dir.path(), &kernel, &grid, 3, 6).is_none());
        let other = KernelSpec::Fbm { h: 0.3 };
        assert!(PathBundle::load_cache(dir.path(), &other, &grid, 3, 5).is_none());
    }

    #[test]
    fn fou_terminal_variance_matches_simulation() {
        let kernel = KernelSpec::Fou { h: 0.3, a: 1.0 };
        let grid: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
        let cov = covariance_blocks(&kernel, &grid).unwrap();
        let m = 10_000;
        let bundle = cholesky_sample(&cov, &kernel, &grid, m, 77).unwrap();
        let var_analytic = cov[[7, 7]];
        let sample_var = bundle.v.column(7).iter().map(|&x| x * x).sum::<f64>() / m as f64;
        let se = var_analytic * (2.0 / m as f64).sqrt();
        assert!(
            (sample_var - var_analytic).abs() < 3.0 * se,
            "Var(V₁): sample {sample_var} vs analytic {var_analytic}"
        );
    }
}
