//! Hermite polynomials and the diagram calculus for product moments and
//! joint cumulants of Hermite functionals of correlated Gaussians.
//!
//! Moments are sums over "index sets": symmetric nonnegative integer
//! matrices with zero diagonal whose row sums match the Hermite degrees.
//! Restricting the sum to index sets whose edge graph is connected turns
//! the moment formula into a joint-cumulant formula; that restriction is
//! what the estimator variance code relies on.

use crate::{Error, Result};
use ndarray::Array2;

/// Probabilists' Hermite polynomial H_q(x), evaluated by the three-term
/// recursion H_{q+1} = x·H_q − q·H_{q−1} (H₀ = 1, H₁ = x).
pub fn hermite_eval(q: usize, x: f64) -> f64 {
    match q {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for k in 1..q {
                let next = x * cur - k as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Cap on Σq for index-set enumeration; beyond this the combinatorics is
/// hopeless and the request is almost certainly a bug upstream.
pub const MAX_TOTAL_DEGREE: usize = 64;

/// A symmetric pairing matrix with zero diagonal whose row sums equal the
/// degree vector `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    pub q: Vec<usize>,
    pub k: Array2<usize>,
}

impl IndexSet {
    pub fn n(&self) -> usize {
        self.q.len()
    }
}

/// Enumerate every index set for the degree vector `q`, in lexicographic
/// order of the flattened upper triangle (k₁₂, k₁₃, …, k₂₃, …).
/// Returns an empty list when no pairing is feasible (e.g. odd Σq).
pub fn enumerate_index_sets(q: &[usize]) -> Result<Vec<IndexSet>> {
    let n = q.len();
    if n == 0 {
        return Err(Error::InvalidParams("empty degree vector".into()));
    }
    let total: usize = q.iter().sum();
    if total > MAX_TOTAL_DEGREE {
        return Err(Error::InvalidParams(format!(
            "total degree {total} exceeds enumeration guard {MAX_TOTAL_DEGREE}"
        )));
    }
    let mut out = Vec::new();
    if total % 2 == 1 {
        return Ok(out); // each pairing edge absorbs two degree units
    }
    let mut k = Array2::<usize>::zeros((n, n));
    let mut rem: Vec<usize> = q.to_vec();
    dfs_pairs(n, 0, 1, &mut k, &mut rem, q, &mut out);
    Ok(out)
}

/// Depth-first assignment of the upper-triangle entries in row-major
/// order, smallest value first, backtracking on row-sum violations.
fn dfs_pairs(
    n: usize,
    i: usize,
    j: usize,
    k: &mut Array2<usize>,
    rem: &mut Vec<usize>,
    q: &[usize],
    out: &mut Vec<IndexSet>,
) {
    if i + 1 >= n {
        // all unordered pairs assigned; only the last row is unchecked
        if rem[n - 1] == 0 {
            out.push(IndexSet {
                q: q.to_vec(),
                k: k.clone(),
            });
        }
        return;
    }
    if j == n {
        if rem[i] != 0 {
            return; // row i can no longer reach its degree
        }
        dfs_pairs(n, i + 1, i + 2, k, rem, q, out);
        return;
    }
    let hi = rem[i].min(rem[j]);
    for v in 0..=hi {
        k[[i, j]] = v;
        k[[j, i]] = v;
        rem[i] -= v;
        rem[j] -= v;
        dfs_pairs(n, i, j + 1, k, rem, q, out);
        rem[i] += v;
        rem[j] += v;
    }
    k[[i, j]] = 0;
    k[[j, i]] = 0;
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Σ-term weight of one index set: ∏_{i<j} C_ij^{k_ij} / k_ij!.
fn diagram_weight(k: &Array2<usize>, c: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let mut w = 1.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let kij = k[[i, j]];
            if kij > 0 {
                w *= c[[i, j]].powi(kij as i32) / factorial(kij);
            }
        }
    }
    w
}

fn check_dims(q: &[usize], c: &Array2<f64>) -> Result<()> {
    let n = q.len();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::Dim(format!(
            "degree vector length {n} vs covariance {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(())
}

/// E[∏_r H_{q_r}(Z_r)] for a centered Gaussian vector Z with covariance C:
/// ∏ q_r! · Σ_{index sets} ∏_{i<j} C_ij^{k_ij}/k_ij!.
pub fn gaussian_product_moment(q: &[usize], c: &Array2<f64>) -> Result<f64> {
    check_dims(q, c)?;
    let sets = enumerate_index_sets(q)?;
    let qfact: f64 = q.iter().map(|&d| factorial(d)).product();
    let sum: f64 = sets.iter().map(|set| diagram_weight(&set.k, c)).sum();
    Ok(qfact * sum)
}

/// Number of connected components of the edge graph of an index set
/// (vertices i—j adjacent iff k_ij > 0; isolated vertices count).
pub fn connected_components(set: &IndexSet) -> usize {
    let n = set.n();
    let mut seen = vec![false; n];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for u in 0..n {
                if !seen[u] && set.k[[v, u]] > 0 {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
    }
    components
}

/// Joint cumulant Cum(H_{q_1}(Z_1), …, H_{q_n}(Z_n)): the product-moment
/// sum restricted to index sets with a connected edge graph.
pub fn joint_cumulant(q: &[usize], c: &Array2<f64>) -> Result<f64> {
    check_dims(q, c)?;
    let sets = enumerate_index_sets(q)?;
    let qfact: f64 = q.iter().map(|&d| factorial(d)).product();
    let sum: f64 = sets
        .iter()
        .filter(|set| connected_components(set) == 1)
        .map(|set| diagram_weight(&set.k, c))
        .sum();
    Ok(qfact * sum)
}

/// Biased (moment-estimator) sample cumulant of order 2, 3, or 4.
/// Order 4 is m₄ − 3m₂² on centered data.
pub fn sample_cumulants(samples: &[f64], order: usize) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if !(2..=4).contains(&order) {
        return Err(Error::InvalidParams(format!(
            "cumulant order {order} not in 2..=4"
        )));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    Ok(match order {
        2 => m2,
        3 => m3,
        _ => m4 - 3.0 * m2 * m2,
    })
}
