//! Dense symmetric linear algebra sized for the stationary covariance
//! matrices the estimator experiments factor (up to ~8000×8000 on one core).
//!
//! The right-looking blocked Cholesky pushes almost all flops through
//! ndarray's gemm (matrixmultiply), which is what makes the Monte Carlo
//! CLT suites fit their runtime budgets; an unblocked column algorithm at
//! this size would be an order of magnitude slower.

use crate::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};

/// Panel width for the blocked factorization; sized so a panel and a block
/// of the trailing matrix sit comfortably in L2.
const BLOCK: usize = 192;

/// Width at which the recursive triangular solve falls back to scalar code.
const TRSM_LEAF: usize = 32;

/// In-place lower Cholesky of a symmetric positive-definite matrix.
/// On success the lower triangle holds L and the strict upper triangle is
/// zeroed (so the result can be used directly in dense products).
pub fn cholesky_in_place(a: &mut Array2<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dim(format!("cholesky: {}x{} not square", n, a.ncols())));
    }

    let mut kb = 0;
    while kb < n {
        let ke = (kb + BLOCK).min(n);

        factor_diag_block(a, kb, ke)?;

        if ke < n {
            // Panel solve: A[ke.., kb..ke] := A[ke.., kb..ke] · L_kk^{-T}
            let lkk = a.slice(s![kb..ke, kb..ke]).to_owned();
            let mut panel = a.slice(s![ke..n, kb..ke]).to_owned();
            trsm_right_lower_t(&mut panel, &lkk);
            a.slice_mut(s![ke..n, kb..ke]).assign(&panel);

            // Trailing update (lower blocks only): A[ke.., ke..] -= P Pᵀ
            let mut jb = ke;
            while jb < n {
                let je = (jb + BLOCK).min(n);
                let p_rows = panel.slice(s![jb - ke.., ..]);
                let p_blk = panel.slice(s![jb - ke..je - ke, ..]);
                let mut c = a.slice_mut(s![jb..n, jb..je]);
                general_mat_mul(-1.0, &p_rows, &p_blk.t(), 1.0, &mut c);
                jb = je;
            }
        }
        kb = ke;
    }

    // Zero the stale upper triangle so L is a genuine lower-triangular matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(())
}

/// Unblocked Cholesky of the diagonal block a[kb..ke, kb..ke].
fn factor_diag_block(a: &mut Array2<f64>, kb: usize, ke: usize) -> Result<()> {
    for j in kb..ke {
        let mut d = a[[j, j]];
        for k in kb..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Factorization(format!(
                "non-positive pivot {d:.3e} at column {j}"
            )));
        }
        let ljj = d.sqrt();
        a[[j, j]] = ljj;
        for i in (j + 1)..ke {
            let mut v = a[[i, j]];
            for k in kb..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / ljj;
        }
    }
    Ok(())
}

/// Solve X · Lᵀ = B in place (B := B · L^{-T}) for lower-triangular L,
/// recursing into gemm updates so only TRSM_LEAF-wide strips run scalar.
fn trsm_right_lower_t(b: &mut Array2<f64>, l: &Array2<f64>) {
    let m = l.nrows();
    if m <= TRSM_LEAF {
        let rows = b.nrows();
        for r in 0..rows {
            for j in 0..m {
                let mut v = b[[r, j]];
                for k in 0..j {
                    v -= b[[r, k]] * l[[j, k]];
                }
                b[[r, j]] = v / l[[j, j]];
            }
        }
        return;
    }
    let h = m / 2;
    // [B1 B2] [L11  0 ; L21 L22]^{-T}: B1 := B1 L11^{-T};
    // B2 := (B2 - B1 L21ᵀ) L22^{-T}
    let l11 = l.slice(s![..h, ..h]).to_owned();
    let l21 = l.slice(s![h.., ..h]).to_owned();
    let l22 = l.slice(s![h.., h..]).to_owned();
    let mut b1 = b.slice(s![.., ..h]).to_owned();
    trsm_right_lower_t(&mut b1, &l11);
    {
        let mut b2 = b.slice_mut(s![.., h..]);
        general_mat_mul(-1.0, &b1, &l21.t(), 1.0, &mut b2);
    }
    let mut b2 = b.slice(s![.., h..]).to_owned();
    trsm_right_lower_t(&mut b2, &l22);
    b.slice_mut(s![.., ..h]).assign(&b1);
    b.slice_mut(s![.., h..]).assign(&b2);
}

/// Jitter ladder used when factoring covariance matrices that are PSD only
/// up to quadrature noise: 0, 1e-12, 1e-10, 1e-8, each times trace/N.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Factor `cov + jitter·I`, walking the jitter ladder on failure.
/// Returns the lower factor and the jitter that succeeded.
pub fn cholesky_with_jitter(cov: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let n = cov.nrows();
    let scale = cov.diag().sum() / n.max(1) as f64;
    let mut last = String::new();
    for &level in JITTER_LADDER.iter() {
        let jitter = level * scale;
        let mut work = cov.clone();
        if jitter > 0.0 {
            for i in 0..n {
                work[[i, i]] += jitter;
            }
        }
        match cholesky_in_place(&mut work) {
            Ok(()) => return Ok((work, jitter)),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Factorization(format!(
        "jitter ladder exhausted (n={n}): {last}"
    )))
}

/// Batched lower-triangular product Y = L · X for an n×m batch of columns,
/// skipping the structurally zero upper blocks.
pub fn lower_tri_matmul(l: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(l.ncols(), n, "factor must be square");
    assert_eq!(x.nrows(), n, "batch row count must match factor");
    let m = x.ncols();
    let mut y = Array2::<f64>::zeros((n, m));
    let mut rb = 0;
    while rb < n {
        let re = (rb + BLOCK).min(n);
        let mut cb = 0;
        while cb <= rb {
            let ce = (cb + BLOCK).min(n);
            let lblk = l.slice(s![rb..re, cb..ce]);
            let xblk = x.slice(s![cb..ce, ..]);
            let mut yblk = y.slice_mut(s![rb..re, ..]);
            general_mat_mul(1.0, &lblk, &xblk, 1.0, &mut yblk);
            cb = ce;
        }
        rb = re;
    }
    y
}
