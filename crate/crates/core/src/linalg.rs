//! Householder QR, one-sided Jacobi SVD, and the thin SVD of a product
//! `a·b` computed without forming it.
//!
//! Sign conventions make every factorization unique: `diag(r) >= 0` for QR,
//! and for SVD the first non-negligible entry of each left singular vector is
//! positive (the matching right singular vector is flipped with it).

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Off-diagonal Gram tolerance for Jacobi convergence, relative to the
/// column norms of the pair.
pub const JACOBI_TOL: f64 = 1e-14;
/// Smallest squared column norm Jacobi treats as nonzero.
const SAFE_MIN: f64 = f64::MIN_POSITIVE / f64::EPSILON;

pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Thin QR: `q` is `m×n` with orthonormal columns, `r` is `n×n` upper triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct QrFactors {
    pub q: Tensor,
    pub r: Tensor,
}

/// Thin SVD `u · diag(s) · v` with `u: m×r`, `s` nonincreasing, `v: r×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Tensor {
        let us = Tensor::from_fn(self.u.shape(), |ix| self.u.get(ix[0], ix[1]) * self.s[ix[1]]);
        matmul(&us, &self.v).expect("svd factors are shape-consistent")
    }
}

fn as_matrix(a: &Tensor, op: &str) -> Result<(usize, usize)> {
    if a.ndim() != 2 {
        return Err(Error::invalid(format!("{op} expects a matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::invalid(format!("{op} input has non-finite entries")));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Thin Householder QR of a tall matrix (`m >= n`).
pub fn householder_qr(a: &Tensor) -> Result<QrFactors> {
    let (m, n) = as_matrix(a, "householder_qr")?;
    if m < n {
        return Err(Error::invalid(format!("householder_qr needs m >= n, got {m}×{n}")));
    }
    let mut work = a.data().to_vec();
    // (v, beta) per column; `None` when the column is already reduced.
    let mut reflectors: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(n);

    for k in 0..n {
        let x0 = work[k * n + k];
        let sigma: f64 = (k + 1..m).map(|i| work[i * n + k].powi(2)).sum();
        if sigma == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = (x0 * x0 + sigma).sqrt();
        // Parlett's choice keeps H·x = +alpha·e1 without cancellation.
        let v0 = if x0 <= 0.0 { x0 - alpha } else { -sigma / (x0 + alpha) };
        let beta = 2.0 * v0 * v0 / (sigma + v0 * v0);
        let mut v = Vec::with_capacity(m - k);
        v.push(1.0);
        v.extend((k + 1..m).map(|i| work[i * n + k] / v0));

        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * work[i * n + j]).sum();
            let f = beta * dot;
            for i in k..m {
                work[i * n + j] -= f * v[i - k];
            }
        }
        reflectors.push(Some((v, beta)));
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I_m.
    let mut q = Tensor::eye_slab(m, n).into_data();
    for k in (0..n).rev() {
        let Some((v, beta)) = &reflectors[k] else { continue };
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * q[i * n + j]).sum();
            let f = beta * dot;
            for i in k..m {
                q[i * n + j] -= f * v[i - k];
            }
        }
    }

    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            r[i * n + j] = work[i * n + j];
        }
    }
    for k in 0..n {
        if r[k * n + k] < 0.0 {
            for j in k..n {
                r[k * n + j] = -r[k * n + j];
            }
            for i in 0..m {
                q[i * n + k] = -q[i * n + k];
            }
        }
    }
    Ok(QrFactors {
        q: Tensor::new(&[m, n], q)?,
        r: Tensor::new(&[n, n], r)?,
    })
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
pub fn jacobi_svd(a: &Tensor) -> Result<SvdFactors> {
    let (m, n) = as_matrix(a, "jacobi_svd")?;
    if m < n {
        // a^T = U S V  =>  a = V^T S U^T
        let t = jacobi_svd(&a.transpose())?;
        let mut out = SvdFactors {
            u: t.v.transpose(),
            s: t.s,
            v: t.u.transpose(),
        };
        fix_signs(&mut out);
        return Ok(out);
    }

    // Column-major working copy and accumulated right rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut rot: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                // Squared norm lost to underflow: the column is zero to working precision.
                for (j, norm2) in [(p, alpha), (q, beta)] {
                    if norm2 < SAFE_MIN && cols[j].iter().any(|&x| x != 0.0) {
                        cols[j].fill(0.0);
                    }
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut rot, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let mut residual: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let denom = (dot(&cols[p], &cols[p]) * dot(&cols[q], &cols[q])).sqrt();
                if denom > 0.0 {
                    residual = residual.max(dot(&cols[p], &cols[q]).abs() / denom);
                }
            }
        }
        return Err(Error::NotConverged {
            sweeps: JACOBI_MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps Jacobi order for ties.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| (norms[j] > 0.0).then(|| cols[j].iter().map(|x| x / norms[j]).collect()))
        .collect();
    complete_orthonormal(&mut u_cols, m);

    let u = Tensor::from_fn(&[m, n], |ix| u_cols[ix[1]].as_ref().unwrap()[ix[0]]);
    let v = Tensor::from_fn(&[n, n], |ix| rot[order[ix[0]]][ix[1]]);
    let mut out = SvdFactors { u, s, v };
    fix_signs(&mut out);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// drawing candidates from the standard basis in order.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < m {
            let mut w = vec![0.0; m];
            w[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt against all filled columns.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&w, other);
                    for (wi, oi) in w.iter_mut().zip(other) {
                        *wi -= proj * oi;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > 0.5 {
                cols[slot] = Some(w.iter().map(|x| x / norm).collect());
                break;
            }
        }
    }
}

/// First entry of each `u` column above this magnitude decides its sign.
const SIGN_EPS: f64 = 1e-12;

fn fix_signs(f: &mut SvdFactors) {
    let (m, r) = (f.u.shape()[0], f.u.shape()[1]);
    let n = f.v.shape()[1];
    let mut u = f.u.data().to_vec();
    let mut v = f.v.data().to_vec();
    for j in 0..r {
        let lead = (0..m).map(|i| u[i * r + j]).find(|x| x.abs() > SIGN_EPS);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..m {
                u[i * r + j] = -u[i * r + j];
            }
            for k in 0..n {
                v[j * n + k] = -v[j * n + k];
            }
        }
    }
    f.u = Tensor::new(&[m, r], u).expect("shape preserved");
    f.v = Tensor::new(&[r, n], v).expect("shape preserved");
}

/// Thin SVD of `a·b` (`a: m×k`, `b: k×n`, `k <= min(m, n)`) through the
/// `k×k` core `R_a · R_bᵀ`; the `m×n` product is never formed.
pub fn product_svd(a: &Tensor, b: &Tensor) -> Result<SvdFactors> {
    let (m, k) = as_matrix(a, "product_svd")?;
    let (k2, n) = as_matrix(b, "product_svd")?;
    if k != k2 {
        return Err(Error::shape("product_svd", a.shape(), b.shape()));
    }
    if k > m || k > n {
        return Err(Error::invalid(format!(
            "product_svd needs inner extent {k} <= outer extents ({m}, {n})"
        )));
    }
    let qa = householder_qr(a)?;
    let qb = householder_qr(&b.transpose())?;
    let core = matmul(&qa.r, &qb.r.transpose())?;
    let inner = jacobi_svd(&core)?;
    let u = matmul(&qa.q, &inner.u)?;
    let v = matmul(&inner.v, &qb.q.transpose())?;
    let mut out = SvdFactors { u, s: inner.s, v };
    fix_signs(&mut out);
    Ok(out)
}

/// Max-abs entry of `qᵀq − I`.
pub fn orthonormality_error(q: &Tensor) -> f64 {
    let gram = matmul(&q.transpose(), q).expect("qᵀq is always defined");
    let n = gram.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}
