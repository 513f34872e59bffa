//! Dense linear algebra on [`Tensor`] matrices: one-sided Jacobi SVD, rank-r
//! truncation, and a Cholesky solver for the normal equations.

use crate::error::{numeric_err, shape_err, Result};
use crate::tensor::{dot, Tensor};

pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin SVD `m = U · diag(sigma) · Vᵀ` with `k = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × k`
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `cols × k`
    pub v: Tensor,
    pub sweeps: usize,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_rank(self.sigma.len())
    }

    /// Sum of the leading `r` rank-one terms.
    pub fn reconstruct_rank(&self, r: usize) -> Tensor {
        let (p, k) = self.u.dims2();
        let q = self.v.rows();
        let r = r.min(k);
        let mut out = Tensor::zeros(&[p, q]);
        for c in 0..r {
            let s = self.sigma[c];
            if s == 0.0 {
                continue;
            }
            for i in 0..p {
                let ui = self.u.get2(i, c) * s;
                if ui == 0.0 {
                    continue;
                }
                for j in 0..q {
                    let idx = i * q + j;
                    out.data_mut()[idx] += ui * self.v.get2(j, c);
                }
            }
        }
        out
    }

    /// `Σ_{i ≥ r} σ_i²` (zero-based), i.e. the squared Frobenius error of the
    /// rank-`r` truncation.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }
}

/// One-sided (Hestenes) Jacobi SVD, capped at [`SVD_MAX_SWEEPS`] sweeps.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (p, q) = m.dims2();
    if !m.is_finite() {
        return Err(numeric_err!("svd input has non-finite entries"));
    }
    if p < q {
        let t = svd_tall(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
            sweeps: t.sweeps,
        });
    }
    svd_tall(m)
}

fn svd_tall(m: &Tensor) -> Result<Svd> {
    let (p, q) = m.dims2();
    // Column-major working copies make the column rotations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| (0..p).map(|i| m.get2(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    let mut sweeps = 0;
    loop {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(numeric_err!("svd did not converge after {sweeps} sweeps"));
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(j);
                rotate(&mut left[i], &mut right[0], c, s);
                let (left, right) = vcols.split_at_mut(j);
                rotate(&mut left[i], &mut right[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = Tensor::zeros(&[p, q]);
    let mut v = Tensor::zeros(&[q, q]);
    let mut sigma = Vec::with_capacity(q);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        for i in 0..p {
            u.set2(i, k, if s > 0.0 { cols[j][i] / s } else { 0.0 });
        }
        for i in 0..q {
            v.set2(i, k, vcols[j][i]);
        }
    }
    Ok(Svd { u, sigma, v, sweeps })
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncate_rank(m: &Tensor, r: usize) -> Result<Tensor> {
    Ok(svd(m)?.reconstruct_rank(r))
}

/// Number of singular values above `tol`.
pub fn numerical_rank(m: &Tensor, tol: f64) -> Result<usize> {
    Ok(svd(m)?.sigma.iter().filter(|&&s| s > tol).count())
}

/// Solves `A x = B` for symmetric positive definite `A` (`n × n`) and `B`
/// (`n × k`). Returns `None` if a pivot is not strictly positive.
pub fn cholesky_solve(a: &Tensor, b: &Tensor) -> Result<Option<Tensor>> {
    let (n, n2) = a.dims2();
    let (bn, k) = b.dims2();
    if n != n2 || bn != n {
        return Err(shape_err!("cholesky_solve: A {:?}, B {:?}", a.shape(), b.shape()));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get2(i, j);
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                // Relative pivot floor: anything this small is numerically singular.
                if s <= 1e-14 * a.get2(i, i).abs().max(f64::MIN_POSITIVE) || s <= 0.0 {
                    return Ok(None);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.clone().with_requires_grad(false);
    for c in 0..k {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b.get2(i, c);
            for p in 0..i {
                s -= l[i * n + p] * y[p];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= l[p * n + i] * x.get2(p, c);
            }
            x.set2(i, c, s / l[i * n + i]);
        }
    }
    Ok(Some(x))
}
