//! Non-rigid coherent point drift registration of the template mesh onto a
//! target point cloud.
//!
//! The deformation field is v = G w with a Gaussian kernel G over the
//! template vertices. We work in a low-rank basis: a Nystrom approximation
//! of G from stride-sampled landmark vertices, orthonormalized by SVD into
//! G' = Q diag(L) Q^T. G' itself is the model kernel, so the EM objective
//! (penalized negative log-likelihood) is non-increasing exactly, not just
//! up to an approximation error.

use super::Mesh;
use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdConfig {
    /// Gaussian kernel width of the deformation, in units of the normalized
    /// point-cloud scale.
    pub beta: f64,
    /// Motion-coherence regularization weight.
    pub lambda_reg: f64,
    /// Uniform outlier mixture weight, in [0, 1).
    pub w_outlier: f64,
    pub max_iters: usize,
    /// Stop when the relative objective change drops below this.
    pub tol: f64,
    /// Target clouds larger than this are stride-subsampled.
    pub max_target_points: usize,
    /// Rank of the kernel approximation (landmark count).
    pub rank: usize,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda_reg: 3.0,
            w_outlier: 0.1,
            max_iters: 100,
            tol: 1e-6,
            max_target_points: 3000,
            rank: 64,
        }
    }
}

impl CpdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config("cpd: beta must be positive"));
        }
        if !(self.lambda_reg > 0.0) {
            return Err(Error::config("cpd: lambda_reg must be positive"));
        }
        if !(0.0..1.0).contains(&self.w_outlier) {
            return Err(Error::config("cpd: w_outlier must be in [0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("cpd: max_iters must be at least 1"));
        }
        if self.rank == 0 || self.max_target_points == 0 {
            return Err(Error::config("cpd: rank and max_target_points must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CpdFit {
    pub mesh: Mesh,
    /// Penalized negative log-likelihood per EM iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Final GMM variance in normalized coordinates.
    pub sigma2: f64,
}

struct Normalized {
    points: Vec<[f64; 3]>,
    mean: [f64; 3],
    scale: f64,
}

fn normalize(points: &[[f64; 3]]) -> Result<Normalized> {
    let n = points.len() as f64;
    let mut mean = [0f64; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    let mut ss = 0.0;
    for p in points {
        for a in 0..3 {
            ss += (p[a] - mean[a]).powi(2);
        }
    }
    let scale = (ss / n).sqrt();
    if !(scale > 1e-12) {
        return Err(Error::geometry("cpd: degenerate (zero-extent) point set"));
    }
    let points = points
        .iter()
        .map(|p| {
            [
                (p[0] - mean[0]) / scale,
                (p[1] - mean[1]) / scale,
                (p[2] - mean[2]) / scale,
            ]
        })
        .collect();
    Ok(Normalized { points, mean, scale })
}

/// Low-rank kernel basis: orthonormal Q (M x K) and eigenvalues `lam` with
/// G' = Q diag(lam) Q^T approximating the Gaussian kernel on `y`.
fn nystrom_basis(y: &[[f64; 3]], beta: f64, rank: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = y.len();
    let k0 = rank.min(m);
    let landmarks: Vec<usize> = (0..k0).map(|i| i * m / k0).collect();
    let g = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
        (-d2 / (2.0 * beta * beta)).exp()
    };
    let mut g_ll = DMatrix::<f64>::zeros(k0, k0);
    for i in 0..k0 {
        for j in 0..k0 {
            g_ll[(i, j)] = g(&y[landmarks[i]], &y[landmarks[j]]);
        }
    }
    let eig = SymmetricEigen::new(g_ll);
    let emax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(emax > 0.0) {
        return Err(Error::geometry("cpd: kernel matrix collapsed"));
    }
    let kept: Vec<usize> = (0..k0).filter(|i| eig.eigenvalues[*i] > 1e-10 * emax).collect();
    // W = G_ML U D^{-1/2} so that W W^T is the Nystrom approximation of G.
    let mut w = DMatrix::<f64>::zeros(m, kept.len());
    for r in 0..m {
        for (cidx, &c) in kept.iter().enumerate() {
            let mut acc = 0.0;
            for (i, &l) in landmarks.iter().enumerate() {
                acc += g(&y[r], &y[l]) * eig.eigenvectors[(i, c)];
            }
            w[(r, cidx)] = acc / eig.eigenvalues[c].sqrt();
        }
    }
    let svd = SVD::new(w, true, false);
    let u = svd.u.ok_or_else(|| Error::geometry("cpd: kernel SVD failed"))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let mut q_cols = Vec::new();
    let mut lam = Vec::new();
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > 1e-8 * smax {
            q_cols.push(u.column(i).into_owned());
            lam.push(s * s);
        }
    }
    let q = DMatrix::<f64>::from_columns(&q_cols);
    Ok((q, lam))
}

/// Register the template onto `target` and return the deformed template
/// (same topology) plus the EM trace.
pub fn cpd_register(template: &Mesh, target: &[[f32; 3]], cfg: &CpdConfig) -> Result<CpdFit> {
    template.validate()?;
    cfg.validate()?;
    if target.len() < 100 {
        return Err(Error::geometry(format!(
            "cpd: need at least 100 target points, got {}",
            target.len()
        )));
    }

    // Uniform stride subsample of the target.
    let n_keep = cfg.max_target_points.min(target.len());
    let xs_raw: Vec<[f64; 3]> = (0..n_keep)
        .map(|i| {
            let p = target[i * target.len() / n_keep];
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
        .collect();
    let ys_raw: Vec<[f64; 3]> = template
        .vertices
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();

    let xn = normalize(&xs_raw)?;
    let yn = normalize(&ys_raw)?;
    let xs = &xn.points;
    let n = xs.len();
    let m = yn.points.len();

    let (q, lam) = nystrom_basis(&yn.points, cfg.beta, cfg.rank)?;
    let k = lam.len();

    let mut t_pts = yn.points.clone();
    let mut u = DMatrix::<f64>::zeros(k, 3);
    let mut sigma2 = {
        let mut acc = 0.0;
        for x in xs {
            for y in &yn.points {
                acc += (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
            }
        }
        acc / (3.0 * n as f64 * m as f64)
    };

    let mut objective = Vec::with_capacity(cfg.max_iters);
    let mut p1 = vec![0f64; m];
    let mut px = vec![[0f64; 3]; m];
    let mut row = vec![0f64; m];
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        // E-step: responsibilities, sufficient statistics, and the NLL at
        // the current parameters.
        p1.fill(0.0);
        for e in px.iter_mut() {
            *e = [0.0; 3];
        }
        let k1 = (1.0 - cfg.w_outlier)
            / (m as f64 * (2.0 * std::f64::consts::PI * sigma2).powf(1.5));
        let c_out = cfg.w_outlier / n as f64;
        let cutoff = 60.0 * sigma2; // exp(-30) ~ 1e-13, below f64 relevance here
        let mut nll = 0.0;
        let mut np = 0.0;
        let mut x_p_x = 0.0;
        for x in xs {
            let mut s = 0.0;
            for (mi, t) in t_pts.iter().enumerate() {
                let d2 =
                    (x[0] - t[0]).powi(2) + (x[1] - t[1]).powi(2) + (x[2] - t[2]).powi(2);
                let e = if d2 < cutoff { (-d2 / (2.0 * sigma2)).exp() } else { 0.0 };
                row[mi] = e;
                s += e;
            }
            let pden = k1 * s + c_out;
            if !(pden > 0.0) || !pden.is_finite() {
                return Err(Error::geometry("cpd: EM diverged (vanishing mixture density)"));
            }
            nll -= pden.ln();
            let pt1 = k1 * s / pden;
            np += pt1;
            x_p_x += pt1 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
            let scale_p = k1 / pden;
            for mi in 0..m {
                if row[mi] > 0.0 {
                    let p = scale_p * row[mi];
                    p1[mi] += p;
                    px[mi][0] += p * x[0];
                    px[mi][1] += p * x[1];
                    px[mi][2] += p * x[2];
                }
            }
        }
        let mut reg = 0.0;
        for ki in 0..k {
            let r2 = u[(ki, 0)].powi(2) + u[(ki, 1)].powi(2) + u[(ki, 2)].powi(2);
            reg += r2 / lam[ki];
        }
        let obj = nll + 0.5 * cfg.lambda_reg * reg;
        if !obj.is_finite() {
            return Err(Error::geometry("cpd: EM diverged (non-finite objective)"));
        }
        objective.push(obj);
        if it > 0 {
            let prev = objective[it - 1];
            if (prev - obj).abs() <= cfg.tol * obj.abs().max(1.0) {
                break;
            }
        }

        // M-step, deformation: (Q^T dP1 Q + lambda sigma2 Lam^-1) u = rhs.
        let mut a = DMatrix::<f64>::zeros(k, k);
        for ki in 0..k {
            for kj in ki..k {
                let mut acc = 0.0;
                for mi in 0..m {
                    acc += q[(mi, ki)] * p1[mi] * q[(mi, kj)];
                }
                a[(ki, kj)] = acc;
                a[(kj, ki)] = acc;
            }
        }
        for ki in 0..k {
            a[(ki, ki)] += cfg.lambda_reg * sigma2 / lam[ki];
        }
        let mut rhs = DMatrix::<f64>::zeros(k, 3);
        for ki in 0..k {
            let mut acc = [0f64; 3];
            for mi in 0..m {
                let resid = [
                    px[mi][0] - p1[mi] * yn.points[mi][0],
                    px[mi][1] - p1[mi] * yn.points[mi][1],
                    px[mi][2] - p1[mi] * yn.points[mi][2],
                ];
                for axis in 0..3 {
                    acc[axis] += q[(mi, ki)] * resid[axis];
                }
            }
            for axis in 0..3 {
                rhs[(ki, axis)] = acc[axis];
            }
        }
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::geometry("cpd: M-step system not positive definite"))?;
        u = chol.solve(&rhs);

        for mi in 0..m {
            let mut v = [0f64; 3];
            for ki in 0..k {
                for axis in 0..3 {
                    v[axis] += q[(mi, ki)] * u[(ki, axis)];
                }
            }
            for axis in 0..3 {
                t_pts[mi][axis] = yn.points[mi][axis] + v[axis];
            }
        }

        // M-step, variance: closed form at the new positions.
        let mut tr_pxt = 0.0;
        let mut t_p_t = 0.0;
        for mi in 0..m {
            for axis in 0..3 {
                tr_pxt += px[mi][axis] * t_pts[mi][axis];
            }
            t_p_t += p1[mi]
                * (t_pts[mi][0] * t_pts[mi][0]
                    + t_pts[mi][1] * t_pts[mi][1]
                    + t_pts[mi][2] * t_pts[mi][2]);
        }
        sigma2 = ((x_p_x - 2.0 * tr_pxt + t_p_t) / (3.0 * np)).max(1e-10);
        if !sigma2.is_finite() {
            return Err(Error::geometry("cpd: EM diverged (non-finite variance)"));
        }
    }

    // Denormalize into the target's original frame.
    let vertices: Vec<[f32; 3]> = t_pts
        .iter()
        .map(|p| {
            [
                (p[0] * xn.scale + xn.mean[0]) as f32,
                (p[1] * xn.scale + xn.mean[1]) as f32,
                (p[2] * xn.scale + xn.mean[2]) as f32,
            ]
        })
        .collect();
    let mesh = Mesh {
        vertices,
        faces: template.faces.clone(),
        template_id: template.template_id.clone(),
    };
    Ok(CpdFit { mesh, objective, iterations, sigma2 })
}
