//! Spectral normalization via power iteration.
//!
//! Weights are viewed as a matrix with `shape[0]` rows and the remaining
//! axes flattened into columns. The left singular vector estimate `u`
//! persists across calls, so after a warm start a single iteration per
//! optimizer step keeps the estimate tight.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SpectralState {
    u: Vec<f32>,
}

impl SpectralState {
    /// Random unit vector of length `rows`.
    pub fn new(rows: usize, rng: &mut impl Rng) -> Self {
        assert!(rows > 0);
        let mut u: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = norm(&u).max(1e-12);
        u.iter_mut().for_each(|v| *v /= n);
        SpectralState { u }
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Estimate the largest singular value of `w` with `iters` power
/// iterations, updating the persisted `u`. Errors on a (near-)zero matrix,
/// whose singular direction is undefined.
pub fn spectral_sigma(w: &Tensor<f32>, state: &mut SpectralState, iters: usize) -> Result<f32> {
    let shape = w.shape();
    if shape.is_empty() {
        return Err(Error::shape("spectral_sigma wants rank >= 1"));
    }
    let rows = shape[0];
    let cols = w.numel() / rows;
    if state.u.len() != rows {
        return Err(Error::shape(format!(
            "spectral state has {} rows, weight has {}",
            state.u.len(),
            rows
        )));
    }
    let data = w.data();
    let frob = norm(data);
    if frob < 1e-20 {
        return Err(Error::train(
            "spectral normalization of an all-zero weight",
        ));
    }
    let mut v = vec![0.0f32; cols];
    for _ in 0..iters.max(1) {
        // v = W^T u, normalized
        v.fill(0.0);
        for r in 0..rows {
            let ur = state.u[r];
            let row = &data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                v[c] += row[c] * ur;
            }
        }
        let nv = norm(&v);
        if nv < 1e-20 {
            return Err(Error::train("power iteration degenerated to zero"));
        }
        v.iter_mut().for_each(|x| *x /= nv);
        // u = W v, normalized
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mut acc = 0.0f32;
            for c in 0..cols {
                acc += row[c] * v[c];
            }
            state.u[r] = acc;
        }
        let nu = norm(&state.u);
        if nu < 1e-20 {
            return Err(Error::train("power iteration degenerated to zero"));
        }
        state.u.iter_mut().for_each(|x| *x /= nu);
    }
    // sigma = u^T W v
    let mut sigma = 0.0f32;
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for c in 0..cols {
            acc += row[c] * v[c];
        }
        sigma += state.u[r] * acc;
    }
    Ok(sigma.abs())
}

/// Divide `w` by its estimated spectral norm in place. Returns the estimate
/// used. After this call the weight's true largest singular value is
/// sigma_true/sigma_hat, which the power-iteration tests pin near 1.
pub fn spectral_normalize(
    w: &mut Tensor<f32>,
    state: &mut SpectralState,
    iters: usize,
) -> Result<f32> {
    let sigma = spectral_sigma(w, state, iters)?;
    if sigma < 1e-12 {
        return Err(Error::train("estimated spectral norm is zero"));
    }
    for v in w.data_mut() {
        *v /= sigma;
    }
    Ok(sigma)
}

/// Exact largest singular value via SVD; the independent oracle for tests
/// and invariant checks.
pub fn svd_sigma_oracle(w: &Tensor<f32>, rows: usize) -> f32 {
    let cols = w.numel() / rows;
    let m = nalgebra::DMatrix::<f64>::from_fn(rows, cols, |r, c| w.data()[r * cols + c] as f64);
    m.singular_values()[0] as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_sigma_is_largest_entry() {
        let w = Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(2, &mut crate::rng::stream_rng(1, "sn"));
        let sigma = spectral_sigma(&w, &mut st, 50).unwrap();
        assert!((sigma - 3.0).abs() < 1e-4, "sigma = {}", sigma);
    }

    #[test]
    fn matches_svd_oracle_on_random_matrices() {
        let mut rng = crate::rng::stream_rng(7, "sn-oracle");
        for rows in [3usize, 8, 16] {
            let cols = rows * 2 + 1;
            let w = Tensor::randn(&[rows, cols], 1.0, &mut rng);
            let mut st = SpectralState::new(rows, &mut rng);
            let est = spectral_sigma(&w, &mut st, 60).unwrap();
            let truth = svd_sigma_oracle(&w, rows);
            assert!(
                (est - truth).abs() / truth < 1e-2,
                "est {} truth {}",
                est,
                truth
            );
        }
    }

    #[test]
    fn normalize_brings_sigma_to_one_and_warm_start_stays_tight() {
        let mut rng = crate::rng::stream_rng(9, "sn-norm");
        let mut w = Tensor::randn(&[6, 20], 0.8, &mut rng);
        let mut st = SpectralState::new(6, &mut rng);
        spectral_normalize(&mut w, &mut st, 30).unwrap();
        let truth = svd_sigma_oracle(&w, 6);
        assert!((truth - 1.0).abs() < 1e-2, "sigma after normalize = {}", truth);
        // Small weight drift, then a single warm-started iteration.
        for v in w.data_mut() {
            *v *= 1.02;
        }
        spectral_normalize(&mut w, &mut st, 1).unwrap();
        let truth = svd_sigma_oracle(&w, 6);
        assert!((truth - 1.0).abs() < 1e-2, "warm sigma = {}", truth);
    }

    #[test]
    fn zero_matrix_is_an_error() {
        let w = Tensor::<f32>::zeros(&[4, 4]);
        let mut st = SpectralState::new(4, &mut crate::rng::stream_rng(3, "sn-zero"));
        assert!(spectral_sigma(&w, &mut st, 5).is_err());
    }
}
