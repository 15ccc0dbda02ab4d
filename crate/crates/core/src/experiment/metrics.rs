//! Error and signal-level metrics reported by experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::spectral_graph::SpectralBasis;

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// A quantity reported both linearly and in decibels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub linear: f64,
    pub db: f64,
}

impl Level {
    pub fn new(linear: f64) -> Self {
        Self { linear, db: to_db(linear) }
    }
}

/// `Σ_τ ‖r̂_τ − r_τ‖² / Σ_τ ‖r_τ‖²`.
pub fn nmse(estimates: &[Vector], truth: &[Vector]) -> Result<Level> {
    if estimates.len() != truth.len() {
        return Err(Error::dims(format!("{} estimates for {} references", estimates.len(), truth.len())));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (e, r) in estimates.iter().zip(truth) {
        if e.len() != r.len() {
            return Err(Error::dims("estimate and reference lengths differ"));
        }
        err += (e - r).norm_squared();
        energy += r.norm_squared();
    }
    if energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(Level::new(err / energy))
}

/// `Σ_τ ‖r_τ‖² / (N R σ_v²)` for signals stored as `R x N`.
pub fn average_snr(signals: &Matrix, measurement_var: f64) -> Result<Level> {
    if measurement_var <= 0.0 {
        return Err(Error::ZeroNoise);
    }
    let (r, n) = signals.shape();
    if r == 0 || n == 0 {
        return Err(Error::dims("no signals"));
    }
    Ok(Level::new(signals.norm_squared() / ((n * r) as f64 * measurement_var)))
}

/// `Σ_τ r̂²_{τ,k} / (R σ_v²)` for every graph frequency `k`.
pub fn average_snr_per_frequency(signals: &Matrix, basis: &SpectralBasis, measurement_var: f64) -> Result<Vec<Level>> {
    if measurement_var <= 0.0 {
        return Err(Error::ZeroNoise);
    }
    if signals.ncols() != basis.node_count() {
        return Err(Error::dims("signal width differs from node count"));
    }
    let r = signals.nrows() as f64;
    let spectra = signals * &basis.u;
    Ok(spectra.column_iter().map(|c| Level::new(c.norm_squared() / (r * measurement_var))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_graph::{grid_graph, ShiftKind};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn nmse_cases() {
        let truth = vec![Vector::from_vec(vec![1.0, 2.0]), Vector::from_vec(vec![-2.0, 0.5])];
        assert_eq!(nmse(&truth, &truth).unwrap().linear, 0.0);
        let zeros = vec![Vector::zeros(2); 2];
        let l = nmse(&zeros, &truth).unwrap();
        assert_eq!(l.linear, 1.0);
        assert_eq!(l.db, 0.0);
        let energy: f64 = truth.iter().map(|v| v.norm_squared()).sum();
        let e = Vector::from_vec(vec![1.0, 0.0]) * (0.01 * energy).sqrt();
        let noisy = vec![&truth[0] + e, truth[1].clone()];
        let l = nmse(&noisy, &truth).unwrap();
        assert_relative_eq!(l.linear, 0.01, epsilon = 1e-12);
        assert_relative_eq!(l.db, -20.0, epsilon = 1e-9);
        assert!(matches!(nmse(&truth, &zeros), Err(Error::ZeroReference)));
    }

    #[test]
    fn snr_cases() {
        let s = Matrix::from_element(4, 5, 0.3);
        assert_relative_eq!(average_snr(&s, 0.09).unwrap().db, 0.0, epsilon = 1e-12);
        let base = average_snr(&s, 0.5).unwrap().db;
        assert_relative_eq!(average_snr(&(s * 10.0), 0.5).unwrap().db, base + 20.0, epsilon = 1e-9);
        assert!(matches!(average_snr(&Matrix::zeros(1, 1), 0.0), Err(Error::ZeroNoise)));
    }

    #[test]
    fn white_signals_snr_near_zero_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Matrix::from_fn(2000, 12, |_, _| StandardNormal.sample(&mut rng));
        assert!(average_snr(&s, 1.0).unwrap().db.abs() < 0.1);
        let b = SpectralBasis::of_graph(&grid_graph(3, 4).unwrap(), ShiftKind::Laplacian).unwrap();
        let per = average_snr_per_frequency(&s, &b, 1.0).unwrap();
        assert_eq!(per.len(), 12);
        assert!(per.iter().all(|l| l.db.abs() < 0.5));
    }
}
