//! Graph-time observability: the stacked observability operator, rank and
//! norm diagnostics, least-squares recovery of the initial spectral state and
//! the closed-form MSE expressions for deterministic and Bernoulli sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};
use crate::process_models::{transition_products_from_zero, BandlimitedModel};
use crate::spectral_graph::{band_selector, VertexSet};

/// Default relative cutoff on Gram eigenvalues when deciding rank.
pub const GRAM_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingSchedule {
    /// `S_0..S_T`.
    Deterministic { sets: Vec<VertexSet> },
    /// Per-node sampling probabilities, i.i.d. over time.
    Bernoulli { probabilities: Vec<f64> },
}

impl SamplingSchedule {
    pub fn deterministic(sets: Vec<VertexSet>) -> Self {
        SamplingSchedule::Deterministic { sets }
    }

    pub fn constant(set: VertexSet, horizon: usize) -> Self {
        SamplingSchedule::Deterministic {
            sets: vec![set; horizon + 1],
        }
    }

    pub fn bernoulli(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("sampling probabilities must lie in [0, 1]".into()));
        }
        Ok(SamplingSchedule::Bernoulli { probabilities })
    }

    /// Concrete sampling sets for `t = 0..=horizon`.
    pub fn realize(&self, horizon: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<VertexSet>> {
        match self {
            SamplingSchedule::Deterministic { sets } => {
                if sets.len() != horizon + 1 {
                    return Err(Error::BadSchedule(format!("{} sets for horizon {horizon}", sets.len())));
                }
                Ok(sets.clone())
            }
            SamplingSchedule::Bernoulli { probabilities } => {
                if probabilities.len() != n {
                    return Err(Error::dims(format!("{} probabilities for {n} nodes", probabilities.len())));
                }
                Ok((0..=horizon)
                    .map(|_| {
                        let picked = probabilities
                            .iter()
                            .enumerate()
                            .filter(|(_, &p)| rng.random::<f64>() < p)
                            .map(|(i, _)| i)
                            .collect();
                        VertexSet::new(picked, n).expect("indices are in range")
                    })
                    .collect())
            }
        }
    }

    pub fn sets(&self) -> Option<&[VertexSet]> {
        match self {
            SamplingSchedule::Deterministic { sets } => Some(sets),
            SamplingSchedule::Bernoulli { .. } => None,
        }
    }
}

/// `|S_{0:T}|`.
pub fn sample_count(sets: &[VertexSet]) -> usize {
    sets.iter().map(VertexSet::len).sum()
}

fn check_schedule(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize) -> Result<()> {
    if sets.len() != horizon + 1 {
        return Err(Error::dims(format!("schedule has {} steps, horizon {horizon} needs {}", sets.len(), horizon + 1)));
    }
    let n = m.node_count();
    if let Some(s) = sets.iter().find(|s| s.bound() > n) {
        return Err(Error::IndexOutOfRange { index: s.bound() - 1, size: n });
    }
    Ok(())
}

/// Stacked `C_{S_t} Φ Ã_{t,0}` blocks, `N(T+1) x d`.
pub fn observability_matrix(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize) -> Result<Matrix> {
    check_schedule(m, sets, horizon)?;
    let n = m.node_count();
    let d = m.state_dim();
    let products = transition_products_from_zero(m, horizon);
    let mut o = Matrix::zeros(n * (horizon + 1), d);
    for (t, (set, a)) in sets.iter().zip(&products).enumerate() {
        let block = m.output() * a;
        for &i in set.indices() {
            o.row_mut(t * n + i).copy_from(&block.row(i));
        }
    }
    Ok(o)
}

/// `Σ_t Ã_{t,0}ᵀ Φᵀ C̄ Φ Ã_{t,0}` for a per-node weight vector `c̄`.
pub(crate) fn weighted_gram(m: &BandlimitedModel, weights: &[f64], horizon: usize) -> Matrix {
    let d = m.state_dim();
    let mut weighted_output = m.output().clone();
    for (i, mut row) in weighted_output.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let inner = m.output().transpose() * weighted_output;
    let mut g = Matrix::zeros(d, d);
    for a in transition_products_from_zero(m, horizon) {
        g += a.transpose() * &inner * a;
    }
    numerics::symmetrize(&g)
}

/// Gram matrix `O_{0:T}ᵀ O_{0:T}` assembled block by block.
pub fn observability_gram(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize) -> Result<Matrix> {
    check_schedule(m, sets, horizon)?;
    let d = m.state_dim();
    let mut g = Matrix::zeros(d, d);
    for (set, a) in sets.iter().zip(transition_products_from_zero(m, horizon)) {
        let rows = m.output().select_rows(set.indices()) * a;
        g += rows.transpose() * rows;
    }
    Ok(numerics::symmetrize(&g))
}

fn gram_rank(gram: &Matrix, rtol: f64) -> Result<(usize, Vector)> {
    let values = numerics::sym_eigenvalues(gram)?;
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok((0, values));
    }
    let rank = values.iter().filter(|&&v| v > rtol * max).count();
    Ok((rank, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub rank: usize,
    pub bandwidth: usize,
    pub sample_count: usize,
    /// `‖C_{S^c_{0:T}} (I ⊗ U_F)‖`.
    pub unsampled_leakage: f64,
    /// `s²_min(Ã_{0:T}) / s²_max(Ã_{0:T})`.
    pub excitation_ratio: f64,
    /// Condition number of `O_{0:T}` (infinite when rank deficient).
    pub condition_number: f64,
    /// Least-squares MSE `σ² tr(Gram⁻¹)` at the model's noise level, when the Gram is invertible.
    pub theoretical_mse: Option<f64>,
    /// `|S_{0:T}| < bandwidth`: observability is impossible.
    pub necessary_count_violated: bool,
}

impl ObservabilityReport {
    pub fn observable(&self) -> bool {
        self.rank == self.bandwidth
    }

    pub fn sufficient_condition_holds(&self) -> bool {
        self.unsampled_leakage < self.excitation_ratio
    }
}

pub fn observability_test(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize) -> Result<ObservabilityReport> {
    observability_test_with(m, sets, horizon, GRAM_RTOL)
}

pub fn observability_test_with(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize, rtol: f64) -> Result<ObservabilityReport> {
    let gram = observability_gram(m, sets, horizon)?;
    let d = m.state_dim();
    let (rank, values) = gram_rank(&gram, rtol)?;
    let min = values[0].max(0.0);
    let max = values[d - 1].max(0.0);
    let condition_number = if rank == d && min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
    let theoretical_mse = if rank == d {
        numerics::spd_inverse(&gram).map(|inv| m.measurement_var() * inv.trace())
    } else {
        None
    };

    // the block-diagonal norm is the largest per-step norm
    let uf = band_selector(m.basis(), m.freqs())?;
    let n = m.node_count();
    let mut unsampled_leakage: f64 = 0.0;
    for set in sets {
        let comp = set.complement(n);
        if comp.is_empty() {
            continue;
        }
        unsampled_leakage = unsampled_leakage.max(numerics::spectral_norm(&uf.select_rows(comp.indices()))?);
    }

    let mut stacked = Matrix::zeros(d, d);
    for a in transition_products_from_zero(m, horizon) {
        stacked += a.transpose() * a;
    }
    let s = numerics::sym_eigenvalues(&numerics::symmetrize(&stacked))?;
    let excitation_ratio = if s[d - 1] > 0.0 { (s[0] / s[d - 1]).max(0.0) } else { 0.0 };

    let sample_count = sample_count(sets);
    Ok(ObservabilityReport {
        rank,
        bandwidth: d,
        sample_count,
        unsampled_leakage,
        excitation_ratio,
        condition_number,
        theoretical_mse,
        necessary_count_violated: sample_count < d,
    })
}

/// Stacked noiseless input contribution `J_{0:T} u_{0:T-1}`, by forward
/// recursion.
pub fn input_response(m: &BandlimitedModel, inputs: &[Vector], sets: &[VertexSet], horizon: usize) -> Result<Vector> {
    check_schedule(m, sets, horizon)?;
    let d = m.state_dim();
    let n = m.node_count();
    if inputs.len() != horizon {
        return Err(Error::dims(format!("expected {horizon} inputs, got {}", inputs.len())));
    }
    if inputs.iter().any(|u| u.len() != d) {
        return Err(Error::dims(format!("inputs must have length {d}")));
    }
    let mut out = Vector::zeros(n * (horizon + 1));
    let mut state = Vector::zeros(d);
    for (t, set) in sets.iter().enumerate() {
        if t > 0 {
            state = m.transition(t - 1) * &state + m.input(t - 1) * &inputs[t - 1];
        }
        if set.is_empty() {
            continue;
        }
        let signal = m.output() * &state;
        for &i in set.indices() {
            out[t * n + i] = signal[i];
        }
    }
    Ok(out)
}

/// Stacks `y_0..y_T` into one vector.
pub fn stack_measurements(ys: &[Vector]) -> Vector {
    let len = ys.iter().map(|y| y.len()).sum();
    Vector::from_iterator(len, ys.iter().flat_map(|y| y.iter().copied()))
}

/// Least-squares observer with the pseudoinverse of `O_{0:T}` cached, for
/// repeated recoveries under one schedule.
#[derive(Debug, Clone)]
pub struct LsObserver {
    pinv: Matrix,
    sets: Vec<VertexSet>,
    horizon: usize,
}

impl LsObserver {
    pub fn new(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize, rtol: f64) -> Result<Self> {
        let report = observability_test_with(m, sets, horizon, rtol)?;
        if !report.observable() {
            return Err(Error::NotObservable {
                rank: report.rank,
                bandwidth: report.bandwidth,
            });
        }
        let o = observability_matrix(m, sets, horizon)?;
        Ok(Self {
            pinv: numerics::pseudo_inverse_default(&o)?,
            sets: sets.to_vec(),
            horizon,
        })
    }

    /// `O† (y_{0:T} - J u)`.
    pub fn recover(&self, m: &BandlimitedModel, ys: &[Vector], inputs: &[Vector]) -> Result<Vector> {
        if ys.len() != self.horizon + 1 || ys.iter().any(|y| y.len() != m.node_count()) {
            return Err(Error::dims("measurements must be T+1 vectors of length N"));
        }
        let mut z = stack_measurements(ys);
        if !inputs.is_empty() {
            z -= input_response(m, inputs, &self.sets, self.horizon)?;
        }
        Ok(&self.pinv * z)
    }
}

/// Least-squares estimate of `x̃_0` from `y_0..y_T`; `inputs` may be empty.
pub fn ls_observe(
    ys: &[Vector],
    inputs: &[Vector],
    m: &BandlimitedModel,
    sets: &[VertexSet],
    horizon: usize,
    rtol: f64,
) -> Result<Vector> {
    LsObserver::new(m, sets, horizon, rtol)?.recover(m, ys, inputs)
}

/// `σ_v² tr[(O_{0:T}ᵀ O_{0:T})⁻¹]`.
pub fn mse_deterministic(m: &BandlimitedModel, sets: &[VertexSet], horizon: usize, measurement_var: f64) -> Result<f64> {
    let gram = observability_gram(m, sets, horizon)?;
    let (rank, _) = gram_rank(&gram, GRAM_RTOL)?;
    let d = m.state_dim();
    if rank < d {
        return Err(Error::NotObservable { rank, bandwidth: d });
    }
    let inv = numerics::spd_inverse(&gram).ok_or(Error::NotObservable { rank, bandwidth: d })?;
    Ok(measurement_var * inv.trace())
}

/// Lower bound on the LS MSE under Bernoulli sampling with rates `c̄`.
pub fn mse_lower_bound_random(m: &BandlimitedModel, rates: &[f64], horizon: usize, measurement_var: f64) -> Result<f64> {
    if rates.len() != m.node_count() {
        return Err(Error::dims(format!("{} rates for {} nodes", rates.len(), m.node_count())));
    }
    if rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("rates must lie in [0, 1]".into()));
    }
    let gram = weighted_gram(m, rates, horizon);
    let (rank, _) = gram_rank(&gram, GRAM_RTOL)?;
    if rank < m.state_dim() {
        return Err(Error::SingularExpectedGram);
    }
    let inv = numerics::spd_inverse(&gram).ok_or(Error::SingularExpectedGram)?;
    Ok(measurement_var * inv.trace())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndersamplingMethod {
    Poisson,
    Exact,
}

/// Probability that fewer than `bandwidth` graph-time samples are collected
/// over `T + 1` steps of Bernoulli sampling.
pub fn undersampling_probability(rates: &[f64], horizon: usize, bandwidth: usize, method: UndersamplingMethod) -> Result<f64> {
    if bandwidth == 0 {
        return Err(Error::InvalidParameter("bandwidth must be at least 1".into()));
    }
    if rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("rates must lie in [0, 1]".into()));
    }
    let steps = (horizon + 1) as f64;
    match method {
        UndersamplingMethod::Poisson => {
            let alpha = steps * rates.iter().sum::<f64>();
            if alpha == 0.0 {
                return Ok(1.0);
            }
            let ln_alpha = alpha.ln();
            let mut ln_fact = 0.0;
            let mut total = 0.0;
            for k in 0..bandwidth {
                if k > 0 {
                    ln_fact += (k as f64).ln();
                }
                total += (k as f64 * ln_alpha - alpha - ln_fact).exp();
            }
            Ok(total.min(1.0))
        }
        UndersamplingMethod::Exact => {
            // dp[k] = P(count = k), truncated at the bandwidth
            let mut dp = vec![0.0; bandwidth];
            dp[0] = 1.0;
            for _ in 0..=horizon {
                for &p in rates {
                    for k in (0..bandwidth).rev() {
                        let stay = dp[k] * (1.0 - p);
                        let moved_in = if k > 0 { dp[k - 1] * p } else { 0.0 };
                        dp[k] = stay + moved_in;
                    }
                }
            }
            Ok(dp.iter().sum::<f64>().clamp(0.0, 1.0))
        }
    }
}

/// `⌈|F| / (T+1)⌉`: fewest nodes with nonzero sampling probability.
pub fn necessary_count_random(bandwidth: usize, horizon: usize) -> usize {
    bandwidth.div_ceil(horizon + 1)
}
