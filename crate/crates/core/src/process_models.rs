//! State-space processes on graphs reduced to their in-band spectral form.
//!
//! A model carries the spectral state dimension `d` (the bandwidth `|F|`, or
//! `2|F|` for the wave model whose state stacks two time steps), the
//! per-step `d x d` transition and input matrices, and the `N x d` output map
//! that takes a spectral state to the node signal that gets measured. For
//! every model except the wave equation the output map is `U_F` and the
//! transition is diagonal.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};
use crate::observability::SamplingSchedule;
use crate::spectral_graph::{band_selector, FrequencySet, ShiftKind, SpectralBasis, VertexSet};

const DIAGONAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion { rate: f64 },
    Wave { speed: f64 },
    Arma1 { rate: f64 },
    Custom,
}

/// Matrices indexed by time step. A per-step list keeps applying its last
/// entry past its end.
#[derive(Debug, Clone, PartialEq)]
pub enum StepMatrices {
    Constant(Matrix),
    PerStep(Vec<Matrix>),
}

impl StepMatrices {
    pub fn at(&self, t: usize) -> &Matrix {
        match self {
            StepMatrices::Constant(m) => m,
            StepMatrices::PerStep(v) => &v[t.min(v.len() - 1)],
        }
    }

    fn all(&self) -> Vec<&Matrix> {
        match self {
            StepMatrices::Constant(m) => vec![m],
            StepMatrices::PerStep(v) => v.iter().collect(),
        }
    }
}

/// Noise levels: spectral process covariance `Σ_w̃` (`|F| x |F|`) and the
/// per-node measurement variance `σ_v²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub process_cov: Matrix,
    pub measurement_var: f64,
}

impl NoiseSpec {
    pub fn new(process_cov: Matrix, measurement_var: f64) -> Self {
        Self { process_cov, measurement_var }
    }

    /// `Σ_w = scale I_N`, whose in-band reduction is `scale I_|F|`.
    pub fn isotropic(bandwidth: usize, process_scale: f64, measurement_var: f64) -> Self {
        Self::new(Matrix::identity(bandwidth, bandwidth) * process_scale, measurement_var)
    }

    /// Reduces a vertex-domain process covariance: `Σ_w̃ = U_Fᵀ Σ_w U_F`.
    pub fn from_vertex_cov(basis: &SpectralBasis, freqs: &FrequencySet, vertex_cov: &Matrix, measurement_var: f64) -> Result<Self> {
        let uf = band_selector(basis, freqs)?;
        if vertex_cov.shape() != (uf.nrows(), uf.nrows()) {
            return Err(Error::dims("vertex covariance must be N x N"));
        }
        Ok(Self::new(numerics::symmetrize(&(uf.transpose() * vertex_cov * &uf)), measurement_var))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandlimitedModel {
    basis: SpectralBasis,
    freqs: FrequencySet,
    kind: ModelKind,
    transition: StepMatrices,
    input: StepMatrices,
    process_cov: Matrix,
    measurement_var: f64,
    output: Matrix,
}

impl BandlimitedModel {
    /// Generic in-band model. Transition and input matrices must be diagonal
    /// `|F| x |F|`.
    pub fn from_parts(
        basis: SpectralBasis,
        freqs: FrequencySet,
        transition: StepMatrices,
        input: StepMatrices,
        noise: NoiseSpec,
    ) -> Result<Self> {
        let d = freqs.len();
        for m in transition.all().into_iter().chain(input.all()) {
            if m.shape() != (d, d) {
                return Err(Error::dims(format!("expected {d}x{d} step matrix, got {:?}", m.shape())));
            }
            numerics::ensure_finite(m)?;
            let off = m.iter().enumerate().filter(|(k, _)| k % d != k / d).map(|(_, x)| x.abs()).fold(0.0, f64::max);
            if off > DIAGONAL_TOL {
                return Err(Error::InvalidParameter(format!("step matrix not diagonal (off-diagonal {off:.2e})")));
            }
        }
        if matches!(&transition, StepMatrices::PerStep(v) if v.is_empty()) || matches!(&input, StepMatrices::PerStep(v) if v.is_empty()) {
            return Err(Error::InvalidParameter("empty per-step matrix list".into()));
        }
        let output = band_selector(&basis, &freqs)?;
        Self::assemble(basis, freqs, ModelKind::Custom, transition, input, noise.process_cov, noise.measurement_var, output)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        basis: SpectralBasis,
        freqs: FrequencySet,
        kind: ModelKind,
        transition: StepMatrices,
        input: StepMatrices,
        process_cov: Matrix,
        measurement_var: f64,
        output: Matrix,
    ) -> Result<Self> {
        let d = output.ncols();
        if !(measurement_var > 0.0 && measurement_var.is_finite()) {
            return Err(Error::ZeroNoise);
        }
        if process_cov.shape() != (d, d) {
            return Err(Error::dims(format!("process covariance must be {d}x{d}")));
        }
        numerics::ensure_symmetric(&process_cov)?;
        numerics::ensure_psd(&process_cov, 1e-10)?;
        Ok(Self {
            basis,
            freqs,
            kind,
            transition,
            input,
            process_cov,
            measurement_var,
            output,
        })
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn freqs(&self) -> &FrequencySet {
        &self.freqs
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.output.nrows()
    }

    /// Dimension of the spectral state: `|F|`, or `2|F|` for the wave model.
    pub fn state_dim(&self) -> usize {
        self.output.ncols()
    }

    /// Maps a spectral state to the measured node signal (`U_F` except for
    /// the wave model).
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// `Ã_t`.
    pub fn transition(&self, t: usize) -> &Matrix {
        self.transition.at(t)
    }

    /// `B̃_t`.
    pub fn input(&self, t: usize) -> &Matrix {
        self.input.at(t)
    }

    pub fn transition_steps(&self) -> &StepMatrices {
        &self.transition
    }

    pub fn input_steps(&self) -> &StepMatrices {
        &self.input
    }

    /// `Σ_w̃` acting on the full state.
    pub fn process_cov(&self) -> &Matrix {
        &self.process_cov
    }

    pub fn measurement_var(&self) -> f64 {
        self.measurement_var
    }

    pub fn is_time_invariant(&self) -> bool {
        let same = |s: &StepMatrices| match s {
            StepMatrices::Constant(_) => true,
            StepMatrices::PerStep(v) => v.windows(2).all(|w| w[0] == w[1]),
        };
        same(&self.transition) && same(&self.input)
    }

    /// Same model with other noise levels.
    pub fn with_noise(&self, noise: NoiseSpec) -> Result<Self> {
        let process_cov = match self.kind {
            ModelKind::Wave { .. } => wave_block_diag(&noise.process_cov),
            _ => noise.process_cov,
        };
        Self::assemble(
            self.basis.clone(),
            self.freqs.clone(),
            self.kind,
            self.transition.clone(),
            self.input.clone(),
            process_cov,
            noise.measurement_var,
            self.output.clone(),
        )
    }

    /// Out-of-band projector `I - U_F U_Fᵀ`.
    pub fn out_of_band_projector(&self) -> Result<Matrix> {
        let uf = band_selector(&self.basis, &self.freqs)?;
        let n = uf.nrows();
        Ok(Matrix::identity(n, n) - &uf * uf.transpose())
    }

    pub fn to_spec(&self) -> ModelSpec {
        let encode = |s: &StepMatrices| -> StepSpec {
            let mats = s.all();
            if mats.iter().all(|m| is_diagonal(m)) {
                StepSpec::Diagonal(mats.iter().map(|m| m.diagonal().iter().copied().collect()).collect())
            } else {
                StepSpec::Dense(mats.iter().map(|m| rows_of(m)).collect())
            }
        };
        ModelSpec {
            kind: self.kind,
            shift_kind: self.basis.kind,
            freqs: self.freqs.clone(),
            transition: encode(&self.transition),
            input: encode(&self.input),
            process_noise_cov: rows_of(&self.process_cov),
            measurement_noise_var: self.measurement_var,
        }
    }

    /// Rebuilds a model from its JSON form and the graph basis it lives on.
    pub fn from_spec(spec: &ModelSpec, basis: SpectralBasis) -> Result<Self> {
        if spec.shift_kind != basis.kind {
            return Err(Error::InvalidParameter("shift kind does not match basis".into()));
        }
        let noise_band = |cov: &Matrix| -> Matrix {
            match spec.kind {
                ModelKind::Wave { .. } => {
                    let f = cov.nrows() / 2;
                    cov.view((f, f), (f, f)).into_owned()
                }
                _ => cov.clone(),
            }
        };
        let cov = matrix_from_rows(&spec.process_noise_cov)?;
        let noise = NoiseSpec::new(noise_band(&cov), spec.measurement_noise_var);
        let freqs = spec.freqs.clone();
        match spec.kind {
            ModelKind::Diffusion { rate } => diffusion_model(&basis, rate, &freqs, noise),
            ModelKind::Wave { speed } => wave_model(&basis, speed, &freqs, noise),
            ModelKind::Arma1 { rate } => arma1_model(&basis, rate, &freqs, noise),
            ModelKind::Custom => {
                let decode = |s: &StepSpec| -> Result<StepMatrices> {
                    let mats: Vec<Matrix> = match s {
                        StepSpec::Diagonal(d) => d.iter().map(|v| Matrix::from_diagonal(&Vector::from_vec(v.clone()))).collect(),
                        StepSpec::Dense(d) => d.iter().map(|m| matrix_from_rows(m)).collect::<Result<_>>()?,
                    };
                    Ok(if mats.len() == 1 {
                        StepMatrices::Constant(mats.into_iter().next().unwrap())
                    } else {
                        StepMatrices::PerStep(mats)
                    })
                };
                Self::from_parts(basis, freqs, decode(&spec.transition)?, decode(&spec.input)?, noise)
            }
        }
    }
}

fn is_diagonal(m: &Matrix) -> bool {
    let d = m.nrows();
    m.iter().enumerate().all(|(k, x)| k % d == k / d || *x == 0.0)
}

pub(crate) fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::dims("ragged matrix rows"));
    }
    Ok(Matrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

/// JSON form of a model; the basis itself is rebuilt from the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub shift_kind: ShiftKind,
    pub freqs: FrequencySet,
    pub transition: StepSpec,
    pub input: StepSpec,
    pub process_noise_cov: Vec<Vec<f64>>,
    pub measurement_noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSpec {
    /// Diagonal entries, one list per step.
    Diagonal(Vec<Vec<f64>>),
    /// Full matrices (row-major), one per step.
    Dense(Vec<Vec<Vec<f64>>>),
}

fn check_psd_shift(basis: &SpectralBasis) -> Result<()> {
    let min = basis.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let max = basis.lambda.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    if min < -1e-9 * max.max(1.0) {
        return Err(Error::NonPsd { min_eigenvalue: min });
    }
    Ok(())
}

fn in_band_diag(basis: &SpectralBasis, freqs: &FrequencySet, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let n = basis.node_count();
    if let Some(&bad) = freqs.indices().iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, size: n });
    }
    Ok(Matrix::from_diagonal(&Vector::from_iterator(
        freqs.len(),
        freqs.indices().iter().map(|&i| f(basis.lambda[i])),
    )))
}

/// Heat diffusion `x_t = e^{-w L} x_{t-1}`: `Ã = diag(e^{-w λ_i})`, `B̃ = I`.
pub fn diffusion_model(basis: &SpectralBasis, rate: f64, freqs: &FrequencySet, noise: NoiseSpec) -> Result<BandlimitedModel> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("diffusion rate must be positive, got {rate}")));
    }
    check_psd_shift(basis)?;
    let a = in_band_diag(basis, freqs, |l| (-rate * l).exp())?;
    let d = freqs.len();
    BandlimitedModel::assemble(
        basis.clone(),
        freqs.clone(),
        ModelKind::Diffusion { rate },
        StepMatrices::Constant(a),
        StepMatrices::Constant(Matrix::identity(d, d)),
        noise.process_cov,
        noise.measurement_var,
        band_selector(basis, freqs)?,
    )
}

fn wave_block_diag(cov: &Matrix) -> Matrix {
    let f = cov.nrows();
    let mut out = Matrix::zeros(2 * f, 2 * f);
    out.view_mut((f, f), (f, f)).copy_from(cov);
    out
}

/// Discretized wave equation `w_t = (2I - c²L) w_{t-1} - w_{t-2}` with the
/// stacked spectral state `[w̃_{t-1}; w̃_t]`. Measurements see `w_t`; noise and
/// inputs enter the `w_t` block.
pub fn wave_model(basis: &SpectralBasis, speed: f64, freqs: &FrequencySet, noise: NoiseSpec) -> Result<BandlimitedModel> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::InvalidParameter(format!("wave speed must be positive, got {speed}")));
    }
    check_psd_shift(basis)?;
    let f = freqs.len();
    let center = in_band_diag(basis, freqs, |l| 2.0 - speed * speed * l)?;
    let mut a = Matrix::zeros(2 * f, 2 * f);
    a.view_mut((0, f), (f, f)).fill_with_identity();
    a.view_mut((f, 0), (f, f)).copy_from(&(-Matrix::identity(f, f)));
    a.view_mut((f, f), (f, f)).copy_from(&center);
    let b = wave_block_diag(&Matrix::identity(f, f));
    if noise.process_cov.shape() != (f, f) {
        return Err(Error::dims(format!("process covariance must be {f}x{f}")));
    }
    let uf = band_selector(basis, freqs)?;
    let mut output = Matrix::zeros(uf.nrows(), 2 * f);
    output.view_mut((0, f), uf.shape()).copy_from(&uf);
    BandlimitedModel::assemble(
        basis.clone(),
        freqs.clone(),
        ModelKind::Wave { speed },
        StepMatrices::Constant(a),
        StepMatrices::Constant(b),
        wave_block_diag(&noise.process_cov),
        noise.measurement_var,
        output,
    )
}

/// Stacked wave state for `w̃_{-1} = 0` and the given `w̃_0`.
pub fn wave_initial_state(w0: &Vector) -> Vector {
    let f = w0.len();
    let mut x = Vector::zeros(2 * f);
    x.rows_mut(f, f).copy_from(w0);
    x
}

/// First-order ARMA recursion `x_t = -w S x_{t-1} + u`: `Ã = diag(-w λ_i)`.
pub fn arma1_model(basis: &SpectralBasis, rate: f64, freqs: &FrequencySet, noise: NoiseSpec) -> Result<BandlimitedModel> {
    if !rate.is_finite() {
        return Err(Error::NonFinite);
    }
    let lmax = basis.lambda.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    if !(rate > 0.0 && rate * lmax < 1.0) {
        log::warn!("ARMA rate {rate} outside (0, 1/lambda_max = {}): recursion need not converge", 1.0 / lmax);
    }
    let a = in_band_diag(basis, freqs, |l| -rate * l)?;
    let d = freqs.len();
    BandlimitedModel::assemble(
        basis.clone(),
        freqs.clone(),
        ModelKind::Arma1 { rate },
        StepMatrices::Constant(a),
        StepMatrices::Constant(Matrix::identity(d, d)),
        noise.process_cov,
        noise.measurement_var,
        band_selector(basis, freqs)?,
    )
}

/// `Ã_{t,τ}`: `Ã_{t-1}···Ã_τ` for `t > τ`, identity for `t = τ`, zero for
/// `t < τ`.
pub fn transition_product(m: &BandlimitedModel, t: usize, tau: usize) -> Matrix {
    let d = m.state_dim();
    if t < tau {
        return Matrix::zeros(d, d);
    }
    let mut acc = Matrix::identity(d, d);
    for s in tau..t {
        acc = m.transition(s) * acc;
    }
    acc
}

/// `[Ã_{0,0}; Ã_{1,0}; …; Ã_{T,0}]` as a list.
pub fn transition_products_from_zero(m: &BandlimitedModel, horizon: usize) -> Vec<Matrix> {
    let d = m.state_dim();
    let mut out = Vec::with_capacity(horizon + 1);
    let mut acc = Matrix::identity(d, d);
    out.push(acc.clone());
    for t in 0..horizon {
        acc = m.transition(t) * acc;
        out.push(acc.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationOptions {
    pub process_noise: bool,
    pub measurement_noise: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            process_noise: true,
            measurement_noise: true,
        }
    }
}

impl SimulationOptions {
    pub fn noiseless() -> Self {
        Self {
            process_noise: false,
            measurement_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Node signals `x_t` (the measured component for the wave model).
    pub states: Vec<Vector>,
    pub spectral_states: Vec<Vector>,
    /// `y_t`, zero off the sampling set.
    pub measurements: Vec<Vector>,
    pub schedule: Vec<VertexSet>,
}

pub(crate) fn standard_normal_vector(n: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Simulates `x̃_t = Ã_{t-1} x̃_{t-1} + B̃_{t-1} ũ_{t-1} (+ w̃_{t-1})` and
/// `y_t = C_{S_t}(Φ x̃_t + v_t)` for `t = 0..=horizon`.
///
/// `inputs` is either empty (no input) or holds `ũ_0..ũ_{T-1}`. All
/// randomness comes from `rng`, drawn in a fixed order: process noise for
/// step `t` (when enabled), then `N` measurement-noise samples for every
/// step whether or not nodes are sampled.
pub fn simulate(
    m: &BandlimitedModel,
    x0: &Vector,
    inputs: &[Vector],
    horizon: usize,
    schedule: &[VertexSet],
    options: SimulationOptions,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let d = m.state_dim();
    let n = m.node_count();
    if x0.len() != d {
        return Err(Error::dims(format!("initial state has length {}, expected {d}", x0.len())));
    }
    if !inputs.is_empty() && inputs.len() != horizon {
        return Err(Error::dims(format!("expected {horizon} inputs, got {}", inputs.len())));
    }
    if inputs.iter().any(|u| u.len() != d) {
        return Err(Error::dims(format!("inputs must have length {d}")));
    }
    if schedule.len() != horizon + 1 {
        return Err(Error::BadSchedule(format!(
            "schedule has {} steps, horizon {horizon} needs {}",
            schedule.len(),
            horizon + 1
        )));
    }
    if let Some(s) = schedule.iter().find(|s| s.bound() > n) {
        return Err(Error::IndexOutOfRange { index: s.bound() - 1, size: n });
    }
    let noise_factor = if options.process_noise && m.process_cov().norm() > 0.0 {
        Some(numerics::psd_sqrt(m.process_cov())?)
    } else {
        None
    };
    let sigma_v = m.measurement_var().sqrt();

    let mut spectral_states = Vec::with_capacity(horizon + 1);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut measurements = Vec::with_capacity(horizon + 1);
    let mut x = x0.clone();
    for (t, set) in schedule.iter().enumerate() {
        if t > 0 {
            let mut next = m.transition(t - 1) * &x;
            if let Some(u) = inputs.get(t - 1) {
                next += m.input(t - 1) * u;
            }
            if let Some(l) = &noise_factor {
                next += l * standard_normal_vector(d, rng);
            }
            x = next;
        }
        let signal = m.output() * &x;
        let noise = if options.measurement_noise {
            standard_normal_vector(n, rng) * sigma_v
        } else {
            Vector::zeros(n)
        };
        let mut y = Vector::zeros(n);
        for &i in set.indices() {
            y[i] = signal[i] + noise[i];
        }
        measurements.push(y);
        states.push(signal);
        spectral_states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        spectral_states,
        measurements,
        schedule: schedule.to_vec(),
    })
}

/// Realizes `schedule` over `horizon` steps and simulates.
pub fn simulate_schedule(
    m: &BandlimitedModel,
    x0: &Vector,
    inputs: &[Vector],
    horizon: usize,
    schedule: &SamplingSchedule,
    options: SimulationOptions,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let sets = schedule.realize(horizon, m.node_count(), rng)?;
    simulate(m, x0, inputs, horizon, &sets, options, rng)
}
