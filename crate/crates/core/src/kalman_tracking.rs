//! Kalman filtering of bandlimited graph processes: the time-varying filter,
//! the posterior Fisher information recursion, steady-state filtering via the
//! discrete algebraic Riccati equation, and PBH detectability checks.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};
use crate::observability::observability_test;
use crate::process_models::BandlimitedModel;
use crate::spectral_graph::{band_selector, VertexSet};

/// Posterior/prior estimates and covariances after step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: usize,
    pub x_post: Vector,
    pub p_post: Matrix,
    pub x_prior: Vector,
    pub p_prior: Matrix,
    /// `d x N` gain, zero outside the sampled columns.
    pub gain: Matrix,
    /// Posterior Fisher information.
    pub fim: Matrix,
}

pub fn kf_init(x0: &Vector, p0: &Matrix, node_count: usize) -> Result<FilterState> {
    let d = x0.len();
    if p0.shape() != (d, d) {
        return Err(Error::dims(format!("initial covariance must be {d}x{d}")));
    }
    numerics::ensure_symmetric(p0)?;
    numerics::ensure_psd(p0, 1e-10)?;
    Ok(FilterState {
        t: 0,
        x_post: x0.clone(),
        p_post: p0.clone(),
        x_prior: x0.clone(),
        p_prior: p0.clone(),
        gain: Matrix::zeros(d, node_count),
        fim: numerics::spd_inverse_or_pinv(p0)?,
    })
}

fn check_step(st: &FilterState, m: &BandlimitedModel, y: &Vector, set: &VertexSet) -> Result<()> {
    let d = m.state_dim();
    let n = m.node_count();
    if st.x_post.len() != d || st.p_post.shape() != (d, d) {
        return Err(Error::dims(format!("filter state does not match state dimension {d}")));
    }
    if y.len() != n {
        return Err(Error::dims(format!("measurement has length {}, expected {n}", y.len())));
    }
    if set.bound() > n {
        return Err(Error::IndexOutOfRange { index: set.bound() - 1, size: n });
    }
    Ok(())
}

fn predict(st: &FilterState, m: &BandlimitedModel, input: Option<&Vector>) -> Result<(Vector, Matrix)> {
    let a = m.transition(st.t);
    let mut x = a * &st.x_post;
    if let Some(u) = input {
        if u.len() != m.state_dim() {
            return Err(Error::dims("input has wrong length"));
        }
        x += m.input(st.t) * u;
    }
    let p = numerics::symmetrize(&(a * &st.p_post * a.transpose() + m.process_cov()));
    Ok((x, p))
}

/// `C_S Φ`: the output map with rows off `S` zeroed.
fn sampled_output(m: &BandlimitedModel, set: &VertexSet) -> Matrix {
    let mut h = Matrix::zeros(m.node_count(), m.state_dim());
    for &i in set.indices() {
        h.row_mut(i).copy_from(&m.output().row(i));
    }
    h
}

/// Gain `P Φᵀ C_S (C_S Φ P Φᵀ C_S + σ² C_S)†` as a `d x N` matrix. The
/// bracket vanishes off `S`, so its pseudoinverse is the pseudoinverse of
/// the `|S| x |S|` block padded with zeros.
fn gain(m: &BandlimitedModel, p: &Matrix, set: &VertexSet) -> Result<Matrix> {
    let d = m.state_dim();
    let mut k = Matrix::zeros(d, m.node_count());
    if set.is_empty() {
        return Ok(k);
    }
    let h = m.output().select_rows(set.indices());
    let pht = p * h.transpose();
    let s = numerics::symmetrize(&(&h * &pht)) + Matrix::identity(set.len(), set.len()) * m.measurement_var();
    let reduced = pht * numerics::pseudo_inverse_default(&s)?;
    for (j, &i) in set.indices().iter().enumerate() {
        k.set_column(i, &reduced.column(j));
    }
    Ok(k)
}

/// One step of the time-varying filter: predict with `Ã_{t-1}`, `B̃_{t-1}`,
/// then update with the measurements `y_t` on `S_t`.
pub fn kf_step(st: &FilterState, m: &BandlimitedModel, input: Option<&Vector>, y: &Vector, set: &VertexSet) -> Result<FilterState> {
    check_step(st, m, y, set)?;
    let (x_prior, p_prior) = predict(st, m, input)?;
    let k = gain(m, &p_prior, set)?;
    let h = sampled_output(m, set);
    let mut selector = Matrix::zeros(m.node_count(), m.node_count());
    for &i in set.indices() {
        selector[(i, i)] = 1.0;
    }

    let innovation = y - &h * &x_prior;
    let x_post = &x_prior + &k * innovation;

    let kh = &k * &h;
    let p_post = &p_prior - &p_prior * kh.transpose() - &kh * &p_prior
        + &k * selector * k.transpose() * m.measurement_var()
        + &kh * &p_prior * kh.transpose();
    let fim = fim_step(&st.fim, m, st.t, set)?;
    Ok(FilterState {
        t: st.t + 1,
        x_post,
        p_post: numerics::symmetrize(&p_post),
        x_prior,
        p_prior,
        gain: k,
        fim,
    })
}

/// Same step processing the sampled nodes one scalar measurement at a time.
/// The returned gain is `P⁺ Φᵀ C_S / σ²`, which equals the batch gain.
pub fn kf_step_sequential(
    st: &FilterState,
    m: &BandlimitedModel,
    input: Option<&Vector>,
    y: &Vector,
    set: &VertexSet,
) -> Result<FilterState> {
    check_step(st, m, y, set)?;
    let (x_prior, p_prior) = predict(st, m, input)?;
    let d = m.state_dim();
    let r = m.measurement_var();
    let mut x = x_prior.clone();
    let mut p = p_prior.clone();
    for &i in set.indices() {
        let h = m.output().row(i).transpose();
        let ph = &p * &h;
        let s = h.dot(&ph) + r;
        let k = ph / s;
        x += &k * (y[i] - h.dot(&x));
        let ikh = Matrix::identity(d, d) - &k * h.transpose();
        p = numerics::symmetrize(&(&ikh * &p * ikh.transpose() + &k * k.transpose() * r));
    }
    let gain = &p * sampled_output(m, set).transpose() / r;
    let fim = fim_step(&st.fim, m, st.t, set)?;
    Ok(FilterState {
        t: st.t + 1,
        x_post: x,
        p_post: p,
        x_prior,
        p_prior,
        gain,
        fim,
    })
}

/// Posterior FIM after one step from `t_prev`:
/// `(Ã F⁻¹ Ãᵀ + Σ_w̃)⁻¹ + Φᵀ C_S Φ / σ²`.
pub fn fim_step(f_prev: &Matrix, m: &BandlimitedModel, t_prev: usize, set: &VertexSet) -> Result<Matrix> {
    Ok(fim_prior_term(f_prev, m, t_prev)? + sensor_information(m, set))
}

/// `(Ã F⁻¹ Ãᵀ + Σ_w̃)⁻¹`.
pub fn fim_prior_term(f_prev: &Matrix, m: &BandlimitedModel, t_prev: usize) -> Result<Matrix> {
    let d = m.state_dim();
    if f_prev.shape() != (d, d) {
        return Err(Error::dims(format!("FIM must be {d}x{d}")));
    }
    numerics::ensure_symmetric(f_prev)?;
    numerics::ensure_psd(f_prev, 1e-9)?;
    let a = m.transition(t_prev);
    let cov = a * numerics::spd_inverse_or_pinv(f_prev)? * a.transpose() + m.process_cov();
    numerics::spd_inverse_or_pinv(&numerics::symmetrize(&cov))
}

/// `Σ_{n∈S} φ_n φ_nᵀ / σ²`.
pub fn sensor_information(m: &BandlimitedModel, set: &VertexSet) -> Matrix {
    let h = m.output().select_rows(set.indices());
    numerics::symmetrize(&(h.transpose() * h)) / m.measurement_var()
}

/// Runs the time-varying filter over `measurements[1..]`; `sets[t]` and
/// `inputs[t-1]` drive step `t`. Returns the states for `t = 1..=T`.
pub fn kf_run(
    m: &BandlimitedModel,
    init: FilterState,
    measurements: &[Vector],
    sets: &[VertexSet],
    inputs: &[Vector],
) -> Result<Vec<FilterState>> {
    if sets.len() != measurements.len() {
        return Err(Error::dims("one sampling set per measurement"));
    }
    let mut out = Vec::with_capacity(measurements.len().saturating_sub(1));
    let mut st = init;
    for t in 1..measurements.len() {
        st = kf_step(&st, m, inputs.get(t - 1), &measurements[t], &sets[t])?;
        out.push(st.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    /// Prior (predicted) steady-state covariance `P_∞`.
    pub p_inf: Matrix,
    /// `d x N` steady-state gain.
    pub k_inf: Matrix,
    pub residual: f64,
    pub iterations: usize,
}

impl SteadyState {
    /// Posterior steady-state covariance `(I - K_∞ C_S Φ) P_∞`.
    pub fn posterior_cov(&self, m: &BandlimitedModel) -> Matrix {
        let d = m.state_dim();
        let mut kh = Matrix::zeros(d, d);
        for (i, col) in self.k_inf.column_iter().enumerate() {
            if col.iter().any(|&v| v != 0.0) {
                kh += col * m.output().row(i);
            }
        }
        numerics::symmetrize(&((Matrix::identity(d, d) - kh) * &self.p_inf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

const DIVERGENCE_NORM: f64 = 1e12;

struct Riccati<'a> {
    a: &'a Matrix,
    q: &'a Matrix,
    h: Matrix,
    r: f64,
}

impl Riccati<'_> {
    /// `Ã P Ãᵀ + Σ − Ã P Hᵀ (H P Hᵀ + σ² I)⁻¹ H P Ãᵀ`.
    fn apply(&self, p: &Matrix) -> Result<Matrix> {
        let s = self.h.nrows();
        let corrected = if s == 0 {
            p.clone()
        } else {
            let pht = p * self.h.transpose();
            let innov = numerics::symmetrize(&(&self.h * &pht)) + Matrix::identity(s, s) * self.r;
            let chol = innov.cholesky().ok_or(Error::NonFinite)?;
            let g = chol.solve(&pht.transpose());
            p - pht * g
        };
        Ok(numerics::symmetrize(&(self.a * corrected * self.a.transpose() + self.q)))
    }
}

/// Fixed-point iteration of the prediction Riccati map from `P_0 = Σ_w̃`.
pub fn solve_dare(m: &BandlimitedModel, set: &VertexSet, options: DareOptions) -> Result<SteadyState> {
    if !m.is_time_invariant() {
        return Err(Error::InvalidParameter("steady-state filtering needs a time-invariant model".into()));
    }
    if set.bound() > m.node_count() {
        return Err(Error::IndexOutOfRange { index: set.bound() - 1, size: m.node_count() });
    }
    let map = Riccati {
        a: m.transition(0),
        q: m.process_cov(),
        h: m.output().select_rows(set.indices()),
        r: m.measurement_var(),
    };
    let mut p = m.process_cov().clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        let next = map.apply(&p)?;
        iterations += 1;
        let step = (&next - &p).norm();
        p = next;
        if !p.iter().all(|x| x.is_finite()) || p.norm() > DIVERGENCE_NORM {
            return Err(Error::Divergent { iterations });
        }
        if step <= options.tol * p.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    let residual = (map.apply(&p)? - &p).norm();
    if !converged {
        return Err(Error::NotConverged { iterations, residual });
    }
    let k_inf = gain(m, &p, set)?;
    Ok(SteadyState {
        p_inf: p,
        k_inf,
        residual,
        iterations,
    })
}

/// Steady-state filter `x̃_t⁺ = (I − K_∞ C_S Φ) Ã x̃_{t−1}⁺ + K_∞ y_t` over
/// `y_1..y_T`.
pub fn ss_kf_run(m: &BandlimitedModel, steady: &SteadyState, set: &VertexSet, x0: &Vector, measurements: &[Vector]) -> Result<Vec<Vector>> {
    let d = m.state_dim();
    let n = m.node_count();
    if x0.len() != d {
        return Err(Error::dims(format!("initial estimate must have length {d}")));
    }
    if steady.k_inf.shape() != (d, n) {
        return Err(Error::dims("steady state does not match the model"));
    }
    let h = sampled_output(m, set);
    let closed = (Matrix::identity(d, d) - &steady.k_inf * &h) * m.transition(0);
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(measurements.len());
    for y in measurements {
        if y.len() != n {
            return Err(Error::dims(format!("measurement has length {}, expected {n}", y.len())));
        }
        x = &closed * &x + &steady.k_inf * y;
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCheck {
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectabilityReport {
    /// PBH result for every eigenvalue of `Ã` on or outside the unit circle.
    pub unstable_modes: Vec<ModeCheck>,
    pub detectable: bool,
    /// PBH on `(Ã, B̃)`.
    pub stabilizable: bool,
    /// PBH on `(Ã, Σ_w̃^{1/2})`.
    pub noise_stabilizable: bool,
    pub horizon: usize,
    /// Rank of the finite-horizon observability matrix with constant `S`.
    pub horizon_rank: usize,
    /// `‖U_Fᵀ C_{S^c} U_F‖`.
    pub horizon_lhs: f64,
    /// `s²_min(Ã_{0:T}) / s²_max(Ã_{0:T})`.
    pub horizon_rhs: f64,
}

const UNIT_CIRCLE_TOL: f64 = 1e-9;

fn eigenvalues(a: &Matrix) -> Vec<Complex<f64>> {
    let d = a.nrows();
    let diagonal = a.iter().enumerate().all(|(k, x)| k % d == k / d || *x == 0.0);
    if diagonal {
        a.diagonal().iter().map(|&x| Complex::new(x, 0.0)).collect()
    } else {
        a.clone().complex_eigenvalues().iter().copied().collect()
    }
}

fn complex_rank(m: &nalgebra::DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = 1e-9 * max.max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

fn to_complex(m: &Matrix) -> nalgebra::DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

/// `rank [Ã − μI; C]` for row-stacked (`observe`) or `rank [Ã − μI, C]` for
/// column-stacked pairs, over every mode with `|μ| ≥ 1`.
fn pbh(a: &Matrix, other: &Matrix, observe: bool) -> Vec<ModeCheck> {
    let d = a.nrows();
    eigenvalues(a)
        .into_iter()
        .filter(|mu| mu.norm() >= 1.0 - UNIT_CIRCLE_TOL)
        .map(|mu| {
            let shifted = to_complex(a) - nalgebra::DMatrix::<Complex<f64>>::identity(d, d) * mu;
            let c = to_complex(other);
            let stacked = if observe {
                let mut s = nalgebra::DMatrix::zeros(d + c.nrows(), d);
                s.view_mut((0, 0), (d, d)).copy_from(&shifted);
                s.view_mut((d, 0), c.shape()).copy_from(&c);
                s
            } else {
                let mut s = nalgebra::DMatrix::zeros(d, d + c.ncols());
                s.view_mut((0, 0), (d, d)).copy_from(&shifted);
                s.view_mut((0, d), c.shape()).copy_from(&c);
                s
            };
            ModeCheck {
                re: mu.re,
                im: mu.im,
                magnitude: mu.norm(),
                passes: complex_rank(&stacked) == d,
            }
        })
        .collect()
}

pub fn detectability_check(m: &BandlimitedModel, set: &VertexSet, horizon: usize) -> Result<DetectabilityReport> {
    if !m.is_time_invariant() {
        return Err(Error::InvalidParameter("detectability needs a time-invariant model".into()));
    }
    let a = m.transition(0);
    let h = m.output().select_rows(set.indices());
    let unstable_modes = pbh(a, &h, true);
    let detectable = unstable_modes.iter().all(|c| c.passes);
    let stabilizable = pbh(a, m.input(0), false).iter().all(|c| c.passes);
    let noise_stabilizable = pbh(a, &numerics::psd_sqrt(m.process_cov())?, false).iter().all(|c| c.passes);

    let sets = vec![set.clone(); horizon + 1];
    let report = observability_test(m, &sets, horizon)?;
    let uf = band_selector(m.basis(), m.freqs())?;
    let comp = set.complement(m.node_count());
    let horizon_lhs = if comp.is_empty() {
        0.0
    } else {
        let rows = uf.select_rows(comp.indices());
        numerics::spectral_norm(&(rows.transpose() * rows))?
    };
    Ok(DetectabilityReport {
        unstable_modes,
        detectable,
        stabilizable,
        noise_stabilizable,
        horizon,
        horizon_rank: report.rank,
        horizon_lhs,
        horizon_rhs: report.excitation_ratio,
    })
}
