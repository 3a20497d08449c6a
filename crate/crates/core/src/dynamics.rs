//! The three dynamics engines — online SGD, gradient flow, Langevin — plus
//! the exact generator evaluator used as a cross-check oracle.
//!
//! Online SGD runs on the unit convention with one fresh streamed noise
//! tensor per step. Gradient flow and Langevin run on the sqrt(N) convention
//! against a single fixed tensor weighted 1/sqrt(M). Both continuous engines
//! discretize by an explicit Euler step in the tangent space followed by the
//! polar retraction; the bias is O(dt) and is pinned by a convergence test.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::manifold::{
    correlation_matrix, inv_sqrt_psd, overlap_gram, polar_retract, project_tangent,
    riemannian_gradient, CorrelationMatrix, Scale, StiefelPoint, TangentVector,
};
use crate::model::{
    empirical_risk_force, grad_h0, grad_loss, grad_population_sqrtn, observation, GradMode,
    NoiseSpec, NoiseTensor, Observation, SpikedModel,
};
use crate::population::corr_rhs;
use crate::rng::{derive_seed, stream_rng, SALT_BROWNIAN, SALT_NOISE};

/// Configuration for an online SGD run. One step consumes one fresh sample,
/// so the step budget is the sample complexity M.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    /// Step size delta > 0.
    pub delta: f64,
    /// Number of steps T (= number of samples M).
    pub steps: usize,
    pub grad_mode: GradMode,
    pub noise: NoiseSpec,
    /// Snapshot stride; 0 means the default max(1, steps/2000).
    pub record_every: usize,
    /// When set, observations carry noise only (no planted signal) while the
    /// loss weights are unchanged. This is the null model of the stability
    /// checks.
    #[serde(default)]
    pub null_signal: bool,
}

impl SgdConfig {
    pub fn new(delta: f64, steps: usize) -> Self {
        Self {
            delta,
            steps,
            grad_mode: GradMode::Exact,
            noise: NoiseSpec::default(),
            record_every: 0,
            null_signal: false,
        }
    }

    fn stride(&self) -> usize {
        if self.record_every > 0 {
            self.record_every
        } else {
            (self.steps / 2000).max(1)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Configuration for gradient flow (beta = infinity) and Langevin dynamics
/// (finite beta). `m_samples` is the sample-complexity parameter M weighting
/// the noise part as 1/sqrt(M); `rescale_time` switches to the Hamiltonian
/// drift H = sqrt(M) R, which speeds the dynamics up by sqrt(M).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub beta: f64,
    pub m_samples: f64,
    pub dt: f64,
    pub horizon: f64,
    pub rescale_time: bool,
    /// Snapshot stride in steps; 0 means the default max(1, steps/2000).
    pub record_every: usize,
}

impl FlowConfig {
    pub fn gradient_flow(m_samples: f64, dt: f64, horizon: f64) -> Self {
        Self {
            beta: f64::INFINITY,
            m_samples,
            dt,
            horizon,
            rescale_time: false,
            record_every: 0,
        }
    }

    pub fn langevin(beta: f64, m_samples: f64, dt: f64, horizon: f64) -> Self {
        Self {
            beta,
            m_samples,
            dt,
            horizon,
            rescale_time: false,
            record_every: 0,
        }
    }

    pub fn steps(&self) -> usize {
        if self.dt == 0.0 {
            // a zero step size moves nothing regardless of the horizon
            return 0;
        }
        (self.horizon / self.dt).round() as usize
    }

    fn stride(&self) -> usize {
        if self.record_every > 0 {
            self.record_every
        } else {
            (self.steps() / 2000).max(1)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be non-negative, got {}",
                self.dt
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive or infinite, got {}",
                self.beta
            )));
        }
        if !(self.m_samples >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sample count M must be >= 1, got {}",
                self.m_samples
            )));
        }
        Ok(())
    }
}

/// A threshold crossing observed along a trajectory.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CrossingEvent {
    /// Row and column of the correlation entry.
    pub entry: (usize, usize),
    /// Threshold on |m_ij| that was crossed.
    pub threshold: f64,
    /// First recorded time at or beyond the threshold.
    pub time: f64,
}

/// Time-stamped record of a dynamics run: correlation matrices, Gram
/// eigenvalues, threshold crossings, and optionally the final point.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub corr: Vec<CorrelationMatrix>,
    pub gram_eigs: Vec<Vec<f64>>,
    pub events: Vec<CrossingEvent>,
    pub final_x: Option<StiefelPoint>,
}

/// Default thresholds scanned for crossing events.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.9];

impl Trajectory {
    pub(crate) fn with_capacity(cap: usize) -> Self {
        Trajectory {
            times: Vec::with_capacity(cap),
            corr: Vec::with_capacity(cap),
            gram_eigs: Vec::with_capacity(cap),
            events: Vec::new(),
            final_x: None,
        }
    }

    pub(crate) fn push(&mut self, t: f64, m: CorrelationMatrix) {
        debug_assert!(self.times.last().is_none_or(|&last| t > last));
        let gram = overlap_gram(&m);
        self.times.push(t);
        self.gram_eigs.push(gram.eigenvalues().to_vec());
        self.corr.push(m);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn r(&self) -> usize {
        self.corr.first().map_or(0, |m| m.r())
    }

    pub fn final_corr(&self) -> Option<&CorrelationMatrix> {
        self.corr.last()
    }

    /// First recorded time with |m_ij| >= threshold.
    pub fn crossing_time(&self, i: usize, j: usize, threshold: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(self.corr.iter())
            .find(|(_, m)| m.entry(i, j).abs() >= threshold)
            .map(|(&t, _)| t)
    }

    /// Scan all entries against a threshold list and record first crossings.
    pub(crate) fn detect_crossings(&mut self, thresholds: &[f64]) {
        let r = self.r();
        self.events.clear();
        for &th in thresholds {
            for i in 0..r {
                for j in 0..r {
                    if let Some(t) = self.crossing_time(i, j, th) {
                        self.events.push(CrossingEvent {
                            entry: (i, j),
                            threshold: th,
                            time: t,
                        });
                    }
                }
            }
        }
    }
}

/// Diagnostics from a single SGD step.
#[derive(Debug, Clone, Copy)]
pub struct SgdStepDiag {
    /// Frobenius deviation between the explicit projection-term route and
    /// the polar-retraction route.
    pub route_deviation: f64,
    /// Whether delta^2 ||G||_F / N^2 >= 1, i.e. the Neumann-series
    /// precondition failed. The step stays well defined; the event is
    /// counted, not fatal.
    pub neumann_violated: bool,
}

/// One online SGD step: X' = R_X(-(delta/N) grad_St L(X; Y)).
///
/// The update is computed both through the polar retraction and through the
/// explicit projection term (I + delta^2/N^2 G)^{-1/2} applied to the shifted
/// point; the two routes coincide and their numerical deviation is reported.
pub fn sgd_step(
    x: &StiefelPoint,
    y: &Observation<'_>,
    delta: f64,
    mode: GradMode,
) -> Result<(StiefelPoint, SgdStepDiag)> {
    if x.scale() != Scale::Unit {
        return Err(Error::ConventionMismatch);
    }
    let n = x.n() as f64;
    let euclid = grad_loss(x, y, mode)?;
    if euclid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss gradient"));
    }
    let grad_st = riemannian_gradient(x, &euclid)?;
    let step = grad_st.scaled(-delta / n);

    // route A: polar retraction of the tangent step
    let next = polar_retract(x, &step)?;

    // route B: explicit projection term from the Gram matrix of grad_St L
    let gram = grad_st.data().tr_mul(grad_st.data());
    let gram_scaled = gram * (delta * delta / (n * n));
    let neumann_violated = gram_scaled.norm() >= 1.0;
    let mut shifted = gram_scaled;
    for i in 0..x.r() {
        shifted[(i, i)] += 1.0;
    }
    let proj = inv_sqrt_psd(&shifted)?;
    let via_projection = (x.data() + step.data()) * proj;
    let route_deviation = (next.data() - &via_projection).norm();

    Ok((
        next,
        SgdStepDiag {
            route_deviation,
            neumann_violated,
        },
    ))
}

/// Output of an SGD run: the trajectory plus run-level diagnostics.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub trajectory: Trajectory,
    pub neumann_violations: usize,
    pub max_route_deviation: f64,
}

/// Run online SGD from X0, one fresh streamed noise tensor per step.
/// Deterministic given (config, seed).
pub fn sgd_run(
    model: &SpikedModel,
    cfg: &SgdConfig,
    x0: &StiefelPoint,
    seed: u64,
) -> Result<SgdRun> {
    cfg.validate()?;
    if x0.scale() != Scale::Unit {
        return Err(Error::ConventionMismatch);
    }
    let stride = cfg.stride();
    let noise_base = derive_seed(seed, SALT_NOISE);
    let v = model.v_unit();

    let mut trajectory = Trajectory::with_capacity(cfg.steps / stride + 2);
    trajectory.push(0.0, correlation_matrix(v, x0)?);

    let mut x = x0.clone();
    let mut neumann_violations = 0usize;
    let mut max_route_deviation = 0.0f64;
    for step in 1..=cfg.steps {
        let w = NoiseTensor::streamed(
            model.n(),
            model.p(),
            &cfg.noise,
            derive_seed(noise_base, step as u64),
        );
        let y = if cfg.null_signal {
            Observation::noise_only(&w, model)?
        } else {
            observation(&w, model)?
        };
        let (next, diag) = sgd_step(&x, &y, cfg.delta, cfg.grad_mode)?;
        if diag.neumann_violated {
            neumann_violations += 1;
        }
        max_route_deviation = max_route_deviation.max(diag.route_deviation);
        x = next;
        if step % stride == 0 || step == cfg.steps {
            trajectory.push(step as f64, correlation_matrix(v, &x)?);
        }
    }
    trajectory.detect_crossings(&DEFAULT_THRESHOLDS);
    trajectory.final_x = Some(x);
    Ok(SgdRun {
        trajectory,
        neumann_violations,
        max_route_deviation,
    })
}

/// Step-size regimes from the nonasymptotic recovery statements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// p >= 3: delta = C d0 N^{-(p-3)/2}.
    TensorP3plus,
    /// p = 2, separated SNRs: delta = C d0 sqrt(N) / log(2 eps sqrt(N) / gamma2).
    MatrixSeparated,
    /// p = 2, equal SNRs, largest eigenvalue: delta = C d0 sqrt(N) / log(log N).
    MatrixIsotropicMax,
    /// p = 2, equal SNRs, all eigenvalues: delta = C d0 sqrt(N) / log^2(N).
    MatrixIsotropicMin,
}

/// Knobs of the step-size schedules. `d0` defaults to 1/log(N), the weakest
/// natural choice for a quantity required to vanish arbitrarily slowly.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ScheduleParams {
    pub c_delta: f64,
    /// None: use 1/log(N).
    pub d0: Option<f64>,
    /// Escape target inside the p=2 separated schedule.
    pub eps: f64,
    /// Initial-scale floor inside the p=2 separated schedule.
    pub gamma2: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            c_delta: 1.0,
            d0: None,
            eps: 0.5,
            gamma2: 1.0,
        }
    }
}

/// Step size prescribed by the cited recovery statements for each regime.
pub fn step_size_schedule(
    p: u32,
    n: usize,
    regime: Regime,
    params: &ScheduleParams,
) -> Result<f64> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "need N >= 3 for the schedules, got {n}"
        )));
    }
    let nf = n as f64;
    let d0 = params.d0.unwrap_or(1.0 / nf.ln());
    let base = params.c_delta * d0;
    let delta = match regime {
        Regime::TensorP3plus => {
            if p < 3 {
                return Err(Error::InvalidRegime(format!(
                    "TensorP3plus requires p >= 3, got p={p}"
                )));
            }
            base * nf.powf(-((p as f64 - 3.0) / 2.0))
        }
        Regime::MatrixSeparated => {
            if p != 2 {
                return Err(Error::InvalidRegime(format!(
                    "MatrixSeparated requires p = 2, got p={p}"
                )));
            }
            let arg = 2.0 * params.eps * nf.sqrt() / params.gamma2;
            if arg <= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "log argument 2*eps*sqrt(N)/gamma2 = {arg} must exceed 1"
                )));
            }
            base * nf.sqrt() / arg.ln()
        }
        Regime::MatrixIsotropicMax => {
            if p != 2 {
                return Err(Error::InvalidRegime(format!(
                    "MatrixIsotropicMax requires p = 2, got p={p}"
                )));
            }
            base * nf.sqrt() / nf.ln().ln()
        }
        Regime::MatrixIsotropicMin => {
            if p != 2 {
                return Err(Error::InvalidRegime(format!(
                    "MatrixIsotropicMin requires p = 2, got p={p}"
                )));
            }
            base * nf.sqrt() / (nf.ln() * nf.ln())
        }
    };
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::NonFinite("step size"));
    }
    Ok(delta)
}

/// One explicit Euler step in the tangent space followed by retraction.
pub fn flow_step(x: &StiefelPoint, force: &TangentVector, dt: f64) -> Result<StiefelPoint> {
    polar_retract(x, &force.scaled(dt))
}

/// Run gradient flow on the empirical risk from X0 (sqrt(N) convention).
/// W = None is the noise-free population flow on the full manifold.
pub fn gradient_flow_run(
    model: &SpikedModel,
    w: Option<&NoiseTensor>,
    cfg: &FlowConfig,
    x0: &StiefelPoint,
) -> Result<Trajectory> {
    cfg.validate()?;
    if x0.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let v = model.v_sqrtn();
    let stride = cfg.stride();
    let steps = cfg.steps();

    let mut trajectory = Trajectory::with_capacity(steps / stride + 2);
    trajectory.push(0.0, correlation_matrix(&v, x0)?);
    let mut x = x0.clone();
    for step in 1..=steps {
        let force = empirical_risk_force(&x, w, model, cfg.m_samples, cfg.rescale_time)?;
        x = flow_step(&x, &force, cfg.dt)?;
        if step % stride == 0 || step == steps {
            trajectory.push(step as f64 * cfg.dt, correlation_matrix(&v, &x)?);
        }
    }
    trajectory.detect_crossings(&DEFAULT_THRESHOLDS);
    trajectory.final_x = Some(x);
    Ok(trajectory)
}

/// Run Langevin dynamics with Hamiltonian H = H0 - N sqrt(M) sum lambda
/// lambda m^p at inverse temperature beta:
/// X' = R_X(Pi_X(-beta grad H dt + sqrt(2 dt) xi)) with xi i.i.d. standard
/// normal. Dispatches to gradient flow when beta is infinite.
pub fn langevin_run(
    model: &SpikedModel,
    w: Option<&NoiseTensor>,
    cfg: &FlowConfig,
    x0: &StiefelPoint,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.beta.is_infinite() {
        // beta = infinity reduces to gradient flow with the Hamiltonian drift
        let mut flow_cfg = cfg.clone();
        flow_cfg.rescale_time = true;
        return gradient_flow_run(model, w, &flow_cfg, x0);
    }
    if x0.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let v = model.v_sqrtn();
    let stride = cfg.stride();
    let steps = cfg.steps();
    let n = model.n();
    let r = model.r();
    let mut rng = stream_rng(derive_seed(seed, SALT_BROWNIAN));

    let mut trajectory = Trajectory::with_capacity(steps / stride + 2);
    trajectory.push(0.0, correlation_matrix(&v, x0)?);
    let mut x = x0.clone();
    let sqrt_2dt = (2.0 * cfg.dt).sqrt();
    for step in 1..=steps {
        // -grad H = sqrt(M) grad Phi - grad H0
        let mut drift =
            grad_population_sqrtn(&x, &v, model.lambdas(), model.p())? * cfg.m_samples.sqrt();
        if let Some(w) = w {
            drift -= grad_h0(w, &x, model.lambdas(), GradMode::Exact);
        }
        let xi = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let increment = drift * (cfg.beta * cfg.dt) + xi * sqrt_2dt;
        let tangent = project_tangent(&x, &increment)?;
        x = polar_retract(&x, &tangent)?;
        if step % stride == 0 || step == steps {
            trajectory.push(step as f64 * cfg.dt, correlation_matrix(&v, &x)?);
        }
    }
    trajectory.detect_crossings(&DEFAULT_THRESHOLDS);
    trajectory.final_x = Some(x);
    Ok(trajectory)
}

/// Noise part of the correlation drift: the r x r matrix with entries
/// -<grad_M H0, grad m_ij> = -(1/N) (V^T Pi_X grad H0)_{ij}.
pub fn noise_generator_mij(
    x: &StiefelPoint,
    w: &NoiseTensor,
    model: &SpikedModel,
) -> Result<DMatrix<f64>> {
    if x.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let v = model.v_sqrtn();
    let euclid = grad_h0(w, x, model.lambdas(), GradMode::Exact);
    let tangent = project_tangent(x, &euclid)?;
    Ok(v.data().tr_mul(tangent.data()) * (-1.0 / model.n() as f64))
}

/// Generator of the correlations m_ij.
///
/// Finite beta gives the Langevin generator
///   L_beta m_ij = Delta_M m_ij - beta <grad_M H0, grad m_ij>
///                 + beta sqrt(M) (population drift),
/// with the closed-form Laplacian Delta_M m_ij = -((2N-r-1)/(2N)) m_ij (see
/// `bounds::laplacian_mij`). Infinite beta gives the drift of m_ij under
/// gradient flow on the empirical risk: no Laplacian, population drift at
/// unit weight, noise at 1/sqrt(M).
pub fn generator_mij(
    x: &StiefelPoint,
    w: Option<&NoiseTensor>,
    model: &SpikedModel,
    beta: f64,
    m_samples: f64,
) -> Result<DMatrix<f64>> {
    if x.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let v = model.v_sqrtn();
    let m = correlation_matrix(&v, x)?;
    let population = corr_rhs(m.data(), model.lambdas(), model.p());
    let noise = match w {
        Some(w) => Some(noise_generator_mij(x, w, model)?),
        None => None,
    };
    if beta.is_infinite() {
        let mut out = population;
        if let Some(noise) = noise {
            out += noise / m_samples.sqrt();
        }
        Ok(out)
    } else {
        let n = model.n() as f64;
        let r = model.r() as f64;
        let mut out = population * (beta * m_samples.sqrt());
        out -= m.data() * ((2.0 * n - r - 1.0) / (2.0 * n));
        if let Some(noise) = noise {
            out += noise * beta;
        }
        Ok(out)
    }
}
