//! Experiment orchestration: trial execution, parameter sweeps, threshold
//! estimation, and CSV/JSON persistence.
//!
//! Per-trial seeds derive from (master seed, cell index, trial index), never
//! from scheduling order, so parallel and serial execution produce identical
//! results and sweeps are resumable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    check_condition0_level1, check_condition1, check_condition2, detect_sequential_elimination,
    exact_recovery, greedy_max_selection, init_matrix_i0, permutation_recovery, ConditionParams,
    EliminationReport,
};
use crate::dynamics::{
    gradient_flow_run, langevin_run, sgd_run, step_size_schedule, FlowConfig, Regime,
    ScheduleParams, SgdConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::manifold::{sample_invariant, Scale};
use crate::model::{make_model, GradMode, NoiseSpec, NoiseTensor, SpikedModel};
use crate::rng::{derive_seed, stream_rng, SALT_INIT, SALT_MODEL, SALT_NOISE};

/// Model section of a trial configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    pub r: usize,
    pub p: u32,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<SpikedModel> {
        let mut rng = stream_rng(derive_seed(seed, SALT_MODEL));
        make_model(self.n, self.r, self.p, self.lambdas.clone(), &mut rng, None)
    }
}

/// Step size: fixed, or resolved from a schedule at the trial's N.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSpec {
    #[serde(default)]
    pub fixed: Option<f64>,
    #[serde(default)]
    pub regime: Option<Regime>,
    #[serde(default)]
    pub c_delta: Option<f64>,
    #[serde(default)]
    pub d0: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub gamma2: Option<f64>,
}

impl DeltaSpec {
    pub fn fixed(delta: f64) -> Self {
        Self {
            fixed: Some(delta),
            regime: None,
            c_delta: None,
            d0: None,
            eps: None,
            gamma2: None,
        }
    }

    pub fn schedule(regime: Regime) -> Self {
        Self {
            fixed: None,
            regime: Some(regime),
            c_delta: None,
            d0: None,
            eps: None,
            gamma2: None,
        }
    }

    pub fn resolve(&self, p: u32, n: usize) -> Result<f64> {
        match (self.fixed, self.regime) {
            (Some(delta), None) => Ok(delta),
            (None, Some(regime)) => {
                let defaults = ScheduleParams::default();
                let params = ScheduleParams {
                    c_delta: self.c_delta.unwrap_or(defaults.c_delta),
                    d0: self.d0,
                    eps: self.eps.unwrap_or(defaults.eps),
                    gamma2: self.gamma2.unwrap_or(defaults.gamma2),
                };
                step_size_schedule(p, n, regime, &params)
            }
            _ => Err(Error::InvalidParameter(
                "delta needs exactly one of `fixed` or `regime`".into(),
            )),
        }
    }
}

/// SGD section of a trial configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub delta: DeltaSpec,
    pub steps: usize,
    #[serde(default = "default_grad_mode")]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub record_every: usize,
    #[serde(default)]
    pub null_signal: bool,
}

fn default_grad_mode() -> GradMode {
    GradMode::Exact
}

/// Gradient-flow / Langevin section of a trial configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    /// Inverse temperature; None means gradient flow (beta = infinity).
    #[serde(default)]
    pub beta: Option<f64>,
    pub m_samples: f64,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub rescale_time: bool,
    #[serde(default)]
    pub record_every: usize,
    /// Whether a noise tensor is sampled; off gives the noise-free flow.
    #[serde(default = "default_true")]
    pub with_noise: bool,
}

fn default_true() -> bool {
    true
}

/// Dynamics selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DynamicsSpec {
    Sgd(SgdSpec),
    GradientFlow(FlowSpec),
    Langevin(FlowSpec),
}

impl DynamicsSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DynamicsSpec::Sgd(_) => "sgd",
            DynamicsSpec::GradientFlow(_) => "gradient_flow",
            DynamicsSpec::Langevin(_) => "langevin",
        }
    }

    fn flow_config(&self, spec: &FlowSpec, langevin: bool) -> FlowConfig {
        FlowConfig {
            beta: if langevin {
                spec.beta.unwrap_or(1.0)
            } else {
                f64::INFINITY
            },
            m_samples: spec.m_samples,
            dt: spec.dt,
            horizon: spec.horizon,
            rescale_time: spec.rescale_time,
            record_every: spec.record_every,
        }
    }
}

/// Recovery thresholds for the detectors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryParams {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_eps_prime")]
    pub eps_prime: f64,
}

fn default_eps() -> f64 {
    0.1
}

fn default_eps_prime() -> f64 {
    0.01
}

impl Default for RecoveryParams {
    fn default() -> Self {
        Self {
            eps: 0.1,
            eps_prime: 0.01,
        }
    }
}

/// Full configuration of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub model: ModelSpec,
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub recovery: RecoveryParams,
    #[serde(default)]
    pub conditions: ConditionParams,
    pub seed: u64,
}

/// Stable hash of a configuration (hex prefix of SHA-256 over canonical
/// JSON). Embedded in every output file for provenance.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Everything recorded about one executed trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub r: usize,
    pub p: u32,
    pub lambdas: Vec<f64>,
    pub dynamics: String,
    pub steps: usize,
    pub delta: Option<f64>,
    pub exact: bool,
    pub permutation: Option<Vec<usize>>,
    /// Sign of m_{sigma(i), i} at the final state for a recovered
    /// permutation: +1 recovered v, -1 recovered -v.
    pub permutation_signs: Option<Vec<i8>>,
    pub elimination: EliminationReport,
    /// Ordering predicted by the greedy maximum selection of I0 at the
    /// trial's initialization.
    pub greedy_prediction: Vec<(usize, usize)>,
    /// Entries in first-crossing order of |m_ij| >= 1 - eps, rows and
    /// columns deduplicated.
    pub recovery_ordering: Vec<(usize, usize)>,
    pub hitting_times: BTreeMap<String, f64>,
    pub subspace_error_final: f64,
    pub cond1_signed: bool,
    pub cond1_abs: bool,
    pub cond2: Option<bool>,
    pub cond0: Option<bool>,
    pub neumann_violations: usize,
    pub wall_seconds: f64,
}

/// Entries in first-crossing order of |m_ij| >= threshold, with each row and
/// column claimed at most once (earliest crossing wins).
pub fn recovery_ordering(traj: &Trajectory, threshold: f64) -> Vec<(usize, usize)> {
    let r = traj.r();
    let mut crossings: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..r {
        for j in 0..r {
            if let Some(t) = traj.crossing_time(i, j, threshold) {
                crossings.push((t, i, j));
            }
        }
    }
    crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut row_used = vec![false; r];
    let mut col_used = vec![false; r];
    let mut out = Vec::new();
    for (_, i, j) in crossings {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Execute one trial: build the model, run the configured dynamics, and
/// evaluate every detector on the produced trajectory.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialRecord> {
    run_trial_full(cfg).map(|(record, _)| record)
}

/// `run_trial`, also handing back the trajectory for persistence.
pub fn run_trial_full(cfg: &TrialConfig) -> Result<(TrialRecord, Trajectory)> {
    let start = Instant::now();
    let hash = config_hash(cfg);
    let model = cfg.model.build(cfg.seed)?;
    let eps = cfg.recovery.eps;

    let (trajectory, steps, delta, neumann, init_scale) = match &cfg.dynamics {
        DynamicsSpec::Sgd(spec) => {
            let delta = spec.delta.resolve(model.p(), model.n())?;
            let sgd_cfg = SgdConfig {
                delta,
                steps: spec.steps,
                grad_mode: spec.grad_mode,
                noise: cfg.model.noise,
                record_every: spec.record_every,
                null_signal: spec.null_signal,
            };
            let mut rng = stream_rng(derive_seed(cfg.seed, SALT_INIT));
            let x0 = sample_invariant(model.n(), model.r(), Scale::Unit, &mut rng)?;
            let run = sgd_run(&model, &sgd_cfg, &x0, cfg.seed)?;
            (
                run.trajectory,
                spec.steps,
                Some(delta),
                run.neumann_violations,
                Scale::Unit,
            )
        }
        DynamicsSpec::GradientFlow(spec) | DynamicsSpec::Langevin(spec) => {
            let langevin = matches!(cfg.dynamics, DynamicsSpec::Langevin(_));
            let flow_cfg = cfg.dynamics.flow_config(spec, langevin);
            let mut rng = stream_rng(derive_seed(cfg.seed, SALT_INIT));
            let x0 = sample_invariant(model.n(), model.r(), Scale::SqrtN, &mut rng)?;
            let w = if spec.with_noise {
                Some(NoiseTensor::sample(
                    model.n(),
                    model.p(),
                    &cfg.model.noise,
                    derive_seed(cfg.seed, SALT_NOISE),
                )?)
            } else {
                None
            };
            let traj = if langevin {
                langevin_run(&model, w.as_ref(), &flow_cfg, &x0, cfg.seed)?
            } else {
                gradient_flow_run(&model, w.as_ref(), &flow_cfg, &x0)?
            };
            (traj, flow_cfg.steps(), None, 0, Scale::SqrtN)
        }
    };

    let final_m = trajectory
        .final_corr()
        .ok_or_else(|| Error::InvalidParameter("empty trajectory".into()))?;
    let exact = exact_recovery(final_m, eps);
    let permutation = permutation_recovery(final_m, eps);
    let permutation_signs = permutation.as_ref().map(|sigma| {
        sigma
            .iter()
            .enumerate()
            .map(|(col, &row)| if final_m.entry(row, col) >= 0.0 { 1i8 } else { -1i8 })
            .collect()
    });
    let elimination = detect_sequential_elimination(&trajectory, eps, cfg.recovery.eps_prime)?;
    let ordering = recovery_ordering(&trajectory, 1.0 - eps);

    let m0 = &trajectory.corr[0];
    let greedy_prediction =
        greedy_max_selection(&init_matrix_i0(m0, model.lambdas(), model.p())).pairs;

    let mut hitting_times = BTreeMap::new();
    for event in &trajectory.events {
        hitting_times.insert(
            format!(
                "m_{}_{}@{}",
                event.entry.0, event.entry.1, event.threshold
            ),
            event.time,
        );
    }
    for i in 0..model.r() {
        for j in 0..model.r() {
            if let Some(t) = trajectory.crossing_time(i, j, 1.0 - eps) {
                hitting_times.insert(format!("m_{i}_{j}@1-eps"), t);
            }
        }
    }

    let subspace_error_final = {
        let gram = crate::manifold::overlap_gram(final_m);
        2.0 * (model.r() as f64 - gram.trace())
    };

    // condition flags at initialization
    let mut rng = stream_rng(derive_seed(cfg.seed, SALT_INIT));
    let x0_check = sample_invariant(model.n(), model.r(), init_scale, &mut rng)?;
    let v_check = model.v_unit().to_scale(init_scale);
    let cond1 = check_condition1(&x0_check, &v_check, &cfg.conditions)?;
    let cond2 = if model.p() >= 3 {
        Some(
            check_condition2(
                &x0_check,
                &v_check,
                model.lambdas(),
                model.p(),
                &cfg.conditions,
            )?
            .pass,
        )
    } else {
        None
    };
    let cond0 = match &cfg.dynamics {
        DynamicsSpec::GradientFlow(spec) | DynamicsSpec::Langevin(spec) if spec.with_noise => {
            let w = NoiseTensor::sample(
                model.n(),
                model.p(),
                &cfg.model.noise,
                derive_seed(cfg.seed, SALT_NOISE),
            )?;
            let x0_sqrtn = x0_check.to_scale(Scale::SqrtN);
            Some(
                check_condition0_level1(
                    &x0_sqrtn,
                    Some(&w),
                    &model,
                    spec.m_samples,
                    cfg.conditions.gamma0,
                    cfg.conditions.n_level,
                )?
                .pass,
            )
        }
        _ => None,
    };

    let record = TrialRecord {
        config_hash: hash,
        seed: cfg.seed,
        n: model.n(),
        r: model.r(),
        p: model.p(),
        lambdas: model.lambdas().to_vec(),
        dynamics: cfg.dynamics.kind().to_string(),
        steps,
        delta,
        exact,
        permutation,
        permutation_signs,
        elimination,
        greedy_prediction,
        recovery_ordering: ordering,
        hitting_times,
        subspace_error_final,
        cond1_signed: cond1.pass,
        cond1_abs: cond1.pass_abs,
        cond2,
        cond0,
        neumann_violations: neumann,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, trajectory))
}

/// What counts as success for a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessCriterion {
    Exact,
    Permutation,
    /// 2 (r - Tr G) at the final state below the recovery eps.
    Subspace,
}

impl SuccessCriterion {
    pub fn evaluate(&self, record: &TrialRecord, eps: f64) -> bool {
        match self {
            SuccessCriterion::Exact => record.exact,
            SuccessCriterion::Permutation => record.permutation.is_some(),
            SuccessCriterion::Subspace => record.subspace_error_final <= eps,
        }
    }
}

/// Scaling family of the per-cell sample budget.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    /// ceil(coeff * N^alpha).
    #[default]
    PowerLaw,
    /// ceil(coeff * N^alpha * log^2 N); alpha = 0 gives the pure
    /// polylogarithmic budgets of the matrix case.
    PowerLawLogSq,
}

/// Sweep over (N, budget exponent alpha) cells. The per-cell sample budget
/// follows `budget_rule`: SGD cells set the step count, flow cells set M.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: TrialConfig,
    pub n_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub budget_coeff: f64,
    #[serde(default)]
    pub budget_rule: BudgetRule,
    pub trials_per_cell: usize,
    pub success: SuccessCriterion,
    pub master_seed: u64,
    /// Zero wall-clock columns so result files are byte-stable.
    #[serde(default)]
    pub deterministic: bool,
}

/// One row of the sweep result table.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub cell_id: usize,
    pub n: usize,
    pub alpha: f64,
    pub steps: usize,
    pub trials: usize,
    pub successes: usize,
    pub fraction: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

/// Aggregated sweep results.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub cells: Vec<CellSummary>,
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn cell_list(cfg: &SweepConfig) -> Vec<(usize, usize, f64, usize)> {
    // (cell_id, n, alpha, steps)
    let mut cells = Vec::new();
    let mut id = 0;
    for &n in &cfg.n_values {
        for &alpha in &cfg.alphas {
            let nf = n as f64;
            let mut budget = cfg.budget_coeff * nf.powf(alpha);
            if cfg.budget_rule == BudgetRule::PowerLawLogSq {
                budget *= nf.ln() * nf.ln();
            }
            let steps = budget.ceil() as usize;
            cells.push((id, n, alpha, steps.max(1)));
            id += 1;
        }
    }
    cells
}

fn trial_for_cell(cfg: &SweepConfig, n: usize, steps: usize, seed: u64) -> TrialConfig {
    let mut trial = cfg.base.clone();
    trial.model.n = n;
    trial.seed = seed;
    match &mut trial.dynamics {
        DynamicsSpec::Sgd(spec) => spec.steps = steps,
        DynamicsSpec::GradientFlow(spec) | DynamicsSpec::Langevin(spec) => {
            spec.m_samples = steps as f64;
        }
    }
    trial
}

/// Estimated floating-point cost of a sweep: N^{p-1} r per gradient, times
/// steps, times trials, summed over cells.
pub fn estimate_flops(cfg: &SweepConfig) -> f64 {
    let p = cfg.base.model.p;
    let r = cfg.base.model.r;
    cell_list(cfg)
        .iter()
        .map(|&(_, n, _, steps)| {
            (n as f64).powi(p as i32 - 1) * r as f64 * steps as f64 * cfg.trials_per_cell as f64
        })
        .sum()
}

/// Sweeps costing more than this many estimated FLOPs are refused without an
/// explicit override.
pub const FLOP_GUARDRAIL: f64 = 1e12;

/// CSV header of the per-trial result table (T columns appended per rank).
pub fn csv_header(r: usize) -> String {
    let mut header = String::from(
        "cell_id,N,r,p,lambda_csv,dynamics,budget_exponent,steps,delta,seed,exact,permutation_sigma,elim_ok",
    );
    for k in 1..=r {
        let _ = write!(header, ",T{k}");
    }
    header.push_str(",subspace_err,neumann_violations,wall_seconds");
    header
}

/// One CSV row of the per-trial result table.
pub fn csv_row(cell_id: usize, alpha: f64, rec: &TrialRecord, zero_wall: bool) -> String {
    let lambda_csv = rec
        .lambdas
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let sigma = match &rec.permutation {
        Some(s) => s
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";"),
        None => "-".to_string(),
    };
    let delta = rec.delta.map(|d| d.to_string()).unwrap_or_default();
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        cell_id,
        rec.n,
        rec.r,
        rec.p,
        lambda_csv,
        rec.dynamics,
        alpha,
        rec.steps,
        delta,
        rec.seed,
        rec.exact,
        sigma,
        rec.elimination.satisfied,
    );
    for k in 0..rec.r {
        match rec.elimination.stop_times.get(k) {
            Some(t) if rec.elimination.satisfied => {
                let _ = write!(row, ",{t}");
            }
            _ => row.push(','),
        }
    }
    let wall = if zero_wall { 0.0 } else { rec.wall_seconds };
    let _ = write!(
        row,
        ",{},{},{}",
        rec.subspace_error_final, rec.neumann_violations, wall
    );
    row
}

/// Run a sweep, optionally resuming from and persisting to a CSV file.
/// Returns the summary; the CSV (when requested) holds one row per trial in
/// deterministic (cell_id, seed) order with a provenance comment line.
pub fn run_sweep(cfg: &SweepConfig, out_csv: Option<&Path>) -> Result<SweepSummary> {
    let hash = config_hash(cfg);
    let cells = cell_list(cfg);
    let r = cfg.base.model.r;

    // resume: collect already-computed rows keyed by (cell_id, seed)
    let mut existing: BTreeMap<(usize, u64), String> = BTreeMap::new();
    if let Some(path) = out_csv {
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for line in text.lines() {
                if line.starts_with('#') || line.starts_with("cell_id") || line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() < 10 {
                    continue;
                }
                let cell: usize = fields[0].parse().map_err(|_| {
                    Error::InvalidParameter(format!("bad cell id in resume file: {line}"))
                })?;
                let seed: u64 = fields[9].parse().map_err(|_| {
                    Error::InvalidParameter(format!("bad seed in resume file: {line}"))
                })?;
                existing.insert((cell, seed), line.to_string());
            }
        }
    }

    // work items not present in the resume file
    let mut work: Vec<(usize, usize, f64, usize, u64)> = Vec::new();
    for &(cell_id, n, alpha, steps) in &cells {
        let cell_seed = derive_seed(cfg.master_seed, cell_id as u64);
        for trial_idx in 0..cfg.trials_per_cell {
            let seed = derive_seed(cell_seed, trial_idx as u64);
            if !existing.contains_key(&(cell_id, seed)) {
                work.push((cell_id, n, alpha, steps, seed));
            }
        }
    }

    let computed: Vec<((usize, u64), (f64, TrialRecord))> = work
        .par_iter()
        .map(|&(cell_id, n, alpha, steps, seed)| {
            let trial = trial_for_cell(cfg, n, steps, seed);
            run_trial(&trial).map(|rec| ((cell_id, seed), (alpha, rec)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: BTreeMap<(usize, u64), String> = existing;
    let mut fresh: BTreeMap<(usize, u64), TrialRecord> = BTreeMap::new();
    for ((cell_id, seed), (alpha, rec)) in computed {
        rows.insert(
            (cell_id, seed),
            csv_row(cell_id, alpha, &rec, cfg.deterministic),
        );
        fresh.insert((cell_id, seed), rec);
    }

    if let Some(path) = out_csv {
        let mut text = format!("# config={hash} version={}\n", env!("CARGO_PKG_VERSION"));
        text.push_str(&csv_header(r));
        text.push('\n');
        for row in rows.values() {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }

    // aggregate per cell from the row table (resumed rows included)
    let mut summaries = Vec::with_capacity(cells.len());
    for &(cell_id, n, alpha, steps) in &cells {
        let mut successes = 0usize;
        let mut trials = 0usize;
        let cell_seed = derive_seed(cfg.master_seed, cell_id as u64);
        for trial_idx in 0..cfg.trials_per_cell {
            let seed = derive_seed(cell_seed, trial_idx as u64);
            let success = if let Some(rec) = fresh.get(&(cell_id, seed)) {
                cfg.success.evaluate(rec, cfg.base.recovery.eps)
            } else if let Some(row) = rows.get(&(cell_id, seed)) {
                parse_success_from_row(row, cfg.success, cfg.base.recovery.eps, r)?
            } else {
                continue;
            };
            trials += 1;
            if success {
                successes += 1;
            }
        }
        let fraction = if trials > 0 {
            successes as f64 / trials as f64
        } else {
            0.0
        };
        let (wilson_low, wilson_high) = wilson_interval(successes, trials);
        summaries.push(CellSummary {
            cell_id,
            n,
            alpha,
            steps,
            trials,
            successes,
            fraction,
            wilson_low,
            wilson_high,
        });
    }
    Ok(SweepSummary {
        config_hash: hash,
        cells: summaries,
    })
}

fn parse_success_from_row(
    row: &str,
    criterion: SuccessCriterion,
    eps: f64,
    r: usize,
) -> Result<bool> {
    let fields: Vec<&str> = row.split(',').collect();
    let bad = || Error::InvalidParameter(format!("malformed result row: {row}"));
    match criterion {
        SuccessCriterion::Exact => fields
            .get(10)
            .and_then(|s| s.parse::<bool>().ok())
            .ok_or_else(bad),
        SuccessCriterion::Permutation => Ok(fields.get(11).map(|s| *s != "-").ok_or_else(bad)?),
        SuccessCriterion::Subspace => {
            let idx = 13 + r;
            let err: f64 = fields
                .get(idx)
                .and_then(|s| s.parse().ok())
                .ok_or_else(bad)?;
            Ok(err <= eps)
        }
    }
}

/// Per-N crossing estimate from a monotone logistic fit.
#[derive(Debug, Clone, Serialize)]
pub struct CrossingEstimate {
    pub n: usize,
    /// Budget exponent at which the fitted success probability crosses 1/2.
    pub alpha_cross: f64,
    /// `below_grid`, `above_grid`, `non_monotone`, or `ok`.
    pub flag: String,
}

/// Threshold localization across N.
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdEstimate {
    pub crossings: Vec<CrossingEstimate>,
    /// Least-squares slope of alpha_cross against log N over reliable cells.
    pub slope_vs_log_n: Option<f64>,
}

/// Locate the 50%-success crossing in the budget exponent for each N by a
/// binomial-likelihood logistic fit over a parameter grid, and report the
/// slope of the crossing against log N.
pub fn estimate_threshold(summary: &SweepSummary) -> Result<ThresholdEstimate> {
    let mut by_n: BTreeMap<usize, Vec<&CellSummary>> = BTreeMap::new();
    for cell in &summary.cells {
        by_n.entry(cell.n).or_default().push(cell);
    }
    let mut crossings = Vec::new();
    for (&n, cells) in &by_n {
        let mut cells = cells.clone();
        cells.sort_by(|a, b| a.alpha.partial_cmp(&b.alpha).unwrap());
        if cells.len() < 3 {
            return Err(Error::InvalidParameter(format!(
                "need >= 3 budget-exponent cells per N, got {} at N={n}",
                cells.len()
            )));
        }
        let alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
        let alpha_min = alphas[0];
        let alpha_max = *alphas.last().unwrap();

        // flags for degenerate tables
        if cells.iter().all(|c| c.fraction >= 0.5) {
            crossings.push(CrossingEstimate {
                n,
                alpha_cross: alpha_min,
                flag: "below_grid".into(),
            });
            continue;
        }
        if cells.iter().all(|c| c.fraction < 0.5) {
            crossings.push(CrossingEstimate {
                n,
                alpha_cross: alpha_max,
                flag: "above_grid".into(),
            });
            continue;
        }
        // non-monotone beyond confidence widths
        let mut monotone = true;
        for w in cells.windows(2) {
            if w[0].wilson_low > w[1].wilson_high {
                monotone = false;
            }
        }

        // logistic fit p(alpha) = 1/(1+exp(-(alpha - a)/s)) by grid search
        // over (a, s) minimizing the binomial negative log-likelihood
        let span = (alpha_max - alpha_min).max(1e-6);
        let mut best = (f64::INFINITY, alpha_min);
        for ai in 0..=200 {
            let a = alpha_min - 0.5 * span + (2.0 * span) * ai as f64 / 200.0;
            for si in 0..20 {
                let s = span * 0.02 * 1.35f64.powi(si);
                let mut nll = 0.0;
                for c in cells.iter() {
                    let p = 1.0 / (1.0 + (-(c.alpha - a) / s).exp());
                    let p = p.clamp(1e-9, 1.0 - 1e-9);
                    nll -= c.successes as f64 * p.ln()
                        + (c.trials - c.successes) as f64 * (1.0 - p).ln();
                }
                if nll < best.0 {
                    best = (nll, a);
                }
            }
        }
        crossings.push(CrossingEstimate {
            n,
            alpha_cross: best.1,
            flag: if monotone {
                "ok".into()
            } else {
                "non_monotone".into()
            },
        });
    }

    let reliable: Vec<(f64, f64)> = crossings
        .iter()
        .filter(|c| c.flag == "ok")
        .map(|c| ((c.n as f64).ln(), c.alpha_cross))
        .collect();
    let slope_vs_log_n = if reliable.len() >= 2 {
        let n = reliable.len() as f64;
        let sx: f64 = reliable.iter().map(|(x, _)| x).sum();
        let sy: f64 = reliable.iter().map(|(_, y)| y).sum();
        let sxx: f64 = reliable.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = reliable.iter().map(|(x, y)| x * y).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() > 1e-12 {
            Some((n * sxy - sx * sy) / denom)
        } else {
            None
        }
    } else {
        None
    };
    Ok(ThresholdEstimate {
        crossings,
        slope_vs_log_n,
    })
}

/// Serialize a trajectory as JSON with floats at 17 significant digits:
/// {meta, times: [...], corr: [[...]], gram_eigs: [[...]]}. Correlation
/// matrices are flattened row-major.
pub fn trajectory_to_json(traj: &Trajectory, meta: &BTreeMap<String, String>) -> String {
    fn f(v: f64) -> String {
        format!("{v:.16e}")
    }
    let mut out = String::from("{\n  \"meta\": {");
    let mut first = true;
    for (k, v) in meta {
        if !first {
            out.push(',');
        }
        first = false;
        let _ = write!(out, "\n    \"{k}\": \"{v}\"");
    }
    out.push_str("\n  },\n  \"times\": [");
    out.push_str(
        &traj
            .times
            .iter()
            .map(|&t| f(t))
            .collect::<Vec<_>>()
            .join(", "),
    );
    out.push_str("],\n  \"corr\": [");
    for (k, m) in traj.corr.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        out.push('[');
        let r = m.r();
        let mut vals = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                vals.push(f(m.entry(i, j)));
            }
        }
        out.push_str(&vals.join(", "));
        out.push(']');
    }
    out.push_str("],\n  \"gram_eigs\": [");
    for (k, eigs) in traj.gram_eigs.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        out.push('[');
        out.push_str(&eigs.iter().map(|&e| f(e)).collect::<Vec<_>>().join(", "));
        out.push(']');
    }
    out.push_str("]\n}\n");
    out
}
