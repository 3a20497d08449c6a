//! Declarative configuration file: a TOML tree with sections [model],
//! [dynamics], [recovery], [conditions], [sweep], [population], [check],
//! [report], [output]. Unknown keys are hard errors. Dotted-key overrides
//! apply after file parse, last-wins.

use anyhow::{anyhow, bail, Context};
use serde::Deserialize;

use stpca_core::analysis::ConditionParams;
use stpca_core::harness::{
    DynamicsSpec, ModelSpec, RecoveryParams, SuccessCriterion, SweepConfig, TrialConfig,
};
use stpca_core::population::CorrRhs;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelSpec>,
    pub dynamics: Option<DynamicsSpec>,
    pub recovery: Option<RecoveryParams>,
    pub conditions: Option<ConditionParams>,
    pub sweep: Option<SweepSection>,
    pub population: Option<PopulationSection>,
    pub check: Option<CheckSection>,
    pub report: Option<ReportSection>,
    pub output: Option<OutputSection>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub budget_coeff: f64,
    #[serde(default)]
    pub budget_rule: stpca_core::harness::BudgetRule,
    pub trials: usize,
    #[serde(default = "default_success")]
    pub success: SuccessCriterion,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_success() -> SuccessCriterion {
    SuccessCriterion::Permutation
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub r: usize,
    pub p: u32,
    pub lambdas: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_rhs")]
    pub rhs: RhsKind,
    #[serde(default)]
    pub record_every: usize,
    /// Either explicit entries (row-major rows) or a random positive draw.
    pub init: InitSection,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsKind {
    Full,
    DriftOnly,
}

fn default_rhs() -> RhsKind {
    RhsKind::Full
}

impl From<RhsKind> for CorrRhs {
    fn from(kind: RhsKind) -> Self {
        match kind {
            RhsKind::Full => CorrRhs::Full,
            RhsKind::DriftOnly => CorrRhs::DriftOnly,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub m0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub magnitude: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Sample count M weighting the noise generator in the level-1 check.
    #[serde(default = "default_m_samples")]
    pub m_samples: f64,
}

fn default_samples() -> usize {
    100
}

fn default_m_samples() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub results: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

/// Parse a config source, apply dotted-key overrides, deserialize strictly.
pub fn load_config(text: &str, overrides: &[String], quiet: bool) -> anyhow::Result<FileConfig> {
    let mut tree: toml::Value = text.parse().context("config file is not valid TOML")?;
    for entry in overrides {
        apply_override(&mut tree, entry, quiet)?;
    }
    let config: FileConfig = tree.try_into().context("config failed validation")?;
    Ok(config)
}

fn apply_override(tree: &mut toml::Value, entry: &str, quiet: bool) -> anyhow::Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{entry}` is not KEY=VALUE"))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .map(|t| t["v"].clone())
        .or_else(|_| format!("v = \"{raw}\"").parse::<toml::Value>().map(|t| t["v"].clone()))
        .map_err(|e| anyhow!("override value `{raw}` is not parseable: {e}"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key `{path}` has an empty segment");
    }
    let mut node = tree;
    for key in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path `{path}` crosses a non-table"))?
            .entry(key.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override path `{path}` crosses a non-table"))?;
    let last = keys[keys.len() - 1].to_string();
    if table.insert(last, value).is_some() && !quiet {
        eprintln!("note: override {path} replaces a configured value (last wins)");
    }
    Ok(())
}

/// Assemble the trial configuration for simulate/sweep/check commands.
pub fn trial_config(cfg: &FileConfig, seed_flag: Option<u64>) -> anyhow::Result<TrialConfig> {
    let model = cfg
        .model
        .clone()
        .ok_or_else(|| anyhow!("config needs a [model] section"))?;
    let dynamics = cfg
        .dynamics
        .clone()
        .ok_or_else(|| anyhow!("config needs a [dynamics] section"))?;
    Ok(TrialConfig {
        model,
        dynamics,
        recovery: cfg.recovery.unwrap_or_default(),
        conditions: cfg.conditions.unwrap_or_default(),
        seed: seed_flag.or(cfg.seed).unwrap_or(0),
    })
}

/// Assemble the sweep configuration.
pub fn sweep_config(
    cfg: &FileConfig,
    seed_flag: Option<u64>,
    deterministic: bool,
) -> anyhow::Result<SweepConfig> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| anyhow!("config needs a [sweep] section"))?;
    let base = trial_config(cfg, seed_flag)?;
    Ok(SweepConfig {
        base,
        n_values: sweep.n_values,
        alphas: sweep.alphas,
        budget_coeff: sweep.budget_coeff,
        budget_rule: sweep.budget_rule,
        trials_per_cell: sweep.trials,
        success: sweep.success,
        master_seed: seed_flag.unwrap_or(sweep.master_seed),
        deterministic,
    })
}
