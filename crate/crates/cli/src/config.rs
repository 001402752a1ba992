//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bgrass::engine::{Hyperparams, Schedule};
use bgrass::ingest::{FilterOptions, ReportSchema};
use bgrass::ontology::Epsilon;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub reports: PathBuf,
    pub ontology: PathBuf,
    #[serde(default)]
    pub negative_controls: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonConfig {
    pub grid: Vec<Epsilon>,
    /// Skips the grid search when set.
    pub fixed: Option<Epsilon>,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            grid: Epsilon::default_grid(),
            fixed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    /// Base seed; chain `c` uses `seed + c` unless `seeds` is given.
    pub seed: u64,
    pub seeds: Option<Vec<u64>>,
    /// Iterations between progress lines; 0 disables them.
    pub progress_every: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            burn_in: 10_000,
            thin: 10,
            chains: 3,
            seed: 1,
            seeds: None,
            progress_every: 2_000,
        }
    }
}

impl McmcConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            iters: self.iters,
            burn_in: self.burn_in,
            thin: self.thin,
        }
    }

    pub fn chain_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.chains as u64).map(|c| self.seed + c).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub fdr_alpha: f64,
    /// Effect filter on the posterior mean logOR; `None` disables it.
    pub effect_threshold: Option<f64>,
    pub min_group_size: usize,
    pub rhat_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            fdr_alpha: 0.01,
            effect_threshold: Some(std::f64::consts::LN_2),
            min_group_size: 20,
            rhat_threshold: 1.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub schema: ReportSchema,
    #[serde(default)]
    pub filter: FilterOptions,
    #[serde(default)]
    pub model: Hyperparams,
    #[serde(default)]
    pub epsilon: EpsilonConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("bgrass-run")
}

impl RunConfig {
    /// Reads a config; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.input.reports);
        fix(&mut cfg.input.ontology);
        if let Some(nc) = cfg.input.negative_controls.as_mut() {
            fix(nc);
        }
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.schedule().validate()?;
        if self.mcmc.chain_seeds().is_empty() {
            bail!("at least one chain is required");
        }
        if let Some(s) = &self.mcmc.seeds {
            if s.len() != self.mcmc.chains {
                bail!("mcmc.seeds has {} entries but mcmc.chains is {}", s.len(), self.mcmc.chains);
            }
        }
        if self.epsilon.fixed.is_none() && self.epsilon.grid.is_empty() {
            bail!("epsilon.grid is empty and no fixed epsilon is set");
        }
        if !(self.report.fdr_alpha > 0.0 && self.report.fdr_alpha < 1.0) {
            bail!("report.fdr_alpha must lie in (0,1)");
        }
        if self.mcmc.schedule().n_stored() < 2 {
            bail!("schedule stores fewer than 2 draws per chain");
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<Epsilon> {
        match self.epsilon.fixed {
            Some(e) => vec![e],
            None => self.epsilon.grid.clone(),
        }
    }
}
