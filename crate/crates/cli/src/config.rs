//! Run configuration files.
//!
//! A run config bundles the corpus generator settings, the training
//! settings, the split protocol, and artifact paths. Unknown keys are
//! rejected at every level, and relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sono_align::dataset::{split_sizes, SynthConfig, DEFAULT_RATIOS};
use sono_align::taxonomy::{default_catalog, TaxonomyCatalog};
use sono_align::{Error, Result, TrainConfig};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "SONO_ALIGN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub sim_tables: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.data,
            &mut self.split,
            &mut self.catalog,
            &mut self.checkpoint,
            &mut self.log,
            &mut self.report,
            &mut self.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self.sim_tables.iter_mut().for_each(join);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Retrieval cutoffs for evaluation reports.
    pub ks: Vec<usize>,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            ks: sono_align::eval::DEFAULT_KS.to_vec(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_str_at(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str_at(&text, base)
    }

    /// Loads `path`, or the defaults when no config is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self, catalog: &TaxonomyCatalog) -> Result<()> {
        self.synth.validate(catalog)?;
        self.train.validate()?;
        split_sizes(self.synth.n_cases, self.split.ratios)?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Validation(format!("ks must be non-empty and positive, got {:?}", self.ks)));
        }
        Ok(())
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_seed_env(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(raw) => {
                let seed = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
                self.train.seed = seed;
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }

    /// The default catalog, or the configured one, with similarity tables applied.
    pub fn catalog(&self, extra_sim_tables: &[PathBuf]) -> Result<TaxonomyCatalog> {
        let mut catalog = match &self.paths.catalog {
            Some(p) => TaxonomyCatalog::from_path(p)?,
            None => default_catalog(),
        };
        for p in self.paths.sim_tables.iter().chain(extra_sim_tables) {
            catalog.apply_sim_file(p)?;
        }
        Ok(catalog)
    }
}
