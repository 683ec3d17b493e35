//! Run configuration: defaults, optional JSON file, then command-line
//! overrides. The resolved value is written next to every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use melvin_core::dataset::{self, Task};
use melvin_core::eval::{CcvLayout, InterestCriterion, MatchMode};
use melvin_core::model::TrainConfig;
use melvin_core::optics::{self, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub count: usize,
    pub test_fraction: f64,
    pub extrapolation_min: u32,
    pub simulator: Simulator,
    pub l_shift: i32,
    pub train: TrainConfig,
    pub criterion: InterestCriterion,
    pub ccv: CcvLayout,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            count: 10_000,
            test_fraction: dataset::DEFAULT_TEST_FRACTION,
            extrapolation_min: dataset::DEFAULT_EXTRAPOLATION_MIN,
            simulator: Simulator::default(),
            l_shift: optics::DEFAULT_L_SHIFT,
            train: TrainConfig::default(),
            criterion: InterestCriterion::default(),
            ccv: CcvLayout::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON file with a (partial) run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Disable data parallelism.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_updates: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CriterionArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_parser = parse_match_mode)]
    pub match_mode: Option<MatchMode>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: melvin_core::Error| e.to_string())
}

fn parse_match_mode(s: &str) -> Result<MatchMode, String> {
    s.parse().map_err(|e: melvin_core::Error| e.to_string())
}

impl RunConfig {
    pub fn load(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn apply_data(&mut self, a: &DataArgs) {
        set(&mut self.count, a.count);
        set(&mut self.test_fraction, a.test_fraction);
    }

    pub fn apply_train(&mut self, a: &TrainArgs) {
        let t = &mut self.train;
        set(&mut t.task, a.task);
        set(&mut t.hidden, a.hidden);
        set(&mut t.embed, a.embed);
        set(&mut t.learning_rate, a.lr);
        set(&mut t.momentum, a.momentum);
        set(&mut t.batch_size, a.batch);
        set(&mut t.max_updates, a.max_updates);
    }

    pub fn apply_criterion(&mut self, a: &CriterionArgs) -> Result<()> {
        let c = &mut self.criterion;
        set(&mut c.tau, a.tau);
        set(&mut c.radius, a.radius);
        set(&mut c.match_mode, a.match_mode);
        c.validate()?;
        Ok(())
    }

    pub fn train_for(&self, task: Task) -> TrainConfig {
        TrainConfig {
            task,
            ..self.train.clone()
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Everything that determines a command's outputs.
#[derive(Debug, Serialize)]
pub struct Snapshot<'a> {
    pub command: &'a str,
    pub inputs: BTreeMap<&'a str, String>,
    pub config: &'a RunConfig,
}

impl Snapshot<'_> {
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let path = dir.join(name);
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
