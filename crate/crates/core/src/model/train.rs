use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{examples_for, Example, LstmModel, Params, Target};
use crate::dataset::{self, Record, Task, Vocabulary};
use crate::error::Error;
use crate::exec::ExecMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_updates: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    /// Evaluations without improvement before the learning rate is decayed.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub grad_clip: Option<f64>,
    pub hidden: usize,
    pub embed: usize,
    pub validation_fraction: f64,
    /// Upper bound on validation examples per evaluation.
    pub validation_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Entanglement,
            learning_rate: 0.3,
            momentum: 0.5,
            batch_size: 128,
            max_updates: 2000,
            eval_every: 100,
            early_stop_patience: 6,
            plateau_patience: 2,
            lr_decay: 0.5,
            grad_clip: Some(5.0),
            hidden: super::DEFAULT_HIDDEN,
            embed: super::DEFAULT_EMBED,
            validation_fraction: 0.1,
            validation_cap: 4096,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reference settings at the original scale (2048 hidden units).
    pub fn paper_scale(task: Task) -> Self {
        TrainConfig {
            task,
            hidden: 2048,
            max_updates: match task {
                Task::Entanglement => 40_000,
                Task::Srv => 14_000,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::Configuration(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Configuration("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return bad("batch size");
        }
        if self.max_updates == 0 {
            return bad("max updates");
        }
        if self.eval_every == 0 {
            return bad("eval interval");
        }
        if self.hidden == 0 || self.embed == 0 {
            return bad("model size");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Configuration("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub update: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,train_loss,val_loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.update, r.train_loss, r.val_loss));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub model: LstmModel,
    pub history: History,
    pub best_update: usize,
    pub updates_run: usize,
}

/// Training failure; the history up to the failure is kept.
#[derive(Debug)]
pub struct TrainError {
    pub history: History,
    pub source: Error,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} evaluations: {}",
            self.history.rows.len(),
            self.source
        )
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<Error> for TrainError {
    fn from(source: Error) -> Self {
        TrainError {
            history: History::default(),
            source,
        }
    }
}

/// Class key used both for batch balancing and for the balanced validation
/// loss.
fn class_key(target: &Target, record: &Record) -> u32 {
    match target {
        Target::Entanglement(y) => *y as u32,
        Target::Srv(_) => record.fold_rank,
    }
}

/// Validation loss averaged per class, then over classes.
fn balanced_loss(model: &LstmModel, val: &[(u32, Example)], mode: ExecMode) -> Result<f64, Error> {
    let refs: Vec<&Example> = val.iter().map(|(_, e)| e).collect();
    let raw = model.predict_examples(&refs, mode)?;
    let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for ((class, ex), r) in val.iter().zip(raw) {
        let e = per_class.entry(*class).or_default();
        e.0 += super::sample_loss(&r, &ex.target).0;
        e.1 += 1;
    }
    let means: Vec<f64> = per_class.values().map(|(s, n)| s / *n as f64).collect();
    let v = means.iter().sum::<f64>() / means.len().max(1) as f64;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite validation loss {v}")));
    }
    Ok(v)
}

/// SGD with classical momentum on class-balanced batches.
///
/// Training records are split into a fit part and a validation holdout
/// (`validation_fraction`). Every `eval_every` updates the balanced
/// validation loss is computed; the best snapshot is kept, the learning rate
/// is multiplied by `lr_decay` after `plateau_patience` evaluations without
/// improvement and training stops after `early_stop_patience`.
pub fn train(
    model: LstmModel,
    records: &[Record],
    vocab: &Vocabulary,
    config: &TrainConfig,
    mode: ExecMode,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if model.task() != config.task {
        return Err(Error::Configuration("model task differs from config task".into()).into());
    }
    let examples = examples_for(records, vocab, config.task)?;
    let indices: Vec<usize> = (0..examples.len()).collect();
    let (fit_idx, mut val_idx) = if config.validation_fraction > 0.0 {
        dataset::holdout(&indices, config.validation_fraction, config.seed)
    } else {
        (indices.clone(), Vec::new())
    };
    if val_idx.is_empty() {
        // without a holdout, early stopping watches a slice of the fit data
        val_idx = fit_idx.iter().copied().take(config.validation_cap).collect();
    }
    val_idx.truncate(config.validation_cap);

    let fit_records: Vec<Record> = fit_idx.iter().map(|&i| records[examples[i].0].clone()).collect();
    let fit_examples: Vec<&Example> = fit_idx.iter().map(|&i| &examples[i].1).collect();
    let val: Vec<(u32, Example)> = val_idx
        .iter()
        .map(|&i| {
            let (ri, ex) = &examples[i];
            (class_key(&ex.target, &records[*ri]), ex.clone())
        })
        .collect();

    let mut stream = dataset::balanced_batches(&fit_records, config.task, config.batch_size, config.seed)?;

    let mut model = model;
    let mut velocity: Params = model.params.zeros_like();
    let mut lr = config.learning_rate;
    let mut history = History::default();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut since_best = 0usize;
    let mut running = (0.0, 0usize);
    let mut updates_run = 0;

    for update in 1..=config.max_updates {
        let batch: Vec<&Example> = stream.next_batch().into_iter().map(|i| fit_examples[i]).collect();
        let (loss, mut grads) = match model.loss_and_gradients(&batch, mode) {
            Ok(v) => v,
            Err(source) => return Err(TrainError { history, source }),
        };
        if let Some(clip) = config.grad_clip {
            let norm = grads.norm_sqr().sqrt();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        velocity.scale(config.momentum);
        velocity.add_scaled(-lr, &grads);
        model.params.add_scaled(1.0, &velocity);
        if !model.params.is_finite() {
            return Err(TrainError {
                history,
                source: Error::Numerical(format!("parameters diverged at update {update}")),
            });
        }
        running.0 += loss;
        running.1 += 1;
        updates_run = update;

        if update % config.eval_every == 0 || update == config.max_updates {
            let val_loss = match balanced_loss(&model, &val, mode) {
                Ok(v) => v,
                Err(source) => return Err(TrainError { history, source }),
            };
            history.rows.push(HistoryRow {
                update,
                train_loss: running.0 / running.1 as f64,
                val_loss,
            });
            running = (0.0, 0);
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, update, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.plateau_patience > 0 && since_best.is_multiple_of(config.plateau_patience) {
                    lr *= config.lr_decay;
                }
                if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                    break;
                }
            }
        }
    }

    let (best_update, params) = match best {
        Some((_, u, p)) => (u, p),
        None => (updates_run, model.params.clone()),
    };
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_update,
        updates_run,
    })
}
