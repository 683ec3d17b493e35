mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use melvin_core::dataset::{self, Record, Split, Task, Vocabulary};
use melvin_core::eval::{self, FoldReport};
use melvin_core::exec::ExecMode;
use melvin_core::labeler;
use melvin_core::model::{self, LstmModel};
use melvin_core::optics::Setup;

use config::{CommonArgs, CriterionArgs, DataArgs, RunConfig, Snapshot, TrainArgs};

/// Exit code for a training run whose parameters diverged.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "melvin-surrogate",
    version,
    about = "Random quantum optics setups and their LSTM surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and label random setups, assign splits and folds.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-derive splits and folds of an existing dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one task model on the train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score trained models, or run cluster cross-validation.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Test)]
        mode: EvalMode,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        layout: LayoutArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        criterion: CriterionArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Threshold and radius sweep with average precision.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        /// Split whose records are swept.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        criterion: CriterionArgs,
    },
    /// Print the post-selected state of a setup.
    DumpState {
        /// Space separated element tokens, e.g. "BS(a,b) HOLO(c,+2)".
        #[arg(long)]
        setup: String,
        /// Also print the input state.
        #[arg(long)]
        initial: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Test,
    Ccv,
    Extrapolation,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Extrapolation,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::Extrapolation => Split::Extrapolation,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
struct ModelArgs {
    #[arg(long)]
    ent_model: Option<PathBuf>,
    #[arg(long)]
    srv_model: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
struct LayoutArgs {
    /// Comma separated folds used by cluster cross-validation.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<u32>>,
    /// Leading ranks of the extrapolation set, `lo-hi` or `lo-`.
    #[arg(long)]
    extrapolation: Option<String>,
    /// Skip the per-fold models and only score the extrapolation set.
    #[arg(long)]
    extrapolation_only: bool,
}

#[derive(Debug)]
struct Diverged;

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("training diverged")
    }
}

impl std::error::Error for Diverged {}

fn exec_mode(common: &CommonArgs) -> ExecMode {
    if common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MELVIN_SURROGATE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MELVIN_SURROGATE_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: Option<&PathBuf>, what: &str) -> Result<LstmModel> {
    let path = path.with_context(|| format!("--{what}-model is required"))?;
    model::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_generate(common: CommonArgs, data: DataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&common)?;
    cfg.apply_data(&data);
    prepare_out(&common.out)?;
    let items = dataset::generate(cfg.count, cfg.seed, &cfg.simulator, cfg.l_shift, exec_mode(&common));
    let mut records = dataset::assign_split(items, cfg.test_fraction, cfg.seed, cfg.extrapolation_min);
    dataset::assign_folds(&mut records, cfg.seed, cfg.extrapolation_min)?;
    finish_dataset(&common.out, &records)?;
    Snapshot {
        command: "generate",
        inputs: BTreeMap::new(),
        config: &cfg,
    }
    .write(&common.out, "generate.config.json")
}

fn finish_dataset(out: &Path, records: &[Record]) -> Result<()> {
    dataset::save(&out.join("dataset.jsonl"), records)?;
    write(out, "stats.csv", &dataset::stats_csv(records))?;
    let positives = records.iter().filter(|r| r.y_e).count();
    let count = |s| records.iter().filter(|r| r.split == s).count();
    println!(
        "{} records ({} positive): train {}, test {}, extrapolation {}",
        records.len(),
        positives,
        count(Split::Train),
        count(Split::Test),
        count(Split::Extrapolation)
    );
    Ok(())
}

fn cmd_split(path: PathBuf, common: CommonArgs, data: DataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&common)?;
    cfg.apply_data(&data);
    prepare_out(&common.out)?;
    let records = dataset::resplit(load_records(&path)?, cfg.test_fraction, cfg.seed, cfg.extrapolation_min)?;
    finish_dataset(&common.out, &records)?;
    Snapshot {
        command: "split",
        inputs: BTreeMap::from([("dataset", path_string(&path))]),
        config: &cfg,
    }
    .write(&common.out, "split.config.json")
}

fn cmd_train(path: PathBuf, common: CommonArgs, args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&common)?;
    cfg.apply_train(&args);
    prepare_out(&common.out)?;
    let task = cfg.train.task.as_str();
    Snapshot {
        command: "train",
        inputs: BTreeMap::from([("dataset", path_string(&path))]),
        config: &cfg,
    }
    .write(&common.out, &format!("train_{task}.config.json"))?;

    let train: Vec<Record> = load_records(&path)?
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let vocab = Vocabulary::toolbox(cfg.l_shift);
    let t = &cfg.train;
    let init = LstmModel::new(&vocab, t.embed, t.hidden, t.task, t.seed);
    match model::train(init, &train, &vocab, t, exec_mode(&common)) {
        Ok(outcome) => {
            write(&common.out, &format!("history_{task}.csv"), &outcome.history.to_csv())?;
            model::save_checkpoint(&common.out.join(format!("model_{task}.ckpt")), &outcome.model)?;
            let best = outcome.history.rows.iter().find(|r| r.update == outcome.best_update);
            println!(
                "{task}: {} updates, best validation loss {} at update {}",
                outcome.updates_run,
                best.map_or(f64::NAN, |r| r.val_loss),
                outcome.best_update
            );
            Ok(())
        }
        Err(e) => {
            write(&common.out, &format!("history_{task}.csv"), &e.history.to_csv())?;
            if matches!(e.source, melvin_core::Error::Numerical(_)) {
                Err(anyhow::Error::new(Diverged).context(e.to_string()))
            } else {
                Err(e.into())
            }
        }
    }
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let (lo, hi) = s.split_once('-').context("expected `lo-hi` or `lo-`")?;
    let lo: u32 = lo.trim().parse()?;
    let hi: u32 = if hi.trim().is_empty() {
        u32::MAX
    } else {
        hi.trim().parse()?
    };
    Ok((lo, hi))
}

fn split_records(records: &[Record], split: Split) -> Vec<Record> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn write_reports(out: &Path, rows: &[FoldReport]) -> Result<()> {
    write(out, "metrics.csv", &eval::metrics_csv(rows))?;
    let table = eval::summary_table(rows);
    write(out, "summary.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn run_sweep(
    out: &Path,
    records: &[Record],
    models: &ModelArgs,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    mode: ExecMode,
) -> Result<()> {
    let ent = load_model(models.ent_model.as_ref(), "ent")?;
    let srv = load_model(models.srv_model.as_ref(), "srv")?;
    let preds = eval::predict(&ent, &srv, records, vocab, mode)?;
    let table = eval::sweep(
        records,
        &preds,
        &eval::tau_grid(),
        &eval::radius_grid(),
        cfg.criterion.match_mode,
        mode,
    )?;
    write(out, "sweep.csv", &table.to_csv())?;
    write(out, "average_precision.csv", &table.average_precision_csv())?;
    let violations = eval::monotonicity_violations(&table);
    match table.mean_average_precision() {
        Some(m) => println!(
            "mAP {m:.4} over {} radii, {violations} monotonicity violations",
            table.radii.len()
        ),
        None => println!("no positive records; mAP undefined"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    path: PathBuf,
    mode: EvalMode,
    models: ModelArgs,
    layout: LayoutArgs,
    common: CommonArgs,
    criterion: CriterionArgs,
    train: TrainArgs,
) -> Result<()> {
    let mut cfg = RunConfig::load(&common)?;
    cfg.apply_criterion(&criterion)?;
    cfg.apply_train(&train);
    if let Some(folds) = layout.folds {
        cfg.ccv.folds = folds;
    }
    if let Some(r) = &layout.extrapolation {
        cfg.ccv.extrapolation = parse_range(r)?;
    }
    if layout.extrapolation_only {
        cfg.ccv.cross_validate = false;
    }
    prepare_out(&common.out)?;
    let mut inputs = BTreeMap::from([("dataset", path_string(&path))]);
    if mode != EvalMode::Ccv {
        for (k, v) in [("ent_model", &models.ent_model), ("srv_model", &models.srv_model)] {
            if let Some(p) = v {
                inputs.insert(k, path_string(p));
            }
        }
    }
    let mode_name = format!("{mode:?}").to_lowercase();
    Snapshot {
        command: "evaluate",
        inputs,
        config: &cfg,
    }
    .write(&common.out, &format!("evaluate_{mode_name}.config.json"))?;

    let records = load_records(&path)?;
    let vocab = Vocabulary::toolbox(cfg.l_shift);
    let exec = exec_mode(&common);
    match mode {
        EvalMode::Ccv => {
            let report = eval::ccv_run(
                &records,
                &vocab,
                &cfg.train_for(Task::Entanglement),
                &cfg.train_for(Task::Srv),
                &cfg.ccv,
                &cfg.criterion,
                exec,
            )?;
            write_reports(&common.out, &report.rows)
        }
        EvalMode::Test | EvalMode::Extrapolation => {
            let split = if mode == EvalMode::Test {
                Split::Test
            } else {
                Split::Extrapolation
            };
            let subset = split_records(&records, split);
            if subset.is_empty() {
                bail!("dataset has no {mode_name} records");
            }
            let ent = load_model(models.ent_model.as_ref(), "ent")?;
            let srv = load_model(models.srv_model.as_ref(), "srv")?;
            let preds = eval::predict(&ent, &srv, &subset, &vocab, exec)?;
            let report = eval::confusion(&subset, &preds, &cfg.criterion, exec)?;
            write_reports(
                &common.out,
                &[FoldReport {
                    fold: mode_name,
                    criterion: cfg.criterion,
                    report,
                }],
            )
        }
        EvalMode::Sweep => {
            let subset = split_records(&records, Split::Test);
            run_sweep(&common.out, &subset, &models, &cfg, &vocab, exec)
        }
    }
}

fn cmd_sweep(
    path: PathBuf,
    split: SplitArg,
    models: ModelArgs,
    common: CommonArgs,
    criterion: CriterionArgs,
) -> Result<()> {
    let mut cfg = RunConfig::load(&common)?;
    cfg.apply_criterion(&criterion)?;
    prepare_out(&common.out)?;
    let mut inputs = BTreeMap::from([
        ("dataset", path_string(&path)),
        ("split", format!("{split:?}").to_lowercase()),
    ]);
    for (k, v) in [("ent_model", &models.ent_model), ("srv_model", &models.srv_model)] {
        if let Some(p) = v {
            inputs.insert(k, path_string(p));
        }
    }
    Snapshot {
        command: "sweep",
        inputs,
        config: &cfg,
    }
    .write(&common.out, "sweep.config.json")?;
    let subset = split_records(&load_records(&path)?, split.split());
    let vocab = Vocabulary::toolbox(cfg.l_shift);
    run_sweep(&common.out, &subset, &models, &cfg, &vocab, exec_mode(&common))
}

fn cmd_dump_state(setup: &str, initial: bool, common: CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(&common)?;
    let setup: Setup = setup.parse()?;
    let sim = cfg.simulator;
    if initial {
        println!("input:    {}", sim.initial_state());
    }
    let result = sim.run_setup(&setup);
    match result.state() {
        Some(state) => println!("output:   {state}"),
        None => println!("output:   none (post-selection removed every term)"),
    }
    println!(
        "p(select) {:.6}, clipped terms {}",
        result.postselect_prob, result.clipped
    );
    let label = labeler::label(&result);
    let srv = label.srv.map_or("-".to_string(), |s| s.to_string());
    println!(
        "label:    y_e={} srv={srv} fold_rank={}",
        label.y_e as u8, label.fold_rank
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common, data } => cmd_generate(common, data),
        Command::Split { dataset, common, data } => cmd_split(dataset, common, data),
        Command::Train { dataset, common, train } => cmd_train(dataset, common, train),
        Command::Evaluate {
            dataset,
            mode,
            models,
            layout,
            common,
            criterion,
            train,
        } => cmd_evaluate(dataset, mode, models, layout, common, criterion, train),
        Command::Sweep {
            dataset,
            split,
            models,
            common,
            criterion,
        } => cmd_sweep(dataset, split, models, common, criterion),
        Command::DumpState { setup, initial, common } => cmd_dump_state(&setup, initial, common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Diverged>().is_some() {
                ExitCode::from(EXIT_DIVERGED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
