//! Metrics for the interestingness classifier: confusion counts, rates with
//! Wilson intervals, rediscovery ratio, (tau, r) sweeps with average
//! precision, and the cluster cross-validation driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::labeler::SrvLabel;
use crate::model::{self, LstmModel, TrainConfig};
use crate::rng;
use crate::srv_loss::SrvPrediction;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_RADIUS: f64 = 3.0;
/// Fraction of an SRV's samples that must be flagged for it to count as
/// rediscovered.
pub const REDISCOVERY_FRACTION: f64 = 0.2;
const WILSON_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// The prediction must be close to the sample's own SRV.
    #[default]
    TrueLabel,
    /// The prediction must be close to any positive SRV of the evaluated set.
    TargetSet,
}

impl MatchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchMode::TrueLabel => "true_label",
            MatchMode::TargetSet => "target_set",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true_label" | "true-label" => Ok(MatchMode::TrueLabel),
            "target_set" | "target-set" => Ok(MatchMode::TargetSet),
            _ => Err(Error::Parse(format!("unknown match mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterestCriterion {
    pub tau: f64,
    pub radius: f64,
    pub match_mode: MatchMode,
}

impl Default for InterestCriterion {
    fn default() -> Self {
        InterestCriterion {
            tau: DEFAULT_TAU,
            radius: DEFAULT_RADIUS,
            match_mode: MatchMode::TrueLabel,
        }
    }
}

impl InterestCriterion {
    pub fn new(tau: f64, radius: f64, match_mode: MatchMode) -> Result<Self> {
        let c = InterestCriterion {
            tau,
            radius,
            match_mode,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Configuration(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Configuration(format!("radius {} must be positive", self.radius)));
        }
        Ok(())
    }
}

/// Cached outputs of the two task models for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_e: f64,
    pub srv: [f64; 3],
}

impl Prediction {
    pub fn new(p_e: f64, srv: SrvPrediction) -> Self {
        Prediction {
            p_e,
            srv: srv.as_array(),
        }
    }

    fn distance(&self, label: &SrvLabel) -> f64 {
        let y = label.as_f64();
        let d2: f64 = (0..3).map(|i| (y[i] - self.srv[i]).powi(2)).sum();
        d2.sqrt()
    }
}

/// Distinct SRVs of the positive records, the match set of
/// [`MatchMode::TargetSet`].
pub fn target_set(records: &[Record]) -> Vec<SrvLabel> {
    let set: BTreeSet<SrvLabel> = records.iter().filter(|r| r.y_e).filter_map(|r| r.srv).collect();
    set.into_iter().collect()
}

/// Distance from the SRV prediction to the closest admissible target, or
/// `None` when there is nothing to match against.
fn match_distance(pred: &Prediction, record: &Record, mode: MatchMode, targets: &[SrvLabel]) -> Option<f64> {
    match mode {
        MatchMode::TrueLabel => record.srv.map(|y| pred.distance(&y)),
        MatchMode::TargetSet => targets.iter().map(|y| pred.distance(y)).reduce(f64::min),
    }
}

/// `p_e > tau` and an admissible SRV lies strictly within `radius`.
///
/// Records without an SRV never match in true-label mode.
pub fn classify_interesting(
    pred: &Prediction,
    record: &Record,
    criterion: &InterestCriterion,
    targets: &[SrvLabel],
) -> bool {
    pred.p_e > criterion.tau
        && match_distance(pred, record, criterion.match_mode, targets).is_some_and(|d| d < criterion.radius)
}

/// 95% Wilson score interval for `successes / trials`.
pub fn wilson_interval(successes: usize, trials: usize) -> Option<(f64, f64)> {
    if trials == 0 {
        return None;
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Some(((center - half).max(0.0), (center + half).min(1.0)))
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Records that could not be matched because they carry no SRV.
    pub missing_srv: usize,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub rediscovery: Option<f64>,
    pub tpr_ci: Option<(f64, f64)>,
    pub tnr_ci: Option<(f64, f64)>,
    pub ppv_ci: Option<(f64, f64)>,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        MetricsReport {
            tp,
            tn,
            fp,
            fn_,
            missing_srv: 0,
            tpr: ratio(tp, tp + fn_),
            tnr: ratio(tn, tn + fp),
            ppv: ratio(tp, tp + fp),
            rediscovery: None,
            tpr_ci: wilson_interval(tp, tp + fn_),
            tnr_ci: wilson_interval(tn, tn + fp),
            ppv_ci: wilson_interval(tp, tp + fp),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    /// Positive prevalence of the evaluated set.
    pub fn base_rate(&self) -> Option<f64> {
        ratio(self.positives(), self.total())
    }
}

fn check_aligned(records: &[Record], predictions: &[Prediction]) -> Result<()> {
    if records.len() != predictions.len() {
        return Err(Error::Structural(format!(
            "{} records but {} predictions",
            records.len(),
            predictions.len()
        )));
    }
    Ok(())
}

/// Interesting flags for every record, computed in parallel.
pub fn interesting_flags(
    records: &[Record],
    predictions: &[Prediction],
    criterion: &InterestCriterion,
    mode: ExecMode,
) -> Result<Vec<bool>> {
    check_aligned(records, predictions)?;
    let targets = target_set(records);
    let pairs: Vec<(&Record, &Prediction)> = records.iter().zip(predictions).collect();
    Ok(exec::map_slice(mode, &pairs, |(r, p)| {
        classify_interesting(p, r, criterion, &targets)
    }))
}

fn rediscovery_from_flags(records: &[Record], flags: &[bool]) -> Option<f64> {
    let mut per_srv: BTreeMap<SrvLabel, (usize, usize)> = BTreeMap::new();
    for (r, &hit) in records.iter().zip(flags) {
        if let (true, Some(srv)) = (r.y_e, r.srv) {
            let e = per_srv.entry(srv).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    rediscovered_fraction(per_srv.values().copied())
}

fn rediscovered_fraction<I: IntoIterator<Item = (usize, usize)>>(groups: I) -> Option<f64> {
    let mut found = 0usize;
    let mut total = 0usize;
    for (hits, size) in groups {
        total += 1;
        // integer form of hits / size >= 0.2, exact at the boundary
        if 5 * hits >= size {
            found += 1;
        }
    }
    ratio(found, total)
}

/// Share of distinct positive SRVs with at least 20% of their samples
/// classified interesting; `None` without positives.
pub fn rediscovery_ratio(
    records: &[Record],
    predictions: &[Prediction],
    criterion: &InterestCriterion,
) -> Result<Option<f64>> {
    let flags = interesting_flags(records, predictions, criterion, ExecMode::Sequential)?;
    Ok(rediscovery_from_flags(records, &flags))
}

pub fn confusion(
    records: &[Record],
    predictions: &[Prediction],
    criterion: &InterestCriterion,
    mode: ExecMode,
) -> Result<MetricsReport> {
    criterion.validate()?;
    let flags = interesting_flags(records, predictions, criterion, mode)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (r, &hit) in records.iter().zip(&flags) {
        match (hit, r.y_e) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut report = MetricsReport::from_counts(tp, tn, fp, fn_);
    if criterion.match_mode == MatchMode::TrueLabel {
        report.missing_srv = records.iter().filter(|r| r.srv.is_none()).count();
    }
    report.rediscovery = rediscovery_from_flags(records, &flags);
    Ok(report)
}

// ---------------------------------------------------------------- output

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_pair(v: Option<(f64, f64)>) -> [String; 2] {
    match v {
        Some((lo, hi)) => [lo.to_string(), hi.to_string()],
        None => [String::new(), String::new()],
    }
}

pub const METRICS_HEADER: &str = "fold,tau,r,tp,tn,fp,fn,tpr,tnr,ppv,rediscovery,\
ci_tpr_low,ci_tpr_high,ci_tnr_low,ci_tnr_high,ci_ppv_low,ci_ppv_high";

/// A labeled report row, e.g. one fold of a cross-validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: String,
    pub criterion: InterestCriterion,
    pub report: MetricsReport,
}

/// `metrics.csv` contents. Undefined rates are left empty.
pub fn metrics_csv(rows: &[FoldReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for row in rows {
        let m = &row.report;
        let [tl, th] = opt_pair(m.tpr_ci);
        let [nl, nh] = opt_pair(m.tnr_ci);
        let [pl, ph] = opt_pair(m.ppv_ci);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{tl},{th},{nl},{nh},{pl},{ph}",
            row.fold,
            row.criterion.tau,
            row.criterion.radius,
            m.tp,
            m.tn,
            m.fp,
            m.fn_,
            opt(m.tpr),
            opt(m.tnr),
            opt(m.ppv),
            opt(m.rediscovery),
        );
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Plain-text per-fold table with TNR, TPR, rediscovery and precision.
pub fn summary_table(rows: &[FoldReport]) -> String {
    let mut s = format!(
        "{:<14} {:>7} {:>7} {:>8} {:>8} {:>11} {:>8}\n",
        "fold", "samples", "pos", "TNR", "TPR", "rediscovery", "PPV"
    );
    for row in rows {
        let m = &row.report;
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>7} {:>8} {:>8} {:>11} {:>8}",
            row.fold,
            m.total(),
            m.positives(),
            cell(m.tnr),
            cell(m.tpr),
            cell(m.rediscovery),
            cell(m.ppv)
        );
    }
    s
}

// ---------------------------------------------------------------- sweeps

/// Thresholds from 1.00 down to 0.00 in steps of 0.01.
pub fn tau_grid() -> Vec<f64> {
    (0..=100).rev().map(|i| i as f64 / 100.0).collect()
}

/// Radii from 0.5 to 7.0 in steps of 0.1.
pub fn radius_grid() -> Vec<f64> {
    (5..=70).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub r: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub rediscovery: Option<f64>,
}

impl SweepRow {
    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Row-major over `(r, tau)` with tau descending inside each radius.
    pub rows: Vec<SweepRow>,
    pub taus: Vec<f64>,
    pub radii: Vec<f64>,
    /// Average precision per radius; `None` without positives.
    pub average_precision: Vec<Option<f64>>,
}

impl SweepTable {
    /// Mean of the defined per-radius average precisions.
    pub fn mean_average_precision(&self) -> Option<f64> {
        let defined: Vec<f64> = self.average_precision.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn rows_for_radius(&self, ri: usize) -> &[SweepRow] {
        let t = self.taus.len();
        &self.rows[ri * t..(ri + 1) * t]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,r,tp,tn,fp,fn,tpr,tnr,ppv,rediscovery\n");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                row.tau,
                row.r,
                row.tp,
                row.tn,
                row.fp,
                row.fn_,
                opt(row.tpr()),
                opt(row.tnr()),
                opt(row.ppv()),
                opt(row.rediscovery)
            );
        }
        s
    }

    pub fn average_precision_csv(&self) -> String {
        let mut s = String::from("r,average_precision\n");
        for (r, ap) in self.radii.iter().zip(&self.average_precision) {
            let _ = writeln!(s, "{r},{}", opt(*ap));
        }
        let _ = writeln!(s, "mean,{}", opt(self.mean_average_precision()));
        s
    }
}

/// Step-wise average precision over a descending threshold sweep: the sum of
/// precision times recall increment.
pub fn average_precision(rows: &[SweepRow]) -> Option<f64> {
    let positives = rows.first().map(|r| r.tp + r.fn_)?;
    if positives == 0 {
        return None;
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for row in rows {
        let recall = row.tp as f64 / positives as f64;
        if recall > prev_recall {
            ap += (recall - prev_recall) * row.ppv().unwrap_or(0.0);
            prev_recall = recall;
        }
    }
    Some(ap)
}

/// Evaluates the criterion on every `(tau, r)` grid point from cached
/// predictions. `taus` should be descending for the average precision to be
/// meaningful.
pub fn sweep(
    records: &[Record],
    predictions: &[Prediction],
    taus: &[f64],
    radii: &[f64],
    match_mode: MatchMode,
    mode: ExecMode,
) -> Result<SweepTable> {
    check_aligned(records, predictions)?;
    let targets = target_set(records);
    let mut groups: BTreeMap<SrvLabel, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.y_e) {
        if let Some(s) = r.srv {
            let next = groups.len();
            groups.entry(s).or_insert(next);
        }
    }
    // (p_e, match distance, positive, srv group)
    let compact: Vec<(f64, Option<f64>, bool, Option<usize>)> = records
        .iter()
        .zip(predictions)
        .map(|(r, p)| {
            let group = if r.y_e { r.srv.map(|s| groups[&s]) } else { None };
            (p.p_e, match_distance(p, r, match_mode, &targets), r.y_e, group)
        })
        .collect();
    let sizes = {
        let mut v = vec![0usize; groups.len()];
        for c in &compact {
            if let Some(g) = c.3 {
                v[g] += 1;
            }
        }
        v
    };

    let per_radius = exec::map_slice(mode, radii, |&r| {
        taus.iter()
            .map(|&tau| {
                let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
                let mut hits = vec![0usize; sizes.len()];
                for &(p_e, d, pos, group) in &compact {
                    let hit = p_e > tau && d.is_some_and(|d| d < r);
                    match (hit, pos) {
                        (true, true) => tp += 1,
                        (false, false) => tn += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                    }
                    if let (true, Some(g)) = (hit, group) {
                        hits[g] += 1;
                    }
                }
                SweepRow {
                    tau,
                    r,
                    tp,
                    tn,
                    fp,
                    fn_,
                    rediscovery: rediscovered_fraction(hits.into_iter().zip(sizes.iter().copied())),
                }
            })
            .collect::<Vec<_>>()
    });
    let average_precision = per_radius.iter().map(|rows| average_precision(rows)).collect();
    Ok(SweepTable {
        rows: per_radius.into_iter().flatten().collect(),
        taus: taus.to_vec(),
        radii: radii.to_vec(),
        average_precision,
    })
}

/// Counts grid violations of the threshold monotonicity: along each radius,
/// a larger tau may not raise TPR nor lower TNR.
pub fn monotonicity_violations(table: &SweepTable) -> usize {
    let mut violations = 0;
    for ri in 0..table.radii.len() {
        let rows = table.rows_for_radius(ri);
        for a in rows {
            for b in rows.iter().filter(|b| b.tau > a.tau) {
                // strictly fewer or equal flags at the higher threshold
                if b.tp > a.tp || b.tn < a.tn {
                    violations += 1;
                }
            }
        }
    }
    violations
}

// ---------------------------------------------------------------- ccv

/// Runs both task models over `records`.
pub fn predict(
    ent: &LstmModel,
    srv: &LstmModel,
    records: &[Record],
    vocab: &Vocabulary,
    mode: ExecMode,
) -> Result<Vec<Prediction>> {
    if ent.task() != Task::Entanglement || srv.task() != Task::Srv {
        return Err(Error::Configuration("expected an entanglement and an srv model".into()));
    }
    let pe = ent.predict_batch(records, vocab, mode)?;
    let ps = srv.predict_batch(records, vocab, mode)?;
    pe.into_iter()
        .zip(ps)
        .map(|(e, s)| {
            let p = e
                .probability()
                .ok_or_else(|| Error::Structural("missing probability".into()))?;
            let srv = s.srv().ok_or_else(|| Error::Structural("missing srv output".into()))?;
            Ok(Prediction::new(p, srv))
        })
        .collect()
}

/// Which folds take part in a cluster cross-validation and which leading
/// ranks form the extrapolation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcvLayout {
    pub folds: Vec<u32>,
    /// Inclusive leading-rank range evaluated by the all-folds models.
    pub extrapolation: (u32, u32),
    /// When false only the extrapolation evaluation is run.
    pub cross_validate: bool,
}

impl Default for CcvLayout {
    fn default() -> Self {
        CcvLayout {
            folds: (0..=8).collect(),
            extrapolation: (crate::dataset::DEFAULT_EXTRAPOLATION_MIN, u32::MAX),
            cross_validate: true,
        }
    }
}

impl CcvLayout {
    fn validate(&self, records: &[Record]) -> Result<()> {
        let (lo, hi) = self.extrapolation;
        if lo > hi {
            return Err(Error::Configuration("empty extrapolation range".into()));
        }
        for f in &self.folds {
            if !records.iter().any(|r| r.fold == Some(*f)) {
                return Err(Error::Configuration(format!("fold {f} has no records")));
            }
            if (2..).contains(f) && (lo..=hi).contains(f) {
                return Err(Error::Configuration(format!(
                    "fold {f} overlaps the extrapolation ranks"
                )));
            }
        }
        Ok(())
    }
}

/// Training records of the layout's folds, without `held_out`.
pub fn training_pool(records: &[Record], folds: &[u32], held_out: Option<u32>) -> Vec<Record> {
    records
        .iter()
        .filter(|r| r.split == Split::Train)
        .filter(|r| r.fold.is_some_and(|f| folds.contains(&f) && Some(f) != held_out))
        .cloned()
        .collect()
}

fn extrapolation_records(records: &[Record], (lo, hi): (u32, u32)) -> Vec<Record> {
    records
        .iter()
        .filter(|r| (lo..=hi).contains(&r.fold_rank))
        .cloned()
        .collect()
}

#[derive(Debug, Clone)]
pub struct CcvReport {
    pub rows: Vec<FoldReport>,
}

impl CcvReport {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn summary(&self) -> String {
        summary_table(&self.rows)
    }

    pub fn row(&self, fold: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.fold == fold).map(|r| &r.report)
    }
}

fn train_pair(
    pool: &[Record],
    vocab: &Vocabulary,
    ent_cfg: &TrainConfig,
    srv_cfg: &TrainConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<(LstmModel, LstmModel)> {
    let fit = |cfg: &TrainConfig| -> Result<LstmModel> {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let init = LstmModel::new(vocab, cfg.embed, cfg.hidden, cfg.task, seed);
        model::train(init, pool, vocab, &cfg, mode)
            .map(|o| o.model)
            .map_err(|e| e.source)
    };
    Ok((fit(ent_cfg)?, fit(srv_cfg)?))
}

/// Cluster cross-validation: one model pair per held-out fold, trained on
/// the remaining folds, plus a pair trained on every fold that scores the
/// extrapolation ranks. Folds 0 and 1 are also reported merged.
pub fn ccv_run(
    records: &[Record],
    vocab: &Vocabulary,
    ent_cfg: &TrainConfig,
    srv_cfg: &TrainConfig,
    layout: &CcvLayout,
    criterion: &InterestCriterion,
    mode: ExecMode,
) -> Result<CcvReport> {
    if ent_cfg.task != Task::Entanglement || srv_cfg.task != Task::Srv {
        return Err(Error::Configuration(
            "train configs must be entanglement then srv".into(),
        ));
    }
    criterion.validate()?;
    layout.validate(records)?;
    let mut rows = Vec::new();
    let eval_rows = |name: String, eval: &[Record], ent: &LstmModel, srv: &LstmModel| -> Result<FoldReport> {
        let preds = predict(ent, srv, eval, vocab, mode)?;
        Ok(FoldReport {
            fold: name,
            criterion: *criterion,
            report: confusion(eval, &preds, criterion, mode)?,
        })
    };

    if layout.cross_validate {
        let mut low_folds: Vec<(Record, Prediction)> = Vec::new();
        for &f in &layout.folds {
            let pool = training_pool(records, &layout.folds, Some(f));
            debug_assert!(pool.iter().all(|r| r.fold != Some(f)));
            let seed = rng::mix_seed(ent_cfg.seed, f as u64);
            let (ent, srv) = train_pair(&pool, vocab, ent_cfg, srv_cfg, seed, mode)?;
            let eval: Vec<Record> = records.iter().filter(|r| r.fold == Some(f)).cloned().collect();
            let preds = predict(&ent, &srv, &eval, vocab, mode)?;
            rows.push(FoldReport {
                fold: f.to_string(),
                criterion: *criterion,
                report: confusion(&eval, &preds, criterion, mode)?,
            });
            if f < 2 {
                low_folds.extend(eval.into_iter().zip(preds));
            }
        }
        if layout.folds.contains(&0) && layout.folds.contains(&1) {
            let (recs, preds): (Vec<Record>, Vec<Prediction>) = low_folds.into_iter().unzip();
            rows.push(FoldReport {
                fold: "0+1".into(),
                criterion: *criterion,
                report: confusion(&recs, &preds, criterion, mode)?,
            });
        }
    }

    let eval = extrapolation_records(records, layout.extrapolation);
    if !eval.is_empty() {
        let pool = training_pool(records, &layout.folds, None);
        let (lo, hi) = layout.extrapolation;
        if pool.iter().any(|r| (lo..=hi).contains(&r.fold_rank)) {
            return Err(Error::Structural("extrapolation ranks leaked into training".into()));
        }
        let seed = rng::mix_seed(ent_cfg.seed, u32::MAX as u64 + 1);
        let (ent, srv) = train_pair(&pool, vocab, ent_cfg, srv_cfg, seed, mode)?;
        rows.push(eval_rows("extrapolation".into(), &eval, &ent, &srv)?);
    }
    Ok(CcvReport { rows })
}
