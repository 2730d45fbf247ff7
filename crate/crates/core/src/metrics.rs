//! Confusion matrices, classification metrics, percentage deltas against a
//! baseline strategy, and FN/FP chart data.
//!
//! The positive class is "manipulative". Any 0/0 ratio is taken as 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label};
use crate::pipeline::{Prediction, RunOutcome, Strategy};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no gold label for dialogue {0:?}")]
    MissingLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("baseline {0} not among the reports")]
    MissingBaseline(Strategy),
    #[error("strategy {0} reported twice")]
    DuplicateStrategy(Strategy),
    #[error("need at least {0} report(s)")]
    TooFewReports(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, gold: Label) {
        match (predicted, gold) {
            (true, Label::Manipulative) => self.tp += 1,
            (true, Label::NonManipulative) => self.fp += 1,
            (false, Label::Manipulative) => self.fn_ += 1,
            (false, Label::NonManipulative) => self.tn += 1,
        }
    }
}

/// Counts scored predictions against gold labels. Errored predictions carry
/// no verdict and are skipped; invalid ones count with their default `r`.
pub fn confusion(
    predictions: &[Prediction],
    gold: &HashMap<String, Label>,
) -> Result<ConfusionMatrix, MetricsError> {
    let mut cm = ConfusionMatrix::default();
    for p in predictions.iter().filter(|p| !p.is_errored()) {
        let label = gold
            .get(&p.dialogue_id)
            .ok_or_else(|| MetricsError::MissingLabel(p.dialogue_id.clone()))?;
        cm.add(p.r == 1, *label);
    }
    Ok(cm)
}

pub fn gold_labels(corpus: &Corpus) -> HashMap<String, Label> {
    corpus
        .dialogues()
        .iter()
        .filter_map(|d| d.gold_label.map(|l| (d.id.clone(), l)))
        .collect()
}

/// How the single precision/recall columns are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Binary metrics of the manipulative class.
    #[default]
    Positive,
    /// Support-weighted mean over both classes.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_weighted: f64,
    pub f1_macro: f64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        tracing::warn!("0/0 metric ratio taken as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    compute_metrics_with(cm, Averaging::Positive)
}

pub fn compute_metrics_with(
    cm: &ConfusionMatrix,
    averaging: Averaging,
) -> Result<MetricsReport, MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let ConfusionMatrix { tp, fp, fn_, tn } = *cm;
    let (pos_p, pos_r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let (neg_p, neg_r) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
    let (pos_f1, neg_f1) = (harmonic(pos_p, pos_r), harmonic(neg_p, neg_r));
    let (pos_w, neg_w) = ((tp + fn_) as f64 / n as f64, (fp + tn) as f64 / n as f64);
    let (precision, recall) = match averaging {
        Averaging::Positive => (pos_p, pos_r),
        Averaging::Weighted => (pos_w * pos_p + neg_w * neg_p, pos_w * pos_r + neg_w * neg_r),
    };
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / n as f64,
        precision,
        recall,
        f1_weighted: pos_w * pos_f1 + neg_w * neg_f1,
        f1_macro: (pos_f1 + neg_f1) / 2.0,
        fn_,
        fp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[serde(rename = "fn")]
    Fn,
    Fp,
    Accuracy,
    Precision,
    Recall,
    F1Weighted,
    F1Macro,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Fn,
        Metric::Fp,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1Weighted,
        Metric::F1Macro,
    ];

    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Fn | Metric::Fp)
    }

    pub fn header(self) -> &'static str {
        match self {
            Metric::Fn => "FN↓",
            Metric::Fp => "FP↓",
            Metric::Accuracy => "Accuracy↑",
            Metric::Precision => "Precision↑",
            Metric::Recall => "Recall↑",
            Metric::F1Weighted => "F1 Weighted↑",
            Metric::F1Macro => "F1 Macro↑",
        }
    }

    pub fn value(self, r: &MetricsReport) -> f64 {
        match self {
            Metric::Fn => r.fn_ as f64,
            Metric::Fp => r.fp as f64,
            Metric::Accuracy => r.accuracy,
            Metric::Precision => r.precision,
            Metric::Recall => r.recall,
            Metric::F1Weighted => r.f1_weighted,
            Metric::F1Macro => r.f1_macro,
        }
    }

    fn format_value(self, v: f64) -> String {
        if self.lower_is_better() {
            format!("{v:.0}")
        } else {
            format!("{v:.3}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Better,
    Worse,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub metric: Metric,
    pub baseline: f64,
    pub method: f64,
    /// `None` when the baseline value is 0.
    pub pct_change: Option<f64>,
    /// `pct_change` as rendered: one decimal, half away from zero.
    pub rendered: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub entries: Vec<DeltaEntry>,
}

impl DeltaReport {
    pub fn get(&self, metric: Metric) -> &DeltaEntry {
        self.entries
            .iter()
            .find(|e| e.metric == metric)
            .expect("all metrics present")
    }
}

/// Rounds to one decimal, halves away from zero. A tolerance of 1e-9 keeps
/// binary representation error from flipping a tie.
pub fn round_half_up_1dp(x: f64) -> f64 {
    let scaled = x.abs() * 10.0;
    let rounded = (scaled + 0.5 + 1e-9).floor() / 10.0;
    if rounded == 0.0 {
        0.0
    } else {
        rounded.copysign(x)
    }
}

pub fn format_pct(pct: Option<f64>) -> String {
    match pct.map(round_half_up_1dp) {
        None => "n/a".into(),
        Some(v) if v > 0.0 => format!("+{v:.1}%"),
        Some(v) => format!("{v:.1}%"),
    }
}

/// Percentage change of every metric from `baseline` to `method`.
pub fn delta_report(baseline: &MetricsReport, method: &MetricsReport) -> DeltaReport {
    let entries = Metric::ALL
        .iter()
        .map(|&metric| {
            let (b, m) = (metric.value(baseline), metric.value(method));
            let pct_change = (b != 0.0).then(|| 100.0 * (m - b) / b);
            let change = m - b;
            let direction = if change == 0.0 {
                Direction::Unchanged
            } else if (change < 0.0) == metric.lower_is_better() {
                Direction::Better
            } else {
                Direction::Worse
            };
            DeltaEntry {
                metric,
                baseline: b,
                method: m,
                pct_change,
                rendered: format_pct(pct_change),
                direction,
            }
        })
        .collect();
    DeltaReport { entries }
}

/// Per-strategy result written to `metrics/<strategy>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(default)]
    pub total: usize,
    /// Verdicts that stayed unparseable after the retry and defaulted to 0.
    #[serde(default)]
    pub invalid: usize,
    /// Dialogues excluded from scoring because their calls failed.
    #[serde(default)]
    pub errored: usize,
    #[serde(default)]
    pub averaging: Averaging,
}

impl StrategyReport {
    pub fn from_outcome(
        outcome: &RunOutcome,
        gold: &HashMap<String, Label>,
        averaging: Averaging,
    ) -> Result<Self, MetricsError> {
        let cm = confusion(&outcome.predictions, gold)?;
        Ok(Self {
            strategy: outcome.strategy,
            metrics: compute_metrics_with(&cm, averaging)?,
            confusion: Some(cm),
            total: outcome.predictions.len(),
            invalid: outcome.invalid(),
            errored: outcome.errored(),
            averaging,
        })
    }

    pub fn from_metrics(strategy: Strategy, metrics: MetricsReport) -> Self {
        Self {
            strategy,
            metrics,
            confusion: None,
            total: 0,
            invalid: 0,
            errored: 0,
            averaging: Averaging::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub metrics: MetricsReport,
    /// Absent for the baseline row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<DeltaReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: Strategy,
    pub rows: Vec<ComparisonRow>,
}

/// Builds a comparison of every report against `baseline`, rows ordered
/// zero-shot, few-shot, CoT, IAP.
pub fn compare(
    reports: &[(Strategy, MetricsReport)],
    baseline: Strategy,
) -> Result<ComparisonTable, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(2));
    }
    let mut by_strategy = BTreeMap::new();
    for (s, r) in reports {
        if by_strategy.insert(*s, *r).is_some() {
            return Err(MetricsError::DuplicateStrategy(*s));
        }
    }
    let base = *by_strategy
        .get(&baseline)
        .ok_or(MetricsError::MissingBaseline(baseline))?;
    let rows = by_strategy
        .into_iter()
        .map(|(strategy, metrics)| ComparisonRow {
            strategy,
            metrics,
            deltas: (strategy != baseline).then(|| delta_report(&base, &metrics)),
        })
        .collect();
    Ok(ComparisonTable { baseline, rows })
}

impl ComparisonTable {
    /// Column-aligned Markdown table; each metric has a value column and a
    /// delta column.
    pub fn to_markdown(&self) -> String {
        let mut header = vec!["Method".to_string()];
        for m in Metric::ALL {
            header.push(m.header().to_string());
            header.push("Δ".to_string());
        }
        let mut rows = vec![header];
        for row in &self.rows {
            let mut cells = vec![row.strategy.display_name().to_string()];
            for m in Metric::ALL {
                cells.push(m.format_value(m.value(&row.metrics)));
                cells.push(match &row.deltas {
                    Some(d) => d.get(m).rendered.clone(),
                    None => "-".into(),
                });
            }
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::from("|");
            for (c, w) in cells.iter().zip(&widths) {
                let pad = w - c.chars().count();
                let _ = write!(s, " {c}{} |", " ".repeat(pad));
            }
            s
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Baseline: {}. Δ is the percentage change from the baseline.\n",
            self.baseline.display_name()
        );
        out.push_str(&line(&rows[0]));
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&line(&rule).replace(" ", "-"));
        out.push('\n');
        for r in &rows[1..] {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnFpRecord {
    pub strategy: Strategy,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
}

pub fn fnfp_records(reports: &BTreeMap<Strategy, MetricsReport>) -> Vec<FnFpRecord> {
    reports
        .iter()
        .map(|(s, r)| FnFpRecord {
            strategy: *s,
            fn_: r.fn_,
            fp: r.fp,
        })
        .collect()
}

/// Writes FN/FP chart data as a JSON array, one record per strategy.
pub fn emit_fnfp_chart(
    reports: &BTreeMap<Strategy, MetricsReport>,
    out_path: &Path,
) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(&fnfp_records(reports))?;
    text.push('\n');
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    fn pred(id: &str, r: u8) -> Prediction {
        Prediction {
            dialogue_id: id.into(),
            strategy: Strategy::ZeroShot,
            r,
            raw_text: String::new(),
            valid: true,
            n_llm_calls: 1,
            intents: None,
            error: None,
        }
    }

    #[test]
    fn confusion_counts() {
        let gold: HashMap<String, Label> = [
            ("a", Label::Manipulative),
            ("b", Label::Manipulative),
            ("c", Label::NonManipulative),
            ("d", Label::NonManipulative),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let all_right = [pred("a", 1), pred("b", 1), pred("c", 0), pred("d", 0)];
        assert_eq!(confusion(&all_right, &gold).unwrap(), cm(2, 0, 0, 2));
        let all_yes = [pred("a", 1), pred("c", 1)];
        assert_eq!(confusion(&all_yes, &gold).unwrap(), cm(1, 1, 0, 0));
        assert!(matches!(
            confusion(&[pred("zz", 1)], &gold),
            Err(MetricsError::MissingLabel(_))
        ));
    }

    #[test]
    fn errored_predictions_are_not_scored() {
        let gold = [("a".to_string(), Label::Manipulative)].into_iter().collect();
        let mut p = pred("a", 0);
        p.error = Some("boom".into());
        assert_eq!(confusion(&[p], &gold).unwrap().total(), 0);
    }

    #[test]
    fn confusion_matches_recount() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 1000;
        let mut gold = HashMap::new();
        let mut preds = Vec::new();
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for i in 0..n {
            let id = format!("d{i}");
            let g: bool = rng.gen();
            let r: bool = rng.gen();
            gold.insert(
                id.clone(),
                if g { Label::Manipulative } else { Label::NonManipulative },
            );
            preds.push(pred(&id, r as u8));
            match (r, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        assert_eq!(confusion(&preds, &gold).unwrap(), cm(tp, fp, fn_, tn));
    }

    #[test]
    fn perfect_classifier() {
        let m = compute_metrics(&cm(1, 0, 0, 1)).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1_weighted, m.f1_macro] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn hand_computed_example() {
        let m = compute_metrics(&cm(3, 1, 2, 4)).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        // Class F1s 2/3 and 8/11; equal supports of 5.
        let macro_ = (2.0 / 3.0 + 8.0 / 11.0) / 2.0;
        assert!((m.f1_macro - macro_).abs() < 1e-12);
        assert!((m.f1_macro - 0.6970).abs() < 5e-5);
        assert_eq!(m.f1_weighted, m.f1_macro);
    }

    #[test]
    fn degenerate_positive_class() {
        let m = compute_metrics(&cm(0, 0, 5, 5)).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (0.0, 0.0, 0.5));
    }

    #[test]
    fn empty_matrix() {
        assert!(matches!(compute_metrics(&cm(0, 0, 0, 0)), Err(MetricsError::EmptyMatrix)));
    }

    #[test]
    fn weighted_averaging() {
        let m = compute_metrics_with(&cm(3, 1, 2, 4), Averaging::Weighted).unwrap();
        // Supports 5/5: mean of (0.75, 4/6) and (0.6, 0.8).
        assert!((m.precision - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((m.recall - 0.7).abs() < 1e-12);
    }

    fn report(fn_: u64, fp: u64, vals: [f64; 5]) -> MetricsReport {
        MetricsReport {
            accuracy: vals[0],
            precision: vals[1],
            recall: vals[2],
            f1_weighted: vals[3],
            f1_macro: vals[4],
            fn_,
            fp,
        }
    }

    #[test]
    fn deltas_from_table_cells() {
        let zs = report(187, 96, [0.677, 0.813, 0.691, 0.687, 0.649]);
        let iap = report(130, 110, [0.726, 0.812, 0.785, 0.728, 0.685]);
        let d = delta_report(&zs, &iap);
        assert_eq!(d.get(Metric::Fn).rendered, "-30.5%");
        assert_eq!(d.get(Metric::Fn).direction, Direction::Better);
        assert_eq!(d.get(Metric::Fp).rendered, "+14.6%");
        assert_eq!(d.get(Metric::Fp).direction, Direction::Worse);
        assert_eq!(d.get(Metric::Recall).rendered, "+13.6%");
        assert_eq!(d.get(Metric::Recall).direction, Direction::Better);
        assert_eq!(d.get(Metric::Precision).rendered, "-0.1%");
        assert_eq!(d.get(Metric::Precision).direction, Direction::Worse);
    }

    #[test]
    fn zero_baseline_is_undefined() {
        let a = report(0, 3, [0.5; 5]);
        let b = report(2, 3, [0.5; 5]);
        let d = delta_report(&a, &b);
        assert_eq!(d.get(Metric::Fn).pct_change, None);
        assert_eq!(d.get(Metric::Fn).rendered, "n/a");
        assert_eq!(d.get(Metric::Fp).rendered, "0.0%");
        assert_eq!(d.get(Metric::Fp).direction, Direction::Unchanged);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up_1dp(0.25), 0.3);
        assert_eq!(round_half_up_1dp(-0.25), -0.3);
        assert_eq!(round_half_up_1dp(-0.04), 0.0);
        assert_eq!(format_pct(Some(-0.04)), "0.0%");
        assert_eq!(format_pct(Some(1.449)), "+1.4%");
    }

    #[test]
    fn compare_needs_baseline() {
        let r = report(1, 1, [0.5; 5]);
        assert!(matches!(
            compare(&[(Strategy::FewShot, r), (Strategy::Cot, r)], Strategy::ZeroShot),
            Err(MetricsError::MissingBaseline(Strategy::ZeroShot))
        ));
        let t = compare(&[(Strategy::Iap, r), (Strategy::ZeroShot, r)], Strategy::ZeroShot).unwrap();
        assert_eq!(t.rows[0].strategy, Strategy::ZeroShot);
        assert_eq!(t.rows.iter().filter(|r| r.deltas.is_some()).count(), 1);
        let md = t.to_markdown();
        assert!(md.contains("| Zero-Shot "));
        assert!(md.contains("0.0%"));
    }

    #[test]
    fn chart_order_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut reports = BTreeMap::new();
        reports.insert(Strategy::FewShot, report(180, 94, [0.5; 5]));
        reports.insert(Strategy::ZeroShot, report(187, 96, [0.5; 5]));
        let path = dir.path().join("fnfp.json");
        emit_fnfp_chart(&reports, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let recs: Vec<FnFpRecord> = serde_json::from_slice(&first).unwrap();
        assert_eq!(
            recs,
            [
                FnFpRecord { strategy: Strategy::ZeroShot, fn_: 187, fp: 96 },
                FnFpRecord { strategy: Strategy::FewShot, fn_: 180, fp: 94 },
            ]
        );
        emit_fnfp_chart(&reports, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
