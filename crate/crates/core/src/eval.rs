//! ROC-AUC evaluation, variant comparison and report rendering.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{ImageError, ImageSource};
use crate::model::{view_label, BuiltModel, ModelDescriptor};
use crate::samples::SampleSet;
use crate::train::{predict_samples, TrainHistory};
use crate::vocab::{Label, NUM_LABELS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("ROC needs both classes ({positives} positives, {negatives} negatives)")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: plot rendering failed: {message}")]
    Plot { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let p = labels.iter().filter(|&&l| l).count();
    Ok((p, labels.len() - p))
}

fn order_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. `None` when either class
/// is absent.
pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, EvalError> {
    let (p, n) = check_lengths(scores, labels)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    // Rank sum of the positives with tied scores sharing their mean rank.
    let idx = order_ascending(scores);
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let positives = idx[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += mid_rank * positives as f64;
        start = end;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(Some(u / (p as f64 * n as f64)))
}

/// ROC points from (0, 0) to (1, 1), one per distinct score threshold taken
/// in descending order.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (p, n) = check_lengths(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(EvalError::DegenerateClasses {
            positives: p,
            negatives: n,
        });
    }
    let mut idx = order_ascending(scores);
    idx.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let threshold = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == threshold {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub label: Label,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Empty when the AUC is undefined.
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub descriptor: ModelDescriptor,
    pub sample_count: usize,
    /// One entry per vocabulary label, in vocabulary order.
    pub labels: Vec<LabelResult>,
}

impl EvalReport {
    pub fn auc(&self, label: Label) -> Option<f64> {
        self.labels[label.index()].auc
    }

    /// Mean over labels whose AUC is defined; `None` if there are none.
    pub fn mean_defined_auc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.labels.iter().filter_map(|l| l.auc).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Scores each label column of `probs` against one-hot truth from the
/// samples' target labels.
pub fn evaluate_predictions(descriptor: ModelDescriptor, probs: &Array2<f64>, samples: &[SampleSet]) -> EvalReport {
    assert_eq!(probs.dim(), (samples.len(), NUM_LABELS), "prediction matrix shape");
    let labels = Label::all()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|label| {
            let scores: Vec<f64> = probs.column(label.index()).to_vec();
            let truth: Vec<bool> = samples.iter().map(|s| s.target_label == label).collect();
            let auc = auc_score(&scores, &truth).expect("equal lengths");
            let n_pos = truth.iter().filter(|&&t| t).count();
            LabelResult {
                label,
                auc,
                n_pos,
                n_neg: truth.len() - n_pos,
                roc: auc.map_or_else(Vec::new, |_| roc_curve(&scores, &truth).expect("both classes")),
            }
        })
        .collect();
    EvalReport {
        descriptor,
        sample_count: samples.len(),
        labels,
    }
}

/// Inference over `test` and per-label AUCs. The descriptor's view is the
/// view of the evaluated samples.
pub fn evaluate_model(
    model: &BuiltModel,
    test: &[SampleSet],
    source: &dyn ImageSource,
    batch_size: usize,
) -> Result<EvalReport, ImageError> {
    let probs = predict_samples(model, test, source, batch_size)?;
    let descriptor = model.descriptor(view_label(test.iter().map(|s| &s.view)));
    Ok(evaluate_predictions(descriptor, &probs, test))
}

/// Row order of the printed AUC tables.
pub const TABLE_ROW_ORDER: [&str; NUM_LABELS] = [
    "No Finding",
    "Atelectasis",
    "Consolidation",
    "Infiltration",
    "Pneumothorax",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Effusion",
    "Pneumonia",
    "Pleural_Thickening",
    "Cardiomegaly",
    "Nodule",
    "Mass",
    "Hernia",
];

fn table_rows() -> impl Iterator<Item = Label> {
    TABLE_ROW_ORDER.iter().map(|n| Label::parse(n).expect("vocabulary label"))
}

pub fn format_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"))
}

/// Per-label AUCs side by side, one column per report.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<ModelDescriptor>,
    /// Table row order, each row holding one cell per column.
    pub rows: Vec<(Label, Vec<Option<f64>>)>,
}

impl ComparisonTable {
    /// Per-label `column b − column a`; undefined if either side is.
    pub fn deltas(&self, a: usize, b: usize) -> Vec<(Label, Option<f64>)> {
        self.rows
            .iter()
            .map(|(l, cells)| (*l, cells[a].zip(cells[b]).map(|(x, y)| y - x)))
            .collect()
    }

    pub fn render(&self, header: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "{header:<20}");
        for c in &self.columns {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{:<20}", label.name());
            for cell in cells {
                let _ = write!(out, "\t{}", format_auc(*cell));
            }
            out.push('\n');
        }
        out
    }
}

pub fn compare_variants(reports: &[EvalReport]) -> ComparisonTable {
    ComparisonTable {
        columns: reports.iter().map(|r| r.descriptor.clone()).collect(),
        rows: table_rows().map(|l| (l, reports.iter().map(|r| r.auc(l)).collect())).collect(),
    }
}

/// Per-label CSV: `label,auc,n_pos,n_neg`, vocabulary order, full precision,
/// empty auc cell when undefined.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("label,auc,n_pos,n_neg\n");
    for l in &report.labels {
        let auc = l.auc.map_or_else(String::new, |a| format!("{a}"));
        let _ = writeln!(out, "{},{auc},{},{}", l.label.name(), l.n_pos, l.n_neg);
    }
    write_file(path, out)
}

/// `(label, auc, n_pos, n_neg)`.
pub type ReportRow = (Label, Option<f64>, usize, usize);

/// Reads a report CSV back as rows.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| EvalError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("label,auc,n_pos,n_neg") {
        return Err(parse_err("unexpected header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse_err(format!("bad row {line:?}")));
            }
            let label = Label::parse(f[0]).ok_or_else(|| parse_err(format!("unknown label {:?}", f[0])))?;
            let auc = if f[1].is_empty() {
                None
            } else {
                Some(f[1].parse().map_err(|e| parse_err(format!("auc {:?}: {e}", f[1])))?)
            };
            let count = |s: &str| s.parse().map_err(|e| parse_err(format!("count {s:?}: {e}")));
            Ok((label, auc, count(f[2])?, count(f[3])?))
        })
        .collect()
}

fn write_file(path: &Path, contents: String) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const PALETTE: [RGBColor; 15] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
    RGBColor(188, 189, 34),
    RGBColor(23, 190, 207),
    RGBColor(0, 0, 128),
    RGBColor(128, 0, 0),
    RGBColor(0, 128, 128),
    RGBColor(128, 128, 0),
    RGBColor(0, 0, 0),
];

fn plot_err(path: &Path) -> impl Fn(String) -> EvalError + '_ {
    move |message| EvalError::Plot {
        path: path.to_path_buf(),
        message,
    }
}

pub fn plot_roc(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ROC", report.descriptor), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1f64)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("False positive rate")
        .y_desc("True positive rate")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3)))
        .map_err(|e| err(e.to_string()))?;
    for l in report.labels.iter().filter(|l| l.auc.is_some()) {
        let color = PALETTE[l.label.index()];
        chart
            .draw_series(LineSeries::new(l.roc.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(format!("{} ({})", l.label.name(), format_auc(l.auc)))
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

pub fn plot_loss(history: &TrainHistory, path: &Path) -> Result<(), EvalError> {
    let err = plot_err(path);
    let train = history.train_losses();
    let val: Vec<(f64, f64)> = history
        .epochs
        .iter()
        .filter_map(|e| e.validation_loss.map(|l| (e.epoch as f64, l)))
        .collect();
    let top = train
        .iter()
        .chain(val.iter().map(|(_, l)| l))
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-3)
        * 1.1;
    let last = history.len().max(2) as f64;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} loss vs epochs", history.descriptor), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(1f64..last, 0f64..top)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("Epoch")
        .y_desc("Binary cross-entropy")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let blue = PALETTE[0];
    chart
        .draw_series(LineSeries::new(
            train.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)),
            blue.stroke_width(2),
        ))
        .map_err(|e| err(e.to_string()))?
        .label("train")
        .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], blue.stroke_width(2)));
    if !val.is_empty() {
        let orange = PALETTE[1];
        chart
            .draw_series(LineSeries::new(val, orange.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label("validation")
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], orange.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Files written by [`render_report`], in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderedFiles {
    pub tables: Vec<PathBuf>,
    pub roc_plots: Vec<PathBuf>,
    pub loss_plots: Vec<PathBuf>,
    pub summaries: Vec<PathBuf>,
}

impl RenderedFiles {
    pub fn len(&self) -> usize {
        self.tables.len() + self.roc_plots.len() + self.loss_plots.len() + self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes, under `dir`:
/// - `{stem}.csv` and `{stem}_roc.svg` per report,
/// - `{stem}_loss.svg` per history,
/// - `auc_tables.txt` (reports grouped by view, LSTM and branch count, one
///   backbone per column) and, with two or more reports, `comparison.txt`.
///
/// Nothing is written (and `dir` is not created) when both lists are empty.
pub fn render_report(reports: &[EvalReport], histories: &[TrainHistory], dir: &Path) -> Result<RenderedFiles, EvalError> {
    let mut files = RenderedFiles::default();
    if reports.is_empty() && histories.is_empty() {
        return Ok(files);
    }
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for r in reports {
        let stem = r.descriptor.stem();
        let csv = dir.join(format!("{stem}.csv"));
        write_report_csv(r, &csv)?;
        files.tables.push(csv);
        let roc = dir.join(format!("{stem}_roc.svg"));
        plot_roc(r, &roc)?;
        files.roc_plots.push(roc);
    }
    for h in histories {
        let loss = dir.join(format!("{}_loss.svg", h.descriptor.stem()));
        plot_loss(h, &loss)?;
        files.loss_plots.push(loss);
    }
    if !reports.is_empty() {
        let mut groups: BTreeMap<(String, bool, usize), Vec<EvalReport>> = BTreeMap::new();
        for r in reports {
            let d = &r.descriptor;
            groups.entry((d.view.clone(), d.use_lstm, d.branches)).or_default().push(r.clone());
        }
        let mut text = String::new();
        for ((view, lstm, branches), group) in groups {
            let _ = writeln!(
                text,
                "{view} {} LSTM AUC Scores ({branches} image{})\n",
                if lstm { "with" } else { "without" },
                if branches == 1 { "" } else { "s" }
            );
            let table = compare_variants(&group);
            let mut out = format!("{:<20}", "Finding Labels");
            for d in &table.columns {
                let _ = write!(out, "\t{}", d.backbone);
            }
            out.push('\n');
            out.push_str(table.render("").split_once('\n').map_or("", |(_, rows)| rows));
            text.push_str(&out);
            text.push('\n');
        }
        let path = dir.join("auc_tables.txt");
        write_file(&path, text)?;
        files.summaries.push(path);
    }
    if reports.len() >= 2 {
        let path = dir.join("comparison.txt");
        write_file(&path, compare_variants(reports).render("Labels"))?;
        files.summaries.push(path);
    }
    Ok(files)
}
