//! Audit report assembly: a schema-versioned JSON document plus CSV sidecars
//! for every table a metric was computed from.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aia::{write_windows, AiaAggregate, WindowResult};
use crate::error::{Error, Result};
use crate::metrics::RocCurve;
use crate::mia::write_scores;
use crate::pipeline::{CorrelationBlock, Exclusion, LinkOutcome, MetricBlock, MiaOutcome, ParityBlock, Scenario};

pub const SCHEMA_VERSION: u32 = 1;
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FATAL: i32 = 1;
    pub const DEGENERATE: i32 = 2;
    pub const USAGE: i32 = 64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPathPoint {
    /// `None` stands for the opening `+inf` threshold.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaBlock {
    pub auroc: f64,
    pub tpr_at_0_1: f64,
    pub tpr_at_top25: f64,
    pub roc_path: Vec<RocPathPoint>,
}

fn roc_path(curve: &RocCurve) -> Vec<RocPathPoint> {
    curve
        .points
        .iter()
        .zip(&curve.thresholds)
        .map(|(p, &t)| RocPathPoint {
            threshold: t.is_finite().then_some(t),
            fpr: p.fpr,
            tpr: p.tpr,
        })
        .collect()
}

impl From<&MetricBlock> for MiaBlock {
    fn from(m: &MetricBlock) -> Self {
        Self {
            auroc: m.auroc,
            tpr_at_0_1: m.tpr_at_0_1,
            tpr_at_top25: m.tpr_at_top25,
            roc_path: roc_path(&m.roc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub q: f64,
    pub n_ranked: usize,
    pub n_selected: usize,
    pub members_selected: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSummary {
    pub mia: Vec<Exclusion>,
    pub linked: Vec<Exclusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub scenario: Option<Scenario>,
    pub mia: Option<MiaBlock>,
    pub naive: Option<MiaBlock>,
    pub theta: Option<f64>,
    pub n_flagged: Option<usize>,
    pub aia_all: Option<AiaAggregate>,
    pub aia_topq: Option<AiaAggregate>,
    pub aia_eval_all: Option<AiaAggregate>,
    pub aia_eval_topq: Option<AiaAggregate>,
    pub correlation: Option<CorrelationBlock>,
    pub parity: Option<ParityBlock>,
    pub selection: Option<SelectionSummary>,
    pub exclusions: ExclusionSummary,
    pub warnings: Vec<String>,
    /// Blocks or inputs that came out degenerate; non-empty means exit 2.
    pub degenerate: Vec<String>,
    pub sidecars: Vec<String>,
    pub config_echo: Value,
}

impl AuditReport {
    pub fn new(scenario: Option<Scenario>, config_echo: Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario,
            mia: None,
            naive: None,
            theta: None,
            n_flagged: None,
            aia_all: None,
            aia_topq: None,
            aia_eval_all: None,
            aia_eval_topq: None,
            correlation: None,
            parity: None,
            selection: None,
            exclusions: ExclusionSummary::default(),
            warnings: Vec::new(),
            degenerate: Vec::new(),
            sidecars: Vec::new(),
            config_echo,
        }
    }

    pub fn add_mia(&mut self, out: &MiaOutcome) {
        self.mia = out.lbrm.as_ref().map(MiaBlock::from);
        self.naive = out.naive.as_ref().map(MiaBlock::from);
        if let Some(d) = &out.decisions {
            self.theta = Some(d.theta);
            self.n_flagged = Some(d.decisions.iter().filter(|m| m.is_member()).count());
        }
        self.exclusions.mia = out.excluded.clone();
        self.degenerate.extend(out.notes.iter().cloned());
        if !out.excluded.is_empty() {
            self.degenerate
                .push(format!("mia: {} series excluded", out.excluded.len()));
        }
    }

    pub fn add_link(&mut self, out: &LinkOutcome) {
        let check = |name: &str, agg: &AiaAggregate, degenerate: &mut Vec<String>| {
            if agg.precision_mean.is_none() {
                degenerate.push(format!("{name}: no window produced a predicted peak"));
            }
        };
        check("aia_all", &out.aia_all, &mut self.degenerate);
        check("aia_topq", &out.aia_topq, &mut self.degenerate);
        self.aia_all = Some(out.aia_all.clone());
        self.aia_topq = Some(out.aia_topq.clone());
        self.aia_eval_all = out.aia_eval_all.clone();
        self.aia_eval_topq = out.aia_eval_topq.clone();
        for (name, stat) in [("precision", &out.correlation.precision), ("recall", &out.correlation.recall)] {
            if let Some(note) = &stat.note {
                self.degenerate.push(format!("correlation with {name}: {note}"));
            }
        }
        self.correlation = Some(out.correlation.clone());
        self.selection = out.selection.as_ref().map(|s| SelectionSummary {
            q: s.q,
            n_ranked: s.ranked_ids.len(),
            n_selected: s.selected_ids.len(),
            members_selected: out.links.first().and_then(|l| l.member).map(|_| {
                out.links
                    .iter()
                    .filter(|l| l.member == Some(true) && s.selected_ids.contains(&l.score.series_id))
                    .count()
            }),
        });
        self.exclusions.linked = out.skipped.clone();
        if !out.skipped.is_empty() {
            self.degenerate
                .push(format!("linked attack: {} series skipped", out.skipped.len()));
        }
    }

    pub fn add_parity(&mut self, parity: ParityBlock) {
        if let Some(w) = &parity.warning {
            self.warnings.push(w.clone());
        }
        self.parity = Some(parity);
    }

    pub fn exit_code(&self) -> i32 {
        if self.degenerate.is_empty() {
            exit::OK
        } else {
            exit::DEGENERATE
        }
    }

    /// Pretty JSON with every float rounded to [`SIGNIFICANT_DIGITS`].
    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        round_floats(&mut v, SIGNIFICANT_DIGITS);
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

/// Rounds every non-integer number in `v` to `digits` significant digits.
pub fn round_floats(v: &mut Value, digits: usize) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), x)
                .parse()
                .expect("formatted float parses");
            if let Some(r) = serde_json::Number::from_f64(rounded) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|i| round_floats(i, digits)),
        Value::Object(map) => map.values_mut().for_each(|i| round_floats(i, digits)),
        _ => {}
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `threshold,fpr,tpr`; the opening threshold is written as `inf`.
pub fn write_roc_to<W: Write>(writer: W, curve: &RocCurve) -> Result<()> {
    let mut w = csv_writer(writer);
    w.write_record(["threshold", "fpr", "tpr"])?;
    for (p, t) in curve.points.iter().zip(&curve.thresholds) {
        w.write_record([t.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<roc csv>", e))?;
    Ok(())
}

pub fn write_roc(path: impl AsRef<Path>, curve: &RocCurve) -> Result<()> {
    write_roc_to(create(path.as_ref())?, curve)
}

/// `rank,series_id,ratio,selected,member` in ascending-ratio order.
pub fn write_selection(path: impl AsRef<Path>, out: &LinkOutcome) -> Result<()> {
    let Some(sel) = &out.selection else {
        return Ok(());
    };
    let by_id: std::collections::HashMap<&str, &crate::pipeline::SeriesLink> =
        out.links.iter().map(|l| (l.score.series_id.as_str(), l)).collect();
    let mut w = csv_writer(create(path.as_ref())?);
    w.write_record(["rank", "series_id", "ratio", "selected", "member"])?;
    for (rank, id) in sel.ranked_ids.iter().enumerate() {
        let link = by_id[id.as_str()];
        let member = link.member.map(|m| u8::from(m).to_string()).unwrap_or_default();
        w.write_record([
            (rank + 1).to_string(),
            id.clone(),
            link.score.ratio.to_string(),
            u8::from(rank < sel.selected_ids.len()).to_string(),
            member,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// One row per linked series, in input order.
pub fn write_links(path: impl AsRef<Path>, out: &LinkOutcome) -> Result<()> {
    let mut w = csv_writer(create(path.as_ref())?);
    w.write_record([
        "series_id",
        "member",
        "loss_target",
        "loss_reference",
        "ratio",
        "seen_start",
        "seen_width",
        "unseen_start",
        "unseen_width",
        "precision",
        "recall",
        "eval_precision",
        "eval_recall",
    ])?;
    for l in &out.links {
        let s = &l.score;
        w.write_record([
            s.series_id.clone(),
            l.member.map(|m| u8::from(m).to_string()).unwrap_or_default(),
            s.loss_target.to_string(),
            s.loss_reference.to_string(),
            s.ratio.to_string(),
            s.mask_used.start.to_string(),
            s.mask_used.width.to_string(),
            l.unseen_window.start.to_string(),
            l.unseen_window.width.to_string(),
            opt(l.target_window.precision),
            opt(l.target_window.recall),
            opt(l.eval_window.as_ref().and_then(|w| w.precision)),
            opt(l.eval_window.as_ref().and_then(|w| w.recall)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Writes the sidecars for whatever stages ran and returns their file names.
pub fn write_sidecars(dir: &Path, mia: Option<&MiaOutcome>, link: Option<&LinkOutcome>) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    let mut record = |name: &str| -> PathBuf {
        names.push(name.to_string());
        dir.join(name)
    };
    if let Some(m) = mia {
        let labels: Option<Vec<Option<bool>>> = m.labels.as_ref().map(|l| l.iter().map(|&b| Some(b)).collect());
        write_scores(record("scores.csv"), &m.scores, labels.as_deref())?;
        if let Some(b) = &m.lbrm {
            write_roc(record("roc_lbrm.csv"), &b.roc)?;
        }
        if let Some(b) = &m.naive {
            write_roc(record("roc_naive.csv"), &b.roc)?;
        }
    }
    if let Some(l) = link {
        write_links(record("linked_series.csv"), l)?;
        if l.selection.is_some() {
            write_selection(record("risk_selection.csv"), l)?;
        }
        let target: Vec<WindowResult> = l.links.iter().map(|x| x.target_window.clone()).collect();
        write_windows(record("aia_unseen_windows.csv"), &target)?;
        if l.aia_eval_all.is_some() {
            let eval: Vec<WindowResult> = l.links.iter().filter_map(|x| x.eval_window.clone()).collect();
            write_windows(record("aia_unseen_windows_eval.csv"), &eval)?;
        }
    }
    Ok(names)
}

pub fn write_json(path: impl AsRef<Path>, json: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// `curve,threshold,fpr,tpr` for every ROC path in the report.
pub fn render_roc_table<W: Write>(writer: W, report: &AuditReport) -> Result<()> {
    let mut w = csv_writer(writer);
    w.write_record(["curve", "threshold", "fpr", "tpr"])?;
    for (name, block) in [("lbrm", &report.mia), ("naive", &report.naive)] {
        for p in block.iter().flat_map(|b| &b.roc_path) {
            let t = p.threshold.map_or_else(|| "inf".to_string(), |t| t.to_string());
            w.write_record([name.to_string(), t, p.fpr.to_string(), p.tpr.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<roc table>", e))?;
    Ok(())
}

/// `subset,model,n_windows,precision_mean,precision_std,recall_mean,recall_std`.
pub fn render_precision_table<W: Write>(writer: W, report: &AuditReport) -> Result<()> {
    let mut w = csv_writer(writer);
    w.write_record([
        "subset",
        "model",
        "n_windows",
        "precision_mean",
        "precision_std",
        "recall_mean",
        "recall_std",
    ])?;
    let rows = [
        ("all", "target", &report.aia_all),
        ("top_q", "target", &report.aia_topq),
        ("all", "evaluation", &report.aia_eval_all),
        ("top_q", "evaluation", &report.aia_eval_topq),
    ];
    for (subset, model, agg) in rows {
        if let Some(a) = agg {
            w.write_record([
                subset.to_string(),
                model.to_string(),
                a.n_windows.to_string(),
                opt(a.precision_mean),
                opt(a.precision_std),
                opt(a.recall_mean),
                opt(a.recall_std),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<precision table>", e))?;
    Ok(())
}
