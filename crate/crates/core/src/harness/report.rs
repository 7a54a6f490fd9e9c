use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Method, Setting};
use crate::error::IoContext;
use crate::metrics::ConfusionCounts;
use crate::{Error, Result};

/// Number of ranks annotated per column in benchmark tables.
pub const TOP_MARKS: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Hparam,
    Bench,
    Transfer,
    Stratified,
}

/// One result line, always traceable to the run that produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub network: String,
    /// Row label; the optimiser or loss in searches, the network elsewhere.
    pub label: String,
    /// Sub-table the row belongs to (`optimizer`, `loss`, a DML pair, ...).
    pub group: String,
    pub setting: Option<Setting>,
    pub method: Option<Method>,
    pub stratum: Option<String>,
    pub gsd_cm: Option<u32>,
    pub seed: Option<u64>,
    pub params_m: f64,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub ms_per_iter: Option<f64>,
    pub best_epoch: Option<usize>,
    pub par_red_pct: Option<f64>,
    pub tiles: Option<usize>,
    pub counts: Option<ConfusionCounts>,
    pub record_hash: String,
    /// Rank (1 = best) of this row's value per column, for the top few only.
    pub marks: BTreeMap<String, u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub kind: ReportKind,
    pub rows: Vec<EvalRow>,
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(title: &str, kind: ReportKind) -> Self {
        EvalReport { title: title.to_string(), kind, rows: Vec::new(), provenance: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let bytes = std::fs::read(path).at(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn select(&self, method: Option<Method>, setting: Option<Setting>) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.method == method && r.setting == setting)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// Best row: highest F1, then highest IoU, then fewer parameters.
pub fn best_row<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Option<&'a EvalRow> {
    rows.into_iter().reduce(|a, b| {
        let better = b.f1 > a.f1 || (b.f1 == a.f1 && (b.iou > a.iou || (b.iou == a.iou && b.params_m < a.params_m)));
        if better {
            b
        } else {
            a
        }
    })
}

/// Row holding the median F1 (the lower one for an even count).
pub fn median_row<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Option<&'a EvalRow> {
    let mut v: Vec<&EvalRow> = rows.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.f1.total_cmp(&b.f1).then(a.iou.total_cmp(&b.iou)).then(a.record_hash.cmp(&b.record_hash)));
    Some(v[(v.len() - 1) / 2])
}

/// Thousandths as printed with three decimals.
fn milli(v: f64) -> i64 {
    format!("{v:.3}").replace('.', "").parse().expect("formatted float")
}

/// `value (+gain%)` with the gain in percentage points of the displayed values.
pub fn format_gain(value: f64, baseline: f64) -> String {
    let d = milli(value) - milli(baseline);
    let sign = if d < 0 { '-' } else { '+' };
    format!("{:.3} ({sign}{}.{}%)", value, d.abs() / 10, d.abs() % 10)
}

#[derive(Clone, Copy, PartialEq)]
enum Better {
    High,
    Low,
}

/// Columns that take part in bold and rank marks.
const SCORED: [(&str, Better); 7] = [
    ("params_m", Better::Low),
    ("loss", Better::Low),
    ("precision", Better::High),
    ("recall", Better::High),
    ("iou", Better::High),
    ("f1", Better::High),
    ("ms_per_iter", Better::Low),
];

fn column(r: &EvalRow, name: &str) -> Option<f64> {
    match name {
        "params_m" => Some(r.params_m),
        "loss" => Some(r.loss),
        "precision" => Some(r.precision),
        "recall" => Some(r.recall),
        "iou" => Some(r.iou),
        "f1" => Some(r.f1),
        "ms_per_iter" => r.ms_per_iter,
        _ => None,
    }
}

/// Rounded value used for comparisons, so ties follow the printed digits.
fn key(name: &str, v: f64) -> i64 {
    match name {
        "ms_per_iter" => v.round() as i64,
        _ => milli(v),
    }
}

/// Dense rank per scored column, recorded for ranks up to `top`.
pub fn mark_top(rows: &mut [EvalRow], top: u8) {
    for (name, better) in SCORED {
        let mut keys: Vec<i64> = rows.iter().filter_map(|r| column(r, name)).map(|v| key(name, v)).collect();
        keys.sort_unstable();
        keys.dedup();
        if better == Better::High {
            keys.reverse();
        }
        for r in rows.iter_mut() {
            r.marks.remove(name);
            if let Some(v) = column(r, name) {
                let rank = keys.iter().position(|&k| k == key(name, v)).unwrap() + 1;
                if rank <= top as usize {
                    r.marks.insert(name.to_string(), rank as u8);
                }
            }
        }
    }
}

fn best_keys(rows: &[&EvalRow]) -> BTreeMap<&'static str, i64> {
    let mut out = BTreeMap::new();
    for (name, better) in SCORED {
        let it = rows.iter().filter_map(|r| column(r, name)).map(|v| key(name, v));
        let best = if better == Better::High { it.max() } else { it.min() };
        if let Some(b) = best {
            out.insert(name, b);
        }
    }
    out
}

fn fmt_value(name: &str, v: f64) -> String {
    match name {
        "ms_per_iter" => format!("{v:.0}"),
        _ => format!("{v:.3}"),
    }
}

/// Cell text, bold when it equals the column's best among `best`.
fn cell(r: &EvalRow, name: &str, best: &BTreeMap<&'static str, i64>) -> String {
    match column(r, name) {
        None => "-".into(),
        Some(v) => {
            let s = fmt_value(name, v);
            if best.get(name) == Some(&key(name, v)) {
                format!("**{s}**")
            } else {
                s
            }
        }
    }
}

fn ranked_cell(r: &EvalRow, name: &str) -> String {
    match column(r, name) {
        None => "-".into(),
        Some(v) => {
            let s = fmt_value(name, v);
            match r.marks.get(name) {
                Some(k) => format!("<u>{s}</u><sup>{k}</sup>"),
                None => s,
            }
        }
    }
}

fn line(out: &mut String, cells: &[String]) {
    let _ = writeln!(out, "| {} |", cells.join(" | "));
}

fn header(out: &mut String, cols: &[&str]) {
    line(out, &cols.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    line(out, &cols.iter().map(|_| "---".to_string()).collect::<Vec<_>>());
}

const METRICS: [&str; 5] = ["loss", "precision", "recall", "iou", "f1"];

fn metric_cells(r: &EvalRow, best: &BTreeMap<&'static str, i64>) -> Vec<String> {
    METRICS.iter().map(|m| cell(r, m, best)).collect()
}

fn par_red(r: &EvalRow) -> String {
    match r.par_red_pct {
        Some(p) => format!("{p:.0}"),
        None => "-".into(),
    }
}

fn hparam_md(rep: &EvalReport, out: &mut String) {
    for (group, title) in [("optimizer", "Optimiser (Total loss)"), ("loss", "Loss function")] {
        let rows: Vec<&EvalRow> = rep.rows.iter().filter(|r| r.group == group).collect();
        if rows.is_empty() {
            continue;
        }
        let title = match (group, rep.provenance.get("winner_optimizer")) {
            ("loss", Some(w)) => format!("{title} ({w})"),
            _ => title.to_string(),
        };
        let _ = writeln!(out, "\n### {title}\n");
        header(out, &["", "Loss", "P", "R", "IoU", "F1", "ms/it", "Ep."]);
        let best = best_keys(&rows);
        for r in rows {
            let mut c = vec![r.label.clone()];
            c.extend(metric_cells(r, &best));
            c.push(cell(r, "ms_per_iter", &best));
            c.push(r.best_epoch.map_or("-".into(), |e| e.to_string()));
            line(out, &c);
        }
    }
}

fn bench_md(rep: &EvalReport, out: &mut String) {
    out.push('\n');
    header(out, &["Network", "Par. (M)", "Loss", "P", "R", "IoU", "F1", "ms/it"]);
    for r in &rep.rows {
        let mut c = vec![r.label.clone()];
        for name in ["params_m", "loss", "precision", "recall", "iou", "f1", "ms_per_iter"] {
            c.push(ranked_cell(r, name));
        }
        line(out, &c);
    }
}

/// Networks (and DML pair) of a block, in row order, with their median rows per setting.
fn block_rows<'a>(rep: &'a EvalReport, method: Method, settings: [Setting; 2]) -> Vec<(String, [Option<&'a EvalRow>; 2])> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rep.rows.iter().filter(|r| r.method == Some(method) && settings.contains(&r.setting.unwrap_or(Setting::TT))) {
        let k = (r.group.clone(), r.network.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(group, net)| {
            let pick = |s: Setting| {
                median_row(rep.rows.iter().filter(|r| r.method == Some(method) && r.setting == Some(s) && r.group == group && r.network == net))
            };
            let label = rep
                .rows
                .iter()
                .find(|r| r.method == Some(method) && r.group == group && r.network == net)
                .map(|r| r.label.clone())
                .unwrap_or(net.clone());
            (label, [pick(settings[0]), pick(settings[1])])
        })
        .collect()
}

fn transfer_md(rep: &EvalReport, out: &mut String) {
    let pre: Vec<&EvalRow> = rep.rows.iter().filter(|r| r.setting.is_some_and(|s| s.train_role() == super::Role::T)).collect();
    if !pre.is_empty() {
        let _ = writeln!(out, "\n### Pretraining on T\n");
        header(out, &["Network", "Setting", "Loss", "P", "R", "IoU", "F1", "ms/it"]);
        let mut seen: Vec<(String, Setting)> = Vec::new();
        for r in &pre {
            let k = (r.network.clone(), r.setting.unwrap());
            if !seen.contains(&k) {
                seen.push(k);
            }
        }
        let med: Vec<&EvalRow> = seen
            .iter()
            .filter_map(|(n, s)| median_row(pre.iter().copied().filter(|r| &r.network == n && r.setting == Some(*s))))
            .collect();
        let best = best_keys(&med);
        for r in med {
            let mut c = vec![r.label.clone(), r.setting.unwrap().to_string()];
            c.extend(metric_cells(r, &best));
            c.push(cell(r, "ms_per_iter", &best));
            line(out, &c);
        }
    }

    let settings = [Setting::SS, Setting::SEv];
    let _ = writeln!(out, "\n### Knowledge transfer comparison\n");
    let mut cols = vec!["Network".to_string()];
    for s in settings {
        for m in ["Loss", "P", "R", "IoU", "F1", "ms/it"] {
            cols.push(format!("{s} {m}"));
        }
    }
    cols.push("Par. Red.(%)".into());
    header(out, &cols.iter().map(String::as_str).collect::<Vec<_>>());
    let width = cols.len();
    for method in Method::ALL {
        let rows = block_rows(rep, method, settings);
        if rows.is_empty() {
            continue;
        }
        let mut title = vec![format!("*{}*", method.title())];
        title.resize(width, String::new());
        line(out, &title);
        let bests: Vec<BTreeMap<&'static str, i64>> =
            (0..2).map(|i| best_keys(&rows.iter().filter_map(|(_, r)| r[i]).collect::<Vec<_>>())).collect();
        for (label, pair) in &rows {
            let mut c = vec![label.clone()];
            for (i, r) in pair.iter().enumerate() {
                match r {
                    Some(r) => {
                        c.extend(metric_cells(r, &bests[i]));
                        c.push(cell(r, "ms_per_iter", &bests[i]));
                    }
                    None => c.extend(std::iter::repeat("-".to_string()).take(6)),
                }
            }
            c.push(pair.iter().flatten().next().map_or("-".into(), |r| par_red(r)));
            line(out, &c);
        }
    }

    let base = block_rows(rep, Method::Baseline, settings);
    let sda = block_rows(rep, Method::Sda, settings);
    let gains: Vec<(String, Vec<Option<(f64, f64)>>)> = sda
        .iter()
        .filter_map(|(label, s)| {
            let (_, b) = base.iter().find(|(l, _)| l == label)?;
            let mut cells = Vec::new();
            for i in 0..2 {
                let pair = s[i].zip(b[i]);
                cells.push(pair.map(|(s, b)| (s.iou, b.iou)));
                cells.push(pair.map(|(s, b)| (s.f1, b.f1)));
            }
            Some((label.clone(), cells))
        })
        .collect();
    if gains.is_empty() {
        return;
    }
    let _ = writeln!(out, "\n### Improvements with SDA vs. without SDA\n");
    header(out, &["Student", "S-S IoU", "S-S F1", "S-Ev IoU", "S-Ev F1"]);
    let best: Vec<Option<i64>> = (0..4).map(|i| gains.iter().filter_map(|(_, c)| c[i]).map(|(v, _)| milli(v)).max()).collect();
    for (label, cells) in &gains {
        let mut c = vec![label.clone()];
        for (i, v) in cells.iter().enumerate() {
            c.push(match v {
                Some((v, b)) if best[i] == Some(milli(*v)) => format!("**{}**", format_gain(*v, *b)),
                Some((v, b)) => format_gain(*v, *b),
                None => "-".into(),
            });
        }
        line(out, &c);
    }
}

fn stratified_md(rep: &EvalReport, out: &mut String) {
    out.push('\n');
    header(out, &["Model", "Stratum", "GSD (cm)", "Tiles", "Loss", "P", "R", "IoU", "F1"]);
    let mut labels: Vec<&str> = Vec::new();
    for r in &rep.rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    for label in labels {
        let rows: Vec<&EvalRow> = rep.rows.iter().filter(|r| r.label == label).collect();
        let cells: Vec<&EvalRow> = rows.iter().copied().filter(|r| r.stratum.is_some() && r.gsd_cm.is_some()).collect();
        let best = best_keys(&cells);
        let none = BTreeMap::new();
        for r in rows {
            let mut c = vec![
                r.label.clone(),
                r.stratum.clone().unwrap_or("all".into()),
                r.gsd_cm.map_or("all".into(), |g| g.to_string()),
                r.tiles.map_or("-".into(), |t| t.to_string()),
            ];
            let b = if r.stratum.is_some() && r.gsd_cm.is_some() { &best } else { &none };
            c.extend(metric_cells(r, b));
            line(out, &c);
        }
    }
}

fn markdown(rep: &EvalReport) -> String {
    let mut out = format!("## {}\n", rep.title);
    match rep.kind {
        ReportKind::Hparam => hparam_md(rep, &mut out),
        ReportKind::Bench => bench_md(rep, &mut out),
        ReportKind::Transfer => transfer_md(rep, &mut out),
        ReportKind::Stratified => stratified_md(rep, &mut out),
    }
    if !rep.provenance.is_empty() {
        out.push('\n');
        for (k, v) in &rep.provenance {
            let _ = writeln!(out, "- {k}: {v}");
        }
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    network: &'a str,
    label: &'a str,
    group: &'a str,
    setting: Option<&'static str>,
    method: Option<&'static str>,
    stratum: Option<&'a str>,
    gsd_cm: Option<u32>,
    seed: Option<u64>,
    params_m: f64,
    loss: f64,
    precision: f64,
    recall: f64,
    iou: f64,
    f1: f64,
    ms_per_iter: Option<f64>,
    best_epoch: Option<usize>,
    par_red_pct: Option<f64>,
    tiles: Option<usize>,
    tp: Option<u64>,
    fp: Option<u64>,
    #[serde(rename = "fn")]
    fn_: Option<u64>,
    tn: Option<u64>,
    record_hash: &'a str,
    marks: String,
}

fn csv_text(rep: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rep.rows {
        w.serialize(CsvRow {
            network: &r.network,
            label: &r.label,
            group: &r.group,
            setting: r.setting.map(Setting::name),
            method: r.method.map(Method::name),
            stratum: r.stratum.as_deref(),
            gsd_cm: r.gsd_cm,
            seed: r.seed,
            params_m: r.params_m,
            loss: r.loss,
            precision: r.precision,
            recall: r.recall,
            iou: r.iou,
            f1: r.f1,
            ms_per_iter: r.ms_per_iter,
            best_epoch: r.best_epoch,
            par_red_pct: r.par_red_pct,
            tiles: r.tiles,
            tp: r.counts.map(|c| c.tp),
            fp: r.counts.map(|c| c.fp),
            fn_: r.counts.map(|c| c.fn_),
            tn: r.counts.map(|c| c.tn),
            record_hash: &r.record_hash,
            marks: r.marks.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(";"),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io { path: "<report csv>".into(), source: e.into_error() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Report text in the requested format.
pub fn render(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_text(report),
        ReportFormat::Markdown => Ok(markdown(report)),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
    }
}

/// Writes the report to `path`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(report, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension(format!("{}.tmp", format.extension()));
    std::fs::write(&tmp, text).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}
