//! Markdown tables, CSV files and SVG charts from analysis results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::analytics::{
    AgreementReport, AlphaCurve, Analysis, Arm, ConsistencyRow, CurveMethod, CurvePoint, GroupBy, PolicySet, Reference,
    Scope, TrusteeArm,
};
use crate::providers::cache::safe_component;

pub const CSV_HEADER: [&str; 9] =
    ["scope", "subject", "reference", "model", "condition", "variant", "lambda", "rate", "n"];
pub const CURVES_FILE: &str = "alpha_curves.csv";
pub const CONSISTENCY_FILE: &str = "consistency.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("agreement grid is incomplete; missing {}", .0.join(", "))]
    RaggedGrid(Vec<String>),
    #[error("agreement grid has more than one report for {0}")]
    DuplicateCell(String),
    #[error("report {0} is neither delegate nor trustee")]
    UnexpectedArm(String),
    #[error("no curves to draw")]
    NoCurves,
    #[error("curves do not share a lambda grid")]
    GridMismatch,
    #[error("{what} {value} outside the axis range [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("bad chart spec: {0}")]
    Spec(String),
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableLayout {
    /// One row per subject, a Del./Trus. column pair per model, the larger
    /// value of each pair in bold (both when equal).
    #[default]
    PairedColumns,
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Builds the delegate/trustee comparison table. Every (subject, model)
/// needs exactly one delegate and one trustee report.
pub fn emit_agreement_table(reports: &[AgreementReport], layout: TableLayout) -> Result<String, ReportError> {
    let TableLayout::PairedColumns = layout;
    let mut subjects: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str, bool), f64> = BTreeMap::new();
    for r in reports {
        let trustee = match r.arm {
            Arm::Delegate => false,
            Arm::Trustee { .. } => true,
            Arm::Default => return Err(ReportError::UnexpectedArm(format!("{} / {}", r.subject, r.model))),
        };
        if !subjects.contains(&r.subject.as_str()) {
            subjects.push(&r.subject);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if cells.insert((&r.subject, &r.model, trustee), r.rate).is_some() {
            return Err(ReportError::DuplicateCell(format!("{} / {} / {}", r.subject, r.model, r.arm.name())));
        }
    }
    let mut missing = Vec::new();
    for s in &subjects {
        for m in &models {
            for (trustee, label) in [(false, "Del."), (true, "Trus.")] {
                if !cells.contains_key(&(*s, *m, trustee)) {
                    missing.push(format!("{s} / {m} / {label}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::RaggedGrid(missing));
    }

    let mut out = String::from("| Policy |");
    for m in &models {
        let m = md_escape(m);
        let _ = write!(out, " {m} Del. | {m} Trus. |");
    }
    out.push_str("\n|:---|");
    out.push_str(&"---:|".repeat(2 * models.len()));
    out.push('\n');
    for s in &subjects {
        let _ = write!(out, "| {} |", md_escape(s));
        for m in &models {
            let d = cells[&(*s, *m, false)];
            let t = cells[&(*s, *m, true)];
            let fmt = |v: f64, bold: bool| if bold { format!(" **{v:.2}** |") } else { format!(" {v:.2} |") };
            out.push_str(&fmt(d, d >= t));
            out.push_str(&fmt(t, t >= d));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Chart frame. Series come from the curves handed to `emit_alpha_chart`:
/// the variant mean is drawn bold, individual variants thin.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y_min: f64,
    pub y_max: f64,
}

impl ChartSpec {
    pub fn new(title: impl Into<String>, y_min: f64, y_max: f64) -> Self {
        ChartSpec {
            title: title.into(),
            x_label: "lambda (long-term emphasis)".into(),
            y_label: "agreement".into(),
            y_min,
            y_max,
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 56.0;
const TICKS: usize = 5;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders curves sharing one lambda grid as a standalone SVG, with the
/// delegate rate as a dashed horizontal line. Output depends only on the
/// inputs.
pub fn emit_alpha_chart(
    curves: &[AlphaCurve],
    delegate_baseline: Option<f64>,
    spec: &ChartSpec,
) -> Result<String, ReportError> {
    let first = curves.first().ok_or(ReportError::NoCurves)?;
    let grid = first.lambdas();
    if grid.is_empty() {
        return Err(ReportError::NoCurves);
    }
    if curves.iter().any(|c| c.lambdas() != grid) {
        return Err(ReportError::GridMismatch);
    }
    if spec.y_min.partial_cmp(&spec.y_max) != Some(std::cmp::Ordering::Less) {
        return Err(ReportError::Spec(format!("empty y range [{}, {}]", spec.y_min, spec.y_max)));
    }
    let in_range = |what, value: f64| {
        if value >= spec.y_min && value <= spec.y_max {
            Ok(())
        } else {
            Err(ReportError::OutOfRange { what, value, lo: spec.y_min, hi: spec.y_max })
        }
    };
    for c in curves {
        for p in &c.points {
            in_range("rate", p.rate)?;
        }
    }
    if let Some(b) = delegate_baseline {
        in_range("delegate baseline", b)?;
    }

    let (x0, x1) = (grid[0], grid[grid.len() - 1]);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |l: f64| if x1 > x0 { LEFT + (l - x0) / (x1 - x0) * pw } else { LEFT + pw / 2.0 };
    let y = |r: f64| TOP + (spec.y_max - r) / (spec.y_max - spec.y_min) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        xml_escape(&spec.title)
    );
    let (bx, by) = (LEFT, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{bx:.2}" y1="{by:.2}" x2="{:.2}" y2="{by:.2}" stroke="black"/>"#, LEFT + pw);
    let _ = writeln!(s, r#"<line x1="{bx:.2}" y1="{TOP:.2}" x2="{bx:.2}" y2="{by:.2}" stroke="black"/>"#);
    for i in 0..=TICKS {
        let l = x0 + (x1 - x0) * i as f64 / TICKS as f64;
        let px = x(l);
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{by:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, by + 5.0);
        let _ =
            writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="11">{l:.1}</text>"#, by + 18.0);
        let r = spec.y_min + (spec.y_max - spec.y_min) * i as f64 / TICKS as f64;
        let py = y(r);
        let _ =
            writeln!(s, r##"<line x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##, bx, LEFT + pw);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{:.0}%</text>"#,
            bx - 6.0,
            py + 4.0,
            r * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 14.0,
        xml_escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        xml_escape(&spec.y_label)
    );
    if let Some(b) = delegate_baseline {
        let py = y(b);
        let _ = writeln!(
            s,
            r##"<line x1="{bx:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#555555" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
            LEFT + pw
        );
    }
    let polyline = |c: &AlphaCurve| -> String {
        c.points.iter().map(|p| format!("{:.2},{:.2}", x(p.lambda), y(p.rate))).collect::<Vec<_>>().join(" ")
    };
    let (thin, bold): (Vec<&AlphaCurve>, Vec<&AlphaCurve>) = curves.iter().partition(|c| c.variant.is_some());
    let _ = writeln!(s, r##"<g fill="none" stroke="#1f5fa8">"##);
    for c in thin {
        let _ = writeln!(s, r#"<polyline points="{}" stroke-width="1" stroke-opacity="0.35"/>"#, polyline(c));
    }
    for c in bold {
        let _ = writeln!(s, r#"<polyline points="{}" stroke-width="3"/>"#, polyline(c));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

// ---------------------------------------------------------------------------
// CSV

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|l| l.to_string()).unwrap_or_default()
}

/// One report per row under `CSV_HEADER`. Rates keep full precision.
pub fn emit_csv(reports: &[AgreementReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in reports {
        w.write_record([
            r.scope.as_str(),
            &r.subject,
            r.reference.as_str(),
            &r.model,
            r.arm.name(),
            r.variant.as_deref().unwrap_or(""),
            &fmt_opt(r.arm.lambda()),
            &r.rate.to_string(),
            &r.n.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<AgreementReport>, ReportError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| ReportError::Csv { line: 1, message: e.to_string() })?;
    if header.iter().ne(CSV_HEADER) {
        return Err(ReportError::Csv { line: 1, message: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row =
            row.map_err(|e| ReportError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| ReportError::Csv { line, message };
        let scope = Scope::ALL
            .into_iter()
            .find(|s| s.as_str() == &row[0])
            .ok_or_else(|| bad(format!("unknown scope {}", &row[0])))?;
        let reference = Reference::from_str(&row[2]).map_err(bad)?;
        let lambda =
            if row[6].is_empty() { None } else { Some(row[6].parse::<f64>().map_err(|e| bad(e.to_string()))?) };
        out.push(AgreementReport {
            scope,
            subject: row[1].to_string(),
            reference,
            model: row[3].to_string(),
            arm: Arm::parse(&row[4], lambda).map_err(bad)?,
            variant: if row[5].is_empty() { None } else { Some(row[5].to_string()) },
            rate: row[7].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            n: row[8].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn emit_consistency_csv(rows: &[ConsistencyRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "condition", "lambda", "rate", "n"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.model.as_str(), &r.condition, &fmt_opt(r.lambda), &r.rate.to_string(), &r.n.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    fs::write(&path, text).map_err(io_err(&path))?;
    written.push(path);
    Ok(())
}

/// Writes `<breakdown>.csv`, `alpha_curves.csv` and `consistency.csv`.
pub fn write_analysis(dir: &Path, analysis: &Analysis, by: GroupBy) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    write(dir.join(format!("{}.csv", by.stem())), &emit_csv(&analysis.breakdown), &mut written)?;
    write(dir.join(CURVES_FILE), &emit_csv(&analysis.curves), &mut written)?;
    write(dir.join(CONSISTENCY_FILE), &emit_consistency_csv(&analysis.consistency), &mut written)?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// From an analysis directory to report files

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Md,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "md" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(format!("unknown format `{s}`; expected md, csv or svg")),
        }
    }
}

fn read_reports(path: &Path) -> Result<Vec<AgreementReport>, ReportError> {
    parse_csv(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn analysis_csvs(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Delegate rows and the pooled trustee rows at the largest lambda.
fn table_rows(reports: &[AgreementReport], trustee: TrusteeArm) -> Vec<AgreementReport> {
    let top = reports
        .iter()
        .filter(|r| matches!(r.arm, Arm::Trustee { method, .. } if method == trustee))
        .filter_map(|r| r.arm.lambda())
        .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.max(l))));
    reports
        .iter()
        .filter(|r| r.variant.is_none())
        .filter(|r| match r.arm {
            Arm::Delegate => true,
            Arm::Trustee { method, lambda } => method == trustee && Some(lambda) == top,
            Arm::Default => false,
        })
        .cloned()
        .collect()
}

pub type ChartKey = (String, String, Reference, CurveMethod);
/// One chart: its key, the curves to draw and the delegate baseline.
pub type Chart = (ChartKey, Vec<AlphaCurve>, Option<f64>);

/// Regroups curve rows into charts keyed by (model, policy set, reference,
/// method), each with its delegate baseline.
pub fn charts_from_rows(rows: &[AgreementReport]) -> Result<Vec<Chart>, ReportError> {
    let mut curves: BTreeMap<ChartKey, BTreeMap<Option<String>, Vec<CurvePoint>>> = BTreeMap::new();
    let mut baselines: BTreeMap<(String, String, Reference), f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scope == Scope::Aggregate) {
        match r.arm {
            Arm::Delegate if r.variant.is_none() => {
                baselines.insert((r.model.clone(), r.subject.clone(), r.reference), r.rate);
            }
            Arm::Trustee { method, lambda } => {
                if let Some(m) = CurveMethod::from_arm(method) {
                    curves
                        .entry((r.model.clone(), r.subject.clone(), r.reference, m))
                        .or_default()
                        .entry(r.variant.clone())
                        .or_default()
                        .push(CurvePoint { lambda, rate: r.rate, n: r.n });
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (key, by_variant) in curves {
        let set = PolicySet::from_str(&key.1).map_err(ReportError::Spec)?;
        let mut list = Vec::new();
        for (variant, mut points) in by_variant {
            points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
            list.push(AlphaCurve {
                model: key.0.clone(),
                policy_set: set,
                method: key.3,
                reference: key.2,
                variant,
                points,
            });
        }
        let baseline = baselines.get(&(key.0.clone(), key.1.clone(), key.2)).copied();
        out.push((key, list, baseline));
    }
    Ok(out)
}

/// Charts start at 60%; lower data pulls the floor down to
/// the next tenth.
fn y_floor(curves: &[AlphaCurve], baseline: Option<f64>) -> f64 {
    let lowest = curves.iter().flat_map(|c| c.points.iter().map(|p| p.rate)).chain(baseline).fold(1.0_f64, f64::min);
    (lowest * 10.0).floor().min(6.0) / 10.0
}

/// Renders the CSVs in `analysis_dir` into `out` in the requested format.
pub fn render_analysis(analysis_dir: &Path, out: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    for path in analysis_csvs(analysis_dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = name.trim_end_matches(".csv");
        if name == CONSISTENCY_FILE {
            if format == ReportFormat::Csv {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                write(out.join(&name), &text, &mut written)?;
            }
            continue;
        }
        let reports = read_reports(&path)?;
        match format {
            ReportFormat::Csv => write(out.join(&name), &emit_csv(&reports), &mut written)?,
            ReportFormat::Md if name == CURVES_FILE => {
                let rows = table_rows(&reports, TrusteeArm::MeanOfMethods);
                if rows.iter().any(|r| r.arm.is_trustee()) {
                    let mut by_reference: BTreeMap<Reference, Vec<AgreementReport>> = BTreeMap::new();
                    for r in rows {
                        by_reference.entry(r.reference).or_default().push(r);
                    }
                    for (reference, rows) in by_reference {
                        let table = emit_agreement_table(&rows, TableLayout::PairedColumns)?;
                        write(out.join(format!("summary_{}.md", reference.as_str())), &table, &mut written)?;
                    }
                }
            }
            ReportFormat::Md => {
                let rows = table_rows(&reports, TrusteeArm::Combined);
                if rows.iter().any(|r| r.arm.is_trustee()) && rows.iter().any(|r| r.arm == Arm::Delegate) {
                    write(
                        out.join(format!("{stem}.md")),
                        &emit_agreement_table(&rows, TableLayout::PairedColumns)?,
                        &mut written,
                    )?;
                } else {
                    log::warn!("{name}: needs delegate and trustee rows for a table; skipped");
                }
            }
            ReportFormat::Svg if name == CURVES_FILE => {
                for ((model, set, reference, method), curves, baseline) in charts_from_rows(&reports)? {
                    let title = format!(
                        "{model}: {set} policies, {} ({})",
                        method.as_str().replace('_', " "),
                        reference.as_str().replace('_', " ")
                    );
                    let spec = ChartSpec::new(title, y_floor(&curves, baseline), 1.0);
                    let svg = emit_alpha_chart(&curves, baseline, &spec)?;
                    let file = format!(
                        "alpha_{}_{}_{}_{}.svg",
                        safe_component(&model),
                        set,
                        reference.as_str(),
                        method.as_str()
                    );
                    write(out.join(file), &svg, &mut written)?;
                }
            }
            ReportFormat::Svg => {}
        }
    }
    Ok(written)
}
