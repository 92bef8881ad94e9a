use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{read_json, write_json, ExperimentConfig, RunMetrics, Timing};
use crate::adapters::ActivationProbe;
use crate::data::ENGLISH;
use crate::error::{Error, Result};

/// Language label of rows averaged over languages.
pub const AVERAGE_LANGUAGE: &str = "avg";

/// One metric of one (experiment, method, language, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub method: String,
    pub language: String,
    pub seed: u64,
    pub mt_quality: f64,
    pub metric: String,
    pub value: f64,
    pub flops_per_step: Option<u64>,
    /// Written to the timing table only.
    #[serde(skip)]
    pub wall_seconds: Option<f64>,
}

/// Mean and sample standard deviation over seeds. Rows averaged over
/// languages are flagged `aggregate`; `n = 0` marks an absent cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub method: String,
    pub language: String,
    pub mt_quality: f64,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub aggregate: bool,
    pub flops_per_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    name: &'a str,
    method: &'a str,
    language: &'a str,
    seed: u64,
    wall_seconds: Option<f64>,
}

#[derive(Serialize)]
struct ProbePositionRow<'a> {
    layer: usize,
    position: usize,
    stream: &'a str,
    language: &'a str,
    mean_abs_activation: f64,
}

#[derive(Serialize, Deserialize)]
struct ProbeLayerRow {
    layer: usize,
    stream: String,
    language: String,
    mean_abs_activation: f64,
}

#[derive(Serialize)]
struct ActivationRow<'a> {
    name: &'a str,
    method: &'a str,
    language: &'a str,
    seed: u64,
    layer: usize,
    stream: &'a str,
    mean_abs_activation: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::contract(format!("{}: {other:?}", path.display())),
    }
}

pub(crate) fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `probe_positions.csv` (`l·m·2` rows) and `probe_layers.csv`
/// (`l·2` rows) into `dir`.
pub(crate) fn write_probe(dir: &Path, probe: &ActivationProbe, target_language: &str) -> Result<Vec<PathBuf>> {
    let streams = |s: f64, t: f64| [("source", ENGLISH, s), ("target", target_language, t)];
    let positions: Vec<ProbePositionRow> = probe
        .positions()
        .into_iter()
        .flat_map(|(layer, position, s, t)| {
            streams(s, t).map(|(stream, language, v)| ProbePositionRow {
                layer,
                position,
                stream,
                language,
                mean_abs_activation: v,
            })
        })
        .collect();
    let layers: Vec<ProbeLayerRow> = probe
        .layers()
        .into_iter()
        .flat_map(|(layer, s, t)| {
            streams(s, t).map(|(stream, language, v)| ProbeLayerRow {
                layer,
                stream: stream.into(),
                language: language.into(),
                mean_abs_activation: v,
            })
        })
        .collect();
    let pos_path = dir.join("probe_positions.csv");
    write_csv(
        &pos_path,
        &["layer", "position", "stream", "language", "mean_abs_activation"],
        &positions,
    )?;
    let layer_path = dir.join("probe_layers.csv");
    write_csv(&layer_path, &["layer", "stream", "language", "mean_abs_activation"], &layers)?;
    Ok(vec![pos_path, layer_path])
}

fn run_files(output_dir: &Path, file: &str) -> Vec<PathBuf> {
    let runs = output_dir.join("runs");
    if !runs.is_dir() {
        return Vec::new();
    }
    let mut out: Vec<PathBuf> = WalkDir::new(&runs)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == file)
        .map(|e| e.into_path())
        .collect();
    out.sort();
    out
}

/// Every metrics row under `output_dir/runs`, sorted by cell.
pub fn read_rows(output_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for path in run_files(output_dir, "metrics.json") {
        let m: RunMetrics = read_json(&path)?;
        let timing = path.with_file_name("timing.json");
        let wall_seconds = if timing.exists() {
            Some(read_json::<Timing>(&timing)?.wall_seconds)
        } else {
            None
        };
        rows.push(ReportRow {
            name: m.name,
            method: m.method,
            language: m.language,
            seed: m.seed,
            mt_quality: m.mt_quality,
            metric: m.metric,
            value: m.value,
            flops_per_step: m.flops_per_step,
            wall_seconds,
        });
    }
    rows.sort_by(|a, b| row_key(a).cmp(&row_key(b)).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

type CellKey = (String, String, String, u64, String);

fn row_key(r: &ReportRow) -> CellKey {
    (
        r.name.clone(),
        r.method.clone(),
        r.language.clone(),
        r.mt_quality.to_bits(),
        r.metric.clone(),
    )
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Per-cell mean and standard deviation over seeds, plus one aggregate row
/// per (experiment, method) over languages whenever a cell spans more than
/// one language. Aggregates average each seed over languages first, using
/// seeds present in every language.
pub fn aggregate(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<CellKey, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        cells.entry(row_key(r)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((name, method, language, q, metric), group) in &cells {
        let values: Vec<f64> = group.iter().map(|r| r.value).collect();
        let (mean, std) = mean_std(&values);
        out.push(SummaryRow {
            name: name.clone(),
            method: method.clone(),
            language: language.clone(),
            mt_quality: f64::from_bits(*q),
            metric: metric.clone(),
            n: values.len(),
            mean,
            std,
            aggregate: false,
            flops_per_step: group[0].flops_per_step,
        });
    }
    // (name, method, q, metric) -> language -> seed -> value
    let mut by_lang: BTreeMap<(String, String, u64, String), BTreeMap<String, BTreeMap<u64, f64>>> = BTreeMap::new();
    for r in rows {
        by_lang
            .entry((r.name.clone(), r.method.clone(), r.mt_quality.to_bits(), r.metric.clone()))
            .or_default()
            .entry(r.language.clone())
            .or_default()
            .insert(r.seed, r.value);
    }
    for ((name, method, q, metric), langs) in by_lang {
        if langs.len() < 2 {
            continue;
        }
        let first = langs.values().next().expect("non-empty");
        let per_seed: Vec<f64> = first
            .keys()
            .filter(|s| langs.values().all(|l| l.contains_key(s)))
            .map(|s| langs.values().map(|l| l[s]).sum::<f64>() / langs.len() as f64)
            .collect();
        let (mean, std) = mean_std(&per_seed);
        let flops = rows
            .iter()
            .find(|r| r.name == name && r.method == method)
            .and_then(|r| r.flops_per_step);
        out.push(SummaryRow {
            name,
            method,
            language: AVERAGE_LANGUAGE.into(),
            mt_quality: f64::from_bits(q),
            metric,
            n: per_seed.len(),
            mean,
            std,
            aggregate: true,
            flops_per_step: flops,
        });
    }
    out
}

/// Cells a run tree promises in its config but has no metrics for.
fn absent_cells(output_dir: &Path, rows: &[ReportRow]) -> Result<Vec<SummaryRow>> {
    let mut out = Vec::new();
    for path in run_files(output_dir, "config.json") {
        let cfg: ExperimentConfig = read_json(&path)?;
        for method in &cfg.methods {
            for lang in &cfg.languages {
                let present = rows.iter().any(|r| {
                    r.name == cfg.name
                        && r.method == method.name()
                        && r.language == lang.name
                        && r.mt_quality == cfg.mt_quality
                });
                if !present {
                    out.push(SummaryRow {
                        name: cfg.name.clone(),
                        method: method.name().into(),
                        language: lang.name.clone(),
                        mt_quality: cfg.mt_quality,
                        metric: cfg.metric_name().into(),
                        n: 0,
                        mean: None,
                        std: None,
                        aggregate: false,
                        flops_per_step: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub(crate) const SUMMARY_HEADER: [&str; 10] = [
    "name",
    "method",
    "language",
    "mt_quality",
    "metric",
    "n",
    "mean",
    "std",
    "aggregate",
    "flops_per_step",
];

/// Reads every run under `output_dir` and writes `output_dir/report/`:
/// raw rows, the seed summary (CSV and JSON), wall times, per-layer
/// activation curves and the quality-vs-metric curve. An empty directory
/// yields header-only tables.
pub fn emit_report(output_dir: &Path) -> Result<Report> {
    let rows = read_rows(output_dir)?;
    let mut summary = aggregate(&rows);
    summary.extend(absent_cells(output_dir, &rows)?);
    let dir = output_dir.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    write_csv(
        &dir.join("rows.csv"),
        &["name", "method", "language", "seed", "mt_quality", "metric", "value", "flops_per_step"],
        &rows,
    )?;
    write_csv(&dir.join("summary.csv"), &SUMMARY_HEADER, &summary)?;
    write_json(&dir.join("summary.json"), &summary)?;

    let timing: Vec<TimingRow> = rows
        .iter()
        .filter(|r| r.wall_seconds.is_some())
        .map(|r| TimingRow {
            name: &r.name,
            method: &r.method,
            language: &r.language,
            seed: r.seed,
            wall_seconds: r.wall_seconds,
        })
        .collect();
    write_csv(
        &dir.join("timing.csv"),
        &["name", "method", "language", "seed", "wall_seconds"],
        &timing,
    )?;

    let mut activations = Vec::new();
    for path in run_files(output_dir, "probe_layers.csv") {
        let metrics: RunMetrics = read_json(&path.with_file_name("metrics.json"))?;
        let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for rec in reader.deserialize::<ProbeLayerRow>() {
            let rec = rec.map_err(|e| csv_err(&path, e))?;
            activations.push((metrics.clone(), rec));
        }
    }
    let activation_rows: Vec<ActivationRow> = activations
        .iter()
        .map(|(m, r)| ActivationRow {
            name: &m.name,
            method: &m.method,
            language: &m.language,
            seed: m.seed,
            layer: r.layer,
            stream: &r.stream,
            mean_abs_activation: r.mean_abs_activation,
        })
        .collect();
    write_csv(
        &dir.join("activations.csv"),
        &["name", "method", "language", "seed", "layer", "stream", "mean_abs_activation"],
        &activation_rows,
    )?;

    let mut curve: Vec<&SummaryRow> = summary.iter().filter(|s| s.n > 0).collect();
    curve.sort_by(|a, b| {
        (&a.method, &a.language, &a.name)
            .cmp(&(&b.method, &b.language, &b.name))
            .then(a.mt_quality.total_cmp(&b.mt_quality))
    });
    write_csv(&dir.join("quality_curve.csv"), &SUMMARY_HEADER, &curve)?;

    Ok(Report { rows, summary })
}
