//! Independently coded references shared by several test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

pub fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * s];
    for i in 0..p {
        for j in 0..s {
            for k in 0..q {
                c[i * s + j] += a[i * q + k] * b[k * s + j];
            }
        }
    }
    c
}

/// `softmax((S·Wq)(T·Wk)ᵀ/√r)·(T·Wv)` written with scalar loops.
pub fn naive_cross_attention(s: &[f64], t: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], m: usize, r: usize) -> Vec<f64> {
    let q = naive_matmul(s, wq, m, r, r);
    let k = naive_matmul(t, wk, m, r, r);
    let v = naive_matmul(t, wv, m, r, r);
    let mut out = vec![0.0; m * r];
    for i in 0..m {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..r).map(|c| q[i * r + c] * k[j * r + c]).sum::<f64>() / (r as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|x| x.exp()).sum();
        for j in 0..m {
            for c in 0..r {
                out[i * r + c] += scores[j].exp() / z * v[j * r + c];
            }
        }
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

type Record = BTreeMap<String, String>;

fn read_table(path: &Path) -> Result<Vec<Record>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn close(got: &str, want: Option<f64>) -> bool {
    match (got.is_empty(), want) {
        (true, None) => true,
        (false, Some(w)) => got.parse::<f64>().is_ok_and(|g| (g - w).abs() <= 1e-12),
        _ => false,
    }
}

/// Recomputes `summary.csv` of `output_dir/report` from `rows.csv` and
/// returns the number of summary rows checked. Optional extra tables (such
/// as a sweep table) must consist of summary rows.
pub fn check_report(output_dir: &Path, extra_tables: &[&str]) -> Result<usize, String> {
    let dir = output_dir.join("report");
    let rows = read_table(&dir.join("rows.csv"))?;
    let summary = read_table(&dir.join("summary.csv"))?;

    let mut cells: BTreeMap<[String; 5], Vec<f64>> = BTreeMap::new();
    let mut langs: BTreeMap<[String; 4], BTreeMap<String, BTreeMap<u64, f64>>> = BTreeMap::new();
    for r in &rows {
        let value: f64 = r["value"].parse().map_err(|e| format!("value: {e}"))?;
        let seed: u64 = r["seed"].parse().map_err(|e| format!("seed: {e}"))?;
        let key = |k: &str| r[k].clone();
        cells
            .entry([key("name"), key("method"), key("language"), key("mt_quality"), key("metric")])
            .or_default()
            .push(value);
        langs
            .entry([key("name"), key("method"), key("mt_quality"), key("metric")])
            .or_default()
            .entry(key("language"))
            .or_default()
            .insert(seed, value);
    }
    let mut expected: BTreeMap<(bool, [String; 5]), (usize, f64, Option<f64>)> = BTreeMap::new();
    for (key, values) in &cells {
        let (mean, std) = mean_std(values);
        expected.insert((false, key.clone()), (values.len(), mean, std));
    }
    for ([name, method, q, metric], by_lang) in &langs {
        if by_lang.len() < 2 {
            continue;
        }
        let seeds: Vec<u64> = by_lang
            .values()
            .flat_map(|s| s.keys().copied())
            .filter(|s| by_lang.values().all(|l| l.contains_key(s)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if seeds.is_empty() {
            continue;
        }
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|s| by_lang.values().map(|l| l[s]).sum::<f64>() / by_lang.len() as f64)
            .collect();
        let (mean, std) = mean_std(&per_seed);
        let key = [name.clone(), method.clone(), "avg".into(), q.clone(), metric.clone()];
        expected.insert((true, key), (per_seed.len(), mean, std));
    }

    let mut checked = 0;
    for s in &summary {
        let n: usize = s["n"].parse().map_err(|e| format!("n: {e}"))?;
        let aggregate = s["aggregate"] == "true";
        let key = [
            s["name"].clone(),
            s["method"].clone(),
            s["language"].clone(),
            s["mt_quality"].clone(),
            s["metric"].clone(),
        ];
        if n == 0 {
            if cells.contains_key(&key) {
                return Err(format!("{key:?} reported absent but has rows"));
            }
            continue;
        }
        let &(want_n, mean, std) = expected
            .get(&(aggregate, key.clone()))
            .ok_or_else(|| format!("summary row {key:?} has no rows behind it"))?;
        if n != want_n || !close(&s["mean"], Some(mean)) || !close(&s["std"], std) {
            return Err(format!("{key:?}: summary {n}/{}/{} vs oracle {want_n}/{mean}/{std:?}", s["mean"], s["std"]));
        }
        checked += 1;
    }
    if checked != expected.len() {
        return Err(format!("summary has {checked} populated rows, oracle {}", expected.len()));
    }
    for table in extra_tables {
        for row in read_table(&dir.join(table))? {
            if !summary.contains(&row) {
                return Err(format!("{table}: row {row:?} is not in the summary"));
            }
        }
    }
    Ok(checked)
}
