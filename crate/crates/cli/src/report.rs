//! `report`: merge finished run directories into cross-run tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use saetune::probe::FeatureCountProfile;
use saetune::svg;

use crate::error::CliError;
use crate::rundir::{read_manifest, Manifest, RunDir};

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::new("parse", format!("{}: empty table", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

struct Merged {
    header: Vec<String>,
    rows: Vec<(String, Vec<String>)>,
}

/// Rows of `file` from every run that has it, prefixed by run name. Runs
/// whose header differs from the first are rejected.
fn merge(runs: &[(String, PathBuf)], file: &str) -> Result<Option<Merged>, CliError> {
    let mut merged: Option<Merged> = None;
    for (name, dir) in runs {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let (header, rows) = read_table(&path)?;
        let m = merged.get_or_insert_with(|| Merged {
            header: header.clone(),
            rows: Vec::new(),
        });
        if m.header != header {
            return Err(CliError::new(
                "parse",
                format!("{}: header does not match earlier runs", path.display()),
            ));
        }
        m.rows.extend(rows.into_iter().map(|r| (name.clone(), r)));
    }
    Ok(merged)
}

fn merged_csv(m: &Merged) -> String {
    let mut s = format!("run,{}\n", m.header.join(","));
    for (run, r) in &m.rows {
        writeln!(s, "{},{}", csv_cell(run), r.join(",")).unwrap();
    }
    s
}

fn summary_csv(manifests: &[(String, Manifest)]) -> String {
    let keys: BTreeSet<&str> = manifests
        .iter()
        .flat_map(|(_, m)| m.summary.keys().map(String::as_str))
        .collect();
    let mut s = String::from("run,command");
    for k in &keys {
        s.push(',');
        s.push_str(&csv_cell(k));
    }
    s.push('\n');
    for (name, m) in manifests {
        s.push_str(&csv_cell(name));
        s.push(',');
        s.push_str(&csv_cell(&m.command));
        for k in &keys {
            s.push(',');
            s.push_str(&csv_cell(m.summary.get(*k).map(String::as_str).unwrap_or("")));
        }
        s.push('\n');
    }
    s
}

fn col(header: &[String], name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

/// Merge `runs` into `out`. Output depends only on the runs' contents and
/// their order, and nothing under an input run is modified.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Manifest, CliError> {
    let out_abs = fs::canonicalize(out).unwrap_or_else(|_| out.to_path_buf());
    let mut named = Vec::new();
    let mut manifests = Vec::new();
    for dir in runs {
        let m = read_manifest(dir)?;
        if fs::canonicalize(dir).map(|d| out_abs.starts_with(&d)).unwrap_or(false) {
            return Err(CliError::new(
                "usage",
                format!("output {} lies inside input run {}", out.display(), dir.display()),
            ));
        }
        let name = run_name(dir);
        named.push((name.clone(), dir.clone()));
        manifests.push((name, m));
    }
    let mut run = RunDir::create(out, "report", None)?;
    for (name, dir) in &named {
        run.input(&format!("{name}/manifest"), &dir.join(crate::rundir::MANIFEST))?;
    }
    run.write("report.csv", summary_csv(&manifests))?;
    run.summary("runs", named.len());

    if let Some(mut m) = merge(&named, "layers.csv")? {
        let lc = col(&m.header, "layer")
            .ok_or_else(|| CliError::new("parse", "layers.csv has no layer column"))?;
        let key = |r: &Vec<String>| r[lc].parse::<usize>().unwrap_or(usize::MAX);
        m.rows.sort_by(|a, b| key(&a.1).cmp(&key(&b.1)).then_with(|| a.0.cmp(&b.0)));
        run.write("layers.csv", merged_csv(&m))?;
        if let (Some(fc), Some(sc)) = (col(&m.header, "feature_count"), col(&m.header, "exact_match_final")) {
            // Mean over runs at each layer.
            let mut by_layer: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
            for (_, r) in &m.rows {
                let (Ok(l), Ok(f), Ok(s)) = (r[lc].parse::<usize>(), r[fc].parse::<f64>(), r[sc].parse::<f64>()) else {
                    return Err(CliError::new("parse", "layers.csv has a non-numeric cell"));
                };
                let e = by_layer.entry(l).or_default();
                e.0 += f;
                e.1 += s;
                e.2 += 1;
            }
            let profile = FeatureCountProfile {
                entries: by_layer.iter().map(|(&l, e)| (l, (e.0 / e.2 as f64).round() as usize)).collect(),
            };
            let scores: Vec<(usize, f64)> = by_layer.iter().map(|(&l, e)| (l, e.1 / e.2 as f64)).collect();
            run.write("plots/layers.svg", svg::score_feature_overlay(&scores, &profile))?;
        }
    }
    for file in ["ablation.csv", "transfer.csv", "profile.csv"] {
        if let Some(m) = merge(&named, file)? {
            run.write(file, merged_csv(&m))?;
        }
    }
    run.finish()
}
