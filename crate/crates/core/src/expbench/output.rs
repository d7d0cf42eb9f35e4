use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::study::{StudyName, StudyReport};
use super::ScenarioSpec;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SCENARIO: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study: StudyName,
    pub csv: String,
    pub json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub scenario: String,
    /// Sorted by study.
    pub artifacts: Vec<ManifestEntry>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes `<study>.csv` and `<study>.json` into `<out_root>/run-<hash>/`,
/// along with the scenario, and merges the study into `manifest.json`.
/// Returns the run directory.
pub fn write_study(out_root: &Path, spec: &ScenarioSpec, report: &StudyReport) -> Result<PathBuf> {
    let dir = out_root.join(spec.run_dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(SCENARIO), &to_json(spec)?)?;
    let name = report.study.as_str();
    let entry = ManifestEntry {
        study: report.study,
        csv: format!("{name}.csv"),
        json: format!("{name}.json"),
    };
    write(&dir.join(&entry.csv), &report.to_csv()?)?;
    write(&dir.join(&entry.json), &(report.to_json()? + "\n"))?;

    let mut manifest = match read_manifest(&dir) {
        Ok(m) if m.spec_hash == report.spec_hash => m,
        _ => Manifest {
            spec_hash: report.spec_hash.clone(),
            seeds: report.seeds.clone(),
            scenario: SCENARIO.into(),
            artifacts: Vec::new(),
        },
    };
    manifest.artifacts.retain(|a| a.study != report.study);
    manifest.artifacts.push(entry);
    manifest.artifacts.sort_by_key(|a| a.study);
    write(&dir.join(MANIFEST), &to_json(&manifest)?)?;
    Ok(dir)
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_study(run_dir: &Path, entry: &ManifestEntry) -> Result<StudyReport> {
    let path = run_dir.join(&entry.json);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        s.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = line(header.to_vec());
    out += &line(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    );
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text rendering of every study listed in the manifest.
pub fn render_report(run_dir: &Path) -> Result<String> {
    let manifest = read_manifest(run_dir)?;
    let mut out = format!(
        "run {} ({} seeds)\n",
        &manifest.spec_hash[..manifest.spec_hash.len().min(16)],
        manifest.seeds.len()
    );
    for entry in &manifest.artifacts {
        let rep = read_study(run_dir, entry)?;
        out += &format!("\n== {} ==\n", rep.study);
        let rows: Vec<Vec<String>> = rep
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.condition.clone(),
                    fmt_opt(r.lambda, 2),
                    fmt_opt(r.fraction, 2),
                    format!("{:.4}", r.mean_accuracy),
                    format!("{:.4}", r.std_accuracy),
                    r.n_seeds.to_string(),
                    fmt_opt(r.mean_paired_diff, 4),
                ]
            })
            .collect();
        out += &table(
            &[
                "condition",
                "lambda",
                "fraction",
                "mean_acc",
                "std_acc",
                "seeds",
                "paired_diff",
            ],
            &rows,
        );
        if !rep.findings.is_empty() {
            let rows: Vec<Vec<String>> = rep
                .findings
                .iter()
                .map(|f| vec![f.name.clone(), format!("{:.4}", f.value)])
                .collect();
            out += "\n";
            out += &table(&["finding", "value"], &rows);
        }
        let rows: Vec<Vec<String>> = rep
            .checks
            .iter()
            .map(|c| vec![c.name.clone(), if c.passed { "pass" } else { "FAIL" }.into()])
            .collect();
        out += "\n";
        out += &table(&["check", "result"], &rows);
    }
    Ok(out)
}
