//! Reshapes an artifact directory into tidy CSVs under `plots/`, one observation per row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;

use crate::artifacts::{Manifest, MANIFEST};

const RUN_OBSERVABLES: [&str; 4] = ["loss", "trace", "log_det", "theta_bar_norm2"];

/// What `emit` produced and what it could not find.
#[derive(Debug, Default)]
pub struct Emitted {
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn emit(dir: &Path) -> Result<Emitted> {
    let mut out = Emitted::default();
    if !dir.join(MANIFEST).exists() {
        out.warnings.push(format!("{} has no {MANIFEST}; nothing to emit", dir.display()));
        return Ok(out);
    }
    let manifest = Manifest::read(dir)?;
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut emitter = Emitter { dir, out: &mut out };

    let mut groups: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
    for a in &manifest.artifacts {
        if let Some((group, file)) = a.split_once('/') {
            if let Some(seed) = file.strip_prefix("seed_").and_then(|s| s.strip_suffix(".csv")) {
                if let Ok(seed) = seed.parse() {
                    groups.entry(group.to_string()).or_default().push((seed, a.clone()));
                }
            }
        }
    }
    for (group, runs) in &groups {
        for obs in RUN_OBSERVABLES {
            emitter.long_series(group, runs, obs)?;
        }
    }

    match manifest.kind.as_str() {
        "equilibrium" => {
            emitter.select("equilibrium.csv", "equilibrium.csv", &["coord", "measured", "stderr", "predicted"])?;
        }
        "trace_drift" | "anticorr" if groups.is_empty() => emitter.missing("per-run series"),
        "eta_sweep" => {
            emitter.select("sweep.csv", "eta_sweep_points.csv", &["eta_squared", "drift", "stderr"])?;
            emitter.fit_line("fit.json", "/ols", "eta_sweep_fit.csv")?;
        }
        "negeig" => {
            emitter.select("negeig.csv", "negeig_scatter.csv", &["loss", "negative_sum"])?;
            emitter.fit_line("fit.json", "/fit", "negeig_fit.csv")?;
        }
        "alignment" => {
            emitter.select("alignment.csv", "alignment_gap.csv", &["step", "batch", "loss", "formula_gap"])?;
            emitter.select("training_loss.csv", "training_loss.csv", &["step", "loss"])?;
        }
        "projected_path" => {
            emitter.select("path.csv", "path_trace.csv", &["origin_step", "trace", "trace_stderr"])?;
        }
        _ => {}
    }
    Ok(out)
}

struct Emitter<'a> {
    dir: &'a Path,
    out: &'a mut Emitted,
}

impl Emitter<'_> {
    fn missing(&mut self, what: &str) {
        self.out.warnings.push(format!("missing {what}"));
    }

    fn reader(&mut self, rel: &str) -> Result<Option<csv::Reader<fs::File>>> {
        let path = self.dir.join(rel);
        if !path.exists() {
            self.missing(rel);
            return Ok(None);
        }
        Ok(Some(csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?))
    }

    fn writer(&mut self, name: &str) -> Result<csv::Writer<fs::File>> {
        let rel = format!("plots/{name}");
        self.out.files.push(rel.clone());
        Ok(csv::Writer::from_path(self.dir.join(rel))?)
    }

    /// `(seed, step, <obs>)` rows gathered from every run of a group.
    fn long_series(&mut self, group: &str, runs: &[(u64, String)], obs: &str) -> Result<()> {
        let mut rows = Vec::new();
        for (seed, rel) in runs {
            let Some(mut r) = self.reader(rel)? else { continue };
            let headers = r.headers()?.clone();
            let (Some(step), Some(col)) =
                (headers.iter().position(|h| h == "step"), headers.iter().position(|h| h == obs))
            else {
                self.missing(&format!("column {obs} in {rel}"));
                continue;
            };
            for rec in r.records() {
                let rec = rec?;
                rows.push([seed.to_string(), rec[step].to_string(), rec[col].to_string()]);
            }
        }
        let mut w = self.writer(&format!("{group}_{obs}.csv"))?;
        w.write_record(["seed", "step", obs])?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn select(&mut self, src: &str, name: &str, columns: &[&str]) -> Result<()> {
        let Some(mut r) = self.reader(src)? else { return Ok(()) };
        let headers = r.headers()?.clone();
        let mut idx = Vec::new();
        for c in columns {
            match headers.iter().position(|h| h == *c) {
                Some(i) => idx.push(i),
                None => {
                    self.missing(&format!("column {c} in {src}"));
                    return Ok(());
                }
            }
        }
        let mut w = self.writer(name)?;
        w.write_record(columns)?;
        for rec in r.records() {
            let rec = rec?;
            w.write_record(idx.iter().map(|&i| &rec[i]))?;
        }
        w.flush()?;
        Ok(())
    }

    fn fit_line(&mut self, src: &str, pointer: &str, name: &str) -> Result<()> {
        let path = self.dir.join(src);
        if !path.exists() {
            self.missing(src);
            return Ok(());
        }
        let v: Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let Some(fit) = v.pointer(pointer).filter(|f| f.is_object()) else {
            self.missing(&format!("fit in {src}"));
            return Ok(());
        };
        let mut w = self.writer(name)?;
        w.write_record(["slope", "intercept", "r_squared"])?;
        w.write_record(["slope", "intercept", "r_squared"].map(|k| fit[k].to_string()))?;
        w.flush()?;
        Ok(())
    }
}
