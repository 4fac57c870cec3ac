//! Ablation sweeps. Each writes `sweeps/<kind>.tsv` with exactly one row
//! per (preset, sweep point).

use std::path::PathBuf;

use anyhow::{Context, Result};
use fisup_core::explain::{select_best_explainer, ExplainConfig, FaithScore};
use fisup_core::synthdata::{Dataset, Split};
use fisup_core::train::train_run;
use serde::{Deserialize, Serialize};

use crate::pipeline::Pipeline;
use crate::store::cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    /// Binarization threshold of human FI.
    Tau,
    /// Number of training instances.
    Size,
    /// Replace function of the objective.
    Replace,
    /// Explainer inside the objective (Align and Inv-FI).
    Fi,
    /// Explainer for evaluation, chosen by faithfulness on Dev.
    Explainer,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Tau => "tau",
            SweepKind::Size => "size",
            SweepKind::Replace => "replace",
            SweepKind::Fi => "fi",
            SweepKind::Explainer => "explainer",
        }
    }
}

/// Accuracies of one trained run at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub fraction_important: f64,
    pub dev_acc: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
}

/// Mean fraction of objects marked important.
pub fn fraction_important(ds: &Dataset) -> f64 {
    let total: f64 = ds
        .instances
        .iter()
        .map(|i| i.important.iter().filter(|&&b| b).count() as f64 / i.important.len() as f64)
        .sum();
    total / ds.instances.len() as f64
}

/// Keeps the first `n` Train instances.
pub fn truncate_train(ds: &Dataset, n: usize) -> Dataset {
    let mut seen = 0;
    let mut out = ds.clone();
    out.instances.retain(|i| {
        if i.split != Split::Train {
            return true;
        }
        seen += 1;
        seen <= n
    });
    out
}

struct Point {
    label: String,
    dataset: Dataset,
    objective_patch: Option<(&'static str, serde_json::Value)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl Pipeline {
    fn points(&self, kind: SweepKind) -> Result<Vec<Point>> {
        let base = self.dataset()?;
        let s = &self.cfg.sweep;
        let same = |label: String, patch: Option<(&'static str, serde_json::Value)>| Point {
            label,
            dataset: base.clone(),
            objective_patch: patch,
        };
        Ok(match kind {
            SweepKind::Tau => s
                .taus
                .iter()
                .map(|&t| Ok(Point { label: t.to_string(), dataset: base.with_threshold(t)?, objective_patch: None }))
                .collect::<Result<_>>()?,
            SweepKind::Size => s
                .train_sizes
                .iter()
                .map(|&n| Point { label: n.to_string(), dataset: truncate_train(base, n), objective_patch: None })
                .collect(),
            SweepKind::Replace => s
                .replace
                .iter()
                .map(|r| Ok(same(serde_json::to_value(r)?.as_str().unwrap_or_default().to_string(), Some(("replace", serde_json::to_value(r)?)))))
                .collect::<Result<_>>()?,
            SweepKind::Fi => s
                .explainers
                .iter()
                .map(|e| Ok(same(e.tag(), Some(("fi", serde_json::to_value(e)?)))))
                .collect::<Result<_>>()?,
            SweepKind::Explainer => unreachable!("explainer sweep trains nothing"),
        })
    }

    fn point_result(&self, kind: SweepKind, point: &Point, preset: &str, seed: u64) -> Result<PointResult> {
        let rel = PathBuf::from("sweeps").join(kind.name()).join(&point.label).join(preset).join(format!("seed-{seed}.json"));
        if let Some(r) = self.store.read_json(&rel)? {
            return Ok(r);
        }
        log::info!("sweep {} point {} preset {preset} seed {seed}", kind.name(), point.label);
        let mut objective = self.cfg.objective(preset)?;
        if let Some((field, value)) = &point.objective_patch {
            let mut v = serde_json::to_value(&objective)?;
            v[*field] = value.clone();
            if *field == "replace" {
                v["suff_replace"] = serde_json::Value::Null;
            }
            objective = serde_json::from_value(v)?;
        }
        let run = train_run(&point.dataset, &self.cfg.train_config(preset), &objective, seed)
            .with_context(|| format!("sweep point {}", point.label))?;
        let acc = |split| fisup_core::train::accuracy_of(&run.model, &point.dataset.split(split));
        let r = PointResult {
            fraction_important: fraction_important(&point.dataset),
            dev_acc: run.record.best_dev_acc,
            id_acc: acc(Split::TestId)?,
            ood_acc: acc(Split::TestOod)?,
        };
        self.store.write_json(&rel, &r)?;
        Ok(r)
    }

    /// Runs a sweep over the selected presets and seeds; returns the table rows.
    pub fn sweep(&self, kind: SweepKind) -> Result<Vec<Vec<String>>> {
        if kind == SweepKind::Explainer {
            return self.explainer_sweep();
        }
        let mut rows = Vec::new();
        for point in self.points(kind)? {
            for p in &self.presets {
                let results: Vec<PointResult> =
                    self.seeds.iter().map(|&s| self.point_result(kind, &point, p, s)).collect::<Result<_>>()?;
                rows.push(vec![
                    p.clone(),
                    point.label.clone(),
                    results[0].fraction_important.to_string(),
                    mean(results.iter().map(|r| r.dev_acc)).to_string(),
                    mean(results.iter().map(|r| r.id_acc)).to_string(),
                    mean(results.iter().map(|r| r.ood_acc)).to_string(),
                    results.len().to_string(),
                ]);
            }
        }
        let header = ["preset", "point", "fraction_important", "dev_acc", "id_acc", "ood_acc", "seeds"];
        self.store.write_tsv(format!("sweeps/{}.tsv", kind.name()), &header, &rows)?;
        Ok(rows)
    }

    /// Dev faithfulness of each candidate explainer on the trained runs,
    /// marking the one selected per preset.
    fn explainer_sweep(&self) -> Result<Vec<Vec<String>>> {
        self.train_all(1, None)?;
        let candidates: &[ExplainConfig] = &self.cfg.sweep.explainers;
        let mut rows = Vec::new();
        for p in &self.presets {
            let mut totals = vec![(0.0, 0.0); candidates.len()];
            for &s in &self.seeds {
                let rel = PathBuf::from("sweeps/explainer").join(p).join(format!("seed-{s}.json"));
                let scores: Vec<(f64, f64)> = match self.store.read_json(&rel)? {
                    Some(v) => v,
                    None => {
                        let v = self.dev_faithfulness(&self.model(p, s)?, candidates, s)?;
                        self.store.write_json(&rel, &v)?;
                        v
                    }
                };
                for (t, (su, co)) in totals.iter_mut().zip(scores) {
                    t.0 += su / self.seeds.len() as f64;
                    t.1 += co / self.seeds.len() as f64;
                }
            }
            let scored: Vec<FaithScore<usize>> =
                totals.iter().enumerate().map(|(i, &(suff, comp))| FaithScore { tag: i, suff, comp }).collect();
            let best = select_best_explainer(&scored)?;
            for (i, c) in candidates.iter().enumerate() {
                rows.push(vec![
                    p.clone(),
                    c.tag(),
                    c.budget.to_string(),
                    cell(Some(totals[i].0)),
                    cell(Some(totals[i].1)),
                    u8::from(i == best).to_string(),
                ]);
            }
        }
        let header = ["preset", "point", "budget", "suff", "comp", "selected"];
        self.store.write_tsv("sweeps/explainer.tsv", &header, &rows)?;
        Ok(rows)
    }
}
