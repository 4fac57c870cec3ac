//! Pipeline stages: generate, train, evaluate, summarize, analyze, compare.
//!
//! Every stage is idempotent: a stage whose stamped output already exists
//! is skipped.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use fisup_core::analysis::{
    bootstrap, bootstrap_difference, categorize_faithfulness, conditional_table, default_predictor_sets,
    fit_logistic_trend, mean_of_means, metric_ood_cv, BootstrapResult, CorrelationStudy, FaithCategory,
    FaithKindCat,
};
use fisup_core::batch::Batch;
use fisup_core::explain::{select_best_explainer, ExplainConfig, FaithScore};
use fisup_core::metrics::{evaluate, explanation_scores, faithfulness_scores, DatapointRecord, MetricsReport};
use fisup_core::model::{AttentionClassifier, Checkpoint};
use fisup_core::seeding;
use fisup_core::synthdata::{Dataset, Split};
use fisup_core::train::{train_run, EpochLog, RunRecord};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::store::{cell, Store};

pub const DATASET_FILE: &str = "dataset.jsonl";

/// Evaluation output of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub preset: String,
    pub seed: u64,
    /// Tag of the explainer behind the explanation metrics.
    pub explainer: String,
    pub report: MetricsReport,
}

/// Mean report over seeds plus bootstrap intervals for the accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSummary {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub report: MetricsReport,
    pub id_acc: BootstrapResult,
    pub ood_acc: BootstrapResult,
}

/// One metric of a two-preset comparison. `p_greater` is the one-sided
/// p-value for `candidate > reference`, `p_less` for `candidate < reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub candidate: String,
    pub reference: String,
    pub candidate_mean: f64,
    pub reference_mean: f64,
    pub difference: BootstrapResult,
    pub p_greater: f64,
    pub p_less: f64,
}

/// Per-datapoint values compared between presets.
pub const COMPARED: [&str; 5] = ["id_acc", "ood_acc", "rrr_suff", "rrr_inv", "rrr_unc"];

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub store: Store,
    pub presets: Vec<String>,
    pub seeds: Vec<u64>,
    dataset: OnceCell<Dataset>,
}

fn run_dir(preset: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(preset).join(format!("seed-{seed}"))
}

fn bool_value(b: bool) -> f64 {
    f64::from(u8::from(b))
}

/// Per-datapoint values of `metric` from one run's records, in record order.
pub fn metric_values(records: &[DatapointRecord], metric: &str) -> Result<Vec<f64>> {
    let test_id = || records.iter().filter(|r| r.split == Split::TestId);
    Ok(match metric {
        "id_acc" => test_id().map(|r| bool_value(r.correct)).collect(),
        "ood_acc" => records.iter().filter(|r| r.split == Split::TestOod).map(|r| bool_value(r.correct)).collect(),
        "rrr_suff" => test_id().filter_map(|r| r.rrr).map(|p| bool_value(p.suff)).collect(),
        "rrr_inv" => test_id().filter_map(|r| r.rrr).map(|p| p.inv).collect(),
        "rrr_unc" => test_id().filter_map(|r| r.rrr).map(|p| p.unc).collect(),
        other => bail!("unknown per-datapoint metric {other:?}"),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl Pipeline {
    /// Opens `out` for `cfg` (see [`Store::open`]); `presets` and `seeds`
    /// default to the config's selection.
    pub fn open(
        cfg: ExperimentConfig,
        out: &Path,
        clean: bool,
        presets: Option<Vec<String>>,
        seeds: Option<Vec<u64>>,
    ) -> Result<Self> {
        let store = Store::open(out, &cfg, clean)?;
        Self::with_store(cfg, store, presets, seeds)
    }

    fn with_store(cfg: ExperimentConfig, store: Store, presets: Option<Vec<String>>, seeds: Option<Vec<u64>>) -> Result<Self> {
        let presets = presets.unwrap_or_else(|| cfg.objective.presets.clone());
        let seeds = seeds.unwrap_or_else(|| cfg.train.seeds.clone());
        if presets.is_empty() || seeds.is_empty() {
            bail!("no presets or no seeds selected");
        }
        for p in &presets {
            cfg.objective(p)?;
        }
        Ok(Self { cfg, store, presets, seeds, dataset: OnceCell::new() })
    }

    /// Attaches a worker to a directory its parent already stamped.
    pub fn attach(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        let store = Store::attach(out, &cfg)?;
        Self::with_store(cfg, store, None, None)
    }

    fn build_dataset(&self) -> Result<Dataset> {
        let d = &self.cfg.dataset;
        Ok(Dataset::build(&d.generator, &d.split, d.tau, d.seed, d.split_seed)?)
    }

    /// Stage `gen`: writes the dataset unless already present.
    pub fn generate(&self) -> Result<()> {
        if self.store.exists(DATASET_FILE) {
            self.store.open_jsonl(DATASET_FILE, "dataset")?;
            return Ok(());
        }
        log::info!("generating dataset");
        let ds = self.build_dataset()?;
        let mut body = Vec::new();
        ds.write_jsonl(&mut body)?;
        self.store.write_jsonl_body(DATASET_FILE, "dataset", &body)
    }

    pub fn dataset(&self) -> Result<&Dataset> {
        if let Some(ds) = self.dataset.get() {
            return Ok(ds);
        }
        self.generate()?;
        let reader = self.store.open_jsonl(DATASET_FILE, "dataset")?;
        let ds = Dataset::read_jsonl(reader, self.cfg.dataset.generator.n_answers(), self.cfg.dataset.tau)?;
        Ok(self.dataset.get_or_init(|| ds))
    }

    pub fn run_record(&self, preset: &str, seed: u64) -> Result<Option<RunRecord>> {
        self.store.read_json(run_dir(preset, seed).join("record.json"))
    }

    /// Trains one run unless its record exists.
    pub fn train_one(&self, preset: &str, seed: u64) -> Result<RunRecord> {
        if let Some(r) = self.run_record(preset, seed)? {
            return Ok(r);
        }
        log::info!("training {preset} seed {seed}");
        let dir = run_dir(preset, seed);
        let run = train_run(self.dataset()?, &self.cfg.train_config(preset), &self.cfg.objective(preset)?, seed)
            .with_context(|| format!("training {preset} seed {seed}"))?;
        let epochs: Vec<&EpochLog> = run.record.epochs.iter().collect();
        self.store.write_jsonl(dir.join("epochs.jsonl"), "epoch", &epochs)?;
        let checkpoint = Checkpoint::from_model(&run.model, self.store.hash());
        self.store.write_raw(dir.join("checkpoint.json"), serde_json::to_string(&checkpoint)?.as_bytes())?;
        self.store.write_json(dir.join("record.json"), &run.record)?;
        Ok(run.record)
    }

    pub fn model(&self, preset: &str, seed: u64) -> Result<AttentionClassifier> {
        let path = self.store.path(run_dir(preset, seed).join("checkpoint.json"));
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config_hash != self.store.hash() {
            bail!("{} was written by config {}", path.display(), ck.config_hash);
        }
        Ok(ck.to_model()?)
    }

    fn pending(&self) -> Result<Vec<(String, u64)>> {
        let mut out = Vec::new();
        for p in &self.presets {
            for &s in &self.seeds {
                if self.run_record(p, s)?.is_none() {
                    out.push((p.clone(), s));
                }
            }
        }
        Ok(out)
    }

    /// Stage `train` over every selected preset and seed.
    ///
    /// With `jobs > 1` and a worker executable, runs go to up to `jobs`
    /// child processes, each owning one run directory.
    pub fn train_all(&self, jobs: usize, worker: Option<&Path>) -> Result<Vec<RunRecord>> {
        let pending = self.pending()?;
        match worker {
            Some(exe) if jobs > 1 && pending.len() > 1 => self.fan_out(exe, jobs, pending)?,
            _ => {
                for (p, s) in &pending {
                    self.train_one(p, *s)?;
                }
            }
        }
        let mut out = Vec::new();
        for p in &self.presets {
            for &s in &self.seeds {
                out.push(self.run_record(p, s)?.with_context(|| format!("run {p} seed {s} missing"))?);
            }
        }
        Ok(out)
    }

    fn fan_out(&self, exe: &Path, jobs: usize, mut pending: Vec<(String, u64)>) -> Result<()> {
        // Warm the dataset file so workers only read it.
        self.generate()?;
        pending.reverse();
        let config = self.store.path(crate::store::CONFIG_FILE);
        let mut running: Vec<(Child, String, u64)> = Vec::new();
        let mut failed = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < jobs {
                let Some((preset, seed)) = pending.pop() else { break };
                let child = Command::new(exe)
                    .arg("--config")
                    .arg(&config)
                    .arg("--out")
                    .arg(self.store.root())
                    .args(["--preset", &preset, "--seed-list", &seed.to_string(), "worker"])
                    .spawn()
                    .with_context(|| format!("spawning {}", exe.display()))?;
                running.push((child, preset, seed));
            }
            let mut i = 0;
            while i < running.len() {
                if let Some(status) = running[i].0.try_wait()? {
                    let (_, p, s) = running.swap_remove(i);
                    if !status.success() {
                        failed.push(format!("{p} seed {s}"));
                    }
                } else {
                    i += 1;
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        if !failed.is_empty() {
            bail!("worker runs failed: {}", failed.join(", "));
        }
        Ok(())
    }

    /// The configured explainer, or the most faithful candidate on Dev.
    pub fn choose_explainer(&self, net: &AttentionClassifier, seed: u64) -> Result<ExplainConfig> {
        let candidates = &self.cfg.eval.select_from;
        if candidates.is_empty() {
            return Ok(self.cfg.eval.explainer.clone());
        }
        let scores = self.dev_faithfulness(net, candidates, seed)?;
        let scored: Vec<FaithScore<ExplainConfig>> = candidates
            .iter()
            .zip(scores)
            .map(|(c, (suff, comp))| FaithScore { tag: c.clone(), suff, comp })
            .collect();
        Ok(select_best_explainer(&scored)?)
    }

    /// Mean `(suff, comp)` of each candidate on the first `select_size` Dev instances.
    pub fn dev_faithfulness(&self, net: &AttentionClassifier, candidates: &[ExplainConfig], seed: u64) -> Result<Vec<(f64, f64)>> {
        let dev = self.dataset()?.split(Split::Dev);
        let dev = &dev[..self.cfg.eval.select_size.clamp(1, dev.len())];
        let mut out = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut rng = seeding::stream(seed, &format!("select-{}", c.tag()));
            let (mut suff, mut comp) = (0.0, 0.0);
            for chunk in dev.chunks(256) {
                let batch = Batch::from_instances(chunk)?;
                let scores = explanation_scores(net, &batch, c, &mut rng)?;
                for (s, k) in faithfulness_scores(net, &batch, &scores, self.cfg.eval.replace, &mut rng)? {
                    suff += s;
                    comp += k;
                }
            }
            out.push((suff / dev.len() as f64, comp / dev.len() as f64));
        }
        Ok(out)
    }

    pub fn run_metrics(&self, preset: &str, seed: u64) -> Result<Option<RunMetrics>> {
        self.store.read_json(run_dir(preset, seed).join("metrics.json"))
    }

    pub fn datapoints(&self, preset: &str, seed: u64) -> Result<Vec<DatapointRecord>> {
        self.store.read_jsonl(run_dir(preset, seed).join("datapoints.jsonl"), "datapoint")
    }

    /// Evaluates one trained run unless its metrics exist.
    pub fn eval_one(&self, preset: &str, seed: u64) -> Result<RunMetrics> {
        if let Some(m) = self.run_metrics(preset, seed)? {
            return Ok(m);
        }
        self.train_one(preset, seed)?;
        log::info!("evaluating {preset} seed {seed}");
        let net = self.model(preset, seed)?;
        let mut eval = self.cfg.eval_config();
        eval.explainer = self.choose_explainer(&net, seed)?;
        let (report, records) = evaluate(&net, self.dataset()?, &eval, seed)?;
        let dir = run_dir(preset, seed);
        self.store.write_jsonl(dir.join("datapoints.jsonl"), "datapoint", &records)?;
        let m = RunMetrics { preset: preset.into(), seed, explainer: eval.explainer.tag(), report };
        self.store.write_json(dir.join("metrics.json"), &m)?;
        Ok(m)
    }

    /// Stage `eval`: every selected run, then the summary tables.
    pub fn eval_all(&self, jobs: usize, worker: Option<&Path>) -> Result<Vec<RunMetrics>> {
        self.train_all(jobs, worker)?;
        let mut out = Vec::new();
        for p in &self.presets {
            for &s in &self.seeds {
                out.push(self.eval_one(p, s)?);
            }
        }
        self.summarize(&out)?;
        Ok(out)
    }

    fn units(&self, preset: &str, metric: &str) -> Result<Vec<Vec<f64>>> {
        self.seeds.iter().map(|&s| metric_values(&self.datapoints(preset, s)?, metric)).collect()
    }

    pub fn preset_summary(&self, preset: &str, runs: &[&RunMetrics]) -> Result<PresetSummary> {
        let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
        let avg = |f: fn(&MetricsReport) -> f64| mean(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        let report = MetricsReport {
            id_acc: avg(|r| r.id_acc),
            ood_acc: avg(|r| r.ood_acc),
            rrr_suff: avg(|r| r.rrr_suff),
            rrr_inv: avg(|r| r.rrr_inv),
            rrr_unc: avg(|r| r.rrr_unc),
            plausibility: mean_opt(reports.iter().map(|r| r.plausibility)),
            faith_suff: mean_opt(reports.iter().map(|r| r.faith_suff)),
            faith_comp: mean_opt(reports.iter().map(|r| r.faith_comp)),
            mean_confidence: avg(|r| r.mean_confidence),
            rrr_excluded: reports[0].rrr_excluded,
        };
        let a = &self.cfg.analysis;
        let boot = |metric: &str| -> Result<BootstrapResult> {
            let seed = seeding::derive(a.seed, &format!("summary-{preset}-{metric}"));
            Ok(bootstrap(&self.units(preset, metric)?, mean_of_means, a.resamples, seed)?)
        };
        Ok(PresetSummary {
            preset: preset.into(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            report,
            id_acc: boot("id_acc")?,
            ood_acc: boot("ood_acc")?,
        })
    }

    /// Per-run and per-preset tables plus one summary JSON per preset.
    pub fn summarize(&self, runs: &[RunMetrics]) -> Result<Vec<PresetSummary>> {
        let header = [
            "preset", "seed", "explainer", "selected_epoch", "best_dev_acc", "id_acc", "ood_acc", "rrr_suff", "rrr_inv",
            "rrr_unc", "plausibility", "faith_suff", "faith_comp", "mean_confidence", "rrr_excluded",
        ];
        let mut rows = Vec::new();
        for m in runs {
            let rec = self.run_record(&m.preset, m.seed)?.context("run record missing")?;
            let r = &m.report;
            rows.push(vec![
                m.preset.clone(),
                m.seed.to_string(),
                m.explainer.clone(),
                rec.selected_epoch.to_string(),
                rec.best_dev_acc.to_string(),
                r.id_acc.to_string(),
                r.ood_acc.to_string(),
                r.rrr_suff.to_string(),
                r.rrr_inv.to_string(),
                r.rrr_unc.to_string(),
                cell(r.plausibility),
                cell(r.faith_suff),
                cell(r.faith_comp),
                r.mean_confidence.to_string(),
                r.rrr_excluded.to_string(),
            ]);
        }
        self.store.write_tsv("summary/runs.tsv", &header, &rows)?;

        let mut summaries = Vec::new();
        let mut rows = Vec::new();
        for p in &self.presets {
            let mine: Vec<&RunMetrics> = runs.iter().filter(|r| &r.preset == p).collect();
            if mine.is_empty() {
                continue;
            }
            let s = self.preset_summary(p, &mine)?;
            self.store.write_json(format!("summary/{p}.json"), &s)?;
            let r = &s.report;
            rows.push(vec![
                p.clone(),
                s.seeds.len().to_string(),
                s.id_acc.estimate.to_string(),
                s.id_acc.lo.to_string(),
                s.id_acc.hi.to_string(),
                s.ood_acc.estimate.to_string(),
                s.ood_acc.lo.to_string(),
                s.ood_acc.hi.to_string(),
                r.rrr_suff.to_string(),
                r.rrr_inv.to_string(),
                r.rrr_unc.to_string(),
                cell(r.plausibility),
                cell(r.faith_suff),
                cell(r.faith_comp),
            ]);
            summaries.push(s);
        }
        let header = [
            "preset", "seeds", "id_acc", "id_lo", "id_hi", "ood_acc", "ood_lo", "ood_hi", "rrr_suff", "rrr_inv", "rrr_unc",
            "plausibility", "faith_suff", "faith_comp",
        ];
        self.store.write_tsv("summary/presets.tsv", &header, &rows)?;
        Ok(summaries)
    }

    /// Bootstrap comparison of `candidate` against `reference` on each of [`COMPARED`].
    pub fn compare(&self, candidate: &str, reference: &str, jobs: usize, worker: Option<&Path>) -> Result<Vec<Comparison>> {
        let sub = Pipeline {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            presets: vec![candidate.into(), reference.into()],
            seeds: self.seeds.clone(),
            dataset: self.dataset.clone(),
        };
        sub.eval_all(jobs, worker)?;
        let a = &self.cfg.analysis;
        let mut out = Vec::new();
        for metric in COMPARED {
            let (ua, ub) = (sub.units(candidate, metric)?, sub.units(reference, metric)?);
            let seed = seeding::derive(a.seed, &format!("compare-{metric}"));
            let difference = bootstrap_difference(&ua, &ub, a.resamples, seed)?;
            let reverse = bootstrap_difference(&ub, &ua, a.resamples, seed)?;
            out.push(Comparison {
                metric: metric.into(),
                candidate: candidate.into(),
                reference: reference.into(),
                candidate_mean: mean_of_means(&ua),
                reference_mean: mean_of_means(&ub),
                p_greater: difference.p_value,
                p_less: reverse.p_value,
                difference,
            });
        }
        let stem = format!("compare/{candidate}__vs__{reference}");
        self.store.write_json(format!("{stem}.json"), &out)?;
        let header = ["metric", "candidate_mean", "reference_mean", "difference", "lo", "hi", "p_greater", "p_less"];
        let rows: Vec<Vec<String>> = out
            .iter()
            .map(|c| {
                vec![
                    c.metric.clone(),
                    c.candidate_mean.to_string(),
                    c.reference_mean.to_string(),
                    c.difference.estimate.to_string(),
                    c.difference.lo.to_string(),
                    c.difference.hi.to_string(),
                    c.p_greater.to_string(),
                    c.p_less.to_string(),
                ]
            })
            .collect();
        self.store.write_tsv(format!("{stem}.tsv"), &header, &rows)?;
        Ok(out)
    }

    /// Stage `analyze`: faithfulness categories, plausibility trends,
    /// conditional tables and the metric/OOD cross-validation.
    pub fn analyze(&self, jobs: usize, worker: Option<&Path>) -> Result<()> {
        let runs = self.eval_all(jobs, worker)?;
        self.metric_ood_table(&runs)?;
        if !self.cfg.eval.explanations {
            log::warn!("explanations disabled; skipping explanation analyses");
            return Ok(());
        }
        let th = &self.cfg.analysis.thresholds;
        let mut props = Vec::new();
        let mut trends = Vec::new();
        let mut series = Vec::new();
        let mut conditional = Vec::new();
        let mut points = Vec::new();
        for p in &self.presets {
            // Test-ID datapoints of every seed, with their run's mean plausibility.
            let mut plaus = Vec::new();
            let mut model_plaus = Vec::new();
            let mut correct = Vec::new();
            let mut faith: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for &s in &self.seeds {
                let recs: Vec<DatapointRecord> =
                    self.datapoints(p, s)?.into_iter().filter(|r| r.split == Split::TestId).collect();
                let run_plaus = mean(&recs.iter().filter_map(|r| r.plausibility).collect::<Vec<_>>());
                for r in &recs {
                    let (Some(pl), Some(su), Some(co)) = (r.plausibility, r.suff, r.comp) else { continue };
                    plaus.push(pl);
                    model_plaus.push(run_plaus);
                    correct.push(r.correct);
                    faith.entry("suff").or_default().push(su);
                    faith.entry("comp").or_default().push(co);
                    points.push(vec![
                        p.clone(),
                        s.to_string(),
                        r.id.to_string(),
                        pl.to_string(),
                        u8::from(r.correct).to_string(),
                        su.to_string(),
                        co.to_string(),
                    ]);
                }
            }
            if plaus.is_empty() {
                continue;
            }
            for (name, kind) in [("suff", FaithKindCat::Suff), ("comp", FaithKindCat::Comp)] {
                let (labels, shares) = categorize_faithfulness(&faith[name], kind, th);
                props.push(
                    [p.clone(), name.into()]
                        .into_iter()
                        .chain(FaithCategory::ALL.iter().map(|c| shares[c].to_string()))
                        .collect(),
                );
                let pts: Vec<(f64, bool, FaithCategory)> =
                    plaus.iter().zip(&correct).zip(&labels).map(|((&x, &y), &c)| (x, y, c)).collect();
                for t in fit_logistic_trend(&pts) {
                    let fit = t.fit.as_ref();
                    trends.push(vec![
                        p.clone(),
                        name.into(),
                        t.category.name().into(),
                        t.n.to_string(),
                        cell(fit.map(|f| f.intercept)),
                        cell(fit.map(|f| f.slope)),
                        cell(fit.map(|f| f.slope_se)),
                    ]);
                    if let Some(f) = fit {
                        for i in 0..=20 {
                            let x = -1.0 + 0.1 * i as f64;
                            let y = 1.0 / (1.0 + (-(f.intercept + f.slope * x)).exp());
                            series.push(vec![p.clone(), name.into(), t.category.name().into(), x.to_string(), y.to_string()]);
                        }
                    }
                }
                for (level, values) in [("datapoint", &plaus), ("model", &model_plaus)] {
                    let table = conditional_table(values, &labels, None)?;
                    for row in table.rows {
                        conditional.push(vec![
                            p.clone(),
                            name.into(),
                            level.into(),
                            row.bucket.to_string(),
                            row.count.to_string(),
                            row.dist[0].to_string(),
                            row.dist[1].to_string(),
                            row.dist[2].to_string(),
                        ]);
                    }
                }
            }
        }
        let s = &self.store;
        s.write_tsv("analysis/faithfulness.tsv", &["preset", "metric", "worst", "middle", "best"], &props)?;
        s.write_tsv(
            "analysis/trends.tsv",
            &["preset", "metric", "category", "n", "intercept", "slope", "slope_se"],
            &trends,
        )?;
        s.write_tsv("analysis/trend_series.tsv", &["preset", "metric", "category", "x", "y"], &series)?;
        s.write_tsv(
            "analysis/conditional.tsv",
            &["preset", "metric", "level", "bucket", "count", "worst", "middle", "best"],
            &conditional,
        )?;
        s.write_tsv(
            "analysis/plausibility_points.tsv",
            &["preset", "seed", "id", "plausibility", "correct", "suff", "comp"],
            &points,
        )?;
        Ok(())
    }

    /// Cross-validated correlation of metric composites with OOD accuracy.
    /// Needs at least 20 evaluated runs; otherwise the table has no rows.
    fn metric_ood_table(&self, runs: &[RunMetrics]) -> Result<()> {
        let header = ["predictors", "train_corr", "test_corr", "lo", "hi", "dropped"];
        let mut rows = Vec::new();
        if runs.len() >= 20 {
            let explanations = self.cfg.eval.explanations;
            let mut columns = vec!["id_acc", "rrr_suff", "rrr_inv", "rrr_unc", "mean_confidence"];
            if explanations {
                columns.extend(["plausibility", "faith_suff", "faith_comp"]);
            }
            let study = CorrelationStudy {
                columns: columns.iter().map(|c| c.to_string()).collect(),
                rows: runs
                    .iter()
                    .map(|m| {
                        let r = &m.report;
                        let mut row = vec![r.id_acc, r.rrr_suff, r.rrr_inv, r.rrr_unc, r.mean_confidence];
                        if explanations {
                            row.extend([r.plausibility, r.faith_suff, r.faith_comp].map(|v| v.unwrap_or(f64::NAN)));
                        }
                        row
                    })
                    .collect(),
                ood: runs.iter().map(|m| m.report.ood_acc).collect(),
            };
            let sets: Vec<_> = default_predictor_sets()
                .into_iter()
                .filter(|s| s.columns.iter().all(|c| columns.contains(&c.as_str())))
                .collect();
            let a = &self.cfg.analysis;
            for r in metric_ood_cv(&study, &sets, a.cv_resamples, seeding::derive(a.seed, "metric-ood-cv"))? {
                rows.push(vec![
                    r.name,
                    r.train_corr.to_string(),
                    r.test_corr.to_string(),
                    r.lo.to_string(),
                    r.hi.to_string(),
                    r.dropped.join(","),
                ]);
            }
        } else {
            log::warn!("{} runs; the metric/OOD cross-validation needs at least 20", runs.len());
        }
        self.store.write_tsv("analysis/metric_ood_cv.tsv", &header, &rows)
    }

    /// `gen → train → eval → analyze`.
    pub fn run(&self, jobs: usize, worker: Option<&Path>) -> Result<()> {
        self.generate()?;
        self.analyze(jobs, worker)
    }
}
