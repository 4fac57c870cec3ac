//! Bootstrap tests, logistic trend fits, faithfulness categories, and the
//! metric-to-OOD cross-validated correlation study.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::linalg::ols;
use crate::metrics::pearson;
use crate::seeding;

pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    /// Fraction of resamples with a statistic `≤ 0`; the one-sided p-value
    /// for "statistic > 0".
    pub p_value: f64,
    pub resamples: usize,
}

/// `q`-quantile of sorted data with linear interpolation.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_units(units: &[Vec<f64>]) -> Result<()> {
    if units.is_empty() || units.iter().any(|u| u.is_empty()) {
        return Err(contract("bootstrap needs at least one datapoint per seed"));
    }
    if units.len() < 2 && units[0].len() < 2 {
        return Err(contract("bootstrap needs at least two seeds or two datapoints"));
    }
    Ok(())
}

/// Seed indices, then datapoint indices per chosen seed.
type Draw = Vec<(usize, Vec<usize>)>;

fn draw<R: Rng>(units: &[Vec<f64>], rng: &mut R) -> Draw {
    (0..units.len())
        .map(|_| {
            let s = rng.random_range(0..units.len());
            let n = units[s].len();
            (s, (0..n).map(|_| rng.random_range(0..n)).collect())
        })
        .collect()
}

fn apply(units: &[Vec<f64>], d: &Draw) -> Vec<Vec<f64>> {
    d.iter().map(|(s, idx)| idx.iter().map(|&i| units[*s][i]).collect()).collect()
}

fn summarize(estimate: f64, mut stats: Vec<f64>) -> BootstrapResult {
    let resamples = stats.len();
    let p_value = stats.iter().filter(|&&s| s <= 0.0).count() as f64 / resamples as f64;
    stats.sort_by(f64::total_cmp);
    BootstrapResult {
        estimate,
        lo: quantile(&stats, 0.025).min(estimate),
        hi: quantile(&stats, 0.975).max(estimate),
        p_value,
        resamples,
    }
}

/// Two-level bootstrap: seeds with replacement, then datapoints with
/// replacement inside each chosen seed. `units[s]` holds seed `s`'s values.
pub fn bootstrap<F>(units: &[Vec<f64>], stat: F, resamples: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    check_units(units)?;
    let mut rng = seeding::stream(seed, "bootstrap");
    let stats = (0..resamples).map(|_| stat(&apply(units, &draw(units, &mut rng)))).collect();
    Ok(summarize(stat(units), stats))
}

/// Grand mean over seeds of per-seed means.
pub fn mean_of_means(units: &[Vec<f64>]) -> f64 {
    units.iter().map(|u| u.iter().sum::<f64>() / u.len() as f64).sum::<f64>() / units.len() as f64
}

/// Bootstrap of `mean(a) − mean(b)`. Seeds are resampled independently per
/// method; datapoints are resampled with shared indices when both methods
/// were scored on the same datapoints.
pub fn bootstrap_difference(a: &[Vec<f64>], b: &[Vec<f64>], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    check_units(a)?;
    check_units(b)?;
    let n = a[0].len();
    let paired = a.iter().chain(b).all(|u| u.len() == n);
    let mut rng = seeding::stream(seed, "bootstrap-difference");
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let diff = if paired {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let pick = |units: &[Vec<f64>], rng: &mut crate::seeding::Rng| -> f64 {
                let seeds: Vec<usize> = (0..units.len()).map(|_| rng.random_range(0..units.len())).collect();
                seeds.iter().map(|&s| idx.iter().map(|&i| units[s][i]).sum::<f64>() / n as f64).sum::<f64>()
                    / seeds.len() as f64
            };
            pick(a, &mut rng) - pick(b, &mut rng)
        } else {
            mean_of_means(&apply(a, &draw(a, &mut rng))) - mean_of_means(&apply(b, &draw(b, &mut rng)))
        };
        stats.push(diff);
    }
    Ok(summarize(mean_of_means(a) - mean_of_means(b), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    pub iterations: usize,
    pub n: usize,
}

/// Ridge penalty on the slope of logistic fits.
pub const LOGISTIC_RIDGE: f64 = 1e-4;

/// Penalized maximum-likelihood logistic regression of `y` on `x` by Newton
/// iterations, stopping once the gradient norm drops below 1e-8.
pub fn fit_logistic(x: &[f64], y: &[bool]) -> Result<LogisticFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(contract("logistic fit needs matching inputs with at least two points"));
    }
    let (mut b0, mut b1) = (0.0f64, 0.0f64);
    let mut iterations = 0;
    let mut h = [[0.0; 2]; 2];
    for it in 1..=200 {
        iterations = it;
        let (mut g0, mut g1) = (0.0, -LOGISTIC_RIDGE * b1);
        h = [[0.0, 0.0], [0.0, LOGISTIC_RIDGE]];
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(b0 + b1 * xi)).exp());
            let r = f64::from(u8::from(yi)) - p;
            g0 += r;
            g1 += r * xi;
            let w = p * (1.0 - p);
            h[0][0] += w;
            h[0][1] += w * xi;
            h[1][1] += w * xi * xi;
        }
        h[1][0] = h[0][1];
        if g0.hypot(g1) < 1e-8 {
            break;
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if !(det.abs() > 0.0) {
            return Err(contract("singular logistic Hessian"));
        }
        b0 += (h[1][1] * g0 - h[0][1] * g1) / det;
        b1 += (h[0][0] * g1 - h[1][0] * g0) / det;
    }
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    Ok(LogisticFit {
        intercept: b0,
        slope: b1,
        intercept_se: (h[1][1] / det).sqrt(),
        slope_se: (h[0][0] / det).sqrt(),
        iterations,
        n: x.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaithCategory {
    Worst,
    Middle,
    Best,
}

impl FaithCategory {
    pub const ALL: [FaithCategory; 3] = [FaithCategory::Worst, FaithCategory::Middle, FaithCategory::Best];

    pub fn name(self) -> &'static str {
        match self {
            FaithCategory::Worst => "worst",
            FaithCategory::Middle => "middle",
            FaithCategory::Best => "best",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaithKindCat {
    Suff,
    Comp,
}

/// Category boundaries. Suff is better when small, Comp when large.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaithThresholds {
    pub suff_best: f64,
    pub suff_middle: f64,
    pub comp_middle: f64,
    pub comp_best: f64,
    /// `suff ≤ suff_best` counts as Best when set, `suff < suff_best` otherwise.
    pub suff_best_inclusive: bool,
}

impl Default for FaithThresholds {
    fn default() -> Self {
        Self { suff_best: 0.01, suff_middle: 0.25, comp_middle: 0.20, comp_best: 0.40, suff_best_inclusive: true }
    }
}

impl FaithThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.suff_best > self.suff_middle || self.comp_middle > self.comp_best {
            return Err(crate::error::config("faithfulness thresholds must be ordered"));
        }
        Ok(())
    }

    pub fn categorize(&self, kind: FaithKindCat, value: f64) -> FaithCategory {
        match kind {
            FaithKindCat::Suff => {
                let best = if self.suff_best_inclusive { value <= self.suff_best } else { value < self.suff_best };
                if best {
                    FaithCategory::Best
                } else if value < self.suff_middle {
                    FaithCategory::Middle
                } else {
                    FaithCategory::Worst
                }
            }
            FaithKindCat::Comp => {
                if value < self.comp_middle {
                    FaithCategory::Worst
                } else if value < self.comp_best {
                    FaithCategory::Middle
                } else {
                    FaithCategory::Best
                }
            }
        }
    }
}

/// Labels plus the proportion of each category.
pub fn categorize_faithfulness(
    values: &[f64],
    kind: FaithKindCat,
    thresholds: &FaithThresholds,
) -> (Vec<FaithCategory>, BTreeMap<FaithCategory, f64>) {
    let labels: Vec<FaithCategory> = values.iter().map(|&v| thresholds.categorize(kind, v)).collect();
    let mut props: BTreeMap<FaithCategory, f64> = FaithCategory::ALL.iter().map(|&c| (c, 0.0)).collect();
    for l in &labels {
        *props.get_mut(l).expect("all categories present") += 1.0 / labels.len().max(1) as f64;
    }
    (labels, props)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrend {
    pub category: FaithCategory,
    pub n: usize,
    /// `None` when the group has fewer than 20 points or a single outcome.
    pub fit: Option<LogisticFit>,
}

/// Logistic regression of correctness on plausibility per faithfulness category.
pub fn fit_logistic_trend(points: &[(f64, bool, FaithCategory)]) -> Vec<GroupTrend> {
    FaithCategory::ALL
        .iter()
        .map(|&category| {
            let (x, y): (Vec<f64>, Vec<bool>) =
                points.iter().filter(|p| p.2 == category).map(|p| (p.0, p.1)).unzip();
            let usable = x.len() >= 20 && y.iter().any(|&v| v) && y.iter().any(|&v| !v);
            GroupTrend { category, n: x.len(), fit: usable.then(|| fit_logistic(&x, &y).ok()).flatten() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRow {
    /// Bucket index: 0 lowest.
    pub bucket: usize,
    pub count: usize,
    /// Distribution over [`FaithCategory::ALL`]; zeros for an empty bucket.
    pub dist: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub edges: Vec<f64>,
    pub rows: Vec<ConditionalRow>,
}

/// Tercile edges of `values`.
pub fn tercile_edges(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    vec![quantile(&sorted, 1.0 / 3.0), quantile(&sorted, 2.0 / 3.0)]
}

/// Distribution of faithfulness categories conditional on plausibility buckets.
pub fn conditional_table(plausibility: &[f64], categories: &[FaithCategory], edges: Option<Vec<f64>>) -> Result<ConditionalTable> {
    if plausibility.len() != categories.len() || plausibility.is_empty() {
        return Err(contract("conditional table needs matching nonempty inputs"));
    }
    let edges = edges.unwrap_or_else(|| tercile_edges(plausibility));
    if edges.windows(2).any(|w| w[0] > w[1]) {
        return Err(crate::error::config("bucket edges must be ordered"));
    }
    let mut counts = vec![[0usize; 3]; edges.len() + 1];
    for (&p, &c) in plausibility.iter().zip(categories) {
        let bucket = edges.iter().take_while(|&&e| p >= e).count();
        counts[bucket][c as usize] += 1;
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(bucket, c)| {
            let count: usize = c.iter().sum();
            let mut dist = [0.0; 3];
            if count > 0 {
                for k in 0..3 {
                    dist[k] = c[k] as f64 / count as f64;
                }
            }
            ConditionalRow { bucket, count, dist }
        })
        .collect();
    Ok(ConditionalTable { edges, rows })
}

/// Model-level metrics, one row per trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub ood: Vec<f64>,
}

impl CorrelationStudy {
    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| contract(format!("study has no column {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub name: String,
    pub columns: Vec<String>,
}

impl PredictorSet {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect() }
    }
}

/// `{ID-acc; RRR-only; ID+conf; ID+expl; ID+RRR; all}` over the report's column names.
pub fn default_predictor_sets() -> Vec<PredictorSet> {
    vec![
        PredictorSet::new("id_acc", &["id_acc"]),
        PredictorSet::new("rrr", &["rrr_suff", "rrr_inv", "rrr_unc"]),
        PredictorSet::new("id_acc+confidence", &["id_acc", "mean_confidence"]),
        PredictorSet::new("id_acc+explanation", &["id_acc", "plausibility", "faith_suff", "faith_comp"]),
        PredictorSet::new("id_acc+rrr", &["id_acc", "rrr_suff", "rrr_inv", "rrr_unc"]),
        PredictorSet::new(
            "all",
            &["id_acc", "rrr_suff", "rrr_inv", "rrr_unc", "mean_confidence", "plausibility", "faith_suff", "faith_comp"],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub name: String,
    pub train_corr: f64,
    pub test_corr: f64,
    pub lo: f64,
    pub hi: f64,
    /// Columns dropped as collinear in at least one resample.
    pub dropped: Vec<String>,
}

fn design(study: &CorrelationStudy, cols: &[usize], models: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((models.len(), cols.len() + 1), |(r, c)| {
        if c == 0 {
            1.0
        } else {
            study.rows[models[r]][cols[c - 1]]
        }
    })
}

fn predict(x: &Array2<f64>, coef: &[f64]) -> Vec<f64> {
    x.rows().into_iter().map(|row| row.iter().zip(coef).map(|(a, b)| a * b).sum()).collect()
}

/// Repeated 90/10 model splits: OLS of OOD accuracy on each predictor set
/// over the training models, Pearson correlation of predictions with the
/// held-out models' OOD accuracy.
pub fn metric_ood_cv(
    study: &CorrelationStudy,
    sets: &[PredictorSet],
    resamples: usize,
    seed: u64,
) -> Result<Vec<CvResult>> {
    let m = study.rows.len();
    if m < 20 || study.ood.len() != m {
        return Err(contract("metric_ood_cv needs at least 20 models with OOD accuracy"));
    }
    if resamples == 0 {
        return Err(contract("metric_ood_cv needs at least one resample"));
    }
    let n_test = ((m as f64 * 0.1).round() as usize).max(3);
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let cols = set.columns.iter().map(|c| study.column(c)).collect::<Result<Vec<_>>>()?;
        let mut rng = seeding::stream(seed, "metric-ood-cv");
        let mut order: Vec<usize> = (0..m).collect();
        let (mut train_sum, mut tests) = (0.0, Vec::with_capacity(resamples));
        let mut dropped = std::collections::BTreeSet::new();
        for _ in 0..resamples {
            order.shuffle(&mut rng);
            let (test, train) = order.split_at(n_test);
            let xt = design(study, &cols, train);
            let yt: Vec<f64> = train.iter().map(|&i| study.ood[i]).collect();
            let (coef, kept) = ols(&xt, &yt);
            for c in 1..=cols.len() {
                if !kept.contains(&c) {
                    dropped.insert(set.columns[c - 1].clone());
                }
            }
            train_sum += pearson(&predict(&xt, &coef), &yt);
            let xs = design(study, &cols, test);
            let ys: Vec<f64> = test.iter().map(|&i| study.ood[i]).collect();
            tests.push(pearson(&predict(&xs, &coef), &ys));
        }
        if !dropped.is_empty() {
            log::warn!("predictor set {}: dropped collinear columns {:?}", set.name, dropped);
        }
        let test_corr = tests.iter().sum::<f64>() / resamples as f64;
        tests.sort_by(f64::total_cmp);
        out.push(CvResult {
            name: set.name.clone(),
            train_corr: train_sum / resamples as f64,
            test_corr,
            lo: quantile(&tests, 0.025),
            hi: quantile(&tests, 0.975),
            dropped: dropped.into_iter().collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0], 0.5), 1.5);
        assert_eq!(quantile(&[5.0], 0.9), 5.0);
    }

    #[test]
    fn categories_follow_the_table() {
        let t = FaithThresholds::default();
        assert_eq!(t.categorize(FaithKindCat::Suff, 0.005), FaithCategory::Best);
        assert_eq!(t.categorize(FaithKindCat::Suff, 0.01), FaithCategory::Best);
        let strict = FaithThresholds { suff_best_inclusive: false, ..t };
        assert_eq!(strict.categorize(FaithKindCat::Suff, 0.01), FaithCategory::Middle);
        assert_eq!(t.categorize(FaithKindCat::Suff, 0.3), FaithCategory::Worst);
        assert_eq!(t.categorize(FaithKindCat::Comp, 0.45), FaithCategory::Best);
        assert_eq!(t.categorize(FaithKindCat::Comp, 0.2), FaithCategory::Middle);
        assert_eq!(t.categorize(FaithKindCat::Comp, 0.1), FaithCategory::Worst);
    }
}
