//! Accuracy, RRR metrics, plausibility and faithfulness over a split.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{contract, Result};
use crate::explain::{explain_values, ExplainConfig};
use crate::model::{argmax, forward_values, softmax_rows, Network};
use crate::replace::ReplaceKind;
use crate::seeding;
use crate::synthdata::{Dataset, Instance, Split};

/// Instances per evaluation batch.
const CHUNK: usize = 256;

/// Sparsity levels for faithfulness.
pub const SPARSITY: [f64; 3] = [0.1, 0.25, 0.5];

/// Perturbed copies per instance for RRR-Inv.
pub const INV_DRAWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Explainer for plausibility and faithfulness.
    pub explainer: ExplainConfig,
    /// Replace function for the RRR and faithfulness metrics.
    pub replace: ReplaceKind,
    pub explanations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { explainer: ExplainConfig::default(), replace: ReplaceKind::AllNegOnes, explanations: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id_acc: f64,
    pub ood_acc: f64,
    pub rrr_suff: f64,
    pub rrr_inv: f64,
    pub rrr_unc: f64,
    pub plausibility: Option<f64>,
    pub faith_suff: Option<f64>,
    pub faith_comp: Option<f64>,
    pub mean_confidence: f64,
    /// Test-ID instances without any important object, left out of the RRR metrics.
    pub rrr_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatapointRecord {
    pub id: usize,
    pub split: Split,
    pub correct: bool,
    pub confidence: f64,
    pub plausibility: Option<f64>,
    pub suff: Option<f64>,
    pub comp: Option<f64>,
    /// RRR values; `None` without an important object.
    pub rrr: Option<RrrPoint>,
}

/// RRR metric value with the number of instances excluded for lacking an
/// important object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rrr {
    pub value: f64,
    pub excluded: usize,
}

fn chunks<'a>(instances: &'a [&'a Instance]) -> impl Iterator<Item = Result<Batch>> + 'a {
    instances.chunks(CHUNK).map(Batch::from_instances)
}

fn probs_of<N: Network + ?Sized>(net: &N, objects: &Array2<f64>, questions: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
    Ok(softmax_rows(&forward_values(net, objects, questions, n)?.0))
}

fn nonempty(instances: &[&Instance]) -> Result<()> {
    if instances.is_empty() {
        Err(contract("metric over an empty split"))
    } else {
        Ok(())
    }
}

/// Output probabilities on masked copies: one row per request.
fn masked_probs<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    batch: &Batch,
    requests: &[(usize, Vec<bool>)],
    kind: ReplaceKind,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if requests.is_empty() {
        return Ok(Array2::zeros((0, net.n_classes())));
    }
    let (objects, questions) = batch.masked(requests, kind, rng)?;
    probs_of(net, &objects, &questions, batch.n_objects)
}

fn row_argmax(probs: &Array2<f64>, r: usize) -> usize {
    argmax(probs.row(r).as_slice().expect("contiguous"))
}

pub fn accuracy<N: Network + ?Sized>(net: &N, instances: &[&Instance]) -> Result<f64> {
    nonempty(instances)?;
    let mut correct = 0usize;
    for batch in chunks(instances) {
        let batch = batch?;
        let p = probs_of(net, &batch.objects, &batch.questions, batch.n_objects)?;
        correct += (0..batch.len()).filter(|&b| row_argmax(&p, b) == batch.labels[b]).count();
    }
    Ok(correct as f64 / instances.len() as f64)
}

fn eligible<'a>(instances: &[&'a Instance]) -> (Vec<&'a Instance>, usize) {
    let kept: Vec<&Instance> = instances.iter().copied().filter(|i| i.eligible()).collect();
    let excluded = instances.len() - kept.len();
    (kept, excluded)
}

/// RRR values of one instance: correctness on `x_e`, max probability on
/// `x_u`, and the fraction of `x_{e∪u}` draws agreeing with `x_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrrPoint {
    pub suff: bool,
    pub unc: f64,
    pub inv: f64,
}

/// Per-instance RRR values; `None` for instances without an important object.
///
/// Each `x_{e∪u}` adds a uniformly sized random subset of the unimportant
/// objects. An instance without unimportant objects agrees by convention.
pub fn rrr_points<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    batch: &Batch,
    kind: ReplaceKind,
    rng: &mut R,
) -> Result<Vec<Option<RrrPoint>>> {
    let mut requests = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        if !batch.supervision.eligible[b] {
            spans.push(None);
            continue;
        }
        let mask = batch.supervision.mask(b);
        let start = requests.len();
        requests.push((b, mask.to_vec()));
        requests.push((b, mask.iter().map(|m| !m).collect()));
        let unimportant: Vec<usize> = (0..mask.len()).filter(|&k| !mask[k]).collect();
        if !unimportant.is_empty() {
            for _ in 0..INV_DRAWS {
                let count = rng.random_range(1..=unimportant.len());
                let mut keep = mask.to_vec();
                for j in sample(rng, unimportant.len(), count) {
                    keep[unimportant[j]] = true;
                }
                requests.push((b, keep));
            }
        }
        spans.push(Some((start, requests.len())));
    }
    let p = masked_probs(net, batch, &requests, kind, rng)?;
    Ok(spans
        .iter()
        .enumerate()
        .map(|(b, span)| {
            span.map(|(start, end)| {
                let base = row_argmax(&p, start);
                let draws = start + 2..end;
                let inv = if draws.is_empty() {
                    1.0
                } else {
                    let agree = draws.clone().filter(|&r| row_argmax(&p, r) == base).count();
                    agree as f64 / draws.len() as f64
                };
                RrrPoint {
                    suff: base == batch.labels[b],
                    unc: p.row(start + 1).fold(0.0f64, |a, &v| a.max(v)),
                    inv,
                }
            })
        })
        .collect())
}

fn rrr_over<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instances: &[&Instance],
    kind: ReplaceKind,
    rng: &mut R,
    pick: impl Fn(&RrrPoint) -> f64,
) -> Result<Rrr> {
    let (kept, excluded) = eligible(instances);
    nonempty(&kept)?;
    let mut total = 0.0;
    for batch in chunks(&kept) {
        total += rrr_points(net, &batch?, kind, rng)?.iter().flatten().map(&pick).sum::<f64>();
    }
    Ok(Rrr { value: total / kept.len() as f64, excluded })
}

/// Accuracy on `x_e`.
pub fn rrr_suff<N: Network + ?Sized>(net: &N, instances: &[&Instance], kind: ReplaceKind, seed: u64) -> Result<Rrr> {
    rrr_over(net, instances, kind, &mut seeding::stream(seed, "rrr"), |p| f64::from(u8::from(p.suff)))
}

/// Mean max-class probability on `x_u`; lower is better.
pub fn rrr_unc<N: Network + ?Sized>(net: &N, instances: &[&Instance], kind: ReplaceKind, seed: u64) -> Result<Rrr> {
    rrr_over(net, instances, kind, &mut seeding::stream(seed, "rrr"), |p| p.unc)
}

/// Agreement between the prediction on `x_e` and on three `x_{e∪u}`.
pub fn rrr_inv<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instances: &[&Instance],
    kind: ReplaceKind,
    rng: &mut R,
) -> Result<Rrr> {
    rrr_over(net, instances, kind, rng, |p| p.inv)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman correlation with average ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Indices of the `⌈p·n⌉` highest scores, ties to the lower index.
pub fn top_features(scores: &[f64], p: f64) -> Vec<usize> {
    let k = ((p * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Per-instance `(suff, comp)`, each averaged over [`SPARSITY`].
pub fn faithfulness_scores<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    batch: &Batch,
    scores: &[Vec<f64>],
    kind: ReplaceKind,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let n = batch.n_objects;
    let base = probs_of(net, &batch.objects, &batch.questions, n)?;
    let mut requests = Vec::with_capacity(batch.len() * 2 * SPARSITY.len());
    for (b, s) in scores.iter().enumerate() {
        for p in SPARSITY {
            let top = top_features(s, p);
            let mut keep = vec![false; n];
            for &k in &top {
                keep[k] = true;
            }
            let remove: Vec<bool> = keep.iter().map(|k| !k).collect();
            requests.push((b, keep));
            requests.push((b, remove));
        }
    }
    let probs = masked_probs(net, batch, &requests, kind, rng)?;
    let per = 2 * SPARSITY.len();
    Ok((0..batch.len())
        .map(|b| {
            let yhat = row_argmax(&base, b);
            let conf = base[[b, yhat]];
            let (mut suff, mut comp) = (0.0, 0.0);
            for l in 0..SPARSITY.len() {
                suff += conf - probs[[b * per + 2 * l, yhat]];
                comp += conf - probs[[b * per + 2 * l + 1, yhat]];
            }
            let m = SPARSITY.len() as f64;
            (suff / m, comp / m)
        })
        .collect())
}

/// Explanation scores for every instance.
pub fn explanation_scores<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    batch: &Batch,
    cfg: &ExplainConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    Ok(explain_values(net, batch, cfg, rng)?.into_iter().map(|e| e.scores).collect())
}

/// Mean Spearman correlation between model and human FI.
pub fn plausibility<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instances: &[&Instance],
    cfg: &ExplainConfig,
    rng: &mut R,
) -> Result<f64> {
    nonempty(instances)?;
    let mut total = 0.0;
    for batch in chunks(instances) {
        let batch = batch?;
        for (b, s) in explanation_scores(net, &batch, cfg, rng)?.iter().enumerate() {
            total += spearman(s, batch.supervision.human_fi.row(b).as_slice().expect("contiguous"));
        }
    }
    Ok(total / instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaithKind {
    Suff,
    Comp,
}

/// Mean sufficiency or comprehensiveness of the configured explainer.
pub fn faithfulness<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instances: &[&Instance],
    cfg: &ExplainConfig,
    kind: FaithKind,
    rng: &mut R,
) -> Result<f64> {
    nonempty(instances)?;
    let mut total = 0.0;
    for batch in chunks(instances) {
        let batch = batch?;
        let scores = explanation_scores(net, &batch, cfg, rng)?;
        for (s, c) in faithfulness_scores(net, &batch, &scores, ReplaceKind::AllNegOnes, rng)? {
            total += match kind {
                FaithKind::Suff => s,
                FaithKind::Comp => c,
            };
        }
    }
    Ok(total / instances.len() as f64)
}

/// Per-datapoint records for one split.
pub fn datapoint_records<N: Network + ?Sized>(
    net: &N,
    instances: &[&Instance],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<DatapointRecord>> {
    let mut rng = seeding::stream(seed, "datapoints");
    let mut rrr_rng = seeding::stream(seed, "rrr");
    let mut out = Vec::with_capacity(instances.len());
    for batch in chunks(instances) {
        let batch = batch?;
        let base = probs_of(net, &batch.objects, &batch.questions, batch.n_objects)?;
        let rrr = rrr_points(net, &batch, cfg.replace, &mut rrr_rng)?;
        let expl = if cfg.explanations {
            let scores = explanation_scores(net, &batch, &cfg.explainer, &mut rng)?;
            let faith = faithfulness_scores(net, &batch, &scores, cfg.replace, &mut rng)?;
            let plaus: Vec<f64> = scores
                .iter()
                .enumerate()
                .map(|(b, s)| spearman(s, batch.supervision.human_fi.row(b).as_slice().expect("contiguous")))
                .collect();
            Some((plaus, faith))
        } else {
            None
        };
        for b in 0..batch.len() {
            let yhat = row_argmax(&base, b);
            let inst = instances[out.len()];
            out.push(DatapointRecord {
                id: inst.id,
                split: inst.split,
                correct: yhat == batch.labels[b],
                confidence: base[[b, yhat]],
                plausibility: expl.as_ref().map(|(p, _)| p[b]),
                suff: expl.as_ref().map(|(_, f)| f[b].0),
                comp: expl.as_ref().map(|(_, f)| f[b].1),
                rrr: rrr[b],
            });
        }
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Full report with per-datapoint records for Test-ID and Test-OOD.
///
/// Report RRR and explanation metrics are computed on Test-ID.
pub fn evaluate<N: Network + ?Sized>(
    net: &N,
    dataset: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(MetricsReport, Vec<DatapointRecord>)> {
    let id = dataset.split(Split::TestId);
    let ood = dataset.split(Split::TestOod);
    nonempty(&id)?;
    nonempty(&ood)?;
    let mut records = datapoint_records(net, &id, cfg, seed)?;
    let n_id = records.len();
    records.extend(datapoint_records(net, &ood, cfg, seed)?);
    let acc = |rs: &[DatapointRecord]| mean(rs.iter().map(|r| f64::from(u8::from(r.correct))));
    let id_records = &records[..n_id];
    let points: Vec<RrrPoint> = id_records.iter().filter_map(|r| r.rrr).collect();
    if points.is_empty() {
        return Err(contract("no Test-ID instance has an important object"));
    }
    let report = MetricsReport {
        id_acc: acc(id_records),
        ood_acc: acc(&records[n_id..]),
        rrr_suff: mean(points.iter().map(|p| f64::from(u8::from(p.suff)))),
        rrr_inv: mean(points.iter().map(|p| p.inv)),
        rrr_unc: mean(points.iter().map(|p| p.unc)),
        plausibility: cfg.explanations.then(|| mean(id_records.iter().filter_map(|r| r.plausibility))),
        faith_suff: cfg.explanations.then(|| mean(id_records.iter().filter_map(|r| r.suff))),
        faith_comp: cfg.explanations.then(|| mean(id_records.iter().filter_map(|r| r.comp))),
        mean_confidence: mean(id_records.iter().map(|r| r.confidence)),
        rrr_excluded: n_id - points.len(),
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn top_features_round_up_and_prefer_low_index() {
        assert_eq!(top_features(&[0.0; 9], 0.1), vec![0]);
        assert_eq!(top_features(&[1.0, 3.0, 3.0, 0.0], 0.5), vec![1, 2]);
        assert_eq!(top_features(&[1.0, 3.0, 3.0, 0.0], 0.25), vec![1]);
        assert_eq!(top_features(&[5.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0], 0.25).len(), 3);
    }
}
