//! Model feature-importance explanations over objects.
//!
//! Every method explains one logit per instance (the predicted or the
//! ground-truth class) and returns a `B × n` score node. With
//! `differentiable` set, scores stay connected to the parameters so they can
//! be supervised; the reference outputs `f(x)` and `f(x_∅)` of the
//! perturbation methods are always stop-gradient. Otherwise scores are
//! constants.

use std::rc::Rc;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use fisup_autodiff::{Graph, Tensor, Var};

use crate::batch::Batch;
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{argmax, bind_params, forward_values, NetOutput, Network};
use crate::replace::ReplaceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiMethod {
    VanillaGrad,
    ExpectedGrad,
    Attention,
    Loo,
    Koi,
    Shap,
    AvgEffect,
}

impl FiMethod {
    pub const ALL: [FiMethod; 7] = [
        FiMethod::VanillaGrad,
        FiMethod::ExpectedGrad,
        FiMethod::Attention,
        FiMethod::Loo,
        FiMethod::Koi,
        FiMethod::Shap,
        FiMethod::AvgEffect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FiMethod::VanillaGrad => "vanilla_grad",
            FiMethod::ExpectedGrad => "expected_grad",
            FiMethod::Attention => "attention",
            FiMethod::Loo => "loo",
            FiMethod::Koi => "koi",
            FiMethod::Shap => "shap",
            FiMethod::AvgEffect => "avg_effect",
        }
    }

    fn needs_input_gradient(self) -> bool {
        self == FiMethod::VanillaGrad
    }
}

/// Which logit is explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    #[default]
    Pred,
    Gt,
}

/// How AvgEffect draws the coalition each feature is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coalitions {
    /// Size uniform in `0..k`, then a uniform subset: the Shapley weights.
    #[default]
    Shapley,
    /// Each other feature present with probability 1/2.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub method: FiMethod,
    /// Model evaluations per explanation; see [`Explainer::run`].
    pub budget: usize,
    pub class_mode: ClassMode,
    pub replace: ReplaceKind,
    pub coalitions: Coalitions,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: FiMethod::Koi,
            budget: 9,
            class_mode: ClassMode::Pred,
            replace: ReplaceKind::AllNegOnes,
            coalitions: Coalitions::Shapley,
        }
    }
}

impl ExplainConfig {
    pub fn new(method: FiMethod, budget: usize, class_mode: ClassMode) -> Self {
        Self { method, budget, class_mode, ..Self::default() }
    }

    /// Short label such as `koi-pred`.
    pub fn tag(&self) -> String {
        let class = match self.class_mode {
            ClassMode::Pred => "pred",
            ClassMode::Gt => "gt",
        };
        format!("{}-{}", self.method.name(), class)
    }
}

/// Batched explanation.
#[derive(Debug, Clone)]
pub struct Explanation<'g> {
    /// `B × n`; zero outside `explained`.
    pub scores: Var<'g>,
    /// `B·n` flags of the scored features.
    pub explained: Vec<bool>,
    pub targets: Vec<usize>,
    /// Model evaluations per instance.
    pub budget_used: usize,
}

/// Per-instance explanation with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationVector {
    pub scores: Vec<f64>,
    pub method: FiMethod,
    pub class_mode: ClassMode,
    pub target_class: usize,
    pub budget_used: usize,
    pub explained_mask: Vec<bool>,
}

impl Explanation<'_> {
    pub fn vectors(&self, cfg: &ExplainConfig) -> Vec<ExplanationVector> {
        let scores = self.scores.value();
        let n = scores.ncols();
        (0..scores.nrows())
            .map(|b| ExplanationVector {
                scores: scores.row(b).to_vec(),
                method: cfg.method,
                class_mode: cfg.class_mode,
                target_class: self.targets[b],
                budget_used: self.budget_used,
                explained_mask: self.explained[b * n..(b + 1) * n].to_vec(),
            })
            .collect()
    }
}

/// The unperturbed forward pass, shared with the training objective.
pub struct BaseForward<'g> {
    pub objects: Var<'g>,
    pub questions: Var<'g>,
    pub output: NetOutput<'g>,
}

impl<'g> BaseForward<'g> {
    /// `track_input` makes the objects a leaf so input gradients exist.
    pub fn new<N: Network + ?Sized>(
        net: &N,
        params: &[Var<'g>],
        g: &'g Graph,
        batch: &Batch,
        track_input: bool,
    ) -> Result<Self> {
        let objects = if track_input {
            g.leaf(batch.objects.clone())
        } else {
            g.constant(batch.objects.clone())
        };
        let questions = g.constant(batch.questions.clone());
        let output = net.forward(params, objects, questions, batch.n_objects)?;
        Ok(Self { objects, questions, output })
    }

    pub fn tracks_input(&self) -> bool {
        self.objects.requires_grad()
    }
}

/// Rows of the perturbed inputs evaluated per chunk in value mode.
const VALUE_CHUNK: usize = 4096;

pub struct Explainer<'a, 'g, N: ?Sized> {
    pub net: &'a N,
    pub params: &'a [Var<'g>],
    pub batch: &'a Batch,
    pub base: &'a BaseForward<'g>,
    pub differentiable: bool,
}

impl<'a, 'g, N: Network + ?Sized> Explainer<'a, 'g, N> {
    fn graph(&self) -> &'g Graph {
        self.base.objects.graph()
    }

    fn n(&self) -> usize {
        self.batch.n_objects
    }

    fn finish(&self, scores: Var<'g>) -> Var<'g> {
        if self.differentiable {
            scores
        } else {
            scores.stop_gradient()
        }
    }

    /// Explained logit per instance.
    pub fn targets(&self, mode: ClassMode) -> Vec<usize> {
        match mode {
            ClassMode::Gt => self.batch.labels.clone(),
            ClassMode::Pred => {
                let logits = self.base.output.logits.value();
                logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("row"))).collect()
            }
        }
    }

    /// Dispatches on `cfg.method`.
    ///
    /// Budget use: VanillaGrad and Attention ignore it; ExpectedGrad draws
    /// `budget` samples; LOO, KOI and SHAP explain `k = min(budget, n)`
    /// features, SHAP with `budget` coalition masks (exhaustive enumeration
    /// once `budget ≥ 2^k − 2`); AvgEffect explains `k` features with
    /// `max(1, budget / k)` paired samples each.
    pub fn run<R: Rng + ?Sized>(&self, cfg: &ExplainConfig, rng: &mut R) -> Result<Explanation<'g>> {
        let targets = self.targets(cfg.class_mode);
        match cfg.method {
            FiMethod::VanillaGrad => self.vanilla_grad(targets),
            FiMethod::ExpectedGrad => self.expected_grad(targets, cfg.budget, cfg.replace, rng),
            FiMethod::Attention => self.attention(targets),
            method => self.perturb(method, targets, cfg.budget, cfg.replace, cfg.coalitions, rng),
        }
    }

    /// `score_k = Σ_j ∂ logit / ∂ x_{k,j}`.
    pub fn vanilla_grad(&self, targets: Vec<usize>) -> Result<Explanation<'g>> {
        if !self.base.tracks_input() {
            return Err(contract("vanilla gradient needs a base forward that tracks the input"));
        }
        let g = self.graph();
        let b = self.batch.len();
        let selected = self.base.output.logits.select_index(targets.clone().into())?;
        let grad = g.gradient(selected.sum(), &[self.base.objects], self.differentiable)?[0];
        let scores = grad.sum_cols().reshape(b, self.n())?;
        Ok(Explanation {
            scores: self.finish(scores),
            explained: vec![true; b * self.n()],
            targets,
            budget_used: 1,
        })
    }

    /// Monte Carlo `E_{α, x′}[(x − x′) ∘ ∇f(x′ + α(x − x′))]`, summed per object.
    pub fn expected_grad<R: Rng + ?Sized>(
        &self,
        targets: Vec<usize>,
        samples: usize,
        replace: ReplaceKind,
        rng: &mut R,
    ) -> Result<Explanation<'g>> {
        if samples == 0 {
            return Err(contract("expected gradients needs at least one sample"));
        }
        let g = self.graph();
        let (b, n) = (self.batch.len(), self.n());
        let d = self.batch.objects.ncols();
        let idx: Rc<[usize]> = targets.clone().into();
        let mut total: Option<Var<'g>> = None;
        let mut value_total = Array2::<f64>::zeros((b, n));
        for _ in 0..samples {
            let none: Vec<(usize, Vec<bool>)> = (0..b).map(|i| (i, vec![false; n])).collect();
            let (baseline, _) = self.batch.masked(&none, replace, rng)?;
            let delta = &self.batch.objects - &baseline;
            let mut z = baseline.clone();
            for i in 0..b {
                let alpha: f64 = rng.random();
                for r in i * n..(i + 1) * n {
                    for c in 0..d {
                        z[[r, c]] += alpha * delta[[r, c]];
                    }
                }
            }
            if self.differentiable {
                let zv = g.leaf(z);
                let out = self.net.forward(self.params, zv, self.base.questions, n)?;
                let sel = out.logits.select_index(Rc::clone(&idx))?.sum();
                let grad = g.gradient(sel, &[zv], true)?[0];
                let contrib = grad.mul(g.constant(delta))?.sum_cols().reshape(b, n)?;
                total = Some(match total {
                    None => contrib,
                    Some(t) => t.add(contrib)?,
                });
            } else {
                let local = Graph::new();
                let params = bind_params(&local, self.net, false);
                let zv = local.leaf(z);
                let q = local.constant(self.batch.questions.clone());
                let out = self.net.forward(&params, zv, q, n)?;
                let sel = out.logits.select_index(Rc::clone(&idx))?.sum();
                let grad = local.gradient(sel, &[zv], false)?[0].value();
                let contrib = (&*grad * &delta).sum_axis(ndarray::Axis(1));
                for (k, v) in contrib.iter().enumerate() {
                    value_total[[k / n, k % n]] += v;
                }
            }
        }
        let scores = match total {
            Some(t) => t.scale(1.0 / samples as f64),
            None => g.constant(value_total / samples as f64),
        };
        Ok(Explanation {
            scores: self.finish(scores),
            explained: vec![true; b * n],
            targets,
            budget_used: samples,
        })
    }

    /// Attention weights of the base forward.
    pub fn attention(&self, targets: Vec<usize>) -> Result<Explanation<'g>> {
        let att = self
            .base
            .output
            .attention
            .ok_or_else(|| contract("model exposes no attention vector"))?;
        Ok(Explanation {
            scores: self.finish(att),
            explained: vec![true; self.batch.len() * self.n()],
            targets,
            budget_used: 1,
        })
    }

    /// Target logits of perturbed copies, `R × 1`.
    fn evaluate<R: Rng + ?Sized>(
        &self,
        requests: &[(usize, Vec<bool>)],
        targets: &[usize],
        replace: ReplaceKind,
        rng: &mut R,
    ) -> Result<Var<'g>> {
        let g = self.graph();
        let n = self.n();
        let picked: Vec<usize> = requests.iter().map(|(b, _)| targets[*b]).collect();
        if requests.is_empty() {
            return Ok(g.zeros(0, 1));
        }
        if self.differentiable {
            let (objects, questions) = self.batch.masked(requests, replace, rng)?;
            let out = self.net.forward(self.params, g.constant(objects), g.constant(questions), n)?;
            return Ok(out.logits.select_index(picked.into())?);
        }
        let mut values = Vec::with_capacity(requests.len());
        for (chunk, picks) in requests.chunks(VALUE_CHUNK).zip(picked.chunks(VALUE_CHUNK)) {
            let (objects, questions) = self.batch.masked(chunk, replace, rng)?;
            let (logits, _) = forward_values(self.net, &objects, &questions, n)?;
            values.extend(picks.iter().enumerate().map(|(r, &c)| logits[[r, c]]));
        }
        Ok(g.constant(Tensor::from_shape_vec((values.len(), 1), values).expect("column")))
    }

    /// Stop-gradient target logits of the base forward, `B × 1`.
    fn reference(&self, targets: &[usize]) -> Result<Var<'g>> {
        Ok(self.base.output.logits.select_index(targets.to_vec().into())?.stop_gradient())
    }

    fn explained_sets<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let n = self.n();
        (0..self.batch.len())
            .map(|_| {
                if k >= n {
                    (0..n).collect()
                } else {
                    let mut v = index::sample(rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
            })
            .collect()
    }

    /// LOO, KOI, SHAP or AvgEffect.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        method: FiMethod,
        targets: Vec<usize>,
        budget: usize,
        replace: ReplaceKind,
        coalitions: Coalitions,
        rng: &mut R,
    ) -> Result<Explanation<'g>> {
        let (b, n) = (self.batch.len(), self.n());
        if budget == 0 {
            return Err(contract("perturbation explanations need a budget of at least 1"));
        }
        let k = budget.min(n);
        let sets = self.explained_sets(k, rng);
        let mut explained = vec![false; b * n];
        for (i, set) in sets.iter().enumerate() {
            for &j in set {
                explained[i * n + j] = true;
            }
        }
        let positions: Rc<[usize]> = sets
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&j| i * n + j))
            .collect();
        let owner: Rc<[usize]> = sets
            .iter()
            .enumerate()
            .flat_map(|(i, set)| std::iter::repeat_n(i, set.len()))
            .collect();
        let (flat, budget_used) = match method {
            FiMethod::Loo => {
                let requests: Vec<(usize, Vec<bool>)> = positions
                    .iter()
                    .map(|&p| {
                        let mut keep = vec![true; n];
                        keep[p % n] = false;
                        (p / n, keep)
                    })
                    .collect();
                let v = self.evaluate(&requests, &targets, replace, rng)?;
                let reference = self.reference(&targets)?.gather_rows(Rc::clone(&owner))?;
                (reference.sub(v)?, k)
            }
            FiMethod::Koi => {
                let requests: Vec<(usize, Vec<bool>)> = positions
                    .iter()
                    .map(|&p| {
                        let mut keep = vec![false; n];
                        keep[p % n] = true;
                        (p / n, keep)
                    })
                    .collect();
                let v = self.evaluate(&requests, &targets, replace, rng)?;
                let null = self.null_outputs(&targets, replace, rng)?;
                (v.sub(null.gather_rows(Rc::clone(&owner))?)?, k + 1)
            }
            FiMethod::Shap => self.shap(&sets, &targets, budget, replace, rng)?,
            FiMethod::AvgEffect => {
                let per_feature = (budget / k).max(1);
                self.avg_effect(&sets, &targets, per_feature, replace, coalitions, rng)?
            }
            other => return Err(contract(format!("{} is not a perturbation method", other.name()))),
        };
        let scores = flat.scatter_rows(positions, b * n)?.reshape(b, n)?;
        Ok(Explanation {
            scores: self.finish(scores),
            explained,
            targets,
            budget_used,
        })
    }

    /// `f(x_∅)` per instance, stop-gradient.
    fn null_outputs<R: Rng + ?Sized>(
        &self,
        targets: &[usize],
        replace: ReplaceKind,
        rng: &mut R,
    ) -> Result<Var<'g>> {
        let n = self.n();
        let requests: Vec<(usize, Vec<bool>)> = (0..self.batch.len()).map(|i| (i, vec![false; n])).collect();
        Ok(self.evaluate(&requests, targets, replace, rng)?.stop_gradient())
    }

    /// Weighted least squares `(SᵀWS)⁻¹ SᵀW Y` per instance with the
    /// large-weight additivity row. Returns the stacked scores of the
    /// explained features.
    fn shap<R: Rng + ?Sized>(
        &self,
        sets: &[Vec<usize>],
        targets: &[usize],
        budget: usize,
        replace: ReplaceKind,
        rng: &mut R,
    ) -> Result<(Var<'g>, usize)> {
        let n = self.n();
        let k = sets[0].len();
        let mut designs = Vec::with_capacity(sets.len());
        for _ in sets {
            designs.push(self.shap_design(k, budget, rng)?);
        }
        // Masked evaluations: every design row, plus x_J when J ≠ all.
        let partial = k < n;
        let mut requests = Vec::new();
        for (i, (set, design)) in sets.iter().zip(&designs).enumerate() {
            for row in &design.masks {
                let mut keep = vec![false; n];
                for (c, &on) in row.iter().enumerate() {
                    keep[set[c]] = on;
                }
                requests.push((i, keep));
            }
            if partial {
                let mut keep = vec![false; n];
                for &j in set {
                    keep[j] = true;
                }
                requests.push((i, keep));
            }
        }
        let evals = self.evaluate(&requests, targets, replace, rng)?;
        let null = self.null_outputs(targets, replace, rng)?;
        // Y stacks, per instance, the mask rows then the additivity row.
        let mut mask_pos = Vec::new();
        let mut add_pos = Vec::new();
        let mut row_owner = Vec::new();
        let mut offset = 0;
        for (i, design) in designs.iter().enumerate() {
            for r in 0..design.masks.len() {
                mask_pos.push(offset + r);
                row_owner.push(i);
            }
            add_pos.push(offset + design.masks.len());
            row_owner.push(i);
            offset += design.masks.len() + 1;
        }
        let total_rows = offset;
        let y_full = if partial {
            let mut pos = Vec::with_capacity(requests.len());
            for (m, a) in designs.iter().zip(&add_pos) {
                pos.extend(a - m.masks.len()..=*a);
            }
            evals.scatter_rows(pos.into(), total_rows)?
        } else {
            let reference = self.reference(targets)?;
            evals
                .scatter_rows(mask_pos.into(), total_rows)?
                .add(reference.scatter_rows(add_pos.into(), total_rows)?)?
        };
        let y = y_full.sub(null.gather_rows(row_owner.into())?)?;
        let blocks: Rc<[Tensor]> = designs.into_iter().map(|d| d.solution).collect();
        let evaluations = requests.len() / sets.len() + 1;
        Ok((y.block_matmul(blocks, false)?, evaluations))
    }

    fn shap_design<R: Rng + ?Sized>(&self, k: usize, budget: usize, rng: &mut R) -> Result<ShapDesign> {
        for _ in 0..2 {
            if let Some(design) = ShapDesign::build(k, budget, rng) {
                return Ok(design);
            }
        }
        Err(Error::Singular(format!("SᵀWS singular for {budget} masks over {k} features")))
    }

    fn avg_effect<R: Rng + ?Sized>(
        &self,
        sets: &[Vec<usize>],
        targets: &[usize],
        per_feature: usize,
        replace: ReplaceKind,
        coalitions: Coalitions,
        rng: &mut R,
    ) -> Result<(Var<'g>, usize)> {
        let n = self.n();
        let k = sets[0].len();
        let mut with = Vec::new();
        let mut without = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            for (c, &j) in set.iter().enumerate() {
                for _ in 0..per_feature {
                    let mut keep = vec![false; n];
                    let others: Vec<usize> = (0..k).filter(|&o| o != c).collect();
                    match coalitions {
                        Coalitions::Shapley => {
                            let size = rng.random_range(0..k);
                            for o in index::sample(rng, others.len(), size).into_iter() {
                                keep[set[others[o]]] = true;
                            }
                        }
                        Coalitions::Bernoulli => {
                            for &o in &others {
                                keep[set[o]] = rng.random::<bool>();
                            }
                        }
                    }
                    without.push((i, keep.clone()));
                    keep[j] = true;
                    with.push((i, keep));
                }
            }
        }
        let diff = self
            .evaluate(&with, targets, replace, rng)?
            .sub(self.evaluate(&without, targets, replace, rng)?)?;
        // Average the samples of each feature.
        let mean = diff.group_sum_rows(per_feature)?.scale(1.0 / per_feature as f64);
        Ok((mean, 2 * per_feature * k))
    }
}

/// Shapley kernel `π(s) = (k−1) / (C(k,|s|) |s| (k−|s|))`.
pub fn shapley_kernel(k: usize, size: usize) -> f64 {
    if size == 0 || size >= k {
        return 0.0;
    }
    (k - 1) as f64 / (binomial(k, size) * size as f64 * (k - size) as f64)
}

pub fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Weight of the all-ones additivity row.
pub const ADDITIVITY_WEIGHT: f64 = 1e6;

/// Masks over the explained features and the matrix `(SᵀWS)⁻¹SᵀW` whose
/// last column multiplies the additivity row.
struct ShapDesign {
    masks: Vec<Vec<bool>>,
    solution: Tensor,
}

impl ShapDesign {
    /// Whole subset-size layers are enumerated in order of kernel weight
    /// (sizes 1, k−1, 2, k−2, …) while they fit in the budget; the rest of
    /// the budget is sampled from the remaining sizes in proportion to their
    /// kernel mass, each sample weighted by `mass / count`. A budget of
    /// `2^k − 2` or more enumerates every proper nonempty mask.
    fn build<R: Rng + ?Sized>(k: usize, budget: usize, rng: &mut R) -> Option<Self> {
        let mut order = Vec::new();
        for m in 1..k {
            for size in [m, k - m] {
                if !order.contains(&size) && size >= 1 && size < k {
                    order.push(size);
                }
            }
        }
        let mut masks = Vec::new();
        let mut weights = Vec::new();
        let mut remaining = budget;
        let mut next = 0;
        while next < order.len() {
            let size = order[next];
            let count = binomial(k, size);
            if count > remaining as f64 {
                break;
            }
            for subset in combinations(k, size) {
                let mut m = vec![false; k];
                subset.iter().for_each(|&c| m[c] = true);
                masks.push(m);
                weights.push(shapley_kernel(k, size));
            }
            remaining -= count as usize;
            next += 1;
        }
        let left = &order[next..];
        if remaining > 0 && !left.is_empty() {
            let mass: Vec<f64> = left.iter().map(|&m| (k - 1) as f64 / (m * (k - m)) as f64).collect();
            let z: f64 = mass.iter().sum();
            for _ in 0..remaining {
                let u = rng.random::<f64>() * z;
                let mut acc = 0.0;
                let mut size = left[left.len() - 1];
                for (w, &m) in mass.iter().zip(left) {
                    acc += w;
                    if u < acc {
                        size = m;
                        break;
                    }
                }
                let mut m = vec![false; k];
                for c in index::sample(rng, k, size).into_iter() {
                    m[c] = true;
                }
                masks.push(m);
                weights.push(z / remaining as f64);
            }
        }
        Self::solve(k, masks, weights)
    }

    fn solve(k: usize, masks: Vec<Vec<bool>>, weights: Vec<f64>) -> Option<Self> {
        let rows = masks.len() + 1;
        let mut s = Array2::<f64>::zeros((rows, k));
        for (r, m) in masks.iter().enumerate() {
            for (c, &on) in m.iter().enumerate() {
                s[[r, c]] = f64::from(u8::from(on));
            }
        }
        s.row_mut(rows - 1).fill(1.0);
        let mut w = weights;
        w.push(ADDITIVITY_WEIGHT);
        let mut stw = s.t().to_owned();
        for (r, wr) in w.iter().enumerate() {
            stw.column_mut(r).mapv_inplace(|v| v * wr);
        }
        let stws = stw.dot(&s);
        let solution = linalg::solve(&stws, &stw)?;
        Some(Self { masks, solution })
    }
}

/// All `size`-subsets of `0..k` in lexicographic order.
fn combinations(k: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..size).collect();
    if size > k {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..size).rev().find(|&i| cur[i] < k - size + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..size {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// One candidate in explainer selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FaithScore<T> {
    pub tag: T,
    pub suff: f64,
    pub comp: f64,
}

/// Method with the best mean of `(−Suff, Comp)` after z-normalizing each
/// metric across candidates. Ties go to the earlier candidate.
pub fn select_best_explainer<T: Clone>(candidates: &[FaithScore<T>]) -> Result<T> {
    if candidates.is_empty() {
        return Err(contract("no explainer candidates"));
    }
    let z = |xs: Vec<f64>| -> Vec<f64> {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        xs.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
    };
    let zs = z(candidates.iter().map(|c| c.suff).collect());
    let zc = z(candidates.iter().map(|c| c.comp).collect());
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..candidates.len() {
        let score = 0.5 * (-zs[i] + zc[i]);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(candidates[best].tag.clone())
}

/// Value-mode explanations of whole instances, in batches.
pub fn explain_values<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    batch: &Batch,
    cfg: &ExplainConfig,
    rng: &mut R,
) -> Result<Vec<ExplanationVector>> {
    let g = Graph::new();
    let params = bind_params(&g, net, false);
    let base = BaseForward::new(net, &params, &g, batch, cfg.method.needs_input_gradient())?;
    let explainer = Explainer { net, params: &params, batch, base: &base, differentiable: false };
    Ok(explainer.run(cfg, rng)?.vectors(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weights() {
        assert!((shapley_kernel(4, 1) - 3.0 / (4.0 * 3.0)).abs() < 1e-15);
        assert!((shapley_kernel(4, 2) - 3.0 / (6.0 * 4.0)).abs() < 1e-15);
        assert_eq!(shapley_kernel(4, 0), 0.0);
        assert_eq!(shapley_kernel(4, 4), 0.0);
        assert_eq!(binomial(6, 3), 20.0);
    }

    #[test]
    fn single_feature_design_is_the_additivity_row() {
        let d = ShapDesign::build(1, 5, &mut crate::seeding::stream(0, "t")).unwrap();
        assert!(d.masks.is_empty());
        assert!((d.solution[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layers_fill_the_budget_in_kernel_order() {
        let mut rng = crate::seeding::stream(0, "t");
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        let d = ShapDesign::build(5, 5, &mut rng).unwrap();
        assert!(d.masks.iter().all(|m| m.iter().filter(|&&x| x).count() == 1));
        let d = ShapDesign::build(5, 12, &mut rng).unwrap();
        assert_eq!(d.masks.len(), 12);
        let full = ShapDesign::build(5, 30, &mut rng).unwrap();
        assert_eq!(full.masks.len(), 30);
    }

    #[test]
    fn selection_rule() {
        let c = |tag, suff, comp| FaithScore { tag, suff, comp };
        assert_eq!(select_best_explainer(&[c("a", 0.3, 0.1)]).unwrap(), "a");
        assert_eq!(select_best_explainer(&[c("a", 0.1, 0.5), c("b", 0.2, 0.4)]).unwrap(), "a");
        // z(suff) = (-1, 1, 0) · 1/sd, z(comp) = (−1.2247, 0, 1.2247):
        // scores 0.5(1/0.8165·1 − 1.2247) ≈ 0, −0.6124, 0.6124.
        let table = [c("x", 0.0, 0.0), c("y", 0.2, 0.3), c("z", 0.1, 0.6)];
        assert_eq!(select_best_explainer(&table).unwrap(), "z");
        assert!(select_best_explainer::<&str>(&[]).is_err());
    }
}
