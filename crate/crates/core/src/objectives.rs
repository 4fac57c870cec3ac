//! Training objectives over a batch.
//!
//! Supervision terms are summed over supervision-eligible instances and
//! divided by the batch size, so an ineligible instance contributes only its
//! task loss.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use fisup_autodiff::{Graph, Tensor, Var};

use crate::batch::{Batch, Supervision};
use crate::error::{config, Result};
use crate::explain::{BaseForward, ClassMode, ExplainConfig, Explainer, FiMethod};
use crate::model::{bind_params, Network};
use crate::replace::ReplaceKind;
use crate::seeding;
use crate::synthdata::Instance;

/// Inside every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Added under the square root of explanation norms so that an all-zero
/// explanation yields a zero loss with a finite gradient.
const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SuffSource {
    #[default]
    Human,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InvFiNorm {
    /// `‖(ẽ/‖ẽ‖₂)_u‖₁`
    #[default]
    L1Normalized,
    /// `‖ẽ_u‖₂²`
    L2Squared,
}

/// Which supervised terms see the frozen random permutation instead of the
/// annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSupervision {
    pub suff: bool,
    pub unc: bool,
    pub inv_da: bool,
    pub inv_fi: bool,
    pub align: bool,
}

impl RandomSupervision {
    pub fn any(&self) -> bool {
        self.suff || self.unc || self.inv_da || self.inv_fi || self.align
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub task: f64,
    pub suff: f64,
    pub unc: f64,
    pub align: f64,
    pub inv_fi: f64,
    pub inv_da: f64,
    pub suff_source: SuffSource,
    /// Replace function for every term unless overridden.
    pub replace: ReplaceKind,
    pub suff_replace: Option<ReplaceKind>,
    /// Explainer for Align and Inv-FI.
    pub fi: ExplainConfig,
    pub inv_fi_norm: InvFiNorm,
    /// Keep probability per object for Suff-Random masks.
    pub suff_rate: f64,
    /// Add probability per unimportant object for Inv-DA.
    pub inv_da_rate: f64,
    pub random_supervision: RandomSupervision,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            task: 1.0,
            suff: 0.0,
            unc: 0.0,
            align: 0.0,
            inv_fi: 0.0,
            inv_da: 0.0,
            suff_source: SuffSource::Human,
            replace: ReplaceKind::AllNegOnes,
            suff_replace: None,
            fi: ExplainConfig::new(FiMethod::VanillaGrad, 1, ClassMode::Gt),
            inv_fi_norm: InvFiNorm::L1Normalized,
            suff_rate: 0.5,
            inv_da_rate: 0.5,
            random_supervision: RandomSupervision::default(),
        }
    }
}

pub const PRESETS: [&str; 17] = [
    "baseline",
    "suff-random",
    "suff-human",
    "unc",
    "inv-da",
    "inv-fi",
    "align",
    "visfis",
    "simpson",
    "chang",
    "singla",
    "visfis-random-supervision",
    "visfis-random-suff",
    "visfis-random-unc",
    "visfis-random-align",
    "visfis-random-inv-fi",
    "visfis-random-inv-da",
];

impl ObjectiveConfig {
    /// Named objective composites.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let visfis = Self {
            suff: 1.0,
            unc: 1.0,
            align: 1.0,
            inv_fi: 1.0,
            ..base.clone()
        };
        let simpson = Self {
            inv_fi: 1.0,
            inv_fi_norm: InvFiNorm::L2Squared,
            ..base.clone()
        };
        let random = |r: RandomSupervision| Self { random_supervision: r, ..visfis.clone() };
        let cfg = match name {
            "baseline" => base,
            "suff-random" => Self { suff: 1.0, suff_source: SuffSource::Random, ..base },
            "suff-human" => Self { suff: 1.0, ..base },
            "unc" => Self { unc: 1.0, ..base },
            "inv-da" => Self { inv_da: 1.0, ..base },
            "inv-fi" => Self {
                inv_fi: 1.0,
                fi: ExplainConfig::new(FiMethod::Koi, 4, ClassMode::Gt),
                ..base
            },
            "align" => Self {
                align: 1.0,
                fi: ExplainConfig::new(FiMethod::ExpectedGrad, 1, ClassMode::Pred),
                ..base
            },
            "visfis" => visfis.clone(),
            "simpson" => simpson,
            "chang" => Self { suff: 1.0, suff_replace: Some(ReplaceKind::Shuffle), ..simpson },
            "singla" => Self { suff: 1.0, suff_replace: Some(ReplaceKind::Gaussian), ..simpson },
            "visfis-random-supervision" => random(RandomSupervision {
                suff: true,
                unc: true,
                inv_da: true,
                inv_fi: true,
                align: true,
            }),
            "visfis-random-suff" => random(RandomSupervision { suff: true, ..Default::default() }),
            "visfis-random-unc" => random(RandomSupervision { unc: true, ..Default::default() }),
            "visfis-random-align" => random(RandomSupervision { align: true, ..Default::default() }),
            "visfis-random-inv-fi" => random(RandomSupervision { inv_fi: true, ..Default::default() }),
            "visfis-random-inv-da" => Self {
                inv_da: 1.0,
                random_supervision: RandomSupervision { inv_da: true, ..Default::default() },
                ..visfis
            },
            other => return Err(config(format!("unknown objective preset {other:?}"))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.task, self.suff, self.unc, self.align, self.inv_fi, self.inv_da];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(config("loss weights must be finite and nonnegative"));
        }
        if self.task <= 0.0 {
            return Err(config("the task weight must be positive"));
        }
        for (name, p) in [("suff_rate", self.suff_rate), ("inv_da_rate", self.inv_da_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("{name} must lie in [0, 1]")));
            }
        }
        if (self.align > 0.0 || self.inv_fi > 0.0) && self.fi.budget == 0 {
            return Err(config("fi budget must be at least 1"));
        }
        Ok(())
    }

    pub fn needs_random_supervision(&self) -> bool {
        let r = self.random_supervision;
        (r.suff && self.suff > 0.0 && self.suff_source == SuffSource::Human)
            || (r.unc && self.unc > 0.0)
            || (r.inv_da && self.inv_da > 0.0)
            || (r.inv_fi && self.inv_fi > 0.0)
            || (r.align && self.align > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Task,
    Suff,
    Unc,
    Align,
    InvFi,
    InvDa,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Task, Term::Suff, Term::Unc, Term::Align, Term::InvFi, Term::InvDa];

    pub fn name(self) -> &'static str {
        match self {
            Term::Task => "task",
            Term::Suff => "suff",
            Term::Unc => "unc",
            Term::Align => "align",
            Term::InvFi => "inv_fi",
            Term::InvDa => "inv_da",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Total loss and each weighted term.
pub struct LossBreakdown<'g> {
    pub total: Var<'g>,
    /// `(term, λ · value)` for every term with a positive weight.
    pub terms: Vec<(Term, f64)>,
}

/// `log softmax`, with probabilities floored before the log.
pub fn log_probs<'g>(logits: Var<'g>) -> Var<'g> {
    logits.softmax_rows().clamp_min(PROB_FLOOR).ln()
}

/// Per-row cross-entropy, `R × 1`.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    Ok(log_probs(logits).select_index(labels.to_vec().into())?.neg())
}

/// Per-row `KL(Unif ‖ softmax(logits))`, `R × 1`.
///
/// Computed as `logsumexp(z) − mean(z) − ln c` on rows shifted by their max,
/// so equal logits give exactly zero.
pub fn kl_from_uniform<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let (rows, cols) = logits.shape();
    let c = cols as f64;
    let v = logits.value();
    let max = Tensor::from_shape_fn((rows, cols), |(r, _)| v.row(r).fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    let z = logits.sub(logits.graph().constant(max))?;
    let lse = z.exp().sum_cols().ln();
    Ok(lse.sub(z.sum_cols().scale(1.0 / c))?.shift(-c.ln()))
}

/// Per-row `KL(p ‖ q)` for probability rows `p` (constant) and logits of `q`.
pub fn kl_divergence<'g>(p: Var<'g>, q_logits: Var<'g>) -> Result<Var<'g>> {
    let log_p = p.clamp_min(PROB_FLOOR).ln();
    Ok(p.mul(log_p.sub(log_probs(q_logits))?)?.sum_cols())
}

/// Per-row Inv-FI over the positions flagged in `unimportant` (`B × n`, 0/1).
pub fn inv_fi_rows<'g>(scores: Var<'g>, unimportant: &Tensor, norm: InvFiNorm) -> Result<Var<'g>> {
    let g = scores.graph();
    let u = g.constant(unimportant.clone());
    match norm {
        InvFiNorm::L1Normalized => {
            let l2 = scores.square().sum_cols().shift(NORM_EPS).sqrt();
            scores.mul(u)?.abs().sum_cols().div(l2).map_err(Into::into)
        }
        InvFiNorm::L2Squared => Ok(scores.mul(u)?.square().sum_cols()),
    }
}

/// Per-row `−cos(e, ẽ)` over the positions flagged in `explained`.
pub fn align_rows<'g>(scores: Var<'g>, human: &Tensor, explained: &Tensor) -> Result<Var<'g>> {
    let g = scores.graph();
    let e = g.constant(human * explained);
    let s = scores.mul(g.constant(explained.clone()))?;
    let dot = s.mul(e)?.sum_cols();
    let ns = s.square().sum_cols().shift(NORM_EPS).sqrt();
    let ne = e.square().sum_cols().shift(NORM_EPS).sqrt();
    Ok(dot.div(ns.mul(ne)?)?.neg())
}

fn flags(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |(r, c)| if f(r, c) { 1.0 } else { 0.0 })
}

fn column(values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

/// `λ₁ Task + λ₂ Suff + λ₃ Unc + λ₄ Align + λ₅ Inv-FI + λ₆ Inv-DA`.
///
/// Terms with zero weight are not evaluated and draw no random numbers.
pub fn composite_loss<'g, N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    params: &[Var<'g>],
    g: &'g Graph,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBreakdown<'g>> {
    let (bsz, n) = (batch.len(), batch.n_objects);
    let inv_b = 1.0 / bsz as f64;
    let explain = cfg.align > 0.0 || cfg.inv_fi > 0.0;
    let track_input = explain && cfg.fi.method == FiMethod::VanillaGrad;
    let base = BaseForward::new(net, params, g, batch, track_input)?;
    let questions = |rows: &[usize]| -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), batch.questions.ncols()), |(r, c)| batch.questions[[rows[r], c]])
    };
    let source = |random: bool| -> Result<&Supervision> {
        if random {
            batch
                .random_supervision
                .as_ref()
                .ok_or_else(|| config("random supervision requested but not attached to the batch"))
        } else {
            Ok(&batch.supervision)
        }
    };
    let forward_masked = |requests: &[(usize, Vec<bool>)], kind: ReplaceKind, rng: &mut R| -> Result<Var<'g>> {
        let (objects, _) = batch.masked(requests, kind, rng)?;
        let rows: Vec<usize> = requests.iter().map(|(b, _)| *b).collect();
        let out = net.forward(params, g.constant(objects), g.constant(questions(&rows)), n)?;
        Ok(out.logits)
    };

    let mut total = g.zeros(1, 1);
    let mut terms = Vec::new();
    let mut add = |term: Term, weight: f64, value: Var<'g>, total: &mut Var<'g>| -> Result<()> {
        let weighted = value.scale(weight);
        terms.push((term, weighted.item()));
        *total = total.add(weighted)?;
        Ok(())
    };

    let task = cross_entropy(base.output.logits, &batch.labels)?.mean();
    add(Term::Task, cfg.task, task, &mut total)?;

    if cfg.suff > 0.0 {
        let kind = cfg.suff_replace.unwrap_or(cfg.replace);
        let requests: Vec<(usize, Vec<bool>)> = match cfg.suff_source {
            SuffSource::Random => (0..bsz)
                .map(|b| (b, (0..n).map(|_| rng.random::<f64>() < cfg.suff_rate).collect()))
                .collect(),
            SuffSource::Human => {
                let sup = source(cfg.random_supervision.suff)?;
                (0..bsz).filter(|&b| sup.eligible[b]).map(|b| (b, sup.mask(b).to_vec())).collect()
            }
        };
        let value = if requests.is_empty() {
            g.zeros(1, 1)
        } else {
            let labels: Vec<usize> = requests.iter().map(|(b, _)| batch.labels[*b]).collect();
            let logits = forward_masked(&requests, kind, rng)?;
            cross_entropy(logits, &labels)?.sum().scale(inv_b)
        };
        add(Term::Suff, cfg.suff, value, &mut total)?;
    }

    if cfg.unc > 0.0 {
        let sup = source(cfg.random_supervision.unc)?;
        let requests: Vec<(usize, Vec<bool>)> = (0..bsz)
            .filter(|&b| sup.eligible[b])
            .map(|b| (b, sup.mask(b).iter().map(|m| !m).collect()))
            .collect();
        let value = if requests.is_empty() {
            g.zeros(1, 1)
        } else {
            kl_from_uniform(forward_masked(&requests, cfg.replace, rng)?)?.sum().scale(inv_b)
        };
        add(Term::Unc, cfg.unc, value, &mut total)?;
    }

    if cfg.inv_da > 0.0 {
        let sup = source(cfg.random_supervision.inv_da)?;
        let eligible: Vec<usize> = (0..bsz).filter(|&b| sup.eligible[b]).collect();
        let value = if eligible.is_empty() {
            g.zeros(1, 1)
        } else {
            let mut requests = Vec::with_capacity(2 * eligible.len());
            for &b in &eligible {
                requests.push((b, sup.mask(b).to_vec()));
            }
            for &b in &eligible {
                let keep = sup
                    .mask(b)
                    .iter()
                    .map(|&e| e || rng.random::<f64>() < cfg.inv_da_rate)
                    .collect();
                requests.push((b, keep));
            }
            let logits = forward_masked(&requests, cfg.replace, rng)?;
            let m = eligible.len();
            let first: Vec<usize> = (0..m).collect();
            let second: Vec<usize> = (m..2 * m).collect();
            let p_e = logits.gather_rows(first.into())?.softmax_rows().stop_gradient();
            let q = logits.gather_rows(second.into())?;
            kl_divergence(p_e, q)?.sum().scale(inv_b)
        };
        add(Term::InvDa, cfg.inv_da, value, &mut total)?;
    }

    if explain {
        let explainer = Explainer { net, params, batch, base: &base, differentiable: true };
        let e = explainer.run(&cfg.fi, rng)?;
        let explained = flags(bsz, n, |b, k| e.explained[b * n + k]);
        if cfg.align > 0.0 {
            let sup = source(cfg.random_supervision.align)?;
            let rows = align_rows(e.scores, &sup.human_fi, &explained)?;
            let keep: Vec<f64> = sup.eligible.iter().map(|&x| f64::from(u8::from(x))).collect();
            let value = rows.mul(g.constant(column(&keep)))?.sum().scale(inv_b);
            add(Term::Align, cfg.align, value, &mut total)?;
        }
        if cfg.inv_fi > 0.0 {
            let sup = source(cfg.random_supervision.inv_fi)?;
            let unimportant = flags(bsz, n, |b, k| !sup.mask(b)[k] && e.explained[b * n + k]);
            let rows = inv_fi_rows(e.scores, &unimportant, cfg.inv_fi_norm)?;
            let keep: Vec<f64> = sup.eligible.iter().map(|&x| f64::from(u8::from(x))).collect();
            let value = rows.mul(g.constant(column(&keep)))?.sum().scale(inv_b);
            add(Term::InvFi, cfg.inv_fi, value, &mut total)?;
        }
    }

    Ok(LossBreakdown { total, terms })
}

/// Frozen random permutations of each instance's human FI and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSupervisionTable {
    entries: BTreeMap<usize, (Vec<f64>, Vec<bool>, bool)>,
}

impl RandomSupervisionTable {
    pub fn new(instances: &[&Instance], seed: u64) -> Self {
        let mut rng = seeding::stream(seed, "random-supervision");
        let entries = instances
            .iter()
            .map(|inst| {
                let mut perm: Vec<usize> = (0..inst.n_objects()).collect();
                perm.shuffle(&mut rng);
                let fi = perm.iter().map(|&k| inst.human_fi[k]).collect();
                let mask = perm.iter().map(|&k| inst.important[k]).collect();
                (inst.id, (fi, mask, inst.eligible()))
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sets the batch's random supervision from the frozen entries.
    pub fn attach(&self, batch: &mut Batch) -> Result<()> {
        let n = batch.n_objects;
        let mut human_fi = Array2::zeros((batch.len(), n));
        let mut important = Vec::with_capacity(batch.len() * n);
        let mut eligible = Vec::with_capacity(batch.len());
        for (b, id) in batch.ids.iter().enumerate() {
            let (fi, mask, ok) = self
                .entries
                .get(id)
                .ok_or_else(|| config(format!("instance {id} has no frozen random supervision")))?;
            for (k, v) in fi.iter().enumerate() {
                human_fi[[b, k]] = *v;
            }
            important.extend_from_slice(mask);
            eligible.push(*ok);
        }
        batch.random_supervision = Some(Supervision { human_fi, important, eligible });
        Ok(())
    }

    /// Digest of the table contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (id, (fi, mask, _)) in &self.entries {
            let words = std::iter::once(*id as u64)
                .chain(fi.iter().map(|v| v.to_bits()))
                .chain(mask.iter().map(|&m| u64::from(m)));
            for word in words {
                for byte in word.to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn single(instance: &Instance) -> Result<Batch> {
    Batch::from_instances(&[instance])
}

/// Value of one term on a single instance with an otherwise-zero config.
fn term_value<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instance: &Instance,
    cfg: &ObjectiveConfig,
    term: Term,
    rng: &mut R,
) -> Result<f64> {
    let g = Graph::new();
    let params = bind_params(&g, net, false);
    let batch = single(instance)?;
    let loss = composite_loss(net, &params, &g, &batch, cfg, rng)?;
    Ok(loss.terms.iter().find(|(t, _)| *t == term).map_or(0.0, |(_, v)| *v))
}

/// `−log p(label)`.
pub fn task_loss<N: Network + ?Sized>(net: &N, instance: &Instance) -> Result<f64> {
    term_value(net, instance, &ObjectiveConfig::default(), Term::Task, &mut seeding::stream(0, "unused"))
}

pub fn suff_loss<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &N,
    instance: &Instance,
    source: SuffSource,
    replace: ReplaceKind,
    rng: &mut R,
) -> Result<f64> {
    let cfg = ObjectiveConfig { suff: 1.0, suff_source: source, replace, ..Default::default() };
    term_value(net, instance, &cfg, Term::Suff, rng)
}

pub fn unc_loss<N: Network + ?Sized>(net: &N, instance: &Instance) -> Result<f64> {
    let cfg = ObjectiveConfig { unc: 1.0, ..Default::default() };
    term_value(net, instance, &cfg, Term::Unc, &mut seeding::stream(0, "unused"))
}

pub fn inv_da_loss<N: Network + ?Sized, R: Rng + ?Sized>(net: &N, instance: &Instance, rng: &mut R) -> Result<f64> {
    let cfg = ObjectiveConfig { inv_da: 1.0, ..Default::default() };
    term_value(net, instance, &cfg, Term::InvDa, rng)
}

/// `‖(ẽ/‖ẽ‖₂)_u‖₁` with `u = 1 − mask`; 0 for a zero explanation.
pub fn inv_fi_loss(scores: &[f64], important: &[bool]) -> f64 {
    let g = Graph::new();
    let n = scores.len();
    let s = g.constant(Tensor::from_shape_vec((1, n), scores.to_vec()).expect("row"));
    let u = flags(1, n, |_, k| !important[k]);
    inv_fi_rows(s, &u, InvFiNorm::L1Normalized).expect("shapes agree").item()
}

/// `−cos(e, ẽ)`; 0 when either vector is zero.
pub fn align_loss(scores: &[f64], human_fi: &[f64]) -> f64 {
    let g = Graph::new();
    let n = scores.len();
    let s = g.constant(Tensor::from_shape_vec((1, n), scores.to_vec()).expect("row"));
    let e = Tensor::from_shape_vec((1, n), human_fi.to_vec()).expect("row");
    align_rows(s, &e, &Tensor::ones((1, n))).expect("shapes agree").item()
}
