//! Synthetic object/question task with ground-truth feature importance.
//!
//! Every object row is `[type one-hot | attribute one-hot | nuisance]`, the
//! nuisance dims drawn iid standard normal. A question asks about one object
//! type (or a pair of types); the objects it refers to are exactly the
//! important ones, and the label is a function of those rows alone.
//! Distractors always have unreferenced types, so redrawing them never
//! changes the label.
//!
//! Each base question comes in two hidden variants that differ in their
//! answer prior and in a spurious cue planted in distractor attributes. The
//! variant is not part of the question encoding; it is the `question_type`
//! group used by the 80/20 shift split, so the two pools see different
//! mixtures of the variants.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::seeding::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Exists,
    Count,
    Attribute,
    SameAttribute,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        QuestionKind::Exists,
        QuestionKind::Count,
        QuestionKind::Attribute,
        QuestionKind::SameAttribute,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Where continuous human FI scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FiSource {
    /// 1 for important objects, 0 otherwise, plus truncated noise.
    #[default]
    Direct,
    /// Pixel importance inside ground-truth regions, scored per box.
    Pixel,
    /// Max IoU between each object box and jittered ground-truth boxes.
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_objects: usize,
    pub n_features: usize,
    pub n_types: usize,
    pub n_attrs: usize,
    pub max_count: usize,
    pub kinds: Vec<QuestionKind>,
    /// Instances generated before the shift split and downsampling.
    pub size: usize,
    /// σ of the truncated noise on direct FI scores.
    pub fi_noise: f64,
    pub fi_source: FiSource,
    /// Prior mass on each variant's favored answer.
    pub prior_skew: f64,
    /// Probability that a distractor carries the variant's answer cue.
    pub spurious_rate: f64,
    /// Canvas side for the pixel / IoU annotation sources.
    pub canvas: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_objects: 9,
            n_features: 16,
            n_types: 6,
            n_attrs: 6,
            max_count: 3,
            kinds: QuestionKind::ALL.to_vec(),
            size: 28_000,
            fi_noise: 0.05,
            fi_source: FiSource::Direct,
            prior_skew: 0.8,
            spurious_rate: 0.0,
            canvas: 32,
        }
    }
}

impl GeneratorConfig {
    /// Answer vocabulary: `no, yes, count 0..=max_count, attribute 0..n_attrs`.
    pub fn n_answers(&self) -> usize {
        2 + self.max_count + 1 + self.n_attrs
    }

    pub fn question_dim(&self) -> usize {
        QuestionKind::ALL.len() + 2 * self.n_types
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 1 {
            return Err(config("n_objects must be at least 1"));
        }
        if self.n_answers() < 2 {
            return Err(config("answer vocabulary needs at least 2 entries"));
        }
        if self.n_types < 3 || self.n_attrs < 2 {
            return Err(config("need at least 3 object types and 2 attributes"));
        }
        if self.n_features < self.n_types + self.n_attrs {
            return Err(config(format!(
                "n_features must be at least n_types + n_attrs = {}",
                self.n_types + self.n_attrs
            )));
        }
        if self.max_count < 1 {
            return Err(config("max_count must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(config("at least one question kind is required"));
        }
        if !(self.fi_noise >= 0.0 && self.fi_noise.is_finite()) {
            return Err(config("fi_noise must be finite and nonnegative"));
        }
        for (name, p) in [("prior_skew", self.prior_skew), ("spurious_rate", self.spurious_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.fi_source != FiSource::Direct && self.canvas < 8 {
            return Err(config("canvas must be at least 8 pixels"));
        }
        if self.groups().is_empty() {
            return Err(config("no feasible question for this object count"));
        }
        Ok(())
    }

    /// Every question group: base question × hidden variant.
    pub fn groups(&self) -> Vec<QuestionGroup> {
        let mut base = Vec::new();
        for &kind in &QuestionKind::ALL {
            if !self.kinds.contains(&kind) {
                continue;
            }
            match kind {
                QuestionKind::SameAttribute => {
                    if self.n_objects < 2 {
                        continue;
                    }
                    for a in 0..self.n_types {
                        for b in a + 1..self.n_types {
                            base.push((kind, a, b));
                        }
                    }
                }
                _ => base.extend((0..self.n_types).map(|c| (kind, c, c))),
            }
        }
        base.into_iter()
            .flat_map(|(kind, c1, c2)| {
                (0..2).map(move |variant| QuestionGroup { kind, c1, c2, variant })
            })
            .collect()
    }

    fn max_count_here(&self) -> usize {
        self.max_count.min(self.n_objects)
    }

    /// Answer ids a question kind can produce, in vocabulary order.
    pub fn answer_set(&self, kind: QuestionKind) -> Vec<usize> {
        match kind {
            QuestionKind::Exists | QuestionKind::SameAttribute => vec![NO, YES],
            QuestionKind::Count => (0..=self.max_count_here()).map(|m| COUNT0 + m).collect(),
            QuestionKind::Attribute => (0..self.n_attrs).map(|a| self.attr_answer(a)).collect(),
        }
    }

    fn attr_answer(&self, attr: usize) -> usize {
        COUNT0 + self.max_count + 1 + attr
    }
}

pub const NO: usize = 0;
pub const YES: usize = 1;
const COUNT0: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuestionGroup {
    pub kind: QuestionKind,
    pub c1: usize,
    pub c2: usize,
    pub variant: usize,
}

impl QuestionGroup {
    /// Encoding seen by the model; identical for both variants.
    pub fn encode(&self, cfg: &GeneratorConfig) -> Vec<f64> {
        let mut q = vec![0.0; cfg.question_dim()];
        let k = QuestionKind::ALL.len();
        q[self.kind.index()] = 1.0;
        q[k + self.c1] = 1.0;
        if self.kind == QuestionKind::SameAttribute {
            q[k + cfg.n_types + self.c2] = 1.0;
        }
        q
    }
}

/// Decoded view of an object row.
fn decode_object(row: &[f64], cfg: &GeneratorConfig) -> (usize, usize) {
    let ty = argmax(&row[..cfg.n_types]);
    let attr = argmax(&row[cfg.n_types..cfg.n_types + cfg.n_attrs]);
    (ty, attr)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes a question encoding back to `(kind, c1, c2)`.
pub fn decode_question(q: &[f64], cfg: &GeneratorConfig) -> (QuestionKind, usize, usize) {
    let k = QuestionKind::ALL.len();
    let kind = QuestionKind::ALL[argmax(&q[..k])];
    let c1 = argmax(&q[k..k + cfg.n_types]);
    let c2 = if kind == QuestionKind::SameAttribute {
        argmax(&q[k + cfg.n_types..k + 2 * cfg.n_types])
    } else {
        c1
    };
    (kind, c1, c2)
}

/// The generator's answer rule applied to an arbitrary set of object rows.
///
/// Returns `None` when the rows do not define an answer (e.g. an attribute
/// question without exactly one object of the type).
pub fn answer_rule(
    rows: ArrayView2<f64>,
    question: &[f64],
    cfg: &GeneratorConfig,
) -> Option<usize> {
    let (kind, c1, c2) = decode_question(question, cfg);
    let decoded: Vec<(usize, usize)> = rows
        .rows()
        .into_iter()
        .map(|r| decode_object(r.as_slice().expect("contiguous rows"), cfg))
        .collect();
    let of_type = |c: usize| decoded.iter().filter(|(t, _)| *t == c).copied().collect::<Vec<_>>();
    match kind {
        QuestionKind::Exists => Some(if of_type(c1).is_empty() { NO } else { YES }),
        QuestionKind::Count => {
            let m = of_type(c1).len();
            (m <= cfg.max_count).then_some(COUNT0 + m)
        }
        QuestionKind::Attribute => match of_type(c1).as_slice() {
            [(_, attr)] => Some(cfg.attr_answer(*attr)),
            _ => None,
        },
        QuestionKind::SameAttribute => match (of_type(c1).as_slice(), of_type(c2).as_slice()) {
            ([(_, a)], [(_, b)]) => Some(if a == b { YES } else { NO }),
            _ => None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

/// One datapoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    /// `n × d` object features.
    pub objects: Array2<f64>,
    pub question: Vec<f64>,
    pub question_type: usize,
    pub label: usize,
    /// Continuous human FI in `[0, 1]`.
    pub human_fi: Vec<f64>,
    /// `human_fi ≥ τ`.
    pub important: Vec<bool>,
    pub split: Split,
}

impl Instance {
    pub fn n_objects(&self) -> usize {
        self.objects.nrows()
    }

    /// At least one important object.
    pub fn eligible(&self) -> bool {
        self.important.iter().any(|&m| m)
    }

    pub fn set_threshold(&mut self, tau: f64) {
        self.important = binarize(&self.human_fi, tau).0;
    }
}

/// On-disk form of an [`Instance`], one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: usize,
    pub split: Split,
    /// Row-major: one inner array per object.
    pub objects: Vec<Vec<f64>>,
    pub question: Vec<f64>,
    pub question_type: usize,
    pub label: usize,
    pub human_fi: Vec<f64>,
}

impl InstanceRecord {
    pub fn from_instance(inst: &Instance) -> Self {
        Self {
            id: inst.id,
            split: inst.split,
            objects: inst.objects.rows().into_iter().map(|r| r.to_vec()).collect(),
            question: inst.question.clone(),
            question_type: inst.question_type,
            label: inst.label,
            human_fi: inst.human_fi.clone(),
        }
    }

    pub fn into_instance(self, tau: f64) -> Result<Instance> {
        let n = self.objects.len();
        let d = self.objects.first().map_or(0, Vec::len);
        if n == 0 || self.objects.iter().any(|r| r.len() != d) || self.human_fi.len() != n {
            return Err(contract(format!("instance {} has ragged objects or FI", self.id)));
        }
        let flat: Vec<f64> = self.objects.into_iter().flatten().collect();
        let objects = Array2::from_shape_vec((n, d), flat).expect("checked shape");
        let important = binarize(&self.human_fi, tau).0;
        Ok(Instance {
            id: self.id,
            objects,
            question: self.question,
            question_type: self.question_type,
            label: self.label,
            human_fi: self.human_fi,
            important,
            split: self.split,
        })
    }
}

/// `1[score ≥ τ]` and whether any entry is set.
pub fn binarize(human_fi: &[f64], tau: f64) -> (Vec<bool>, bool) {
    let mask: Vec<bool> = human_fi.iter().map(|&s| s >= tau).collect();
    let eligible = mask.iter().any(|&m| m);
    (mask, eligible)
}

/// Axis-aligned rectangle `[x0, y0, x1, y1]` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if self.area() <= 0.0 || other.area() <= 0.0 || union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Whether the centre of pixel `(row, col)` lies in the rectangle.
    fn covers(&self, row: usize, col: usize) -> bool {
        let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
        self.x0 <= cx && cx <= self.x1 && self.y0 <= cy && cy <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxGeometry {
    pub detected_boxes: Vec<Rect>,
    pub ground_truth_boxes: Vec<Rect>,
    /// `H × W` grid in `[0, 1]`.
    pub pixel_importance: Array2<f64>,
}

impl BoxGeometry {
    fn check(&self) -> Result<()> {
        let (h, w) = self.pixel_importance.dim();
        let inside = |r: &Rect| {
            r.x0 >= 0.0 && r.y0 >= 0.0 && r.x1 <= w as f64 && r.y1 <= h as f64
        };
        if !self.detected_boxes.iter().chain(&self.ground_truth_boxes).all(inside) {
            return Err(contract("box outside the canvas"));
        }
        if self.pixel_importance.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("pixel importance outside [0, 1]"));
        }
        Ok(())
    }
}

/// `s = E_i / (E_i + E_o)` with `E_i`, `E_o` the mean pixel importance inside
/// and outside each detected box; `0` when both are zero.
pub fn box_scores_pixel(geom: &BoxGeometry) -> Result<Vec<f64>> {
    geom.check()?;
    let (h, w) = geom.pixel_importance.dim();
    Ok(geom
        .detected_boxes
        .iter()
        .map(|b| {
            let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
            for r in 0..h {
                for c in 0..w {
                    let v = geom.pixel_importance[[r, c]];
                    if b.covers(r, c) {
                        sum_in += v;
                        n_in += 1;
                    } else {
                        sum_out += v;
                        n_out += 1;
                    }
                }
            }
            let e_in = if n_in > 0 { sum_in / n_in as f64 } else { 0.0 };
            let e_out = if n_out > 0 { sum_out / n_out as f64 } else { 0.0 };
            if e_in + e_out > 0.0 {
                e_in / (e_in + e_out)
            } else {
                0.0
            }
        })
        .collect())
}

/// `s = max_l IoU(detected, ground_truth_l)`.
pub fn box_scores_iou(geom: &BoxGeometry) -> Result<Vec<f64>> {
    geom.check()?;
    if geom.ground_truth_boxes.is_empty() {
        return Err(contract("IoU scores need at least one ground-truth box"));
    }
    Ok(geom
        .detected_boxes
        .iter()
        .map(|d| geom.ground_truth_boxes.iter().map(|g| d.iou(g)).fold(0.0, f64::max))
        .collect())
}

/// Per-group prior and spurious cue.
#[derive(Debug, Clone)]
struct GroupLaw {
    group: QuestionGroup,
    answers: Vec<usize>,
    probs: Vec<f64>,
    /// Attribute planted in distractors for each answer index.
    cue: Vec<usize>,
}

fn group_laws(cfg: &GeneratorConfig, rng: &mut Rng) -> Vec<GroupLaw> {
    let groups = cfg.groups();
    let mut laws = Vec::with_capacity(groups.len());
    for pair in groups.chunks(2) {
        let answers = cfg.answer_set(pair[0].kind);
        let k = answers.len();
        // The two variants favor different answers and plant different cues.
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        let mut offsets: Vec<usize> = (1..cfg.n_attrs).collect();
        offsets.shuffle(rng);
        for (v, group) in pair.iter().enumerate() {
            let favored = order[v % k];
            let probs = (0..k)
                .map(|i| {
                    if i == favored {
                        cfg.prior_skew + (1.0 - cfg.prior_skew) / k as f64
                    } else {
                        (1.0 - cfg.prior_skew) / k as f64
                    }
                })
                .collect();
            let offset = offsets[v % offsets.len()];
            let cue = (0..k).map(|i| (i + offset) % cfg.n_attrs).collect();
            laws.push(GroupLaw {
                group: *group,
                answers: answers.clone(),
                probs,
                cue,
            });
        }
    }
    laws
}

fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct SceneObject {
    ty: usize,
    attr: usize,
    important: bool,
}

fn build_scene(cfg: &GeneratorConfig, law: &GroupLaw, answer_idx: usize, rng: &mut Rng) -> Vec<SceneObject> {
    let g = law.group;
    let answer = law.answers[answer_idx];
    let n = cfg.n_objects;
    let mut objects = Vec::with_capacity(n);
    let attr = |rng: &mut Rng| rng.random_range(0..cfg.n_attrs);
    let important = |ty, attr| SceneObject { ty, attr, important: true };
    match g.kind {
        QuestionKind::Exists => {
            if answer == YES {
                let m = rng.random_range(1..=cfg.max_count_here());
                for _ in 0..m {
                    let a = attr(rng);
                    objects.push(important(g.c1, a));
                }
            }
        }
        QuestionKind::Count => {
            for _ in 0..answer - COUNT0 {
                let a = attr(rng);
                objects.push(important(g.c1, a));
            }
        }
        QuestionKind::Attribute => objects.push(important(g.c1, answer_idx)),
        QuestionKind::SameAttribute => {
            let a = attr(rng);
            let b = if answer == YES {
                a
            } else {
                (a + rng.random_range(1..cfg.n_attrs)) % cfg.n_attrs
            };
            objects.push(important(g.c1, a));
            objects.push(important(g.c2, b));
        }
    }
    let referenced = [g.c1, g.c2];
    let free: Vec<usize> = (0..cfg.n_types).filter(|t| !referenced.contains(t)).collect();
    while objects.len() < n {
        let ty = free[rng.random_range(0..free.len())];
        let a = if rng.random::<f64>() < cfg.spurious_rate {
            law.cue[answer_idx]
        } else {
            attr(rng)
        };
        objects.push(SceneObject { ty, attr: a, important: false });
    }
    objects.shuffle(rng);
    objects
}

fn truncated_noise(sigma: f64, rng: &mut Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z).abs().min(1.0)
}

fn random_box(canvas: usize, rng: &mut Rng) -> Rect {
    let side = canvas as f64;
    let w = rng.random_range(side / 8.0..side / 4.0);
    let h = rng.random_range(side / 8.0..side / 4.0);
    let x0 = rng.random_range(0.0..side - w);
    let y0 = rng.random_range(0.0..side - h);
    Rect::new(x0, y0, x0 + w, y0 + h)
}

fn annotate(cfg: &GeneratorConfig, scene: &[SceneObject], rng: &mut Rng) -> Vec<f64> {
    match cfg.fi_source {
        FiSource::Direct => scene
            .iter()
            .map(|o| {
                let eps = truncated_noise(cfg.fi_noise, rng);
                if o.important { 1.0 - eps } else { eps }
            })
            .collect(),
        FiSource::Pixel | FiSource::Iou => {
            let boxes: Vec<Rect> = scene.iter().map(|_| random_box(cfg.canvas, rng)).collect();
            let important: Vec<Rect> = scene
                .iter()
                .zip(&boxes)
                .filter(|(o, _)| o.important)
                .map(|(_, b)| *b)
                .collect();
            let side = cfg.canvas;
            if cfg.fi_source == FiSource::Pixel {
                let mut grid = Array2::zeros((side, side));
                for ((r, c), v) in grid.indexed_iter_mut() {
                    let hit = important.iter().any(|b| b.covers(r, c));
                    *v = if hit { 1.0 - truncated_noise(cfg.fi_noise, rng) } else { truncated_noise(cfg.fi_noise, rng) };
                }
                let geom = BoxGeometry {
                    detected_boxes: boxes,
                    ground_truth_boxes: important,
                    pixel_importance: grid,
                };
                box_scores_pixel(&geom).expect("boxes lie on the canvas")
            } else if important.is_empty() {
                vec![0.0; scene.len()]
            } else {
                let jitter = |b: &Rect, rng: &mut Rng| {
                    let mut j = || rng.random_range(-1.0..1.0);
                    let s = side as f64;
                    Rect::new(
                        (b.x0 + j()).clamp(0.0, s),
                        (b.y0 + j()).clamp(0.0, s),
                        (b.x1 + j()).clamp(0.0, s),
                        (b.y1 + j()).clamp(0.0, s),
                    )
                };
                let gt: Vec<Rect> = important.iter().map(|b| jitter(b, rng)).collect();
                let geom = BoxGeometry {
                    detected_boxes: boxes,
                    ground_truth_boxes: gt,
                    pixel_importance: Array2::zeros((side, side)),
                };
                box_scores_iou(&geom).expect("boxes lie on the canvas")
            }
        }
    }
}

/// Feature row for a scene object.
fn encode_object(cfg: &GeneratorConfig, ty: usize, attr: usize, rng: &mut Rng) -> Vec<f64> {
    let mut row = vec![0.0; cfg.n_features];
    row[ty] = 1.0;
    row[cfg.n_types + attr] = 1.0;
    for v in &mut row[cfg.n_types + cfg.n_attrs..] {
        *v = StandardNormal.sample(rng);
    }
    row
}

/// A fresh label-independent distractor row for question `group`.
pub fn fresh_distractor(cfg: &GeneratorConfig, group: &QuestionGroup, rng: &mut Rng) -> Vec<f64> {
    let free: Vec<usize> = (0..cfg.n_types).filter(|t| *t != group.c1 && *t != group.c2).collect();
    let ty = free[rng.random_range(0..free.len())];
    let attr = rng.random_range(0..cfg.n_attrs);
    encode_object(cfg, ty, attr, rng)
}

/// Generates `cfg.size` instances (all provisionally in `Train`).
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let laws = group_laws(cfg, &mut seeding::stream(seed, "group-laws"));
    let mut rng = seeding::stream(seed, "instances");
    let mut out = Vec::with_capacity(cfg.size);
    for id in 0..cfg.size {
        let gid = rng.random_range(0..laws.len());
        let law = &laws[gid];
        let answer_idx = sample_index(&law.probs, &mut rng);
        let scene = build_scene(cfg, law, answer_idx, &mut rng);
        let mut flat = Vec::with_capacity(cfg.n_objects * cfg.n_features);
        for o in &scene {
            flat.extend(encode_object(cfg, o.ty, o.attr, &mut rng));
        }
        let human_fi = annotate(cfg, &scene, &mut rng);
        out.push(Instance {
            id,
            objects: Array2::from_shape_vec((cfg.n_objects, cfg.n_features), flat)
                .expect("scene has n_objects rows"),
            question: law.group.encode(cfg),
            question_type: gid,
            label: law.answers[answer_idx],
            important: scene.iter().map(|o| o.important).collect(),
            human_fi,
            split: Split::Train,
        });
    }
    Ok(out)
}

/// Ratios and optional size caps for the four splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train : Dev : Test-ID proportions inside the ID pool.
    pub id_ratios: [f64; 3],
    /// Maximum sizes for Train, Dev, Test-ID, Test-OOD.
    pub caps: Option<[usize; 4]>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            id_ratios: [6.0, 1.0, 1.5],
            caps: Some([8000, 1000, 1500, 1500]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAllocation {
    pub size: usize,
    pub id_count: usize,
    pub id_major: bool,
}

/// Split label per instance plus the group-level allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub assignment: Vec<Split>,
    pub groups: BTreeMap<usize, GroupAllocation>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn count(&self, split: Split) -> usize {
        self.assignment.iter().filter(|&&s| s == split).count()
    }

    /// Indices kept after capping each split, in original order.
    pub fn downsample(&self, caps: [usize; 4]) -> Vec<usize> {
        let mut rng = seeding::stream(self.seed, "downsample");
        let mut keep = vec![false; self.assignment.len()];
        for (split, cap) in Split::ALL.iter().zip(caps) {
            let mut idx: Vec<usize> = (0..self.assignment.len())
                .filter(|&i| self.assignment[i] == *split)
                .collect();
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(cap) {
                keep[i] = true;
            }
        }
        (0..keep.len()).filter(|&i| keep[i]).collect()
    }
}

/// Changing-prior shift: each question group goes 80/20 (or 20/80) to the
/// ID and OOD pools; the ID pool is split into Train/Dev/Test-ID.
pub fn apply_shift_split(instances: &[Instance], cfg: &SplitConfig, seed: u64) -> Result<SplitSpec> {
    if cfg.id_ratios.iter().any(|r| !(*r >= 0.0)) || cfg.id_ratios.iter().sum::<f64>() <= 0.0 {
        return Err(config("id_ratios must be nonnegative with a positive sum"));
    }
    let mut rng = seeding::stream(seed, "shift-split");
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_group.entry(inst.question_type).or_default().push(i);
    }
    let mut assignment = vec![Split::TestOod; instances.len()];
    let mut groups = BTreeMap::new();
    let mut id_pool = Vec::new();
    for (gid, mut members) in by_group {
        members.shuffle(&mut rng);
        let id_major = rng.random::<bool>();
        let share = if id_major { 0.8 } else { 0.2 };
        let n = members.len();
        let id_count = if n < 5 {
            (share * n as f64).ceil() as usize
        } else {
            (share * n as f64).round() as usize
        };
        id_pool.extend_from_slice(&members[..id_count]);
        groups.insert(gid, GroupAllocation { size: n, id_count, id_major });
    }
    id_pool.sort_unstable();
    id_pool.shuffle(&mut rng);
    let total: f64 = cfg.id_ratios.iter().sum();
    let n = id_pool.len();
    let n_train = (n as f64 * cfg.id_ratios[0] / total).round() as usize;
    let n_dev = ((n as f64 * cfg.id_ratios[1] / total).round() as usize).min(n - n_train);
    for (rank, &i) in id_pool.iter().enumerate() {
        assignment[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::TestId
        };
    }
    Ok(SplitSpec { assignment, groups, seed })
}

/// A labelled dataset ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub n_answers: usize,
    pub tau: f64,
}

impl Dataset {
    /// Generate, shift-split and cap.
    pub fn build(gen: &GeneratorConfig, split: &SplitConfig, tau: f64, seed: u64, split_seed: u64) -> Result<Self> {
        check_tau(tau)?;
        let raw = generate_dataset(gen, seed)?;
        let spec = apply_shift_split(&raw, split, split_seed)?;
        let keep = match split.caps {
            Some(caps) => spec.downsample(caps),
            None => (0..raw.len()).collect(),
        };
        let mut instances = Vec::with_capacity(keep.len());
        let mut raw: Vec<Option<Instance>> = raw.into_iter().map(Some).collect();
        for i in keep {
            let mut inst = raw[i].take().expect("each index kept once");
            inst.split = spec.assignment[i];
            inst.set_threshold(tau);
            instances.push(inst);
        }
        Ok(Self {
            instances,
            n_answers: gen.n_answers(),
            tau,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn n_objects(&self) -> usize {
        self.instances.first().map_or(0, Instance::n_objects)
    }

    pub fn n_features(&self) -> usize {
        self.instances.first().map_or(0, |i| i.objects.ncols())
    }

    pub fn question_dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.question.len())
    }

    /// Re-binarize every instance at a new threshold.
    pub fn with_threshold(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let mut out = self.clone();
        out.tau = tau;
        for inst in &mut out.instances {
            inst.set_threshold(tau);
        }
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut w, &InstanceRecord::from_instance(inst))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, n_answers: usize, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let mut instances = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: InstanceRecord = serde_json::from_str(&line)?;
            instances.push(record.into_instance(tau)?);
        }
        Ok(Self { instances, n_answers, tau })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(config(format!("threshold {tau} must lie in (0, 1)")))
    }
}
