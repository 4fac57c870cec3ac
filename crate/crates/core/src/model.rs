//! Attention classifier over `(objects, question)` and the network trait
//! shared with the reference models used in tests.
//!
//! Shapes: a batch of `B` instances with `n` objects each enters as a
//! `(B·n) × d` object matrix and a `B × q` question matrix. Networks return
//! `B × C` logits and, when they have one, `B × n` attention weights.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use fisup_autodiff::{Graph, Tensor, Var};

use crate::error::{contract, Result};
use crate::seeding;

pub struct NetOutput<'g> {
    pub logits: Var<'g>,
    pub attention: Option<Var<'g>>,
}

/// A differentiable classifier with an explicit parameter list.
pub trait Network {
    fn n_classes(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn param_names(&self) -> Vec<String>;
    /// Forward pass over parameters already bound in the graph.
    fn forward<'g>(
        &self,
        params: &[Var<'g>],
        objects: Var<'g>,
        questions: Var<'g>,
        n_objects: usize,
    ) -> Result<NetOutput<'g>>;
}

/// Binds the parameters as leaves (`trainable`) or constants.
pub fn bind_params<'g, N: Network + ?Sized>(g: &'g Graph, net: &N, trainable: bool) -> Vec<Var<'g>> {
    net.params()
        .iter()
        .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
        .collect()
}

/// Normalized output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted: usize,
}

impl AnswerDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        Self {
            probs: exp.iter().map(|e| e / z).collect(),
            logits: logits.to_vec(),
            predicted: argmax(logits),
        }
    }
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let z = row.sum();
        row.mapv_inplace(|e| e / z);
    }
    out
}

/// Instances per graph in value-only evaluation.
const CHUNK: usize = 256;

/// Logits (and attention, when present) for stacked inputs, no gradients.
pub fn forward_values<N: Network + ?Sized>(
    net: &N,
    objects: &Array2<f64>,
    questions: &Array2<f64>,
    n_objects: usize,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let b = questions.nrows();
    if objects.nrows() != b * n_objects {
        return Err(contract("objects and questions disagree on the batch size"));
    }
    if objects.iter().chain(questions.iter()).any(|v| v.is_nan()) {
        return Err(contract("NaN in model inputs"));
    }
    let mut logits = Array2::zeros((b, net.n_classes()));
    let mut attention: Option<Array2<f64>> = None;
    let mut start = 0;
    while start < b {
        let end = (start + CHUNK).min(b);
        let g = Graph::new();
        let params = bind_params(&g, net, false);
        let o = g.constant(objects.slice(ndarray::s![start * n_objects..end * n_objects, ..]).to_owned());
        let q = g.constant(questions.slice(ndarray::s![start..end, ..]).to_owned());
        let out = net.forward(&params, o, q, n_objects)?;
        logits.slice_mut(ndarray::s![start..end, ..]).assign(&*out.logits.value());
        if let Some(a) = out.attention {
            let att = attention.get_or_insert_with(|| Array2::zeros((b, n_objects)));
            att.slice_mut(ndarray::s![start..end, ..]).assign(&*a.value());
        }
        start = end;
    }
    Ok((logits, attention))
}

/// Answer distribution and attention for a single instance.
pub fn forward<N: Network + ?Sized>(
    net: &N,
    objects: &Array2<f64>,
    question: &[f64],
) -> Result<(AnswerDistribution, Option<Vec<f64>>)> {
    let q = Array2::from_shape_vec((1, question.len()), question.to_vec()).expect("row vector");
    let (logits, att) = forward_values(net, objects, &q, objects.nrows())?;
    let dist = AnswerDistribution::from_logits(logits.row(0).as_slice().expect("contiguous"));
    Ok((dist, att.map(|a| a.row(0).to_vec())))
}

pub fn predict<N: Network + ?Sized>(net: &N, objects: &Array2<f64>, question: &[f64]) -> Result<usize> {
    Ok(forward(net, objects, question)?.0.predicted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_features: usize,
    pub question_dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
}

const PARAM_NAMES: [&str; 11] = [
    "att_obj", "att_q", "att_b", "att_out", "q_proj", "q_b", "cls_pooled", "cls_q", "cls_b", "out_w", "out_b",
];

/// Attention over objects conditioned on the question, then a two-layer
/// head on `[pooled objects ; question projection]`.
///
/// ```text
/// a_k  = softmax_k( tanh(x_k W_ao + q W_aq + b_a) w )
/// v    = Σ_k a_k x_k
/// h    = tanh( v W_cp + tanh(q W_q + b_q) W_cq + b_c )
/// out  = h W_o + b_o
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClassifier {
    pub config: ModelConfig,
    params: Vec<Tensor>,
}

impl AttentionClassifier {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let ModelConfig { n_features: d, question_dim: q, n_classes: c, hidden: h } = config;
        if d == 0 || q == 0 || c < 2 || h == 0 {
            return Err(crate::error::config("model dimensions must be positive with at least 2 classes"));
        }
        let mut rng = seeding::stream(seed, "model-init");
        let mut glorot = |r: usize, cols: usize| {
            let a = (6.0 / (r + cols) as f64).sqrt();
            Tensor::from_shape_fn((r, cols), |_| rng.random_range(-a..a))
        };
        let params = vec![
            glorot(d, h),
            glorot(q, h),
            Tensor::zeros((1, h)),
            glorot(h, 1),
            glorot(q, h),
            Tensor::zeros((1, h)),
            glorot(d, h),
            glorot(h, h),
            Tensor::zeros((1, h)),
            glorot(h, c),
            Tensor::zeros((1, c)),
        ];
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let expected = Self::new(config, 0)?;
        if params.len() != expected.params.len()
            || params.iter().zip(&expected.params).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(contract("parameter shapes do not match the model config"));
        }
        if params.iter().flat_map(|p| p.iter()).any(|v| !v.is_finite()) {
            return Err(contract("non-finite parameter"));
        }
        Ok(Self { config, params })
    }
}

impl Network for AttentionClassifier {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn forward<'g>(
        &self,
        p: &[Var<'g>],
        objects: Var<'g>,
        questions: Var<'g>,
        n: usize,
    ) -> Result<NetOutput<'g>> {
        let b = questions.shape().0;
        let [att_obj, att_q, att_b, att_out, q_proj, q_b, cls_pooled, cls_q, cls_b, out_w, out_b] =
            p else {
            return Err(contract("attention classifier expects 11 parameters"));
        };
        let hidden = objects
            .matmul(*att_obj)?
            .add(questions.matmul(*att_q)?.repeat_rows(n))?
            .add(*att_b)?
            .tanh();
        let attention = hidden.matmul(*att_out)?.reshape(b, n)?.softmax_rows();
        let pooled = objects.mul(attention.reshape(b * n, 1)?)?.group_sum_rows(n)?;
        let qp = questions.matmul(*q_proj)?.add(*q_b)?.tanh();
        let h = pooled
            .matmul(*cls_pooled)?
            .add(qp.matmul(*cls_q)?)?
            .add(*cls_b)?
            .tanh();
        let logits = h.matmul(*out_w)?.add(*out_b)?;
        Ok(NetOutput { logits, attention: Some(attention) })
    }
}

/// `logit_c = Σ_{k,j} W_c[k, j] x[k, j] + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNetwork {
    /// One `n × d` weight per class, then a `1 × C` bias.
    params: Vec<Tensor>,
}

impl LinearNetwork {
    pub fn new(weights: Vec<Tensor>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != bias.len() || weights.is_empty() {
            return Err(contract("one weight matrix per class"));
        }
        let c = bias.len();
        let mut params = weights;
        params.push(Tensor::from_shape_vec((1, c), bias).expect("row"));
        Ok(Self { params })
    }

    pub fn weight(&self, class: usize) -> &Tensor {
        &self.params[class]
    }
}

impl Network for LinearNetwork {
    fn n_classes(&self) -> usize {
        self.params.len() - 1
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.n_classes()).map(|c| format!("w{c}")).chain(["b".to_string()]).collect()
    }

    fn forward<'g>(
        &self,
        p: &[Var<'g>],
        objects: Var<'g>,
        questions: Var<'g>,
        n: usize,
    ) -> Result<NetOutput<'g>> {
        let b = questions.shape().0;
        let d = objects.shape().1;
        let c = self.n_classes();
        let mut cols = Vec::with_capacity(c);
        for w in &p[..c] {
            let tiled = w.reshape(1, n * d)?.repeat_rows(b).reshape(b * n, d)?;
            cols.push(objects.mul(tiled)?.sum_cols().reshape(b, n)?.sum_cols());
        }
        // Assemble B × C from the per-class columns.
        let g = objects.graph();
        let mut logits = g.zeros(b, c);
        for (k, col) in cols.into_iter().enumerate() {
            let mut e = Tensor::zeros((1, c));
            e[[0, k]] = 1.0;
            logits = logits.add(col.matmul(g.constant(e))?)?;
        }
        let logits = logits.add(p[c])?;
        Ok(NetOutput { logits, attention: None })
    }
}

/// Ignores its input: `logits = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantNetwork {
    params: Vec<Tensor>,
}

impl ConstantNetwork {
    pub fn new(logits: Vec<f64>) -> Self {
        let c = logits.len();
        Self { params: vec![Tensor::from_shape_vec((1, c), logits).expect("row")] }
    }
}

impl Network for ConstantNetwork {
    fn n_classes(&self) -> usize {
        self.params[0].ncols()
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        vec!["b".into()]
    }

    fn forward<'g>(
        &self,
        p: &[Var<'g>],
        objects: Var<'g>,
        questions: Var<'g>,
        _n: usize,
    ) -> Result<NetOutput<'g>> {
        let b = questions.shape().0;
        // Touch the input with a zero weight so gradients w.r.t. it exist.
        let zero = objects.sum().scale(0.0);
        let logits = p[0].broadcast_to(b, self.n_classes())?.add(zero)?;
        Ok(NetOutput { logits, attention: None })
    }
}

/// Serialized parameters: named arrays with shapes and the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub model: ModelConfig,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "fisup-checkpoint-v1";

impl Checkpoint {
    pub fn from_model(model: &AttentionClassifier, config_hash: &str) -> Self {
        let params = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, t)| NamedArray {
                name,
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: config_hash.into(),
            model: model.config,
            params,
        }
    }

    pub fn to_model(&self) -> Result<AttentionClassifier> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(contract(format!("unknown checkpoint format {}", self.format)));
        }
        let names: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        if self.params.iter().map(|p| &p.name).ne(names.iter()) {
            return Err(contract("checkpoint parameter names do not match"));
        }
        let tensors = self
            .params
            .iter()
            .map(|p| {
                Tensor::from_shape_vec((p.shape[0], p.shape[1]), p.data.clone())
                    .map_err(|_| contract(format!("bad shape for {}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        AttentionClassifier::from_params(self.model, tensors)
    }
}
