//! Minibatch training with Adam and Dev-based model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use fisup_autodiff::{Graph, Tensor};

use crate::batch::Batch;
use crate::error::{config, Error, Result};
use crate::model::{argmax, bind_params, forward_values, AttentionClassifier, ModelConfig, Network};
use crate::objectives::{composite_loss, ObjectiveConfig, RandomSupervisionTable, Term};
use crate::seeding;
use crate::synthdata::{Dataset, Instance, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub preset: String,
    /// Dev evaluation every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seeds: (0..5).collect(),
            preset: "baseline".into(),
            eval_every: 1,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.hidden == 0 {
            return Err(config("epochs, batch_size, eval_every and hidden must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config("lr must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction and no schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean weighted value of each active term over the epoch's batches.
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub dev_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub preset: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub dev_trace: Vec<(usize, f64)>,
    /// Epoch (1-based) whose parameters were kept.
    pub selected_epoch: usize,
    pub best_dev_acc: f64,
    pub random_supervision_fingerprint: Option<u64>,
}

pub struct TrainedRun<N> {
    pub record: RunRecord,
    pub model: N,
}

/// Fraction of `instances` whose argmax prediction equals the label.
pub fn accuracy_of<N: Network + ?Sized>(net: &N, instances: &[&Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(crate::error::contract("accuracy of an empty split"));
    }
    let batch = Batch::from_instances(instances)?;
    let (logits, _) = forward_values(net, &batch.objects, &batch.questions, batch.n_objects)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &label)| argmax(row.as_slice().expect("contiguous")) == label)
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

/// Trains `net` in place and returns the best-Dev parameters.
pub fn train_network<N: Network + Clone>(
    mut net: N,
    train: &[&Instance],
    dev: &[&Instance],
    tcfg: &TrainConfig,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<TrainedRun<N>> {
    tcfg.validate()?;
    objective.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(config("training needs nonempty train and dev splits"));
    }
    let table = objective
        .needs_random_supervision()
        .then(|| RandomSupervisionTable::new(train, seed));
    let mut adam = Adam::new(tcfg.lr, net.params());
    let mut loss_rng = seeding::stream(seed, "objective");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, N)> = None;
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut dev_trace = Vec::new();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut seeding::indexed(seed, "epoch-order", epoch as u64));
        let mut sums: BTreeMap<Term, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let members: Vec<&Instance> = chunk.iter().map(|&i| train[i]).collect();
            let mut batch = Batch::from_instances(&members)?;
            if let Some(t) = &table {
                t.attach(&mut batch)?;
            }
            let g = Graph::new();
            let params = bind_params(&g, &net, true);
            let loss = composite_loss(&net, &params, &g, &batch, objective, &mut loss_rng)?;
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let grads: Vec<Tensor> = g
                .gradient(loss.total, &params, false)?
                .iter()
                .map(|v| (*v.value()).clone())
                .collect();
            if grads.iter().any(|t| t.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged { epoch, step });
            }
            adam.step(net.params_mut(), &grads);
            for (term, value) in loss.terms {
                *sums.entry(term).or_default() += value;
            }
            total_sum += total;
            steps += 1;
        }
        let scale = 1.0 / steps as f64;
        let dev_acc = if epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs {
            let acc = accuracy_of(&net, dev)?;
            dev_trace.push((epoch, acc));
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, net.clone()));
            }
            Some(acc)
        } else {
            None
        };
        log::debug!("epoch {epoch}: loss {:.5} dev {:?}", total_sum * scale, dev_acc);
        epochs.push(EpochLog {
            epoch,
            terms: sums.into_iter().map(|(t, v)| (t.name().to_string(), v * scale)).collect(),
            total: total_sum * scale,
            dev_acc,
        });
    }
    let (best_dev_acc, selected_epoch, model) = best.expect("the last epoch is always evaluated");
    Ok(TrainedRun {
        record: RunRecord {
            preset: tcfg.preset.clone(),
            seed,
            epochs,
            dev_trace,
            selected_epoch,
            best_dev_acc,
            random_supervision_fingerprint: table.map(|t| t.fingerprint()),
        },
        model,
    })
}

/// Builds a fresh classifier for `dataset` and trains it on Train, selecting on Dev.
pub fn train_run(
    dataset: &Dataset,
    tcfg: &TrainConfig,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<TrainedRun<AttentionClassifier>> {
    let model_cfg = ModelConfig {
        n_features: dataset.n_features(),
        question_dim: dataset.question_dim(),
        n_classes: dataset.n_answers,
        hidden: tcfg.hidden,
    };
    let net = AttentionClassifier::new(model_cfg, seeding::derive(seed, "model-init"))?;
    let train = dataset.split(Split::Train);
    let dev = dataset.split(Split::Dev);
    train_network(net, &train, &dev, tcfg, objective, seed)
}
