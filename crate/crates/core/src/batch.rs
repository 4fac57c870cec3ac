//! Stacked instances and perturbed copies of them.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{contract, Result};
use crate::replace::{replace, BatchContext, ReplaceKind};
use crate::synthdata::Instance;

/// Human FI of a batch, either the annotations or a frozen random control.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    /// `B × n` continuous scores.
    pub human_fi: Array2<f64>,
    /// `B·n` binarized mask.
    pub important: Vec<bool>,
    /// Per instance: any important object.
    pub eligible: Vec<bool>,
}

impl Supervision {
    pub fn mask(&self, b: usize) -> &[bool] {
        let n = self.human_fi.ncols();
        &self.important[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B·n) × d`, instance-major.
    pub objects: Array2<f64>,
    /// `B × q`.
    pub questions: Array2<f64>,
    pub n_objects: usize,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub supervision: Supervision,
    /// Frozen random permutation of the supervision, when in use.
    pub random_supervision: Option<Supervision>,
}

impl Batch {
    pub fn from_instances(instances: &[&Instance]) -> Result<Self> {
        let first = instances.first().ok_or_else(|| contract("empty batch"))?;
        let (n, d) = first.objects.dim();
        let q = first.question.len();
        let b = instances.len();
        let mut objects = Array2::zeros((b * n, d));
        let mut questions = Array2::zeros((b, q));
        let mut human_fi = Array2::zeros((b, n));
        let mut important = Vec::with_capacity(b * n);
        for (i, inst) in instances.iter().enumerate() {
            if inst.objects.dim() != (n, d) || inst.question.len() != q || inst.human_fi.len() != n {
                return Err(contract(format!("instance {} does not match the batch shape", inst.id)));
            }
            if inst.objects.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!("instance {} has non-finite features", inst.id)));
            }
            objects.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&inst.objects);
            for (j, v) in inst.question.iter().enumerate() {
                questions[[i, j]] = *v;
            }
            for (j, v) in inst.human_fi.iter().enumerate() {
                human_fi[[i, j]] = *v;
            }
            important.extend_from_slice(&inst.important);
        }
        let eligible = instances.iter().map(|i| i.eligible()).collect();
        Ok(Self {
            objects,
            questions,
            n_objects: n,
            labels: instances.iter().map(|i| i.label).collect(),
            ids: instances.iter().map(|i| i.id).collect(),
            supervision: Supervision { human_fi, important, eligible },
            random_supervision: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn instance(&self, b: usize) -> ArrayView2<'_, f64> {
        let n = self.n_objects;
        self.objects.slice(s![b * n..(b + 1) * n, ..])
    }

    pub fn context(&self) -> BatchContext<'_> {
        BatchContext::new(self.objects.view(), self.n_objects).expect("batch is nonempty")
    }

    /// Builds one perturbed copy per request `(instance, keep mask)`.
    /// Returns stacked objects and the matching questions.
    pub fn masked<R: Rng + ?Sized>(
        &self,
        requests: &[(usize, Vec<bool>)],
        kind: ReplaceKind,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = self.n_objects;
        let d = self.objects.ncols();
        let ctx = self.context();
        let mut objects = Array2::zeros((requests.len() * n, d));
        let mut questions = Array2::zeros((requests.len(), self.questions.ncols()));
        for (r, (b, keep)) in requests.iter().enumerate() {
            let x = replace(self.instance(*b), keep, kind, Some((&ctx, *b)), rng)?;
            objects.slice_mut(s![r * n..(r + 1) * n, ..]).assign(&x);
            questions.row_mut(r).assign(&self.questions.row(*b));
        }
        Ok((objects, questions))
    }
}
