//! Adam on the batch-mean BCE loss, with held-out evaluation each epoch.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{LongerModel, TrainConfig};
use crate::analysis::{auc, logloss};
use crate::error::{Error, Result};
use crate::inputs::Sample;
use crate::rng::substream;
use crate::tensors::{sigmoid, NodeId, ParamStore, Tape, Tensor};

/// `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// A model that produces a logit for a sample on a tape over its own
/// parameter store.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn logit_node(&self, tape: &mut Tape, sample: &Sample) -> Result<NodeId>;

    fn predict_one(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new(self.store());
        let z = self.logit_node(&mut tape, sample)?;
        Ok(sigmoid(tape.value(z).data()[0]))
    }

    fn predict_all(&self, data: &[Sample]) -> Result<Vec<f64>> {
        data.iter().map(|s| self.predict_one(s)).collect()
    }
}

impl Trainable for LongerModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logit_node(&self, tape: &mut Tape, sample: &Sample) -> Result<NodeId> {
        self.logit_on(tape, sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Held-out metrics; `None` when the held-out set cannot define them.
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_default();
        let mut s = String::from("epoch,loss,auc,logloss\n");
        for e in &self.epochs {
            writeln!(s, "{},{:.6},{},{}", e.epoch, e.loss, opt(e.auc), opt(e.logloss)).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        store.bump_version();
    }
}

/// Loss and dense parameter gradients for one sample.
pub fn loss_and_grads<M: Trainable + ?Sized>(model: &M, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(model.store());
    let z = model.logit_node(&mut tape, sample)?;
    let loss = tape.bce_with_logit(z, f64::from(sample.label))?;
    let l = tape.value(loss).data()[0];
    let grads = tape.backward(loss).into_param_grads(model.store());
    Ok((l, grads))
}

/// Held-out AUC and LogLoss, `None` where undefined.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, data: &[Sample]) -> Result<(Option<f64>, Option<f64>)> {
    if data.is_empty() {
        return Ok((None, None));
    }
    let scores = model.predict_all(data)?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let a = auc(&scores, &labels).ok();
    let l = logloss(&scores, &labels).ok();
    Ok((a, l))
}

/// Trains in place for `cfg.epochs` epochs and evaluates on `held_out`
/// after each one. Shuffling is seeded by `cfg.seed`.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    data: &[Sample],
    held_out: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(model.store());
    let mut report = TrainingReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, &format!("train/shuffle/{}", epoch));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = loss_and_grads(model, &data[i])?;
                loss += l;
                match &mut sum {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    None => sum = Some(g),
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {} at epoch {} step {}",
                    loss, epoch, report.steps
                )));
            }
            let mut grads = sum.expect("non-empty batch");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            adam.step(model.store_mut(), &grads, cfg);
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        let (a, l) = evaluate(&*model, held_out)?;
        report.epochs.push(EpochStats {
            epoch,
            loss: epoch_loss / batches as f64,
            auc: a,
            logloss: l,
        });
    }
    Ok(report)
}
