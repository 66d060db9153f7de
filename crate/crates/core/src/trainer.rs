//! Linear head training with the outlier-exposure objective.
//!
//! The objective per optimizer step is
//! `mean CE(f(x), y) over the ID batch + λ · mean OE(f(s)) over the outlier batch`
//! where `OE(z) = -(1/C) Σ_c log softmax_c(z)`, i.e. cross-entropy to the
//! uniform distribution (`log C + KL(U || softmax(z))`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{self, EmbeddingSet, RowMeta};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, softmax_into};
use crate::outlier_pipeline::{OutlierSet, DEFAULT_NOISE_VARIANCE};
use crate::par;
use crate::rng;

/// Std of the Gaussian used to initialise weights.
pub const INIT_STD: f64 = 0.01;

/// `C x dim` weights plus a `C` bias, stored as one flat parameter vector
/// (weights row-major, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    params: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearHead { classes, dim, params: vec![0.0; classes * dim + classes] }
    }

    /// Weights from `N(0, INIT_STD²)`, zero bias.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut head = Self::zeros(classes, dim);
        for w in head.weights_mut() {
            *w = normal.sample(&mut r);
        }
        head
    }

    pub fn from_parts(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::Shape(format!(
                "{} weights and {} biases for a {classes}x{dim} head",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Param("head parameters must be finite".into()));
        }
        let mut params = weights;
        params.extend(bias);
        Ok(LinearHead { classes, dim, params })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.classes * self.dim]
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        let n = self.classes * self.dim;
        &mut self.params[..n]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.dim..]
    }

    pub fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        let (w, b) = self.params.split_at(self.classes * self.dim);
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * self.dim..(c + 1) * self.dim];
            *o = b[c] + row.iter().zip(x).map(|(w, &x)| w * x as f64).sum::<f64>();
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        self.logits_into(x, &mut out);
        out
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    /// Weights as an EMB1 file at `path` (one row per class, stored as f32)
    /// and the bias in `<path>.head.json`.
    pub fn save(&self, path: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let data = self.weights().iter().map(|&v| v as f32).collect();
        let mut set = EmbeddingSet::new(self.dim, data)?;
        if class_names.len() == self.classes {
            let meta = class_names
                .iter()
                .enumerate()
                .map(|(i, n)| RowMeta { row: i as u64, class_name: Some(n.clone()), ..Default::default() })
                .collect();
            set = set.with_meta(meta)?;
        }
        embedstore::save(&set, path)?;
        let side = HeadSidecar { classes: self.classes, dim: self.dim, bias: self.bias().to_vec() };
        let sp = head_sidecar_path(path);
        fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let set = embedstore::load(path)?;
        let sp = head_sidecar_path(path);
        let bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: HeadSidecar = serde_json::from_slice(&bytes)?;
        if side.classes != set.count() || side.dim != set.dim() {
            return Err(Error::Shape("head sidecar disagrees with weights file".into()));
        }
        Self::from_parts(side.classes, side.dim, set.data().iter().map(|&v| v as f64).collect(), side.bias)
    }

    /// The same head with every weight and bias rounded through `f32`, i.e.
    /// exactly what [`LinearHead::save`] followed by `load` yields for the
    /// weights.
    pub fn rounded_weights(&self) -> Self {
        let mut h = self.clone();
        for w in h.weights_mut() {
            *w = *w as f32 as f64;
        }
        h
    }
}

#[derive(Serialize, Deserialize)]
struct HeadSidecar {
    classes: usize,
    dim: usize,
    bias: Vec<f64>,
}

pub fn head_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".head.json");
    PathBuf::from(s)
}

/// Cross-entropy to the uniform distribution over classes.
pub fn oe_loss(logits: &[f64]) -> f64 {
    let c = logits.len() as f64;
    log_sum_exp(logits) - logits.iter().sum::<f64>() / c
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Borrowed view of a labeled minibatch.
#[derive(Debug, Clone, Copy)]
pub struct IdBatch<'a> {
    pub rows: &'a [&'a [f32]],
    pub labels: &'a [u32],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean cross-entropy over the ID batch.
    pub ce: f64,
    /// Mean OE loss over the outlier batch (0 when empty).
    pub oe: f64,
    pub total: f64,
}

/// Value of the training objective on one pair of batches.
pub fn total_loss(head: &LinearHead, id: IdBatch<'_>, oe_rows: &[&[f32]], lambda: f64) -> f64 {
    loss_parts(head, id, oe_rows, lambda, None).total
}

/// Objective value and its exact gradient with respect to
/// [`LinearHead::params`].
pub fn loss_and_grad(head: &LinearHead, id: IdBatch<'_>, oe_rows: &[&[f32]], lambda: f64) -> (LossParts, Vec<f64>) {
    let mut grad = vec![0.0; head.params.len()];
    let parts = loss_parts(head, id, oe_rows, lambda, Some(&mut grad));
    (parts, grad)
}

fn loss_parts(
    head: &LinearHead,
    id: IdBatch<'_>,
    oe_rows: &[&[f32]],
    lambda: f64,
    mut grad: Option<&mut Vec<f64>>,
) -> LossParts {
    let c = head.classes;
    let dim = head.dim;
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];

    let accumulate = |x: &[f32], g: &[f64], grad: &mut Vec<f64>| {
        let (gw, gb) = grad.split_at_mut(c * dim);
        for k in 0..c {
            let gk = g[k];
            if gk == 0.0 {
                continue;
            }
            for (w, &xv) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *w += gk * xv as f64;
            }
            gb[k] += gk;
        }
    };

    let mut ce_sum = 0.0;
    let n_id = id.rows.len();
    for (x, &y) in id.rows.iter().zip(id.labels) {
        head.logits_into(x, &mut z);
        ce_sum += cross_entropy(&z, y as usize);
        if let Some(grad) = grad.as_deref_mut() {
            softmax_into(&z, &mut p);
            p[y as usize] -= 1.0;
            for v in p.iter_mut() {
                *v /= n_id as f64;
            }
            accumulate(x, &p, grad);
        }
    }

    let mut oe_sum = 0.0;
    let n_oe = oe_rows.len();
    for x in oe_rows {
        head.logits_into(x, &mut z);
        oe_sum += oe_loss(&z);
        if lambda != 0.0 {
            if let Some(grad) = grad.as_deref_mut() {
                softmax_into(&z, &mut p);
                let scale = lambda / n_oe as f64;
                for v in p.iter_mut() {
                    *v = (*v - 1.0 / c as f64) * scale;
                }
                accumulate(x, &p, grad);
            }
        }
    }

    let ce = if n_id > 0 { ce_sum / n_id as f64 } else { 0.0 };
    let oe = if n_oe > 0 { oe_sum / n_oe as f64 } else { 0.0 };
    LossParts { ce, oe, total: ce + lambda * oe }
}

/// Fraction of rows whose argmax logit (lowest class on ties) equals the label.
pub fn accuracy(head: &LinearHead, set: &EmbeddingSet) -> Result<f64> {
    let labels = set.require_labels()?;
    if set.is_empty() {
        return Err(Error::Param("accuracy of an empty set".into()));
    }
    if set.dim() != head.dim {
        return Err(Error::Shape(format!("set has dim {}, head has dim {}", set.dim(), head.dim)));
    }
    let preds = par::map_rows(set.data(), set.dim(), |r| head.predict(r));
    let hits = preds.iter().zip(labels).filter(|(&p, &y)| p == y as usize).count();
    Ok(hits as f64 / set.count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_id: usize,
    pub batch_oe: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub noise_variance: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            epochs: 300,
            batch_id: 32,
            batch_oe: 32,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_id < 1 || self.batch_oe < 1 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be > 0");
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return bad("noise variance must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub oe_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned: highest validation accuracy,
    /// earliest on ties.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainRecord {
    /// `epoch,ce_loss,oe_loss,val_acc` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,ce_loss,oe_loss,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.ce_loss, e.oe_loss, e.val_acc));
        }
        s
    }
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam { lr, beta1: betas.0, beta2: betas.1, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Cycles through outlier indices in (re)shuffled passes.
struct OeStream {
    order: Vec<usize>,
    pos: usize,
    shuffle: bool,
    rng: rng::Rng,
}

impl OeStream {
    fn new(n: usize, shuffle: bool, mut rng: rng::Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        OeStream { order, pos: 0, shuffle, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pos = 0;
                if self.shuffle {
                    self.order.shuffle(&mut self.rng);
                }
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `head_init` with Adam for `cfg.epochs` epochs.
///
/// Each step pairs one ID minibatch with one outlier minibatch; the outlier
/// stream cycles (reshuffling at each wrap) when it is shorter than the ID
/// stream. Fresh noise is added to every outlier batch. Returns the
/// parameters of the best-validation epoch.
pub fn train(
    head_init: &LinearHead,
    id_train: &EmbeddingSet,
    id_val: &EmbeddingSet,
    outliers: &OutlierSet,
    cfg: &TrainConfig,
) -> Result<(LinearHead, TrainRecord)> {
    cfg.validate()?;
    let dim = head_init.dim;
    let oe = &outliers.embeddings;
    for (name, d) in [("id_train", id_train.dim()), ("id_val", id_val.dim())] {
        if d != dim {
            return Err(Error::Shape(format!("{name} has dim {d}, head has dim {dim}")));
        }
    }
    if !oe.is_empty() && oe.dim() != dim {
        return Err(Error::Shape(format!("outliers have dim {}, head has dim {dim}", oe.dim())));
    }
    if id_val.is_empty() {
        return Err(Error::Param("validation set is empty".into()));
    }
    if id_train.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    let labels = id_train.require_labels()?;
    id_val.require_labels()?;
    for (set, name) in [(id_train, "id_train"), (id_val, "id_val")] {
        if let Some(&l) = set.labels().unwrap().iter().find(|&&l| l as usize >= head_init.classes) {
            return Err(Error::Label(format!("{name} has label {l} but the head has {} classes", head_init.classes)));
        }
    }

    let mut shuffle_rng = rng::sub_rng(cfg.seed, "train/shuffle");
    let mut noise_rng = rng::sub_rng(cfg.seed, "train/noise");
    let mut oe_stream = OeStream::new(oe.count(), cfg.shuffle, rng::sub_rng(cfg.seed, "train/oe"));
    let noise = (cfg.noise_variance > 0.0).then(|| Normal::new(0.0, cfg.noise_variance.sqrt()).unwrap());

    let mut head = head_init.clone();
    let mut adam = Adam::new(head.params.len(), cfg.lr, cfg.adam_betas, cfg.adam_eps);
    let mut order: Vec<usize> = (0..id_train.count()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, LinearHead)> = None;
    let mut oe_buf: Vec<Vec<f32>> = Vec::new();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let (mut ce_sum, mut ce_n, mut oe_sum, mut oe_n) = (0.0, 0usize, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_id).enumerate() {
            let id_rows: Vec<&[f32]> = chunk.iter().map(|&i| id_train.row(i)).collect();
            let id_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();

            let picks = oe_stream.next_batch(cfg.batch_oe);
            oe_buf.clear();
            for &i in &picks {
                let mut row = oe.row(i).to_vec();
                if let Some(n) = &noise {
                    for v in row.iter_mut() {
                        *v = (*v as f64 + n.sample(&mut noise_rng)) as f32;
                    }
                }
                oe_buf.push(row);
            }
            let oe_rows: Vec<&[f32]> = oe_buf.iter().map(Vec::as_slice).collect();

            let batch = IdBatch { rows: &id_rows, labels: &id_labels };
            let (parts, grad) = loss_and_grad(&head, batch, &oe_rows, cfg.lambda);
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step });
            }
            ce_sum += parts.ce * id_rows.len() as f64;
            ce_n += id_rows.len();
            oe_sum += parts.oe * oe_rows.len() as f64;
            oe_n += oe_rows.len();
            adam.step(&mut head.params, &grad);
        }
        // heads are stored as f32
        if head.params.iter().any(|v| !v.is_finite() || v.abs() > f32::MAX as f64) {
            return Err(Error::Divergence { epoch, step: order.len().div_ceil(cfg.batch_id) });
        }
        let val_acc = accuracy(&head, id_val)?;
        let rec = EpochRecord {
            epoch,
            ce_loss: ce_sum / ce_n as f64,
            oe_loss: if oe_n > 0 { oe_sum / oe_n as f64 } else { 0.0 },
            val_acc,
        };
        log::debug!("epoch {epoch}: ce {:.5} oe {:.5} val {:.4}", rec.ce_loss, rec.oe_loss, val_acc);
        records.push(rec);
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, head.clone()));
        }
    }

    let (best_epoch, best_val_acc, best_head) = best.expect("at least one epoch");
    Ok((best_head, TrainRecord { epochs: records, best_epoch, best_val_acc }))
}

/// Random head of the given shape, for tests and benches.
pub fn random_head(classes: usize, dim: usize, scale: f64, r: &mut rng::Rng) -> LinearHead {
    let mut h = LinearHead::zeros(classes, dim);
    for p in h.params_mut() {
        *p = r.random_range(-scale..scale);
    }
    h
}
