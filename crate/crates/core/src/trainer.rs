//! Optimization loop: mixture cross-entropy, Adam, staircase learning
//! rate decay, optional early stopping and encoder transfer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{batch_iter, Dataset};
use crate::encoder::PATCH_EMBED_PREFIX;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::params::ParamStore;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    /// `base · rate^⌊(epoch − 1) / steps⌋`
    Staircase,
    /// Multiplies the running rate by `rate^(epoch / steps)` after every
    /// epoch.
    Compounding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_steps: usize,
    pub decay_rate: f64,
    pub decay: DecaySchedule,
    /// Enables early stopping on a held-out split of the training data.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            decay_steps: 5,
            decay_rate: 0.9,
            decay: DecaySchedule::Staircase,
            patience: None,
            val_fraction: 0.2,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("train.decay_rate must be in (0, 1]");
        }
        if self.decay_steps == 0 {
            return bad("train.decay_steps must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("train.val_fraction must be in (0, 1)");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("train.clip_norm must be positive");
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = epoch.max(1) as f64;
    let steps = cfg.decay_steps as f64;
    match cfg.decay {
        DecaySchedule::Staircase => {
            cfg.learning_rate * cfg.decay_rate.powi(((epoch.max(1) - 1) / cfg.decay_steps) as i32)
        }
        DecaySchedule::Compounding => cfg.learning_rate * cfg.decay_rate.powf((e - 1.0) * e / (2.0 * steps)),
    }
}

/// Mean negative log-probability of the true class, probabilities
/// floored at [`PROB_FLOOR`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.select_per_row(probs, labels)?;
    let floored = tape.clamp(picked, PROB_FLOOR, f64::INFINITY);
    let logp = tape.log(floored)?;
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update from the accumulated gradients, which
    /// are cleared afterwards. Nothing is modified if any gradient is NaN.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, name, t) in store.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|v| v.is_nan())) {
                return Err(Error::NumericAbort(format!("NaN gradient in {name}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, _, t) in store.iter_mut() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, _, t) in store.iter_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (0 = the initial parameters).
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

const EVAL_BATCH: usize = 64;

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    let m = model.config.num_classes;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut loss = 0.0;
    for batch in batch_iter(ds, EVAL_BATCH, 0, false)? {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, batch.x)?;
        let ce = cross_entropy(&mut tape, f.probs, &batch.y)?;
        loss += tape.value(ce).item() * batch.y.len() as f64;
        predictions.extend(tape.data(f.probs).chunks(m).map(argmax));
    }
    let labels = ds.labels();
    let mut hits = vec![0usize; m];
    let mut counts = vec![0usize; m];
    for (&p, &y) in predictions.iter().zip(&labels) {
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let n = ds.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / n,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        mean_loss: loss / n,
        predictions,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64
}

/// Trains in place. With `val`, the parameters with the best validation
/// accuracy (starting from the untrained ones) are restored at the end
/// and `patience` stops training after that many non-improving epochs.
pub fn train(model: &mut Model, train_ds: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let m = model.config.num_classes;
    let mut adam = Adam::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = match val {
        Some(v) => Some((evaluate(model, v)?.accuracy, 0usize, model.store.clone())),
        None => None,
    };
    let mut waited = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, batch) in batch_iter(train_ds, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?.enumerate() {
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, batch.x)?;
            let loss = cross_entropy(&mut tape, f.probs, &batch.y)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NumericAbort(format!("loss is {lv} at epoch {epoch}, batch {b}")));
            }
            loss_sum += lv * batch.y.len() as f64;
            hits += tape
                .data(f.probs)
                .chunks(m)
                .zip(&batch.y)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            tape.backward(loss, &mut model.store)?;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut model.store, c);
            }
            adam.step(&mut model.store, lr)?;
        }
        let n = train_ds.len() as f64;
        let val_acc = match val {
            Some(v) => Some(evaluate(model, v)?.accuracy),
            None => None,
        };
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_acc,
        });
        if let (Some(acc), Some((best_acc, best_epoch, snapshot))) = (val_acc, best.as_mut()) {
            if acc > *best_acc {
                *best_acc = acc;
                *best_epoch = epoch;
                *snapshot = model.store.clone();
                waited = 0;
            } else {
                waited += 1;
                if cfg.patience.is_some_and(|p| waited > p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_val, best_epoch) = match best {
        Some((acc, epoch, snapshot)) => {
            model.store = snapshot;
            (Some(acc), epoch)
        }
        None => (None, history.len()),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
        stopped_early,
    })
}

/// Trains on `train_ds`, holding out a stratified validation split when
/// early stopping is enabled.
pub fn fit(model: &mut Model, train_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.patience.is_some() {
        let (kept, held) = train_ds.stratified_split(cfg.val_fraction, cfg.seed);
        train(model, &kept, Some(&held), cfg)
    } else {
        train(model, train_ds, None, cfg)
    }
}

/// Copies every encoder tensor except the input embedding from `source`.
/// All shapes are checked before anything is written, so `target` is
/// untouched on error. Returns the names copied.
pub fn transfer_encoder(target: &mut Model, source: &ParamStore) -> Result<Vec<String>> {
    let wanted: Vec<(String, Vec<usize>)> = target
        .store
        .iter()
        .filter(|(_, name, _)| name.starts_with("encoder.") && !name.starts_with(PATCH_EMBED_PREFIX))
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
        .collect();
    let mut problems = Vec::new();
    for (name, shape) in &wanted {
        match source.by_name(name) {
            None => problems.push(format!("{name} missing")),
            Some(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))
            }
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Transfer(problems.join("; ")));
    }
    for (name, _) in &wanted {
        let src = source.by_name(name).unwrap().data().to_vec();
        let id = target.store.id(name).unwrap();
        target.store.get_mut(id).data_mut().copy_from_slice(&src);
    }
    Ok(wanted.into_iter().map(|(n, _)| n).collect())
}

/// Starts from a pretrained encoder (input embedding and tree freshly
/// initialized in `model`) and trains on `train_ds`.
pub fn fine_tune(model: &mut Model, pretrained: &ParamStore, train_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    transfer_encoder(model, pretrained)?;
    fit(model, train_ds, cfg)
}
