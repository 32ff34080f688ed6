//! Nadam optimization loop with early stopping, reduce-on-plateau learning
//! rate scheduling, and best-validation-loss checkpointing.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{batch_tensors, ImageSample, SplitDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{
    confusion_counts, dice_loss, mean_metrics, metrics, threshold, Metrics,
};
use crate::tensor::{Mode, NoGrad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f32,
    pub lr_reduce_patience: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Dice smoothing term.
    pub lambda: f32,
    /// Weight of auxiliary dice terms on the two intermediate masks; 0
    /// trains on the fused output alone.
    pub aux_weight: f32,
    pub threshold: f32,
    /// Log one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            max_epochs: 40,
            batch_size: 4,
            early_stop_patience: 5,
            lr_reduce_factor: 0.1,
            lr_reduce_patience: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 1.0,
            aux_weight: 0.0,
            threshold: 0.5,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lr_reduce_factor) || self.lr_reduce_factor == 0.0 {
            return Err(Error::Config("lr_reduce_factor must lie in (0,1)".into()));
        }
        if self.early_stop_patience < 1 || self.lr_reduce_patience < 1 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers, one pair per parameter.
pub struct NadamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl NadamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        NadamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Nesterov-Adam update over every parameter with a gradient:
/// update = -lr * (b1 * m_hat + (1-b1) * g / (1-b1^t)) / (sqrt(v_hat) + eps)
/// with m_hat = m / (1-b1^(t+1)) and v_hat = v / (1-b2^t).
pub fn nadam_step(
    params: &[(String, Tensor)],
    state: &mut NadamState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias1_next = 1.0 - beta1.powi(t + 1);
    let bias2 = 1.0 - beta2.powi(t);
    for (i, (name, p)) in params.iter().enumerate() {
        let Some(grad) = p.grad() else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut data = p.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bias1_next;
            let v_hat = v[j] / bias2;
            data[j] -= lr * (beta1 * m_hat + (1.0 - beta1) * g / bias1) / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_dsc: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index (0-based) of the epoch with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One record per epoch plus a summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tval_dsc\tlr\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.4}\t{:e}\n",
                i + 1,
                e.train_loss,
                e.val_loss,
                e.val_dsc,
                e.lr
            ));
        }
        if let Some(best) = self.epochs.get(self.best_epoch) {
            out.push_str(&format!(
                "best epoch {} val_loss {:.6} val_dsc {:.4}\n",
                self.best_epoch + 1,
                best.val_loss,
                best.val_dsc
            ));
        }
        out
    }
}

struct Snapshot {
    params: Vec<Vec<f32>>,
    stats: Vec<(Vec<f32>, Vec<f32>, bool)>,
}

fn take_snapshot(model: &Model) -> Snapshot {
    Snapshot {
        params: model.book().params.iter().map(|(_, p)| p.to_vec()).collect(),
        stats: model
            .book()
            .bn_stats
            .iter()
            .map(|(_, s)| {
                let s = s.borrow();
                (s.mean.clone(), s.var.clone(), s.initialized)
            })
            .collect(),
    }
}

fn restore_snapshot(model: &Model, snap: &Snapshot) {
    for ((_, p), saved) in model.book().params.iter().zip(&snap.params) {
        p.data_mut().copy_from_slice(saved);
        p.zero_grad();
    }
    for ((_, s), (mean, var, init)) in model.book().bn_stats.iter().zip(&snap.stats) {
        let mut s = s.borrow_mut();
        s.mean.copy_from_slice(mean);
        s.var.copy_from_slice(var);
        s.initialized = *init;
    }
}

fn batch_loss(model: &Model, images: &Tensor, masks: &Tensor, cfg: &TrainConfig, mode: Mode) -> Result<Tensor> {
    let outputs = model.forward(images, mode)?;
    let mut loss = dice_loss(&outputs.fused, masks, cfg.lambda)?;
    if cfg.aux_weight > 0.0 {
        let aux1 = dice_loss(&outputs.out1, masks, cfg.lambda)?;
        let aux2 = dice_loss(&outputs.out2, masks, cfg.lambda)?;
        let aux = crate::tensor::affine(&crate::tensor::add(&aux1, &aux2)?, cfg.aux_weight, 0.0);
        loss = crate::tensor::add(&loss, &aux)?;
    }
    Ok(loss)
}

fn val_pass(model: &Model, split: &[ImageSample], cfg: &TrainConfig) -> Result<(f32, f64)> {
    let _guard = NoGrad::new();
    let mut loss_sum = 0.0f64;
    let mut per_image = Vec::with_capacity(split.len());
    for chunk in split.chunks(cfg.batch_size) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (images, masks) = batch_tensors(&refs)?;
        let outputs = model.forward(&images, Mode::Infer)?;
        let loss = dice_loss(&outputs.fused, &masks, cfg.lambda)?;
        loss_sum += loss.item() as f64 * chunk.len() as f64;
        let bin = threshold(&outputs.fused, cfg.threshold)?;
        per_image.extend(per_image_metrics(&bin, &masks)?);
    }
    let val_loss = (loss_sum / split.len() as f64) as f32;
    Ok((val_loss, mean_metrics(&per_image).dsc))
}

fn per_image_metrics(pred_bin: &Tensor, targets: &Tensor) -> Result<Vec<Metrics>> {
    let [n, _, h, w] = pred_bin.shape();
    let plane = h * w;
    let pred = pred_bin.data();
    let target = targets.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = Tensor::from_vec([1, 1, h, w], pred[i * plane..(i + 1) * plane].to_vec())?;
        let t = Tensor::from_vec([1, 1, h, w], target[i * plane..(i + 1) * plane].to_vec())?;
        out.push(metrics(&confusion_counts(&p, &t)?));
    }
    Ok(out)
}

/// Per-epoch: seeded shuffle, batch, forward, dice loss, backward, Nadam
/// step; validate; reduce lr on plateau; stop early; leave the model holding
/// the best-validation-loss parameters.
pub fn train(model: &Model, data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = NadamState::new(&model.book().params);
    let mut history = TrainHistory::default();
    let mut lr = cfg.lr;
    let mut best_val = f32::INFINITY;
    let mut best_snapshot: Option<Snapshot> = None;
    let mut since_improve = 0usize;
    let mut since_lr_reduce = 0usize;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&ImageSample> = chunk.iter().map(|i| &data.train[*i]).collect();
            let (images, masks) = batch_tensors(&refs)?;
            let loss = batch_loss(model, &images, &masks, cfg, Mode::Train)?;
            let value = loss.item();
            if !value.is_finite() {
                if let Some(snap) = &best_snapshot {
                    restore_snapshot(model, snap);
                }
                return Err(Error::NonFinite("training loss".into()));
            }
            loss_sum += value as f64 * chunk.len() as f64;
            model.zero_grads();
            loss.backward()?;
            nadam_step(&model.book().params, &mut state, lr, cfg.beta1, cfg.beta2, cfg.eps)?;
        }
        let train_loss = (loss_sum / data.train.len() as f64) as f32;
        let (val_loss, val_dsc) = val_pass(model, &data.val, cfg)?;
        history.epochs.push(EpochRecord {
            train_loss,
            val_loss,
            val_dsc,
            lr,
        });
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}: train loss {train_loss:.6} val loss {val_loss:.6} val DSC {val_dsc:.4} lr {lr:e}",
                history.epochs.len()
            );
        }

        if best_val - val_loss > 1e-5 {
            best_val = val_loss;
            best_snapshot = Some(take_snapshot(model));
            history.best_epoch = history.epochs.len() - 1;
            since_improve = 0;
            since_lr_reduce = 0;
        } else {
            since_improve += 1;
            since_lr_reduce += 1;
            if since_improve >= cfg.early_stop_patience {
                break;
            }
            if since_lr_reduce >= cfg.lr_reduce_patience {
                lr *= cfg.lr_reduce_factor;
                since_lr_reduce = 0;
            }
        }
    }

    if let Some(snap) = &best_snapshot {
        restore_snapshot(model, snap);
    }
    Ok(history)
}

pub struct EvalReport {
    pub per_image: Vec<(String, Metrics)>,
    pub mean: Metrics,
}

impl EvalReport {
    /// Percentages with two decimals, one line per image plus the mean.
    pub fn to_text(&self) -> String {
        let mut out = String::from("id\tdsc\tiou\trecall\tprecision\n");
        for (id, m) in &self.per_image {
            out.push_str(&format!("{id}\t{}\n", m.as_percent_row()));
        }
        out.push_str(&format!("mean\t{}\n", self.mean.as_percent_row()));
        out
    }
}

/// Inference-mode metrics on a split; the model is not mutated.
pub fn evaluate(model: &Model, split: &[ImageSample], cutoff: f32) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let _guard = NoGrad::new();
    let mut per_image = Vec::with_capacity(split.len());
    for chunk in split.chunks(8) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (images, masks) = batch_tensors(&refs)?;
        let outputs = model.forward(&images, Mode::Infer)?;
        let bin = threshold(&outputs.fused, cutoff)?;
        let stats = per_image_metrics(&bin, &masks)?;
        per_image.extend(chunk.iter().zip(stats).map(|(s, m)| (s.id.clone(), m)));
    }
    let mean = mean_metrics(&per_image.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    Ok(EvalReport { per_image, mean })
}
