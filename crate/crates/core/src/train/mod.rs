//! Classifier training: cross-entropy + Adam over shuffled mini-batches,
//! deterministic validation split, and best-validation-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageSample;
use crate::grad::{Adam, AdamConfig, ReluMode, Tensor};
use crate::model::{
    build_resnet, build_vgg, forward, infer, update_running_stats, Checkpoint, Mode, ModelError,
    ModelKind, TrainMeta,
};
use crate::seed;

/// Sub-seed indices for the independent randomness streams.
const SEED_SPLIT: u64 = 1;
const SEED_DROPOUT: u64 = 2;
const SEED_EPOCH_BASE: u64 = 3;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of samples used for training; the rest validate.
    pub split: f64,
    /// Dataset identifier, recorded for provenance only.
    pub dataset: String,
    pub model: ModelKind,
    pub num_classes: usize,
    pub head_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            split: 0.9,
            dataset: String::new(),
            model: ModelKind::Vgg,
            num_classes: 2,
            head_width: 4096,
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    BadDataset(String),
    NonFiniteLoss { epoch: usize, batch: usize },
    Model(ModelError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::BadConfig(m) => write!(f, "bad config: {m}"),
            TrainError::BadDataset(m) => write!(f, "bad dataset: {m}"),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

/// One epoch's summary, in training order.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    /// Weights and running stats from the best validation epoch; its meta
    /// records that epoch and accuracy.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn image_size(samples: &[ImageSample]) -> Result<usize, TrainError> {
    let first = samples[0].image.shape();
    let size = match *first {
        [1, h, w] if h == w => h,
        ref s => return Err(TrainError::BadDataset(format!("expected square [1,s,s] images, got {s:?}"))),
    };
    if let Some(bad) = samples.iter().position(|s| s.image.shape() != first) {
        return Err(TrainError::BadDataset(format!("sample {bad} has a different shape")));
    }
    Ok(size)
}

fn fill_batch(samples: &[ImageSample], idx: &[usize], size: usize) -> (Tensor, Vec<usize>) {
    let px = size * size;
    let mut batch = Tensor::zeros(&[idx.len(), 1, size, size]);
    let mut labels = Vec::with_capacity(idx.len());
    for (b, &i) in idx.iter().enumerate() {
        batch.data_mut()[b * px..(b + 1) * px].copy_from_slice(samples[i].image.data());
        labels.push(samples[i].label);
    }
    (batch, labels)
}

/// Fraction of samples whose argmax probability matches the label.
pub fn evaluate_accuracy(ckpt: &Checkpoint, samples: &[ImageSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::BadDataset("no samples to evaluate".into()));
    }
    let size = image_size(samples)?;
    let k = ckpt.spec.num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= k) {
        return Err(TrainError::BadDataset(format!("label {} out of range for {k} classes", s.label)));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(32) {
        let (batch, labels) = fill_batch(samples, chunk, size);
        let (probs, _) = infer(ckpt, &batch)?;
        for (b, &label) in labels.iter().enumerate() {
            let row = &probs.data()[b * k..(b + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            correct += usize::from(argmax == label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train a fresh classifier and return the epoch with the highest
/// validation accuracy (ties go to the earlier epoch). Identical config,
/// seed, and samples reproduce the result bit for bit.
pub fn train_classifier(
    cfg: &TrainConfig,
    samples: &[ImageSample],
    mut on_epoch: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<TrainOutcome, TrainError> {
    if cfg.epochs < 1 {
        return Err(TrainError::BadConfig("epochs must be at least 1".into()));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(TrainError::BadConfig(format!("split {} outside (0,1)", cfg.split)));
    }
    if cfg.batch_size < 1 {
        return Err(TrainError::BadConfig("batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(TrainError::BadDataset("no samples".into()));
    }
    if samples.len() < 2 * cfg.batch_size {
        return Err(TrainError::BadDataset(format!(
            "{} samples cannot fill two batches of {}",
            samples.len(),
            cfg.batch_size
        )));
    }
    if cfg.num_classes < 2 {
        return Err(TrainError::BadConfig("need at least two classes".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(TrainError::BadDataset(format!(
            "label {} out of range for {} classes",
            s.label, cfg.num_classes
        )));
    }
    {
        let mut seen = vec![false; cfg.num_classes];
        for s in samples {
            seen[s.label] = true;
        }
        if seen.iter().filter(|&&b| b).count() < 2 {
            return Err(TrainError::BadDataset("fewer than two classes present".into()));
        }
    }
    let size = image_size(samples)?;

    // deterministic split: shuffle once by the split sub-seed
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, SEED_SPLIT)));
    let n_train = ((samples.len() as f64) * cfg.split).floor() as usize;
    let (train_idx, val_idx) = order.split_at(n_train);
    if train_idx.len() < cfg.batch_size || val_idx.is_empty() {
        return Err(TrainError::BadDataset(format!(
            "split {} leaves {} train / {} val samples, too few",
            cfg.split,
            train_idx.len(),
            val_idx.len()
        )));
    }
    let val_samples: Vec<ImageSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let spec = match cfg.model {
        ModelKind::Vgg => build_vgg(size, cfg.num_classes, cfg.head_width),
        ModelKind::Resnet => build_resnet(size, cfg.num_classes, cfg.head_width),
    };
    let mut ckpt = crate::model::init_model(&spec, cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, SEED_DROPOUT));

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffled = train_idx.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
            cfg.seed,
            SEED_EPOCH_BASE + epoch as u64,
        )));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // partial trailing batches are dropped so every step sees a full batch
        for (batch_no, chunk) in shuffled.chunks_exact(cfg.batch_size).enumerate() {
            let (batch, labels) = fill_batch(samples, chunk, size);
            let mut fp = forward(&ckpt, &batch, Mode::Train, ReluMode::Standard, Some(&mut dropout_rng))?;
            let loss_var = fp.tape.cross_entropy(fp.logits, &labels).map_err(ModelError::from)?;
            let loss = fp.tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            loss_sum += loss;
            batches += 1;

            let grads = fp
                .tape
                .backward(loss_var, &Tensor::scalar(1.0))
                .map_err(ModelError::from)?;
            adam.begin_step();
            for (name, var) in &fp.param_vars {
                if let Some(g) = grads.grad(*var) {
                    adam.update(name, ckpt.params.get_mut(name).expect("param exists"), g);
                }
            }
            update_running_stats(&mut ckpt, &fp.bn_batches);
        }

        let val_accuracy = evaluate_accuracy(&ckpt, &val_samples)?;
        let stats = EpochStats { epoch, mean_loss: loss_sum / batches as f64, val_accuracy };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&stats);
        }
        history.push(stats);

        // strict improvement only, so ties keep the earlier epoch
        if best.as_ref().map_or(true, |(acc, _)| val_accuracy > *acc) {
            let mut snap = ckpt.clone();
            snap.meta = TrainMeta { epoch: epoch as u32, val_accuracy, seed: cfg.seed };
            best = Some((val_accuracy, snap));
        }
    }

    let (_, checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { checkpoint, history })
}
