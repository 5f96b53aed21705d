//! Masked cross-entropy, multi-step LR schedule, SGD, the fit loop, and
//! checkpoint persistence.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{index_training_windows, FrameCache, VideoAnnotation, WindowSpec, FRAME_SIZE};
use crate::error::{FerError, Result};
use crate::labels::NUM_CLASSES;
use crate::metrics::MetricReport;
use crate::models::{load_container, save_container, HeadKind, ModelBundle, NamedArrays};
use crate::nn::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// None selects the per-head default: 128 frames (static) or 32 windows.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub window_t: usize,
    pub window_stride: usize,
    pub momentum: f64,
    /// Global gradient-norm clip applied before each update; None disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            epochs: 10,
            milestones: vec![2, 4, 8],
            lr_gamma: 0.1,
            batch_size: None,
            seed: 0,
            window_t: 9,
            window_stride: 1,
            momentum: 0.9,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(FerError::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.epochs == 0 {
            return Err(FerError::Config("epochs must be >= 1".into()));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(FerError::Config(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                )));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(FerError::Config(format!(
                    "milestone {last} must be < epochs {}",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.lr_gamma) && self.lr_gamma != 1.0 {
            return Err(FerError::Config(format!("lr_gamma must be in (0,1], got {}", self.lr_gamma)));
        }
        if self.lr_gamma <= 0.0 {
            return Err(FerError::Config(format!("lr_gamma must be in (0,1], got {}", self.lr_gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FerError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.window_t % 2 == 0 || self.window_t == 0 {
            return Err(FerError::Config(format!(
                "window_t must be odd and >= 1, got {}",
                self.window_t
            )));
        }
        if self.window_stride == 0 {
            return Err(FerError::Config("window_stride must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(FerError::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, kind: HeadKind) -> usize {
        self.batch_size.unwrap_or(match kind {
            HeadKind::Static => 128,
            _ => 32,
        })
    }
}

/// Step-decayed learning rate: base_lr * gamma^(milestones passed at `epoch`).
///
/// The product is snapped to 12 significant decimal digits so repeatedly
/// decaying a decimal literal like 5e-4 lands exactly on 5e-5, 5e-6, ...
/// rather than on the nearest product of binary floats.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(FerError::Config(format!(
            "epoch {epoch} out of range (epochs = {})",
            cfg.epochs
        )));
    }
    let k = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    let raw = cfg.base_lr * cfg.lr_gamma.powi(k as i32);
    Ok(format!("{raw:.11e}").parse().expect("finite lr"))
}

/// Mean negative log-likelihood over frames with a valid (non -1) label.
/// Returns (loss, dL/dlogits); invalid frames get exactly zero gradient.
pub fn masked_cross_entropy(
    logits: &Array3<f64>,
    labels: &Array2<i64>,
) -> Result<(f64, Array3<f64>)> {
    let (b, t, c) = logits.dim();
    if c != NUM_CLASSES {
        return Err(FerError::Shape(format!("logits last dim {c}, expected {NUM_CLASSES}")));
    }
    if labels.dim() != (b, t) {
        return Err(FerError::Shape(format!(
            "labels shape {:?} does not match logits ({b},{t})",
            labels.dim()
        )));
    }
    let n_valid = labels.iter().filter(|&&l| l != -1).count();
    if n_valid == 0 {
        return Err(FerError::NoValidTarget);
    }
    let mut dlogits = Array3::<f64>::zeros((b, t, c));
    let mut loss = 0.0;
    let scale = 1.0 / n_valid as f64;
    for i in 0..b {
        for j in 0..t {
            let y = labels[[i, j]];
            if y == -1 {
                continue;
            }
            if !(0..NUM_CLASSES as i64).contains(&y) {
                return Err(FerError::InvalidInput(format!("label code {y} out of range")));
            }
            let row = logits.index_axis(Axis(0), i);
            let row = row.index_axis(Axis(0), j);
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut denom = 0.0;
            for &v in row.iter() {
                denom += (v - m).exp();
            }
            let log_denom = denom.ln() + m;
            loss += scale * (log_denom - logits[[i, j, y as usize]]);
            for k in 0..c {
                let p = (logits[[i, j, k]] - log_denom).exp();
                dlogits[[i, j, k]] = scale * (p - if k as i64 == y { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((loss, dlogits))
}

/// Plain SGD with momentum: v <- mu*v + g; p <- p - lr*v.
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module, lr: f64) {
        let mu = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_params("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let v = velocity
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
            v.zip_mut_with(&p.grad, |vi, &gi| *vi = mu * *vi + gi);
            p.value.zip_mut_with(v, |pi, &vi| *pi -= lr * vi);
        });
    }

    pub fn export_state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out: Vec<_> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, state: Vec<(String, ArrayD<f64>)>) {
        self.velocity = state.into_iter().collect();
    }
}

/// Annotated videos plus their pixel source.
pub struct Dataset {
    pub annotations: Vec<VideoAnnotation>,
    pub cache: FrameCache,
}

impl Dataset {
    pub fn new(annotations: Vec<VideoAnnotation>, cache: FrameCache) -> Self {
        Dataset { annotations, cache }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<(f64, f64, f64)>, // (macro_f1, total_accuracy, e_total)
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} lr={:.8e} train_loss={:.8e}",
            self.epoch, self.lr, self.train_loss
        )?;
        if let Some((f1, acc, e)) = self.val {
            write!(
                f,
                " val_macro_f1={f1:.8e} val_total_accuracy={acc:.8e} val_e_total={e:.8e}"
            )?;
        }
        Ok(())
    }
}

type EvalFn<'a> = dyn FnMut(&mut ModelBundle) -> Result<MetricReport> + 'a;

/// Optional wiring around the core fit loop.
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Run after each epoch; its report feeds the log and best-checkpoint pick.
    pub evaluate: Option<&'a mut EvalFn<'a>>,
    /// When set, `last.ckpt` is written every epoch and `best.ckpt` whenever
    /// validation E_total improves (train loss stands in without `evaluate`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Append per-epoch log lines here.
    pub log_path: Option<PathBuf>,
    /// Resume: first epoch index to run (lr schedule follows the epoch index).
    pub start_epoch: usize,
    /// Resume: optimizer velocity restored from a checkpoint.
    pub optimizer_state: Option<Vec<(String, ArrayD<f64>)>>,
}

enum TrainItem {
    Frame { video: usize, frame: usize },
    Window { video: usize, spec: WindowSpec },
}

pub fn fit(
    bundle: &mut ModelBundle,
    dataset: &mut Dataset,
    cfg: &TrainConfig,
    hooks: &mut FitHooks,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let kind = bundle.head_config.kind;

    let mut items: Vec<TrainItem> = Vec::new();
    for (vi, ann) in dataset.annotations.iter().enumerate() {
        match kind {
            HeadKind::Static => {
                for (fi, &l) in ann.labels.iter().enumerate() {
                    if l != -1 {
                        items.push(TrainItem::Frame { video: vi, frame: fi });
                    }
                }
            }
            _ => {
                for spec in index_training_windows(ann, cfg.window_t, cfg.window_stride)? {
                    items.push(TrainItem::Window { video: vi, spec });
                }
            }
        }
    }
    if items.is_empty() {
        return Err(FerError::InvalidInput(
            "training dataset is empty (no valid frames / windows)".into(),
        ));
    }

    let batch = cfg.effective_batch_size(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum);
    if let Some(state) = hooks.optimizer_state.take() {
        opt.import_state(state);
    }

    let mut logs = Vec::new();
    let mut best_key = f64::NEG_INFINITY;
    for epoch in hooks.start_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (frames, labels) = assemble_batch(dataset, &items, chunk)?;
            let (b, t) = labels.dim();
            bundle.zero_grad();
            let (logits, cache) = bundle.forward_train(&frames, b, t, &mut rng)?;
            let (loss, dlogits) = masked_cross_entropy(&logits, &labels)?;
            bundle.backward(&cache, &dlogits);
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(bundle, max_norm);
            }
            opt.step(bundle, lr);
            let n_valid = labels.iter().filter(|&&l| l != -1).count() as f64;
            loss_sum += loss * n_valid;
            weight_sum += n_valid;
        }

        let mut log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / weight_sum,
            val: None,
        };
        if let Some(eval) = hooks.evaluate.as_deref_mut() {
            let rep = eval(bundle)?;
            log.val = Some((rep.macro_f1, rep.total_accuracy, rep.e_total));
        }
        if let Some(p) = &hooks.log_path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| FerError::io(p, e))?;
            writeln!(f, "{log}").map_err(|e| FerError::io(p, e))?;
        }
        if let Some(dir) = hooks.checkpoint_dir.clone() {
            std::fs::create_dir_all(&dir).map_err(|e| FerError::io(&dir, e))?;
            save_checkpoint(bundle, &opt, cfg, epoch + 1, &log, &dir.join("last.ckpt"))?;
            let key = match log.val {
                Some((_, _, e)) => e,
                None => -log.train_loss,
            };
            if key > best_key {
                best_key = key;
                save_checkpoint(bundle, &opt, cfg, epoch + 1, &log, &dir.join("best.ckpt"))?;
            }
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Scale all trainable gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(model: &mut dyn Module, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        model.visit_params("", &mut |_, p| {
            if p.trainable {
                p.grad.mapv_inplace(|g| g * scale);
            }
        });
    }
    norm
}

fn assemble_batch(
    dataset: &mut Dataset,
    items: &[TrainItem],
    chunk: &[usize],
) -> Result<(Array4<f64>, Array2<i64>)> {
    let t = match &items[chunk[0]] {
        TrainItem::Frame { .. } => 1,
        TrainItem::Window { spec, .. } => spec.len(),
    };
    let b = chunk.len();
    let mut frames = Array4::<f64>::zeros((b * t, 3, FRAME_SIZE, FRAME_SIZE));
    let mut labels = Array2::<i64>::zeros((b, t));
    for (bi, &ix) in chunk.iter().enumerate() {
        match &items[ix] {
            TrainItem::Frame { video, frame } => {
                let ann = &dataset.annotations[*video];
                let img = dataset.cache.get(&ann.video_id, *frame)?;
                frames.index_axis_mut(Axis(0), bi).assign(&img);
                labels[[bi, 0]] = ann.labels[*frame];
            }
            TrainItem::Window { video, spec } => {
                let ann = &dataset.annotations[*video];
                let tensor = dataset.cache.window_tensor(spec)?;
                for (ti, &fi) in spec.frame_indices.iter().enumerate() {
                    frames
                        .index_axis_mut(Axis(0), bi * t + ti)
                        .assign(&tensor.index_axis(Axis(0), ti));
                    labels[[bi, ti]] = ann.labels[fi];
                }
            }
        }
    }
    Ok((frames, labels))
}

fn train_fingerprint(cfg: &TrainConfig, model_fingerprint: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(cfg).expect("serializable").as_bytes());
    hasher.update(model_fingerprint.as_bytes());
    format!("{:x}", hasher.finalize())
}

pub struct Checkpoint {
    /// Number of completed epochs; training resumes at this epoch index.
    pub epoch: usize,
    pub train_config: TrainConfig,
    pub model_fingerprint: String,
    pub metrics: serde_json::Value,
    arrays: NamedArrays,
}

pub fn save_checkpoint(
    bundle: &mut ModelBundle,
    opt: &Sgd,
    cfg: &TrainConfig,
    epoch: usize,
    log: &EpochLog,
    path: &Path,
) -> Result<()> {
    let mut arrays = bundle.export_arrays();
    for (name, v) in opt.export_state() {
        arrays.push((format!("opt.{name}"), v));
    }
    let metrics = serde_json::json!({
        "train_loss": log.train_loss,
        "val": log.val.map(|(f1, acc, e)| serde_json::json!({
            "macro_f1": f1, "total_accuracy": acc, "e_total": e,
        })),
    });
    let data = NamedArrays {
        fingerprint: train_fingerprint(cfg, &bundle.fingerprint),
        meta: serde_json::json!({
            "epoch": epoch,
            "model_fingerprint": bundle.fingerprint,
            "train_config": cfg,
            "metrics": metrics,
        }),
        arrays,
    };
    save_container(path, &data)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = load_container(path)?;
    let epoch = data.meta["epoch"]
        .as_u64()
        .ok_or_else(|| FerError::Load("checkpoint missing epoch".into()))? as usize;
    let train_config: TrainConfig = serde_json::from_value(data.meta["train_config"].clone())
        .map_err(|e| FerError::Load(format!("checkpoint train_config: {e}")))?;
    let model_fingerprint = data.meta["model_fingerprint"]
        .as_str()
        .ok_or_else(|| FerError::Load("checkpoint missing model_fingerprint".into()))?
        .to_string();
    Ok(Checkpoint {
        epoch,
        train_config,
        model_fingerprint,
        metrics: data.meta["metrics"].clone(),
        arrays: data,
    })
}

impl Checkpoint {
    /// Restore parameters into `bundle` and return the optimizer state ready
    /// to pass to `FitHooks`. Refuses on fingerprint mismatch unless
    /// `allow_mismatch`.
    pub fn restore(
        &self,
        bundle: &mut ModelBundle,
        allow_mismatch: bool,
    ) -> Result<Vec<(String, ArrayD<f64>)>> {
        if self.model_fingerprint != bundle.fingerprint && !allow_mismatch {
            return Err(FerError::FingerprintMismatch {
                found: self.model_fingerprint.clone(),
                expected: bundle.fingerprint.clone(),
            });
        }
        let mut err = None;
        bundle.visit_params("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.arrays.get(&name) {
                Some(arr) if arr.shape() == p.value.shape() => p.value.assign(arr),
                Some(arr) => {
                    err = Some(FerError::Load(format!(
                        "parameter {name}: shape {:?} in checkpoint vs {:?} in model",
                        arr.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(FerError::Load(format!("parameter {name} missing from checkpoint"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(self
            .arrays
            .arrays
            .iter()
            .filter_map(|(n, v)| {
                n.strip_prefix("opt.")
                    .map(|rest| (rest.to_string(), v.clone()))
            })
            .collect())
    }
}
