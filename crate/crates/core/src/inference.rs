//! Many-to-one per-frame prediction, weighted ensembling, and the
//! prediction CSV format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array4, Axis};

use crate::dataio::{build_inference_windows, FrameCache, VideoAnnotation, FRAME_SIZE};
use crate::error::{FerError, Result};
use crate::labels::NUM_CLASSES;
use crate::math::{softmax, LogitVector, ProbVector};
use crate::metrics::{report, ConfusionMatrix};
use crate::models::{HeadKind, ModelBundle};

pub const NUM_MODELS: usize = 3;

/// Index of the frame a many-to-one window predicts for.
pub fn middle_frame_index(t: usize) -> Result<usize> {
    if t == 0 || t % 2 == 0 {
        return Err(FerError::Config(format!(
            "window length must be odd and >= 1, got {t}"
        )));
    }
    Ok((t - 1) / 2)
}

/// How per-model outputs are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Weighted sum of softmax probabilities (the default).
    Probability,
    /// Weighted sum of log-probabilities, re-normalized; replication aid.
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    /// (static, gru, transformer); stored normalized to sum 1.
    pub weights: [f64; NUM_MODELS],
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            weights: [1.0 / 3.0; NUM_MODELS],
        }
    }
}

impl EnsembleConfig {
    pub fn new(raw: [f64; NUM_MODELS]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FerError::Config(format!(
                "ensemble weights must be finite and nonnegative, got {raw:?}"
            )));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(FerError::Config(
                "at least one ensemble weight must be > 0".into(),
            ));
        }
        Ok(EnsembleConfig {
            weights: [raw[0] / sum, raw[1] / sum, raw[2] / sum],
        })
    }
}

/// Elementwise weighted sum of per-model probabilities.
pub fn ensemble_combine(probs: &[ProbVector], cfg: &EnsembleConfig) -> Result<ProbVector> {
    ensemble_combine_mode(probs, cfg, CombineMode::Probability)
}

pub fn ensemble_combine_mode(
    probs: &[ProbVector],
    cfg: &EnsembleConfig,
    mode: CombineMode,
) -> Result<ProbVector> {
    if probs.len() != NUM_MODELS {
        return Err(FerError::InvalidInput(format!(
            "expected {NUM_MODELS} model outputs, got {}",
            probs.len()
        )));
    }
    match mode {
        CombineMode::Probability => {
            let mut out = [0.0; NUM_CLASSES];
            for (p, &w) in probs.iter().zip(&cfg.weights) {
                for k in 0..NUM_CLASSES {
                    out[k] += w * p.0[k];
                }
            }
            ProbVector::new(out)
        }
        CombineMode::Logit => {
            let mut logit: LogitVector = [0.0; NUM_CLASSES];
            for (p, &w) in probs.iter().zip(&cfg.weights) {
                if w == 0.0 {
                    continue; // skip so p=0 entries cannot poison via 0 * -inf
                }
                for k in 0..NUM_CLASSES {
                    logit[k] += w * p.0[k].max(f64::MIN_POSITIVE).ln();
                }
            }
            softmax(&logit)
        }
    }
}

/// Per-frame softmax outputs for one video.
///
/// Temporal heads run one centered window per frame (replicate padding) and
/// keep only the middle-position output; this reuses the many-to-many forward
/// verbatim, so the many-to-one result equals the many-to-many middle output
/// exactly. The static head scores frames independently.
pub fn predict_video(
    bundle: &ModelBundle,
    ann: &VideoAnnotation,
    cache: &mut FrameCache,
    window_t: usize,
) -> Result<Vec<ProbVector>> {
    let n = ann.num_frames();
    if n == 0 {
        return Err(FerError::InvalidInput(format!(
            "video {} has no frames",
            ann.video_id
        )));
    }
    let mut out = Vec::with_capacity(n);
    match bundle.head_config.kind {
        HeadKind::Static => {
            const CHUNK: usize = 64;
            let mut f = 0;
            while f < n {
                let b = CHUNK.min(n - f);
                let mut frames = Array4::<f64>::zeros((b, 3, FRAME_SIZE, FRAME_SIZE));
                for i in 0..b {
                    frames
                        .index_axis_mut(Axis(0), i)
                        .assign(&cache.get(&ann.video_id, f + i)?);
                }
                let (logits, _) = bundle.forward(&frames, b, 1)?;
                for i in 0..b {
                    let mut row: LogitVector = [0.0; NUM_CLASSES];
                    for k in 0..NUM_CLASSES {
                        row[k] = logits[[i, 0, k]];
                    }
                    out.push(softmax(&row)?);
                }
                f += b;
            }
        }
        _ => {
            let mid = middle_frame_index(window_t)?;
            for spec in build_inference_windows(ann, window_t)? {
                let frames = cache.window_tensor(&spec)?;
                let (logits, _) = bundle.forward(&frames, 1, window_t)?;
                let mut row: LogitVector = [0.0; NUM_CLASSES];
                for k in 0..NUM_CLASSES {
                    row[k] = logits[[0, mid, k]];
                }
                out.push(softmax(&row)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub predicted_code: i64,
    pub probs: ProbVector,
}

impl PredictionRecord {
    pub fn from_probs(video_id: &str, frame_index: usize, probs: ProbVector) -> Self {
        PredictionRecord {
            video_id: video_id.to_string(),
            frame_index,
            predicted_code: probs.argmax() as i64,
            probs,
        }
    }
}

pub const PREDICTION_HEADER: &str =
    "video_id,frame,pred,prob_0,prob_1,prob_2,prob_3,prob_4,prob_5,prob_6";

/// Write the prediction CSV. Callers must pass records sorted by
/// (video_id, frame_index); probabilities keep 9 significant digits.
pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    for w in records.windows(2) {
        let a = (&w[0].video_id, w[0].frame_index);
        let b = (&w[1].video_id, w[1].frame_index);
        if b <= a {
            return Err(FerError::InvalidInput(format!(
                "prediction records must be sorted by (video_id, frame): {}:{} before {}:{}",
                w[0].video_id, w[0].frame_index, w[1].video_id, w[1].frame_index
            )));
        }
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| FerError::io(path, e))?,
    );
    writeln!(f, "{PREDICTION_HEADER}").map_err(|e| FerError::io(path, e))?;
    for r in records {
        write!(f, "{},{},{}", r.video_id, r.frame_index, r.predicted_code)
            .map_err(|e| FerError::io(path, e))?;
        for k in 0..NUM_CLASSES {
            write!(f, ",{:.8e}", r.probs.0[k]).map_err(|e| FerError::io(path, e))?;
        }
        writeln!(f).map_err(|e| FerError::io(path, e))?;
    }
    f.flush().map_err(|e| FerError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| FerError::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(FerError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty prediction file".into(),
        }),
    };
    if header.trim_end() != PREDICTION_HEADER {
        return Err(FerError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (ix, line) in lines {
        let line = line.map_err(|e| FerError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| FerError::Parse {
            path: path.to_path_buf(),
            line: ix + 1,
            msg,
        };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 3 + NUM_CLASSES {
            return Err(parse_err(format!("expected {} fields, got {}", 3 + NUM_CLASSES, fields.len())));
        }
        let frame_index: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad frame index {:?}", fields[1])))?;
        let predicted_code: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad prediction {:?}", fields[2])))?;
        if !(0..NUM_CLASSES as i64).contains(&predicted_code) {
            return Err(parse_err(format!("prediction {predicted_code} out of range")));
        }
        let mut probs = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            probs[k] = fields[3 + k]
                .parse()
                .map_err(|_| parse_err(format!("bad probability {:?}", fields[3 + k])))?;
        }
        out.push(PredictionRecord {
            video_id: fields[0].to_string(),
            frame_index,
            predicted_code,
            probs: ProbVector::new(probs)
                .map_err(|e| parse_err(format!("bad probability row: {e}")))?,
        });
    }
    Ok(out)
}

/// Align three per-model prediction lists frame-by-frame. All three must
/// cover exactly the same (video_id, frame) keys in the same order.
pub fn align_model_records<'a>(
    per_model: [&'a [PredictionRecord]; NUM_MODELS],
) -> Result<Vec<(&'a str, usize, [ProbVector; NUM_MODELS])>> {
    let n = per_model[0].len();
    if per_model.iter().any(|m| m.len() != n) {
        return Err(FerError::InvalidInput(format!(
            "prediction lists differ in length: {:?}",
            per_model.map(|m| m.len())
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let key = (&per_model[0][i].video_id, per_model[0][i].frame_index);
        for m in &per_model[1..] {
            if (&m[i].video_id, m[i].frame_index) != key {
                return Err(FerError::InvalidInput(format!(
                    "prediction lists disagree at row {i}: {}:{} vs {}:{}",
                    key.0, key.1, m[i].video_id, m[i].frame_index
                )));
            }
        }
        out.push((
            per_model[0][i].video_id.as_str(),
            per_model[0][i].frame_index,
            [per_model[0][i].probs, per_model[1][i].probs, per_model[2][i].probs],
        ));
    }
    Ok(out)
}

/// Exhaustive weight search on the simplex (given step, e.g. 0.05),
/// maximizing validation E_total. Ties keep the first candidate scanned.
pub fn ensemble_grid_search(
    frames: &[([ProbVector; NUM_MODELS], i64)],
    step: f64,
) -> Result<(EnsembleConfig, f64)> {
    if frames.is_empty() {
        return Err(FerError::InvalidInput("no frames to search over".into()));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(FerError::Config(format!("grid step must be in (0,1], got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    let mut best: Option<(EnsembleConfig, f64)> = None;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let k = n - i - j;
            let cfg = EnsembleConfig::new([i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64])?;
            let mut y_true = Vec::with_capacity(frames.len());
            let mut y_pred = Vec::with_capacity(frames.len());
            for (probs, label) in frames {
                if *label == -1 {
                    continue;
                }
                y_true.push(*label);
                y_pred.push(ensemble_combine(probs, &cfg)?.argmax() as i64);
            }
            let rep = report(ConfusionMatrix::from_pairs(&y_true, &y_pred)?)?;
            if best.as_ref().map(|(_, e)| rep.e_total > *e).unwrap_or(true) {
                best = Some((cfg, rep.e_total));
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}
