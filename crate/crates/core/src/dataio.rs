//! Dataset ingestion and window construction.
//!
//! On-disk layout:
//!   `<annotations_root>/<video_id>.txt` — one integer label per line, frame order
//!   `<frames_root>/<video_id>/<index:05d>.jpg` — pre-cropped face frames
//!
//! Temporal models consume fixed-length windows of T consecutive frames.
//! Training windows never pad; inference windows replicate edge frames so
//! every frame can be a window center.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FerError, Result};
use crate::labels::{ExpressionLabel, NUM_CLASSES};

pub const FRAME_SIZE: usize = 112;

/// Per-channel normalization applied after scaling pixels to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5, 0.5, 0.5],
            std: [0.5, 0.5, 0.5],
        }
    }
}

/// Frame-ordered labels for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub labels: Vec<i64>,
    pub frame_dir: PathBuf,
}

impl VideoAnnotation {
    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != -1).count()
    }
}

/// A window of T frame indices within one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    /// The frame this window predicts for (inference windows); for training
    /// windows this is the middle frame index.
    pub center_index: usize,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

/// Parse `<video_id>.txt`: one integer label per line.
pub fn load_annotation_file(path: &Path, frames_root: &Path) -> Result<VideoAnnotation> {
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| FerError::InvalidInput(format!("bad annotation path {path:?}")))?
        .to_string();
    let text = fs::read_to_string(path).map_err(|e| FerError::io(path, e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let code: i64 = line.trim_end().parse().map_err(|_| FerError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("expected integer label, got {line:?}"),
        })?;
        ExpressionLabel::from_code(code).map_err(|_| FerError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("label code {code} out of range"),
        })?;
        labels.push(code);
    }
    if labels.is_empty() {
        return Err(FerError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty annotation file".into(),
        });
    }
    Ok(VideoAnnotation {
        frame_dir: frames_root.join(&video_id),
        video_id,
        labels,
    })
}

/// Load every `*.txt` annotation under a root, sorted by video id.
pub fn load_annotations_root(annotations_root: &Path) -> Result<Vec<VideoAnnotation>> {
    // frame_dir here is a placeholder sibling; callers that touch pixels load
    // through a FrameCache with an explicit frames_root.
    load_annotations(annotations_root, annotations_root)
}

pub fn load_annotations(
    annotations_root: &Path,
    frames_root: &Path,
) -> Result<Vec<VideoAnnotation>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(annotations_root)
        .map_err(|e| FerError::io(annotations_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FerError::InvalidInput(format!(
            "no annotation files under {annotations_root:?}"
        )));
    }
    paths
        .iter()
        .map(|p| load_annotation_file(p, frames_root))
        .collect()
}

/// Contiguous stride-stepped training windows; windows whose labels are all
/// Invalid are dropped. No padding: videos shorter than T yield no windows.
pub fn index_training_windows(
    ann: &VideoAnnotation,
    t: usize,
    stride: usize,
) -> Result<Vec<WindowSpec>> {
    check_window_len(t)?;
    if stride == 0 {
        return Err(FerError::Config("stride must be >= 1".into()));
    }
    let n = ann.num_frames();
    let mut out = Vec::new();
    if n < t {
        return Ok(out);
    }
    let mut start = 0;
    while start + t <= n {
        let all_invalid = ann.labels[start..start + t].iter().all(|&l| l == -1);
        if !all_invalid {
            out.push(WindowSpec {
                video_id: ann.video_id.clone(),
                frame_indices: (start..start + t).collect(),
                center_index: start + (t - 1) / 2,
            });
        }
        start += stride;
    }
    Ok(out)
}

/// One window per frame, centered on it, edges replicate-padded.
pub fn build_inference_windows(ann: &VideoAnnotation, t: usize) -> Result<Vec<WindowSpec>> {
    check_window_len(t)?;
    let n = ann.num_frames() as i64;
    let half = (t as i64 - 1) / 2;
    let mut out = Vec::with_capacity(n as usize);
    for f in 0..n {
        let frame_indices = (f - half..=f + half)
            .map(|i| i.clamp(0, n - 1) as usize)
            .collect();
        out.push(WindowSpec {
            video_id: ann.video_id.clone(),
            frame_indices,
            center_index: f as usize,
        });
    }
    Ok(out)
}

fn check_window_len(t: usize) -> Result<()> {
    if t < 1 || t % 2 == 0 {
        return Err(FerError::Config(format!(
            "window length must be odd and >= 1, got {t}"
        )));
    }
    Ok(())
}

/// Load one frame image, resize to 112x112 if needed (bilinear), and
/// normalize: pixel/255 then per-channel (v - mean) / std. Returns (3,H,W).
pub fn load_and_normalize_frame(
    frames_root: &Path,
    video_id: &str,
    frame_index: usize,
    norm: &Normalization,
) -> Result<Array3<f64>> {
    let path = frame_path(frames_root, video_id, frame_index);
    let img = image::open(&path).map_err(|e| FerError::FrameIo {
        video_id: video_id.to_string(),
        frame_index,
        msg: format!("{path:?}: {e}"),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize != FRAME_SIZE || rgb.height() as usize != FRAME_SIZE {
        image::imageops::resize(
            &rgb,
            FRAME_SIZE as u32,
            FRAME_SIZE as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        rgb
    };
    let mut out = Array3::<f64>::zeros((3, FRAME_SIZE, FRAME_SIZE));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            out[[c, y as usize, x as usize]] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    Ok(out)
}

pub fn frame_path(frames_root: &Path, video_id: &str, frame_index: usize) -> PathBuf {
    frames_root.join(video_id).join(format!("{frame_index:05}.jpg"))
}

/// In-memory cache of normalized frames, stored as f32 to halve footprint.
pub struct FrameCache {
    frames_root: PathBuf,
    norm: Normalization,
    cache: HashMap<(String, usize), Array3<f32>>,
}

impl FrameCache {
    pub fn new(frames_root: impl Into<PathBuf>, norm: Normalization) -> Self {
        FrameCache {
            frames_root: frames_root.into(),
            norm,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, video_id: &str, frame_index: usize) -> Result<Array3<f64>> {
        let key = (video_id.to_string(), frame_index);
        if let Some(f) = self.cache.get(&key) {
            return Ok(f.mapv(|v| v as f64));
        }
        // store f32 and always answer from the rounded copy, so cached and
        // freshly loaded frames are bit-identical
        let frame = load_and_normalize_frame(&self.frames_root, video_id, frame_index, &self.norm)?
            .mapv(|v| v as f32);
        let out = frame.mapv(|v| v as f64);
        self.cache.insert(key, frame);
        Ok(out)
    }

    /// Assemble the frames of one window into a (T,3,H,W) tensor.
    pub fn window_tensor(&mut self, spec: &WindowSpec) -> Result<Array4<f64>> {
        let t = spec.len();
        let mut out = Array4::<f64>::zeros((t, 3, FRAME_SIZE, FRAME_SIZE));
        for (i, &fi) in spec.frame_indices.iter().enumerate() {
            let frame = self.get(&spec.video_id, fi)?;
            out.index_axis_mut(Axis(0), i).assign(&frame);
        }
        Ok(out)
    }
}

/// Synthetic dataset description.
///
/// For classes in `motion_classes`, single frames are class-ambiguous by
/// construction: every such class renders the same moving blob at a uniformly
/// random phase, and only the motion across frames (speed and direction of
/// travel) identifies the class. The remaining classes carry a static grating
/// texture cue.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub class_count: usize,
    pub motion_classes: Vec<usize>,
    pub noise_level: f64,
    pub invalid_fraction: f64,
    /// Fast blob travel per frame, as a fraction of the image side.
    pub blob_speed: f64,
    /// Slow blob travel per frame, as a fraction of the image side.
    pub blob_speed_slow: f64,
    /// Blob standard deviation, as a fraction of the image side.
    pub blob_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 14,
            frames_per_video: 30,
            image_size: FRAME_SIZE,
            class_count: NUM_CLASSES,
            motion_classes: vec![5, 6],
            noise_level: 0.03,
            invalid_fraction: 0.03,
            blob_speed: 0.2,
            blob_speed_slow: 0.03,
            blob_sigma: 0.15,
        }
    }
}

/// Write a synthetic dataset under `out_root`:
/// `annotations/<vid>.txt`, `frames/<vid>/<i:05d>.jpg`, plus `manifest.txt`.
/// Byte-identical across runs with the same spec and seed.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64, out_root: &Path) -> Result<()> {
    if spec.image_size < 8 {
        return Err(FerError::Config(format!(
            "image_size must be >= 8, got {}",
            spec.image_size
        )));
    }
    if spec.class_count == 0 || spec.class_count > NUM_CLASSES {
        return Err(FerError::Config(format!(
            "class_count must be in 1..=7, got {}",
            spec.class_count
        )));
    }
    if spec.motion_classes.iter().any(|&c| c >= spec.class_count) {
        return Err(FerError::Config("motion class out of range".into()));
    }
    let ann_dir = out_root.join("annotations");
    let frames_dir = out_root.join("frames");
    fs::create_dir_all(&ann_dir).map_err(|e| FerError::io(&ann_dir, e))?;
    fs::create_dir_all(&frames_dir).map_err(|e| FerError::io(&frames_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let s = spec.image_size;
    let mut manifest = String::new();

    for v in 0..spec.num_videos {
        let video_id = format!("video_{v:03}");
        let class = v % spec.class_count;
        let vid_dir = frames_dir.join(&video_id);
        fs::create_dir_all(&vid_dir).map_err(|e| FerError::io(&vid_dir, e))?;

        // per-video randomness drawn in a fixed order
        let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let blob_start = rng.gen::<f64>();

        let motion_rank = spec.motion_classes.iter().position(|&c| c == class);
        let mut labels = Vec::with_capacity(spec.frames_per_video);

        for f in 0..spec.frames_per_video {
            let mut img = image::RgbImage::new(s as u32, s as u32);
            match motion_rank {
                None => {
                    // static texture: class-specific grating orientation/frequency
                    let theta = std::f64::consts::PI * class as f64 / spec.class_count as f64;
                    let freq = 2.0 + class as f64;
                    let (kx, ky) = (freq * theta.cos(), freq * theta.sin());
                    for y in 0..s {
                        for x in 0..s {
                            let arg = std::f64::consts::TAU
                                * (kx * x as f64 + ky * y as f64)
                                / s as f64
                                + phase;
                            let base = 0.5 + 0.35 * arg.sin();
                            put_pixel_noisy(&mut img, x, y, base, spec.noise_level, &normal, &mut rng);
                        }
                    }
                }
                Some(rank) => {
                    // moving blob; identical appearance for every motion
                    // class. Only how it travels differs: a slow drift in one
                    // direction versus a fast sweep in the other, so both the
                    // window coverage and the sign of travel carry the class.
                    let speed_frac = if rank % 2 == 0 {
                        spec.blob_speed_slow
                    } else {
                        spec.blob_speed
                    };
                    let speed = s as f64 * speed_frac;
                    let dir = if rank % 2 == 0 { 1.0 } else { -1.0 };
                    let along = (blob_start * s as f64 + dir * speed * f as f64)
                        .rem_euclid(s as f64);
                    // the blob always travels along the image centre line, so
                    // a single frame reveals position but never direction
                    let (cx, cy) = if rank < 2 {
                        (along, 0.5 * s as f64)
                    } else {
                        (0.5 * s as f64, along)
                    };
                    let sigma = s as f64 * spec.blob_sigma;
                    for y in 0..s {
                        for x in 0..s {
                            // wrap-around distance so the blob stays compact mod s
                            let dx = wrap_dist(x as f64, cx, s as f64);
                            let dy = wrap_dist(y as f64, cy, s as f64);
                            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                            // high contrast keeps the blob's temporal
                            // modulation from drowning in the background
                            // response of the feature extractor
                            let base = 0.1 + 0.85 * g;
                            put_pixel_noisy(&mut img, x, y, base, spec.noise_level, &normal, &mut rng);
                        }
                    }
                }
            }
            let frame_file = vid_dir.join(format!("{f:05}.jpg"));
            img.save(&frame_file).map_err(|e| FerError::FrameIo {
                video_id: video_id.clone(),
                frame_index: f,
                msg: e.to_string(),
            })?;
            let invalid = rng.gen::<f64>() < spec.invalid_fraction;
            labels.push(if invalid { -1 } else { class as i64 });
        }

        let ann_text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        let ann_path = ann_dir.join(format!("{video_id}.txt"));
        fs::write(&ann_path, ann_text).map_err(|e| FerError::io(&ann_path, e))?;
        let valid = labels.iter().filter(|&&l| l != -1).count();
        manifest.push_str(&format!(
            "{video_id} frames={} valid={valid}\n",
            spec.frames_per_video
        ));
    }
    let manifest_path = out_root.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| FerError::io(&manifest_path, e))?;
    Ok(())
}

fn wrap_dist(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

#[allow(clippy::too_many_arguments)]
fn put_pixel_noisy(
    img: &mut image::RgbImage,
    x: usize,
    y: usize,
    base: f64,
    noise_level: f64,
    normal: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    let mut px = [0u8; 3];
    for ch in &mut px {
        let v = base + noise_level * normal.sample(rng);
        *ch = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.put_pixel(x as u32, y as u32, image::Rgb(px));
}
