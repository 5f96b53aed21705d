//! Model assembly: backbone + head bundles, weight files, fingerprints.

pub mod backbone;
pub mod container;
pub mod heads;
pub mod resnet;

pub use backbone::{Backbone, BackboneCache, TinyCnn, RESNET50_FEATURE_DIM, TINY_FEATURE_DIM};
pub use container::{load_container, save_container, NamedArrays};
pub use heads::{Head, HeadCache, StaticHead};
pub use resnet::ResNet50;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FerError, Result};
use crate::nn::{Module, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    ResNet50,
    Tiny,
}

impl std::str::FromStr for Architecture {
    type Err = FerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Architecture::ResNet50),
            "tiny" => Ok(Architecture::Tiny),
            other => Err(FerError::Config(format!(
                "unknown backbone architecture {other:?} (expected resnet50 or tiny)"
            ))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::ResNet50 => "resnet50",
            Architecture::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture: Architecture::Tiny,
            pretrained_weights_path: None,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        match self.architecture {
            Architecture::ResNet50 => RESNET50_FEATURE_DIM,
            Architecture::Tiny => TINY_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Static,
    Gru,
    Transformer,
}

impl std::str::FromStr for HeadKind {
    type Err = FerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(HeadKind::Static),
            "gru" => Ok(HeadKind::Gru),
            "transformer" => Ok(HeadKind::Transformer),
            other => Err(FerError::Config(format!(
                "unknown head kind {other:?} (expected static, gru, or transformer)"
            ))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Static => "static",
            HeadKind::Gru => "gru",
            HeadKind::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalHeadConfig {
    pub kind: HeadKind,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub tf_model_dim: usize,
    pub tf_heads: usize,
    pub tf_layers: usize,
    pub tf_ffn_dim: usize,
    pub dropout: f64,
}

impl Default for TemporalHeadConfig {
    fn default() -> Self {
        TemporalHeadConfig {
            kind: HeadKind::Static,
            gru_layers: 2,
            gru_hidden: 512,
            tf_model_dim: 512,
            tf_heads: 4,
            tf_layers: 2,
            tf_ffn_dim: 1024,
            dropout: 0.0,
        }
    }
}

impl TemporalHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == HeadKind::Gru && self.gru_layers != 2 {
            return Err(FerError::Config(format!(
                "gru head depth is fixed at 2, got {}",
                self.gru_layers
            )));
        }
        if self.kind == HeadKind::Transformer {
            if self.tf_model_dim == 0 || self.tf_model_dim % self.tf_heads != 0 {
                return Err(FerError::Config(format!(
                    "tf_model_dim {} must be divisible by tf_heads {}",
                    self.tf_model_dim, self.tf_heads
                )));
            }
            if self.tf_model_dim % 2 != 0 {
                return Err(FerError::Config(
                    "tf_model_dim must be even for sinusoidal encoding".into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FerError::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Hash of the full model configuration; changes whenever any field changes.
pub fn config_fingerprint(bc: &BackboneConfig, hc: &TemporalHeadConfig) -> String {
    let payload = serde_json::to_string(&(bc, hc)).expect("serializable configs");
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// What happened while loading pretrained backbone weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub matched: usize,
    pub skipped_classifier: usize,
    pub missing: Vec<String>,
}

/// One trainable model: a frame-wise backbone plus a temporal head.
pub struct ModelBundle {
    pub backbone: Backbone,
    pub head: Head,
    pub backbone_config: BackboneConfig,
    pub head_config: TemporalHeadConfig,
    pub fingerprint: String,
}

impl ModelBundle {
    pub fn new(
        backbone_config: BackboneConfig,
        head_config: TemporalHeadConfig,
        seed: u64,
    ) -> Result<Self> {
        head_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = match backbone_config.architecture {
            Architecture::Tiny => Backbone::Tiny(TinyCnn::new(&mut rng)),
            Architecture::ResNet50 => Backbone::ResNet50(Box::new(ResNet50::new(&mut rng))),
        };
        let d = backbone_config.feature_dim();
        let head = match head_config.kind {
            HeadKind::Static => Head::Static(StaticHead::new(d, &mut rng)),
            HeadKind::Gru => Head::Gru(heads::GruHead::new(d, &head_config, &mut rng)),
            HeadKind::Transformer => {
                Head::Transformer(heads::TransformerHead::new(d, &head_config, &mut rng))
            }
        };
        let fingerprint = config_fingerprint(&backbone_config, &head_config);
        let mut bundle = ModelBundle {
            backbone,
            head,
            backbone_config,
            head_config,
            fingerprint,
        };
        if let Some(path) = bundle.backbone_config.pretrained_weights_path.clone() {
            bundle.load_backbone_weights(&path)?;
        }
        Ok(bundle)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Many-to-many forward: (B*T,3,H,W) frames -> (B,T,7) logits.
    pub fn forward(
        &self,
        frames: &Array4<f64>,
        b: usize,
        t: usize,
    ) -> Result<(Array3<f64>, BundleCache)> {
        let (feat2, bb_cache) = self.backbone.forward(frames)?;
        let d = self.feature_dim();
        let features = feat2.into_shape((b, t, d)).map_err(|e| {
            FerError::Shape(format!("features reshape to ({b},{t},{d}): {e}"))
        })?;
        let (logits, head_cache) = self.head.forward(&features, None)?;
        Ok((
            logits,
            BundleCache {
                bb_cache,
                head_cache,
                b,
                t,
            },
        ))
    }

    /// Like `forward`, but with dropout active when configured.
    pub fn forward_train(
        &self,
        frames: &Array4<f64>,
        b: usize,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array3<f64>, BundleCache)> {
        let (feat2, bb_cache) = self.backbone.forward(frames)?;
        let d = self.feature_dim();
        let features = feat2.into_shape((b, t, d)).unwrap();
        let (logits, head_cache) = self.head.forward(&features, Some(rng))?;
        Ok((
            logits,
            BundleCache {
                bb_cache,
                head_cache,
                b,
                t,
            },
        ))
    }

    /// Backprop from logit gradients into all parameters.
    pub fn backward(&mut self, cache: &BundleCache, dlogits: &Array3<f64>) {
        let dfeatures = self.head.backward(&cache.head_cache, dlogits);
        let d = self.feature_dim();
        let dfeat2: Array2<f64> = dfeatures.into_shape((cache.b * cache.t, d)).unwrap();
        self.backbone.backward(&cache.bb_cache, &dfeat2);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Snapshot every parameter (and buffer) as named arrays.
    pub fn export_arrays(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name, p.value.clone())));
        out
    }

    pub fn save_weights(&mut self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let data = NamedArrays {
            fingerprint: self.fingerprint.clone(),
            meta,
            arrays: self.export_arrays(),
        };
        save_container(path, &data)
    }

    /// Restore a full bundle weight file. The fingerprint must match unless
    /// `allow_mismatch` is set.
    pub fn load_weights(&mut self, path: &Path, allow_mismatch: bool) -> Result<NamedArrays> {
        let data = load_container(path)?;
        if data.fingerprint != self.fingerprint && !allow_mismatch {
            return Err(FerError::FingerprintMismatch {
                found: data.fingerprint.clone(),
                expected: self.fingerprint.clone(),
            });
        }
        let mut err = None;
        self.visit_params("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match data.get(&name) {
                Some(arr) => {
                    if arr.shape() != p.value.shape() {
                        err = Some(FerError::Load(format!(
                            "parameter {name}: shape {:?} in file vs {:?} in model",
                            arr.shape(),
                            p.value.shape()
                        )));
                    } else {
                        p.value.assign(arr);
                    }
                }
                None => err = Some(FerError::Load(format!("parameter {name} missing from file"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(data),
        }
    }

    /// Load externally pretrained backbone weights by parameter name. The
    /// final classifier (`fc.*` / `classifier.*` entries that belong to the
    /// pretraining task, or anything under `head.`) is never matched; the
    /// head keeps its fresh initialization.
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<LoadReport> {
        let data = load_container(path)?;
        let mut backbone_names: Vec<String> = Vec::new();
        self.backbone
            .visit_params("", &mut |name, _| backbone_names.push(name));

        let mut matched = 0;
        let mut skipped_classifier = 0;
        let mut err: Option<FerError> = None;
        for (raw_name, arr) in &data.arrays {
            // accept both external checkpoints ("conv1.w") and full bundle
            // containers ("backbone.conv1.w")
            let name = raw_name.strip_prefix("backbone.").unwrap_or(raw_name);
            if backbone_names.iter().any(|n| n == name) {
                self.backbone.visit_params("", &mut |n, p| {
                    if n == *name && err.is_none() {
                        if arr.shape() != p.value.shape() {
                            err = Some(FerError::Load(format!(
                                "parameter {n}: shape {:?} in file vs {:?} in model",
                                arr.shape(),
                                p.value.shape()
                            )));
                        } else {
                            p.value.assign(arr);
                        }
                    }
                });
                if let Some(e) = err.take() {
                    return Err(e);
                }
                matched += 1;
            } else if name.starts_with("fc.")
                || name.starts_with("classifier.")
                || name.starts_with("head.")
            {
                skipped_classifier += 1;
            }
        }
        let missing = backbone_names
            .into_iter()
            .filter(|n| data.get(n).is_none() && data.get(&format!("backbone.{n}")).is_none())
            .collect();
        Ok(LoadReport {
            matched,
            skipped_classifier,
            missing,
        })
    }
}

pub struct BundleCache {
    pub bb_cache: BackboneCache,
    pub head_cache: HeadCache,
    pub b: usize,
    pub t: usize,
}

impl Module for ModelBundle {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.backbone
            .visit_params(&crate::nn::join(prefix, "backbone"), f);
        self.head.visit_params(&crate::nn::join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle(kind: HeadKind, seed: u64) -> ModelBundle {
        let hc = TemporalHeadConfig {
            kind,
            gru_hidden: 8,
            tf_model_dim: 8,
            tf_heads: 2,
            tf_ffn_dim: 16,
            ..Default::default()
        };
        ModelBundle::new(BackboneConfig::default(), hc, seed).unwrap()
    }

    #[test]
    fn fingerprint_changes_with_any_config_field() {
        let bc = BackboneConfig::default();
        let hc = TemporalHeadConfig {
            kind: HeadKind::Gru,
            ..Default::default()
        };
        let base = config_fingerprint(&bc, &hc);
        let mut hc2 = hc.clone();
        hc2.gru_hidden = 256;
        assert_ne!(base, config_fingerprint(&bc, &hc2));
        let mut bc2 = bc.clone();
        bc2.architecture = Architecture::ResNet50;
        assert_ne!(base, config_fingerprint(&bc2, &hc));
        let mut hc3 = hc.clone();
        hc3.dropout = 0.1;
        assert_ne!(base, config_fingerprint(&bc, &hc3));
    }

    #[test]
    fn bundle_forward_shape() {
        let bundle = tiny_bundle(HeadKind::Gru, 0);
        let frames = Array4::from_elem((2 * 3, 3, 112, 112), 0.1);
        let (logits, _) = bundle.forward(&frames, 2, 3).unwrap();
        assert_eq!(logits.dim(), (2, 3, 7));
    }

    #[test]
    fn weight_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ferw");
        let mut b1 = tiny_bundle(HeadKind::Transformer, 5);
        b1.save_weights(&path, serde_json::json!({})).unwrap();
        let mut b2 = tiny_bundle(HeadKind::Transformer, 999);
        b2.load_weights(&path, false).unwrap();
        let a1 = b1.export_arrays();
        let a2 = b2.export_arrays();
        assert_eq!(a1.len(), a2.len());
        for ((n1, v1), (n2, v2)) in a1.iter().zip(&a2) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "param {n1} differs");
        }
    }

    #[test]
    fn load_rejects_fingerprint_mismatch_without_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ferw");
        let mut b1 = tiny_bundle(HeadKind::Gru, 5);
        b1.save_weights(&path, serde_json::json!({})).unwrap();
        let hc = TemporalHeadConfig {
            kind: HeadKind::Gru,
            gru_hidden: 16, // differs
            ..Default::default()
        };
        let mut b2 = ModelBundle::new(BackboneConfig::default(), hc, 5).unwrap();
        match b2.load_weights(&path, false) {
            Err(FerError::FingerprintMismatch { .. }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backbone_weight_loading_skips_classifier_and_names_shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ferw");
        let mut donor = tiny_bundle(HeadKind::Static, 7);
        // write a backbone-only file plus a classifier entry
        let mut arrays: Vec<(String, ArrayD<f64>)> = Vec::new();
        donor.backbone.visit_params("", &mut |n, p| {
            arrays.push((n, p.value.clone()));
        });
        arrays.push((
            "classifier.weight".into(),
            ArrayD::zeros(ndarray::IxDyn(&[1000, 128])),
        ));
        let n_backbone = arrays.len() - 1;
        save_container(
            &path,
            &NamedArrays {
                fingerprint: "external".into(),
                meta: serde_json::json!({}),
                arrays: arrays.clone(),
            },
        )
        .unwrap();

        let mut target = tiny_bundle(HeadKind::Static, 8);
        let report = target.load_backbone_weights(&path).unwrap();
        assert_eq!(report.matched, n_backbone);
        assert_eq!(report.skipped_classifier, 1);
        assert!(report.missing.is_empty());

        // reshape one array: load must fail naming the parameter
        let mut bad = arrays;
        for (n, a) in &mut bad {
            if n == "conv1.weight" {
                *a = ArrayD::zeros(ndarray::IxDyn(&[8, 3, 25]));
            }
        }
        let bad_path = dir.path().join("bad.ferw");
        save_container(
            &bad_path,
            &NamedArrays {
                fingerprint: "external".into(),
                meta: serde_json::json!({}),
                arrays: bad,
            },
        )
        .unwrap();
        match target.load_backbone_weights(&bad_path) {
            Err(FerError::Load(msg)) => assert!(msg.contains("conv1.weight"), "{msg}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn backbone_load_then_save_then_reload_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ferw");
        let p2 = dir.path().join("b.ferw");
        let mut donor = tiny_bundle(HeadKind::Static, 3);
        donor.save_weights(&p1, serde_json::json!({})).unwrap();
        let mut mid = tiny_bundle(HeadKind::Static, 4);
        mid.load_weights(&p1, false).unwrap();
        mid.save_weights(&p2, serde_json::json!({})).unwrap();
        let mut end = tiny_bundle(HeadKind::Static, 5);
        end.load_weights(&p2, false).unwrap();
        for ((n1, v1), (_, v2)) in donor.export_arrays().iter().zip(&end.export_arrays()) {
            assert_eq!(v1, v2, "param {n1}");
        }
    }
}
