//! Training configuration: defaults, presets, JSON loading and overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::ModelConfig;
use crate::{Error, Result};

/// Settings of the audio-only twin-branch mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    /// Input width of the right frozen encoder; segment embeddings reach it
    /// through the right projection.
    pub right_dim: usize,
    /// `mlp` or `identity` (the latter needs `right_dim == model.out_dim`).
    pub right_projection: String,
    pub left_seed: u64,
    pub right_seed: u64,
    pub symmetric: bool,
    /// Caption index used as the retrieval candidate for each test image.
    pub candidate_caption: usize,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            right_dim: 96,
            right_projection: "mlp".into(),
            left_seed: 0,
            right_seed: 1,
            symmetric: false,
            candidate_caption: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub tau_ret: f64,
    pub n_neg: usize,
    pub n_hard_max: usize,
    pub negative_sampler: String,
    pub kmeans_k: usize,
    pub kmeans_max_iter: usize,
    /// Re-cluster the pool at the start of every epoch.
    pub recompute_clusters: bool,
    pub epochs: usize,
    pub nfc_warmup_steps: usize,
    pub head: String,
    pub lambda: f64,
    pub tau_vq: f64,
    pub aux_mlm: bool,
    pub mask_prob: f64,
    pub aux_weight: f64,
    pub seed: u64,
    pub normalize_images: bool,
    pub prenormalize_segments: bool,
    /// Merge ground-truth boundaries from the archive into detected ones.
    pub external_boundaries: bool,
    /// Number of test captions used for per-epoch validation; 0 means all.
    pub val_subsample: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub twin: TwinConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 21,
            lr_decay: 0.95,
            lr_decay_every: 3,
            tau_ret: 0.07,
            n_neg: 1024,
            n_hard_max: 512,
            negative_sampler: "clustered".into(),
            kmeans_k: 64,
            kmeans_max_iter: 50,
            recompute_clusters: false,
            epochs: 30,
            nfc_warmup_steps: 100,
            head: "direct".into(),
            lambda: 0.0,
            tau_vq: 0.1,
            aux_mlm: false,
            mask_prob: 0.15,
            aux_weight: 1.0,
            seed: 0,
            normalize_images: true,
            prenormalize_segments: false,
            external_boundaries: false,
            val_subsample: 0,
            checkpoint_every: 1,
            model: ModelConfig::default(),
            twin: TwinConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Scaled for a single CPU core on the synthetic corpus.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Unknown {
                kind: "preset",
                name: other.into(),
                known: "paper, desk".into(),
            }),
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            n_neg: 256,
            n_hard_max: 128,
            ..Self::default()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos_f = [
            ("lr", self.lr),
            ("tau_ret", self.tau_ret),
            ("tau_vq", self.tau_vq),
        ];
        for (field, v) in pos_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", format!("must be in (0, 1], got {}", self.lr_decay)));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("n_neg", self.n_neg),
            ("kmeans_k", self.kmeans_k),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_hard_max > self.n_neg {
            return Err(Error::config(
                "n_hard_max",
                format!("{} exceeds n_neg {}", self.n_hard_max, self.n_neg),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob", format!("must be in [0, 1], got {}", self.mask_prob)));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("aux_weight", "must be >= 0"));
        }
        self.model.validate()?;
        match self.twin.right_projection.as_str() {
            "mlp" => {}
            "identity" if self.twin.right_dim == self.model.out_dim => {}
            "identity" => {
                return Err(Error::config(
                    "twin.right_projection",
                    format!(
                        "identity needs twin.right_dim == model.out_dim ({} != {})",
                        self.twin.right_dim, self.model.out_dim
                    ),
                ))
            }
            other => {
                return Err(Error::Unknown {
                    kind: "right projection",
                    name: other.into(),
                    known: "mlp, identity".into(),
                })
            }
        }
        if self.twin.right_dim == 0 || !self.twin.right_dim.is_multiple_of(self.model.text_heads) {
            return Err(Error::config(
                "twin.right_dim",
                format!("must be a positive multiple of model.text_heads ({})", self.model.text_heads),
            ));
        }
        crate::trainer::NegativeRegistry::default().check(&self.negative_sampler)?;
        crate::alignment::HeadRegistry::<f32>::default().build(
            &self.head,
            &crate::alignment::HeadSettings {
                lambda: self.lambda,
                tau_vq: self.tau_vq,
            },
        )?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Preset defaults, then the JSON file, then `key=value` overrides
    /// (dotted keys reach nested sections; values parse as JSON when they
    /// can and as strings otherwise). The result is validated.
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            if !user.is_object() {
                return Err(Error::config("<root>", "config file must hold a JSON object"));
            }
            merge(&mut value, user);
        }
        Self::resolve(value, overrides)
    }

    /// This configuration with `key=value` overrides applied, validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::resolve(serde_json::to_value(self).expect("config serializes"), overrides)
    }

    fn resolve(mut value: Value, overrides: &[String]) -> Result<Self> {
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.clone(), "override must look like key=value"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
