//! Checkpoint files: magic, metadata length, JSON metadata, f32 blob.
//!
//! The blob holds the parameters in layout order, followed by the Adam
//! first and second moments when `has_moments` is set. All numbers are
//! little-endian.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use segalign_tensor::Tensor;

use super::config::TrainConfig;
use super::optim::Adam;
use crate::alignment::FrozenSpec;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCLIP01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `audio_visual` or `twin`.
    pub kind: String,
    pub config: TrainConfig,
    pub config_digest: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub frame_dim: usize,
    /// Frozen encoders the parameters were trained against, with digests
    /// of their weights.
    pub frozen: Vec<(FrozenSpec, String)>,
    pub layout: Vec<ParamLayout>,
    pub adam_t: u64,
    pub has_moments: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
}

pub fn layout_of(params: &ParamStore<f32>) -> Vec<ParamLayout> {
    params
        .iter()
        .map(|p| ParamLayout {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
        })
        .collect()
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + meta.len() + 12 * self.params.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in self.params.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(adam) = &self.adam {
            for v in adam.m.iter().chain(&adam.v).flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ckpt_err(path, "missing SGCLIP01 magic"));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ckpt_err(path, format!("metadata length {meta_len} exceeds file")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| ckpt_err(path, format!("metadata: {e}")))?;

        let n: usize = meta.layout.iter().map(|l| l.shape.iter().product::<usize>()).sum();
        let copies = if meta.has_moments { 3 } else { 1 };
        let blob = &bytes[meta_end..];
        if blob.len() != 4 * n * copies {
            return Err(ckpt_err(
                path,
                format!("blob has {} bytes, layout needs {}", blob.len(), 4 * n * copies),
            ));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut params = ParamStore::new();
        let mut off = 0;
        for l in &meta.layout {
            let len: usize = l.shape.iter().product();
            params.insert(l.name.clone(), Tensor::new(l.shape.clone(), values[off..off + len].to_vec())?);
            off += len;
        }
        for (p, l) in params.iter_mut().zip(&meta.layout) {
            p.frozen = l.frozen;
        }

        let adam = meta.has_moments.then(|| {
            let split = |start: usize| {
                let mut o = start;
                meta.layout
                    .iter()
                    .map(|l| {
                        let len: usize = l.shape.iter().product();
                        o += len;
                        values[o - len..o].to_vec()
                    })
                    .collect::<Vec<_>>()
            };
            let m = split(n);
            let v = split(2 * n);
            let mut a = Adam::new(&params);
            a.t = meta.adam_t;
            a.m = m;
            a.v = v;
            a
        });
        Ok(Self { meta, params, adam })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::add_linear;
    use crate::rng::SeedStreams;

    fn sample() -> Checkpoint {
        let mut rng = SeedStreams::new(3).stream("init", &[]);
        let mut params = ParamStore::<f32>::new();
        add_linear(&mut params, &mut rng, "a", 3, 2, 1.0);
        add_linear(&mut params, &mut rng, "b", 2, 4, 1.0);
        params.set_frozen("b", true);
        let mut adam = Adam::new(&params);
        adam.t = 7;
        adam.m[0][1] = 0.25;
        adam.v[3][2] = 1.5;
        let cfg = TrainConfig::desk();
        Checkpoint {
            meta: CheckpointMeta {
                kind: "audio_visual".into(),
                config_digest: cfg.digest(),
                config: cfg,
                epoch: 2,
                step: 40,
                frame_dim: 3,
                frozen: vec![],
                layout: layout_of(&params),
                adam_t: 7,
                has_moments: true,
            },
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample();
        c.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..8], b"SGCLIP01");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4], Path::new("t.ckpt")).unwrap_err();
        assert!(err.to_string().contains("blob"), "{err}");
        let err = Checkpoint::from_bytes(b"NOTMAGIC00000000", Path::new("t.ckpt")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
