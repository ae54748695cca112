//! On-disk embedding archive.
//!
//! A directory holding `manifest.json`, `images.f32`, `frames.f32`,
//! `utterances.json` and optionally `vocab.f32` and `simi.json`. The
//! `.f32` files are headerless little-endian 32-bit floats in row-major
//! order; every structural fact lives in the JSON sidecars.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use segalign_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub frame_dim: usize,
    pub image_dim: usize,
    pub vocab_dim: usize,
    pub num_images: usize,
    pub num_utterances: usize,
    pub vocab_size: usize,
    pub frame_rate_hz: u32,
    pub total_frames: usize,
    #[serde(default)]
    pub images_normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Simi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    /// `None` for utterances with no paired image, such as similarity probes.
    pub image_id: Option<usize>,
    pub offset_frames: usize,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries_gt: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl UtteranceRecord {
    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::Train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimiPair {
    pub utt_a: String,
    pub utt_b: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

/// In-memory contents of an archive directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub manifest: Manifest,
    pub images: Vec<f32>,
    pub frames: Vec<f32>,
    pub utterances: Vec<UtteranceRecord>,
    pub vocab: Option<Vec<f32>>,
    pub simi: Option<Vec<SimiPair>>,
    index: HashMap<String, usize>,
}

impl Archive {
    /// Assembles and validates an archive.
    pub fn new(
        manifest: Manifest,
        images: Vec<f32>,
        frames: Vec<f32>,
        utterances: Vec<UtteranceRecord>,
        vocab: Option<Vec<f32>>,
        simi: Option<Vec<SimiPair>>,
    ) -> Result<Self> {
        let index = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.clone(), i))
            .collect();
        let archive = Self {
            manifest,
            images,
            frames,
            utterances,
            vocab,
            simi,
            index,
        };
        archive.validate()?;
        Ok(archive)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != ARCHIVE_VERSION {
            return Err(Error::validation(
                "version",
                format!("expected {ARCHIVE_VERSION}, found {}", m.version),
            ));
        }
        for (field, v) in [("frame_dim", m.frame_dim), ("image_dim", m.image_dim)] {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        check_len("images.f32", m.num_images * m.image_dim, self.images.len())?;
        check_len("frames.f32", m.total_frames * m.frame_dim, self.frames.len())?;
        match &self.vocab {
            Some(v) => {
                if m.vocab_size < 2 || m.vocab_dim == 0 {
                    return Err(Error::validation(
                        "vocab_size",
                        "vocab.f32 present but vocab_size < 2 or vocab_dim == 0",
                    ));
                }
                check_len("vocab.f32", m.vocab_size * m.vocab_dim, v.len())?;
            }
            None if m.vocab_size != 0 => {
                return Err(Error::validation(
                    "vocab_size",
                    format!("manifest declares {} rows but vocab.f32 is absent", m.vocab_size),
                ))
            }
            None => {}
        }
        if self.utterances.len() != m.num_utterances {
            return Err(Error::validation(
                "num_utterances",
                format!(
                    "manifest declares {}, utterances.json lists {}",
                    m.num_utterances,
                    self.utterances.len()
                ),
            ));
        }
        if self.index.len() != self.utterances.len() {
            return Err(Error::validation("utterances.id", "ids are not unique"));
        }
        for u in &self.utterances {
            let field = |f: &str| format!("utterances[{}].{f}", u.id);
            if u.num_frames == 0 {
                return Err(Error::validation(field("num_frames"), "must be positive"));
            }
            if u.offset_frames + u.num_frames > m.total_frames {
                return Err(Error::validation(
                    field("offset_frames"),
                    format!(
                        "{}+{} exceeds total_frames {}",
                        u.offset_frames, u.num_frames, m.total_frames
                    ),
                ));
            }
            if let Some(img) = u.image_id {
                if img >= m.num_images {
                    return Err(Error::validation(
                        field("image_id"),
                        format!("{img} >= num_images {}", m.num_images),
                    ));
                }
            }
            if let Some(b) = &u.boundaries_gt {
                let ok = b.first() == Some(&0)
                    && b.windows(2).all(|w| w[0] < w[1])
                    && b.last().is_some_and(|&x| x < u.num_frames);
                if !ok {
                    return Err(Error::validation(
                        field("boundaries_gt"),
                        "must start at 0, increase strictly and stay below num_frames",
                    ));
                }
            }
        }
        if let Some(pairs) = &self.simi {
            for (i, p) in pairs.iter().enumerate() {
                for id in [&p.utt_a, &p.utt_b] {
                    if !self.index.contains_key(id) {
                        return Err(Error::validation(
                            format!("simi[{i}]"),
                            format!("unknown utterance `{id}`"),
                        ));
                    }
                }
                if !(0.0..=10.0).contains(&p.score) {
                    return Err(Error::validation(
                        format!("simi[{i}].score"),
                        format!("{} outside [0, 10]", p.score),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Non-fatal oddities: unreferenced images or frames.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let used: BTreeSet<usize> = self.utterances.iter().filter_map(|u| u.image_id).collect();
        let unused = self.manifest.num_images - used.len();
        if unused > 0 {
            out.push(format!("{unused} images have no utterance"));
        }
        let covered: usize = self.utterances.iter().map(|u| u.num_frames).sum();
        if covered < self.manifest.total_frames {
            out.push(format!(
                "{} frames are not referenced by any utterance",
                self.manifest.total_frames - covered
            ));
        }
        out
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingUtterance(id.to_string()))
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.manifest.image_dim;
        &self.images[i * d..(i + 1) * d]
    }

    pub fn frames_of(&self, u: &UtteranceRecord) -> &[f32] {
        let d = self.manifest.frame_dim;
        &self.frames[u.offset_frames * d..(u.offset_frames + u.num_frames) * d]
    }

    /// Frames of utterance `idx` as an `L x frame_dim` matrix.
    pub fn utterance_tensor(&self, idx: usize) -> Tensor<f32> {
        let u = &self.utterances[idx];
        Tensor::matrix(u.num_frames, self.manifest.frame_dim, self.frames_of(u).to_vec())
            .expect("validated sizes")
    }

    pub fn vocab_tensor(&self) -> Option<Tensor<f32>> {
        self.vocab.as_ref().map(|v| {
            Tensor::matrix(self.manifest.vocab_size, self.manifest.vocab_dim, v.clone())
                .expect("validated sizes")
        })
    }

    pub fn utterances_in(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split() == split && (split == Split::Simi || self.utterances[i].image_id.is_some()))
            .collect()
    }

    /// Sorted ids of the images referenced by utterances of `split`.
    pub fn images_in(&self, split: Split) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .utterances
            .iter()
            .filter(|u| u.split() == split)
            .filter_map(|u| u.image_id)
            .collect();
        set.into_iter().collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_f32(&dir.join("images.f32"), &self.images)?;
        write_f32(&dir.join("frames.f32"), &self.frames)?;
        write_json(&dir.join("utterances.json"), &self.utterances)?;
        if let Some(v) = &self.vocab {
            write_f32(&dir.join("vocab.f32"), v)?;
        }
        if let Some(s) = &self.simi {
            write_json(&dir.join("simi.json"), s)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let images = read_f32(&dir.join("images.f32"), manifest.num_images * manifest.image_dim)?;
        let frames = read_f32(&dir.join("frames.f32"), manifest.total_frames * manifest.frame_dim)?;
        let utterances: Vec<UtteranceRecord> = read_json(&dir.join("utterances.json"))?;
        let vocab_path = dir.join("vocab.f32");
        let vocab = if vocab_path.exists() {
            Some(read_f32(&vocab_path, manifest.vocab_size * manifest.vocab_dim)?)
        } else {
            None
        };
        let simi_path = dir.join("simi.json");
        let simi = if simi_path.exists() {
            Some(read_json(&simi_path)?)
        } else {
            None
        };
        Self::new(manifest, images, frames, utterances, vocab, simi)
    }
}

fn check_len(file: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Size {
            file: file.to_string(),
            expected: expected as u64 * 4,
            actual: actual as u64 * 4,
        });
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::json(path, e))
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = expected_values as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Archive {
        let manifest = Manifest {
            version: 1,
            frame_dim: 2,
            image_dim: 3,
            vocab_dim: 0,
            num_images: 1,
            num_utterances: 2,
            vocab_size: 0,
            frame_rate_hz: 50,
            total_frames: 5,
            images_normalized: false,
        };
        let utts = vec![
            UtteranceRecord {
                id: "a".into(),
                image_id: Some(0),
                offset_frames: 0,
                num_frames: 3,
                boundaries_gt: Some(vec![0, 2]),
                speaker: Some("s1".into()),
                split: None,
            },
            UtteranceRecord {
                id: "b".into(),
                image_id: Some(0),
                offset_frames: 3,
                num_frames: 2,
                boundaries_gt: None,
                speaker: None,
                split: Some(Split::Test),
            },
        ];
        let frames = vec![0.1, -2.5, 3.0, f32::MIN_POSITIVE, 1e-30, 7.0, 8.0, 9.0, 10.0, 11.0];
        Archive::new(manifest, vec![0.25, 0.5, 1.0], frames, utts, None, None).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny();
        a.write(dir.path()).unwrap();
        let b = Archive::read(dir.path()).unwrap();
        assert_eq!(a, b);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.frames), bits(&b.frames));
    }

    #[test]
    fn first_four_bytes_are_first_frame_value() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("frames.f32")).unwrap();
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 0.1);
    }

    #[test]
    fn short_image_file_is_a_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny();
        a.write(dir.path()).unwrap();
        let mut m = a.manifest.clone();
        m.num_images = 3;
        write_json(&dir.path().join("manifest.json"), &m).unwrap();
        match Archive::read(dir.path()) {
            Err(Error::Size { expected, actual, .. }) => {
                assert_eq!(expected, 36);
                assert_eq!(actual, 12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_names_the_field() {
        let a = tiny();
        let mut m = a.manifest.clone();
        m.num_utterances = 3;
        let err = Archive::new(m, a.images, a.frames, a.utterances, None, None).unwrap_err();
        assert!(err.to_string().contains("num_utterances"), "{err}");
    }

    #[test]
    fn bad_boundaries_are_rejected() {
        let a = tiny();
        let mut u = a.utterances.clone();
        u[0].boundaries_gt = Some(vec![1, 2]);
        let err = Archive::new(a.manifest, a.images, a.frames, u, None, None).unwrap_err();
        assert!(err.to_string().contains("boundaries_gt"), "{err}");
    }

    #[test]
    fn unknown_manifest_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replacen('{', "{\"extra\": 1,", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(Archive::read(dir.path()), Err(Error::Json { .. })));
    }
}
