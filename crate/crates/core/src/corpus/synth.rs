//! Synthetic paired corpus with known word boundaries.
//!
//! Each concept owns a latent vector and a frame template. An image is the
//! normalized image of its concept set under a fixed random linear map; a
//! caption reads the image's concepts in a random order, each rendered as a
//! run of noisy template frames.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::archive::{Archive, Manifest, SimiPair, Split, UtteranceRecord, ARCHIVE_VERSION};
use crate::rng::{Rng, SeedStreams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_concepts: usize,
    pub concept_dim: usize,
    /// Concepts are drawn around this many group centers, which gives the
    /// similarity set graded scores.
    pub concept_groups: usize,
    pub frame_dim: usize,
    pub image_dim: usize,
    pub num_train_images: usize,
    pub num_test_images: usize,
    pub captions_per_image: usize,
    pub concepts_per_caption: [usize; 2],
    pub frames_per_concept: [usize; 2],
    pub frame_noise: f64,
    pub simi_pairs: usize,
    pub vocab_size: usize,
    pub vocab_dim: usize,
    pub frame_rate_hz: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_concepts: 48,
            concept_dim: 32,
            concept_groups: 12,
            frame_dim: 64,
            image_dim: 64,
            num_train_images: 1000,
            num_test_images: 200,
            captions_per_image: 5,
            concepts_per_caption: [3, 8],
            frames_per_concept: [4, 9],
            frame_noise: 0.05,
            simi_pairs: 200,
            vocab_size: 256,
            vocab_dim: 64,
            frame_rate_hz: 50,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_concepts", self.num_concepts),
            ("concept_dim", self.concept_dim),
            ("concept_groups", self.concept_groups),
            ("frame_dim", self.frame_dim),
            ("image_dim", self.image_dim),
            ("captions_per_image", self.captions_per_image),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, [lo, hi]) in [
            ("concepts_per_caption", self.concepts_per_caption),
            ("frames_per_concept", self.frames_per_concept),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(field, format!("empty range [{lo}, {hi}]")));
            }
        }
        if self.concepts_per_caption[1] > self.num_concepts {
            return Err(Error::config(
                "concepts_per_caption",
                format!("upper bound exceeds num_concepts {}", self.num_concepts),
            ));
        }
        if !(self.frame_noise >= 0.0) {
            return Err(Error::config("frame_noise", "must be >= 0"));
        }
        if self.num_train_images + self.num_test_images == 0 {
            return Err(Error::config("num_train_images", "corpus has no images"));
        }
        if self.simi_pairs > 0 && self.num_concepts < 2 {
            return Err(Error::config("simi_pairs", "need at least two concepts"));
        }
        if self.vocab_size == 1 || (self.vocab_size > 0 && self.vocab_dim == 0) {
            return Err(Error::config("vocab_size", "vocabulary needs >= 2 rows of positive width"));
        }
        Ok(())
    }
}

/// Ground-truth structure behind a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub latents: Vec<Vec<f64>>,
    pub image_concepts: Vec<Vec<usize>>,
    /// Concept sequence of every utterance, in archive order.
    pub utterance_concepts: Vec<Vec<usize>>,
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random unit templates, mutually orthogonal when `n <= dim`.
fn templates(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = gaussian_vec(rng, dim);
        if i < dim {
            for u in &out[..i] {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

struct Renderer<'a> {
    cfg: &'a GenConfig,
    templates: &'a [Vec<f64>],
    noise: Normal<f64>,
    frames: Vec<f32>,
    total: usize,
}

impl Renderer<'_> {
    fn render(&mut self, concepts: &[usize], rng: &mut Rng) -> (usize, usize, Vec<usize>) {
        let offset = self.total;
        let [lo, hi] = self.cfg.frames_per_concept;
        let mut starts = Vec::with_capacity(concepts.len());
        let mut len = 0;
        for &c in concepts {
            starts.push(len);
            let dur = rng.gen_range(lo..=hi);
            for _ in 0..dur {
                for &t in &self.templates[c] {
                    self.frames.push((t + self.noise.sample(rng)) as f32);
                }
            }
            len += dur;
        }
        self.total += len;
        (offset, len, starts)
    }
}

/// Generates a corpus in memory.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<(Archive, SynthTruth)> {
    cfg.validate()?;
    let streams = SeedStreams::new(seed);

    let mut rng = streams.stream("synth.concepts", &[]);
    let centers: Vec<Vec<f64>> = (0..cfg.concept_groups)
        .map(|_| {
            let mut v = gaussian_vec(&mut rng, cfg.concept_dim);
            normalize(&mut v);
            v
        })
        .collect();
    let group_of: Vec<usize> = (0..cfg.num_concepts).map(|c| c % cfg.concept_groups).collect();
    let spread = 1.0 / (cfg.concept_dim as f64).sqrt();
    let latents: Vec<Vec<f64>> = (0..cfg.num_concepts)
        .map(|c| {
            let mut v: Vec<f64> = centers[group_of[c]]
                .iter()
                .map(|x| x + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&mut v);
            v
        })
        .collect();
    let templates = templates(&mut streams.stream("synth.templates", &[]), cfg.num_concepts, cfg.frame_dim);
    let mut map_rng = streams.stream("synth.image_map", &[]);
    let image_map: Vec<Vec<f64>> = (0..cfg.image_dim)
        .map(|_| gaussian_vec(&mut map_rng, cfg.concept_dim))
        .collect();

    let num_images = cfg.num_train_images + cfg.num_test_images;
    let mut rng = streams.stream("synth.images", &[]);
    let all: Vec<usize> = (0..cfg.num_concepts).collect();
    let [clo, chi] = cfg.concepts_per_caption;
    let mut image_concepts = Vec::with_capacity(num_images);
    let mut images = Vec::with_capacity(num_images * cfg.image_dim);
    for _ in 0..num_images {
        let k = rng.gen_range(clo..=chi);
        let mut set: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
        set.sort_unstable();
        let mut latent = vec![0.0; cfg.concept_dim];
        for &c in &set {
            latent.iter_mut().zip(&latents[c]).for_each(|(a, b)| *a += b);
        }
        let mut img: Vec<f64> = image_map
            .iter()
            .map(|row| row.iter().zip(&latent).map(|(w, x)| w * x).sum())
            .collect();
        normalize(&mut img);
        images.extend(img.iter().map(|&x| x as f32));
        image_concepts.push(set);
    }

    let mut renderer = Renderer {
        cfg,
        templates: &templates,
        noise: Normal::new(0.0, cfg.frame_noise).expect("validated sigma"),
        frames: Vec::new(),
        total: 0,
    };
    let mut utterances = Vec::new();
    let mut utterance_concepts = Vec::new();
    let mut rng = streams.stream("synth.captions", &[]);
    for (img, concepts) in image_concepts.iter().enumerate() {
        let split = if img < cfg.num_train_images { Split::Train } else { Split::Test };
        for cap in 0..cfg.captions_per_image {
            let mut order = concepts.clone();
            order.shuffle(&mut rng);
            let (offset, len, starts) = renderer.render(&order, &mut rng);
            utterances.push(UtteranceRecord {
                id: format!("img{img:05}-cap{cap}"),
                image_id: Some(img),
                offset_frames: offset,
                num_frames: len,
                boundaries_gt: Some(starts),
                speaker: Some(format!("spk{}", cap % 3)),
                split: Some(split),
            });
            utterance_concepts.push(order);
        }
    }

    let mut simi = Vec::with_capacity(cfg.simi_pairs);
    let mut rng = streams.stream("synth.simi", &[]);
    for p in 0..cfg.simi_pairs {
        let a = rng.gen_range(0..cfg.num_concepts);
        // Half the pairs come from the same group so scores span the scale.
        let b = loop {
            let b = if rng.gen_bool(0.5) {
                let g = group_of[a];
                let peers: Vec<usize> = (0..cfg.num_concepts).filter(|&c| group_of[c] == g && c != a).collect();
                if peers.is_empty() {
                    rng.gen_range(0..cfg.num_concepts)
                } else {
                    *peers.choose(&mut rng).expect("non-empty")
                }
            } else {
                rng.gen_range(0..cfg.num_concepts)
            };
            if b != a {
                break b;
            }
        };
        let score = (10.0 * cosine(&latents[a], &latents[b]).max(0.0) * 1e4).round() / 1e4;
        let subset = if p < cfg.simi_pairs.div_ceil(2) { "dev" } else { "test" };
        let mut ids = Vec::new();
        for (side, c) in [("a", a), ("b", b)] {
            let (offset, len, starts) = renderer.render(&[c], &mut rng);
            let id = format!("simi{p:04}{side}");
            utterances.push(UtteranceRecord {
                id: id.clone(),
                image_id: None,
                offset_frames: offset,
                num_frames: len,
                boundaries_gt: Some(starts),
                speaker: None,
                split: Some(Split::Simi),
            });
            utterance_concepts.push(vec![c]);
            ids.push(id);
        }
        simi.push(SimiPair {
            utt_a: ids[0].clone(),
            utt_b: ids[1].clone(),
            score,
            subset: Some(subset.to_string()),
        });
    }

    let vocab = (cfg.vocab_size > 0).then(|| {
        let mut rng = streams.stream("synth.vocab", &[]);
        let mut out = Vec::with_capacity(cfg.vocab_size * cfg.vocab_dim);
        for _ in 0..cfg.vocab_size {
            let mut v = gaussian_vec(&mut rng, cfg.vocab_dim);
            normalize(&mut v);
            out.extend(v.iter().map(|&x| x as f32));
        }
        out
    });

    let manifest = Manifest {
        version: ARCHIVE_VERSION,
        frame_dim: cfg.frame_dim,
        image_dim: cfg.image_dim,
        vocab_dim: if cfg.vocab_size > 0 { cfg.vocab_dim } else { 0 },
        num_images,
        num_utterances: utterances.len(),
        vocab_size: cfg.vocab_size,
        frame_rate_hz: cfg.frame_rate_hz,
        total_frames: renderer.total,
        images_normalized: true,
    };
    let archive = Archive::new(
        manifest,
        images,
        renderer.frames,
        utterances,
        vocab,
        (cfg.simi_pairs > 0).then_some(simi),
    )?;
    Ok((
        archive,
        SynthTruth {
            latents,
            image_concepts,
            utterance_concepts,
        },
    ))
}

/// Generates a corpus and writes it to `dir`.
pub fn gen_synthetic(cfg: &GenConfig, seed: u64, dir: &Path) -> Result<Archive> {
    let (archive, _) = generate(cfg, seed)?;
    archive.write(dir)?;
    super::archive::write_json(&dir.join("gen_config.json"), cfg)?;
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_train_images: 6,
            num_test_images: 2,
            simi_pairs: 4,
            vocab_size: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn boundaries_match_concept_counts() {
        let (a, truth) = generate(&small(), 1).unwrap();
        for (u, c) in a.utterances.iter().zip(&truth.utterance_concepts) {
            assert_eq!(u.boundaries_gt.as_ref().unwrap().len(), c.len());
        }
        assert_eq!(a.utterances_in(Split::Train).len(), 30);
        assert_eq!(a.images_in(Split::Test), vec![6, 7]);
        assert!(a.warnings().is_empty());
    }

    #[test]
    fn fixed_ranges_fix_lengths() {
        let cfg = GenConfig {
            concepts_per_caption: [3, 3],
            frames_per_concept: [5, 5],
            simi_pairs: 0,
            ..small()
        };
        let (a, _) = generate(&cfg, 2).unwrap();
        assert!(a.utterances.iter().all(|u| u.num_frames == 15));
    }

    #[test]
    fn same_seed_same_archive() {
        assert_eq!(generate(&small(), 5).unwrap().0, generate(&small(), 5).unwrap().0);
        assert_ne!(generate(&small(), 5).unwrap().0, generate(&small(), 6).unwrap().0);
    }

    #[test]
    fn simi_scores_follow_latent_cosine() {
        let (a, truth) = generate(&small(), 3).unwrap();
        for p in a.simi.as_ref().unwrap() {
            let ca = truth.utterance_concepts[a.position(&p.utt_a).unwrap()][0];
            let cb = truth.utterance_concepts[a.position(&p.utt_b).unwrap()][0];
            let want = 10.0 * cosine(&truth.latents[ca], &truth.latents[cb]).max(0.0);
            assert!((p.score - want).abs() <= 5e-5);
        }
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        for cfg in [
            GenConfig { frames_per_concept: [5, 4], ..small() },
            GenConfig { concepts_per_caption: [0, 2], ..small() },
            GenConfig { frame_noise: -0.1, ..small() },
        ] {
            assert!(matches!(generate(&cfg, 0), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn templates_are_orthonormal() {
        let t = templates(&mut SeedStreams::new(0).stream("t", &[]), 10, 16);
        for i in 0..10 {
            for j in 0..10 {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
