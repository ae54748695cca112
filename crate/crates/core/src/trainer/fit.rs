//! The audio-visual training loop and inference helpers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use segalign_tensor::{Graph, Tensor};

use super::checkpoint::{layout_of, Checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::model::{composite_loss, encode_utterances, AudioVisualModel, Boundaries, LossTerms, LossWeights, StepPlan};
use super::negatives::{NegativeRegistry, NegativeSampler};
use super::optim::Adam;
use super::schedule::{loss_schedule, step_lr};
use crate::alignment::{AlignmentHead, HeadContext, HeadRegistry, HeadSettings, VocabularyTable};
use crate::corpus::{kmeans_fit, write_json, Archive, EmbeddingPool, Split};
use crate::encoder::sample_nfc_negatives;
use crate::eval::{
    emit_report, eval_simi, recall_at_k, DirectionalRecall, ExtractionPoint, RetrievalReport, RetrievalRow, SimiReport,
};
use crate::rng::{Rng, SeedStreams};
use crate::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const EMBED_CHUNK: usize = 64;

/// A model together with the head and vocabulary it runs with.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: TrainConfig,
    pub model: AudioVisualModel,
    pub head: Box<dyn AlignmentHead<f32>>,
    pub vocab: Option<Tensor<f32>>,
}

/// Per-utterance representations at every extraction point.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    /// Frozen-encoder output in the joint space.
    pub sentence: Vec<Vec<f64>>,
    pub segment_mean: Vec<Vec<f64>>,
    pub frame_mean: Vec<Vec<f64>>,
    pub starts: Vec<Vec<usize>>,
}

impl Embedded {
    pub fn at(&self, point: ExtractionPoint) -> &[Vec<f64>] {
        match point {
            ExtractionPoint::FrameMean => &self.frame_mean,
            ExtractionPoint::SegmentMean => &self.segment_mean,
            ExtractionPoint::Sentence => &self.sentence,
        }
    }
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn mean_rows(t: &Tensor<f32>, start: usize, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; t.cols()];
    for r in start..start + len {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    acc.iter().map(|a| a / len as f64).collect()
}

impl Pipeline {
    /// Checks the configuration against the archive and initializes a
    /// fresh model from the `init` stream.
    pub fn new(cfg: &TrainConfig, archive: &Archive) -> Result<Self> {
        let (head, vocab) = Self::parts(cfg, archive)?;
        let mut rng = SeedStreams::new(cfg.seed).stream("init", &[]);
        let model = AudioVisualModel::new(&cfg.model, archive.manifest.frame_dim, cfg.aux_mlm, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            head,
            vocab,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, archive: &Archive) -> Result<Self> {
        if ckpt.meta.kind != "audio_visual" {
            return Err(Error::Invalid(format!(
                "checkpoint holds a `{}` model, expected audio_visual",
                ckpt.meta.kind
            )));
        }
        let mut p = Self::new(&ckpt.meta.config, archive)?;
        if ckpt.meta.frame_dim != p.model.frame_dim || layout_of(&p.model.params) != ckpt.meta.layout {
            return Err(Error::Invalid("checkpoint layout does not match the configured model".into()));
        }
        if let Some((_, digest)) = ckpt.meta.frozen.first() {
            if *digest != p.model.text.digest() {
                return Err(Error::Invalid("checkpoint was trained against a different frozen encoder".into()));
            }
        }
        p.model.params = ckpt.params.clone();
        Ok(p)
    }

    fn parts(cfg: &TrainConfig, archive: &Archive) -> Result<(Box<dyn AlignmentHead<f32>>, Option<Tensor<f32>>)> {
        cfg.validate()?;
        let m = &archive.manifest;
        if cfg.model.joint_dim != m.image_dim {
            return Err(Error::config(
                "model.joint_dim",
                format!("must equal the archive image_dim {} (got {})", m.image_dim, cfg.model.joint_dim),
            ));
        }
        let head = HeadRegistry::<f32>::default().build(
            &cfg.head,
            &HeadSettings {
                lambda: cfg.lambda,
                tau_vq: cfg.tau_vq,
            },
        )?;
        let vocab = if head.needs_vocab() {
            let table = archive
                .vocab_tensor()
                .ok_or_else(|| Error::config("head", format!("head `{}` needs vocab.f32 in the archive", cfg.head)))?;
            if m.vocab_dim != cfg.model.out_dim {
                return Err(Error::config(
                    "model.out_dim",
                    format!("must equal the archive vocab_dim {} (got {})", m.vocab_dim, cfg.model.out_dim),
                ));
            }
            Some(VocabularyTable::new(table)?.matrix().clone())
        } else {
            None
        };
        Ok((head, vocab))
    }

    fn boundaries_for<'a>(&self, archive: &Archive, idx: &[usize], store: &'a mut Vec<Vec<usize>>) -> Result<Boundaries<'a>> {
        if !self.cfg.external_boundaries {
            return Ok(Boundaries::Detect);
        }
        *store = external_starts(archive, idx)?;
        Ok(Boundaries::Merge(store))
    }

    /// Inference over the given utterances, in chunks.
    pub fn embed(&self, archive: &Archive, utterances: &[usize]) -> Result<Embedded> {
        let mut out = Embedded {
            sentence: Vec::with_capacity(utterances.len()),
            segment_mean: Vec::with_capacity(utterances.len()),
            frame_mean: Vec::with_capacity(utterances.len()),
            starts: Vec::with_capacity(utterances.len()),
        };
        for chunk in utterances.chunks(EMBED_CHUNK) {
            let mut g = Graph::<f32>::new();
            let p = self.model.params.bind(&mut g);
            let frames: Vec<Tensor<f32>> = chunk.iter().map(|&u| archive.utterance_tensor(u)).collect();
            let mut ext = Vec::new();
            let b = self.boundaries_for(archive, chunk, &mut ext)?;
            let enc = encode_utterances(&mut g, &p, &self.model.cfg, &frames, b)?;
            let mut s = enc.segments;
            if self.cfg.prenormalize_segments {
                s = g.l2_normalize(s)?;
            }
            let vocab = self.vocab.as_ref().map(|v| g.constant(v.clone()));
            let ctx = HeadContext {
                vocab,
                owner: &enc.owner,
                num_sequences: enc.lengths.len(),
            };
            let h = self.head.apply(&mut g, s, &ctx)?;
            let joint = self.model.text.encode_batch(&mut g, h.segments, &enc.lengths)?.joint;

            out.sentence.extend(rows_f64(g.value(joint)));
            let (z, sv) = (g.value(enc.frames), g.value(enc.segments));
            let mut seg_off = 0;
            for (u, &(off, len)) in enc.spans.iter().enumerate() {
                out.frame_mean.push(mean_rows(z, off, len));
                out.segment_mean.push(mean_rows(sv, seg_off, enc.lengths[u]));
                seg_off += enc.lengths[u];
            }
            out.starts.extend(enc.starts);
        }
        Ok(out)
    }

    /// Image-speech retrieval on the split's captions and images. A
    /// nonzero `subsample` keeps only the first that many captions.
    pub fn retrieval(&self, archive: &Archive, split: Split, subsample: usize) -> Result<DirectionalRecall> {
        let (utts, images, gold) = retrieval_set(archive, split, subsample)?;
        let emb = self.embed(archive, &utts)?;
        recall_at_k(&emb.sentence, &images, &gold, &RECALL_KS)
    }

    pub fn simi(&self, archive: &Archive, point: ExtractionPoint, label: &str) -> Result<SimiReport> {
        let pairs = archive
            .simi
            .as_deref()
            .ok_or_else(|| Error::Invalid("archive has no simi.json".into()))?;
        let mut ids: Vec<&str> = pairs.iter().flat_map(|p| [p.utt_a.as_str(), p.utt_b.as_str()]).collect();
        ids.sort_unstable();
        ids.dedup();
        let idx = ids
            .iter()
            .map(|id| archive.position(id))
            .collect::<Result<Vec<_>>>()?;
        let emb = self.embed(archive, &idx)?;
        let reps: HashMap<String, Vec<f64>> = ids
            .iter()
            .zip(emb.at(point))
            .map(|(id, v)| (id.to_string(), v.clone()))
            .collect();
        eval_simi(pairs, &reps, point, label, Some(self.cfg.digest()))
    }
}

/// Ground-truth starts of the given utterances.
pub fn external_starts(archive: &Archive, idx: &[usize]) -> Result<Vec<Vec<usize>>> {
    idx.iter()
        .map(|&u| {
            let r = &archive.utterances[u];
            r.boundaries_gt.clone().ok_or_else(|| {
                Error::config(
                    "external_boundaries",
                    format!("utterance `{}` has no ground-truth boundaries", r.id),
                )
            })
        })
        .collect()
}

/// Captions of `split` that have an image, the split's images, and each
/// caption's image position.
pub fn retrieval_set(archive: &Archive, split: Split, subsample: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<usize>)> {
    let image_ids = archive.images_in(split);
    if image_ids.is_empty() {
        return Err(Error::Invalid(format!("no images in the {split:?} split")));
    }
    let pos: HashMap<usize, usize> = image_ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut utts: Vec<usize> = archive
        .utterances_in(split)
        .into_iter()
        .filter(|&u| archive.utterances[u].image_id.is_some())
        .collect();
    if subsample > 0 {
        utts.truncate(subsample);
    }
    let gold = utts
        .iter()
        .map(|&u| pos[&archive.utterances[u].image_id.expect("filtered")])
        .collect();
    let images = image_ids
        .iter()
        .map(|&i| archive.image(i).iter().map(|&v| v as f64).collect())
        .collect();
    Ok((utts, images, gold))
}

/// One line of `metrics.jsonl`. Inactive terms are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss_nfc: Option<f64>,
    pub loss_ret: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_aux: Option<f64>,
    pub lr: f64,
}

/// One line of `epochs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub validation: DirectionalRecall,
    /// Relative to the run directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub pipeline: Pipeline,
    pub epochs: Vec<EpochRecord>,
    pub test: DirectionalRecall,
    pub last_checkpoint: Option<PathBuf>,
    pub report: PathBuf,
}

/// Frozen image pool over the training images, clustered when the sampler
/// mines hard negatives.
pub fn build_pool(cfg: &TrainConfig, archive: &Archive, sampler: &dyn NegativeSampler, epoch: usize) -> Result<EmbeddingPool> {
    let ids = archive.images_in(Split::Train);
    let mut pool = EmbeddingPool::from_rows(&archive.images, archive.manifest.image_dim, &ids, cfg.normalize_images)?;
    if sampler.uses_clusters() {
        let points: Vec<Vec<f64>> = (0..pool.len())
            .map(|r| pool.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        let k = cfg.kmeans_k.min(pool.len());
        let id = if cfg.recompute_clusters { epoch as u64 } else { 0 };
        let mut rng = SeedStreams::new(cfg.seed).stream("kmeans", &[id]);
        let km = kmeans_fit(&points, k, cfg.kmeans_max_iter, &mut rng)?;
        pool.set_clusters(km.assignment)?;
    }
    Ok(pool)
}

/// The training utterances in the order epoch `epoch` visits them.
pub fn epoch_order(streams: &SeedStreams, train: &[usize], epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut streams.stream("data", &[epoch as u64]));
    order
}

/// Next-frame negatives per utterance, with the count clamped to what the
/// utterance length allows. Utterances of fewer than three frames get none.
pub fn plan_nfc(lengths: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<Vec<Vec<usize>>>> {
    lengths
        .iter()
        .map(|&len| {
            if len < 3 {
                Ok(Vec::new())
            } else {
                sample_nfc_negatives(len, k.min(len - 2), rng)
            }
        })
        .collect()
}

/// Mutable state of a run between steps.
struct RunState {
    epoch: usize,
    step: usize,
    adam: Adam,
}

/// Everything a run needs besides the model.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub archive: &'a Archive,
    pub streams: SeedStreams,
    pub sampler: Box<dyn NegativeSampler>,
    pub pool: EmbeddingPool,
    pub train: Vec<usize>,
    pub n_neg: usize,
    pub n_hard: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, archive: &'a Archive) -> Result<Self> {
        cfg.validate()?;
        let sampler = NegativeRegistry::default().build(&cfg.negative_sampler)?;
        let pool = build_pool(cfg, archive, sampler.as_ref(), 1)?;
        if pool.len() < 2 {
            return Err(Error::TooSmall {
                what: "training images",
                actual: pool.len(),
                required: 2,
            });
        }
        let n_neg = cfg.n_neg.min(pool.len() - 1);
        let n_hard = cfg.n_hard_max.min(n_neg);
        if n_neg < cfg.n_neg {
            log::warn!("n_neg {} clamped to {} by the pool of {} images", cfg.n_neg, n_neg, pool.len());
        }
        let train: Vec<usize> = archive
            .utterances_in(Split::Train)
            .into_iter()
            .filter(|&u| archive.utterances[u].image_id.is_some())
            .collect();
        if train.is_empty() {
            return Err(Error::Invalid("no paired training utterances".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            archive,
            streams: SeedStreams::new(cfg.seed),
            sampler,
            pool,
            train,
            n_neg,
            n_hard,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Fixes every random choice of global step `step`.
    pub fn plan(&self, epoch: usize, step: usize, batch: &[usize]) -> Result<StepPlan<f32>> {
        let active = loss_schedule(step, epoch, self.cfg.nfc_warmup_steps);
        let frames: Vec<Tensor<f32>> = batch.iter().map(|&u| self.archive.utterance_tensor(u)).collect();
        let nfc_negatives = if active.nfc {
            let lengths: Vec<usize> = frames.iter().map(|f| f.rows()).collect();
            let mut rng = self.streams.stream("nfc", &[step as u64]);
            Some(plan_nfc(&lengths, self.cfg.model.nfc_negatives, &mut rng)?)
        } else {
            None
        };
        let retrieval = if active.ret {
            let mut rng = self.streams.stream("negatives", &[step as u64]);
            let d = self.pool.dim();
            let mut data = Vec::with_capacity(batch.len() * (self.n_neg + 1) * d);
            for &u in batch {
                let image = self.archive.utterances[u].image_id.expect("paired");
                let pos = self
                    .pool
                    .position(image)
                    .ok_or_else(|| Error::Invalid(format!("image {image} is not a training image")))?;
                let negs = self.sampler.sample(&self.pool, pos, self.n_neg, self.n_hard, &mut rng)?;
                data.extend_from_slice(self.pool.row(pos));
                for n in negs {
                    data.extend_from_slice(self.pool.row(n));
                }
            }
            Some(Tensor::matrix(batch.len() * (self.n_neg + 1), d, data)?)
        } else {
            None
        };
        let mask_seed = (self.cfg.aux_mlm && active.ret).then(|| self.streams.derive("mask", &[step as u64]));
        let external = if self.cfg.external_boundaries {
            Some(external_starts(self.archive, batch)?)
        } else {
            None
        };
        Ok(StepPlan {
            frames,
            nfc_negatives,
            retrieval,
            mask_seed,
            mask_prob: self.cfg.mask_prob,
            external,
            fixed: None,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            tau_ret: self.cfg.tau_ret,
            aux_weight: self.cfg.aux_weight,
            prenormalize: self.cfg.prenormalize_segments,
        }
    }

    /// Forward, backward and one Adam update. Returns the loss values and
    /// the total, or `None` without updating when the loss is not finite.
    fn step(&self, pipe: &mut Pipeline, adam: &mut Adam, plan: &StepPlan<f32>, lr: f64) -> Result<Option<(LossValues, f64)>> {
        let mut g = Graph::<f32>::new();
        let p = pipe.model.params.bind(&mut g);
        let terms = composite_loss(
            &mut g,
            &p,
            &pipe.model.cfg,
            &pipe.model.text,
            pipe.head.as_ref(),
            pipe.vocab.as_ref(),
            plan,
            &self.weights(),
        )?;
        let total = g.value(terms.total).data()[0] as f64;
        let values = LossValues::of(&g, &terms);
        if !total.is_finite() {
            return Ok(None);
        }
        let grads = g.backward(terms.total)?;
        let per_param: Vec<Option<Tensor<f32>>> = pipe
            .model
            .params
            .iter()
            .map(|prm| {
                if prm.frozen {
                    None
                } else {
                    grads.get(p.var(&prm.name)).cloned()
                }
            })
            .collect();
        adam.step(&mut pipe.model.params, &per_param, lr)?;
        Ok(Some((values, total)))
    }

    fn checkpoint(&self, pipe: &Pipeline, st: &RunState) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                kind: "audio_visual".into(),
                config: self.cfg.clone(),
                config_digest: self.cfg.digest(),
                epoch: st.epoch,
                step: st.step,
                frame_dim: pipe.model.frame_dim,
                frozen: vec![(pipe.model.text.spec(), pipe.model.text.digest())],
                layout: layout_of(&pipe.model.params),
                adam_t: st.adam.t,
                has_moments: true,
            },
            params: pipe.model.params.clone(),
            adam: Some(st.adam.clone()),
        }
    }
}

/// Loss values of one step, before logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub nfc: Option<f64>,
    pub ret: Option<f64>,
    pub reg: Option<f64>,
    pub aux: Option<f64>,
}

impl LossValues {
    fn of(g: &Graph<f32>, t: &LossTerms) -> Self {
        Self {
            nfc: LossTerms::value(g, t.nfc),
            ret: LossTerms::value(g, t.ret),
            reg: LossTerms::value(g, t.reg),
            aux: LossTerms::value(g, t.aux),
        }
    }
}

pub(crate) fn jsonl(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub(crate) fn write_line<S: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &S) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Loss values of the first `steps` steps of a fresh run, without
/// updating anything on disk. Used to check the schedule and the
/// head identities.
pub fn dry_losses(cfg: &TrainConfig, archive: &Archive, steps: usize) -> Result<Vec<StepMetrics>> {
    let tr = Trainer::new(cfg, archive)?;
    let mut pipe = Pipeline::new(cfg, archive)?;
    let mut adam = Adam::new(&pipe.model.params);
    let mut out = Vec::new();
    let mut step = 0;
    'outer: for epoch in 1..=cfg.epochs {
        let lr = step_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);
        for batch in epoch_order(&tr.streams, &tr.train, epoch).chunks(cfg.batch_size) {
            if step == steps {
                break 'outer;
            }
            let plan = tr.plan(epoch, step, batch)?;
            let Some((v, _)) = tr.step(&mut pipe, &mut adam, &plan, lr)? else {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    last_checkpoint: None,
                });
            };
            out.push(StepMetrics {
                epoch,
                step,
                loss_nfc: v.nfc,
                loss_ret: v.ret,
                loss_reg: v.reg,
                loss_aux: v.aux,
                lr,
            });
            step += 1;
        }
    }
    Ok(out)
}

/// Trains on `archive` and writes `config.json`, `metrics.jsonl`,
/// `epochs.jsonl`, `checkpoints/epoch_NNN.ckpt` and `report.{json,txt}`
/// under `out`. With `resume`, training continues after the checkpoint's
/// last completed epoch; the run's configuration must match except for
/// the epoch count.
pub fn fit(cfg: &TrainConfig, archive: &Archive, out: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tr = Trainer::new(cfg, archive)?;
    let mut pipe = Pipeline::new(cfg, archive)?;
    log::info!("resolved config: {}", serde_json::to_string(cfg).expect("config serializes"));
    write_json(&out.join("config.json"), cfg)?;

    let mut st = RunState {
        epoch: 0,
        step: 0,
        adam: Adam::new(&pipe.model.params),
    };
    let mut last_checkpoint = None;
    if let Some(path) = resume {
        let ck = Checkpoint::read(path)?;
        let mut theirs = ck.meta.config.clone();
        theirs.epochs = cfg.epochs;
        if theirs != *cfg {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "checkpoint configuration differs from this run".into(),
            });
        }
        let loaded = Pipeline::from_checkpoint(&ck, archive)?;
        pipe.model.params = loaded.model.params;
        st.adam = ck.adam.ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: "checkpoint has no optimizer state".into(),
        })?;
        st.epoch = ck.meta.epoch;
        st.step = ck.meta.step;
        last_checkpoint = Some(path.to_path_buf());
        log::info!("resuming after epoch {} (step {})", st.epoch, st.step);
    }

    let metrics_path = out.join("metrics.jsonl");
    let epochs_path = out.join("epochs.jsonl");
    let mut metrics = jsonl(&metrics_path, resume.is_some())?;
    let mut epochs_log = jsonl(&epochs_path, resume.is_some())?;
    let mut records = Vec::new();
    let mut trainer = tr;

    for epoch in st.epoch + 1..=cfg.epochs {
        if cfg.recompute_clusters && epoch > 1 {
            trainer.pool = build_pool(cfg, archive, trainer.sampler.as_ref(), epoch)?;
        }
        let lr = step_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);
        let order = epoch_order(&trainer.streams, &trainer.train, epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let plan = trainer.plan(epoch, st.step, batch)?;
            let Some((v, total)) = trainer.step(&mut pipe, &mut st.adam, &plan, lr)? else {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: st.step,
                    last_checkpoint,
                });
            };
            write_line(
                &mut metrics,
                &metrics_path,
                &StepMetrics {
                    epoch,
                    step: st.step,
                    loss_nfc: v.nfc,
                    loss_ret: v.ret,
                    loss_reg: v.reg,
                    loss_aux: v.aux,
                    lr,
                },
            )?;
            sum += total;
            steps += 1;
            st.step += 1;
        }
        st.epoch = epoch;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

        let validation = pipe.retrieval(archive, Split::Test, cfg.val_subsample)?;
        let mut ckpt_path = None;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let rel = Path::new("checkpoints").join(format!("epoch_{epoch:03}.ckpt"));
            let path = out.join(&rel);
            trainer.checkpoint(&pipe, &st).write(&path)?;
            last_checkpoint = Some(path);
            ckpt_path = Some(rel);
        }
        log::info!(
            "epoch {epoch}: mean loss {:.4}, val R@1 {:.3} / R@10 {:.3} (speech->image)",
            sum / steps as f64,
            validation.speech_to_image[0],
            validation.speech_to_image[2]
        );
        let rec = EpochRecord {
            epoch,
            steps,
            lr,
            mean_total: sum / steps as f64,
            validation,
            checkpoint: ckpt_path,
        };
        write_line(&mut epochs_log, &epochs_path, &rec)?;
        epochs_log.flush().map_err(|e| Error::io(&epochs_path, e))?;
        records.push(rec);
    }

    let test = pipe.retrieval(archive, Split::Test, 0)?;
    let report = RetrievalReport::new(
        Some(cfg.digest()),
        vec![RetrievalRow {
            label: cfg.head.clone(),
            recall: test.clone(),
        }],
    );
    let (report_path, _) = emit_report(&report, &out.join("report"))?;
    Ok(FitOutcome {
        pipeline: pipe,
        epochs: records,
        test,
        last_checkpoint,
        report: report_path,
    })
}
