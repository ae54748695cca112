//! Audio-only training: one shared speech encoder feeding a left and a
//! right frozen encoder, aligned on captions of the same image.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};
use segalign_tensor::{Graph, Real, Tensor, Var};

use super::checkpoint::{layout_of, Checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::fit::{external_starts, jsonl, plan_nfc, write_line, RECALL_KS};
use super::losses::paired_contrastive_loss;
use super::model::{encode_utterances, Boundaries, Encoded};
use super::optim::Adam;
use super::schedule::{loss_schedule, step_lr};
use crate::alignment::{FrozenSpec, FrozenTextEncoder, TextOutput};
use crate::corpus::{write_json, Archive, Split};
use crate::encoder::{init_encoder, nfc_loss_batch};
use crate::eval::{emit_report, semantic_audio_retrieval, SemanticReport, REPORT_VERSION};
use crate::params::{add_linear, linear, Bound, ParamStore};
use crate::rng::SeedStreams;
use crate::{Error, Result};

/// Which branch features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Left,
    #[default]
    Right,
    /// Right then left.
    Concat,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Left => "left",
            Branch::Right => "right",
            Branch::Concat => "concat",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Branch::Left),
            "right" => Ok(Branch::Right),
            "concat" => Ok(Branch::Concat),
            other => Err(Error::Unknown {
                kind: "branch",
                name: other.into(),
                known: "left, right, concat".into(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwinModel {
    pub cfg: TrainConfig,
    pub frame_dim: usize,
    /// Shared encoder plus the right projection.
    pub params: ParamStore<f32>,
    pub left: FrozenTextEncoder,
    pub right: FrozenTextEncoder,
}

impl TwinModel {
    pub fn new(cfg: &TrainConfig, frame_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeedStreams::new(cfg.seed).stream("init", &[]);
        let mut params = init_encoder(frame_dim, &cfg.model, &mut rng);
        if cfg.twin.right_projection == "mlp" {
            let (d, r) = (cfg.model.out_dim, cfg.twin.right_dim);
            add_linear(&mut params, &mut rng, "twin.proj1", d, r, 2f64.sqrt());
            add_linear(&mut params, &mut rng, "twin.proj2", r, r, 1.0);
        }
        Ok(Self {
            cfg: cfg.clone(),
            frame_dim,
            params,
            left: FrozenTextEncoder::new(Self::left_spec(cfg))?,
            right: FrozenTextEncoder::new(Self::right_spec(cfg))?,
        })
    }

    pub fn left_spec(cfg: &TrainConfig) -> FrozenSpec {
        FrozenSpec {
            seed: cfg.twin.left_seed,
            in_dim: cfg.model.out_dim,
            joint_dim: cfg.model.joint_dim,
            heads: cfg.model.text_heads,
            max_len: cfg.model.max_segments,
        }
    }

    pub fn right_spec(cfg: &TrainConfig) -> FrozenSpec {
        FrozenSpec {
            seed: cfg.twin.right_seed,
            in_dim: cfg.twin.right_dim,
            ..Self::left_spec(cfg)
        }
    }

    /// Width of the features of `branch`.
    pub fn feature_dim(&self, branch: Branch) -> usize {
        match branch {
            Branch::Left => self.left.in_dim(),
            Branch::Right => self.right.in_dim(),
            Branch::Concat => self.left.in_dim() + self.right.in_dim(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != "twin" {
            return Err(Error::Invalid(format!("checkpoint holds a `{}` model, expected twin", ck.meta.kind)));
        }
        let mut m = Self::new(&ck.meta.config, ck.meta.frame_dim)?;
        if layout_of(&m.params) != ck.meta.layout {
            return Err(Error::Invalid("checkpoint layout does not match the configured twin model".into()));
        }
        let digests = [m.left.digest(), m.right.digest()];
        if ck.meta.frozen.iter().map(|(_, d)| d.clone()).ne(digests) {
            return Err(Error::Invalid("checkpoint was trained against different frozen encoders".into()));
        }
        m.params = ck.params.clone();
        Ok(m)
    }
}

/// Maps segment embeddings to the right encoder's input width.
pub fn project_right<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &TrainConfig, s: Var) -> Result<Var> {
    if cfg.twin.right_projection == "identity" {
        return Ok(s);
    }
    let h = linear(g, p, "twin.proj1", s)?;
    let h = g.relu(h)?;
    linear(g, p, "twin.proj2", h)
}

/// Left and right encoder outputs of the same segment sequences.
pub fn both_branches<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    model: &TwinModel,
    s: Var,
    lengths: &[usize],
) -> Result<(TextOutput, TextOutput)> {
    let left = model.left.encode_batch(g, s, lengths)?;
    let r = project_right(g, p, &model.cfg, s)?;
    let right = model.right.encode_batch(g, r, lengths)?;
    Ok((left, right))
}

/// Encodes `frames_a` then `frames_b` with the shared encoder; the `a`
/// utterances go through the left branch and the `b` utterances through
/// the right. Returns the unit-norm joint outputs of both.
pub fn twin_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    model: &TwinModel,
    frames_a: &[Tensor<T>],
    frames_b: &[Tensor<T>],
    boundaries: Boundaries<'_>,
) -> Result<(Var, Var, Encoded)> {
    if frames_a.len() != frames_b.len() {
        return Err(Error::Invalid(format!(
            "{} left utterances for {} right utterances",
            frames_a.len(),
            frames_b.len()
        )));
    }
    let b = frames_a.len();
    let frames: Vec<Tensor<T>> = frames_a.iter().chain(frames_b).cloned().collect();
    let enc = encode_utterances(g, p, &model.cfg.model, &frames, boundaries)?;
    let n_left: usize = enc.lengths[..b].iter().sum();
    let n_right: usize = enc.lengths[b..].iter().sum();
    let sa = g.slice(enc.segments, 0, 0, n_left)?;
    let sb = g.slice(enc.segments, 0, n_left, n_right)?;
    let left = model.left.encode_batch(g, sa, &enc.lengths[..b])?.joint;
    let rb = project_right(g, p, &model.cfg, sb)?;
    let right = model.right.encode_batch(g, rb, &enc.lengths[b..])?.joint;
    Ok((left, right, enc))
}

/// Every random choice of one twin step.
#[derive(Debug, Clone)]
pub struct TwinPlan<T> {
    pub frames_a: Vec<Tensor<T>>,
    pub frames_b: Vec<Tensor<T>>,
    /// Next-frame negatives for the `a` then `b` utterances.
    pub nfc_negatives: Option<Vec<Vec<Vec<usize>>>>,
    /// `false` during the next-frame warmup.
    pub pair_loss: bool,
    pub external: Option<Vec<Vec<usize>>>,
    pub fixed: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TwinTerms {
    pub nfc: Option<Var>,
    pub pair: Option<Var>,
    pub total: Var,
}

/// `[NFC] + [paired contrastive]`, on the same schedule as the
/// audio-visual loss.
pub fn twin_loss<T: Real>(g: &mut Graph<T>, p: &Bound, model: &TwinModel, plan: &TwinPlan<T>) -> Result<TwinTerms> {
    let boundaries = match (&plan.fixed, &plan.external) {
        (Some(f), _) => Boundaries::Fixed(f),
        (None, Some(e)) => Boundaries::Merge(e),
        (None, None) => Boundaries::Detect,
    };
    let (left, right, enc) = twin_forward(g, p, model, &plan.frames_a, &plan.frames_b, boundaries)?;
    let mut nfc = None;
    if let Some(negs) = &plan.nfc_negatives {
        let (spans, negs): (Vec<_>, Vec<_>) = enc
            .spans
            .iter()
            .zip(negs)
            .filter(|(_, n)| !n.is_empty())
            .map(|(s, n)| (*s, n.clone()))
            .unzip();
        if !spans.is_empty() {
            nfc = Some(nfc_loss_batch(g, enc.frames, &spans, &negs)?);
        }
    }
    let pair = if plan.pair_loss {
        Some(paired_contrastive_loss(g, left, right, model.cfg.tau_ret, model.cfg.twin.symmetric)?)
    } else {
        None
    };
    let total = match (nfc, pair) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Invalid("twin step has no active loss".into())),
    };
    Ok(TwinTerms { nfc, pair, total })
}

/// Features of the given utterances from `branch`: the mean-pooled hidden
/// states of the branch's frozen encoder.
pub fn extract_features(model: &TwinModel, archive: &Archive, utterances: &[usize], branch: Branch) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(utterances.len());
    for chunk in utterances.chunks(64) {
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g);
        let frames: Vec<Tensor<f32>> = chunk.iter().map(|&u| archive.utterance_tensor(u)).collect();
        let ext;
        let b = if model.cfg.external_boundaries {
            ext = external_starts(archive, chunk)?;
            Boundaries::Merge(&ext)
        } else {
            Boundaries::Detect
        };
        let enc = encode_utterances(&mut g, &p, &model.cfg.model, &frames, b)?;
        let (l, r) = both_branches(&mut g, &p, model, enc.segments, &enc.lengths)?;
        let (lv, rv) = (g.value(l.pooled), g.value(r.pooled));
        for i in 0..chunk.len() {
            let row = |t: &Tensor<f32>| t.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
            out.push(match branch {
                Branch::Left => row(lv),
                Branch::Right => row(rv),
                Branch::Concat => {
                    let mut v = row(rv);
                    v.extend(row(lv));
                    v
                }
            });
        }
    }
    Ok(out)
}

/// Semantic audio retrieval on the split: caption `candidate_caption` of
/// every image is a candidate, the image's other captions are queries.
pub fn semantic_retrieval(model: &TwinModel, archive: &Archive, split: Split, branch: Branch) -> Result<SemanticReport> {
    let which = model.cfg.twin.candidate_caption;
    let groups = captions_by_image(archive, split);
    let (mut queries, mut q_img, mut cands, mut c_img) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (image, caps) in &groups {
        if caps.len() <= which {
            return Err(Error::config(
                "twin.candidate_caption",
                format!("image {image} has only {} captions", caps.len()),
            ));
        }
        for (i, &u) in caps.iter().enumerate() {
            if i == which {
                cands.push(u);
                c_img.push(*image);
            } else {
                queries.push(u);
                q_img.push(*image);
            }
        }
    }
    let qf = extract_features(model, archive, &queries, branch)?;
    let cf = extract_features(model, archive, &cands, branch)?;
    let recall = semantic_audio_retrieval(&qf, &q_img, &cf, &c_img, &RECALL_KS)?;
    Ok(SemanticReport {
        report_version: REPORT_VERSION,
        kind: "semantic_retrieval".into(),
        config_digest: Some(model.cfg.digest()),
        branch: branch.as_str().into(),
        ks: RECALL_KS.to_vec(),
        recall,
        num_queries: queries.len(),
        num_candidates: cands.len(),
    })
}

/// Paired utterances of each image of `split`, in archive order.
pub fn captions_by_image(archive: &Archive, split: Split) -> Vec<(usize, Vec<usize>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for u in archive.utterances_in(split) {
        if let Some(i) = archive.utterances[u].image_id {
            groups.entry(i).or_default().push(u);
        }
    }
    groups.into_iter().collect()
}

/// One line of `epochs.jsonl` in audio-only runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinEpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub validation_r1: f64,
    /// Relative to the run directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TwinOutcome {
    pub model: TwinModel,
    pub epochs: Vec<TwinEpochRecord>,
    pub test: SemanticReport,
    pub last_checkpoint: Option<PathBuf>,
    pub report: PathBuf,
}

/// Caption pairs of epoch `epoch`: one random pair of distinct captions
/// per training image, images in random order.
pub fn epoch_pairs(streams: &SeedStreams, groups: &[(usize, Vec<usize>)], epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = streams.stream("pairs", &[epoch as u64]);
    let mut pairs: Vec<(usize, usize)> = groups
        .iter()
        .filter(|(_, caps)| caps.len() >= 2)
        .map(|(_, caps)| {
            let ij = sample(&mut rng, caps.len(), 2);
            (caps[ij.index(0)], caps[ij.index(1)])
        })
        .collect();
    pairs.shuffle(&mut streams.stream("data", &[epoch as u64]));
    pairs
}

fn twin_checkpoint(model: &TwinModel, epoch: usize, step: usize, adam: &Adam) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            kind: "twin".into(),
            config: model.cfg.clone(),
            config_digest: model.cfg.digest(),
            epoch,
            step,
            frame_dim: model.frame_dim,
            frozen: vec![
                (model.left.spec(), model.left.digest()),
                (model.right.spec(), model.right.digest()),
            ],
            layout: layout_of(&model.params),
            adam_t: adam.t,
            has_moments: true,
        },
        params: model.params.clone(),
        adam: Some(adam.clone()),
    }
}

/// Audio-only training on caption pairs of the training images. Writes the
/// same artifacts as the audio-visual loop, with a semantic-retrieval
/// report.
pub fn fit_twin(cfg: &TrainConfig, archive: &Archive, out: &Path) -> Result<TwinOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = TwinModel::new(cfg, archive.manifest.frame_dim)?;
    log::info!("resolved config: {}", serde_json::to_string(cfg).expect("config serializes"));
    write_json(&out.join("config.json"), cfg)?;
    let streams = SeedStreams::new(cfg.seed);
    let groups = captions_by_image(archive, Split::Train);
    let mut adam = Adam::new(&model.params);
    let metrics_path = out.join("metrics.jsonl");
    let epochs_path = out.join("epochs.jsonl");
    let mut metrics = jsonl(&metrics_path, false)?;
    let mut epochs_log = jsonl(&epochs_path, false)?;
    let mut step = 0;
    let mut records = Vec::new();
    let mut last_checkpoint = None;

    for epoch in 1..=cfg.epochs {
        let lr = step_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);
        let pairs = epoch_pairs(&streams, &groups, epoch);
        let (mut sum, mut steps) = (0.0, 0);
        for batch in pairs.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let active = loss_schedule(step, epoch, cfg.nfc_warmup_steps);
            let a: Vec<usize> = batch.iter().map(|p| p.0).collect();
            let b: Vec<usize> = batch.iter().map(|p| p.1).collect();
            let frames_a: Vec<Tensor<f32>> = a.iter().map(|&u| archive.utterance_tensor(u)).collect();
            let frames_b: Vec<Tensor<f32>> = b.iter().map(|&u| archive.utterance_tensor(u)).collect();
            let nfc_negatives = if active.nfc {
                let lengths: Vec<usize> = frames_a.iter().chain(&frames_b).map(|f| f.rows()).collect();
                let mut rng = streams.stream("nfc", &[step as u64]);
                Some(plan_nfc(&lengths, cfg.model.nfc_negatives, &mut rng)?)
            } else {
                None
            };
            let external = if cfg.external_boundaries {
                let both: Vec<usize> = a.iter().chain(&b).copied().collect();
                Some(external_starts(archive, &both)?)
            } else {
                None
            };
            let plan = TwinPlan {
                frames_a,
                frames_b,
                nfc_negatives,
                pair_loss: active.ret,
                external,
                fixed: None,
            };
            let mut g = Graph::<f32>::new();
            let p = model.params.bind(&mut g);
            let terms = twin_loss(&mut g, &p, &model, &plan)?;
            let total = g.value(terms.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    last_checkpoint,
                });
            }
            let grads = g.backward(terms.total)?;
            let per_param: Vec<Option<Tensor<f32>>> = model
                .params
                .iter()
                .map(|prm| if prm.frozen { None } else { grads.get(p.var(&prm.name)).cloned() })
                .collect();
            adam.step(&mut model.params, &per_param, lr)?;
            let value = |v: Option<Var>| v.map(|v| g.value(v).data()[0] as f64);
            write_line(
                &mut metrics,
                &metrics_path,
                &super::fit::StepMetrics {
                    epoch,
                    step,
                    loss_nfc: value(terms.nfc),
                    loss_ret: value(terms.pair),
                    loss_reg: None,
                    loss_aux: None,
                    lr,
                },
            )?;
            sum += total;
            steps += 1;
            step += 1;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let val = semantic_retrieval(&model, archive, Split::Test, Branch::Right)?;
        let mut ckpt_path = None;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let rel = Path::new("checkpoints").join(format!("epoch_{epoch:03}.ckpt"));
            let path = out.join(&rel);
            twin_checkpoint(&model, epoch, step, &adam).write(&path)?;
            last_checkpoint = Some(path);
            ckpt_path = Some(rel);
        }
        log::info!("epoch {epoch}: mean loss {:.4}, semantic R@1 {:.3}", sum / steps.max(1) as f64, val.recall[0]);
        let rec = TwinEpochRecord {
            epoch,
            steps,
            lr,
            mean_total: sum / steps.max(1) as f64,
            validation_r1: val.recall[0],
            checkpoint: ckpt_path,
        };
        write_line(&mut epochs_log, &epochs_path, &rec)?;
        epochs_log.flush().map_err(|e| Error::io(&epochs_path, e))?;
        records.push(rec);
    }

    let test = semantic_retrieval(&model, archive, Split::Test, Branch::Right)?;
    let (report, _) = emit_report(&test, &out.join("report"))?;
    Ok(TwinOutcome {
        model,
        epochs: records,
        test,
        last_checkpoint,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GenConfig};

    fn small() -> (Archive, TrainConfig) {
        let gen = GenConfig {
            num_train_images: 12,
            num_test_images: 4,
            simi_pairs: 4,
            ..GenConfig::default()
        };
        let (a, _) = generate(&gen, 5).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.twin.right_dim = 96;
        (a, cfg)
    }

    #[test]
    fn concat_is_right_then_left() {
        let (a, cfg) = small();
        let m = TwinModel::new(&cfg, a.manifest.frame_dim).unwrap();
        let u = [0usize, 1];
        let l = extract_features(&m, &a, &u, Branch::Left).unwrap();
        let r = extract_features(&m, &a, &u, Branch::Right).unwrap();
        let c = extract_features(&m, &a, &u, Branch::Concat).unwrap();
        assert_eq!(c[0].len(), m.feature_dim(Branch::Concat));
        assert_eq!(c[0].len(), cfg.model.out_dim + cfg.twin.right_dim);
        assert_eq!(&c[1][..96], &r[1][..]);
        assert_eq!(&c[1][96..], &l[1][..]);
        assert_eq!(extract_features(&m, &a, &u, Branch::Right).unwrap(), r);
        assert_eq!(Branch::default(), Branch::Right);
        assert!("middle".parse::<Branch>().is_err());
    }

    #[test]
    fn identical_branches_agree_on_the_same_utterance() {
        let (a, mut cfg) = small();
        cfg.twin.right_projection = "identity".into();
        cfg.twin.right_dim = cfg.model.out_dim;
        cfg.twin.right_seed = cfg.twin.left_seed;
        let m = TwinModel::new(&cfg, a.manifest.frame_dim).unwrap();
        let mut g = Graph::<f32>::new();
        let p = m.params.bind(&mut g);
        let f = vec![a.utterance_tensor(0), a.utterance_tensor(1)];
        let (l, r, _) = twin_forward(&mut g, &p, &m, &f, &f, Boundaries::Detect).unwrap();
        assert_eq!(g.value(l), g.value(r));
        for row in 0..2 {
            let n: f32 = g.value(l).row(row).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pairs_are_distinct_captions_of_one_image() {
        let (a, _) = small();
        let groups = captions_by_image(&a, Split::Train);
        let pairs = epoch_pairs(&SeedStreams::new(1), &groups, 1);
        assert_eq!(pairs.len(), 12);
        for (x, y) in pairs {
            assert_ne!(x, y);
            assert_eq!(a.utterances[x].image_id, a.utterances[y].image_id);
        }
    }
}
