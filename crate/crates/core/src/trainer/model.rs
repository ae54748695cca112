//! The audio-visual model: trainable speech encoder, alignment head and
//! frozen text encoder, plus the composite training loss.

use rand::SeedableRng;
use segalign_tensor::{Graph, Real, Tensor, Var};

use super::losses::retrieval_loss_batch;
use super::mlm::{init_mlm, mlm_aux_loss, plan_mask};
use crate::alignment::{AlignmentHead, FrozenSpec, FrozenTextEncoder, HeadContext};
use crate::encoder::{
    adjacent_similarities, detect_boundaries, encode_frames, encode_segments, init_encoder, merge_external_boundaries,
    pool_segments_batch, ModelConfig,
};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::{Error, Result};

/// Where segment boundaries come from.
#[derive(Debug, Clone, Copy)]
pub enum Boundaries<'a> {
    /// Thresholded adjacent-frame similarity of the encoded frames.
    Detect,
    /// Detected starts merged with the given external starts.
    Merge(&'a [Vec<usize>]),
    /// Exactly the given starts.
    Fixed(&'a [Vec<usize>]),
}

/// Intermediate results of encoding a batch of utterances.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Encoded frames, all utterances stacked.
    pub frames: Var,
    pub spans: Vec<(usize, usize)>,
    pub starts: Vec<Vec<usize>>,
    /// Segment embeddings `S`, stacked.
    pub segments: Var,
    /// Utterance of every segment row.
    pub owner: Vec<usize>,
    pub lengths: Vec<usize>,
}

/// Stacks utterance frame matrices into one constant.
pub fn stack_frames<T: Real>(g: &mut Graph<T>, frames: &[Tensor<T>]) -> Result<(Var, Vec<(usize, usize)>)> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let d = frames[0].cols();
    let mut spans = Vec::with_capacity(frames.len());
    let mut data = Vec::new();
    let mut off = 0;
    for f in frames {
        if f.rank() != 2 || f.cols() != d || f.rows() == 0 {
            return Err(Error::Invalid(format!("utterance frames of shape {:?} in a batch of width {d}", f.shape())));
        }
        spans.push((off, f.rows()));
        off += f.rows();
        data.extend_from_slice(f.data());
    }
    Ok((g.constant(Tensor::matrix(off, d, data)?), spans))
}

/// Encodes frames, places boundaries, pools and encodes segments.
pub fn encode_utterances<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frames: &[Tensor<T>],
    boundaries: Boundaries<'_>,
) -> Result<Encoded> {
    let (x, spans) = stack_frames(g, frames)?;
    let z = encode_frames(g, p, x)?;
    let zv = g.value(z);
    let d = zv.cols();
    let mut starts = Vec::with_capacity(spans.len());
    for (u, &(off, len)) in spans.iter().enumerate() {
        let st = match boundaries {
            Boundaries::Fixed(b) => b[u].clone(),
            Boundaries::Detect | Boundaries::Merge(_) => {
                let local = Tensor::matrix(len, d, zv.data()[off * d..(off + len) * d].to_vec())?;
                let detected = detect_boundaries(&local, cfg.theta, cfg.max_segments);
                match boundaries {
                    Boundaries::Merge(ext) => {
                        let sims = adjacent_similarities(&local);
                        merge_external_boundaries(&detected, &ext[u], len, &sims, cfg.max_segments)?
                    }
                    _ => detected,
                }
            }
        };
        starts.push(st);
    }
    let (pooled, owner) = pool_segments_batch(g, z, &spans, &starts)?;
    let segments = encode_segments(g, p, pooled, Some(&owner))?;
    let lengths = starts.iter().map(Vec::len).collect();
    Ok(Encoded {
        frames: z,
        spans,
        starts,
        segments,
        owner,
        lengths,
    })
}

/// Trainable parameters plus the frozen parts they are trained against.
#[derive(Debug, Clone)]
pub struct AudioVisualModel {
    pub cfg: ModelConfig,
    pub frame_dim: usize,
    pub params: ParamStore<f32>,
    pub text: FrozenTextEncoder,
}

impl AudioVisualModel {
    pub fn new(cfg: &ModelConfig, frame_dim: usize, with_mlm: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = init_encoder(frame_dim, cfg, rng);
        if with_mlm {
            params.extend(init_mlm(cfg.out_dim, rng));
        }
        let text = FrozenTextEncoder::new(Self::text_spec(cfg))?;
        Ok(Self {
            cfg: cfg.clone(),
            frame_dim,
            params,
            text,
        })
    }

    pub fn text_spec(cfg: &ModelConfig) -> FrozenSpec {
        FrozenSpec {
            seed: cfg.text_seed,
            in_dim: cfg.out_dim,
            joint_dim: cfg.joint_dim,
            heads: cfg.text_heads,
            max_len: cfg.max_segments,
        }
    }
}

/// Everything random or data-dependent about one training step, fixed in
/// advance so that the same step can be replayed in any precision.
#[derive(Debug, Clone)]
pub struct StepPlan<T> {
    pub frames: Vec<Tensor<T>>,
    /// Next-frame negatives per utterance; `None` when the loss is off.
    /// Utterances too short for any anchor hold an empty list.
    pub nfc_negatives: Option<Vec<Vec<Vec<usize>>>>,
    /// Stacked positive-then-negatives image rows; `None` when retrieval
    /// (and everything attached to it) is off.
    pub retrieval: Option<Tensor<T>>,
    /// Seed of the segment mask; `None` disables the auxiliary loss.
    pub mask_seed: Option<u64>,
    pub mask_prob: f64,
    pub external: Option<Vec<Vec<usize>>>,
    pub fixed: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau_ret: f64,
    pub aux_weight: f64,
    pub prenormalize: bool,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub nfc: Option<Var>,
    pub ret: Option<Var>,
    pub reg: Option<Var>,
    pub aux: Option<Var>,
    pub total: Var,
    pub starts: Vec<Vec<usize>>,
}

impl LossTerms {
    pub fn value<T: Real>(g: &Graph<T>, v: Option<Var>) -> Option<f64> {
        v.map(|v| g.value(v).data()[0].as_f64())
    }
}

/// Builds the composite loss `[NFC] + [RET + lambda * REG + w * AUX]`.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    text: &FrozenTextEncoder,
    head: &dyn AlignmentHead<T>,
    vocab: Option<&Tensor<T>>,
    plan: &StepPlan<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let mut terms: Vec<Var> = Vec::new();
    let mut nfc = None;
    let mut reg = None;
    let mut aux = None;

    if plan.retrieval.is_none() {
        // Next-frame loss alone needs only the frame encoder.
        let (x, spans) = stack_frames(g, &plan.frames)?;
        let z = encode_frames(g, p, x)?;
        let l = nfc_term(g, z, &spans, plan)?;
        let total = l.ok_or_else(|| Error::Invalid("step has no active loss".into()))?;
        return Ok(LossTerms {
            nfc: l,
            ret: None,
            reg: None,
            aux: None,
            total,
            starts: Vec::new(),
        });
    }

    let boundaries = match (&plan.fixed, &plan.external) {
        (Some(f), _) => Boundaries::Fixed(f),
        (None, Some(e)) => Boundaries::Merge(e),
        (None, None) => Boundaries::Detect,
    };
    let enc = encode_utterances(g, p, cfg, &plan.frames, boundaries)?;
    if let Some(l) = nfc_term(g, enc.frames, &enc.spans, plan)? {
        nfc = Some(l);
        terms.push(l);
    }

    let mut s = enc.segments;
    if w.prenormalize {
        s = g.l2_normalize(s)?;
    }
    let vocab_var = vocab.map(|v| g.constant(v.clone()));
    let ctx = HeadContext {
        vocab: vocab_var,
        owner: &enc.owner,
        num_sequences: enc.lengths.len(),
    };
    let out = head.apply(g, s, &ctx)?;
    let a = text.encode_batch(g, out.segments, &enc.lengths)?.joint;
    let cands = g.constant(plan.retrieval.clone().expect("checked above"));
    let r = retrieval_loss_batch(g, a, cands, w.tau_ret)?;
    terms.push(r);
    if let Some(rg) = out.reg {
        reg = Some(rg);
        let weighted = g.scale(rg, head.reg_weight())?;
        terms.push(weighted);
    }
    if let Some(seed) = plan.mask_seed {
        let mut rng = Rng::seed_from_u64(seed);
        let masked = plan_mask(&enc.lengths, plan.mask_prob, &mut rng);
        let l = mlm_aux_loss(g, p, s, &enc.lengths, &masked)?;
        aux = Some(l);
        let weighted = g.scale(l, w.aux_weight)?;
        terms.push(weighted);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossTerms {
        nfc,
        ret: Some(r),
        reg,
        aux,
        total,
        starts: enc.starts,
    })
}

fn nfc_term<T: Real>(g: &mut Graph<T>, z: Var, spans: &[(usize, usize)], plan: &StepPlan<T>) -> Result<Option<Var>> {
    let Some(negs) = &plan.nfc_negatives else {
        return Ok(None);
    };
    let mut used_spans = Vec::new();
    let mut used_negs = Vec::new();
    for (span, n) in spans.iter().zip(negs) {
        if !n.is_empty() {
            used_spans.push(*span);
            used_negs.push(n.clone());
        }
    }
    if used_spans.is_empty() {
        return Ok(None);
    }
    Ok(Some(crate::encoder::nfc_loss_batch(g, z, &used_spans, &used_negs)?))
}
