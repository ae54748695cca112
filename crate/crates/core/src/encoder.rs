//! Frame encoder, next-frame classification, boundary detection, segment
//! pooling and the segment encoder.

use rand::seq::index::sample;
use segalign_tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::params::{add_linear, gaussian, linear, zeros, Bound, ParamStore};
use crate::rng::Rng;
use crate::{Error, Result};

/// Widths of the trainable speech encoder and the frozen text encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_hidden: usize,
    pub frame_out: usize,
    pub conv_filters: usize,
    pub out_dim: usize,
    pub joint_dim: usize,
    pub theta: f64,
    pub nfc_negatives: usize,
    pub max_segments: usize,
    pub text_heads: usize,
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_hidden: 128,
            frame_out: 64,
            conv_filters: 128,
            out_dim: 64,
            joint_dim: 64,
            theta: 0.5,
            nfc_negatives: 10,
            max_segments: 64,
            text_heads: 4,
            text_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.frame_hidden", self.frame_hidden),
            ("model.frame_out", self.frame_out),
            ("model.conv_filters", self.conv_filters),
            ("model.out_dim", self.out_dim),
            ("model.joint_dim", self.joint_dim),
            ("model.nfc_negatives", self.nfc_negatives),
            ("model.max_segments", self.max_segments),
            ("model.text_heads", self.text_heads),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.out_dim.is_multiple_of(self.text_heads) {
            return Err(Error::config(
                "model.out_dim",
                format!("{} is not divisible by text_heads {}", self.out_dim, self.text_heads),
            ));
        }
        if !self.theta.is_finite() {
            return Err(Error::config("model.theta", "must be finite"));
        }
        Ok(())
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Parameters of the frame encoder (`fenc.*`) and segment encoder (`senc.*`).
pub fn init_encoder<T: Real>(frame_dim: usize, cfg: &ModelConfig, rng: &mut Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    add_linear(&mut p, rng, "fenc.l1", frame_dim, cfg.frame_hidden, RELU_GAIN);
    add_linear(&mut p, rng, "fenc.l2", cfg.frame_hidden, cfg.frame_hidden, RELU_GAIN);
    add_linear(&mut p, rng, "fenc.l3", cfg.frame_hidden, cfg.frame_out, 1.0);
    p.insert("senc.conv1.w", gaussian(rng, 3 * cfg.frame_out, cfg.conv_filters, RELU_GAIN));
    p.insert("senc.conv1.b", zeros(cfg.conv_filters));
    p.insert("senc.conv2.w", gaussian(rng, 3 * cfg.conv_filters, cfg.conv_filters, RELU_GAIN));
    p.insert("senc.conv2.b", zeros(cfg.conv_filters));
    add_linear(&mut p, rng, "senc.ff1", cfg.conv_filters, cfg.out_dim, RELU_GAIN);
    add_linear(&mut p, rng, "senc.ff2", cfg.out_dim, cfg.out_dim, 1.0);
    p
}

/// Position-wise frame encoder: `L x frame_dim` to `L x p`.
pub fn encode_frames<T: Real>(g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<Var> {
    let h = linear(g, p, "fenc.l1", frames)?;
    let h = g.relu(h)?;
    let h = linear(g, p, "fenc.l2", h)?;
    let h = g.relu(h)?;
    linear(g, p, "fenc.l3", h)
}

/// Draws, for every anchor `t` in `0..len-1`, `k` distinct negatives from
/// the utterance excluding the anchor itself and its true successor.
pub fn sample_nfc_negatives(len: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if len < k + 2 {
        return Err(Error::TooSmall {
            what: "utterance frames for next-frame classification",
            actual: len,
            required: k + 2,
        });
    }
    Ok((0..len - 1)
        .map(|t| {
            sample(rng, len - 2, k)
                .into_iter()
                .map(|i| if i >= t { i + 2 } else { i })
                .collect()
        })
        .collect())
}

/// Per-anchor next-frame losses for utterances laid out consecutively in
/// `encoded`. `spans[u] = (offset, len)`; `negatives[u][t]` holds local
/// frame indices. Returns the `[anchors, 1]` losses and each anchor's
/// utterance.
fn nfc_anchor_terms<T: Real>(
    g: &mut Graph<T>,
    encoded: Var,
    spans: &[(usize, usize)],
    negatives: &[Vec<Vec<usize>>],
) -> Result<(Var, Vec<usize>)> {
    let mut anchor_idx = Vec::new();
    let mut cand_idx = Vec::new();
    let mut owner = Vec::new();
    let mut width = None;
    for (u, (&(off, len), negs)) in spans.iter().zip(negatives).enumerate() {
        if negs.len() + 1 != len {
            return Err(Error::Invalid(format!(
                "utterance {u}: {} negative lists for {len} frames",
                negs.len()
            )));
        }
        for (t, nt) in negs.iter().enumerate() {
            let k = *width.get_or_insert(nt.len());
            if nt.len() != k {
                return Err(Error::Invalid("ragged next-frame negative counts".into()));
            }
            anchor_idx.extend(std::iter::repeat_n(off + t, k + 1));
            cand_idx.push(off + t + 1);
            cand_idx.extend(nt.iter().map(|&j| off + j));
            owner.push(u);
        }
    }
    let k1 = width.map_or(1, |k| k + 1);
    let anchors = g.gather_rows(encoded, &anchor_idx)?;
    let cands = g.gather_rows(encoded, &cand_idx)?;
    let sims = g.cosine_similarity(anchors, cands)?;
    let logits = g.reshape(sims, vec![owner.len(), k1])?;
    let logp = g.log_softmax(logits)?;
    let pos = g.slice(logp, 1, 0, 1)?;
    Ok((g.neg(pos)?, owner))
}

/// Next-frame classification loss for one utterance with explicit
/// negatives; returns the `[len - 1]` vector of per-anchor losses.
pub fn nfc_anchor_losses<T: Real>(g: &mut Graph<T>, encoded: Var, negatives: &[Vec<usize>]) -> Result<Var> {
    let len = g.shape(encoded)[0];
    let (terms, _) = nfc_anchor_terms(g, encoded, &[(0, len)], &[negatives.to_vec()])?;
    Ok(g.reshape(terms, vec![len - 1])?)
}

/// Mean next-frame classification loss over anchors `0..len-1`.
pub fn nfc_loss<T: Real>(g: &mut Graph<T>, encoded: Var, k: usize, rng: &mut Rng) -> Result<Var> {
    let len = g.shape(encoded)[0];
    let negs = sample_nfc_negatives(len, k, rng)?;
    let terms = nfc_anchor_losses(g, encoded, &negs)?;
    Ok(g.mean(terms)?)
}

/// Batched next-frame loss: mean over anchors within each utterance, then
/// mean over utterances. Utterances with no anchors must be left out of
/// `spans` by the caller.
pub fn nfc_loss_batch<T: Real>(
    g: &mut Graph<T>,
    encoded: Var,
    spans: &[(usize, usize)],
    negatives: &[Vec<Vec<usize>>],
) -> Result<Var> {
    let (terms, owner) = nfc_anchor_terms(g, encoded, spans, negatives)?;
    let per_utt = g.segment_mean(terms, &owner, spans.len())?;
    Ok(g.mean(per_utt)?)
}

fn cos_f64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity of each frame with its successor (`len - 1` values).
/// A zero frame has similarity 0 with its neighbours.
pub fn adjacent_similarities<T: Real>(encoded: &Tensor<T>) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..encoded.rows())
        .map(|i| encoded.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    rows.windows(2).map(|w| cos_f64(&w[0], &w[1])).collect()
}

/// Keeps at most `max_segments` starts: index 0 plus the
/// `max_segments - 1` boundaries with the lowest similarity, ties going to
/// the earlier index.
fn cap_starts(starts: Vec<usize>, sims: &[f64], max_segments: usize) -> Vec<usize> {
    if starts.len() <= max_segments {
        return starts;
    }
    let mut inner: Vec<usize> = starts.into_iter().filter(|&s| s > 0).collect();
    inner.sort_by(|&a, &b| sims[a - 1].total_cmp(&sims[b - 1]).then(a.cmp(&b)));
    inner.truncate(max_segments.saturating_sub(1));
    inner.sort_unstable();
    let mut out = vec![0];
    out.extend(inner);
    out
}

/// Segment starts: 0, plus every `t + 1` whose similarity to frame `t`
/// falls below `theta`, capped at `max_segments` segments.
pub fn detect_boundaries<T: Real>(encoded: &Tensor<T>, theta: f64, max_segments: usize) -> Vec<usize> {
    let sims = adjacent_similarities(encoded);
    let mut starts = vec![0];
    starts.extend((0..sims.len()).filter(|&t| sims[t] < theta).map(|t| t + 1));
    cap_starts(starts, &sims, max_segments)
}

/// Sorted union of detected and external starts, with the segment cap
/// re-applied using the adjacent similarities `sims`.
pub fn merge_external_boundaries(
    starts: &[usize],
    external: &[usize],
    num_frames: usize,
    sims: &[f64],
    max_segments: usize,
) -> Result<Vec<usize>> {
    if let Some(&bad) = external.iter().chain(starts).find(|&&s| s >= num_frames) {
        return Err(Error::Invalid(format!(
            "boundary {bad} out of range for {num_frames} frames"
        )));
    }
    let mut all: Vec<usize> = std::iter::once(0).chain(starts.iter().copied()).chain(external.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    Ok(cap_starts(all, sims, max_segments))
}

/// Segment id of every frame for the partition given by `starts`.
pub fn segment_ids(starts: &[usize], num_frames: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(num_frames);
    for (j, &s) in starts.iter().enumerate() {
        let end = starts.get(j + 1).copied().unwrap_or(num_frames);
        ids.extend(std::iter::repeat_n(j, end - s));
    }
    ids
}

fn check_partition(starts: &[usize], num_frames: usize) -> Result<()> {
    let ok = starts.first() == Some(&0)
        && starts.windows(2).all(|w| w[0] < w[1])
        && starts.last().is_some_and(|&s| s < num_frames);
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "starts {starts:?} do not partition {num_frames} frames"
        )))
    }
}

/// Mean of the frames of each segment: `L x p` to `M x p`.
pub fn pool_segments<T: Real>(g: &mut Graph<T>, encoded: Var, starts: &[usize]) -> Result<Var> {
    let len = g.shape(encoded)[0];
    check_partition(starts, len)?;
    Ok(g.segment_mean(encoded, &segment_ids(starts, len), starts.len())?)
}

/// Pools several consecutive utterances at once. Returns the stacked
/// segments and the utterance of each segment.
pub fn pool_segments_batch<T: Real>(
    g: &mut Graph<T>,
    encoded: Var,
    spans: &[(usize, usize)],
    starts: &[Vec<usize>],
) -> Result<(Var, Vec<usize>)> {
    let total = g.shape(encoded)[0];
    let mut ids = Vec::with_capacity(total);
    let mut owner = Vec::new();
    for (u, (&(off, len), st)) in spans.iter().zip(starts).enumerate() {
        check_partition(st, len)?;
        if off != ids.len() {
            return Err(Error::Invalid("utterance spans must be consecutive".into()));
        }
        let base = owner.len();
        ids.extend(segment_ids(st, len).into_iter().map(|j| base + j));
        owner.extend(std::iter::repeat_n(u, st.len()));
    }
    if ids.len() != total {
        return Err(Error::Invalid(format!("spans cover {} of {total} frames", ids.len())));
    }
    Ok((g.segment_mean(encoded, &ids, owner.len())?, owner))
}

/// Segment encoder: two kernel-3 convolutions then a two-layer
/// feed-forward network. `group` keeps stacked utterances apart.
pub fn encode_segments<T: Real>(g: &mut Graph<T>, p: &Bound, pooled: Var, group: Option<&[usize]>) -> Result<Var> {
    let h = g.conv1d(pooled, p.var("senc.conv1.w"), p.var("senc.conv1.b"), group)?;
    let h = g.relu(h)?;
    let h = g.conv1d(h, p.var("senc.conv2.w"), p.var("senc.conv2.b"), group)?;
    let h = g.relu(h)?;
    let h = linear(g, p, "senc.ff1", h)?;
    let h = g.relu(h)?;
    linear(g, p, "senc.ff2", h)
}
