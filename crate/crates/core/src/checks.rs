//! Randomized correctness checks shared by the unit, integration and
//! acceptance suites: finite-difference checks of every training loss on
//! micro-sized models, the straight-through identity, and a loop-based
//! pooling oracle.

use rand::Rng as _;
use rand_distr::StandardNormal;
use segalign_tensor::{grad_check, GradCheckReport, Graph, Tensor, TensorError};

use crate::alignment::{cos_matrix, reg_loss_grouped, vq_soft, vq_straight_through, HeadRegistry, HeadSettings};
use crate::encoder::{encode_frames, init_encoder, nfc_loss_batch, pool_segments, sample_nfc_negatives, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{Rng, SeedStreams};
use crate::trainer::{
    composite_loss, encode_utterances, init_mlm, mlm_aux_loss, plan_mask, retrieval_loss_batch, twin_loss,
    AudioVisualModel, Boundaries, LossWeights, StepPlan, TrainConfig, TwinModel, TwinPlan,
};
use crate::Result;

pub const GRAD_H: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// Losses covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    NextFrame,
    Retrieval,
    Regularizer,
    VqSoft,
    Masked,
    Twin,
    Composite,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::NextFrame,
        LossKind::Retrieval,
        LossKind::Regularizer,
        LossKind::VqSoft,
        LossKind::Masked,
        LossKind::Twin,
        LossKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::NextFrame => "next-frame",
            LossKind::Retrieval => "retrieval",
            LossKind::Regularizer => "vocab-regularizer",
            LossKind::VqSoft => "vq-soft",
            LossKind::Masked => "masked-segment",
            LossKind::Twin => "twin",
            LossKind::Composite => "composite",
        }
    }
}

pub const MICRO_FRAME_DIM: usize = 3;

/// A model small enough for per-coordinate finite differences.
pub fn micro_model(text_seed: u64) -> ModelConfig {
    ModelConfig {
        frame_hidden: 5,
        frame_out: 4,
        conv_filters: 4,
        out_dim: 4,
        joint_dim: 3,
        theta: 0.5,
        nfc_negatives: 2,
        max_segments: 8,
        text_heads: 2,
        text_seed,
    }
}

fn normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, normal(rng, r * c)).expect("positive dims")
}

fn unit_rows(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    let mut data = normal(rng, r * c);
    for row in data.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(r, c, data).expect("positive dims")
}

/// Unit rows and their negations, so every row has a positive cosine to
/// some vocabulary entry.
fn signed_vocab(rng: &mut Rng, half: usize, d: usize) -> Tensor<f64> {
    let base = unit_rows(rng, half, d);
    let mut data = base.data().to_vec();
    data.extend(base.data().iter().map(|v| -v));
    Tensor::matrix(2 * half, d, data).expect("positive dims")
}

/// The flattened parameters plus a little noise, so zero-initialized biases
/// do not leave whole relu layers dead at the check point.
fn point_of(store: &ParamStore<f64>, rng: &mut Rng) -> Tensor<f64> {
    let flat = store.flatten();
    let noise = normal(rng, flat.len());
    Tensor::vector(flat.iter().zip(noise).map(|(v, n)| v + 0.1 * n).collect())
}

fn te(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::InvalidShape {
            op: "check",
            shape: Vec::new(),
            reason: other.to_string(),
        },
    }
}

/// Two utterances of 6 and 7 frames with fixed segment starts.
fn micro_batch(rng: &mut Rng) -> (Vec<Tensor<f64>>, Vec<Vec<usize>>) {
    let frames = vec![matrix(rng, 6, MICRO_FRAME_DIM), matrix(rng, 7, MICRO_FRAME_DIM)];
    (frames, vec![vec![0, 2, 4], vec![0, 3]])
}

/// Finite-difference check of `kind` on a random micro instance.
pub fn gradient_check(kind: LossKind, seed: u64) -> Result<GradCheckReport> {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream("gradcheck", &[kind as u64]);
    let cfg = micro_model(seed);
    let (frames, starts) = micro_batch(&mut rng);
    let report = match kind {
        LossKind::NextFrame => {
            let all: ParamStore<f64> = init_encoder(MICRO_FRAME_DIM, &cfg, &mut rng);
            let mut store = ParamStore::new();
            for p in all.iter().filter(|p| p.name.starts_with("fenc.")) {
                store.insert(p.name.clone(), p.value.clone());
            }
            let negs = vec![
                sample_nfc_negatives(6, 2, &mut rng)?,
                sample_nfc_negatives(7, 2, &mut rng)?,
            ];
            let x = Tensor::matrix(13, MICRO_FRAME_DIM, frames.iter().flat_map(|f| f.data().to_vec()).collect())?;
            grad_check(
                |g, flat| {
                    let p = store.bind_flat(g, flat).map_err(te)?;
                    let xv = g.constant(x.clone());
                    let z = encode_frames(g, &p, xv).map_err(te)?;
                    nfc_loss_batch(g, z, &[(0, 6), (6, 7)], &negs).map_err(te)
                },
                &point_of(&store, &mut rng),
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::Retrieval => {
            let store: ParamStore<f64> = init_encoder(MICRO_FRAME_DIM, &cfg, &mut rng);
            let text = crate::alignment::FrozenTextEncoder::new(AudioVisualModel::text_spec(&cfg))?;
            let cands = unit_rows(&mut rng, 2 * 4, cfg.joint_dim);
            grad_check(
                |g, flat| {
                    let p = store.bind_flat(g, flat).map_err(te)?;
                    let enc = encode_utterances(g, &p, &cfg, &frames, Boundaries::Fixed(&starts)).map_err(te)?;
                    let a = text.encode_batch(g, enc.segments, &enc.lengths).map_err(te)?.joint;
                    let c = g.constant(cands.clone());
                    retrieval_loss_batch(g, a, c, 0.07).map_err(te)
                },
                &point_of(&store, &mut rng),
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::Regularizer => {
            let s = matrix(&mut rng, 5, cfg.out_dim);
            let vocab = signed_vocab(&mut rng, 3, cfg.out_dim);
            let owner = [0, 0, 0, 1, 1];
            grad_check(
                |g, sv| {
                    let v = g.constant(vocab.clone());
                    let c = cos_matrix(g, sv, v).map_err(te)?;
                    reg_loss_grouped(g, c, &owner, 2).map_err(te)
                },
                &s,
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::VqSoft => {
            let s = matrix(&mut rng, 5, cfg.out_dim);
            let vocab = unit_rows(&mut rng, 6, cfg.out_dim);
            let probe = matrix(&mut rng, 5, cfg.out_dim);
            grad_check(
                |g, sv| {
                    let v = g.constant(vocab.clone());
                    let c = cos_matrix(g, sv, v).map_err(te)?;
                    let h = vq_soft(g, c, v, 0.5).map_err(te)?;
                    let r = g.constant(probe.clone());
                    let hr = g.mul(h, r)?;
                    g.sum(hr)
                },
                &s,
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::Masked => {
            let mut store: ParamStore<f64> = init_mlm(cfg.out_dim, &mut rng);
            store.insert("input.s", matrix(&mut rng, 6, cfg.out_dim));
            let lengths = [4, 2];
            let masked = vec![vec![1, 3], vec![0]];
            grad_check(
                |g, flat| {
                    let p = store.bind_flat(g, flat).map_err(te)?;
                    let s = p.var("input.s");
                    mlm_aux_loss(g, &p, s, &lengths, &masked).map_err(te)
                },
                &point_of(&store, &mut rng),
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::Twin => {
            let mut tc = TrainConfig::desk();
            tc.seed = seed;
            tc.model = cfg.clone();
            tc.twin.right_dim = 6;
            tc.twin.left_seed = seed;
            tc.twin.right_seed = seed + 1;
            let model = TwinModel::new(&tc, MICRO_FRAME_DIM)?;
            let store: ParamStore<f64> = model.params.cast();
            let more = vec![matrix(&mut rng, 5, MICRO_FRAME_DIM), matrix(&mut rng, 6, MICRO_FRAME_DIM)];
            let fixed = vec![vec![0, 2, 4], vec![0, 3], vec![0, 1, 3], vec![0, 4]];
            let plan = TwinPlan {
                frames_a: frames.clone(),
                frames_b: more,
                nfc_negatives: None,
                pair_loss: true,
                external: None,
                fixed: Some(fixed),
            };
            grad_check(
                |g, flat| {
                    let p = store.bind_flat(g, flat).map_err(te)?;
                    Ok(twin_loss(g, &p, &model, &plan).map_err(te)?.total)
                },
                &point_of(&store, &mut rng),
                GRAD_H,
                GRAD_TOL,
            )?
        }
        LossKind::Composite => {
            let model = AudioVisualModel::new(&cfg, MICRO_FRAME_DIM, true, &mut rng)?;
            let store: ParamStore<f64> = model.params.cast();
            let head = HeadRegistry::<f64>::default().build(
                "regularized",
                &HeadSettings {
                    lambda: 0.5,
                    tau_vq: 0.1,
                },
            )?;
            let vocab = signed_vocab(&mut rng, 3, cfg.out_dim);
            let negs = vec![
                sample_nfc_negatives(6, 2, &mut rng)?,
                sample_nfc_negatives(7, 2, &mut rng)?,
            ];
            let plan = StepPlan {
                frames: frames.clone(),
                nfc_negatives: Some(negs),
                retrieval: Some(unit_rows(&mut rng, 2 * 4, cfg.joint_dim)),
                mask_seed: Some(streams.derive("mask", &[])),
                mask_prob: 0.5,
                external: None,
                fixed: Some(starts.clone()),
            };
            let w = LossWeights {
                tau_ret: 0.07,
                aux_weight: 1.0,
                prenormalize: false,
            };
            grad_check(
                |g, flat| {
                    let p = store.bind_flat(g, flat).map_err(te)?;
                    let t = composite_loss(g, &p, &cfg, &model.text, head.as_ref(), Some(&vocab), &plan, &w).map_err(te)?;
                    Ok(t.total)
                },
                &point_of(&store, &mut rng),
                GRAD_H,
                GRAD_TOL,
            )?
        }
    };
    Ok(report)
}

/// Outcome of one straight-through draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightThrough {
    /// Every forward row is bitwise equal to the vocabulary row of its
    /// argmax.
    pub rows_exact: bool,
    /// Largest difference between the straight-through input gradient and
    /// the soft-path gradient.
    pub grad_diff: f64,
}

/// Forward and backward of the straight-through quantizer against the
/// soft path on random `S` and vocabulary.
pub fn straight_through_check(seed: u64) -> Result<StraightThrough> {
    let mut rng = SeedStreams::new(seed).stream("straight-through", &[]);
    let m = rng.gen_range(1..=6);
    let d = rng.gen_range(2..=8);
    let v = rng.gen_range(2..=12);
    let tau = [0.05, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
    let s = matrix(&mut rng, m, d);
    let vocab = unit_rows(&mut rng, v, d);
    let probe = matrix(&mut rng, m, d);

    let run = |hard: bool| -> Result<(Tensor<f64>, Tensor<f64>, Vec<usize>)> {
        let mut g = Graph::<f64>::new();
        let sv = g.leaf(s.clone());
        let vv = g.constant(vocab.clone());
        let c = cos_matrix(&mut g, sv, vv)?;
        let arg = crate::alignment::argmax_rows(g.value(c));
        let h = if hard {
            vq_straight_through(&mut g, c, vv, tau)?
        } else {
            vq_soft(&mut g, c, vv, tau)?
        };
        let r = g.constant(probe.clone());
        let hr = g.mul(h, r)?;
        let l = g.sum(hr)?;
        let grads = g.backward(l)?;
        Ok((g.value(h).clone(), grads.get_or_zeros(&g, sv), arg))
    };
    let (h, g_hard, arg) = run(true)?;
    let (_, g_soft, _) = run(false)?;
    let rows_exact = (0..m).all(|i| h.row(i) == vocab.row(arg[i]));
    let grad_diff = g_hard
        .data()
        .iter()
        .zip(g_soft.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(StraightThrough { rows_exact, grad_diff })
}

/// Segment means by explicit loops.
pub fn naive_pool(frames: &[Vec<f64>], starts: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(starts.len());
    for (j, &s) in starts.iter().enumerate() {
        let e = starts.get(j + 1).copied().unwrap_or(frames.len());
        let mut acc = vec![0.0; frames[0].len()];
        for f in &frames[s..e] {
            for (a, x) in acc.iter_mut().zip(f) {
                *a += x;
            }
        }
        for a in acc.iter_mut() {
            *a /= (e - s) as f64;
        }
        out.push(acc);
    }
    out
}

/// Largest difference between graph pooling and the loop oracle on a
/// random utterance and partition.
pub fn pooling_check(seed: u64) -> Result<f64> {
    let mut rng = SeedStreams::new(seed).stream("pooling", &[]);
    let len = rng.gen_range(1..=40);
    let d = rng.gen_range(1..=8);
    let mut starts = vec![0];
    starts.extend((1..len).filter(|_| rng.gen_bool(0.3)));
    let frames: Vec<Vec<f64>> = (0..len).map(|_| normal(&mut rng, d)).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&frames)?);
    let pooled = pool_segments(&mut g, x, &starts)?;
    let oracle = naive_pool(&frames, &starts);
    let got = g.value(pooled);
    let mut worst: f64 = 0.0;
    for (j, row) in oracle.iter().enumerate() {
        for (a, b) in got.row(j).iter().zip(row) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// The masked-position plan the composite check uses, exposed so tests can
/// confirm the auxiliary term is active.
pub fn composite_mask(seed: u64) -> Vec<Vec<usize>> {
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(SeedStreams::new(seed).derive("mask", &[]));
    plan_mask(&[3, 2], 0.5, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_one_seed() {
        for kind in LossKind::ALL {
            let r = gradient_check(kind, 1).unwrap();
            assert!(r.passed, "{}: {:?}", kind.name(), (r.max_rel_error, r.worst_index, r.straddling.len()));
            assert!(r.analytic.iter().any(|&a| a != 0.0), "{} has an all-zero gradient", kind.name());
        }
    }

    #[test]
    fn straight_through_and_pooling_agree() {
        for seed in 0..20 {
            let st = straight_through_check(seed).unwrap();
            assert!(st.rows_exact);
            assert!(st.grad_diff <= 1e-10, "{st:?}");
            assert!(pooling_check(seed).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn naive_pool_by_hand() {
        let f = vec![vec![1.0], vec![3.0], vec![5.0]];
        assert_eq!(naive_pool(&f, &[0, 2]), vec![vec![2.0], vec![5.0]]);
    }
}
