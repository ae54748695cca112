//! Frozen, seeded stand-in for a pretrained text transformer. Its weights
//! never change, but gradients flow through it to the input sequence.

use segalign_tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::params::{gaussian, ParamStore};
use crate::rng::SeedStreams;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASK: f64 = -1e9;

/// Everything needed to rebuild a frozen encoder bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenSpec {
    pub seed: u64,
    pub in_dim: usize,
    pub joint_dim: usize,
    pub heads: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    spec: FrozenSpec,
    weights: ParamStore<f64>,
    weights_f32: ParamStore<f32>,
}

/// Sentence-level outputs for a batch of sequences.
#[derive(Debug, Clone, Copy)]
pub struct TextOutput {
    /// Mean-pooled final hidden states, `[B, in_dim]`.
    pub pooled: Var,
    /// Unit-norm projections into the joint space, `[B, joint_dim]`.
    pub joint: Var,
}

impl FrozenTextEncoder {
    pub fn new(spec: FrozenSpec) -> Result<Self> {
        let FrozenSpec {
            seed,
            in_dim: d,
            joint_dim,
            heads,
            max_len,
        } = spec;
        if d == 0 || joint_dim == 0 || heads == 0 || max_len == 0 {
            return Err(Error::config("frozen encoder", "dims, heads and max_len must be positive"));
        }
        if d % heads != 0 {
            return Err(Error::config(
                "frozen encoder",
                format!("input dim {d} is not divisible by {heads} heads"),
            ));
        }
        let mut rng = SeedStreams::new(seed).stream("frozen.text", &[d as u64, joint_dim as u64]);
        let mut w = ParamStore::new();
        for name in ["wq", "wk", "wv", "wo"] {
            w.insert(name, gaussian(&mut rng, d, d, 1.0));
        }
        w.insert("ff1", gaussian(&mut rng, d, 2 * d, 1.0));
        w.insert("ff2", gaussian(&mut rng, 2 * d, d, 1.0));
        w.insert("out", gaussian(&mut rng, d, joint_dim, 1.0));
        w.set_frozen("", true);
        let weights_f32 = w.cast();
        Ok(Self {
            spec,
            weights: w,
            weights_f32,
        })
    }

    pub fn spec(&self) -> FrozenSpec {
        self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.spec.joint_dim
    }

    /// Hash of the weights, for checking that nothing ever updates them.
    pub fn digest(&self) -> String {
        self.weights.digest()
    }

    fn weight<T: Real>(&self, g: &mut Graph<T>, name: &str) -> Var {
        let t: Tensor<T> = if std::mem::size_of::<T>() == 4 {
            self.weights_f32.get(name).expect("known weight").cast()
        } else {
            self.weights.get(name).expect("known weight").cast()
        };
        g.constant(t)
    }

    /// Encodes a single sequence `S` of `1..=max_len` rows.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        let m = g.shape(s)[0];
        Ok(self.encode_batch(g, s, &[m])?.joint)
    }

    /// Encodes sequences stacked row-wise in `s`; `lengths[b]` rows belong
    /// to sequence `b`. Attention never crosses sequence boundaries.
    pub fn encode_batch<T: Real>(&self, g: &mut Graph<T>, s: Var, lengths: &[usize]) -> Result<TextOutput> {
        let d = self.spec.in_dim;
        let shape = g.shape(s).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Invalid(format!(
                "frozen encoder expects rows of width {d}, got shape {shape:?}"
            )));
        }
        let n: usize = lengths.iter().sum();
        if n != shape[0] {
            return Err(Error::Invalid(format!("lengths sum to {n}, input has {} rows", shape[0])));
        }
        if let Some(&m) = lengths.iter().find(|&&m| m == 0 || m > self.spec.max_len) {
            return Err(Error::Invalid(format!(
                "sequence length {m} outside 1..={}",
                self.spec.max_len
            )));
        }

        let mut owner = Vec::with_capacity(n);
        let mut pe = Vec::with_capacity(n * d);
        for (b, &m) in lengths.iter().enumerate() {
            owner.extend(std::iter::repeat_n(b, m));
            for pos in 0..m {
                pe.extend(positional_row(pos, d).into_iter().map(T::lit));
            }
        }
        let pe = g.constant(Tensor::matrix(n, d, pe)?);
        let x = g.add(s, pe)?;

        let wq = self.weight(g, "wq");
        let wk = self.weight(g, "wk");
        let wv = self.weight(g, "wv");
        let wo = self.weight(g, "wo");
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mask = if lengths.len() > 1 {
            let data = (0..n * n)
                .map(|i| if owner[i / n] == owner[i % n] { T::zero() } else { T::lit(MASK) })
                .collect();
            Some(g.constant(Tensor::matrix(n, n, data)?))
        } else {
            None
        };
        let heads = self.spec.heads;
        let dh = d / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = mask {
                scores = g.add(scores, mask)?;
            }
            let att = g.softmax(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let att = g.concat(&outs, 1)?;
        let att = g.matmul(att, wo)?;
        let x1 = g.add(x, att)?;
        let x1 = g.layer_norm(x1, LN_EPS)?;

        let ff1 = self.weight(g, "ff1");
        let ff2 = self.weight(g, "ff2");
        let h = g.matmul(x1, ff1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, ff2)?;
        let x2 = g.add(x1, h)?;
        let x2 = g.layer_norm(x2, LN_EPS)?;

        let pooled = g.segment_mean(x2, &owner, lengths.len())?;
        let out = self.weight(g, "out");
        let joint = g.matmul(pooled, out)?;
        let joint = g.l2_normalize(joint)?;
        Ok(TextOutput { pooled, joint })
    }
}

/// Sinusoidal position code scaled to unit row norm, so that position does
/// not drown out unit-norm vocabulary rows.
fn positional_row(pos: usize, d: usize) -> Vec<f64> {
    let scale = (2.0 / d as f64).sqrt();
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            scale * if i % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> FrozenTextEncoder {
        FrozenTextEncoder::new(FrozenSpec {
            seed: 3,
            in_dim: 8,
            joint_dim: 6,
            heads: 4,
            max_len: 16,
        })
        .unwrap()
    }

    fn seq(rows: usize, salt: f64) -> Tensor<f64> {
        let data = (0..rows * 8).map(|i| ((i as f64 + salt) * 0.37).sin()).collect();
        Tensor::matrix(rows, 8, data).unwrap()
    }

    fn run(e: &FrozenTextEncoder, s: Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.constant(s);
        let a = e.encode(&mut g, v).unwrap();
        g.value(a).data().to_vec()
    }

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let a = run(&enc(), seq(5, 0.0));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(a, run(&enc(), seq(5, 0.0)));
        assert_eq!(enc().digest(), enc().digest());
    }

    #[test]
    fn row_order_matters() {
        let s = seq(3, 1.0);
        let mut p = s.clone();
        let d = p.data_mut();
        for j in 0..8 {
            d.swap(j, 16 + j);
        }
        let (a, b) = (run(&enc(), s), run(&enc(), p));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn batching_matches_separate_calls() {
        let e = enc();
        let (s1, s2) = (seq(3, 0.0), seq(4, 9.0));
        let mut rows: Vec<f64> = s1.data().to_vec();
        rows.extend_from_slice(s2.data());
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(7, 8, rows).unwrap());
        let out = e.encode_batch(&mut g, v, &[3, 4]).unwrap();
        let joint = g.value(out.joint).clone();
        for (b, s) in [(0, s1), (1, s2)] {
            let single = run(&e, s);
            for (x, y) in joint.row(b).iter().zip(&single) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn length_out_of_range_is_an_error() {
        let e = enc();
        let mut g = Graph::<f64>::new();
        let v = g.constant(seq(17, 0.0));
        assert!(e.encode(&mut g, v).is_err());
        assert!(FrozenTextEncoder::new(FrozenSpec { in_dim: 6, ..e.spec() }).is_err());
    }
}
