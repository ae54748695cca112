//! Masked-segment auxiliary loss: hide some segment embeddings behind a
//! learned mask vector and ask a one-layer attention predictor to pick the
//! hidden row out of its utterance.

use rand::Rng as _;
use segalign_tensor::{Graph, Real, Tensor, Var};

use crate::params::{add_linear, gaussian, linear, Bound, ParamStore};
use crate::rng::Rng;
use crate::Result;

pub fn init_mlm<T: Real>(dim: usize, rng: &mut Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let mask: Tensor<T> = gaussian(rng, 1, dim, 0.1);
    p.insert("mlm.mask", mask.reshaped(vec![dim]).expect("same size"));
    for name in ["mlm.wq", "mlm.wk", "mlm.wv", "mlm.wo"] {
        p.insert(name, gaussian(rng, dim, dim, 1.0));
    }
    add_linear(&mut p, rng, "mlm.out", dim, dim, 1.0);
    p
}

/// Bernoulli(`mask_prob`) positions of each sequence; sequences shorter
/// than two rows are never masked.
pub fn plan_mask(lengths: &[usize], mask_prob: f64, rng: &mut Rng) -> Vec<Vec<usize>> {
    lengths
        .iter()
        .map(|&m| {
            let picks: Vec<usize> = (0..m).filter(|_| rng.gen_bool(mask_prob)).collect();
            if m < 2 {
                Vec::new()
            } else {
                picks
            }
        })
        .collect()
}

/// Per-row loss `-log softmax_i(cos(pred_r, targets_i))[truth_r]` at unit
/// temperature, `[n, 1]`.
pub fn masked_contrastive<T: Real>(g: &mut Graph<T>, pred: Var, targets: Var, truth: &[usize]) -> Result<Var> {
    let m = g.shape(targets)[0];
    let pn = g.l2_normalize(pred)?;
    let tn = g.l2_normalize(targets)?;
    let tt = g.transpose(tn)?;
    let sims = g.matmul(pn, tt)?;
    let logp = g.log_softmax(sims)?;
    let flat = g.reshape(logp, vec![truth.len() * m, 1])?;
    let idx: Vec<usize> = truth.iter().enumerate().map(|(r, &t)| r * m + t).collect();
    let picked = g.gather_rows(flat, &idx)?;
    Ok(g.neg(picked)?)
}

/// Mean masked-segment loss over all masked positions of the stacked
/// sequences in `s`; exactly zero when nothing is masked.
pub fn mlm_aux_loss<T: Real>(g: &mut Graph<T>, p: &Bound, s: Var, lengths: &[usize], masked: &[Vec<usize>]) -> Result<Var> {
    let total: usize = masked.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let (n, d) = (g.shape(s)[0], g.shape(s)[1]);
    let mut owner = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(lengths.len());
    for (b, &m) in lengths.iter().enumerate() {
        offsets.push(owner.len());
        owner.extend(std::iter::repeat_n(b, m));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for (b, rows) in masked.iter().enumerate() {
        for &r in rows {
            idx[offsets[b] + r] = n;
        }
    }
    let mask_row = g.reshape(p.var("mlm.mask"), vec![1, d])?;
    let ext = g.concat(&[s, mask_row], 0)?;
    let x = g.gather_rows(ext, &idx)?;

    let q = g.matmul(x, p.var("mlm.wq"))?;
    let k = g.matmul(x, p.var("mlm.wk"))?;
    let v = g.matmul(x, p.var("mlm.wv"))?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    if lengths.len() > 1 {
        let data = (0..n * n)
            .map(|i| if owner[i / n] == owner[i % n] { T::zero() } else { T::lit(-1e9) })
            .collect();
        let mask = g.constant(Tensor::matrix(n, n, data)?);
        scores = g.add(scores, mask)?;
    }
    let att = g.softmax(scores)?;
    let o = g.matmul(att, v)?;
    let o = g.matmul(o, p.var("mlm.wo"))?;
    let y = g.add(x, o)?;
    let pred = linear(g, p, "mlm.out", y)?;

    let mut terms = Vec::new();
    for (b, rows) in masked.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let global: Vec<usize> = rows.iter().map(|&r| offsets[b] + r).collect();
        let pb = g.gather_rows(pred, &global)?;
        let tb = g.slice(s, 0, offsets[b], lengths[b])?;
        terms.push(masked_contrastive(g, pb, tb, rows)?);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn contrastive_value_for_orthogonal_rows() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let pred = g.constant(Tensor::from_rows(&[vec![0.0, 2.0, 0.0]]).unwrap());
        let l = masked_contrastive(&mut g, pred, t, &[1]).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn no_mask_means_zero_loss() {
        let mut rng = SeedStreams::new(0).stream("m", &[]);
        let plan = plan_mask(&[4, 5], 0.0, &mut rng);
        assert!(plan.iter().all(Vec::is_empty));
        let params = init_mlm::<f64>(3, &mut rng);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let s = g.leaf(Tensor::full(vec![9, 3], 0.1));
        let l = mlm_aux_loss(&mut g, &b, s, &[4, 5], &plan).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn mask_plan_is_reproducible() {
        let s = SeedStreams::new(4);
        let a = plan_mask(&[6, 1, 9], 0.5, &mut s.stream("mask", &[2]));
        let b = plan_mask(&[6, 1, 9], 0.5, &mut s.stream("mask", &[2]));
        assert_eq!(a, b);
        assert!(a[1].is_empty());
    }

    #[test]
    fn masked_loss_is_finite_and_positive() {
        let mut rng = SeedStreams::new(1).stream("m", &[]);
        let params = init_mlm::<f64>(4, &mut rng);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let data: Vec<f64> = (0..28).map(|i| (i as f64 * 0.7).sin()).collect();
        let s = g.leaf(Tensor::matrix(7, 4, data).unwrap());
        let l = mlm_aux_loss(&mut g, &b, s, &[3, 4], &[vec![1], vec![0, 3]]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v > 0.0);
    }
}
