use segalign_tensor::{Graph, Real, Var};

use crate::{Error, Result};

/// Batched retrieval loss. Row `b` of `a` (`[B, d]`) is scored against
/// candidate rows `b*(n+1) .. (b+1)*(n+1)` of `cands`, the first of which
/// is its positive. Returns the mean over the batch of
/// `-log softmax(a . cand / tau)[positive]`.
pub fn retrieval_loss_batch<T: Real>(g: &mut Graph<T>, a: Var, cands: Var, tau: f64) -> Result<Var> {
    let (b, d) = (g.shape(a)[0], g.shape(a)[1]);
    let rows = g.shape(cands)[0];
    if g.shape(cands)[1] != d || !rows.is_multiple_of(b) || rows / b < 2 {
        return Err(Error::Invalid(format!(
            "retrieval candidates {:?} do not fit queries {:?}",
            g.shape(cands),
            g.shape(a)
        )));
    }
    let k = rows / b;
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let q = g.gather_rows(a, &idx)?;
    let dots = g.dot_last(q, cands)?;
    let logits = g.reshape(dots, vec![b, k])?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let logp = g.log_softmax(logits)?;
    let pos = g.slice(logp, 1, 0, 1)?;
    let m = g.mean(pos)?;
    Ok(g.neg(m)?)
}

/// Retrieval loss of one query `a` (`[d]`) with its positive `pos` (`[d]`)
/// and negatives `negs` (`[n, d]`).
pub fn retrieval_loss<T: Real>(g: &mut Graph<T>, a: Var, pos: Var, negs: Var, tau: f64) -> Result<Var> {
    let d = g.shape(a)[0];
    let a2 = g.reshape(a, vec![1, d])?;
    let p2 = g.reshape(pos, vec![1, d])?;
    let cands = g.concat(&[p2, negs], 0)?;
    retrieval_loss_batch(g, a2, cands, tau)
}

/// In-batch contrastive loss between paired rows of `left` and `right`
/// (`[B, d]`): each left row must pick its own right row among all B.
/// With `symmetric`, the right-to-left direction is averaged in.
pub fn paired_contrastive_loss<T: Real>(g: &mut Graph<T>, left: Var, right: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let b = g.shape(left)[0];
    if b < 2 {
        return Err(Error::TooSmall {
            what: "contrastive batch size",
            actual: b,
            required: 2,
        });
    }
    let one_way = |g: &mut Graph<T>, q: Var, c: Var| -> Result<Var> {
        let ct = g.transpose(c)?;
        let logits = g.matmul(q, ct)?;
        let logits = g.scale(logits, 1.0 / tau)?;
        let logp = g.log_softmax(logits)?;
        let flat = g.reshape(logp, vec![b * b, 1])?;
        let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
        let d = g.gather_rows(flat, &diag)?;
        let m = g.mean(d)?;
        Ok(g.neg(m)?)
    };
    let l = one_way(g, left, right)?;
    if !symmetric {
        return Ok(l);
    }
    let r = one_way(g, right, left)?;
    let s = g.add(l, r)?;
    Ok(g.scale(s, 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use segalign_tensor::Tensor;

    fn one(dot_pos: f64, dot_neg: f64, tau: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let pos = g.constant(Tensor::vector(vec![dot_pos, 1.0]));
        let negs = g.constant(Tensor::matrix(1, 2, vec![dot_neg, 5.0]).unwrap());
        let l = retrieval_loss(&mut g, a, pos, negs, tau).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn retrieval_examples() {
        assert!((one(0.3, 0.3, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((one(1.0, 0.0, 1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((one(1.0, 0.0, 1.0) - 0.3133).abs() < 5e-5);
        let sharp = one(1.0, 0.0, 0.07);
        assert!((sharp - (1.0 + (-1.0 / 0.07f64).exp()).ln()).abs() < 1e-15);
        assert!((sharp - 6.2e-7).abs() < 5e-8);
    }

    #[test]
    fn equal_dots_give_log_pool_size() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 3], 0.5));
        let c = g.constant(Tensor::full(vec![2 * 5, 3], 0.2));
        let l = retrieval_loss_batch(&mut g, a, c, 0.07).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn paired_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(vec![2, 2], 0.5));
        let loss = paired_contrastive_loss(&mut g, l, l, 1.0, false).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let e = g.constant(eye);
        let loss = paired_contrastive_loss(&mut g, e, e, 1.0, true).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.5514).abs() < 5e-5);

        let single = g.constant(Tensor::full(vec![1, 2], 1.0));
        assert!(paired_contrastive_loss(&mut g, single, single, 1.0, false).is_err());
    }
}
