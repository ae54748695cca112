use segalign_tensor::{Graph, Real, Tensor, TensorError, Var};

use crate::{Error, Result};

/// Frozen subword embedding table with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTable {
    matrix: Tensor<f32>,
}

impl VocabularyTable {
    pub fn new(matrix: Tensor<f32>) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() < 2 {
            return Err(Error::Invalid(format!(
                "vocabulary needs at least two rows, got shape {:?}",
                matrix.shape()
            )));
        }
        let mut matrix = matrix;
        let d = matrix.cols();
        for (i, row) in matrix.data_mut().chunks_mut(d).enumerate() {
            let n = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid(format!("vocabulary row {i} is zero")));
            }
            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
        Ok(Self { matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn row(&self, k: usize) -> &[f32] {
        self.matrix.row(k)
    }
}

/// Cosine of every segment row with every vocabulary row: `[M, V]`.
pub fn cos_matrix<T: Real>(g: &mut Graph<T>, s: Var, vocab: Var) -> Result<Var> {
    let (ss, vs) = (g.shape(s).to_vec(), g.shape(vocab).to_vec());
    if ss.len() != 2 || vs.len() != 2 || ss[1] != vs[1] {
        return Err(TensorError::ShapeMismatch {
            op: "cos_matrix",
            lhs: ss,
            rhs: vs,
        }
        .into());
    }
    let sv = g.value(s);
    if let Some(j) = (0..sv.rows()).find(|&j| sv.row(j).iter().all(|x| *x == T::zero())) {
        return Err(Error::Invalid(format!("segment {j} has zero norm; cosine undefined")));
    }
    let sn = g.l2_normalize(s)?;
    let vn = g.l2_normalize(vocab)?;
    let vt = g.transpose(vn)?;
    Ok(g.matmul(sn, vt)?)
}

/// `log max_k C[j][k]` per row, `[M, 1]`, with a domain error naming the
/// first segment whose best cosine is not positive.
fn log_row_max<T: Real>(g: &mut Graph<T>, c: Var) -> Result<Var> {
    let m = g.max_last(c)?;
    if let Some((j, v)) = g.value(m).data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
        return Err(TensorError::Domain {
            op: "reg_loss",
            index: j,
            value: v.as_f64(),
        }
        .into());
    }
    let l = g.log(m)?;
    let rows = g.shape(c)[0];
    Ok(g.reshape(l, vec![rows, 1])?)
}

/// Vocabulary regularizer: `-(1/M) sum_j log max_k C[j][k]`.
pub fn reg_loss<T: Real>(g: &mut Graph<T>, c: Var) -> Result<Var> {
    let l = log_row_max(g, c)?;
    let m = g.mean(l)?;
    Ok(g.neg(m)?)
}

/// Regularizer over stacked sequences: the per-sequence loss averaged over
/// the `num` sequences; `owner[j]` is the sequence of row `j`.
pub fn reg_loss_grouped<T: Real>(g: &mut Graph<T>, c: Var, owner: &[usize], num: usize) -> Result<Var> {
    let l = log_row_max(g, c)?;
    let per = g.segment_mean(l, owner, num)?;
    let m = g.mean(per)?;
    Ok(g.neg(m)?)
}

/// Softly quantized rows: `softmax(C / tau) @ vocab`.
pub fn vq_soft<T: Real>(g: &mut Graph<T>, c: Var, vocab: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("tau_vq", "must be positive"));
    }
    let z = g.scale(c, 1.0 / tau)?;
    let p = g.softmax(z)?;
    Ok(g.matmul(p, vocab)?)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows<T: Real>(c: &Tensor<T>) -> Vec<usize> {
    let v = c.cols();
    c.data()
        .chunks(v)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (k, x)| if *x > row[best] { k } else { best })
        })
        .collect()
}

/// Hard quantization with straight-through gradients: the forward value is
/// exactly the best-matching vocabulary row, the backward pass is that of
/// [`vq_soft`].
pub fn vq_straight_through<T: Real>(g: &mut Graph<T>, c: Var, vocab: Var, tau: f64) -> Result<Var> {
    let soft = vq_soft(g, c, vocab, tau)?;
    let idx = argmax_rows(g.value(c));
    let table = g.value(vocab);
    let d = table.cols();
    let mut hard = Vec::with_capacity(idx.len() * d);
    for &k in &idx {
        hard.extend_from_slice(table.row(k));
    }
    let hard = Tensor::matrix(idx.len(), d, hard)?;
    Ok(g.straight_through(soft, hard)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab3() -> Tensor<f64> {
        Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap()
    }

    #[test]
    fn cos_matrix_examples() {
        let mut g = Graph::new();
        let v = g.constant(vocab3());
        let s = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap());
        let c = cos_matrix(&mut g, s, v).unwrap();
        assert_eq!(g.value(c).row(0), &[0.0, 0.0, 1.0]);
        let s2 = g.scale(s, 2.0).unwrap();
        let c2 = cos_matrix(&mut g, s2, v).unwrap();
        assert_eq!(g.value(c), g.value(c2));
        let zero = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(cos_matrix(&mut g, zero, v).unwrap_err().to_string().contains("segment 0"));
    }

    #[test]
    fn orthogonal_segment_has_zero_row() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let s = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 5.0]]).unwrap());
        let c = cos_matrix(&mut g, s, v).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn reg_loss_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_rows(&[vec![0.2, 1.0], vec![1.0, -0.3]]).unwrap());
        let l = reg_loss(&mut g, c).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let c = g.constant(Tensor::from_rows(&[vec![0.5, -0.2]]).unwrap());
        let l = reg_loss(&mut g, c).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let c = g.constant(Tensor::from_rows(&[vec![0.5], vec![-0.1]]).unwrap());
        match reg_loss(&mut g, c) {
            Err(Error::Tensor(TensorError::Domain { index, .. })) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vq_soft_examples() {
        let mut g = Graph::<f64>::new();
        let vocab = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = g.constant(vocab);
        let c = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let h = vq_soft(&mut g, c, v, 1.0).unwrap();
        let d = g.value(h).data();
        assert!((d[0] - 0.731_058_578_6).abs() < 1e-9 && (d[1] - 0.268_941_421_4).abs() < 1e-9);
        let h = vq_soft(&mut g, c, v, 1e9).unwrap();
        assert!(g.value(h).data().iter().all(|x| (x - 0.5).abs() < 1e-6));
        let h = vq_soft(&mut g, c, v, 1e-9).unwrap();
        assert!((g.value(h).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn straight_through_picks_lowest_tied_row() {
        let mut g = Graph::new();
        let rows: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64, 1.0]).collect();
        let v = g.constant(Tensor::from_rows(&rows).unwrap());
        let c = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.9, 0.3, 0.0, 0.9]]).unwrap());
        let h = vq_straight_through(&mut g, c, v, 0.1).unwrap();
        assert_eq!(g.value(h).data(), &[2.0, 1.0]);
    }

    #[test]
    fn table_rows_are_unit() {
        let t = VocabularyTable::new(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(t.row(0), &[0.6, 0.8]);
        assert!(VocabularyTable::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).is_err());
    }
}
