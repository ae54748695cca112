use segalign_tensor::Tensor;

use crate::{Error, Result};

/// A frozen table of embeddings used as retrieval targets and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    matrix: Tensor<f32>,
    /// Archive ids of the rows.
    ids: Vec<usize>,
    cluster_of: Option<Vec<usize>>,
    members: Vec<Vec<usize>>,
    normalized: bool,
}

impl EmbeddingPool {
    pub fn new(matrix: Tensor<f32>, ids: Vec<usize>, normalize: bool) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != ids.len() {
            return Err(Error::Invalid(format!(
                "pool matrix {:?} does not match {} ids",
                matrix.shape(),
                ids.len()
            )));
        }
        let mut matrix = matrix;
        if normalize {
            let d = matrix.cols();
            for row in matrix.data_mut().chunks_mut(d) {
                let n = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::Invalid("pool contains a zero row".into()));
                }
                row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        Ok(Self {
            matrix,
            ids,
            cluster_of: None,
            members: Vec::new(),
            normalized: normalize,
        })
    }

    /// Rows `ids` of a flat `num x dim` table.
    pub fn from_rows(table: &[f32], dim: usize, ids: &[usize], normalize: bool) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        let m = Tensor::matrix(ids.len(), dim, data)?;
        Self::new(m, ids.to_vec(), normalize)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Row index of archive id `id`.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.binary_search(&id).ok().or_else(|| self.ids.iter().position(|&x| x == id))
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn cluster_of(&self) -> Option<&[usize]> {
        self.cluster_of.as_deref()
    }

    pub fn cluster_members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn set_clusters(&mut self, cluster_of: Vec<usize>) -> Result<()> {
        if cluster_of.len() != self.len() {
            return Err(Error::Invalid(format!(
                "{} cluster labels for {} rows",
                cluster_of.len(),
                self.len()
            )));
        }
        let k = cluster_of.iter().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); k];
        for (i, &c) in cluster_of.iter().enumerate() {
            members[c].push(i);
        }
        self.members = members;
        self.cluster_of = Some(cluster_of);
        Ok(())
    }

    pub fn clear_clusters(&mut self) {
        self.cluster_of = None;
        self.members.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rows_have_unit_norm() {
        let p = EmbeddingPool::from_rows(&[3.0, 4.0, 0.0, 2.0, 1.0, 1.0], 2, &[0, 2], true).unwrap();
        for i in 0..2 {
            let n: f32 = p.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(p.row(0), &[0.6, 0.8]);
        assert_eq!(p.position(2), Some(1));
    }

    #[test]
    fn clusters_index_members() {
        let mut p = EmbeddingPool::from_rows(&[1.0; 8], 2, &[0, 1, 2, 3], false).unwrap();
        p.set_clusters(vec![1, 0, 1, 1]).unwrap();
        assert_eq!(p.cluster_members(1), &[0, 2, 3]);
        assert!(p.set_clusters(vec![0]).is_err());
    }
}
