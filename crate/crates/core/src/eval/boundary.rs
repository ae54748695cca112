use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BoundaryScore {
    fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            matched,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }

    /// Micro-average: pools match counts over utterances.
    pub fn pooled(scores: &[BoundaryScore]) -> Self {
        let m = scores.iter().map(|s| s.matched).sum();
        let p = scores.iter().map(|s| s.predicted).sum();
        let g = scores.iter().map(|s| s.gold).sum();
        Self::from_counts(m, p, g)
    }
}

/// Greedy one-to-one matching of sorted boundary lists within
/// `tolerance` frames. Each predicted boundary claims the closest unused
/// gold boundary, earlier predictions first.
pub fn boundary_f1(pred: &[usize], gold: &[usize], tolerance: usize) -> BoundaryScore {
    let mut used = vec![false; gold.len()];
    let mut matched = 0;
    for &p in pred {
        let best = gold
            .iter()
            .enumerate()
            .filter(|&(j, &g)| !used[j] && g.abs_diff(p) <= tolerance)
            .min_by_key(|&(j, &g)| (g.abs_diff(p), j));
        if let Some((j, _)) = best {
            used[j] = true;
            matched += 1;
        }
    }
    BoundaryScore::from_counts(matched, pred.len(), gold.len())
}

/// Boundary score of segment starts, ignoring the trivial start at frame 0.
pub fn starts_f1(pred_starts: &[usize], gold_starts: &[usize], tolerance: usize) -> BoundaryScore {
    let strip = |s: &[usize]| s.iter().copied().filter(|&x| x > 0).collect::<Vec<_>>();
    boundary_f1(&strip(pred_starts), &strip(gold_starts), tolerance)
}
