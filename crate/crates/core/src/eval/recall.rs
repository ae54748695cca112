use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; identical nonzero vectors give exactly 1, zero
/// vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else if a == b {
        1.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Rank (0-based) that `target` receives among `scores`, where higher is
/// better and equal scores rank lower-index candidates first.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Cosine similarity matrix `queries x candidates`.
pub fn cosine_matrix(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c: Vec<Vec<f64>> = candidates.iter().map(|v| unit(v)).collect();
    queries
        .iter()
        .map(|q| {
            let q = unit(q);
            c.iter().map(|x| dot(&q, x)).collect()
        })
        .collect()
}

/// Recall@K for both retrieval directions between captions and images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRecall {
    pub ks: Vec<usize>,
    /// Each caption ranks all images.
    pub speech_to_image: Vec<f64>,
    /// Each image ranks all captions; a hit is any of its captions.
    pub image_to_speech: Vec<f64>,
    pub mean: Vec<f64>,
    pub num_captions: usize,
    pub num_images: usize,
}

/// `audio[q]` is the embedding of caption `q`, whose image is
/// `images[gold[q]]`.
pub fn recall_at_k(audio: &[Vec<f64>], images: &[Vec<f64>], gold: &[usize], ks: &[usize]) -> Result<DirectionalRecall> {
    if audio.is_empty() || images.is_empty() {
        return Err(Error::Invalid("recall needs at least one caption and one image".into()));
    }
    if gold.len() != audio.len() || gold.iter().any(|&g| g >= images.len()) {
        return Err(Error::Invalid("every caption needs a gold image among the candidates".into()));
    }
    let sims = cosine_matrix(audio, images);
    let s2i_ranks: Vec<usize> = sims.iter().zip(gold).map(|(row, &g)| rank_of(row, g)).collect();
    let mut i2s_ranks = Vec::with_capacity(images.len());
    for img in 0..images.len() {
        let col: Vec<f64> = sims.iter().map(|row| row[img]).collect();
        let best = (0..audio.len())
            .filter(|&q| gold[q] == img)
            .map(|q| rank_of(&col, q))
            .min();
        if let Some(r) = best {
            i2s_ranks.push(r);
        }
    }
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
    let s2i: Vec<f64> = ks.iter().map(|&k| frac(&s2i_ranks, k)).collect();
    let i2s: Vec<f64> = ks.iter().map(|&k| frac(&i2s_ranks, k)).collect();
    let mean = s2i.iter().zip(&i2s).map(|(a, b)| (a + b) / 2.0).collect();
    Ok(DirectionalRecall {
        ks: ks.to_vec(),
        speech_to_image: s2i,
        image_to_speech: i2s,
        mean,
        num_captions: audio.len(),
        num_images: i2s_ranks.len(),
    })
}

/// Caption-to-caption retrieval: each query ranks the candidates and hits
/// when the retrieved candidate shares its image.
pub fn semantic_audio_retrieval(
    queries: &[Vec<f64>],
    query_image: &[usize],
    candidates: &[Vec<f64>],
    candidate_image: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if candidates.is_empty() || queries.is_empty() {
        return Err(Error::Invalid("semantic retrieval needs queries and candidates".into()));
    }
    let sims = cosine_matrix(queries, candidates);
    let mut ranks = Vec::with_capacity(queries.len());
    for (q, row) in sims.iter().enumerate() {
        let gold = candidate_image
            .iter()
            .position(|&c| c == query_image[q])
            .ok_or_else(|| Error::Invalid(format!("query {q}: its image {} has no candidate", query_image[q])))?;
        ranks.push(rank_of(row, gold));
    }
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn perfect_ranking() {
        let images: Vec<Vec<f64>> = (0..4).map(|i| basis(4, i)).collect();
        let gold = vec![0, 1, 2, 3, 0, 1];
        let audio: Vec<Vec<f64>> = gold.iter().map(|&g| images[g].clone()).collect();
        let r = recall_at_k(&audio, &images, &gold, &[1, 5, 10]).unwrap();
        assert!(r.speech_to_image.iter().chain(&r.image_to_speech).all(|&x| x == 1.0));
    }

    #[test]
    fn gold_ranked_last_of_five() {
        let images: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let audio = vec![vec![0.0, 1.0]];
        let r = recall_at_k(&audio, &images, &[0], &[1, 5]).unwrap();
        assert_eq!(r.speech_to_image, vec![0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 2);
        assert!(recall_at_k(&[], &[vec![1.0]], &[], &[1]).is_err());
    }

    #[test]
    fn semantic_examples() {
        let c: Vec<Vec<f64>> = (0..3).map(|i| basis(3, i)).collect();
        let r = semantic_audio_retrieval(&c, &[7, 8, 9], &c, &[7, 8, 9], &[1]).unwrap();
        assert_eq!(r, vec![1.0]);
        let r = semantic_audio_retrieval(&[vec![0.3, -1.0]], &[4], &[vec![1.0, 1.0]], &[4], &[1]).unwrap();
        assert_eq!(r, vec![1.0]);
        assert!(semantic_audio_retrieval(&c, &[1, 2, 3], &c, &[7, 8, 9], &[1]).is_err());
    }
}
