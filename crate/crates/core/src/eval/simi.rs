use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::recall::cosine;
use super::report::{SimiCell, SimiReport, REPORT_VERSION};
use super::spearman::spearman;
use crate::corpus::SimiPair;
use crate::{Error, Result};

/// Which representation of an utterance is compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPoint {
    /// Mean of the encoded frames.
    FrameMean,
    /// Mean of the segment embeddings.
    #[default]
    SegmentMean,
    /// Output of the frozen text encoder.
    Sentence,
}

impl ExtractionPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrameMean => "frame_mean",
            Self::SegmentMean => "segment_mean",
            Self::Sentence => "sentence",
        }
    }
}

impl fmt::Display for ExtractionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExtractionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_mean" => Ok(Self::FrameMean),
            "segment_mean" => Ok(Self::SegmentMean),
            "sentence" => Ok(Self::Sentence),
            _ => Err(Error::Unknown {
                kind: "extraction point",
                name: s.into(),
                known: "frame_mean, segment_mean, sentence".into(),
            }),
        }
    }
}

/// Spearman correlation (x100) between representation cosines and the
/// graded scores of `pairs`.
pub fn simi_score(pairs: &[SimiPair], reps: &HashMap<String, Vec<f64>>) -> Result<f64> {
    let get = |id: &str| reps.get(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
    let mut model = Vec::with_capacity(pairs.len());
    let mut human = Vec::with_capacity(pairs.len());
    for p in pairs {
        model.push(cosine(get(&p.utt_a)?, get(&p.utt_b)?));
        human.push(p.score);
    }
    Ok(100.0 * spearman(&model, &human)?)
}

/// Scores the dev and test subsets separately. Pairs without a subset count
/// as test. Synthetic archives only fill the synthetic columns.
pub fn eval_simi(
    pairs: &[SimiPair],
    reps: &HashMap<String, Vec<f64>>,
    point: ExtractionPoint,
    label: &str,
    config_digest: Option<String>,
) -> Result<SimiReport> {
    let (dev, test): (Vec<SimiPair>, Vec<SimiPair>) =
        pairs.iter().cloned().partition(|p| p.subset.as_deref() == Some("dev"));
    if dev.is_empty() && test.is_empty() {
        return Err(Error::Invalid("no similarity pairs".into()));
    }
    let score = |ps: &[SimiPair]| if ps.is_empty() { Ok(None) } else { simi_score(ps, reps).map(Some) };
    Ok(SimiReport {
        report_version: REPORT_VERSION,
        kind: "simi".into(),
        config_digest,
        label: label.into(),
        extraction_point: point.as_str().into(),
        dev: SimiCell { synthetic: score(&dev)?, natural: None },
        test: SimiCell { synthetic: score(&test)?, natural: None },
        dev_pairs: dev.len(),
        test_pairs: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str, score: f64, subset: &str) -> SimiPair {
        SimiPair { utt_a: a.into(), utt_b: b.into(), score, subset: Some(subset.into()) }
    }

    fn reps() -> HashMap<String, Vec<f64>> {
        [("a", vec![1.0, 0.0]), ("b", vec![0.8, 0.6]), ("c", vec![0.0, 1.0]), ("d", vec![-0.28, 0.96])]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn scores_equal_to_cosines_give_rho_one() {
        let r = reps();
        let ids = ["a", "b", "c", "d"];
        let mut pairs = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                let c = cosine(&r[ids[i]], &r[ids[j]]);
                pairs.push(pair(ids[i], ids[j], 10.0 * c, if (i + j) % 2 == 0 { "dev" } else { "test" }));
            }
        }
        let rep = eval_simi(&pairs, &r, ExtractionPoint::default(), "x", None).unwrap();
        assert!((rep.dev.synthetic.unwrap() - 100.0).abs() < 1e-9);
        assert!((rep.test.synthetic.unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(rep.dev.natural, None);
        assert_eq!(rep.extraction_point, "segment_mean");
    }

    #[test]
    fn identical_pairs_surface_an_error() {
        let pairs = vec![pair("a", "a", 1.0, "dev"), pair("b", "b", 5.0, "dev"), pair("c", "c", 9.0, "dev")];
        let err = eval_simi(&pairs, &reps(), ExtractionPoint::SegmentMean, "x", None).unwrap_err();
        assert!(err.to_string().contains("variance"), "{err}");
    }

    #[test]
    fn missing_utterance_is_named() {
        let pairs = vec![pair("a", "zz", 1.0, "test"), pair("a", "b", 2.0, "test")];
        let err = eval_simi(&pairs, &reps(), ExtractionPoint::Sentence, "x", None).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn extraction_point_parses() {
        assert_eq!("frame_mean".parse::<ExtractionPoint>().unwrap(), ExtractionPoint::FrameMean);
        assert!("mid".parse::<ExtractionPoint>().is_err());
    }
}
