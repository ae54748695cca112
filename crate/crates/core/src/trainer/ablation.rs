//! Paired training runs that differ in one setting, reported side by side
//! in the retrieval table layout.

use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::fit::fit;
use crate::corpus::Archive;
use crate::eval::{emit_report, RetrievalReport, RetrievalRow};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    /// `key=value` overrides on top of the base configuration.
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub name: String,
    pub variants: Vec<Variant>,
}

fn variant(label: &str, overrides: &[&str]) -> Variant {
    Variant {
        label: label.into(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

impl Ablation {
    /// Clustered hard negatives against uniform negatives.
    pub fn hard_mining() -> Self {
        Self {
            name: "hard_mining".into(),
            variants: vec![
                variant("uniform", &["negative_sampler=uniform"]),
                variant("clustered", &["negative_sampler=clustered"]),
            ],
        }
    }

    /// Vocabulary regularization at several weights.
    pub fn lambda(values: &[f64]) -> Self {
        Self {
            name: "lambda".into(),
            variants: values
                .iter()
                .map(|l| Variant {
                    label: format!("lambda={l}"),
                    overrides: vec!["head=regularized".into(), format!("lambda={l}")],
                })
                .collect(),
        }
    }

    pub fn vq() -> Self {
        Self {
            name: "vq".into(),
            variants: vec![variant("direct", &["head=direct"]), variant("vq", &["head=vq"])],
        }
    }

    pub fn mlm() -> Self {
        Self {
            name: "mlm".into(),
            variants: vec![variant("none", &["aux_mlm=false"]), variant("mlm", &["aux_mlm=true"])],
        }
    }

    /// The four standard protocols.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::hard_mining(),
            Self::lambda(&[0.0, 0.1, 0.5, 1.0]),
            Self::vq(),
            Self::mlm(),
        ]
    }

    /// Trains every variant under `out/<name>/<label>` and writes the
    /// combined table to `out/<name>/report.{json,txt}`.
    pub fn run(&self, base: &TrainConfig, archive: &Archive, out: &Path) -> Result<(RetrievalReport, PathBuf)> {
        if self.variants.is_empty() {
            return Err(Error::Invalid(format!("ablation `{}` has no variants", self.name)));
        }
        let dir = out.join(&self.name);
        let mut rows = Vec::with_capacity(self.variants.len());
        for v in &self.variants {
            let cfg = base.with_overrides(&v.overrides)?;
            log::info!("ablation {} / {}", self.name, v.label);
            let run_dir = dir.join(v.label.replace(['=', '/'], "_"));
            let outcome = fit(&cfg, archive, &run_dir, None)?;
            rows.push(RetrievalRow {
                label: v.label.clone(),
                recall: outcome.test,
            });
        }
        let report = RetrievalReport::new(Some(base.digest()), rows);
        let (json, _) = emit_report(&report, &dir.join("report"))?;
        Ok((report, json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_protocols_resolve_against_desk_config() {
        let base = TrainConfig::desk();
        let all = Ablation::standard();
        assert_eq!(all.iter().map(|a| a.variants.len()).collect::<Vec<_>>(), vec![2, 4, 2, 2]);
        for a in &all {
            for v in &a.variants {
                base.with_overrides(&v.overrides).unwrap();
            }
        }
        let c = base.with_overrides(&Ablation::lambda(&[0.5]).variants[0].overrides).unwrap();
        assert_eq!((c.head.as_str(), c.lambda), ("regularized", 0.5));
    }
}
