//! Alignment heads decide what the frozen text encoder sees: the raw
//! segment embeddings, the same plus a pull toward the vocabulary, or
//! their straight-through quantization onto vocabulary rows.
//!
//! Heads are registered by name and selected from configuration.

use std::collections::BTreeMap;
use std::fmt::Debug;

use segalign_tensor::{Graph, Real, Var};

use super::vocab::{cos_matrix, reg_loss_grouped, vq_straight_through};
use crate::{Error, Result};

/// Graph inputs available to a head.
#[derive(Debug, Clone, Copy)]
pub struct HeadContext<'a> {
    /// Unit-norm vocabulary table as a constant, when the archive has one.
    pub vocab: Option<Var>,
    /// Sequence index of every segment row.
    pub owner: &'a [usize],
    pub num_sequences: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Rows fed to the frozen encoder.
    pub segments: Var,
    /// Unweighted auxiliary regularizer, when the head has one.
    pub reg: Option<Var>,
}

/// Hyperparameters a head may read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSettings {
    pub lambda: f64,
    pub tau_vq: f64,
}

pub trait AlignmentHead<T: Real>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_vocab(&self) -> bool {
        false
    }

    /// Weight of the regularizer in the total loss.
    fn reg_weight(&self) -> f64 {
        0.0
    }

    fn apply(&self, g: &mut Graph<T>, segments: Var, ctx: &HeadContext<'_>) -> Result<HeadOutput>;
}

fn vocab_of(ctx: &HeadContext<'_>, head: &str) -> Result<Var> {
    ctx.vocab
        .ok_or_else(|| Error::config("head", format!("head `{head}` needs a vocabulary table in the archive")))
}

#[derive(Debug, Clone, Copy)]
pub struct DirectHead;

impl<T: Real> AlignmentHead<T> for DirectHead {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn apply(&self, _: &mut Graph<T>, segments: Var, _: &HeadContext<'_>) -> Result<HeadOutput> {
        Ok(HeadOutput { segments, reg: None })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizedHead {
    pub lambda: f64,
}

impl<T: Real> AlignmentHead<T> for RegularizedHead {
    fn name(&self) -> &'static str {
        "regularized"
    }

    fn needs_vocab(&self) -> bool {
        true
    }

    fn reg_weight(&self) -> f64 {
        self.lambda
    }

    fn apply(&self, g: &mut Graph<T>, segments: Var, ctx: &HeadContext<'_>) -> Result<HeadOutput> {
        let vocab = vocab_of(ctx, "regularized")?;
        let c = cos_matrix(g, segments, vocab)?;
        let reg = reg_loss_grouped(g, c, ctx.owner, ctx.num_sequences)?;
        Ok(HeadOutput {
            segments,
            reg: Some(reg),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VqHead {
    pub tau: f64,
}

impl<T: Real> AlignmentHead<T> for VqHead {
    fn name(&self) -> &'static str {
        "vq"
    }

    fn needs_vocab(&self) -> bool {
        true
    }

    fn apply(&self, g: &mut Graph<T>, segments: Var, ctx: &HeadContext<'_>) -> Result<HeadOutput> {
        let vocab = vocab_of(ctx, "vq")?;
        let c = cos_matrix(g, segments, vocab)?;
        let h = vq_straight_through(g, c, vocab, self.tau)?;
        Ok(HeadOutput { segments: h, reg: None })
    }
}

pub type HeadBuilder<T> = fn(&HeadSettings) -> Result<Box<dyn AlignmentHead<T>>>;

/// Name-to-constructor table of alignment heads.
pub struct HeadRegistry<T: Real> {
    builders: BTreeMap<&'static str, HeadBuilder<T>>,
}

impl<T: Real + 'static> Default for HeadRegistry<T> {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("direct", |_| Ok(Box::new(DirectHead)));
        r.register("regularized", |s| {
            if !(s.lambda >= 0.0) {
                return Err(Error::config("lambda", format!("must be >= 0, got {}", s.lambda)));
            }
            Ok(Box::new(RegularizedHead { lambda: s.lambda }))
        });
        r.register("vq", |s| {
            if !(s.tau_vq > 0.0) {
                return Err(Error::config("tau_vq", format!("must be > 0, got {}", s.tau_vq)));
            }
            Ok(Box::new(VqHead { tau: s.tau_vq }))
        });
        r
    }
}

impl<T: Real + 'static> HeadRegistry<T> {
    pub fn register(&mut self, name: &'static str, builder: HeadBuilder<T>) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, name: &str, settings: &HeadSettings) -> Result<Box<dyn AlignmentHead<T>>> {
        match self.builders.get(name) {
            Some(b) => b(settings),
            None => Err(Error::Unknown {
                kind: "alignment head",
                name: name.to_string(),
                known: self.names().join(", "),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use segalign_tensor::Tensor;

    const S: HeadSettings = HeadSettings { lambda: 0.5, tau_vq: 0.1 };

    #[test]
    fn registry_builds_known_heads() {
        let r = HeadRegistry::<f64>::default();
        assert_eq!(r.names(), vec!["direct", "regularized", "vq"]);
        for n in r.names() {
            assert_eq!(r.build(n, &S).unwrap().name(), n);
        }
        assert!(matches!(r.build("nope", &S), Err(Error::Unknown { .. })));
        assert!(r.build("regularized", &HeadSettings { lambda: -1.0, ..S }).is_err());
    }

    #[test]
    fn vq_head_outputs_vocab_rows() {
        let r = HeadRegistry::<f64>::default();
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = g.leaf(Tensor::from_rows(&[vec![0.2, 0.9], vec![3.0, 1.0]]).unwrap());
        let ctx = HeadContext {
            vocab: Some(v),
            owner: &[0, 0],
            num_sequences: 1,
        };
        let out = r.build("vq", &S).unwrap().apply(&mut g, s, &ctx).unwrap();
        assert_eq!(g.value(out.segments).data(), &[0.0, 1.0, 1.0, 0.0]);
        let direct = r.build("direct", &S).unwrap().apply(&mut g, s, &ctx).unwrap();
        assert_eq!(direct.segments, s);
        let no_vocab = HeadContext { vocab: None, ..ctx };
        assert!(r.build("regularized", &S).unwrap().apply(&mut g, s, &no_vocab).is_err());
    }
}
