//! Domain-specific gate: one pair of logits per gated filter (column 0 =
//! source, column 1 = target). Training binarizes with a hard Gumbel-softmax
//! sample; inference takes the larger logit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gumbel_noise, Scalar, Tape, Tensor, Var};
use crate::backbone::EmbeddingNet;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn column(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "src" => Ok(Domain::Source),
            "target" | "tgt" => Ok(Domain::Target),
            other => Err(Error::config(format!("unknown domain '{other}'"))),
        }
    }
}

/// Rows `offset..offset + len` of the logits belong to one gated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRange {
    pub block: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix<T = f32> {
    /// `[F, 2]`, trainable.
    pub logits: Tensor<T>,
    pub blocks: Vec<BlockRange>,
}

/// Hard per-block channel masks for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMask<T = f32> {
    pub domain: Domain,
    pub blocks: Vec<Tensor<T>>,
}

/// Complementary masks from a single training-time draw, as tape handles.
#[derive(Clone, Debug)]
pub struct GateDraw {
    pub sample: Var,
    pub source: Vec<Var>,
    pub target: Vec<Var>,
}

impl GateDraw {
    pub fn masks(&self, domain: Domain) -> &[Var] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub block: usize,
    pub total: usize,
    pub source_count: usize,
    pub target_count: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("gate temperature must be > 0, got {tau}")));
    }
    Ok(())
}

impl<T: Scalar> GateMatrix<T> {
    /// Logits drawn i.i.d. from `Normal(0, 0.01)`, one row per gated filter.
    pub fn init<R: Rng + ?Sized>(net: &EmbeddingNet<T>, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (i, b) in net.blocks.iter().enumerate() {
            if b.spec.gated {
                blocks.push(BlockRange {
                    block: i,
                    offset,
                    len: b.spec.out_channels,
                });
                offset += b.spec.out_channels;
            }
        }
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let logits = if offset == 0 {
            // An inert gate still needs a well-formed tensor.
            Tensor::zeros([1, 2])
        } else {
            Tensor::from_fn([offset, 2], |_| T::of(normal.sample(rng)))
        };
        Self { logits, blocks }
    }

    pub fn filter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn is_inert(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Soft probability that each filter belongs to the source domain.
    pub fn source_probabilities(&self) -> Vec<f64> {
        (0..self.filter_count())
            .map(|i| {
                let r = self.logits.row(i);
                let (a, b) = (r[0].as_f64(), r[1].as_f64());
                1.0 / (1.0 + (b - a).exp())
            })
            .collect()
    }

    pub fn check_against(&self, net: &EmbeddingNet<T>) -> Result<()> {
        if self.filter_count() != net.gated_filter_count() {
            return Err(Error::config(format!(
                "gate matrix covers {} filters, network has {}",
                self.filter_count(),
                net.gated_filter_count()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Var {
        tape.leaf(self.logits.clone(), trainable)
    }

    /// One hard Gumbel-softmax sample per filter on the tape; column 0 of
    /// the sample gates the source path and column 1 the target path.
    pub fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        tau: f64,
        rng: &mut R,
    ) -> Result<GateDraw> {
        check_tau(tau)?;
        if self.is_inert() {
            let sample = tape.constant(Tensor::zeros([1, 2]));
            return Ok(GateDraw {
                sample,
                source: Vec::new(),
                target: Vec::new(),
            });
        }
        let sample = tape.gumbel_softmax(logits, tau, rng, true)?;
        let src = tape.column(sample, Domain::Source.column())?;
        let tgt = tape.column(sample, Domain::Target.column())?;
        let mut source = Vec::with_capacity(self.blocks.len());
        let mut target = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            source.push(tape.narrow(src, b.offset, b.len)?);
            target.push(tape.narrow(tgt, b.offset, b.len)?);
        }
        Ok(GateDraw {
            sample,
            source,
            target,
        })
    }

    /// Draws one hard sample and returns the requested domain's masks as
    /// plain values.
    pub fn sample_hard_masks<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R, domain: Domain) -> Result<DomainMask<T>> {
        let (src, tgt) = self.sample_hard_pair(tau, rng)?;
        Ok(match domain {
            Domain::Source => src,
            Domain::Target => tgt,
        })
    }

    /// Source and target masks from the same draw.
    pub fn sample_hard_pair<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<(DomainMask<T>, DomainMask<T>)> {
        check_tau(tau)?;
        if self.is_inert() {
            let empty = |domain| DomainMask {
                domain,
                blocks: Vec::new(),
            };
            return Ok((empty(Domain::Source), empty(Domain::Target)));
        }
        let mut tape = Tape::new();
        let l = tape.constant(self.logits.clone());
        let noise = gumbel_noise(self.logits.shape(), rng);
        let y = tape.gumbel_softmax_with_noise(l, noise, tau, true)?;
        let hard = tape.value(y);
        Ok((
            self.masks_from(hard, Domain::Source),
            self.masks_from(hard, Domain::Target),
        ))
    }

    fn masks_from(&self, one_hot: &Tensor<T>, domain: Domain) -> DomainMask<T> {
        let col = domain.column();
        let blocks = self
            .blocks
            .iter()
            .map(|b| Tensor::from_fn([b.len], |i| one_hot.row(b.offset + i)[col]))
            .collect();
        DomainMask { domain, blocks }
    }

    /// Deterministic binarization: a filter belongs to the source domain iff
    /// its source logit is at least its target logit.
    pub fn infer_masks(&self, domain: Domain) -> DomainMask<T> {
        let hard = self.hard_assignment();
        self.masks_from(&hard, domain)
    }

    fn hard_assignment(&self) -> Tensor<T> {
        let n = self.logits.shape()[0];
        Tensor::from_fn([n, 2], |i| {
            let r = self.logits.row(i / 2);
            let source = r[0] >= r[1];
            if (i % 2 == 0) == source {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Per-block filter counts under [`GateMatrix::infer_masks`].
    pub fn statistics(&self) -> Vec<BlockCounts> {
        let src = self.infer_masks(Domain::Source);
        self.blocks
            .iter()
            .zip(&src.blocks)
            .map(|(b, m)| {
                let s = m.data().iter().filter(|v| **v == T::one()).count();
                BlockCounts {
                    block: b.block,
                    total: b.len,
                    source_count: s,
                    target_count: b.len - s,
                }
            })
            .collect()
    }
}
