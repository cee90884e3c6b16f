//! Episodic evaluation with the three inference strategies.
//!
//! Every episode draws from its own random substream, so the same seed
//! yields the same episodes for every strategy and every model.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{argmax, Tensor};
use crate::data::{sample_episode, DatasetSplit};
use crate::error::{Error, Result};
use crate::gate::{Domain, DomainMask};
use crate::trainer::{episode_log_probs, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Std,
    Dsg,
    Both,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Std, Strategy::Dsg, Strategy::Both];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Std => "std",
            Strategy::Dsg => "dsg",
            Strategy::Both => "both",
        }
    }

    fn needs_gates(self) -> bool {
        self != Strategy::Std
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(Strategy::Std),
            "dsg" => Ok(Strategy::Dsg),
            "both" => Ok(Strategy::Both),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            m_query: 15,
            episodes: 200,
            seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.m_query == 0 || self.episodes == 0 {
            return Err(Error::config(format!(
                "evaluation needs N >= 2 and positive K, M and episode count, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub split: String,
    pub domain: Domain,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    /// Percent.
    pub mean: f64,
    /// 1.96 standard errors, in percent.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub fingerprint: String,
}

/// Mean and 95% half-width (1.96 standard errors) of a sample.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Row-wise mean of the two paths' probabilities.
pub fn combine_paths(dsg_log_probs: &Tensor, std_log_probs: &Tensor) -> Result<Tensor> {
    if dsg_log_probs.shape() != std_log_probs.shape() {
        return Err(Error::Shape(format!(
            "path predictions {:?} vs {:?}",
            dsg_log_probs.shape(),
            std_log_probs.shape()
        )));
    }
    let data = dsg_log_probs
        .data()
        .iter()
        .zip(std_log_probs.data())
        .map(|(a, b)| 0.5 * (a.exp() + b.exp()))
        .collect();
    Tensor::new(dsg_log_probs.shape().to_vec(), data)
}

fn percent_correct(scores: &Tensor, labels: &[usize]) -> f64 {
    let c = scores.shape()[1];
    let hits = scores
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, l)| argmax(row) == **l)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Digest of the model state, the split and the protocol.
pub fn fingerprint(model: &ModelBundle, split: &DatasetSplit, strategy: Strategy, settings: &EvalSettings) -> String {
    let mut h = Sha256::new();
    h.update(model.role.name().as_bytes());
    for t in model.params().into_iter().chain(model.buffers()) {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(split.name.as_bytes());
    h.update(strategy.name().as_bytes());
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    hex::encode(&h.finalize()[..8])
}

/// Substream of episode `index`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluates several strategies on the same episodes.
pub fn evaluate_many(
    model: &ModelBundle,
    split: &DatasetSplit,
    strategies: &[Strategy],
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    settings.validate()?;
    if strategies.iter().any(|s| s.needs_gates()) && model.gates.is_none() {
        return Err(Error::config(format!(
            "{} bundle has no gate matrix; only the std strategy applies",
            model.role
        )));
    }
    let masks: Option<DomainMask> = model.gates.as_ref().map(|g| g.infer_masks(split.domain));
    let want_std = strategies.iter().any(|s| *s != Strategy::Dsg);
    let want_dsg = strategies.iter().any(|s| s.needs_gates());

    let per_episode: Vec<Vec<f64>> = (0..settings.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(settings.seed, i);
            let ep = sample_episode(split, settings.n_way, settings.k_shot, settings.m_query, &mut rng)?;
            let (images, _) = ep.all_images()?;
            let mut paths: Vec<Option<&[Tensor]>> = Vec::with_capacity(2);
            if want_std {
                paths.push(None);
            }
            if want_dsg {
                paths.push(Some(&masks.as_ref().expect("checked above").blocks));
            }
            let mut feats = model.net.embed_paths(&images, &paths)?.into_iter();
            let mut next_lp = || -> Result<Tensor> {
                episode_log_probs(&model.head, &feats.next().expect("one per path"), &ep)
            };
            let std_lp = if want_std { Some(next_lp()?) } else { None };
            let dsg_lp = if want_dsg { Some(next_lp()?) } else { None };
            strategies
                .iter()
                .map(|s| {
                    let scores = match s {
                        Strategy::Std => std_lp.clone().expect("computed"),
                        Strategy::Dsg => dsg_lp.clone().expect("computed"),
                        Strategy::Both => combine_paths(dsg_lp.as_ref().expect("computed"), std_lp.as_ref().expect("computed"))?,
                    };
                    Ok(percent_correct(&scores, &ep.query_labels))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(strategies
        .iter()
        .enumerate()
        .map(|(si, &strategy)| {
            let accs: Vec<f64> = per_episode.iter().map(|row| row[si]).collect();
            let (mean, ci95) = mean_ci95(&accs);
            EvalReport {
                strategy,
                split: split.name.clone(),
                domain: split.domain,
                n_way: settings.n_way,
                k_shot: settings.k_shot,
                m_query: settings.m_query,
                episodes: settings.episodes,
                mean,
                ci95,
                per_episode: accs,
                fingerprint: fingerprint(model, split, strategy, settings),
            }
        })
        .collect())
}

pub fn evaluate(
    model: &ModelBundle,
    split: &DatasetSplit,
    strategy: Strategy,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    Ok(evaluate_many(model, split, &[strategy], settings)?.remove(0))
}

/// Evaluation on the held-out source classes; the gated path uses the
/// source mask.
pub fn evaluate_source(
    model: &ModelBundle,
    split: &DatasetSplit,
    strategy: Strategy,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if split.domain != Domain::Source {
        return Err(Error::config(format!("split {} is not a source-domain split", split.name)));
    }
    evaluate(model, split, strategy, settings)
}
