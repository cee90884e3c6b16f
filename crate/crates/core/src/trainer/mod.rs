//! Training stages: source pretraining, the two domain teachers, the gated
//! student and the merged-data baseline.

mod stages;
mod student;

pub use stages::{merged_class_count, pretrain, train_mbase, train_teacher};
pub use student::{student_graph, train_student, train_student_step, PathLosses, StepLosses, StudentGraph};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::backbone::{EmbeddingNet, LinearHead, Mode, NetVars, DEFAULT_CHANNELS, DEFAULT_DECOMPOSE_DEPTH, INPUT_SHAPE};
use crate::data::{DatasetSplit, Episode};
use crate::error::{Error, Result};
use crate::gate::{Domain, DomainMask, GateMatrix};
use crate::heads::{fsl_predict, FslHead, GlobalClassifier};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.05,
            lambda3: 0.05,
            lambda4: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.lambda1 > 1.0 {
            return Err(Error::config(format!("lambda1 must be <= 1, got {}", self.lambda1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub mbase_epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub decompose_depth: usize,
    pub channels: [usize; 4],
    /// Probability that an M-base episode is drawn from the target pool.
    pub mbase_mix: f64,
    /// Student forwards use running BN statistics instead of batch ones.
    pub freeze_student_bn: bool,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            m_query: 15,
            pretrain_epochs: 30,
            pretrain_batch: 64,
            teacher_epochs: 40,
            student_epochs: 60,
            mbase_epochs: 60,
            episodes_per_epoch: 100,
            lr: 1e-3,
            tau: 1.0,
            decompose_depth: DEFAULT_DECOMPOSE_DEPTH,
            channels: DEFAULT_CHANNELS,
            mbase_mix: 0.5,
            freeze_student_bn: true,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("m_query", self.m_query),
            ("pretrain_batch", self.pretrain_batch),
            ("episodes_per_epoch", self.episodes_per_epoch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_way < 2 {
            return Err(Error::config("n_way must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.decompose_depth > 4 {
            return Err(Error::config(format!(
                "decompose_depth must be in [0, 4], got {}",
                self.decompose_depth
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("channels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mbase_mix) {
            return Err(Error::config(format!("mbase_mix must be in [0, 1], got {}", self.mbase_mix)));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// Independent random stream for one stage of a run.
    pub fn stream(&self, stage: Stage) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64 + 1);
        rng
    }
}

/// Random stream identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Pretrain,
    SourceTeacher,
    TargetTeacher,
    Student,
    MBase,
    StudentInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pretrained,
    StTeacher,
    TtTeacher,
    Student,
    MBase,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Pretrained => "pretrained",
            Role::StTeacher => "st_teacher",
            Role::TtTeacher => "tt_teacher",
            Role::Student => "student",
            Role::MBase => "m_base",
        }
    }

    pub fn teacher_domain(self) -> Option<Domain> {
        match self {
            Role::StTeacher => Some(Domain::Source),
            Role::TtTeacher => Some(Domain::Target),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Role::Pretrained),
            "st_teacher" => Ok(Role::StTeacher),
            "tt_teacher" => Ok(Role::TtTeacher),
            "student" => Ok(Role::Student),
            "m_base" => Ok(Role::MBase),
            other => Err(Error::config(format!("unknown role '{other}'"))),
        }
    }
}

/// Linear classifier over the full class set of one training split.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalHead {
    pub class_ids: Vec<usize>,
    pub linear: GlobalClassifier,
}

impl GlobalHead {
    pub fn new<R: Rng + ?Sized>(class_ids: &[usize], feature_dim: usize, rng: &mut R) -> Self {
        Self {
            class_ids: class_ids.to_vec(),
            linear: LinearHead::new(feature_dim, class_ids.len(), rng),
        }
    }

    /// Column index of every global label.
    pub fn positions(&self, global: &[usize]) -> Result<Vec<usize>> {
        global
            .iter()
            .enumerate()
            .map(|(index, &label)| {
                self.class_ids.iter().position(|c| *c == label).ok_or(Error::Label {
                    index,
                    label,
                    classes: self.class_ids.len(),
                })
            })
            .collect()
    }
}

/// Everything one trained model consists of.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub role: Role,
    pub net: EmbeddingNet,
    pub head: FslHead,
    pub f_src: Option<GlobalHead>,
    pub f_tgt: Option<GlobalHead>,
    pub gates: Option<GateMatrix>,
    pub adam: AdamState,
    /// Frozen bundles take no gradient and are never updated.
    pub frozen: bool,
}

/// Tape handles of a bound bundle, in parameter order.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub net: NetVars,
    pub log_t: Var,
    pub f_src: Option<[Var; 2]>,
    pub f_tgt: Option<[Var; 2]>,
    pub gates: Option<Var>,
}

impl BundleVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.net.all();
        v.push(self.log_t);
        v.extend(self.f_src.iter().flatten());
        v.extend(self.f_tgt.iter().flatten());
        v.extend(self.gates);
        v
    }
}

impl ModelBundle {
    fn assemble(
        role: Role,
        net: EmbeddingNet,
        f_src: Option<GlobalHead>,
        f_tgt: Option<GlobalHead>,
        gates: Option<GateMatrix>,
    ) -> Result<Self> {
        let mut b = Self {
            role,
            net,
            head: FslHead::default(),
            f_src,
            f_tgt,
            gates,
            adam: AdamState { step: 0, m: Vec::new(), v: Vec::new() },
            frozen: false,
        };
        b.reset_optimizer();
        b.validate()?;
        Ok(b)
    }

    /// Randomly initialized network with a classifier over `source_classes`.
    pub fn new_pretrained<R: Rng + ?Sized>(cfg: &TrainConfig, source_classes: &[usize], rng: &mut R) -> Result<Self> {
        let net = EmbeddingNet::build(&cfg.channels, 0, INPUT_SHAPE, rng)?;
        let f_src = GlobalHead::new(source_classes, net.feature_dim(), rng);
        Self::assemble(Role::Pretrained, net, Some(f_src), None, None)
    }

    /// Teacher or M-base warm-started from a pretrained embedding.
    pub fn from_pretrained(pre: &ModelBundle, role: Role) -> Result<Self> {
        if matches!(role, Role::Student | Role::Pretrained) {
            return Err(Error::config(format!("role {role} cannot be built with from_pretrained")));
        }
        let mut net = pre.net.clone();
        net.set_decompose_depth(0)?;
        Self::assemble(role, net, None, None, None)
    }

    /// Student warm-started from a pretrained embedding, with global heads
    /// over both training class sets and gates on the last
    /// `cfg.decompose_depth` blocks.
    pub fn new_student<R: Rng + ?Sized>(
        pre: &ModelBundle,
        cfg: &TrainConfig,
        source_classes: &[usize],
        target_classes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = pre.net.clone();
        net.set_decompose_depth(cfg.decompose_depth)?;
        let d = net.feature_dim();
        let f_src = GlobalHead::new(source_classes, d, rng);
        let f_tgt = GlobalHead::new(target_classes, d, rng);
        let gates = (cfg.decompose_depth > 0).then(|| GateMatrix::init(&net, rng));
        Self::assemble(Role::Student, net, Some(f_src), Some(f_tgt), gates)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.net.decompose_depth();
        match (&self.gates, self.role) {
            (Some(g), Role::Student) if depth > 0 => g.check_against(&self.net)?,
            (None, Role::Student) if depth == 0 => {}
            (Some(_), Role::Student) => return Err(Error::config("student with decompose_depth 0 carries gates")),
            (None, Role::Student) => return Err(Error::config("student with gated blocks lacks a gate matrix")),
            (Some(_), role) => return Err(Error::config(format!("{role} bundle must not carry gates"))),
            (None, _) => {}
        }
        let d = self.net.feature_dim();
        for h in self.f_src.iter().chain(&self.f_tgt) {
            if h.linear.weight.shape() != [d, h.class_ids.len()] {
                return Err(Error::config("global classifier does not match the embedding"));
            }
        }
        if self.adam.m.len() != self.params().len() {
            return Err(Error::config("optimizer state does not match the parameter list"));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.net.params();
        p.extend(self.head.params());
        for h in self.f_src.iter().chain(&self.f_tgt) {
            p.extend(h.linear.params());
        }
        if let Some(g) = &self.gates {
            p.push(&g.logits);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.net.params_mut();
        p.extend(self.head.params_mut());
        for h in self.f_src.iter_mut().chain(self.f_tgt.iter_mut()) {
            p.extend(h.linear.params_mut());
        }
        if let Some(g) = &mut self.gates {
            p.push(&mut g.logits);
        }
        p
    }

    /// Non-trainable state that still changes during training.
    pub fn buffers(&self) -> Vec<&Tensor> {
        self.net
            .blocks
            .iter()
            .flat_map(|b| [&b.running_mean, &b.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.net
            .blocks
            .iter_mut()
            .flat_map(|b| [&mut b.running_mean, &mut b.running_var])
            .collect()
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(&self.params());
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn bind(&self, tape: &mut Tape) -> BundleVars {
        let trainable = !self.frozen;
        BundleVars {
            net: self.net.bind(tape, trainable),
            log_t: self.head.bind(tape, trainable),
            f_src: self.f_src.as_ref().map(|h| h.linear.bind(tape, trainable)),
            f_tgt: self.f_tgt.as_ref().map(|h| h.linear.bind(tape, trainable)),
            gates: self.gates.as_ref().map(|g| g.bind(tape, trainable)),
        }
    }

    fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(format!("{} bundle is frozen", self.role)));
        }
        Ok(())
    }

    /// One Adam update from the gradients currently on `tape`.
    pub(crate) fn apply_gradients(&mut self, tape: &Tape, vars: &BundleVars, cfg: &AdamConfig) -> Result<()> {
        self.ensure_trainable()?;
        let handles = vars.all();
        let zeros: Vec<Vec<f32>> = handles
            .iter()
            .map(|v| match tape.grad(*v) {
                Some(_) => Vec::new(),
                None => vec![0.0; tape.value(*v).numel()],
            })
            .collect();
        let grads: Vec<&[f32]> = handles
            .iter()
            .zip(&zeros)
            .map(|(v, z)| tape.grad(*v).unwrap_or(z))
            .collect();
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient in {} update", self.role)));
        }
        let mut adam = std::mem::replace(&mut self.adam, AdamState { step: 0, m: Vec::new(), v: Vec::new() });
        let res = adam_step(&mut self.params_mut(), &grads, &mut adam, cfg);
        self.adam = adam;
        res
    }

    /// Eval-mode FSL log-probabilities `[queries, n_way]` for one episode,
    /// optionally through gate masks.
    pub fn predict(&self, ep: &Episode, masks: Option<&DomainMask>) -> Result<Tensor> {
        let (images, _) = ep.all_images()?;
        let feats = self.net.embed(&images, masks.map(|m| m.blocks.as_slice()))?;
        episode_log_probs(&self.head, &feats, ep)
    }

    /// Teacher probabilities for an episode of the teacher's own domain.
    pub fn teacher_probs(&self, ep: &Episode) -> Result<Tensor> {
        let lp = self.predict(ep, None)?;
        let probs = lp.data().iter().map(|v| v.exp()).collect();
        Tensor::new(lp.shape().to_vec(), probs)
    }
}

/// FSL log-probabilities from precomputed features of support then query.
pub fn episode_log_probs(head: &FslHead, feats: &Tensor, ep: &Episode) -> Result<Tensor> {
    let ns = ep.support_labels.len();
    let d = feats.shape()[1];
    let mut tape = Tape::new();
    let all = tape.constant(feats.clone());
    let s = tape.narrow(all, 0, ns)?;
    let q = tape.narrow(all, ns, feats.shape()[0] - ns)?;
    debug_assert_eq!(tape.shape(s)[1], d);
    let lt = head.bind(&mut tape, false);
    let lp = fsl_predict(&mut tape, lt, s, &ep.support_labels, q, ep.n_way)?;
    Ok(tape.value(lp).clone())
}

/// Per-episode forward pieces shared by every episodic stage.
pub(crate) struct EpisodeForward {
    pub feats: Var,
    pub log_probs: Var,
}

/// Forward of support and query as one batch, then the FSL head.
pub(crate) fn episode_forward(
    net: &mut EmbeddingNet,
    tape: &mut Tape,
    net_vars: &NetVars,
    log_t: Var,
    ep: &Episode,
    masks: Option<&[Var]>,
    mode: Mode,
) -> Result<EpisodeForward> {
    let (images, _) = ep.all_images()?;
    let x = tape.constant(images);
    let feats = net.forward(tape, net_vars, x, masks, mode)?;
    episode_head(tape, log_t, feats, ep)
}

/// FSL head over features laid out support first, then query.
pub(crate) fn episode_head(tape: &mut Tape, log_t: Var, feats: Var, ep: &Episode) -> Result<EpisodeForward> {
    let ns = ep.support_labels.len();
    let nq = ep.query_labels.len();
    let s = tape.narrow(feats, 0, ns)?;
    let q = tape.narrow(feats, ns, nq)?;
    let log_probs = fsl_predict(tape, log_t, s, &ep.support_labels, q, ep.n_way)?;
    Ok(EpisodeForward { feats, log_probs })
}

/// Fraction of rows whose argmax equals the label.
pub(crate) fn accuracy(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let c = log_probs.shape()[1];
    let hits = log_probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, l)| crate::autodiff::argmax(row) == **l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// One line of a stage's training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Called once per finished epoch with the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &ModelBundle) -> Result<()> + 'a;

/// Checks that episodes of the configured shape can be drawn from `split`.
pub fn check_split(split: &DatasetSplit, cfg: &TrainConfig) -> Result<()> {
    if split.class_ids.len() < cfg.n_way {
        return Err(Error::config(format!(
            "split {} has {} classes, {}-way episodes need more",
            split.name,
            split.class_ids.len(),
            cfg.n_way
        )));
    }
    if split.min_images_per_class() < cfg.k_shot {
        return Err(Error::config(format!(
            "split {} has {} images per class, fewer than K = {}",
            split.name,
            split.min_images_per_class(),
            cfg.k_shot
        )));
    }
    Ok(())
}

pub(crate) fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
