use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    accuracy, check_split, episode_forward, mean_of, EpochHook, EpochRecord, ModelBundle, Role, Stage,
    TrainConfig,
};
use crate::autodiff::Tape;
use crate::backbone::{pretrain_forward, Mode};
use crate::data::{sample_episode_with, DatasetSplit, Episode, QueryPolicy};
use crate::error::{Error, Result};
use crate::gate::Domain;
use crate::heads::fsl_loss;

fn require_role(bundle: &ModelBundle, want: &[Role]) -> Result<()> {
    if !want.contains(&bundle.role) {
        return Err(Error::config(format!(
            "{} bundle passed where {} is required",
            bundle.role,
            want.iter().map(|r| r.name()).collect::<Vec<_>>().join(" or ")
        )));
    }
    Ok(())
}

/// Supervised classification over the source training classes with
/// shuffled minibatches.
pub fn pretrain(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    require_role(bundle, &[Role::Pretrained])?;
    let head = bundle
        .f_src
        .as_ref()
        .ok_or_else(|| Error::config("pretrained bundle lacks its classifier"))?;
    let labels = head.positions(&split.labels)?;
    let adam = cfg.adam();
    let mut rng = cfg.stream(Stage::Pretrain);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut hits = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.pretrain_batch) {
            if batch.len() < 2 {
                continue;
            }
            let batch_labels: Vec<usize> = batch.iter().map(|i| labels[*i]).collect();
            let mut tape = Tape::new();
            let vars = bundle.bind(&mut tape);
            let x = tape.constant(split.gather(batch));
            let hv = vars.f_src.expect("bound with classifier");
            let lin = &bundle.f_src.as_ref().expect("checked").linear;
            let logits = pretrain_forward(&mut bundle.net, lin, &mut tape, &vars.net, hv, x, Mode::Train)?;
            let lp = tape.log_softmax(logits)?;
            let loss = tape.cross_entropy(lp, &batch_labels)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss is {lv} at epoch {epoch}")));
            }
            hits += accuracy(tape.value(lp), &batch_labels) * batch.len() as f64;
            seen += batch.len();
            tape.backward(loss)?;
            bundle.apply_gradients(&tape, &vars, &adam)?;
            losses.push(lv);
        }
        let rec = EpochRecord {
            stage: "pretrain".into(),
            epoch,
            metrics: BTreeMap::from([
                ("loss".to_string(), mean_of(&losses)),
                ("accuracy".to_string(), hits / seen.max(1) as f64),
            ]),
        };
        hook(&rec, bundle)?;
        curve.push(rec);
    }
    Ok(curve)
}

/// One episode of FSL-loss-only training. Returns (loss, accuracy).
fn fsl_step(bundle: &mut ModelBundle, ep: &Episode, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape);
    let fwd = episode_forward(&mut bundle.net, &mut tape, &vars.net, vars.log_t, ep, None, Mode::Train)?;
    let loss = fsl_loss(&mut tape, fwd.log_probs, &ep.query_labels)?;
    let lv = tape.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("{} loss is {lv}", bundle.role)));
    }
    let acc = accuracy(tape.value(fwd.log_probs), &ep.query_labels);
    tape.backward(loss)?;
    bundle.apply_gradients(&tape, &vars, &cfg.adam())?;
    Ok((lv, acc))
}

fn episodic_loop(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    epochs: usize,
    stage: &str,
    rng: &mut ChaCha8Rng,
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Episode>,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_per_epoch);
        let mut accs = Vec::with_capacity(cfg.episodes_per_epoch);
        let mut target_episodes = 0usize;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = draw(rng)?;
            if ep.domain == Domain::Target {
                target_episodes += 1;
            }
            let (l, a) = fsl_step(bundle, &ep, cfg)?;
            losses.push(l);
            accs.push(a);
        }
        let rec = EpochRecord {
            stage: stage.into(),
            epoch,
            metrics: BTreeMap::from([
                ("loss".to_string(), mean_of(&losses)),
                ("accuracy".to_string(), mean_of(&accs)),
                ("target_episodes".to_string(), target_episodes as f64),
            ]),
        };
        hook(&rec, bundle)?;
        curve.push(rec);
    }
    Ok(curve)
}

fn draw_from(split: &DatasetSplit, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let policy = QueryPolicy::auto(split, cfg.k_shot, cfg.m_query);
    sample_episode_with(split, cfg.n_way, cfg.k_shot, cfg.m_query, policy, rng)
}

/// Episodic training with the FSL loss alone on the teacher's own domain.
/// The bundle is frozen afterwards.
pub fn train_teacher(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let domain = bundle
        .role
        .teacher_domain()
        .ok_or_else(|| Error::config(format!("{} bundle is not a teacher", bundle.role)))?;
    if domain != split.domain {
        return Err(Error::config(format!(
            "{} must train on the {} domain, split {} is {}",
            bundle.role,
            domain.name(),
            split.name,
            split.domain.name()
        )));
    }
    check_split(split, cfg)?;
    let stage = match domain {
        Domain::Source => Stage::SourceTeacher,
        Domain::Target => Stage::TargetTeacher,
    };
    let mut rng = cfg.stream(stage);
    let mut draw = |r: &mut ChaCha8Rng| draw_from(split, cfg, r);
    let curve = episodic_loop(bundle, cfg, cfg.teacher_epochs, bundle.role.name(), &mut rng, &mut draw, hook)?;
    bundle.freeze();
    Ok(curve)
}

/// Size of the union of two splits' class sets.
pub fn merged_class_count(source: &DatasetSplit, target: &DatasetSplit) -> usize {
    source
        .class_ids
        .iter()
        .chain(&target.class_ids)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Baseline on the merged source and auxiliary-target data. Each episode
/// is single-domain; the target pool is chosen with probability
/// `cfg.mbase_mix`.
pub fn train_mbase(
    bundle: &mut ModelBundle,
    source: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    require_role(bundle, &[Role::MBase])?;
    if cfg.mbase_mix < 1.0 {
        check_split(source, cfg)?;
    }
    if cfg.mbase_mix > 0.0 {
        check_split(target, cfg)?;
    }
    let mix = cfg.mbase_mix;
    let mut rng = cfg.stream(Stage::MBase);
    let mut draw = |r: &mut ChaCha8Rng| {
        let use_target = if mix <= 0.0 {
            false
        } else if mix >= 1.0 {
            true
        } else {
            r.random::<f64>() < mix
        };
        draw_from(if use_target { target } else { source }, cfg, r)
    };
    let curve = episodic_loop(bundle, cfg, cfg.mbase_epochs, "m_base", &mut rng, &mut draw, hook)?;
    bundle.freeze();
    Ok(curve)
}
