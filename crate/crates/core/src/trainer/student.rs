use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_split, episode_head, mean_of, BundleVars, EpochHook, EpochRecord, LossWeights, ModelBundle, Role, Stage,
    TrainConfig,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::Mode;
use crate::data::{sample_episode_with, DatasetSplit, Episode, QueryPolicy};
use crate::error::{Error, Result};
use crate::gate::{Domain, GateDraw};
use crate::heads::{fsl_loss, global_loss};

/// Loss components of one forward path over both domains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathLosses {
    pub kd_src: f64,
    pub kd_tgt: f64,
    pub fsl_src: f64,
    pub fsl_tgt: f64,
    pub cls_src: f64,
    pub cls_tgt: f64,
    /// As computed on the tape.
    pub total: f64,
}

impl PathLosses {
    pub fn kd(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.kd_src + (1.0 - w.lambda1) * self.kd_tgt
    }

    pub fn fsl(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.fsl_src + (1.0 - w.lambda1) * self.fsl_tgt
    }

    pub fn cls(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.cls_src + (1.0 - w.lambda1) * self.cls_tgt
    }

    /// Path loss rebuilt from its components.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.kd(w) + w.lambda2 * self.fsl(w) + w.lambda3 * self.cls(w)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub dsg: PathLosses,
    pub std: PathLosses,
    pub total: f64,
}

impl StepLosses {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.dsg.recombine(w) + w.lambda4 * self.std.recombine(w)
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (name, p) in [("dsg", &self.dsg), ("std", &self.std)] {
            m.insert(format!("{name}_kd_src"), p.kd_src);
            m.insert(format!("{name}_kd_tgt"), p.kd_tgt);
            m.insert(format!("{name}_fsl_src"), p.fsl_src);
            m.insert(format!("{name}_fsl_tgt"), p.fsl_tgt);
            m.insert(format!("{name}_cls_src"), p.cls_src);
            m.insert(format!("{name}_cls_tgt"), p.cls_tgt);
            m.insert(format!("{name}_total"), p.total);
        }
        m.insert("total".into(), self.total);
        m
    }
}

#[derive(Clone, Copy)]
struct DomainTerms {
    kd: Var,
    fsl: Var,
    cls: Var,
}

fn weighted(tape: &mut Tape, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
    let x = tape.scale(a, wa as f32);
    let y = tape.scale(b, wb as f32);
    tape.add(x, y)
}

fn check_teacher(t: &ModelBundle, role: Role) -> Result<()> {
    if t.role != role {
        return Err(Error::config(format!("expected a {role} bundle, got {}", t.role)));
    }
    if !t.frozen {
        return Err(Error::Contract(format!("{role} is not frozen; teachers must take no gradient")));
    }
    Ok(())
}

/// Student objective recorded on a tape, before any backward pass.
pub struct StudentGraph {
    pub vars: BundleVars,
    pub loss: Var,
    pub dsg_total: Var,
    pub std_total: Var,
    pub losses: StepLosses,
}

/// Records both paths over one source and one target episode, distilled
/// against the frozen teachers. Batch statistics of the student are updated
/// when `cfg.freeze_student_bn` is off.
#[allow(clippy::too_many_arguments)]
pub fn student_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    student: &mut ModelBundle,
    st: &ModelBundle,
    tt: &ModelBundle,
    src_ep: &Episode,
    tgt_ep: &Episode,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StudentGraph> {
    if student.role != Role::Student {
        return Err(Error::config(format!("expected a student bundle, got {}", student.role)));
    }
    check_teacher(st, Role::StTeacher)?;
    check_teacher(tt, Role::TtTeacher)?;
    if src_ep.domain != Domain::Source || tgt_ep.domain != Domain::Target {
        return Err(Error::config("student step needs a source episode and a target episode"));
    }
    let w = cfg.weights;
    let teacher_src = st.teacher_probs(src_ep)?;
    let teacher_tgt = tt.teacher_probs(tgt_ep)?;
    let f_src = student.f_src.as_ref().ok_or_else(|| Error::config("student lacks f_src"))?;
    let f_tgt = student.f_tgt.as_ref().ok_or_else(|| Error::config("student lacks f_tgt"))?;
    let (src_images_global, tgt_images_global) = (src_ep.all_images()?.1, tgt_ep.all_images()?.1);
    let pos_src = f_src.positions(&src_images_global)?;
    let pos_tgt = f_tgt.positions(&tgt_images_global)?;

    let vars = student.bind(tape);
    let draw: Option<GateDraw> = match (&student.gates, vars.gates) {
        (Some(g), Some(gv)) => Some(g.sample_on_tape(tape, gv, cfg.tau, rng)?),
        _ => None,
    };
    let fs = vars.f_src.expect("student binds f_src");
    let ft = vars.f_tgt.expect("student binds f_tgt");

    let episodes: [(&Episode, &Tensor, &[usize], [Var; 2]); 2] = [
        (src_ep, &teacher_src, &pos_src, fs),
        (tgt_ep, &teacher_tgt, &pos_tgt, ft),
    ];
    let mut paths = [[None::<DomainTerms>; 2]; 2];
    for (di, (ep, teacher, pos, fv)) in episodes.iter().enumerate() {
        let dsg_masks = draw.as_ref().map(|d| d.masks(ep.domain));
        let feats = if cfg.freeze_student_bn {
            let x = tape.constant(ep.all_images()?.0);
            student.net.forward_eval_paths(tape, &vars.net, x, &[dsg_masks, None])?
        } else {
            let mut f = Vec::with_capacity(2);
            for masks in [dsg_masks, None] {
                let x = tape.constant(ep.all_images()?.0);
                f.push(student.net.forward(tape, &vars.net, x, masks, Mode::Train)?);
            }
            f
        };
        for (pi, f) in feats.into_iter().enumerate() {
            let fwd = episode_head(tape, vars.log_t, f, ep)?;
            let kd = tape.kl_div(fwd.log_probs, teacher)?;
            let fsl = fsl_loss(tape, fwd.log_probs, &ep.query_labels)?;
            let cls = global_loss(tape, *fv, fwd.feats, pos)?;
            paths[pi][di] = Some(DomainTerms { kd, fsl, cls });
        }
    }

    let mut path_vars = Vec::with_capacity(2);
    let mut reported = [PathLosses::default(); 2];
    for (pi, terms) in paths.iter().enumerate() {
        let [s, t] = terms.map(|x| x.expect("filled"));
        let kd = weighted(tape, s.kd, w.lambda1, t.kd, 1.0 - w.lambda1)?;
        let fsl = weighted(tape, s.fsl, w.lambda1, t.fsl, 1.0 - w.lambda1)?;
        let cls = weighted(tape, s.cls, w.lambda1, t.cls, 1.0 - w.lambda1)?;
        let aux = weighted(tape, fsl, w.lambda2, cls, w.lambda3)?;
        let total = tape.add(kd, aux)?;
        let val = |v: Var| tape.value(v).data()[0] as f64;
        reported[pi] = PathLosses {
            kd_src: val(s.kd),
            kd_tgt: val(t.kd),
            fsl_src: val(s.fsl),
            fsl_tgt: val(t.fsl),
            cls_src: val(s.cls),
            cls_tgt: val(t.cls),
            total: val(total),
        };
        path_vars.push(total);
    }
    let loss = weighted(tape, path_vars[0], 1.0, path_vars[1], w.lambda4)?;
    let total = tape.value(loss).data()[0] as f64;
    Ok(StudentGraph {
        vars,
        loss,
        dsg_total: path_vars[0],
        std_total: path_vars[1],
        losses: StepLosses {
            dsg: reported[0],
            std: reported[1],
            total,
        },
    })
}

/// One student iteration: [`student_graph`] followed by an Adam update of
/// every student parameter including the gate logits.
#[allow(clippy::too_many_arguments)]
pub fn train_student_step<R: Rng + ?Sized>(
    student: &mut ModelBundle,
    st: &ModelBundle,
    tt: &ModelBundle,
    src_ep: &Episode,
    tgt_ep: &Episode,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let g = student_graph(&mut tape, student, st, tt, src_ep, tgt_ep, cfg, rng)?;
    if !g.losses.total.is_finite() {
        return Err(Error::Numeric(format!("student loss is {}", g.losses.total)));
    }
    tape.backward(g.loss)?;
    student.apply_gradients(&tape, &g.vars, &cfg.adam())?;
    Ok(g.losses)
}

/// Loops [`train_student_step`] over `cfg.student_epochs` epochs of
/// `cfg.episodes_per_epoch` iterations.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    student: &mut ModelBundle,
    st: &ModelBundle,
    tt: &ModelBundle,
    source: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_split(source, cfg)?;
    check_split(target, cfg)?;
    let src_policy = QueryPolicy::auto(source, cfg.k_shot, cfg.m_query);
    let tgt_policy = QueryPolicy::auto(target, cfg.k_shot, cfg.m_query);
    let mut rng: ChaCha8Rng = cfg.stream(Stage::Student);
    let mut curve = Vec::with_capacity(cfg.student_epochs);
    for epoch in 0..cfg.student_epochs {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..cfg.episodes_per_epoch {
            let s = sample_episode_with(source, cfg.n_way, cfg.k_shot, cfg.m_query, src_policy, &mut rng)?;
            let t = sample_episode_with(target, cfg.n_way, cfg.k_shot, cfg.m_query, tgt_policy, &mut rng)?;
            let losses = train_student_step(student, st, tt, &s, &t, cfg, &mut rng)?;
            for (k, v) in losses.metrics() {
                acc.entry(k).or_default().push(v);
            }
        }
        let mut metrics: BTreeMap<String, f64> = acc.into_iter().map(|(k, v)| (k, mean_of(&v))).collect();
        if let Some(g) = &student.gates {
            let p = g.source_probabilities();
            metrics.insert("gate_source_prob".into(), mean_of(&p));
        }
        let rec = EpochRecord {
            stage: "student".into(),
            epoch,
            metrics,
        };
        hook(&rec, student)?;
        curve.push(rec);
    }
    Ok(curve)
}
