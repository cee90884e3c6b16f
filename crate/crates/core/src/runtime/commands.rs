//! The pipeline commands. Each is a function of the configuration and the
//! files already present in the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{activation_maps, gate_stats_doc, gate_stats_table, read_ppm, to_csv, to_pgm, to_ppm, validate_gate_stats, GateStatsDoc};
use super::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RngState};
use super::config::RunConfig;
use super::metrics::MetricsLog;
use crate::autodiff::Tensor;
use crate::data::{export_benchmark, generate_benchmark, import_benchmark, Benchmark, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_many, EvalReport, Strategy};
use crate::gate::Domain;
use crate::trainer::{
    pretrain, train_mbase, train_student, train_teacher, EpochRecord, ModelBundle, Role, Stage,
};

pub const RESULTS_FILE: &str = "results.json";
pub const GATE_STATS_FILE: &str = "gate_stats.json";
pub const GATE_TABLE_FILE: &str = "gate_stats.tsv";
pub const ACTIVATION_DIR: &str = "activations";
pub const DATA_DIR: &str = "data";

pub fn checkpoint_path(out: &Path, role: Role) -> PathBuf {
    out.join(format!("{}.ckpt", role.name()))
}

fn stage_hint(role: Role) -> &'static str {
    match role {
        Role::Pretrained => "med2n pretrain",
        Role::StTeacher => "med2n train-teacher --domain source",
        Role::TtTeacher => "med2n train-teacher --domain target",
        Role::Student => "med2n train-student",
        Role::MBase => "med2n train-mbase",
    }
}

fn require(out: &Path, role: Role, what: &str) -> Result<Checkpoint> {
    let path = checkpoint_path(out, role);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "{what} checkpoint required: {} not found (run `{}` first)",
            path.display(),
            stage_hint(role)
        )));
    }
    let ck = load_checkpoint(&path)?;
    if ck.bundle.role != role {
        return Err(Error::Checkpoint {
            path,
            reason: format!("holds a {} model, expected {role}", ck.bundle.role),
        });
    }
    Ok(ck)
}

/// The configured benchmark: imported when `paths.data_dir` is set,
/// generated otherwise.
pub fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    match &cfg.paths.data_dir {
        Some(dir) => {
            let b = import_benchmark(dir)?;
            if b.spec != cfg.data {
                return Err(Error::config(format!(
                    "benchmark in {} was generated from a different [data] section",
                    dir.display()
                )));
            }
            Ok(b)
        }
        None => generate_benchmark(&cfg.data),
    }
}

/// Runs a training stage with metrics logging and periodic checkpoints,
/// then writes the final checkpoint.
fn run_stage(
    cfg: &RunConfig,
    bundle: &mut ModelBundle,
    rng_state: Option<RngState>,
    train: impl FnOnce(&mut ModelBundle, &mut dyn FnMut(&EpochRecord, &ModelBundle) -> Result<()>) -> Result<Vec<EpochRecord>>,
) -> Result<PathBuf> {
    let out = &cfg.paths.out_dir;
    let fingerprint = cfg.fingerprint();
    let mut log = MetricsLog::open(out)?;
    let every = cfg.paths.checkpoint_every;
    let partial = out.join(format!("{}.partial.ckpt", bundle.role.name()));
    let mut hook = |rec: &EpochRecord, b: &ModelBundle| -> Result<()> {
        if rec.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} epoch {} produced a non-finite metric", rec.stage, rec.epoch)));
        }
        log.record(rec)?;
        if every > 0 && (rec.epoch + 1) % every == 0 {
            save_checkpoint(&partial, b, &fingerprint, None)?;
        }
        Ok(())
    };
    train(bundle, &mut hook)?;
    log.flush()?;
    let path = checkpoint_path(out, bundle.role);
    save_checkpoint(&path, bundle, &fingerprint, rng_state)?;
    if partial.exists() {
        std::fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    Ok(path)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let bench = load_benchmark(cfg)?;
    let mut rng = cfg.train.stream(Stage::Init);
    let mut bundle = ModelBundle::new_pretrained(&cfg.train, &bench.source_train.class_ids, &mut rng)?;
    let state = RngState::capture(&rng);
    run_stage(cfg, &mut bundle, Some(state), |b, hook| {
        pretrain(b, &bench.source_train, &cfg.train, hook)
    })
}

pub fn cmd_train_teacher(cfg: &RunConfig, domain: Domain) -> Result<PathBuf> {
    let pre = require(&cfg.paths.out_dir, Role::Pretrained, "pretrained")?;
    let bench = load_benchmark(cfg)?;
    let (role, split) = match domain {
        Domain::Source => (Role::StTeacher, &bench.source_train),
        Domain::Target => (Role::TtTeacher, &bench.target_aux),
    };
    let mut bundle = ModelBundle::from_pretrained(&pre.bundle, role)?;
    run_stage(cfg, &mut bundle, None, |b, hook| train_teacher(b, split, &cfg.train, hook))
}

pub fn cmd_train_mbase(cfg: &RunConfig) -> Result<PathBuf> {
    let pre = require(&cfg.paths.out_dir, Role::Pretrained, "pretrained")?;
    let bench = load_benchmark(cfg)?;
    let mut bundle = ModelBundle::from_pretrained(&pre.bundle, Role::MBase)?;
    run_stage(cfg, &mut bundle, None, |b, hook| {
        train_mbase(b, &bench.source_train, &bench.target_aux, &cfg.train, hook)
    })
}

pub fn cmd_train_student(cfg: &RunConfig) -> Result<PathBuf> {
    let out = &cfg.paths.out_dir;
    let st = require(out, Role::StTeacher, "teacher")?;
    let tt = require(out, Role::TtTeacher, "teacher")?;
    let pre = require(out, Role::Pretrained, "pretrained")?;
    let bench = load_benchmark(cfg)?;
    let mut rng = cfg.train.stream(Stage::StudentInit);
    let mut bundle = ModelBundle::new_student(
        &pre.bundle,
        &cfg.train,
        &bench.source_train.class_ids,
        &bench.target_aux.class_ids,
        &mut rng,
    )?;
    let state = RngState::capture(&rng);
    run_stage(cfg, &mut bundle, Some(state), |b, hook| {
        train_student(b, &st.bundle, &tt.bundle, &bench.source_train, &bench.target_aux, &cfg.train, hook)
    })
}

/// Which strategies `eval` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSelection {
    One(Strategy),
    All,
}

impl std::str::FromStr for EvalSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(EvalSelection::All)
        } else {
            Ok(EvalSelection::One(s.parse()?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub fingerprint: String,
    pub checkpoint: String,
    pub role: Role,
    pub reports: Vec<EvalReport>,
}

/// Evaluates the student (or the checkpoint at `checkpoint`) on the novel
/// target classes and the held-out source classes. `All` yields the three
/// target strategies plus the combined strategy on the source split.
pub fn cmd_eval(cfg: &RunConfig, selection: EvalSelection, checkpoint: Option<&Path>) -> Result<ResultsDoc> {
    let out = &cfg.paths.out_dir;
    let ck = match checkpoint {
        Some(p) if !p.exists() => {
            return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", p.display())))
        }
        Some(p) => load_checkpoint(p)?,
        None => require(out, Role::Student, "student")?,
    };
    let bench = load_benchmark(cfg)?;
    let (target, source): (Vec<Strategy>, Vec<Strategy>) = match selection {
        EvalSelection::All => (Strategy::ALL.to_vec(), vec![Strategy::Both]),
        EvalSelection::One(s) => (vec![s], vec![s]),
    };
    let mut reports = evaluate_many(&ck.bundle, &bench.target_test, &target, &cfg.eval)?;
    reports.extend(evaluate_many(&ck.bundle, &bench.source_test, &source, &cfg.eval)?);
    let doc = ResultsDoc {
        fingerprint: cfg.fingerprint(),
        checkpoint: ck.fingerprint.clone(),
        role: ck.bundle.role,
        reports,
    };
    let text = serde_json::to_string_pretty(&doc)?;
    write_atomic(&out.join(RESULTS_FILE), text.as_bytes())?;
    Ok(doc)
}

pub fn cmd_gate_stats(cfg: &RunConfig) -> Result<GateStatsDoc> {
    let out = &cfg.paths.out_dir;
    let ck = require(out, Role::Student, "student")?;
    let doc = gate_stats_doc(&ck.bundle, &ck.fingerprint)?;
    let value = serde_json::to_value(&doc)?;
    validate_gate_stats(&value)?;
    write_atomic(&out.join(GATE_STATS_FILE), serde_json::to_string_pretty(&value)?.as_bytes())?;
    write_atomic(&out.join(GATE_TABLE_FILE), gate_stats_table(&doc).as_bytes())?;
    Ok(doc)
}

/// Input image for an activation dump.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationInput {
    Synthetic { split: String, index: usize },
    Image(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub domain: Domain,
    pub block: usize,
    pub filter: usize,
    pub mean_activation: f64,
    pub height: usize,
    pub width: usize,
    pub pgm: String,
    pub csv: String,
}

fn split_by_name<'a>(bench: &'a Benchmark, name: &str) -> Result<&'a DatasetSplit> {
    bench
        .splits()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::config(format!("unknown split '{name}'")))
}

/// Exports, for one input image, the map of the strongest filter assigned
/// to each requested domain in the last gated block.
pub fn cmd_activation_dump(cfg: &RunConfig, input: &ActivationInput, domains: &[Domain]) -> Result<Vec<ActivationRecord>> {
    let out = &cfg.paths.out_dir;
    let ck = require(out, Role::Student, "student")?;
    let [c, h, w] = ck.bundle.net.input_shape;
    let (image, tag) = match input {
        ActivationInput::Synthetic { split, index } => {
            let bench = load_benchmark(cfg)?;
            let s = split_by_name(&bench, split)?;
            if *index >= s.len() {
                return Err(Error::config(format!("{split} has {} images, index {index} is out of range", s.len())));
            }
            (s.image(*index).to_vec(), format!("{split}_{index}"))
        }
        ActivationInput::Image(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let (img, ih, iw) = read_ppm(&bytes)?;
            if (3, ih, iw) != (c, h, w) {
                return Err(Error::config(format!("image is {iw}x{ih}, the network expects {w}x{h}")));
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            (img, stem)
        }
    };
    let maps = activation_maps(&ck.bundle, &Tensor::new([c, h, w], image.clone())?, domains)?;
    let dir = out.join(ACTIVATION_DIR);
    write_atomic(&dir.join(format!("{tag}_input.ppm")), &to_ppm(&image, h, w))?;
    let mut records = Vec::new();
    for m in maps {
        let base = format!("{tag}_{}_block{}_filter{}", m.domain.name(), m.block, m.filter);
        let pgm = format!("{base}.pgm");
        let csv = format!("{base}.csv");
        write_atomic(&dir.join(&pgm), &to_pgm(&m.values, m.height, m.width, 8))?;
        write_atomic(&dir.join(&csv), to_csv(&m.values, m.width).as_bytes())?;
        records.push(ActivationRecord {
            domain: m.domain,
            block: m.block,
            filter: m.filter,
            mean_activation: m.mean_activation,
            height: m.height,
            width: m.width,
            pgm,
            csv,
        });
    }
    write_atomic(
        &dir.join(format!("{tag}_summary.json")),
        serde_json::to_string_pretty(&records)?.as_bytes(),
    )?;
    Ok(records)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let bench = generate_benchmark(&cfg.data)?;
    let dir = cfg.paths.out_dir.join(DATA_DIR);
    export_benchmark(&bench, &dir)?;
    Ok(dir)
}
