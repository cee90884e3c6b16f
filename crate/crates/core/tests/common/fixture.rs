use med2n::data::{generate_benchmark, Benchmark, SyntheticSpec};
use med2n::trainer::{pretrain, train_teacher, EpochRecord, ModelBundle, Role, Stage, TrainConfig};
use med2n::Result;

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        source_train_classes: 6,
        target_aux_classes: 5,
        target_test_classes: 5,
        source_test_classes: 5,
        source_train_per_class: 20,
        target_aux_per_class: 5,
        target_test_per_class: 8,
        source_test_per_class: 8,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_benchmark() -> Benchmark {
    generate_benchmark(&tiny_spec()).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_way: 3,
        k_shot: 2,
        m_query: 2,
        pretrain_epochs: 1,
        pretrain_batch: 30,
        teacher_epochs: 1,
        student_epochs: 1,
        mbase_epochs: 1,
        episodes_per_epoch: 3,
        channels: [4, 4, 8, 8],
        ..TrainConfig::default()
    }
}

pub fn ignore(_: &EpochRecord, _: &ModelBundle) -> Result<()> {
    Ok(())
}

pub struct Trained {
    pub pre: ModelBundle,
    pub st: ModelBundle,
    pub tt: ModelBundle,
}

pub fn pretrained(b: &Benchmark, cfg: &TrainConfig) -> ModelBundle {
    let mut rng = cfg.stream(Stage::Init);
    let mut pre = ModelBundle::new_pretrained(cfg, &b.source_train.class_ids, &mut rng).unwrap();
    pretrain(&mut pre, &b.source_train, cfg, &mut ignore).unwrap();
    pre
}

pub fn teachers(b: &Benchmark, cfg: &TrainConfig) -> Trained {
    let pre = pretrained(b, cfg);
    let mut st = ModelBundle::from_pretrained(&pre, Role::StTeacher).unwrap();
    train_teacher(&mut st, &b.source_train, cfg, &mut ignore).unwrap();
    let mut tt = ModelBundle::from_pretrained(&pre, Role::TtTeacher).unwrap();
    train_teacher(&mut tt, &b.target_aux, cfg, &mut ignore).unwrap();
    Trained { pre, st, tt }
}

pub fn student(t: &Trained, b: &Benchmark, cfg: &TrainConfig) -> ModelBundle {
    let mut rng = cfg.stream(Stage::StudentInit);
    ModelBundle::new_student(&t.pre, cfg, &b.source_train.class_ids, &b.target_aux.class_ids, &mut rng).unwrap()
}
