//! The end-to-end trend experiment, shared by the acceptance suite and the
//! `trend_oracle` example that froze its thresholds.

use std::collections::BTreeMap;
use std::path::Path;

use funmatch::augment::{AugmentConfig, ConsistencyMode};
use funmatch::data::{parse_split_spec, SyntheticParams};
use funmatch::harness::{DataConfig, DataSource, RunConfig, SplitTag, TeacherConfig};
use funmatch::losses::DistillLossConfig;
use funmatch::models::ModelConfig;
use funmatch::optim::{OptimConfig, OptimizerKind};

pub const RESOLUTION: usize = 28;
pub const CLASSES: usize = 3;
pub const SEEDS: [u64; 3] = [0, 1, 2];
/// The long-schedule budget; the patience check compares it with 1/100 of it.
pub const LONG_EPOCHS: usize = 300;
pub const SHORT_EPOCHS: usize = 3;

pub fn data() -> DataConfig {
    DataConfig {
        source: DataSource::Synthetic(SyntheticParams {
            seed: 11,
            classes: CLASSES,
            resolution: RESOLUTION,
            splits: BTreeMap::from([
                ("train".into(), 600),
                ("val".into(), 300),
                ("test".into(), 300),
            ]),
        }),
        train: parse_split_spec("train").unwrap(),
        minival: None,
        val: Some(parse_split_spec("val").unwrap()),
        test: Some(parse_split_spec("test").unwrap()),
    }
}

/// 4-conv reference teacher trained from labels on all 600 train images.
pub fn teacher_config() -> RunConfig {
    let mut augment = AugmentConfig::new(RESOLUTION, RESOLUTION);
    augment.area_range = (0.5, 1.0);
    RunConfig {
        run_id: "teacher".into(),
        data: data(),
        teacher: None,
        student: ModelConfig::reference_teacher(RESOLUTION, 1, CLASSES),
        init_from: None,
        mode: ConsistencyMode::Independent,
        augment,
        loss: DistillLossConfig::default(),
        optim: OptimConfig::new(OptimizerKind::Adam, 0.003),
        epochs: 30,
        batch_size: 32,
        seed: 0,
        eval_interval: 0,
        checkpoint_interval: 0,
        label_mixup: false,
        eval_crop_area: 0.875,
        selection_split: SplitTag::Val,
        record_wall_time: false,
        max_wall_seconds: None,
        resume: false,
    }
}

/// 2-conv reference student distilled on the first 100 train images.
pub fn distill_config(
    teacher: &Path,
    mode: ConsistencyMode,
    seed: u64,
    epochs: usize,
) -> RunConfig {
    let mut cfg = teacher_config();
    cfg.run_id = format!("{}-s{seed}-e{epochs}", mode.as_str());
    cfg.data.train = parse_split_spec("train[:17%]").unwrap();
    cfg.teacher = Some(TeacherConfig::single(teacher, RESOLUTION));
    cfg.student = ModelConfig::reference_student(RESOLUTION, 1, CLASSES);
    cfg.mode = mode;
    cfg.augment = AugmentConfig::new(RESOLUTION, RESOLUTION);
    cfg.loss.temperature = 5.0;
    cfg.optim = OptimConfig::new(OptimizerKind::Sgd, 0.1);
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
