//! Training from labels, distillation and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use crate::augment::{self, ConsistencyMode, ViewPair};
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, kl_distill_value, label_targets, DistillLossConfig};
use crate::models::{Checkpoint, Model, Parameters};
use crate::optim::Optimizer;
use crate::rng::{self, domain};
use crate::tensor::{Tape, Tensor};

use super::config::{RunConfig, SplitTag, TeacherConfig};
use super::metrics::{read_metrics, MetricsRow, MetricsWriter};

/// Batches prepared ahead of the training thread.
const PREFETCH_DEPTH: usize = 2;

/// Frozen teacher models, each with the resolution it is run at.
#[derive(Debug, Clone)]
pub struct Teacher {
    members: Vec<(Model<f32>, usize)>,
}

impl Teacher {
    pub fn new(members: Vec<(Model<f32>, usize)>) -> Result<Self> {
        let Some((first, _)) = members.first() else {
            return Err(Error::Config("teacher ensemble is empty".into()));
        };
        let classes = first.config.num_classes;
        for (m, res) in &members {
            if m.config.num_classes != classes {
                return Err(Error::ModelConfig(format!(
                    "ensemble members disagree on class count: {} vs {classes}",
                    m.config.num_classes
                )));
            }
            m.config
                .param_shapes_at(*res)
                .map_err(|e| Error::ModelConfig(format!("teacher cannot run at {res}px: {e}")))?;
        }
        Ok(Teacher { members })
    }

    pub fn load(cfg: &TeacherConfig) -> Result<Self> {
        let (members, _) = cfg.members()?;
        let models = members
            .iter()
            .map(|m| {
                let ckpt = Checkpoint::load(&m.checkpoint)?;
                Ok((
                    Model::from_parts(ckpt.config.clone(), ckpt.params)?,
                    m.resolution,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(models)
    }

    pub fn classes(&self) -> usize {
        self.members[0].0.config.num_classes
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[(Model<f32>, usize)] {
        &self.members
    }

    /// Combined log-space outputs for a teacher view; each member sees the
    /// view resized to its own resolution.
    pub fn logits(&self, view: &Tensor<f32>) -> Result<Tensor<f32>> {
        let res = view.shape().get(1).copied().unwrap_or(0);
        let outs = self
            .members
            .iter()
            .map(|(m, r)| {
                if *r == res {
                    m.predict(view)
                } else {
                    m.predict(&augment::resize_batch(view, *r)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        losses::ensemble_logits(&outs)
    }
}

/// FNV-1a over the bit patterns of every parameter, in name order.
pub fn params_checksum(params: &Parameters<f32>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for (name, t) in params.iter() {
        for b in name
            .bytes()
            .chain(t.data().iter().flat_map(|x| x.to_bits().to_le_bytes()))
        {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Fraction of rows whose argmax agrees (ties resolve to the lowest index).
pub fn agreement(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("agreement", a.shape(), b.shape()));
    }
    let (x, y) = (a.argmax_rows(), b.argmax_rows());
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().zip(&y).filter(|(p, q)| p == q).count() as f64 / x.len() as f64)
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub student_resolution: usize,
    pub teacher_resolution: usize,
    pub crop_area: f64,
    pub batch_size: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// KL to the teacher when one is given, else cross-entropy.
    pub loss: f64,
    pub top1: f64,
    pub agreement: Option<f64>,
    pub examples: usize,
}

/// Central-crop evaluation of `model` on all of `ds`, in dataset order.
pub fn evaluate(
    model: &Model<f32>,
    ds: &Dataset,
    teacher: Option<&Teacher>,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let n = ds.len();
    let (mut loss, mut hits, mut agree) = (0.0f64, 0usize, 0usize);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + opts.batch_size).min(n)).collect();
        start += idx.len();
        let images = ds.images_f32(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let s = model.predict(&augment::central_view(
            &images,
            opts.crop_area,
            opts.student_resolution,
        )?)?;
        hits += correct(&s, &labels);
        let b = idx.len() as f64;
        match teacher {
            Some(t) => {
                let tl = t.logits(&augment::central_view(
                    &images,
                    opts.crop_area,
                    opts.teacher_resolution,
                )?)?;
                agree += (agreement(&s, &tl)? * b).round() as usize;
                loss += kl_distill_value(&s, &tl, opts.temperature)? as f64 * b;
            }
            None => {
                let mut tape = Tape::new();
                let v = tape.constant(s);
                let l = losses::xent(&mut tape, v, &labels)?;
                loss += tape.value(l).item()? as f64 * b;
            }
        }
    }
    let denom = n.max(1) as f64;
    Ok(EvalResult {
        loss: if n == 0 { 0.0 } else { loss / denom },
        top1: hits as f64 / denom,
        agreement: teacher.map(|_| agree as f64 / denom),
        examples: n,
    })
}

/// What happened in one invocation of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub checkpoint: Checkpoint,
    /// Every row of the metrics file after the run.
    pub rows: Vec<MetricsRow>,
    pub steps: u64,
    pub steps_per_epoch: usize,
    /// Teacher model evaluations spent on training batches (not evaluation).
    pub teacher_forward_passes: usize,
    pub stopped_early: bool,
}

impl RunOutcome {
    pub fn final_row(&self, split: SplitTag) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

pub fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join(run_id)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.fmck")
}

/// Newest `ckpt_<step>.fmck` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("ckpt_")?
                .strip_suffix(".fmck")?
                .parse::<u64>()
                .ok()
        });
        if let Some(s) = step {
            if best.as_ref().map_or(true, |(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

/// Train `cfg.student` from labels (cross-entropy, optional label mixup).
pub fn train_teacher(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    if cfg.teacher.is_some() {
        return Err(Error::Config(
            "training from labels takes no `teacher`".into(),
        ));
    }
    Runner::new(cfg, out, None)?.run()
}

/// Distill the configured teacher(s) into `cfg.student`.
pub fn distill(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let tcfg = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("distillation needs a `teacher`".into()))?;
    cfg.validate()?;
    let teacher = Teacher::load(tcfg)?;
    distill_with(cfg, out, teacher)
}

/// [`distill`] with teacher models already in memory.
pub fn distill_with(cfg: &RunConfig, out: &Path, teacher: Teacher) -> Result<RunOutcome> {
    if teacher.classes() != cfg.student.num_classes {
        return Err(Error::ModelConfig(format!(
            "teacher predicts {} classes but the student has {}",
            teacher.classes(),
            cfg.student.num_classes
        )));
    }
    Runner::new(cfg, out, Some(teacher))?.run()
}

/// Inputs for one optimizer step, prepared off the training thread.
struct StepInput {
    batch: Batch,
    student: Tensor<f32>,
    teacher: Option<Tensor<f32>>,
    lambda: Vec<f64>,
    partner: Vec<usize>,
}

fn prepare(
    cfg: &RunConfig,
    distilling: bool,
    batch: Batch,
    epoch: usize,
    index: usize,
) -> Result<StepInput> {
    let mut r = rng::stream(cfg.seed, domain::AUGMENT, epoch as u64, index as u64);
    if distilling {
        let ViewPair {
            teacher,
            student,
            lambda,
            partner,
            ..
        } = augment::make_views(&batch.images, cfg.mode, &cfg.augment, &mut r)?;
        return Ok(StepInput {
            batch,
            student,
            teacher: Some(teacher),
            lambda,
            partner,
        });
    }
    let [_, h, w, _] = *batch.images.shape() else {
        return Err(Error::InvalidArgument("image batch must be rank 4".into()));
    };
    let crops: Vec<_> = (0..batch.labels.len())
        .map(|_| augment::sample_crop(h, w, &cfg.augment, &mut r))
        .collect();
    let mut student = augment::render_crops(&batch.images, &crops, cfg.augment.student_resolution)?;
    let b = batch.labels.len();
    let (mut lambda, mut partner) = (vec![1.0; b], (0..b).collect());
    if cfg.label_mixup {
        (lambda, partner) = augment::sample_mixup(b, cfg.augment.mixup_alpha, &mut r)?;
        student = augment::apply_mixup(&student, &lambda, &partner)?;
    }
    Ok(StepInput {
        batch,
        student,
        teacher: None,
        lambda,
        partner,
    })
}

#[derive(Default)]
struct Running {
    loss: f64,
    hits: usize,
    agree: usize,
    n: usize,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    data: BTreeMap<SplitTag, Dataset>,
    teacher: Option<Teacher>,
    model: Model<f32>,
    opt: Optimizer,
    writer: MetricsWriter,
    step: u64,
    steps_per_epoch: usize,
    total: u64,
    last_lr: f64,
    last_eval: Option<u64>,
    running: Running,
    teacher_passes: usize,
    fixed_cache: Vec<Option<Vec<f32>>>,
    started: Instant,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, out: &Path, teacher: Option<Teacher>) -> Result<Self> {
        cfg.validate()?;
        cfg.student
            .param_shapes_at(cfg.augment.student_resolution)
            .map_err(|e| {
                Error::ModelConfig(format!(
                    "student cannot run at {}px: {e}",
                    cfg.augment.student_resolution
                ))
            })?;
        let data = cfg.data.load()?;
        let train = &data[&SplitTag::Train];
        for ds in data.values() {
            if ds.classes() != cfg.student.num_classes {
                return Err(Error::ModelConfig(format!(
                    "dataset `{}` has {} classes but the model predicts {}",
                    ds.name(),
                    ds.classes(),
                    cfg.student.num_classes
                )));
            }
        }
        if train.image_shape().2 != cfg.student.input_channels {
            return Err(Error::ModelConfig(format!(
                "images have {} channels, model expects {}",
                train.image_shape().2,
                cfg.student.input_channels
            )));
        }
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        let total = (cfg.epochs * steps_per_epoch) as u64;

        let dir = run_dir(out, &cfg.run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;

        let params = match &cfg.init_from {
            Some(p) => Checkpoint::load(p)?.params_for(&cfg.student)?,
            None => crate::models::build(&cfg.student, cfg.seed)?,
        };
        let mut model = Model::from_parts(cfg.student.clone(), params)?;
        let mut opt = Optimizer::new(cfg.optim.clone(), total as usize, &model.params)?;

        let metrics_path = dir.join("metrics.csv");
        let mut step = 0;
        let mut last_eval = None;
        let writer = match latest_checkpoint(&dir)?.filter(|_| cfg.resume && metrics_path.exists())
        {
            Some((s, path)) => {
                let ckpt = Checkpoint::load(&path)?;
                model.params = ckpt.params_for(&cfg.student)?;
                opt.import_state(&ckpt.extra)?;
                step = s;
                let w = MetricsWriter::resume(&metrics_path, s)?;
                last_eval = read_metrics(&metrics_path)?.last().map(|r| r.step);
                log::info!("resuming {} from step {s}", cfg.run_id);
                w
            }
            None => MetricsWriter::create(&metrics_path)?,
        };
        let n_train = train.len();
        Ok(Runner {
            cfg,
            dir,
            data,
            teacher,
            model,
            opt,
            writer,
            step,
            steps_per_epoch,
            total,
            last_lr: 0.0,
            last_eval,
            running: Running::default(),
            teacher_passes: 0,
            fixed_cache: vec![None; n_train],
            started: Instant::now(),
        })
    }

    fn wall(&self) -> f64 {
        if self.cfg.record_wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn epoch_frac(&self) -> f64 {
        if self.steps_per_epoch == 0 {
            0.0
        } else {
            self.step as f64 / self.steps_per_epoch as f64
        }
    }

    fn row(&self, split: SplitTag, loss: f64, top1: f64, agreement: Option<f64>) -> MetricsRow {
        MetricsRow {
            step: self.step,
            epoch: self.epoch_frac(),
            split,
            loss,
            top1,
            agreement,
            lr: self.last_lr,
            wall_s: self.wall(),
        }
    }

    fn train_row(&self) -> Option<MetricsRow> {
        let r = &self.running;
        (r.n > 0).then(|| {
            let n = r.n as f64;
            self.row(
                SplitTag::Train,
                r.loss / n,
                r.hits as f64 / n,
                self.teacher.as_ref().map(|_| r.agree as f64 / n),
            )
        })
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            student_resolution: self.cfg.augment.student_resolution,
            teacher_resolution: self.cfg.augment.teacher_resolution,
            crop_area: self.cfg.eval_crop_area,
            batch_size: self.cfg.batch_size,
            temperature: self.cfg.loss.temperature,
        }
    }

    fn evaluate_all(&mut self) -> Result<()> {
        if let Some(row) = self.train_row() {
            self.writer.append(&row)?;
        }
        self.running = Running::default();
        let opts = self.eval_options();
        for tag in [SplitTag::Minival, SplitTag::Val, SplitTag::Test] {
            if let Some(ds) = self.data.get(&tag) {
                let r = evaluate(&self.model, ds, self.teacher.as_ref(), &opts)?;
                let row = self.row(tag, r.loss, r.top1, r.agreement);
                self.writer.append(&row)?;
            }
        }
        self.writer.flush()?;
        self.last_eval = Some(self.step);
        Ok(())
    }

    fn save_checkpoint(&self) -> Result<PathBuf> {
        let mut ckpt = Checkpoint::new(
            self.cfg.student.clone(),
            self.model.params.clone(),
            self.step,
            self.cfg.seed,
        );
        ckpt.extra = self.opt.export_state();
        let path = self.dir.join(checkpoint_name(self.step));
        ckpt.save(&path)?;
        Ok(path)
    }

    fn teacher_targets(&mut self, input: &StepInput) -> Result<Option<Tensor<f32>>> {
        let (Some(teacher), Some(view)) = (&self.teacher, &input.teacher) else {
            return Ok(None);
        };
        if self.cfg.mode != ConsistencyMode::FixedTeacher {
            self.teacher_passes += teacher.len();
            return teacher.logits(view).map(Some);
        }
        let idx = &input.batch.indices;
        if idx.iter().any(|&i| self.fixed_cache[i].is_none()) {
            let out = teacher.logits(view)?;
            self.teacher_passes += teacher.len();
            for (r, &i) in idx.iter().enumerate() {
                self.fixed_cache[i] = Some(out.row(r).to_vec());
            }
        }
        let k = teacher.classes();
        let mut rows = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            rows.extend_from_slice(self.fixed_cache[i].as_deref().expect("filled above"));
        }
        Tensor::new(vec![idx.len(), k], rows).map(Some)
    }

    fn train_step(&mut self, input: StepInput) -> Result<()> {
        let targets_t = self.teacher_targets(&input)?;
        let classes = self.cfg.student.num_classes;
        let labels = &input.batch.labels;
        let mix = (input.lambda.iter().any(|&l| l != 1.0))
            .then_some((&input.lambda[..], &input.partner[..]));

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let x = tape.constant(input.student);
        let s = self.model.forward(&mut tape, &bound, x)?;
        let loss = match &targets_t {
            Some(t) => {
                let tv = tape.constant(t.clone());
                let cfg: &DistillLossConfig = &self.cfg.loss;
                let targets = if cfg.label_weight > 0.0 {
                    label_targets(labels, classes, mix)?
                } else {
                    Tensor::zeros(&[labels.len(), classes])
                };
                losses::combined(&mut tape, s, tv, &targets, cfg)?
            }
            None => losses::soft_xent(&mut tape, s, &label_targets(labels, classes, mix)?)?,
        };
        let value = tape.value(loss).item()? as f64;
        let slog = tape.value(s).clone();
        let b = labels.len();
        self.running.loss += value * b as f64;
        self.running.hits += correct(&slog, labels);
        if let Some(t) = &targets_t {
            self.running.agree += (agreement(&slog, t)? * b as f64).round() as usize;
        }
        self.running.n += b;
        if !value.is_finite() {
            return self.diverged(value);
        }

        let g = match tape.backward(loss) {
            Err(Error::NonFinite(op)) => {
                log::warn!("{}: non-finite output from {op}", self.cfg.run_id);
                return self.diverged(f64::NAN);
            }
            other => other?,
        };
        let mut grads = Parameters::new();
        for (name, v) in &bound {
            grads.insert(name.clone(), g.wrt(*v));
        }
        self.last_lr = self.opt.step(&mut self.model.params, &mut grads)?;
        self.step += 1;
        if self.model.params.iter().any(|(_, t)| !t.all_finite()) {
            return self.diverged(f64::NAN);
        }
        Ok(())
    }

    fn diverged(&mut self, loss: f64) -> Result<()> {
        let mut row = self.row(SplitTag::Train, loss, 0.0, None);
        if let Some(r) = self.train_row() {
            row.top1 = r.top1;
            row.agreement = r.agreement;
        }
        row.loss = loss;
        self.writer.append(&row)?;
        self.writer.flush()?;
        Err(Error::Divergence {
            step: self.step as usize,
            loss,
        })
    }

    fn run(mut self) -> Result<RunOutcome> {
        let spe = self.steps_per_epoch.max(1);
        let start_epoch = self.step as usize / spe;
        let mut stopped_early = false;
        let distilling = self.teacher.is_some();
        let cfg = self.cfg;
        let train = self.data[&SplitTag::Train].clone();

        'epochs: for epoch in start_epoch..cfg.epochs {
            let skip = self.step as usize - epoch * spe;
            let result: Result<bool> = std::thread::scope(|scope| {
                let (tx, rx) = mpsc::sync_channel::<Result<StepInput>>(PREFETCH_DEPTH);
                let train = &train;
                scope.spawn(move || {
                    let Ok(it) = batches(train, cfg.batch_size, cfg.seed, epoch as u64) else {
                        return;
                    };
                    for (i, batch) in it.enumerate().skip(skip) {
                        if tx.send(prepare(cfg, distilling, batch, epoch, i)).is_err() {
                            return;
                        }
                    }
                });
                for input in rx {
                    self.train_step(input?)?;
                    if cfg.eval_interval > 0 && self.step % cfg.eval_interval as u64 == 0 {
                        self.evaluate_all()?;
                    }
                    if cfg.checkpoint_interval > 0
                        && self.step % cfg.checkpoint_interval as u64 == 0
                        && self.step < self.total
                    {
                        self.save_checkpoint()?;
                    }
                    if let Some(cap) = cfg.max_wall_seconds {
                        if self.started.elapsed().as_secs_f64() >= cap {
                            return Ok(true);
                        }
                    }
                }
                Ok(false)
            });
            if result? {
                log::warn!(
                    "{}: wall-time cap reached at step {}",
                    cfg.run_id,
                    self.step
                );
                stopped_early = true;
                break 'epochs;
            }
        }

        if self.last_eval != Some(self.step) {
            self.evaluate_all()?;
        }
        let checkpoint_path = self.save_checkpoint()?;
        let mut checkpoint = Checkpoint::load(&checkpoint_path)?;
        checkpoint.extra.clear();
        Ok(RunOutcome {
            rows: read_metrics(self.writer.path())?,
            run_dir: self.dir,
            checkpoint_path,
            checkpoint,
            steps: self.step,
            steps_per_epoch: self.steps_per_epoch,
            teacher_forward_passes: self.teacher_passes,
            stopped_early,
        })
    }
}

/// Evaluate a checkpoint on every configured split other than train.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = Model::from_parts(ckpt.config.clone(), ckpt.params)?;
    let teacher = cfg.teacher.as_ref().map(Teacher::load).transpose()?;
    let data = cfg.data.load()?;
    let opts = EvalOptions {
        student_resolution: cfg.augment.student_resolution,
        teacher_resolution: cfg.augment.teacher_resolution,
        crop_area: cfg.eval_crop_area,
        batch_size: cfg.batch_size,
        temperature: cfg.loss.temperature,
    };
    let mut rows = Vec::new();
    for (tag, ds) in &data {
        if *tag == SplitTag::Train {
            continue;
        }
        let r = evaluate(&model, ds, teacher.as_ref(), &opts)?;
        rows.push(MetricsRow {
            step: ckpt.step,
            epoch: 0.0,
            split: *tag,
            loss: r.loss,
            top1: r.top1,
            agreement: r.agreement,
            lr: 0.0,
            wall_s: 0.0,
        });
    }
    Ok(rows)
}
