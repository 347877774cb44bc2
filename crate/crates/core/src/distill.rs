//! Knowledge-distillation training of students, accuracy evaluation and
//! latency measurement.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_parameters, ArchError, ArchitectureSpec};
use crate::data::{select_columns, DataError, Dataset};
use crate::nn::{Model, ModelError, Predict, Sgd};
use crate::reinforce::{StudentEvaluator, StudentJob, StudentOutcome};
use crate::reward::TeacherReference;

/// Samples per gradient chunk; chunk sums are reduced in index order.
const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {width} logits")]
    Label { label: usize, width: usize },
    #[error("student has {student} logits, teacher {teacher}")]
    Shape { student: usize, teacher: usize },
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    Empty,
    #[error("soft targets requested without a teacher")]
    NoTeacher,
    #[error("invalid distillation setting: {0}")]
    Config(String),
    #[error("latency measurement needs warmup ≥ 1 and samples ≥ 5, got {warmup} and {samples}")]
    LatencySettings { warmup: usize, samples: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    SoftAndHard,
    HardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_soft: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub mode: DistillMode,
    /// Precompute teacher logits once per dataset instead of per batch.
    pub cache_teacher_logits: bool,
    /// Random horizontal flips during training.
    pub augment: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_soft: 0.7,
            epochs: 20,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            temperature: 1.0,
            mode: DistillMode::SoftAndHard,
            cache_teacher_logits: false,
            augment: false,
        }
    }
}

impl DistillConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda_soft) {
            return Err(format!("distill.lambda_soft must lie in [0, 1], got {}", self.lambda_soft));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("distill.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(format!("distill.learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("distill.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return Err("distill.batch_size must be ≥ 1".into());
        }
        Ok(())
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Loss and gradient with respect to the student logits for one example.
///
/// `λ·KL(p_s ‖ p_t) + (1−λ)·CE(p_s, y)` with `p = softmax(z / temperature)`;
/// in hard-only mode just the cross-entropy.
pub fn kd_loss_and_grad(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<(f64, Vec<f64>), DistillError> {
    let k = student.len();
    if label >= k {
        return Err(DistillError::Label { label, width: k });
    }
    if student.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("student logits"));
    }
    let ls = log_softmax(student);
    let ps: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let hard = -ls[label];
    let mut grad: Vec<f64> = ps.clone();
    grad[label] -= 1.0;
    if cfg.mode == DistillMode::HardOnly {
        return Ok((hard, grad));
    }
    if teacher.len() != k {
        return Err(DistillError::Shape { student: k, teacher: teacher.len() });
    }
    if teacher.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("teacher logits"));
    }
    let temp = cfg.temperature;
    let lst = log_softmax(&student.iter().map(|v| v / temp).collect::<Vec<_>>());
    let lt = log_softmax(&teacher.iter().map(|v| v / temp).collect::<Vec<_>>());
    let pst: Vec<f64> = lst.iter().map(|v| v.exp()).collect();
    let kl: f64 = pst.iter().zip(&lst).zip(&lt).map(|((p, a), b)| p * (a - b)).sum();
    let lam = cfg.lambda_soft;
    for j in 0..k {
        let dkl = pst[j] * ((lst[j] - lt[j]) - kl) / temp;
        grad[j] = lam * dkl + (1.0 - lam) * grad[j];
    }
    Ok((lam * kl + (1.0 - lam) * hard, grad))
}

/// Mean distillation loss over a row-major batch of logits.
pub fn kd_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<f64, DistillError> {
    if labels.is_empty() {
        return Err(DistillError::Empty);
    }
    let k = student_logits.len() / labels.len();
    if k == 0 || k * labels.len() != student_logits.len() {
        return Err(DistillError::Shape { student: student_logits.len(), teacher: teacher_logits.len() });
    }
    if cfg.mode == DistillMode::SoftAndHard && teacher_logits.len() != student_logits.len() {
        return Err(DistillError::Shape { student: student_logits.len(), teacher: teacher_logits.len() });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let t = teacher_logits.get(i * k..(i + 1) * k).unwrap_or(&[]);
        total += kd_loss_and_grad(&student_logits[i * k..(i + 1) * k], t, y, cfg)?.0;
    }
    Ok(total / labels.len() as f64)
}

/// A frozen teacher whose logits may be restricted to a subset's columns.
pub struct Teacher<'a> {
    model: &'a Model,
    columns: Option<Vec<usize>>,
    cache: Option<Vec<f32>>,
    width: usize,
}

impl<'a> Teacher<'a> {
    pub fn new(model: &'a Model, columns: Option<Vec<usize>>) -> Result<Self, DistillError> {
        if let Some(&index) = columns.iter().flatten().find(|&&c| c >= model.num_classes()) {
            return Err(DataError::Width { width: model.num_classes(), index }.into());
        }
        let width = columns.as_ref().map_or(model.num_classes(), Vec::len);
        Ok(Teacher { model, columns, cache: None, width })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn columns(&self) -> Option<&[usize]> {
        self.columns.as_deref()
    }

    /// Precomputes logits for every (unflipped) example of `data`.
    pub fn cache_for(&mut self, data: &Dataset) {
        let rows: Vec<Vec<f32>> = (0..data.len())
            .into_par_iter()
            .map(|i| self.logits_of(&data.image(i)))
            .collect();
        self.cache = Some(rows.concat());
    }

    fn logits_of(&self, image: &[f32]) -> Vec<f32> {
        let full = self.model.forward(image);
        match &self.columns {
            Some(cols) => select_columns(&full, full.len(), cols).expect("columns checked at construction"),
            None => full,
        }
    }

    fn logits(&self, index: usize, image: &[f32], flipped: bool) -> Vec<f32> {
        match &self.cache {
            Some(c) if !flipped => c[index * self.width..(index + 1) * self.width].to_vec(),
            _ => self.logits_of(image),
        }
    }
}

impl Predict for Teacher<'_> {
    fn predict(&self, image: &[f32]) -> Vec<f32> {
        self.logits_of(image)
    }
}

/// A trained student and its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainedStudent {
    pub model: Model,
    pub loss_curve: Vec<f64>,
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn train_model(
    model: &mut Model,
    teacher: Option<&Teacher<'_>>,
    train: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<f64>, DistillError> {
    cfg.check().map_err(DistillError::Config)?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(DistillError::Empty);
    }
    if cfg.mode == DistillMode::SoftAndHard {
        let t = teacher.ok_or(DistillError::NoTeacher)?;
        if t.width() != model.num_classes() {
            return Err(DistillError::Shape { student: model.num_classes(), teacher: t.width() });
        }
    }
    let n_params = model.num_parameters();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD157_111C);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let flips: Vec<bool> = (0..train.len()).map(|_| cfg.augment && rng.gen::<bool>()).collect();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model_ref = &*model;
            let parts: Vec<Result<(f64, Vec<f32>), DistillError>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0f32; n_params];
                    let mut loss = 0.0;
                    let mut image = vec![0f32; train.input_shape().volume()];
                    for &i in chunk {
                        if flips[i] {
                            train.flipped_image_into(i, &mut image);
                        } else {
                            train.image_into(i, &mut image);
                        }
                        let cache = model_ref.forward_train(&image);
                        let s: Vec<f64> = cache.logits().iter().map(|&v| v as f64).collect();
                        let t: Vec<f64> = match (cfg.mode, teacher) {
                            (DistillMode::SoftAndHard, Some(t)) => {
                                t.logits(i, &image, flips[i]).iter().map(|&v| v as f64).collect()
                            }
                            _ => Vec::new(),
                        };
                        let (l, g) = kd_loss_and_grad(&s, &t, train.label(i), cfg)?;
                        loss += l;
                        let g: Vec<f32> = g.iter().map(|&v| v as f32).collect();
                        model_ref.backward(&cache, &g, &mut grad);
                    }
                    Ok((loss, grad))
                })
                .collect();
            let mut grad = vec![0f32; n_params];
            for part in parts {
                let (l, g) = match part {
                    Ok(v) => v,
                    Err(DistillError::NonFinite(_)) => return Err(DistillError::Diverged { epoch }),
                    Err(e) => return Err(e),
                };
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grad {
                *g *= scale;
            }
            opt.step_f32(&mut model.params, &grad);
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() || model.params.iter().any(|v| !v.is_finite()) {
            return Err(DistillError::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Instantiates `arch` from `seed` and trains it against the teacher.
pub fn train_student(
    arch: &ArchitectureSpec,
    teacher: Option<&Teacher<'_>>,
    train: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainedStudent, DistillError> {
    let mut model = Model::new(arch, seed)?;
    let loss_curve = train_model(&mut model, teacher, train, cfg, seed)?;
    Ok(TrainedStudent { model, loss_curve })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over the whole split.
pub fn evaluate_accuracy<P: Predict + Sync + ?Sized>(model: &P, test: &Dataset) -> Result<f64, DistillError> {
    if test.is_empty() {
        return Err(DistillError::Empty);
    }
    let correct: usize = (0..test.len())
        .into_par_iter()
        .map(|i| usize::from(argmax(&model.predict(&test.image(i))) == test.label(i)))
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    pub median_seconds: f64,
    pub samples: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub device_label: String,
    pub timings: Vec<f64>,
}

impl LatencyMeasurement {
    pub fn from_timings(timings: Vec<f64>, warmup: usize, device_label: &str) -> Self {
        LatencyMeasurement {
            median_seconds: median(&timings),
            samples: timings.len(),
            warmup,
            batch_size: 1,
            device_label: device_label.to_string(),
            timings,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySettings {
    pub warmup: usize,
    pub samples: usize,
}

impl Default for LatencySettings {
    fn default() -> Self {
        LatencySettings { warmup: 10, samples: 50 }
    }
}

pub const DEVICE_LABEL: &str = "cpu:1-thread";

/// Held for the duration of every latency measurement so no other timed
/// or measured work shares the device.
static DEVICE: Mutex<()> = Mutex::new(());

/// Median wall time of `samples` single-image forward passes after
/// `warmup` discarded passes.
pub fn measure_latency<P: Predict + ?Sized>(
    model: &P,
    input_len: usize,
    settings: LatencySettings,
) -> Result<LatencyMeasurement, DistillError> {
    if settings.warmup < 1 || settings.samples < 5 {
        return Err(DistillError::LatencySettings { warmup: settings.warmup, samples: settings.samples });
    }
    let input: Vec<f32> = (0..input_len).map(|i| ((i * 7919) % 255) as f32 / 255.0 - 0.5).collect();
    let _guard = DEVICE.lock().unwrap_or_else(|e| e.into_inner());
    for _ in 0..settings.warmup {
        std::hint::black_box(model.predict(std::hint::black_box(&input)));
    }
    let mut timings = Vec::with_capacity(settings.samples);
    for _ in 0..settings.samples {
        let start = Instant::now();
        let out = model.predict(std::hint::black_box(&input));
        std::hint::black_box(out);
        timings.push(start.elapsed().as_secs_f64());
    }
    Ok(LatencyMeasurement::from_timings(timings, settings.warmup, DEVICE_LABEL))
}

/// Accuracy, latency and parameter count of the teacher as seen through
/// its (possibly restricted) logits.
pub fn measure_teacher(
    teacher: &Teacher<'_>,
    test: &Dataset,
    latency: LatencySettings,
) -> Result<(TeacherReference, LatencyMeasurement), DistillError> {
    let accuracy = evaluate_accuracy(teacher, test)?;
    let lat = measure_latency(teacher.model(), teacher.model().input_len(), latency)?;
    let parameters = count_parameters(teacher.model().arch())? as u64;
    Ok((
        TeacherReference { accuracy, latency: lat.median_seconds, parameters },
        lat,
    ))
}

/// Trains students by distillation, then measures each one.
pub struct DistillEvaluator<'a> {
    pub teacher: &'a Teacher<'a>,
    pub reference: TeacherReference,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub config: DistillConfig,
    pub latency: LatencySettings,
    /// Students trained concurrently; 1 keeps evaluation order sequential.
    pub workers: usize,
}

impl DistillEvaluator<'_> {
    fn train_one(&self, job: &StudentJob) -> Result<TrainedStudent, String> {
        train_student(&job.arch, Some(self.teacher), self.train, &self.config, job.seed).map_err(|e| e.to_string())
    }
}

impl StudentEvaluator for DistillEvaluator<'_> {
    fn teacher_reference(&self) -> TeacherReference {
        self.reference
    }

    fn evaluate(&self, jobs: &[StudentJob]) -> Vec<Result<StudentOutcome, String>> {
        let trained: Vec<Result<TrainedStudent, String>> = if self.workers > 1 {
            match rayon::ThreadPoolBuilder::new().num_threads(self.workers).build() {
                Ok(pool) => pool.install(|| jobs.par_iter().map(|j| self.train_one(j)).collect()),
                Err(_) => jobs.iter().map(|j| self.train_one(j)).collect(),
            }
        } else {
            jobs.iter().map(|j| self.train_one(j)).collect()
        };
        trained
            .into_iter()
            .zip(jobs)
            .map(|(t, job)| {
                let t = t?;
                let accuracy = evaluate_accuracy(&t.model, self.test).map_err(|e| e.to_string())?;
                let lat = measure_latency(&t.model, t.model.input_len(), self.latency).map_err(|e| e.to_string())?;
                let parameters = count_parameters(&job.arch).map_err(|e| e.to_string())? as u64;
                Ok(StudentOutcome {
                    accuracy,
                    latency: lat.median_seconds,
                    parameters,
                    train_epochs: self.config.epochs,
                    loss_curve: t.loss_curve,
                    latency_measurement: Some(lat),
                    model: Some(t.model),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(lambda: f64) -> DistillConfig {
        DistillConfig { lambda_soft: lambda, ..Default::default() }
    }

    #[test]
    fn hand_example() {
        let s = [0.0, 0.0];
        let t = [0.9f64.ln(), 0.1f64.ln()];
        let soft = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let hard = -(0.5f64).ln();
        assert_abs_diff_eq!(soft, 0.51083, epsilon = 1e-5);
        let (l, _) = kd_loss_and_grad(&s, &t, 0, &cfg(0.7)).unwrap();
        assert_abs_diff_eq!(l, 0.7 * soft + 0.3 * hard, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.56553, epsilon = 1e-5);
    }

    #[test]
    fn limits() {
        let s = [0.3, -1.2, 2.0];
        let t = [1.0, 0.5, -0.5];
        let (ce, _) = kd_loss_and_grad(&s, &t, 2, &cfg(0.0)).unwrap();
        let ls = log_softmax(&s);
        assert_eq!(ce, -ls[2]);
        let (same, _) = kd_loss_and_grad(&s, &s, 1, &cfg(0.7)).unwrap();
        assert_eq!(same, (1.0 - 0.7) * -ls[1]);
        let hard_only = DistillConfig { mode: DistillMode::HardOnly, ..cfg(0.7) };
        assert_eq!(kd_loss_and_grad(&s, &[], 2, &hard_only).unwrap().0, -ls[2]);
        assert!(kd_loss_and_grad(&[f64::NAN, 0.0], &[0.0, 0.0], 0, &cfg(0.7)).is_err());
        assert!(kd_loss_and_grad(&s, &t, 3, &cfg(0.7)).is_err());
        assert!(kd_loss(&s, &t[..2], &[0], &cfg(0.7)).is_err());
    }

    #[test]
    fn batch_loss_is_mean() {
        let s = [0.1, 0.2, -0.4, 0.9];
        let t = [0.5, 0.0, 0.0, 0.5];
        let c = cfg(0.7);
        let a = kd_loss_and_grad(&s[..2], &t[..2], 0, &c).unwrap().0;
        let b = kd_loss_and_grad(&s[2..], &t[2..], 1, &c).unwrap().0;
        assert_abs_diff_eq!(kd_loss(&s, &t, &[0, 1], &c).unwrap(), (a + b) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn temperature_gradient() {
        let c = DistillConfig { temperature: 2.5, ..cfg(0.6) };
        let s = [0.4, -0.3, 1.1, 0.0];
        let t = [1.5, 0.2, -0.7, 0.3];
        let (_, g) = kd_loss_and_grad(&s, &t, 1, &c).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut p = s;
            p[j] += h;
            let mut m = s;
            m[j] -= h;
            let fd = (kd_loss_and_grad(&p, &t, 1, &c).unwrap().0 - kd_loss_and_grad(&m, &t, 1, &c).unwrap().0) / (2.0 * h);
            assert_abs_diff_eq!(fd, g[j], epsilon = 1e-7);
        }
    }

    #[test]
    fn median_helper() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let base = [0.5, 0.1, 0.9, 0.3, 0.7];
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.25).collect();
        assert_abs_diff_eq!(median(&shifted), median(&base) + 0.25, epsilon = 1e-15);
    }

    #[test]
    fn argmax_ties_to_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    struct Constant(usize);

    impl Predict for Constant {
        fn predict(&self, _: &[f32]) -> Vec<f32> {
            let mut v = vec![0.0; 4];
            v[self.0] = 1.0;
            v
        }
    }

    #[test]
    fn latency_contract() {
        let m = measure_latency(&Constant(0), 8, LatencySettings { warmup: 1, samples: 5 }).unwrap();
        assert_eq!(m.timings.len(), 5);
        assert_eq!(m.samples, 5);
        assert_eq!(m.batch_size, 1);
        assert!(m.median_seconds >= 0.0);
        assert!(measure_latency(&Constant(0), 8, LatencySettings { warmup: 0, samples: 5 }).is_err());
        assert!(measure_latency(&Constant(0), 8, LatencySettings { warmup: 1, samples: 4 }).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(DistillConfig::default().check().is_ok());
        assert!(cfg(1.5).check().is_err());
        assert!(DistillConfig { batch_size: 0, ..Default::default() }.check().is_err());
    }
}
