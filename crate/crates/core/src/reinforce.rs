//! REINFORCE search loop over student architectures.
//!
//! Each iteration samples students from the policy, has them trained and
//! measured by a [`StudentEvaluator`], scores them with the product reward
//! and takes one momentum-SGD step on the baselined surrogate loss
//! `−(1/N)·Σ_i (R_i − b)·Σ_t log π(a_{i,t})`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{derive_student, encode_architecture, ActionVector, ArchitectureSpec, FEATURE_WIDTH};
use crate::distill::LatencyMeasurement;
use crate::nn::{Model, Sgd};
use crate::policy::{sample_trajectories, PolicyCheckpoint, PolicyError, PolicyParameters, Trajectory};
use crate::reward::{combined_reward, failure_reward, RewardComponents, RewardError, TeacherReference, Thresholds};

#[derive(Debug, Error)]
pub enum ReinforceError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("checkpoint incompatible with teacher: {0}")]
    Incompatible(String),
    #[error("{0} trajectories but {1} rewards")]
    CountMismatch(usize, usize),
    #[error("no trajectories")]
    Empty,
    #[error("non-finite reward {0}")]
    NonFinite(f64),
    #[error("run directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("persisting {0}")]
    Persist(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReinforceError + '_ {
    move |source| ReinforceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Exponential moving average of past iteration rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        BaselineState {
            value: 0.0,
            decay,
            initialized: false,
        }
    }
}

/// First update takes the mean; later ones blend `decay·b + (1−decay)·mean`.
pub fn update_baseline(state: &BaselineState, rewards: &[f64]) -> Result<BaselineState, ReinforceError> {
    if rewards.is_empty() {
        return Err(ReinforceError::Empty);
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ReinforceError::NonFinite(bad));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let value = if state.initialized {
        state.decay * state.value + (1.0 - state.decay) * mean
    } else {
        mean
    };
    Ok(BaselineState {
        value,
        decay: state.decay,
        initialized: true,
    })
}

fn check_rewards(trajectories: &[Trajectory], rewards: &[f64]) -> Result<(), ReinforceError> {
    if trajectories.is_empty() {
        return Err(ReinforceError::Empty);
    }
    if trajectories.len() != rewards.len() {
        return Err(ReinforceError::CountMismatch(trajectories.len(), rewards.len()));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ReinforceError::NonFinite(bad));
    }
    Ok(())
}

/// Surrogate loss whose gradient is the negated baselined estimator.
/// Every step of trajectory `i` is credited with the terminal reward `R_i`.
pub fn policy_gradient_loss(
    trajectories: &[Trajectory],
    rewards: &[f64],
    baseline: &BaselineState,
) -> Result<f64, ReinforceError> {
    check_rewards(trajectories, rewards)?;
    let n = trajectories.len() as f64;
    Ok(-trajectories
        .iter()
        .zip(rewards)
        .map(|(t, r)| (r - baseline.value) * t.log_prob())
        .sum::<f64>()
        / n)
}

/// Gradient of [`policy_gradient_loss`] with respect to the per-layer logits,
/// given the keep probabilities the trajectories were drawn from.
pub fn policy_gradient_logit_grad(
    trajectories: &[Trajectory],
    probs: &[f64],
    rewards: &[f64],
    baseline: &BaselineState,
) -> Result<Vec<f64>, ReinforceError> {
    check_rewards(trajectories, rewards)?;
    let n = trajectories.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    for (t, r) in trajectories.iter().zip(rewards) {
        let adv = r - baseline.value;
        for ((g, &p), &a) in grad.iter_mut().zip(probs).zip(&t.actions.0) {
            let dlogp = if a { 1.0 - p } else { -p };
            *g -= adv * dlogp / n;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub actions: ActionVector,
    pub accuracy: f64,
    pub latency: f64,
    pub parameters: u64,
    pub reward: f64,
    pub reward_components: RewardComponents,
    pub train_epochs: usize,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_measurement: Option<LatencyMeasurement>,
}

impl EvaluationRecord {
    /// Scores a measured student.
    pub fn scored(
        actions: ActionVector,
        outcome: &StudentOutcome,
        teacher: &TeacherReference,
        th: &Thresholds,
    ) -> Result<Self, RewardError> {
        let (reward, reward_components) =
            combined_reward(outcome.accuracy, outcome.latency, outcome.parameters as f64, teacher, th)?;
        Ok(EvaluationRecord {
            actions,
            accuracy: outcome.accuracy,
            latency: outcome.latency,
            parameters: outcome.parameters,
            reward,
            reward_components,
            train_epochs: outcome.train_epochs,
            failed: false,
            error: None,
            loss_curve: outcome.loss_curve.clone(),
            latency_measurement: outcome.latency_measurement.clone(),
        })
    }

    /// Penalty record: zero accuracy at teacher latency and size.
    pub fn failed(actions: ActionVector, error: String, teacher: &TeacherReference, th: &Thresholds) -> Result<Self, RewardError> {
        let (reward, reward_components) = failure_reward(teacher, th)?;
        Ok(EvaluationRecord {
            actions,
            accuracy: 0.0,
            latency: teacher.latency,
            parameters: teacher.parameters,
            reward,
            reward_components,
            train_epochs: 0,
            failed: true,
            error: Some(error),
            loss_curve: Vec::new(),
            latency_measurement: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub records: Vec<EvaluationRecord>,
    pub baseline_before: f64,
    pub baseline_after: f64,
    pub policy_loss: f64,
    pub keep_probabilities: Vec<f64>,
}

impl IterationLog {
    pub fn mean_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// A student to train and measure.
#[derive(Debug, Clone)]
pub struct StudentJob {
    pub arch: ArchitectureSpec,
    pub seed: u64,
}

/// Measurements of one trained student.
#[derive(Debug, Clone)]
pub struct StudentOutcome {
    pub accuracy: f64,
    pub latency: f64,
    pub parameters: u64,
    pub train_epochs: usize,
    pub loss_curve: Vec<f64>,
    pub latency_measurement: Option<LatencyMeasurement>,
    pub model: Option<Model>,
}

/// Trains and measures students. Implementations may run the jobs of one
/// call concurrently; results come back in job order.
pub trait StudentEvaluator {
    fn teacher_reference(&self) -> TeacherReference;
    fn evaluate(&self, jobs: &[StudentJob]) -> Vec<Result<StudentOutcome, String>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub baseline_decay: f64,
    /// Fold the current iteration's rewards into the baseline before the
    /// policy step instead of after it.
    pub baseline_update_before: bool,
    pub head_bias_init: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            hidden_width: 64,
            learning_rate: 0.001,
            momentum: 0.9,
            baseline_decay: 0.9,
            baseline_update_before: false,
            head_bias_init: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSettings {
    pub iterations: usize,
    pub students_per_iteration: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub policy: PolicySettings,
}

/// Artifacts of a finished search.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub best: Option<EvaluationRecord>,
    pub best_arch: Option<ArchitectureSpec>,
    pub best_model: Option<Model>,
    pub checkpoint: PolicyCheckpoint,
    pub logs: Vec<IterationLog>,
}

/// Run directory layout: `iterations.jsonl`, `checkpoints/iter_<k>`,
/// `best/{arch.json,model_weights,record.json}`.
#[derive(Debug, Clone)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: &Path) -> Result<Self, ReinforceError> {
        for sub in ["checkpoints", "best"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let log = root.join("iterations.jsonl");
        File::create(&log).map_err(io_err(&log))?;
        Ok(RunDirectory { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn append_iteration(&self, log: &IterationLog) -> Result<(), ReinforceError> {
        let path = self.root.join("iterations.jsonl");
        let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        let line = serde_json::to_string(log).map_err(|e| ReinforceError::Persist(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration}"))
    }

    pub fn write_checkpoint(&self, ck: &PolicyCheckpoint) -> Result<(), ReinforceError> {
        ck.save(&self.checkpoint_path(ck.iteration))?;
        Ok(())
    }

    pub fn write_best(&self, record: &EvaluationRecord, arch: &ArchitectureSpec, model: Option<&Model>) -> Result<(), ReinforceError> {
        let best = self.root.join("best");
        let rec = best.join("record.json");
        let text = serde_json::to_string_pretty(record).map_err(|e| ReinforceError::Persist(e.to_string()))?;
        fs::write(&rec, text).map_err(io_err(&rec))?;
        arch.save(&best.join("arch.json")).map_err(|e| ReinforceError::Persist(e.to_string()))?;
        if let Some(m) = model {
            m.save(&best.join("model_weights")).map_err(|e| ReinforceError::Persist(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_iterations(root: &Path) -> Result<Vec<IterationLog>, ReinforceError> {
        let path = root.join("iterations.jsonl");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ReinforceError::Persist(e.to_string())))
            .collect()
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the search. With `warm_start` the policy and baseline resume from
/// the checkpoint instead of a fresh initialization.
pub fn run_compression(
    settings: &SearchSettings,
    teacher: &ArchitectureSpec,
    evaluator: &dyn StudentEvaluator,
    warm_start: Option<&PolicyCheckpoint>,
    run_dir: Option<&RunDirectory>,
) -> Result<CompressionOutcome, ReinforceError> {
    let encoding = encode_architecture(teacher);
    let layer_count = encoding.len();
    let (mut params, mut baseline, start_iteration) = match warm_start {
        Some(ck) => {
            if ck.params.input_width != FEATURE_WIDTH {
                return Err(ReinforceError::Incompatible(format!(
                    "policy input width {} but encoding width {FEATURE_WIDTH}",
                    ck.params.input_width
                )));
            }
            if ck.layer_count != layer_count {
                return Err(ReinforceError::Incompatible(format!(
                    "policy trained on {} removable layers, teacher has {layer_count}",
                    ck.layer_count
                )));
            }
            (ck.params.clone(), ck.baseline, ck.iteration)
        }
        None => (
            PolicyParameters::new(
                FEATURE_WIDTH,
                settings.policy.hidden_width,
                settings.policy.head_bias_init,
                mix_seed(settings.seed, 0x5eed),
            ),
            BaselineState::new(settings.policy.baseline_decay),
            0,
        ),
    };
    let reference = evaluator.teacher_reference();
    let th = settings.thresholds;
    let mut optimizer = Sgd::new(settings.policy.learning_rate, settings.policy.momentum, 0.0, params.num_parameters());

    let mut logs = Vec::with_capacity(settings.iterations);
    let mut best: Option<(EvaluationRecord, ArchitectureSpec, Option<Model>)> = None;
    for k in 0..settings.iterations {
        let fwd = params.forward(&encoding)?;
        let trajectories = sample_trajectories(
            &params,
            &encoding,
            settings.students_per_iteration,
            mix_seed(settings.seed, (start_iteration + k) as u64 * 2 + 1),
        )?;

        let mut jobs = Vec::new();
        let mut slots: Vec<Result<usize, String>> = Vec::new();
        for (j, t) in trajectories.iter().enumerate() {
            match derive_student(teacher, &t.actions) {
                Ok(arch) => {
                    slots.push(Ok(jobs.len()));
                    jobs.push(StudentJob {
                        arch,
                        seed: mix_seed(settings.seed, ((start_iteration + k) as u64) << 16 | j as u64),
                    });
                }
                Err(e) => slots.push(Err(e.to_string())),
            }
        }
        let mut outcomes: Vec<Option<Result<StudentOutcome, String>>> =
            evaluator.evaluate(&jobs).into_iter().map(Some).collect();

        let mut records = Vec::with_capacity(trajectories.len());
        let mut models: Vec<Option<(ArchitectureSpec, Option<Model>)>> = Vec::with_capacity(trajectories.len());
        for (t, slot) in trajectories.iter().zip(&slots) {
            let result = match slot {
                Ok(idx) => outcomes[*idx].take().expect("one outcome per job"),
                Err(e) => Err(e.clone()),
            };
            match result {
                Ok(mut outcome) => {
                    records.push(EvaluationRecord::scored(t.actions.clone(), &outcome, &reference, &th)?);
                    let arch = jobs[*slot.as_ref().expect("job slot")].arch.clone();
                    models.push(Some((arch, outcome.model.take())));
                }
                Err(e) => {
                    log::debug!("student {} failed: {e}", t.actions);
                    records.push(EvaluationRecord::failed(t.actions.clone(), e, &reference, &th)?);
                    models.push(None);
                }
            }
        }

        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let baseline_before = baseline.value;
        if settings.policy.baseline_update_before {
            baseline = update_baseline(&baseline, &rewards)?;
        }
        let policy_loss = policy_gradient_loss(&trajectories, &rewards, &baseline)?;
        let dlogits = policy_gradient_logit_grad(&trajectories, &fwd.probs, &rewards, &baseline)?;
        let grad = params.backward(&fwd, &dlogits);
        let mut flat = params.to_flat();
        optimizer.step_f64(&mut flat, &grad.to_flat());
        params.set_flat(&flat);
        if !settings.policy.baseline_update_before {
            baseline = update_baseline(&baseline, &rewards)?;
        }

        for (rec, model) in records.iter().zip(models) {
            let improves = best.as_ref().is_none_or(|(b, _, _)| rec.reward > b.reward);
            if let (true, Some((arch, m))) = (improves, model) {
                if let Some(dir) = run_dir {
                    dir.write_best(rec, &arch, m.as_ref())?;
                }
                best = Some((rec.clone(), arch, m));
            }
        }

        let log = IterationLog {
            iteration: start_iteration + k,
            records,
            baseline_before,
            baseline_after: baseline.value,
            policy_loss,
            keep_probabilities: fwd.probs.clone(),
        };
        log::info!(
            "iteration {}: mean reward {:.4e}, best so far {:.4e}",
            log.iteration,
            log.mean_reward(),
            best.as_ref().map_or(0.0, |b| b.0.reward)
        );
        let checkpoint = PolicyCheckpoint {
            params: params.clone(),
            baseline,
            iteration: start_iteration + k + 1,
            layer_count,
        };
        if let Some(dir) = run_dir {
            dir.append_iteration(&log)?;
            dir.write_checkpoint(&checkpoint)?;
        }
        logs.push(log);
    }

    let (best, best_arch, best_model) = match best {
        Some((r, a, m)) => (Some(r), Some(a), m),
        None => (None, None, None),
    };
    Ok(CompressionOutcome {
        best,
        best_arch,
        best_model,
        checkpoint: PolicyCheckpoint {
            params,
            baseline,
            iteration: start_iteration + settings.iterations,
            layer_count,
        },
        logs,
    })
}

/// Warm-starts a search on a new dataset or subset from `source`.
pub fn transfer_policy(
    source: &PolicyCheckpoint,
    settings: &SearchSettings,
    teacher: &ArchitectureSpec,
    evaluator: &dyn StudentEvaluator,
    run_dir: Option<&RunDirectory>,
) -> Result<CompressionOutcome, ReinforceError> {
    run_compression(settings, teacher, evaluator, Some(source), run_dir)
}
