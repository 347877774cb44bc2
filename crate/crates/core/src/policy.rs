//! Bidirectional LSTM keep/remove policy.
//!
//! The policy reads the encoded teacher (one feature vector per removable
//! layer) with a forward and a backward LSTM. For each layer the action head
//! sees `[h_fwd_t, h_bwd_t, x_t]` and emits one logit; the keep probability
//! is its logistic. Because the input is always the teacher encoding, the
//! per-layer probabilities are shared by every sampled trajectory.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ActionVector;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty encoding")]
    EmptyEncoding,
    #[error("feature width {got} does not match policy input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("action vector has {got} entries, encoding has {expected} layers")]
    LengthMismatch { expected: usize, got: usize },
    #[error("checkpoint archive: {0}")]
    Archive(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One LSTM direction; gate order is input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmCell {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub input_width: usize,
    pub hidden_width: usize,
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// Weights over `[h_fwd, h_bwd, x]`, length `2·hidden + input`.
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
}

/// Sampled actions with the log-probability of each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: ActionVector,
    pub step_log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

struct StepCache {
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
}

/// Forward pass state needed for backpropagation.
pub struct PolicyForward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    inputs: Vec<Array1<f64>>,
    fwd_h: Vec<Array1<f64>>,
    bwd_h: Vec<Array1<f64>>,
    fwd_steps: Vec<StepCache>,
    /// Indexed by layer position, not processing order.
    bwd_steps: Vec<StepCache>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log π(a | logit)` for a Bernoulli keep decision.
pub fn step_log_prob(logit: f64, keep: bool) -> f64 {
    if keep {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

fn lstm_step(cell: &LstmCell, x: ArrayView1<f64>, h_prev: &Array1<f64>, c_prev: &Array1<f64>) -> (Array1<f64>, Array1<f64>, StepCache) {
    let hd = cell.hidden();
    let z = cell.w_ih.dot(&x) + cell.w_hh.dot(h_prev) + &cell.bias;
    let i = z.slice(s![0..hd]).mapv(sigmoid);
    let f = z.slice(s![hd..2 * hd]).mapv(sigmoid);
    let g = z.slice(s![2 * hd..3 * hd]).mapv(f64::tanh);
    let o = z.slice(s![3 * hd..4 * hd]).mapv(sigmoid);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let cache = StepCache {
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    (h, c, cache)
}

/// Backprop one LSTM step. Returns `(dh_prev, dc_prev)`.
fn lstm_step_backward(
    cell: &LstmCell,
    grad: &mut LstmCell,
    x: &Array1<f64>,
    st: &StepCache,
    dh: &Array1<f64>,
    dc_next: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let hd = cell.hidden();
    let d_o = dh * &st.tanh_c;
    let dc = dc_next + &(dh * &st.o * &st.tanh_c.mapv(|t| 1.0 - t * t));
    let d_i = &dc * &st.g;
    let d_g = &dc * &st.i;
    let d_f = &dc * &st.c_prev;
    let dc_prev = &dc * &st.f;

    let mut dz = Array1::zeros(4 * hd);
    dz.slice_mut(s![0..hd]).assign(&(&d_i * &st.i.mapv(|v| v * (1.0 - v))));
    dz.slice_mut(s![hd..2 * hd]).assign(&(&d_f * &st.f.mapv(|v| v * (1.0 - v))));
    dz.slice_mut(s![2 * hd..3 * hd]).assign(&(&d_g * &st.g.mapv(|v| 1.0 - v * v)));
    dz.slice_mut(s![3 * hd..4 * hd]).assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));

    let dz_col = dz.view().insert_axis(ndarray::Axis(1));
    grad.w_ih += &dz_col.dot(&x.view().insert_axis(ndarray::Axis(0)));
    grad.w_hh += &dz_col.dot(&st.h_prev.view().insert_axis(ndarray::Axis(0)));
    grad.bias += &dz;
    let dh_prev = cell.w_hh.t().dot(&dz);
    (dh_prev, dc_prev)
}

impl PolicyParameters {
    pub fn zeros(input_width: usize, hidden_width: usize) -> Self {
        PolicyParameters {
            input_width,
            hidden_width,
            forward: LstmCell::zeros(input_width, hidden_width),
            backward: LstmCell::zeros(input_width, hidden_width),
            head_weight: Array1::zeros(2 * hidden_width + input_width),
            head_bias: 0.0,
        }
    }

    /// Uniform `±1/√fan_in` initialization; the head bias starts at
    /// `head_bias`, so the initial keep probability is `σ(head_bias)` up to
    /// the small weight contribution.
    pub fn new(input_width: usize, hidden_width: usize, head_bias: f64, seed: u64) -> Self {
        let mut p = Self::zeros(input_width, hidden_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_bound = 1.0 / (hidden_width as f64).sqrt();
        let head_bound = 1.0 / ((2 * hidden_width + input_width) as f64).sqrt();
        for cell in [&mut p.forward, &mut p.backward] {
            cell.w_ih.mapv_inplace(|_| rng.gen_range(-lstm_bound..lstm_bound));
            cell.w_hh.mapv_inplace(|_| rng.gen_range(-lstm_bound..lstm_bound));
            cell.bias.mapv_inplace(|_| rng.gen_range(-lstm_bound..lstm_bound));
        }
        p.head_weight.mapv_inplace(|_| rng.gen_range(-head_bound..head_bound));
        p.head_bias = head_bias;
        p
    }

    fn check(&self, encoding: &[Vec<f64>]) -> Result<(), PolicyError> {
        if encoding.is_empty() {
            return Err(PolicyError::EmptyEncoding);
        }
        if let Some(row) = encoding.iter().find(|r| r.len() != self.input_width) {
            return Err(PolicyError::WidthMismatch {
                expected: self.input_width,
                got: row.len(),
            });
        }
        Ok(())
    }

    /// Runs both recurrences and the action head.
    pub fn forward(&self, encoding: &[Vec<f64>]) -> Result<PolicyForward, PolicyError> {
        self.check(encoding)?;
        let hd = self.hidden_width;
        let n = encoding.len();
        let inputs: Vec<Array1<f64>> = encoding.iter().map(|r| Array1::from(r.clone())).collect();

        let mut fwd_h = Vec::with_capacity(n);
        let mut fwd_steps = Vec::with_capacity(n);
        let (mut h, mut c) = (Array1::zeros(hd), Array1::zeros(hd));
        for x in &inputs {
            let (h2, c2, st) = lstm_step(&self.forward, x.view(), &h, &c);
            fwd_h.push(h2.clone());
            fwd_steps.push(st);
            h = h2;
            c = c2;
        }

        let mut bwd_h = vec![Array1::zeros(hd); n];
        let mut bwd_steps: Vec<Option<StepCache>> = (0..n).map(|_| None).collect();
        let (mut h, mut c) = (Array1::zeros(hd), Array1::zeros(hd));
        for t in (0..n).rev() {
            let (h2, c2, st) = lstm_step(&self.backward, inputs[t].view(), &h, &c);
            bwd_h[t] = h2.clone();
            bwd_steps[t] = Some(st);
            h = h2;
            c = c2;
        }

        let wf = self.head_weight.slice(s![0..hd]);
        let wb = self.head_weight.slice(s![hd..2 * hd]);
        let wx = self.head_weight.slice(s![2 * hd..]);
        let logits: Vec<f64> = (0..n)
            .map(|t| wf.dot(&fwd_h[t]) + wb.dot(&bwd_h[t]) + wx.dot(&inputs[t]) + self.head_bias)
            .collect();
        let probs = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(PolicyForward {
            logits,
            probs,
            inputs,
            fwd_h,
            bwd_h,
            fwd_steps,
            bwd_steps: bwd_steps.into_iter().map(|s| s.expect("filled")).collect(),
        })
    }

    /// Gradient of `Σ_t dlogits[t]·logit_t` with respect to every parameter.
    pub fn backward(&self, fwd: &PolicyForward, dlogits: &[f64]) -> PolicyParameters {
        let hd = self.hidden_width;
        let n = fwd.logits.len();
        let mut grad = PolicyParameters::zeros(self.input_width, hd);
        let wf = self.head_weight.slice(s![0..hd]).to_owned();
        let wb = self.head_weight.slice(s![hd..2 * hd]).to_owned();

        let mut dh_fwd = Vec::with_capacity(n);
        let mut dh_bwd = Vec::with_capacity(n);
        for t in 0..n {
            let d = dlogits[t];
            grad.head_bias += d;
            grad.head_weight.slice_mut(s![0..hd]).scaled_add(d, &fwd.fwd_h[t]);
            grad.head_weight.slice_mut(s![hd..2 * hd]).scaled_add(d, &fwd.bwd_h[t]);
            grad.head_weight.slice_mut(s![2 * hd..]).scaled_add(d, &fwd.inputs[t]);
            dh_fwd.push(&wf * d);
            dh_bwd.push(&wb * d);
        }

        // Forward direction: time runs 0..n, so backprop runs n..0.
        let (mut dh, mut dc) = (Array1::zeros(hd), Array1::zeros(hd));
        for t in (0..n).rev() {
            let total = &dh_fwd[t] + &dh;
            let (dhp, dcp) = lstm_step_backward(&self.forward, &mut grad.forward, &fwd.inputs[t], &fwd.fwd_steps[t], &total, &dc);
            dh = dhp;
            dc = dcp;
        }
        // Backward direction: time runs n..0, so backprop runs 0..n.
        let (mut dh, mut dc) = (Array1::zeros(hd), Array1::zeros(hd));
        for t in 0..n {
            let total = &dh_bwd[t] + &dh;
            let (dhp, dcp) = lstm_step_backward(&self.backward, &mut grad.backward, &fwd.inputs[t], &fwd.bwd_steps[t], &total, &dc);
            dh = dhp;
            dc = dcp;
        }
        grad
    }

    /// Parameter tensors keyed by name with their shapes, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (dir, cell) in [("forward", &self.forward), ("backward", &self.backward)] {
            out.push((format!("lstm_{dir}.w_ih"), cell.w_ih.shape().to_vec(), cell.w_ih.iter().copied().collect()));
            out.push((format!("lstm_{dir}.w_hh"), cell.w_hh.shape().to_vec(), cell.w_hh.iter().copied().collect()));
            out.push((format!("lstm_{dir}.bias"), cell.bias.shape().to_vec(), cell.bias.to_vec()));
        }
        out.push(("head.weight".into(), vec![self.head_weight.len()], self.head_weight.to_vec()));
        out.push(("head.bias".into(), vec![1], vec![self.head_bias]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|t| t.2).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters(), "flat parameter length");
        let mut it = flat.iter().copied();
        for cell in [&mut self.forward, &mut self.backward] {
            cell.w_ih.iter_mut().for_each(|v| *v = it.next().unwrap());
            cell.w_hh.iter_mut().for_each(|v| *v = it.next().unwrap());
            cell.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.head_weight.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.head_bias = it.next().unwrap();
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Keep probability for every removable layer.
pub fn action_probabilities(params: &PolicyParameters, encoding: &[Vec<f64>]) -> Result<Vec<f64>, PolicyError> {
    Ok(params.forward(encoding)?.probs)
}

/// Draws `n` trajectories, each layer an independent Bernoulli draw.
pub fn sample_trajectories(
    params: &PolicyParameters,
    encoding: &[Vec<f64>],
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, PolicyError> {
    let fwd = params.forward(encoding)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let mut actions = Vec::with_capacity(fwd.probs.len());
            let mut step_log_probs = Vec::with_capacity(fwd.probs.len());
            for (&p, &logit) in fwd.probs.iter().zip(&fwd.logits) {
                let keep = rng.gen::<f64>() < p;
                actions.push(keep);
                step_log_probs.push(step_log_prob(logit, keep));
            }
            Trajectory {
                actions: ActionVector(actions),
                step_log_probs,
            }
        })
        .collect())
}

/// `Σ_t log π(a_t | ·)`.
pub fn trajectory_log_prob(
    params: &PolicyParameters,
    encoding: &[Vec<f64>],
    actions: &ActionVector,
) -> Result<f64, PolicyError> {
    let fwd = params.forward(encoding)?;
    if actions.len() != fwd.logits.len() {
        return Err(PolicyError::LengthMismatch {
            expected: fwd.logits.len(),
            got: actions.len(),
        });
    }
    Ok(fwd.logits.iter().zip(&actions.0).map(|(&l, &a)| step_log_prob(l, a)).sum())
}

/// `∂ Σ_t log π(a_t) / ∂ logit_t = a_t − p_t`.
pub fn log_prob_logit_grad(fwd: &PolicyForward, actions: &ActionVector) -> Vec<f64> {
    fwd.probs
        .iter()
        .zip(&actions.0)
        .map(|(&p, &a)| if a { 1.0 - p } else { -p })
        .collect()
}

/// Value and parameter gradient of the trajectory log-probability.
pub fn trajectory_log_prob_grad(
    params: &PolicyParameters,
    encoding: &[Vec<f64>],
    actions: &ActionVector,
) -> Result<(f64, PolicyParameters), PolicyError> {
    let fwd = params.forward(encoding)?;
    if actions.len() != fwd.logits.len() {
        return Err(PolicyError::LengthMismatch {
            expected: fwd.logits.len(),
            got: actions.len(),
        });
    }
    let value = fwd.logits.iter().zip(&actions.0).map(|(&l, &a)| step_log_prob(l, a)).sum();
    let dl = log_prob_logit_grad(&fwd, actions);
    Ok((value, params.backward(&fwd, &dl)))
}

/// Policy weights plus the search state needed to resume or transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub params: PolicyParameters,
    pub baseline: crate::reinforce::BaselineState,
    pub iteration: usize,
    /// Removable-layer count of the teacher the policy was trained on.
    pub layer_count: usize,
}

impl PolicyCheckpoint {
    /// Single safetensors archive; tensors are f64, metadata holds widths,
    /// baseline and counters.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let tensors = self.params.named_tensors();
        let bytes: Vec<Vec<u8>> = tensors
            .iter()
            .map(|(_, _, v)| v.iter().flat_map(|x| x.to_le_bytes()).collect())
            .collect();
        let views: Vec<(String, TensorView<'_>)> = tensors
            .iter()
            .zip(&bytes)
            .map(|((name, shape, _), b)| {
                (name.clone(), TensorView::new(Dtype::F64, shape.clone(), b).expect("consistent tensor"))
            })
            .collect();
        let mut meta = HashMap::new();
        meta.insert("input_width".into(), self.params.input_width.to_string());
        meta.insert("hidden_width".into(), self.params.hidden_width.to_string());
        meta.insert("baseline_value".into(), format!("{:?}", self.baseline.value));
        meta.insert("baseline_decay".into(), format!("{:?}", self.baseline.decay));
        meta.insert("baseline_initialized".into(), self.baseline.initialized.to_string());
        meta.insert("iteration".into(), self.iteration.to_string());
        meta.insert("layer_count".into(), self.layer_count.to_string());
        let data = safetensors::serialize(views, &Some(meta)).map_err(|e| PolicyError::Archive(e.to_string()))?;
        std::fs::write(path, data).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let data = std::fs::read(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let archive = |e: &dyn std::fmt::Display| PolicyError::Archive(e.to_string());
        let (_, header) = SafeTensors::read_metadata(&data).map_err(|e| archive(&e))?;
        let meta = header.metadata().clone().ok_or_else(|| archive(&"missing metadata"))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| archive(&format!("missing metadata key {k}")));
        let parse_usize = |k: &str| -> Result<usize, PolicyError> { get(k)?.parse().map_err(|e| archive(&e)) };
        let parse_f64 = |k: &str| -> Result<f64, PolicyError> { get(k)?.parse().map_err(|e| archive(&e)) };
        let input_width = parse_usize("input_width")?;
        let hidden_width = parse_usize("hidden_width")?;
        let mut params = PolicyParameters::zeros(input_width, hidden_width);
        let tensors = SafeTensors::deserialize(&data).map_err(|e| archive(&e))?;
        let mut flat = Vec::with_capacity(params.num_parameters());
        for (name, shape, _) in params.named_tensors() {
            let t = tensors.tensor(&name).map_err(|e| archive(&format!("{name}: {e}")))?;
            if t.shape() != shape.as_slice() || t.dtype() != Dtype::F64 {
                return Err(archive(&format!("{name}: shape or dtype mismatch")));
            }
            flat.extend(t.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))));
        }
        params.set_flat(&flat);
        Ok(PolicyCheckpoint {
            params,
            baseline: crate::reinforce::BaselineState {
                value: parse_f64("baseline_value")?,
                decay: parse_f64("baseline_decay")?,
                initialized: get("baseline_initialized")? == "true",
            },
            iteration: parse_usize("iteration")?,
            layer_count: parse_usize("layer_count")?,
        })
    }
}
