//! First-order Taylor filter ranking and structured filter pruning.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_parameters, ActionVector, ArchError, ArchitectureSpec, LayerKind, Shape};
use crate::data::Dataset;
use crate::distill::{
    evaluate_accuracy, kd_loss_and_grad, measure_latency, train_model, DistillConfig, DistillError, DistillMode,
    LatencySettings,
};
use crate::nn::{Model, ModelError};
use crate::reinforce::{EvaluationRecord, StudentOutcome};
use crate::reward::{RewardError, TeacherReference, Thresholds};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("cannot remove {requested} filters, only {available} are prunable")]
    Budget { requested: usize, available: usize },
    #[error("empty ranking split")]
    EmptySplit,
    #[error("model has no convolution layers")]
    NoConvolutions,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("writing {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRank {
    pub layer_index: usize,
    pub filter_index: usize,
    pub score: f64,
}

/// Convolutions whose filters may be removed: not a residual block output
/// and not feeding a block, so skip-connection channels stay equal.
pub fn is_prunable(arch: &ArchitectureSpec, layer: usize) -> bool {
    let l = &arch.layers[layer];
    if l.kind != LayerKind::Convolution || l.skip_end {
        return false;
    }
    let next = arch.layers[layer + 1..].iter().find(|n| n.kind != LayerKind::Pooling);
    !matches!(next, Some(n) if n.kind == LayerKind::Convolution && n.skip_start)
}

/// Filters that [`prune_filters`] could remove while keeping one per layer.
pub fn prunable_filter_count(arch: &ArchitectureSpec) -> usize {
    (0..arch.layers.len())
        .filter(|&i| is_prunable(arch, i))
        .map(|i| arch.layers[i].out_channels - 1)
        .sum()
}

/// Layers whose input channels come from `layer`'s filters: the next
/// convolution, or the first linear layer after a flatten.
fn consumer_of(arch: &ArchitectureSpec, layer: usize) -> Option<usize> {
    let mut j = layer + 1;
    while j < arch.layers.len() {
        match arch.layers[j].kind {
            LayerKind::Convolution | LayerKind::Linear => return Some(j),
            _ => j += 1,
        }
    }
    None
}

/// Scores every convolution filter by `|mean_spatial(a · ∂L/∂a)|` averaged
/// over the split, L2-normalized within each layer, and returns them in
/// ascending score order with ties broken by (layer, filter).
pub fn rank_filters(model: &Model, split: &Dataset) -> Result<Vec<FilterRank>, PruneError> {
    if split.is_empty() {
        return Err(PruneError::EmptySplit);
    }
    let arch = model.arch();
    let convs: Vec<usize> = (0..arch.layers.len())
        .filter(|&i| arch.layers[i].kind == LayerKind::Convolution)
        .collect();
    if convs.is_empty() {
        return Err(PruneError::NoConvolutions);
    }
    let ce = DistillConfig { mode: DistillMode::HardOnly, ..Default::default() };
    let mut sums: HashMap<usize, Vec<f64>> =
        convs.iter().map(|&i| (i, vec![0.0; arch.layers[i].out_channels])).collect();
    let mut grad = vec![0f32; model.num_parameters()];
    for e in 0..split.len() {
        let cache = model.forward_train(&split.image(e));
        let logits: Vec<f64> = cache.logits().iter().map(|&v| v as f64).collect();
        let (_, dl) = kd_loss_and_grad(&logits, &[], split.label(e), &ce)?;
        let dl: Vec<f32> = dl.iter().map(|&v| v as f32).collect();
        model.backward_with(&cache, &dl, &mut grad, |layer, act, dact| {
            let s = sums.get_mut(&layer).expect("conv layer");
            let hw = act.len() / s.len();
            for (f, acc) in s.iter_mut().enumerate() {
                let r = f * hw..(f + 1) * hw;
                let m: f64 = act[r.clone()].iter().zip(&dact[r]).map(|(&a, &d)| a as f64 * d as f64).sum::<f64>() / hw as f64;
                *acc += m.abs();
            }
        });
    }
    let n = split.len() as f64;
    let mut ranks = Vec::new();
    for &layer in &convs {
        let scores: Vec<f64> = sums[&layer].iter().map(|s| s / n).collect();
        let norm = scores.iter().map(|s| s * s).sum::<f64>().sqrt();
        for (filter_index, s) in scores.iter().enumerate() {
            ranks.push(FilterRank {
                layer_index: layer,
                filter_index,
                score: if norm > 0.0 { s / norm } else { 0.0 },
            });
        }
    }
    ranks.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer_index.cmp(&b.layer_index))
            .then(a.filter_index.cmp(&b.filter_index))
    });
    Ok(ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFilter {
    pub layer_index: usize,
    pub filter_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub model: Model,
    pub removed: Vec<(usize, usize)>,
    pub skipped: Vec<SkippedFilter>,
}

impl PruneResult {
    pub fn arch(&self) -> &ArchitectureSpec {
        self.model.arch()
    }
}

/// Copies `src` viewed as `[rows, cols, inner]`, keeping the listed rows and
/// columns.
fn copy_selected(src: &[f32], cols_total: usize, inner: usize, rows: &[usize], cols: &[usize], dst: &mut [f32]) {
    let mut o = 0;
    for &r in rows {
        for &c in cols {
            let s = (r * cols_total + c) * inner;
            dst[o..o + inner].copy_from_slice(&src[s..s + inner]);
            o += inner;
        }
    }
}

/// Removes the `count` lowest-ranked prunable filters, never emptying a
/// layer, and rebuilds downstream input channels.
pub fn prune_filters(model: &Model, ranks: &[FilterRank], count: usize) -> Result<PruneResult, PruneError> {
    let arch = model.arch();
    let trace = arch.trace().map_err(ArchError::Invalid)?;
    let mut removed: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut skipped = Vec::new();
    let mut taken = Vec::new();
    for r in ranks {
        if taken.len() == count {
            break;
        }
        let layer = r.layer_index;
        if layer >= arch.layers.len() || r.filter_index >= arch.layers[layer].out_channels {
            continue;
        }
        if !is_prunable(arch, layer) {
            continue;
        }
        let set = removed.entry(layer).or_default();
        if set.contains(&r.filter_index) {
            continue;
        }
        if set.len() + 1 >= arch.layers[layer].out_channels {
            skipped.push(SkippedFilter {
                layer_index: layer,
                filter_index: r.filter_index,
                reason: "last remaining filter".into(),
            });
            continue;
        }
        set.insert(r.filter_index);
        taken.push((layer, r.filter_index));
    }
    if taken.len() < count {
        return Err(PruneError::Budget { requested: count, available: taken.len() });
    }
    if count == 0 {
        return Ok(PruneResult { model: model.clone(), removed: taken, skipped });
    }

    let mut layers = arch.layers.clone();
    let mut kept_rows: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut kept_cols: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&layer, set) in &removed {
        if set.is_empty() {
            continue;
        }
        let n = arch.layers[layer].out_channels;
        let keep: Vec<usize> = (0..n).filter(|f| !set.contains(f)).collect();
        layers[layer].out_channels = keep.len();
        let consumer = consumer_of(arch, layer).expect("validated architecture ends in a classifier");
        let cols = if arch.layers[consumer].kind == LayerKind::Linear {
            let flatten = (layer + 1..consumer)
                .find(|&j| arch.layers[j].kind == LayerKind::Flatten)
                .expect("flatten before classifier");
            let Shape::Spatial { h, w, .. } = trace.inputs[flatten] else {
                unreachable!("validated flatten input")
            };
            let flatten_input = h * w;
            keep.iter().flat_map(|&c| c * flatten_input..(c + 1) * flatten_input).collect()
        } else {
            keep.clone()
        };
        kept_rows.insert(layer, keep);
        kept_cols.insert(consumer, cols);
    }
    let new_arch = ArchitectureSpec::new(layers, arch.input_shape, arch.num_classes, arch.family);
    let mut pruned = Model::zeros(&new_arch)?;
    for slot in pruned.slots().to_vec() {
        let src_slot = model.slot(&slot.name).expect("same layer indices");
        let src = &model.params[src_slot.range.clone()];
        let layer: usize = slot.name["layer".len()..slot.name.find('.').expect("dotted name")]
            .parse()
            .expect("numeric layer");
        let is_shortcut = slot.name.contains("shortcut");
        let rows_total = src_slot.shape[0];
        let rows: Vec<usize> = match kept_rows.get(&layer) {
            Some(r) if !is_shortcut => r.clone(),
            _ => (0..rows_total).collect(),
        };
        let dst = &mut pruned.params[slot.range.clone()];
        if slot.name.ends_with(".bias") {
            for (d, &r) in dst.iter_mut().zip(&rows) {
                *d = src[r];
            }
            continue;
        }
        let cols_total = src_slot.shape[1];
        let inner: usize = src_slot.shape[2..].iter().product();
        let cols: Vec<usize> = match kept_cols.get(&layer) {
            Some(c) if !is_shortcut => c.clone(),
            _ => (0..cols_total).collect(),
        };
        copy_selected(src, cols_total, inner, &rows, &cols, dst);
    }
    Ok(PruneResult { model: pruned, removed: taken, skipped })
}

/// One row of `prune/rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRound {
    pub round: usize,
    pub filters_removed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedFilter>,
    #[serde(flatten)]
    pub record: EvaluationRecord,
}

#[derive(Debug, Clone)]
pub struct PruneSettings {
    pub rounds: usize,
    pub filters_per_round: usize,
    /// Examples from the front of the training split used for ranking.
    pub ranking_examples: usize,
    pub finetune: DistillConfig,
    pub latency: LatencySettings,
    pub thresholds: Thresholds,
    pub seed: u64,
}

fn evaluate(
    model: &Model,
    test: &Dataset,
    settings: &PruneSettings,
    reference: &TeacherReference,
    loss_curve: Vec<f64>,
    epochs: usize,
) -> Result<EvaluationRecord, PruneError> {
    let accuracy = evaluate_accuracy(model, test)?;
    let lat = measure_latency(model, model.input_len(), settings.latency)?;
    let outcome = StudentOutcome {
        accuracy,
        latency: lat.median_seconds,
        parameters: count_parameters(model.arch())? as u64,
        train_epochs: epochs,
        loss_curve,
        latency_measurement: Some(lat),
        model: None,
    };
    let actions = ActionVector::all_keep(model.arch().removable_count());
    Ok(EvaluationRecord::scored(actions, &outcome, reference, &settings.thresholds)?)
}

/// Repeated rank → prune → fine-tune. The first entry is the unpruned
/// teacher; rows are appended to `<run_dir>/prune/rounds.jsonl` when given.
pub fn prune_baseline(
    teacher: &Model,
    reference: &TeacherReference,
    train: &Dataset,
    test: &Dataset,
    settings: &PruneSettings,
    run_dir: Option<&Path>,
) -> Result<(Vec<PruneRound>, Model), PruneError> {
    let log_path = match run_dir {
        Some(dir) => {
            let p = dir.join("prune");
            fs::create_dir_all(&p).map_err(|e| PruneError::Io { path: p.display().to_string(), reason: e.to_string() })?;
            let f = p.join("rounds.jsonl");
            fs::write(&f, b"").map_err(|e| PruneError::Io { path: f.display().to_string(), reason: e.to_string() })?;
            Some(f)
        }
        None => None,
    };
    let append = |row: &PruneRound| -> Result<(), PruneError> {
        if let Some(path) = &log_path {
            let err = |e: String| PruneError::Io { path: path.display().to_string(), reason: e };
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| err(e.to_string()))?;
            let line = serde_json::to_string(row).map_err(|e| err(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    };
    let ranking = train.take_per_class(settings.ranking_examples.div_ceil(train.num_classes().max(1)));
    let mut rows = Vec::with_capacity(settings.rounds + 1);
    let first = PruneRound {
        round: 0,
        filters_removed: 0,
        skipped: Vec::new(),
        record: evaluate(teacher, test, settings, reference, Vec::new(), 0)?,
    };
    append(&first)?;
    rows.push(first);
    let mut model = teacher.clone();
    for round in 1..=settings.rounds {
        let ranks = rank_filters(&model, &ranking)?;
        let pruned = prune_filters(&model, &ranks, settings.filters_per_round)?;
        model = pruned.model;
        let curve = train_model(&mut model, None, train, &settings.finetune, settings.seed.wrapping_add(round as u64))?;
        let row = PruneRound {
            round,
            filters_removed: pruned.removed.len(),
            skipped: pruned.skipped,
            record: evaluate(&model, test, settings, reference, curve, settings.finetune.epochs)?,
        };
        log::info!(
            "prune round {round}: {} parameters, accuracy {:.4}",
            row.record.parameters,
            row.record.accuracy
        );
        append(&row)?;
        rows.push(row);
    }
    Ok((rows, model))
}

/// Stage-2 reduction of a searched model: repeated rank and prune without
/// the evaluation bookkeeping, fine-tuning after each round.
pub fn reduce_filters(
    model: &Model,
    train: &Dataset,
    total: usize,
    per_round: usize,
    finetune: &DistillConfig,
    seed: u64,
) -> Result<Model, PruneError> {
    let ranking = train.take_per_class(64);
    let mut model = model.clone();
    let mut left = total;
    let mut round = 0u64;
    while left > 0 {
        let step = left.min(per_round.max(1));
        let ranks = rank_filters(&model, &ranking)?;
        model = prune_filters(&model, &ranks, step)?.model;
        train_model(&mut model, None, train, finetune, seed.wrapping_add(round))?;
        left -= step;
        round += 1;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin, Family, InputShape, LayerDescriptor as L};
    use crate::data::{load_split, synth, BaseDataset, Split, SubsetSpec};

    fn tiny() -> ArchitectureSpec {
        ArchitectureSpec::new(
            vec![L::conv3(16), L::conv3(16), L::pool(2, 2), L::flatten(), L::linear(3)],
            InputShape { channels: 3, height: 8, width: 8 },
            3,
            Family::Sequential,
        )
    }

    #[test]
    fn parameter_delta_oracle() {
        let m = Model::new(&tiny(), 1).unwrap();
        let ranks = vec![FilterRank { layer_index: 0, filter_index: 5, score: 0.0 }];
        let p = prune_filters(&m, &ranks, 1).unwrap();
        assert_eq!(p.arch().layers[0].out_channels, 15);
        let before = count_parameters(&tiny()).unwrap();
        let after = count_parameters(p.arch()).unwrap();
        // k²·c_in + 1 for the filter, k²·n for the downstream input channel.
        assert_eq!(before - after, 9 * 3 + 1 + 9 * 16);
        assert_eq!(after, p.model.num_parameters());
    }

    #[test]
    fn pruning_preserves_function_of_dead_filter() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        // Filter 3 of layer 1 feeds nothing.
        let w = m.slot("layer4.weight").unwrap().clone();
        let hw = 16;
        for o in 0..3 {
            for j in 3 * hw..4 * hw {
                m.params[w.range.start + o * 16 * hw + j] = 0.0;
            }
        }
        let x: Vec<f32> = (0..192).map(|i| ((i * 37) % 17) as f32 / 17.0 - 0.5).collect();
        let ranks = vec![FilterRank { layer_index: 1, filter_index: 3, score: 0.0 }];
        let p = prune_filters(&m, &ranks, 1).unwrap();
        let a = m.forward(&x);
        let b = p.model.forward(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn count_zero_and_layer_floor() {
        let m = Model::new(&tiny(), 1).unwrap();
        let p = prune_filters(&m, &[], 0).unwrap();
        assert_eq!(p.model.params, m.params);
        let ranks: Vec<FilterRank> = (0..16)
            .map(|f| FilterRank { layer_index: 0, filter_index: f, score: f as f64 })
            .chain((0..2).map(|f| FilterRank { layer_index: 1, filter_index: f, score: 100.0 }))
            .collect();
        let p = prune_filters(&m, &ranks, 16).unwrap();
        assert_eq!(p.arch().layers[0].out_channels, 1);
        assert_eq!(p.arch().layers[1].out_channels, 15);
        assert_eq!(p.skipped.len(), 1);
        assert!(prune_filters(&m, &ranks, 18).is_err());
    }

    #[test]
    fn residual_rules() {
        let arch = builtin::desk_residual(2);
        // Stem feeds an identity block; block ends carry the shortcut.
        assert!(!is_prunable(&arch, 0));
        assert!(is_prunable(&arch, 2));
        assert!(!is_prunable(&arch, 3));
        assert!(is_prunable(&arch, 4));
        assert!(!is_prunable(&arch, 5));
        assert_eq!(prunable_filter_count(&arch), 15 + 23);
        let m = Model::new(&arch, 3).unwrap();
        let ranks: Vec<FilterRank> = [0, 2, 3, 4, 5]
            .iter()
            .flat_map(|&l| (0..2).map(move |f| FilterRank { layer_index: l, filter_index: f, score: 0.0 }))
            .collect();
        let p = prune_filters(&m, &ranks, 4).unwrap();
        assert_eq!(p.arch().layers[2].out_channels, 14);
        assert_eq!(p.arch().layers[4].out_channels, 22);
        assert_eq!(count_parameters(p.arch()).unwrap(), p.model.num_parameters());
        let y = p.model.forward(&vec![0.1; 3072]);
        assert_eq!(y.len(), 2);
    }

    #[test]
    fn ranking_is_deterministic_and_dead_filters_rank_first() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_dataset(BaseDataset::Cifar10, dir.path(), 3, 1, 9).unwrap();
        let data = load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Train, dir.path()).unwrap();
        let mut m = Model::new(&builtin::desk(10), 4).unwrap();
        let w = m.slot("layer5.weight").unwrap().clone();
        // Zero every outgoing weight of layer 4's filter 7.
        for o in 0..64 {
            for k in 0..9 {
                m.params[w.range.start + (o * 32 + 7) * 9 + k] = 0.0;
            }
        }
        let a = rank_filters(&m, &data).unwrap();
        let b = rank_filters(&m, &data).unwrap();
        assert_eq!(a, b);
        let dead = a.iter().position(|r| r.layer_index == 4 && r.filter_index == 7).unwrap();
        assert_eq!(a[dead].score, 0.0);
        assert!(a[..dead].iter().all(|r| r.score == 0.0));
        for w in a.windows(2) {
            assert!(w[0].score <= w[1].score);
        }
        let per_layer: f64 = a.iter().filter(|r| r.layer_index == 0).map(|r| r.score * r.score).sum();
        assert!((per_layer - 1.0).abs() < 1e-9 || per_layer == 0.0);
    }
}
