//! Layer-descriptor representation of teacher and student networks.
//!
//! An [`ArchitectureSpec`] is a flat, ordered list of [`LayerDescriptor`]s.
//! Convolutions carry a fused bias and ReLU; there are no separate
//! normalization or activation descriptors. Residual blocks are spans of
//! convolutions delimited by `skip_start` / `skip_end`. The shortcut of a
//! block is implicit: identity when the block preserves shape, otherwise a
//! 1×1 strided projection whose parameters are counted with the block.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("action vector has {got} entries but the teacher has {expected} removable layers")]
    ActionLength { expected: usize, got: usize },
    #[error("every convolution layer was removed")]
    AllRemoved,
    #[error("invalid architecture: {0}")]
    Invalid(ValidationReport),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed architecture document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown builtin architecture {0:?}")]
    UnknownBuiltin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Convolution,
    Pooling,
    Linear,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sequential,
    Residual,
}

/// One layer: `(t, k, s, p, n, skip_start, skip_end)` plus its kind and
/// whether the policy may remove it.
///
/// Pooling layers are max pooling. Pooling and flatten layers pass channels
/// through and carry `out_channels = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub index: usize,
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub skip_start: bool,
    pub skip_end: bool,
    pub removable: bool,
}

impl LayerDescriptor {
    pub fn conv(out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        LayerDescriptor {
            index: 0,
            kind: LayerKind::Convolution,
            kernel_size,
            stride,
            padding,
            out_channels,
            skip_start: false,
            skip_end: false,
            removable: true,
        }
    }

    /// 3×3, stride 1, padding 1 convolution.
    pub fn conv3(out_channels: usize) -> Self {
        Self::conv(out_channels, 3, 1, 1)
    }

    pub fn pool(kernel_size: usize, stride: usize) -> Self {
        LayerDescriptor {
            index: 0,
            kind: LayerKind::Pooling,
            kernel_size,
            stride,
            padding: 0,
            out_channels: 0,
            skip_start: false,
            skip_end: false,
            removable: false,
        }
    }

    pub fn flatten() -> Self {
        LayerDescriptor {
            index: 0,
            kind: LayerKind::Flatten,
            kernel_size: 0,
            stride: 0,
            padding: 0,
            out_channels: 0,
            skip_start: false,
            skip_end: false,
            removable: false,
        }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerDescriptor {
            index: 0,
            kind: LayerKind::Linear,
            kernel_size: 0,
            stride: 0,
            padding: 0,
            out_channels: out_features,
            skip_start: false,
            skip_end: false,
            removable: false,
        }
    }

    pub fn with_skip(mut self, start: bool, end: bool) -> Self {
        self.skip_start = start;
        self.skip_end = end;
        self
    }

    pub fn fixed(mut self) -> Self {
        self.removable = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const CIFAR: InputShape = InputShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    pub fn volume(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerDescriptor>,
    pub input_shape: InputShape,
    pub num_classes: usize,
    pub family: Family,
}

/// Binary keep (true) / remove (false) decisions, one per removable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub Vec<bool>);

impl ActionVector {
    pub fn all_keep(len: usize) -> Self {
        ActionVector(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }
}

impl fmt::Display for ActionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &a in &self.0 {
            f.write_str(if a { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }
}

/// Residual block span `[start, end]` (inclusive layer positions) and the
/// shortcut it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub projection: Option<Projection>,
}

/// 1×1 strided shortcut projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Projection {
    pub fn parameters(&self) -> usize {
        self.in_channels * self.out_channels + self.out_channels
    }
}

/// Per-layer shapes resolved by walking the network once.
#[derive(Debug, Clone)]
pub struct ShapeTrace {
    pub inputs: Vec<Shape>,
    pub outputs: Vec<Shape>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "pass")
        } else {
            write!(f, "fail: {}", self.violations.join("; "))
        }
    }
}

pub const V_NUM_CLASSES: &str = "num_classes ≥ 2";
pub const V_ONE_CONV: &str = "at least one convolution";
pub const V_FINAL_LINEAR: &str = "exactly one final linear layer with out_channels = num_classes";
pub const V_CONV_FIELDS: &str = "convolution kernel_size, stride ≥ 1 and out_channels ≥ 1";
pub const V_POOL_FIELDS: &str = "pooling kernel_size, stride ≥ 1";
pub const V_REMOVABLE: &str = "removable only for convolution layers";
pub const V_SKIP_FAMILY: &str = "skip flags only in the residual family";
pub const V_SKIP_MATCH: &str =
    "every skip_start has a matching later skip_end within the same residual block";
pub const V_SPATIAL: &str = "spatial dimensions ≥ 1";
pub const V_ORDER: &str = "spatial layers precede flatten, linear layers follow it";
pub const V_INDEX: &str = "layer index equals its position";
pub const V_SHORTCUT: &str = "residual shortcut shape matches block output";

fn spatial_out(size: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = size + 2 * p;
    if s == 0 || padded < k {
        return None;
    }
    let out = (padded - k) / s + 1;
    (out >= 1).then_some(out)
}

impl ArchitectureSpec {
    /// Builds a spec, renumbering layer indices to positions.
    pub fn new(
        mut layers: Vec<LayerDescriptor>,
        input_shape: InputShape,
        num_classes: usize,
        family: Family,
    ) -> Self {
        for (i, l) in layers.iter_mut().enumerate() {
            l.index = i;
        }
        ArchitectureSpec {
            layers,
            input_shape,
            num_classes,
            family,
        }
    }

    pub fn removable_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.removable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn removable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.removable).count()
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Convolution)
            .count()
    }

    /// Same network with a different classifier width.
    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        let mut out = self.clone();
        if let Some(last) = out
            .layers
            .iter_mut()
            .rev()
            .find(|l| l.kind == LayerKind::Linear)
        {
            last.out_channels = num_classes;
        }
        out.num_classes = num_classes;
        out
    }

    /// Walks the network, resolving every layer's input and output shape.
    /// Fails with the list of violated invariants.
    pub fn trace(&self) -> Result<ShapeTrace, ValidationReport> {
        let mut v: Vec<&'static str> = Vec::new();
        let push = |v: &mut Vec<&'static str>, msg: &'static str| {
            if !v.contains(&msg) {
                v.push(msg);
            }
        };

        if self.num_classes < 2 {
            push(&mut v, V_NUM_CLASSES);
        }
        if self.conv_count() == 0 {
            push(&mut v, V_ONE_CONV);
        }
        let linear_positions: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Linear)
            .map(|(i, _)| i)
            .collect();
        match self.layers.last() {
            Some(last)
                if last.kind == LayerKind::Linear && last.out_channels == self.num_classes => {}
            _ => push(&mut v, V_FINAL_LINEAR),
        }
        if linear_positions.is_empty() {
            push(&mut v, V_FINAL_LINEAR);
        }

        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                push(&mut v, V_INDEX);
            }
            match l.kind {
                LayerKind::Convolution => {
                    if l.kernel_size == 0 || l.stride == 0 || l.out_channels == 0 {
                        push(&mut v, V_CONV_FIELDS);
                    }
                }
                LayerKind::Pooling => {
                    if l.kernel_size == 0 || l.stride == 0 {
                        push(&mut v, V_POOL_FIELDS);
                    }
                }
                LayerKind::Linear => {
                    if l.out_channels == 0 {
                        push(&mut v, V_FINAL_LINEAR);
                    }
                }
                LayerKind::Flatten => {}
            }
            if l.removable && l.kind != LayerKind::Convolution {
                push(&mut v, V_REMOVABLE);
            }
            if (l.skip_start || l.skip_end) && self.family != Family::Residual {
                push(&mut v, V_SKIP_FAMILY);
            }
            if (l.skip_start || l.skip_end) && l.kind != LayerKind::Convolution {
                push(&mut v, V_SKIP_MATCH);
            }
        }

        // Block structure: non-nested spans of convolutions.
        let mut blocks = Vec::new();
        let mut open: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.skip_start {
                if open.is_some() {
                    push(&mut v, V_SKIP_MATCH);
                }
                open = Some(i);
            }
            if open.is_some() && l.kind != LayerKind::Convolution {
                push(&mut v, V_SKIP_MATCH);
                open = None;
            }
            if l.skip_end {
                match open.take() {
                    Some(start) => blocks.push((start, i)),
                    None => push(&mut v, V_SKIP_MATCH),
                }
            }
        }
        if open.is_some() {
            push(&mut v, V_SKIP_MATCH);
        }

        // Shape walk.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut shape = Shape::Spatial {
            c: self.input_shape.channels,
            h: self.input_shape.height,
            w: self.input_shape.width,
        };
        if self.input_shape.volume() == 0 {
            push(&mut v, V_SPATIAL);
        }
        let mut shape_ok = true;
        for l in &self.layers {
            inputs.push(shape);
            if shape_ok {
                let next = match (l.kind, shape) {
                    (LayerKind::Convolution, Shape::Spatial { h, w, .. }) => {
                        match (
                            spatial_out(h, l.kernel_size, l.stride, l.padding),
                            spatial_out(w, l.kernel_size, l.stride, l.padding),
                        ) {
                            (Some(h), Some(w)) => Some(Shape::Spatial {
                                c: l.out_channels,
                                h,
                                w,
                            }),
                            _ => {
                                push(&mut v, V_SPATIAL);
                                None
                            }
                        }
                    }
                    (LayerKind::Pooling, Shape::Spatial { c, h, w }) => {
                        match (
                            spatial_out(h, l.kernel_size, l.stride, l.padding),
                            spatial_out(w, l.kernel_size, l.stride, l.padding),
                        ) {
                            (Some(h), Some(w)) => Some(Shape::Spatial { c, h, w }),
                            _ => {
                                push(&mut v, V_SPATIAL);
                                None
                            }
                        }
                    }
                    (LayerKind::Flatten, Shape::Spatial { .. }) => Some(Shape::Flat(shape.len())),
                    (LayerKind::Linear, Shape::Flat(_)) => Some(Shape::Flat(l.out_channels)),
                    _ => {
                        push(&mut v, V_ORDER);
                        None
                    }
                };
                match next {
                    Some(s) => shape = s,
                    None => shape_ok = false,
                }
            }
            outputs.push(shape);
        }

        let mut resolved = Vec::with_capacity(blocks.len());
        if shape_ok {
            for &(start, end) in &blocks {
                let (cin, hin, win) = match inputs[start] {
                    Shape::Spatial { c, h, w } => (c, h, w),
                    Shape::Flat(_) => continue,
                };
                let (cout, hout, wout) = match outputs[end] {
                    Shape::Spatial { c, h, w } => (c, h, w),
                    Shape::Flat(_) => continue,
                };
                let stride: usize = self.layers[start..=end].iter().map(|l| l.stride).product();
                let projection = if cin == cout && hin == hout && win == wout && stride == 1 {
                    None
                } else {
                    if spatial_out(hin, 1, stride, 0) != Some(hout)
                        || spatial_out(win, 1, stride, 0) != Some(wout)
                    {
                        push(&mut v, V_SHORTCUT);
                    }
                    Some(Projection {
                        in_channels: cin,
                        out_channels: cout,
                        stride,
                    })
                };
                resolved.push(Block {
                    start,
                    end,
                    projection,
                });
            }
        }

        if v.is_empty() {
            Ok(ShapeTrace {
                inputs,
                outputs,
                blocks: resolved,
            })
        } else {
            Err(ValidationReport {
                violations: v.into_iter().map(String::from).collect(),
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchError> {
        std::fs::write(path, self.to_json()).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Checks the architecture invariants; never fails, returns a report.
pub fn validate(arch: &ArchitectureSpec) -> ValidationReport {
    match arch.trace() {
        Ok(_) => ValidationReport { violations: vec![] },
        Err(report) => report,
    }
}

/// Total trainable parameters: conv `k·k·c_in·n + n`, linear `in·out + out`,
/// plus shortcut projections `c_in·c_out + c_out`.
pub fn count_parameters(arch: &ArchitectureSpec) -> Result<usize, ArchError> {
    let trace = arch.trace().map_err(ArchError::Invalid)?;
    Ok(count_with_trace(arch, &trace))
}

pub(crate) fn count_with_trace(arch: &ArchitectureSpec, trace: &ShapeTrace) -> usize {
    let mut total = 0;
    for (l, input) in arch.layers.iter().zip(&trace.inputs) {
        total += match l.kind {
            LayerKind::Convolution => {
                l.kernel_size * l.kernel_size * input.channels() * l.out_channels + l.out_channels
            }
            LayerKind::Linear => input.len() * l.out_channels + l.out_channels,
            LayerKind::Pooling | LayerKind::Flatten => 0,
        };
    }
    total
        + trace
            .blocks
            .iter()
            .filter_map(|b| b.projection)
            .map(|p| p.parameters())
            .sum::<usize>()
}

/// Width of each feature vector produced by [`encode_architecture`].
pub const FEATURE_WIDTH: usize = 7;

/// One feature vector per removable layer:
/// `(t/T, k, s, p, n/n_max, skip_start, skip_end)` where `T` is the layer
/// count and `n_max` the widest convolution.
pub fn encode_architecture(arch: &ArchitectureSpec) -> Vec<Vec<f64>> {
    let total = arch.layers.len().max(1) as f64;
    let max_channels = arch
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Convolution)
        .map(|l| l.out_channels)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    arch.layers
        .iter()
        .filter(|l| l.removable)
        .map(|l| {
            vec![
                l.index as f64 / total,
                l.kernel_size as f64,
                l.stride as f64,
                l.padding as f64,
                l.out_channels as f64 / max_channels,
                if l.skip_start { 1.0 } else { 0.0 },
                if l.skip_end { 1.0 } else { 0.0 },
            ]
        })
        .collect()
}

/// Builds the student obtained by keeping the removable layers whose action
/// is `true`.
///
/// Non-removable layers always survive. Input channels of surviving layers
/// are implied by their predecessors, so they reconcile automatically. A
/// residual block whose convolutions are all removed becomes nothing when the
/// shortcut is an identity, otherwise a fixed 1×1 projection convolution.
pub fn derive_student(
    teacher: &ArchitectureSpec,
    actions: &ActionVector,
) -> Result<ArchitectureSpec, ArchError> {
    let positions = teacher.removable_positions();
    if positions.len() != actions.len() {
        return Err(ArchError::ActionLength {
            expected: positions.len(),
            got: actions.len(),
        });
    }
    let trace = teacher.trace().map_err(ArchError::Invalid)?;

    let mut keep = vec![true; teacher.layers.len()];
    for (&pos, &a) in positions.iter().zip(&actions.0) {
        keep[pos] = a;
    }
    let removed_convs = teacher
        .layers
        .iter()
        .zip(&keep)
        .filter(|(l, k)| l.kind == LayerKind::Convolution && !**k)
        .count();
    if removed_convs == teacher.conv_count() {
        return Err(ArchError::AllRemoved);
    }

    let block_at = |i: usize| trace.blocks.iter().find(|b| b.start == i);
    let mut layers = Vec::with_capacity(teacher.layers.len());
    let mut i = 0;
    while i < teacher.layers.len() {
        if let Some(block) = block_at(i) {
            let kept: Vec<usize> = (block.start..=block.end).filter(|&j| keep[j]).collect();
            if kept.is_empty() {
                if let Some(p) = block.projection {
                    layers.push(LayerDescriptor::conv(p.out_channels, 1, p.stride, 0).fixed());
                }
            } else {
                let first = kept[0];
                let last = *kept.last().unwrap();
                for &j in &kept {
                    let mut l = teacher.layers[j].clone();
                    l.skip_start = j == first;
                    l.skip_end = j == last;
                    layers.push(l);
                }
            }
            i = block.end + 1;
            continue;
        }
        if keep[i] {
            layers.push(teacher.layers[i].clone());
        }
        i += 1;
    }

    let student = ArchitectureSpec::new(
        layers,
        teacher.input_shape,
        teacher.num_classes,
        teacher.family,
    );
    if student.conv_count() == 0 {
        return Err(ArchError::AllRemoved);
    }
    student.trace().map_err(ArchError::Invalid)?;
    Ok(student)
}

/// Built-in teacher families.
pub mod builtin {
    use super::*;

    pub const NAMES: &[&str] = &["desk", "desk-residual", "vgg11", "resnet18", "kd7"];

    pub fn by_name(name: &str, num_classes: usize) -> Result<ArchitectureSpec, ArchError> {
        match name {
            "desk" => Ok(desk(num_classes)),
            "desk-residual" => Ok(desk_residual(num_classes)),
            "vgg11" => Ok(vgg11(num_classes)),
            "resnet18" => Ok(resnet18(num_classes)),
            "kd7" => Ok(kd7(num_classes)),
            other => Err(ArchError::UnknownBuiltin(other.to_string())),
        }
    }

    /// Four 3×3 convolutions (8, 16, 32, 64 filters) with three 2×2 pools.
    pub fn desk(num_classes: usize) -> ArchitectureSpec {
        use LayerDescriptor as L;
        ArchitectureSpec::new(
            vec![
                L::conv3(8),
                L::pool(2, 2),
                L::conv3(16),
                L::pool(2, 2),
                L::conv3(32),
                L::conv3(64),
                L::pool(2, 2),
                L::flatten(),
                L::linear(num_classes),
            ],
            InputShape::CIFAR,
            num_classes,
            Family::Sequential,
        )
    }

    /// Stem plus two residual blocks of two convolutions; the second block
    /// widens 16 → 24 and needs a projection shortcut.
    pub fn desk_residual(num_classes: usize) -> ArchitectureSpec {
        use LayerDescriptor as L;
        ArchitectureSpec::new(
            vec![
                L::conv3(16),
                L::pool(2, 2),
                L::conv3(16).with_skip(true, false),
                L::conv3(16).with_skip(false, true),
                L::conv(24, 3, 2, 1).with_skip(true, false),
                L::conv3(24).with_skip(false, true),
                L::pool(2, 2),
                L::flatten(),
                L::linear(num_classes),
            ],
            InputShape::CIFAR,
            num_classes,
            Family::Residual,
        )
    }

    /// VGG11 for 32×32 inputs: eight convolutions, five pools, one classifier.
    pub fn vgg11(num_classes: usize) -> ArchitectureSpec {
        use LayerDescriptor as L;
        let mut layers = Vec::new();
        for item in [
            Some(64),
            None,
            Some(128),
            None,
            Some(256),
            Some(256),
            None,
            Some(512),
            Some(512),
            None,
            Some(512),
            Some(512),
            None,
        ] {
            layers.push(match item {
                Some(n) => L::conv3(n),
                None => L::pool(2, 2),
            });
        }
        layers.push(L::flatten());
        layers.push(L::linear(num_classes));
        ArchitectureSpec::new(layers, InputShape::CIFAR, num_classes, Family::Sequential)
    }

    /// ResNet18 for 32×32 inputs. The stem is a fixed 3×3 convolution and
    /// the final 4×4 pool is max pooling.
    pub fn resnet18(num_classes: usize) -> ArchitectureSpec {
        use LayerDescriptor as L;
        let mut layers = vec![L::conv3(64)];
        for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                layers.push(L::conv(width, 3, stride, 1).with_skip(true, false));
                layers.push(L::conv3(width).with_skip(false, true));
            }
        }
        layers.push(L::pool(4, 4));
        layers.push(L::flatten());
        layers.push(L::linear(num_classes));
        ArchitectureSpec::new(layers, InputShape::CIFAR, num_classes, Family::Residual)
    }

    /// Hand-designed 7-layer VGG-style student used by the plain
    /// distillation baseline.
    pub fn kd7(num_classes: usize) -> ArchitectureSpec {
        use LayerDescriptor as L;
        ArchitectureSpec::new(
            vec![
                L::conv3(32),
                L::conv3(32),
                L::pool(2, 2),
                L::conv3(64),
                L::conv3(64),
                L::pool(2, 2),
                L::conv3(128),
                L::pool(2, 2),
                L::flatten(),
                L::linear(256),
                L::linear(num_classes),
            ],
            InputShape::CIFAR,
            num_classes,
            Family::Sequential,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LayerDescriptor as L;

    fn eight_conv() -> ArchitectureSpec {
        builtin::vgg11(10)
    }

    #[test]
    fn all_keep_is_identity() {
        for t in [
            builtin::desk(2),
            builtin::desk_residual(2),
            builtin::vgg11(10),
            builtin::resnet18(10),
        ] {
            let s = derive_student(&t, &ActionVector::all_keep(t.removable_count())).unwrap();
            assert_eq!(s, t);
        }
    }

    #[test]
    fn removing_one_conv_rewires_input_channels() {
        let t = eight_conv();
        // conv ordinals: 0:64 1:128 2:256 3:256 4:512 ...
        let mut a = ActionVector::all_keep(8);
        a.0[3] = false;
        let s = derive_student(&t, &a).unwrap();
        assert_eq!(s.conv_count(), 7);
        let convs: Vec<usize> = s
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Convolution)
            .map(|(i, _)| i)
            .collect();
        // Former conv 4 (512 filters) is now conv ordinal 3.
        let trace = s.trace().unwrap();
        assert_eq!(s.layers[convs[3]].out_channels, 512);
        assert_eq!(trace.inputs[convs[3]].channels(), 256);
        assert_eq!(s.layers[convs[2]].out_channels, 256);

        // Field-by-field expectation built by hand.
        let mut expected = t.layers.clone();
        let removed_pos = t.removable_positions()[3];
        expected.remove(removed_pos);
        for (i, l) in expected.iter_mut().enumerate() {
            l.index = i;
        }
        assert_eq!(s.layers, expected);
    }

    #[test]
    fn emptied_block_with_matching_channels_becomes_identity() {
        let t = ArchitectureSpec::new(
            vec![
                L::conv3(16),
                L::conv3(16).with_skip(true, false),
                L::conv3(16).with_skip(false, true),
                L::conv3(16).with_skip(true, false),
                L::conv3(16).with_skip(false, true),
                L::pool(2, 2),
                L::flatten(),
                L::linear(10),
            ],
            InputShape::CIFAR,
            10,
            Family::Residual,
        );
        let s = derive_student(&t, &ActionVector(vec![true, true, true, false, false])).unwrap();
        assert_eq!(s.layers.len(), t.layers.len() - 2);
        assert_eq!(s.conv_count(), 3);
        assert!(s.layers[1].skip_start && s.layers[2].skip_end);
        assert_eq!(s.layers[3].kind, LayerKind::Pooling);
    }

    #[test]
    fn emptied_block_with_mismatched_channels_gets_projection() {
        let t = builtin::desk_residual(2);
        // Remove both convs of the widening block.
        let s = derive_student(&t, &ActionVector(vec![true, true, true, false, false])).unwrap();
        let proj = &s.layers[4];
        assert_eq!(proj.kind, LayerKind::Convolution);
        assert_eq!(
            (proj.kernel_size, proj.stride, proj.padding, proj.out_channels),
            (1, 2, 0, 24)
        );
        assert!(!proj.removable);
        let before = count_parameters(&t).unwrap();
        let after = count_parameters(&s).unwrap();
        assert!(after < before);
    }

    #[test]
    fn partial_block_moves_skip_flags() {
        let t = builtin::desk_residual(2);
        let s = derive_student(&t, &ActionVector(vec![true, false, true, true, true])).unwrap();
        assert!(s.layers[2].skip_start && s.layers[2].skip_end);
        assert!(validate(&s).passed());
    }

    #[test]
    fn all_removed_is_explicit() {
        let t = builtin::desk(2);
        let err = derive_student(&t, &ActionVector(vec![false; 4])).unwrap_err();
        assert!(matches!(err, ArchError::AllRemoved));
        let err = derive_student(&t, &ActionVector(vec![true; 3])).unwrap_err();
        assert!(matches!(
            err,
            ArchError::ActionLength {
                expected: 4,
                got: 3
            }
        ));
    }

    #[test]
    fn encoding_matches_hand_evaluation() {
        let t = ArchitectureSpec::new(
            vec![
                L::conv3(64),
                L::conv3(64),
                L::conv3(128),
                L::conv3(128),
                L::conv3(256),
                L::conv3(256),
                L::conv3(512),
                L::flatten(),
            ],
            InputShape::CIFAR,
            10,
            Family::Sequential,
        );
        let enc = encode_architecture(&t);
        assert_eq!(enc.len(), 7);
        assert_eq!(enc[0], vec![0.0, 3.0, 1.0, 1.0, 0.125, 0.0, 0.0]);
        assert_eq!(enc, encode_architecture(&t.clone()));

        let r = builtin::desk_residual(2);
        let enc = encode_architecture(&r);
        assert_eq!(enc[1][FEATURE_WIDTH - 2], 1.0);
        assert_eq!(enc[1][FEATURE_WIDTH - 1], 0.0);
        assert_eq!(enc[2][FEATURE_WIDTH - 1], 1.0);
    }

    #[test]
    fn parameter_count_arithmetic() {
        let single = ArchitectureSpec::new(
            vec![L::conv3(16)],
            InputShape::CIFAR,
            2,
            Family::Sequential,
        );
        // Not a valid spec (no head), so evaluate the per-layer formula directly.
        let trace = ShapeTrace {
            inputs: vec![Shape::Spatial { c: 3, h: 32, w: 32 }],
            outputs: vec![Shape::Spatial { c: 16, h: 32, w: 32 }],
            blocks: vec![],
        };
        assert_eq!(count_with_trace(&single, &trace), 448);

        let head_only = ArchitectureSpec::new(vec![L::linear(2)], InputShape::CIFAR, 2, Family::Sequential);
        let trace = ShapeTrace {
            inputs: vec![Shape::Flat(10)],
            outputs: vec![Shape::Flat(2)],
            blocks: vec![],
        };
        assert_eq!(count_with_trace(&head_only, &trace), 22);

        // desk: 3·9·8+8, 8·9·16+16, 16·9·32+32, 32·9·64+64, 1024·2+2
        assert_eq!(
            count_parameters(&builtin::desk(2)).unwrap(),
            224 + 1168 + 4640 + 18496 + 2050
        );
    }

    #[test]
    fn validation_reports() {
        assert!(validate(&builtin::desk(2)).passed());
        assert!(validate(&builtin::resnet18(10)).passed());

        let no_conv = ArchitectureSpec::new(
            vec![L::pool(2, 2), L::flatten(), L::linear(2)],
            InputShape::CIFAR,
            2,
            Family::Sequential,
        );
        assert!(validate(&no_conv).violations.contains(&V_ONE_CONV.to_string()));

        let mut layers: Vec<_> = (0..6).map(|_| L::conv(4, 3, 2, 1)).collect();
        layers.push(L::flatten());
        layers.push(L::linear(2));
        let collapse = ArchitectureSpec::new(layers, InputShape::CIFAR, 2, Family::Sequential);
        // 32 → 16 → 8 → 4 → 2 → 1 → 1 with padding; without padding it collapses.
        assert!(validate(&collapse).passed());
        let mut layers: Vec<_> = (0..6).map(|_| L::conv(4, 3, 2, 0)).collect();
        layers.push(L::flatten());
        layers.push(L::linear(2));
        let collapse = ArchitectureSpec::new(layers, InputShape::CIFAR, 2, Family::Sequential);
        assert!(validate(&collapse).violations.contains(&V_SPATIAL.to_string()));

        let mut bad = builtin::desk(2);
        bad.layers[2].skip_start = true;
        let r = validate(&bad);
        assert!(r.violations.contains(&V_SKIP_FAMILY.to_string()));

        let mut bad = builtin::desk_residual(2);
        bad.layers[3].skip_end = false;
        assert!(validate(&bad).violations.contains(&V_SKIP_MATCH.to_string()));

        let mut bad = builtin::desk(2);
        bad.layers[1].removable = true;
        assert!(validate(&bad).violations.contains(&V_REMOVABLE.to_string()));

        let bad = builtin::desk(2).with_num_classes(3);
        assert!(validate(&bad).passed());
        let mut bad = builtin::desk(2);
        bad.num_classes = 3;
        assert!(validate(&bad).violations.contains(&V_FINAL_LINEAR.to_string()));
    }

    #[test]
    fn json_round_trip_uses_descriptor_field_names() {
        let t = builtin::desk_residual(2);
        let text = t.to_json();
        for field in [
            "\"index\"",
            "\"kind\"",
            "\"kernel_size\"",
            "\"stride\"",
            "\"padding\"",
            "\"out_channels\"",
            "\"skip_start\"",
            "\"skip_end\"",
            "\"removable\"",
        ] {
            assert!(text.contains(field), "{field}");
        }
        assert_eq!(ArchitectureSpec::from_json(&text).unwrap(), t);
    }
}
