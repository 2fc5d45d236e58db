//! Model graphs: the mini-FCN encoder/classifier/upsampler, its
//! conversion into a ConvLSTM-FCN by swapping the classifier for a
//! recurrent layer between two reshapes, and the forward pass.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convlstm::{
    convlstm_sequence, reshape_clips_to_frames, reshape_frames_to_clips, ConvLstmCell,
    ConvLstmConfig, PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, Padding};
use crate::tensor::{GraphTape, NodeId, Gradients, Tensor};

pub const CLASSIFIER_NAME: &str = "conv6";

/// Named parameter with its learning-rate group.
#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub group: String,
}

/// Ordered parameter store keyed by "layer/param" names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), Param { tensor, group: group.to_string() });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|p| p.group.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.entries.values().map(|p| p.group.clone()).collect()
    }

    pub fn to_checkpoint_entries(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.tensor.clone())).collect()
    }

    /// Restores values from checkpoint entries; every stored parameter
    /// must be present with a matching shape.
    pub fn load_checkpoint_entries(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, param) in self.entries.iter_mut() {
            let loaded = entries.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter {name}"))
            })?;
            if loaded.shape() != param.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    loaded.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor = loaded.clone();
        }
        Ok(())
    }

    /// Copies gradients from a backward pass into the parameter tensors.
    pub fn absorb_grads(&mut self, traced: &TracedParams, grads: &Gradients) -> Result<()> {
        for (name, param) in self.entries.iter_mut() {
            if let Some(&node) = traced.get(name) {
                let g = grads
                    .by_node(node)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; param.tensor.numel()]);
                param.tensor.set_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }
}

/// Node ids assigned to each named parameter during one forward pass.
pub type TracedParams = BTreeMap<String, NodeId>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    /// Bilinear upsample back to the forward input resolution.
    UpsampleToInput,
    ConvLstm,
    ReshapeToClips { t: usize },
    ReshapeToFrames,
    Softmax,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub lr_group: String,
}

/// Architecture knobs; `table1-fullscale.json` carries the paper-scale
/// values, the defaults are the desk-scale mini-FCN.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width; also the height unless `input_height` is given.
    pub input_size: usize,
    /// Height for non-square inputs (zoomed-in region models).
    #[serde(default)]
    pub input_height: Option<usize>,
    pub classes: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_conv1_kernel")]
    pub conv1_kernel: usize,
    #[serde(default = "default_pool_kernel")]
    pub pool_kernel: usize,
    #[serde(default)]
    pub notes: Option<String>,
}

fn default_base_width() -> usize {
    8
}
fn default_in_channels() -> usize {
    3
}
fn default_conv1_kernel() -> usize {
    3
}
fn default_pool_kernel() -> usize {
    2
}

impl ModelConfig {
    pub fn mini(input_size: usize, classes: usize) -> Self {
        ModelConfig {
            input_size,
            input_height: None,
            classes,
            base_width: default_base_width(),
            in_channels: default_in_channels(),
            conv1_kernel: default_conv1_kernel(),
            pool_kernel: default_pool_kernel(),
            notes: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `(width, height)` of the expected input.
    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_size, self.input_height.unwrap_or(self.input_size))
    }
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub store: ParamStore,
    pub classes: usize,
    /// Configured input extent as (width, height).
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    /// Present once the classifier has been swapped for a ConvLSTM.
    pub convlstm: Option<ConvLstmConfig>,
    pub clip_t: Option<usize>,
}

fn conv_param_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Encoder that downsamples by 16 (strided convs plus one max-pool),
/// dilation-2 final stage at unchanged resolution, a 1x1 classifier to C
/// channels, and a bilinear upsample back to the input size.
pub fn build_mini_fcn(cfg: &ModelConfig, seed: u64) -> Result<ModelGraph> {
    let (in_w, in_h) = cfg.input_hw();
    if in_w == 0 || in_w % 16 != 0 || in_h == 0 || in_h % 16 != 0 {
        return Err(Error::Config(format!(
            "input size {in_w}x{in_h} must be positive multiples of 16"
        )));
    }
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    let w = cfg.base_width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut store = ParamStore::new();

    let conv = |layers: &mut Vec<LayerSpec>,
                    store: &mut ParamStore,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    group: &str,
                    ic: usize,
                    oc: usize,
                    k: usize,
                    stride: usize,
                    dilation: usize| {
        layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv {
                in_channels: ic,
                out_channels: oc,
                kernel: k,
                stride,
                dilation,
                padding: Padding::Same,
            },
            lr_group: group.to_string(),
        });
        store.insert(&format!("{name}/weight"), group, conv_param_init(&[oc, ic, k, k], rng));
        store.insert(&format!("{name}/bias"), group, Tensor::zeros(vec![oc]));
        layers.push(LayerSpec {
            name: format!("{name}_relu"),
            kind: LayerKind::Relu,
            lr_group: group.to_string(),
        });
    };

    conv(&mut layers, &mut store, &mut rng, "conv1", "conv1", cfg.in_channels, w, cfg.conv1_kernel, 2, 1);
    layers.push(LayerSpec {
        name: "pool1".to_string(),
        kind: LayerKind::MaxPool { kernel: cfg.pool_kernel, stride: 2 },
        lr_group: "conv2".to_string(),
    });
    conv(&mut layers, &mut store, &mut rng, "conv2a", "conv2", w, w, 3, 1, 1);
    conv(&mut layers, &mut store, &mut rng, "conv2b", "conv2", w, w, 3, 1, 1);
    conv(&mut layers, &mut store, &mut rng, "conv3a", "conv3", w, 2 * w, 3, 2, 1);
    conv(&mut layers, &mut store, &mut rng, "conv3b", "conv3", 2 * w, 2 * w, 3, 1, 1);
    conv(&mut layers, &mut store, &mut rng, "conv4a", "conv4", 2 * w, 4 * w, 3, 2, 1);
    conv(&mut layers, &mut store, &mut rng, "conv4b", "conv4", 4 * w, 4 * w, 3, 1, 1);
    conv(&mut layers, &mut store, &mut rng, "conv5a", "conv5", 4 * w, 8 * w, 3, 1, 2);
    conv(&mut layers, &mut store, &mut rng, "conv5b", "conv5", 8 * w, 8 * w, 3, 1, 2);

    layers.push(LayerSpec {
        name: CLASSIFIER_NAME.to_string(),
        kind: LayerKind::Conv {
            in_channels: 8 * w,
            out_channels: cfg.classes,
            kernel: 1,
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        },
        lr_group: CLASSIFIER_NAME.to_string(),
    });
    store.insert(
        &format!("{CLASSIFIER_NAME}/weight"),
        CLASSIFIER_NAME,
        conv_param_init(&[cfg.classes, 8 * w, 1, 1], &mut rng),
    );
    store.insert(&format!("{CLASSIFIER_NAME}/bias"), CLASSIFIER_NAME, Tensor::zeros(vec![cfg.classes]));

    layers.push(LayerSpec {
        name: "upsample".to_string(),
        kind: LayerKind::UpsampleToInput,
        lr_group: "upsample".to_string(),
    });

    Ok(ModelGraph {
        layers,
        store,
        classes: cfg.classes,
        input_hw: cfg.input_hw(),
        in_channels: cfg.in_channels,
        convlstm: None,
        clip_t: None,
    })
}

/// Spatial extent (one axis) entering the classifier layer.
fn spatial_at_classifier(layers: &[LayerSpec], input_len: usize) -> usize {
    let mut size = input_len;
    for layer in layers {
        match &layer.kind {
            LayerKind::Conv { stride, .. } => {
                if layer.name == CLASSIFIER_NAME {
                    return size;
                }
                size = size.div_ceil(*stride);
            }
            LayerKind::MaxPool { kernel, stride } => {
                size = (size - kernel) / stride + 1;
            }
            _ => {}
        }
    }
    size
}

/// Feature-map extent the classifier sees, as (width, height).
pub fn classifier_map_size(model: &ModelGraph) -> (usize, usize) {
    (
        spatial_at_classifier(&model.layers, model.input_hw.0),
        spatial_at_classifier(&model.layers, model.input_hw.1),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct ConvertOptions {
    pub t: usize,
    pub peephole: bool,
    /// Warm-start the cell from the old classifier: candidate path
    /// (`W_xc`, `b_c`) copies the conv kernel/bias scaled by `warm_scale`,
    /// every other kernel and peephole starts at zero, and the gate biases
    /// start open, so the converted model initially reproduces the
    /// classifier's argmax and only then learns temporal structure.
    pub seed_from_classifier: bool,
    /// Scale on the copied classifier weights; see [`DEFAULT_WARM_SCALE`].
    pub warm_scale: f64,
    pub seed: u64,
}

impl ConvertOptions {
    pub fn new(t: usize) -> Self {
        ConvertOptions {
            t,
            peephole: true,
            seed_from_classifier: true,
            warm_scale: DEFAULT_WARM_SCALE,
            seed: 0,
        }
    }
}

/// Initial gate bias of a warm-started cell; sigmoid(1) keeps the gates
/// mostly open while leaving them trainable.
pub const WARM_GATE_BIAS: f64 = 1.0;

/// Default scale on the classifier kernel/bias copied into the candidate
/// path. Small enough to keep the cell's tanh out of deep saturation (so
/// the warm-started model upsamples a faithful, lightly time-smoothed
/// copy of the classifier scores), large enough that the copied structure
/// is not erased by the optimizer's scale-free first steps.
pub const DEFAULT_WARM_SCALE: f64 = 0.02;

/// Swaps the classifier for reshape -> ConvLSTM -> reshape with identical
/// convolutional filter geometry (1x1, C hidden channels). Every other
/// parameter is copied verbatim.
pub fn convert_to_convlstm_fcn(model: &ModelGraph, opts: &ConvertOptions) -> Result<ModelGraph> {
    if opts.t == 0 {
        return Err(Error::arg("convert_to_convlstm_fcn", "T must be >= 1".to_string()));
    }
    let idx = model
        .layers
        .iter()
        .position(|l| l.name == CLASSIFIER_NAME)
        .ok_or_else(|| {
            Error::arg(
                "convert_to_convlstm_fcn",
                format!("model has no classifier layer named {CLASSIFIER_NAME}"),
            )
        })?;
    let (in_channels, kernel) = match &model.layers[idx].kind {
        LayerKind::Conv { in_channels, kernel, .. } => (*in_channels, *kernel),
        other => {
            return Err(Error::arg(
                "convert_to_convlstm_fcn",
                format!("classifier layer has kind {other:?}, expected a convolution"),
            ))
        }
    };
    let (map_w, map_h) = classifier_map_size(model);
    let cell_cfg = ConvLstmConfig {
        in_channels,
        hidden_channels: model.classes,
        kernel: (kernel, kernel),
        spatial: (map_h, map_w),
        peephole: opts.peephole,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cell = if opts.seed_from_classifier {
        let w = model
            .store
            .get(&format!("{CLASSIFIER_NAME}/weight"))
            .ok_or_else(|| Error::arg("convert_to_convlstm_fcn", "classifier weight missing".to_string()))?;
        let b = model
            .store
            .get(&format!("{CLASSIFIER_NAME}/bias"))
            .ok_or_else(|| Error::arg("convert_to_convlstm_fcn", "classifier bias missing".to_string()))?;
        let mut cell = ConvLstmCell::zeros(cell_cfg.clone());
        cell.w_xc = Tensor::new(w.shape().to_vec(), w.data().iter().map(|v| v * opts.warm_scale).collect())?;
        cell.b_c = Tensor::new(b.shape().to_vec(), b.data().iter().map(|v| v * opts.warm_scale).collect())?;
        for name in ["b_i", "b_f", "b_o"] {
            let t = cell.param_mut(name).unwrap();
            *t = Tensor::full(t.shape().to_vec(), WARM_GATE_BIAS);
        }
        cell
    } else {
        ConvLstmCell::init(cell_cfg.clone(), &mut rng)
    };

    let mut layers = Vec::with_capacity(model.layers.len() + 2);
    layers.extend_from_slice(&model.layers[..idx]);
    layers.push(LayerSpec {
        name: "reshape1".to_string(),
        kind: LayerKind::ReshapeToClips { t: opts.t },
        lr_group: crate::optim::CONVLSTM_GROUP.to_string(),
    });
    layers.push(LayerSpec {
        name: "convlstm".to_string(),
        kind: LayerKind::ConvLstm,
        lr_group: crate::optim::CONVLSTM_GROUP.to_string(),
    });
    layers.push(LayerSpec {
        name: "reshape2".to_string(),
        kind: LayerKind::ReshapeToFrames,
        lr_group: crate::optim::CONVLSTM_GROUP.to_string(),
    });
    layers.extend_from_slice(&model.layers[idx + 1..]);

    let mut store = ParamStore::new();
    for (name, param) in model.store.iter() {
        if name.starts_with(&format!("{CLASSIFIER_NAME}/")) {
            continue;
        }
        store.insert(name, &param.group, param.tensor.clone());
    }
    for (pname, tensor) in cell.params() {
        store.insert(&format!("convlstm/{pname}"), crate::optim::CONVLSTM_GROUP, tensor.clone());
    }

    Ok(ModelGraph {
        layers,
        store,
        classes: model.classes,
        input_hw: model.input_hw,
        in_channels: model.in_channels,
        convlstm: Some(cell_cfg),
        clip_t: Some(opts.t),
    })
}

impl ModelGraph {
    pub fn has_convlstm(&self) -> bool {
        self.convlstm.is_some()
    }

    fn cell_from_store(&self, tape: &mut GraphTape, frozen: bool, traced: &mut TracedParams) -> Result<ConvLstmCell> {
        let cfg = self
            .convlstm
            .clone()
            .ok_or_else(|| Error::arg("forward", "model has no ConvLSTM layer".to_string()))?;
        let mut cell = ConvLstmCell::zeros(cfg);
        for pname in PARAM_NAMES {
            let full = format!("convlstm/{pname}");
            let stored = self
                .store
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            let tracked = tape.leaf(stored, !frozen);
            if !frozen {
                traced.insert(full, tracked.node_on(tape).unwrap());
            }
            *cell.param_mut(pname).unwrap() = tracked;
        }
        Ok(cell)
    }

    /// Runs the graph over a `[B*T, C_in, H, W]` batch, returning per-pixel
    /// class scores at input resolution plus the tape node of every
    /// non-frozen parameter.
    pub fn forward_with_frozen(
        &self,
        tape: &mut GraphTape,
        batch: &Tensor,
        frozen_groups: &BTreeSet<String>,
    ) -> Result<(Tensor, TracedParams)> {
        let (n, c, in_h, in_w) = batch.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "forward",
                format!("batch has {} channels, model expects {}", c, self.in_channels),
            ));
        }
        if let Some(t) = self.clip_t {
            if n % t != 0 {
                return Err(Error::shape(
                    "forward",
                    format!("batch of {n} frames is not divisible by the clip length T={t}"),
            ));
            }
        }
        let mut traced = TracedParams::new();
        let mut current = batch.clone();
        let mut clips: Option<crate::convlstm::SequenceTensor> = None;
        for layer in &self.layers {
            let frozen = frozen_groups.contains(&layer.lr_group);
            match &layer.kind {
                LayerKind::Conv { stride, dilation, padding, .. } => {
                    let wname = format!("{}/weight", layer.name);
                    let bname = format!("{}/bias", layer.name);
                    let weight = self
                        .store
                        .get(&wname)
                        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {wname}")))?;
                    let bias = self
                        .store
                        .get(&bname)
                        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {bname}")))?;
                    let w_t = tape.leaf(weight, !frozen);
                    let b_t = tape.leaf(bias, !frozen);
                    if !frozen {
                        traced.insert(wname, w_t.node_on(tape).unwrap());
                        traced.insert(bname, b_t.node_on(tape).unwrap());
                    }
                    current = ops::conv2d(tape, &current, &w_t, Some(&b_t), *stride, *dilation, *padding)?;
                }
                LayerKind::Relu => {
                    current = ops::relu(tape, &current);
                }
                LayerKind::MaxPool { kernel, stride } => {
                    current = ops::max_pool2d(tape, &current, *kernel, *stride)?;
                }
                LayerKind::UpsampleToInput => {
                    current = ops::bilinear_upsample(tape, &current, in_h, in_w)?;
                }
                LayerKind::ReshapeToClips { t } => {
                    clips = Some(reshape_frames_to_clips(tape, &current, *t)?);
                }
                LayerKind::ConvLstm => {
                    let seq = clips.take().ok_or_else(|| {
                        Error::arg("forward", "ConvLSTM layer without a preceding reshape".to_string())
                    })?;
                    let cell = self.cell_from_store(tape, frozen, &mut traced)?;
                    let out = convlstm_sequence(tape, &cell, &seq, None)?;
                    current = reshape_clips_to_frames(tape, &out)?;
                    // The trailing ReshapeToFrames layer is a no-op marker;
                    // the sequence is already back in frame layout.
                }
                LayerKind::ReshapeToFrames => {}
                LayerKind::Softmax => {
                    current = ops::softmax_channels(tape, &current)?;
                }
            }
        }
        Ok((current, traced))
    }

    pub fn forward(&self, tape: &mut GraphTape, batch: &Tensor) -> Result<(Tensor, TracedParams)> {
        self.forward_with_frozen(tape, batch, &BTreeSet::new())
    }

    /// Inference-only forward on a scratch tape.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = GraphTape::new();
        let all: BTreeSet<String> = self.store.groups();
        let (logits, _) = self.forward_with_frozen(&mut tape, batch, &all)?;
        Ok(logits)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_checkpoint(path, &self.store.to_checkpoint_entries())
    }

    pub fn load_params(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = crate::checkpoint::load_checkpoint(path)?;
        self.store.load_checkpoint_entries(&entries)
    }
}

/// Per-pixel argmax class maps from `[N, C, H, W]` scores; ties resolve
/// to the lowest class index.
pub fn logits_to_masks(logits: &Tensor) -> Result<Vec<crate::data::MaskFrame>> {
    let (n, c, h, w) = logits.dims4()?;
    let data = logits.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut mask = vec![0u8; hw];
        for p in 0..hw {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 0u8;
            for ch in 0..c {
                let v = data[(ni * c + ch) * hw + p];
                if v > best {
                    best = v;
                    best_c = ch as u8;
                }
            }
            mask[p] = best_c;
        }
        out.push(crate::data::MaskFrame::new(w, h, mask)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_fcn_geometry_64() {
        let model = build_mini_fcn(&ModelConfig::mini(64, 5), 1).unwrap();
        assert_eq!(classifier_map_size(&model), (4, 4));
        let x = Tensor::zeros(vec![2, 3, 64, 64]);
        let (logits, _) = model.forward(&mut GraphTape::new(), &x).unwrap();
        assert_eq!(logits.shape(), &[2, 5, 64, 64]);
    }

    #[test]
    fn fullscale_config_reaches_twenty_by_twenty() {
        let cfg = ModelConfig::from_json(include_str!("../assets/table1-fullscale.json")).unwrap();
        assert_eq!(cfg.input_size, 320);
        let model = build_mini_fcn(&cfg, 1).unwrap();
        assert_eq!(classifier_map_size(&model), (20, 20));
    }

    #[test]
    fn non_square_region_model_geometry() {
        // Zoomed-in eye model: 64x32 input, classifier map 4x2.
        let cfg = ModelConfig { input_height: Some(32), ..ModelConfig::mini(64, 2) };
        let model = build_mini_fcn(&cfg, 1).unwrap();
        assert_eq!(classifier_map_size(&model), (4, 2));
        let x = Tensor::zeros(vec![2, 3, 32, 64]);
        let (logits, _) = model.forward(&mut GraphTape::new(), &x).unwrap();
        assert_eq!(logits.shape(), &[2, 2, 32, 64]);
        let converted = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions { t: 2, peephole: true, seed_from_classifier: true, warm_scale: DEFAULT_WARM_SCALE, seed: 0 },
        )
        .unwrap();
        assert_eq!(converted.convlstm.as_ref().unwrap().spatial, (2, 4));
        let out = converted.predict(&x).unwrap();
        assert_eq!(out.shape(), &[2, 2, 32, 64]);
    }

    #[test]
    fn binary_config_outputs_two_channels() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 2), 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 32, 32]);
        let (logits, _) = model.forward(&mut GraphTape::new(), &x).unwrap();
        assert_eq!(logits.shape()[1], 2);
    }

    #[test]
    fn rejects_input_not_divisible_by_16() {
        assert!(build_mini_fcn(&ModelConfig::mini(60, 5), 1).is_err());
    }

    #[test]
    fn zero_weight_network_gives_uniform_softmax() {
        let mut model = build_mini_fcn(&ModelConfig::mini(32, 4), 1).unwrap();
        let names = model.store.names();
        for name in names {
            let t = model.store.get_mut(&name).unwrap();
            let zeros = Tensor::zeros(t.shape().to_vec());
            *t = zeros;
        }
        let x = Tensor::uniform(vec![1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let logits = model.predict(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut tape = GraphTape::new();
        let probs = ops::softmax_channels(&mut tape, &logits).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 3), 5).unwrap();
        let x = Tensor::uniform(vec![1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    fn convert_default(model: &ModelGraph) -> ModelGraph {
        convert_to_convlstm_fcn(
            model,
            &ConvertOptions { t: 5, peephole: true, seed_from_classifier: true, warm_scale: DEFAULT_WARM_SCALE, seed: 3 },
        )
        .unwrap()
    }

    #[test]
    fn conversion_preserves_other_weights_bit_exactly() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 5), 9).unwrap();
        let converted = convert_default(&model);
        for (name, param) in model.store.iter() {
            if name.starts_with("conv6/") {
                assert!(converted.store.get(name).is_none());
                continue;
            }
            let other = converted.store.get(name).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&param.tensor), bits(other), "{name}");
        }
    }

    #[test]
    fn conversion_parameter_count_bookkeeping() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 5), 9).unwrap();
        let converted = convert_default(&model);
        let conv6: usize = model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("conv6/"))
            .map(|(_, p)| p.tensor.numel())
            .sum();
        let cell: usize = converted
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("convlstm/"))
            .map(|(_, p)| p.tensor.numel())
            .sum();
        assert_eq!(
            converted.store.total_values() as i64 - model.store.total_values() as i64,
            cell as i64 - conv6 as i64
        );
        // Identical filter geometry: 1x1 kernels onto C channels.
        let cfg = converted.convlstm.as_ref().unwrap();
        assert_eq!(cfg.kernel, (1, 1));
        assert_eq!(cfg.hidden_channels, 5);
        assert_eq!(cfg.spatial, (2, 2));
    }

    #[test]
    fn conversion_preserves_output_contract() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 5), 9).unwrap();
        let converted = convert_default(&model);
        let x = Tensor::uniform(vec![5, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let a = model.predict(&x).unwrap();
        let b = converted.predict(&x).unwrap();
        assert_eq!(a.shape(), b.shape());
        // Batches not divisible by T are rejected after conversion.
        let bad = Tensor::zeros(vec![3, 3, 32, 32]);
        assert!(converted.predict(&bad).is_err());
        assert!(model.predict(&bad).is_ok());
    }

    #[test]
    fn conversion_needs_a_classifier() {
        let mut model = build_mini_fcn(&ModelConfig::mini(32, 5), 9).unwrap();
        model.layers.retain(|l| l.name != CLASSIFIER_NAME);
        let err = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions { t: 5, peephole: true, seed_from_classifier: false, warm_scale: DEFAULT_WARM_SCALE, seed: 0 },
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv6"));
    }

    #[test]
    fn seeded_conversion_with_open_gates_reproduces_classifier_argmax() {
        // Structural smoke check: zero recurrent/peephole weights, gates
        // biased wide open, candidate path seeded from conv6. The output
        // is a monotone reshaping of the conv6 scores, so per-pixel
        // argmax masks must match the original FCN on T=1 clips.
        let model = build_mini_fcn(&ModelConfig::mini(32, 5), 11).unwrap();
        let mut converted = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions { t: 1, peephole: true, seed_from_classifier: true, warm_scale: DEFAULT_WARM_SCALE, seed: 0 },
        )
        .unwrap();
        for gate in ["W_xi", "W_xf", "W_xo", "W_hi", "W_hf", "W_hc", "W_ho", "W_ci", "W_cf", "W_co"] {
            let name = format!("convlstm/{gate}");
            let t = converted.store.get_mut(&name).unwrap();
            let zeros = Tensor::zeros(t.shape().to_vec());
            *t = zeros;
        }
        for bias in ["b_i", "b_o"] {
            let name = format!("convlstm/{bias}");
            let t = converted.store.get_mut(&name).unwrap();
            let open = Tensor::full(t.shape().to_vec(), 30.0);
            *t = open;
        }
        let x = Tensor::uniform(vec![2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let fcn_masks = logits_to_masks(&model.predict(&x).unwrap()).unwrap();
        let conv_masks = logits_to_masks(&converted.predict(&x).unwrap()).unwrap();
        assert_eq!(fcn_masks, conv_masks);
    }

    #[test]
    fn clip_permutation_equivariance() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 3), 13).unwrap();
        let converted = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions { t: 2, peephole: true, seed_from_classifier: false, warm_scale: DEFAULT_WARM_SCALE, seed: 5 },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let clip_a = Tensor::uniform(vec![2, 3, 32, 32], 1.0, &mut rng);
        let clip_b = Tensor::uniform(vec![2, 3, 32, 32], 1.0, &mut rng);
        let cat = |x: &Tensor, y: &Tensor| {
            let mut data = x.data().to_vec();
            data.extend_from_slice(y.data());
            Tensor::new(vec![4, 3, 32, 32], data).unwrap()
        };
        let ab = converted.predict(&cat(&clip_a, &clip_b)).unwrap();
        let ba = converted.predict(&cat(&clip_b, &clip_a)).unwrap();
        let half = ab.numel() / 2;
        assert_eq!(&ab.data()[..half], &ba.data()[half..]);
        assert_eq!(&ab.data()[half..], &ba.data()[..half]);
    }

    #[test]
    fn frozen_groups_receive_no_trace() {
        let model = build_mini_fcn(&ModelConfig::mini(32, 3), 13).unwrap();
        let converted = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions { t: 1, peephole: true, seed_from_classifier: false, warm_scale: DEFAULT_WARM_SCALE, seed: 5 },
        )
        .unwrap();
        let frozen: BTreeSet<String> = converted
            .store
            .groups()
            .into_iter()
            .filter(|g| g != crate::optim::CONVLSTM_GROUP)
            .collect();
        let x = Tensor::zeros(vec![1, 3, 32, 32]);
        let mut tape = GraphTape::new();
        let (_, traced) = converted.forward_with_frozen(&mut tape, &x, &frozen).unwrap();
        assert!(!traced.is_empty());
        assert!(traced.keys().all(|k| k.starts_with("convlstm/")));
    }
}
