//! Compact residual CNN over spectral patches ("MiniResNet") and the
//! cross-entropy loss.
//!
//! Topology: 3x3 stem conv -> residual stages (conv-ReLU-conv plus identity
//! or 1x1 projection shortcut, ReLU) -> global average pool -> linear head.
//! There is no normalization layer, so every sample's logits depend only on
//! that sample.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub stem_channels: usize,
    pub blocks_per_stage: Vec<usize>,
    pub channel_multiplier: usize,
}

impl ModelConfig {
    pub fn new(in_bands: usize, num_classes: usize, patch_size: usize) -> Self {
        Self { in_bands, num_classes, patch_size, stem_channels: 16, blocks_per_stage: vec![1, 1], channel_multiplier: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_bands", self.in_bands),
            ("num_classes", self.num_classes),
            ("patch_size", self.patch_size),
            ("stem_channels", self.stem_channels),
            ("channel_multiplier", self.channel_multiplier),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.contains(&0) {
            return Err(Error::ModelConfig("every stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Spatial extent entering each stage.
    pub fn stage_extents(&self) -> Vec<usize> {
        let mut s = self.patch_size;
        (0..self.blocks_per_stage.len())
            .map(|i| {
                if i > 0 {
                    s = (s - 1) / 2 + 1;
                }
                s
            })
            .collect()
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels * self.channel_multiplier.pow(stage as u32)
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("stem.weight".to_string(), vec![self.stem_channels, self.in_bands, 3, 3]),
            ("stem.bias".to_string(), vec![self.stem_channels]),
        ];
        let mut cin = self.stem_channels;
        for (i, &blocks) in self.blocks_per_stage.iter().enumerate() {
            let cout = self.stage_channels(i);
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                let p = format!("stage{i}.block{j}");
                out.push((format!("{p}.conv1.weight"), vec![cout, cin, 3, 3]));
                out.push((format!("{p}.conv1.bias"), vec![cout]));
                out.push((format!("{p}.conv2.weight"), vec![cout, cout, 3, 3]));
                out.push((format!("{p}.conv2.bias"), vec![cout]));
                if cin != cout || stride != 1 {
                    out.push((format!("{p}.proj.weight"), vec![cout, cin, 1, 1]));
                    out.push((format!("{p}.proj.bias"), vec![cout]));
                }
                cin = cout;
            }
        }
        out.push(("head.weight".to_string(), vec![cin, self.num_classes]));
        out.push(("head.bias".to_string(), vec![self.num_classes]));
        out
    }
}

/// Inputs live in `[0, 1]`; the stem sees them shifted to be zero-centred.
pub const INPUT_CENTER: f64 = 0.5;

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Anything that maps a `[N, B, s, s]` batch to `[N, C]` logits on a tape.
pub trait Classifier<T: Float> {
    fn num_classes(&self) -> usize;

    fn params(&self) -> &[Param<T>];

    /// Records the forward pass given parameter handles in `params()` order.
    fn forward_with(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var>;

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params().iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect()
    }

    fn forward(&self, tape: &mut Tape<T>, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(tape, trainable);
        let logits = self.forward_with(tape, &bound, input)?;
        Ok((logits, bound))
    }

    /// Logits without recording gradients.
    fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (z, _) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub init_seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_model<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut r = rng::rng_from(seed);
    let params = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        T::from_f(std * z)
                    })
                    .collect();
                Tensor::new(shape, data).expect("parameter shape")
            };
            Param { name, value }
        })
        .collect();
    Ok(ModelParams { config: cfg.clone(), params, init_seed: seed, step: 0 })
}

impl<T: Float> ModelParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            init_seed: self.init_seed,
            step: self.step,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.in_bands, c.patch_size, c.patch_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape("forward", format!("batch shape {shape:?}, expected [N, {}, {}, {}]", want[0], want[1], want[2])));
        }
        Ok(())
    }
}

impl<T: Float> Classifier<T> for ModelParams<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn forward_with(&self, tape: &mut Tape<T>, p: &[Var], input: Var) -> Result<Var> {
        self.check_input(tape.shape(input))?;
        if p.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!("{} parameter handles for {} parameters", p.len(), self.params.len())));
        }
        let mut next = p.iter().copied();
        let mut take = || next.next().expect("parameter order");
        let c = &self.config;
        let (w, b) = (take(), take());
        let shift = tape.constant(Tensor::scalar(T::from_f(-INPUT_CENTER)));
        let centered = tape.add(input, shift)?;
        let h = tape.conv2d(centered, w, b, 1, 1)?;
        let mut h = tape.relu(h)?;
        let mut cin = c.stem_channels;
        for (i, &blocks) in c.blocks_per_stage.iter().enumerate() {
            let cout = c.stage_channels(i);
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                let (w1, b1, w2, b2) = (take(), take(), take(), take());
                let y = tape.conv2d(h, w1, b1, stride, 1)?;
                let y = tape.relu(y)?;
                let y = tape.conv2d(y, w2, b2, 1, 1)?;
                let shortcut = if cin != cout || stride != 1 {
                    let (wp, bp) = (take(), take());
                    tape.conv2d(h, wp, bp, stride, 0)?
                } else {
                    h
                };
                let y = tape.add(y, shortcut)?;
                h = tape.relu(y)?;
                cin = cout;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let (wh, bh) = (take(), take());
        let z = tape.matmul(pooled, wh)?;
        tape.add(z, bh)
    }
}

/// Logits for a batch without a gradient graph.
pub fn forward_logits<T: Float>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    params.logits(batch)
}

/// Linear softmax classifier over the flattened input, used for closed-form
/// checks of the attacks.
#[derive(Debug, Clone)]
pub struct LinearModel<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> LinearModel<T> {
    /// `weight` is `[features, classes]`, `bias` is `[classes]`.
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape("linear model", format!("weight {:?}, bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(Self {
            params: vec![Param { name: "weight".into(), value: weight }, Param { name: "bias".into(), value: bias }],
        })
    }
}

impl<T: Float> Classifier<T> for LinearModel<T> {
    fn num_classes(&self) -> usize {
        self.params[1].value.numel()
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn forward_with(&self, tape: &mut Tape<T>, p: &[Var], input: Var) -> Result<Var> {
        let n = tape.shape(input)[0];
        let features = self.params[0].value.shape()[0];
        let flat = tape.reshape(input, &[n, features])?;
        let z = tape.matmul(flat, p[0])?;
        tape.add(z, p[1])
    }
}

/// Per-sample `-log softmax(logits)[target]`, shape `[N]`.
pub fn cross_entropy_per_sample<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let c = tape.shape(logits).get(1).copied().unwrap_or(0);
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::ClassRange { id: bad + 1, classes: c });
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, targets)?;
    tape.scale(picked, -1.0)
}

/// Mean categorical cross-entropy. `targets` are zero-based class indices.
pub fn cross_entropy<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_sample(tape, logits, targets)?;
    tape.mean(per)
}

const CKPT_MAGIC: [u8; 4] = *b"HATM";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    init_seed: u64,
    #[serde(default)]
    run: Option<serde_json::Value>,
}

/// Serializes parameters: magic, length-prefixed JSON config block, named
/// `f32` tensors, step counter.
pub fn encode_checkpoint<T: Float>(params: &ModelParams<T>, run: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader { model: params.config.clone(), init_seed: params.init_seed, run })?;
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        p.value.shape().iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        p.value.data().iter().for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()));
    }
    out.extend_from_slice(&params.step.to_le_bytes());
    Ok(out)
}

pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub run: Option<serde_json::Value>,
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(Error::MagicMismatch { expected: CKPT_MAGIC, found: magic });
    }
    let hlen = u32::from_le_bytes(take(4, "config length")?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(hlen, "config block")?)?;
    header.model.validate()?;
    let count = u32::from_le_bytes(take(4, "parameter count")?.try_into().unwrap()) as usize;
    let expected = header.model.param_shapes();
    if count != expected.len() {
        return Err(Error::CheckpointMismatch(format!("{count} parameters, config implies {}", expected.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let nlen = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen, "name")?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("parameter name is not UTF-8".into()))?;
        let rank = take(1, "rank")?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| take(4, "dims").map(|d| u32::from_le_bytes(d.try_into().unwrap()) as usize))
            .collect::<Result<_>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::CheckpointMismatch(format!("found {name} {shape:?}, expected {want_name} {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 4, "payload")?;
        let data: Vec<T> =
            raw.chunks_exact(4).map(|c| T::from_f(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        params.push(Param { name, value: Tensor::new(shape, data)? });
    }
    let step = u64::from_le_bytes(take(8, "step counter")?.try_into().unwrap());
    if pos != bytes.len() {
        return Err(Error::TrailingBytes { count: bytes.len() - pos });
    }
    Ok(Checkpoint { params: ModelParams { config: header.model, params, init_seed: header.init_seed, step }, run: header.run })
}

pub fn save_checkpoint<T: Float>(params: &ModelParams<T>, run: Option<serde_json::Value>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params, run)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}
