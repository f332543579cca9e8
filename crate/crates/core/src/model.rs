//! Gated-convolution keyword classifier.
//!
//! Stack of blocks, each two attention sub-blocks followed by 2×2 max
//! pooling, then two fully connected layers producing 12 logits.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, NormMode};
use crate::nn::optim::OptimizerState;
use crate::nn::{ParameterSet, Scalar, Tensor};
use crate::seed;

pub const N_CLASSES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_blocks: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Kernel height and width.
    pub kernel: [usize; 2],
    pub fc_hidden: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    /// Mel bands × frames.
    pub input_shape: [usize; 2],
    /// Identity skip around sub-blocks whose input and output widths match.
    pub residual: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetworkConfig {
    pub fn full() -> Self {
        Self {
            n_blocks: 5,
            channels: vec![32, 64, 128, 256, 512],
            kernel: [3, 3],
            fc_hidden: 512,
            n_classes: N_CLASSES,
            dropout_rate: 0.1,
            input_shape: [40, 98],
            residual: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn edge() -> Self {
        Self {
            n_blocks: 3,
            channels: vec![8, 16, 32],
            fc_hidden: 16,
            ..Self::full()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "edge" => Ok(Self::edge()),
            other => Err(Error::Config(format!("unknown network preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks != self.channels.len() {
            return Err(Error::Config(format!(
                "n_blocks {} does not match {} channel entries",
                self.n_blocks,
                self.channels.len()
            )));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes)));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("kernel {:?} must be odd", self.kernel)));
        }
        if self.channels.iter().any(|&c| c == 0) || self.fc_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("batch-norm momentum must lie in [0, 1] and eps be positive".into()));
        }
        let (h, w) = *self.spatial_trajectory().last().unwrap();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {:?} collapses to {h}×{w} after {} poolings",
                self.input_shape, self.n_blocks
            )));
        }
        Ok(())
    }

    /// Spatial size at the input and after each pooling.
    pub fn spatial_trajectory(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.input_shape[0], self.input_shape[1])];
        for _ in 0..self.n_blocks {
            let (h, w) = *out.last().unwrap();
            out.push((h / 2, w / 2));
        }
        out
    }

    pub fn flatten_size(&self) -> usize {
        let (h, w) = *self.spatial_trajectory().last().unwrap();
        self.channels.last().copied().unwrap_or(0) * h * w
    }

    /// `(name, shape, trainable)` for every stored tensor, in declaration order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>, bool)> {
        let [kh, kw] = self.kernel;
        let mut out = Vec::new();
        let mut c_in = 1;
        for (b, &c) in self.channels.iter().enumerate() {
            for s in 0..2 {
                let p = format!("block{b}.sub{s}");
                for path in ["filter", "gate"] {
                    out.push((format!("{p}.{path}.weight"), vec![c, c_in, kh, kw], true));
                    out.push((format!("{p}.{path}.bias"), vec![c], true));
                }
                out.push((format!("{p}.bn.scale"), vec![c], true));
                out.push((format!("{p}.bn.offset"), vec![c], true));
                out.push((format!("{p}.bn.running_mean"), vec![c], false));
                out.push((format!("{p}.bn.running_var"), vec![c], false));
                c_in = c;
            }
        }
        let d = self.flatten_size();
        out.push(("fc1.weight".into(), vec![d, self.fc_hidden], true));
        out.push(("fc1.bias".into(), vec![self.fc_hidden], true));
        out.push(("fc2.weight".into(), vec![self.fc_hidden, self.n_classes], true));
        out.push(("fc2.bias".into(), vec![self.n_classes], true));
        out
    }
}

/// Trainable scalar count.
pub fn param_count(config: &NetworkConfig) -> usize {
    config
        .schema()
        .iter()
        .filter(|(_, _, t)| *t)
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Stored scalar count, batch-norm running statistics included.
pub fn tensor_count(config: &NetworkConfig) -> usize {
    config.schema().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

pub fn build_network<T: Scalar>(config: &NetworkConfig, init_seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (i, (name, shape, trainable)) in config.schema().into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let value = if name.ends_with(".weight") {
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let limit = (6.0 / fan_in as f64).sqrt();
            let mut rng = seed::rng(seed::derive(init_seed, &[i as u64]));
            let data = (0..numel).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
            Tensor::from_vec(&shape, data)?
        } else if name.ends_with(".scale") || name.ends_with(".running_var") {
            Tensor::full(&shape, T::one())
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, value, trainable)?;
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Batch statistics a train-mode forward observed for one norm layer.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Unbiased.
    pub var: Vec<T>,
}

pub struct SubBlockCache<T> {
    input: Tensor<T>,
    filter_pre: Tensor<T>,
    filter_act: Tensor<T>,
    gate: Tensor<T>,
    bn: Option<ops::BatchNormCache<T>>,
    mask: Option<Vec<T>>,
    residual: bool,
}

impl<T> SubBlockCache<T> {
    /// Sigmoid gate activations.
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }

    /// ReLU filter activations before gating.
    pub fn filter_act(&self) -> &Tensor<T> {
        &self.filter_act
    }
}

pub struct ForwardCache<T> {
    subs: Vec<SubBlockCache<T>>,
    pools: Vec<ops::PoolCache>,
    block_out_shape: Vec<usize>,
    flat: Tensor<T>,
    fc1_pre: Tensor<T>,
    fc1_mask: Option<Vec<T>>,
    hidden: Tensor<T>,
    pub running: Vec<RunningUpdate<T>>,
}

/// Concatenate along the leading axis.
fn stack_leading<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("stack", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::from_vec(&shape, [a.data(), b.data()].concat())
}

/// Inverse of [`stack_leading`] for two equal halves.
fn split_leading<T: Scalar>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut shape = t.shape().to_vec();
    shape[0] /= 2;
    let (a, b) = t.data().split_at(t.numel() / 2);
    (Tensor::from_vec(&shape, a.to_vec()).unwrap(), Tensor::from_vec(&shape, b.to_vec()).unwrap())
}

/// Concatenate two `N×C×H×W` tensors along channels.
fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4("concat")?;
    if b.shape() != a.shape() {
        return Err(Error::shape("concat", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let plane = c * h * w;
    let mut data = Vec::with_capacity(2 * a.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * plane..(i + 1) * plane]);
        data.extend_from_slice(&b.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::from_vec(&[n, 2 * c, h, w], data)
}

/// Split an `N×2C×H×W` tensor into its two channel halves.
fn split_channels<T: Scalar>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let (n, c2, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = c2 / 2 * h * w;
    let mut a = Vec::with_capacity(n * plane);
    let mut b = Vec::with_capacity(n * plane);
    for i in 0..n {
        a.extend_from_slice(&t.data()[2 * i * plane..(2 * i + 1) * plane]);
        b.extend_from_slice(&t.data()[(2 * i + 1) * plane..(2 * i + 2) * plane]);
    }
    let shape = [n, c2 / 2, h, w];
    (Tensor::from_vec(&shape, a).unwrap(), Tensor::from_vec(&shape, b).unwrap())
}

/// One attention sub-block:
/// `dropout(bn(relu(filter(x)) ⊙ sigmoid(gate(x))))`, plus `x` when
/// `residual` is set and the widths agree.
#[allow(clippy::too_many_arguments)]
pub fn attention_subblock_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ParameterSet<T>,
    prefix: &str,
    mode: NormMode,
    dropout_rate: f64,
    rng_seed: u64,
    residual: bool,
    bn_eps: f64,
) -> Result<(Tensor<T>, SubBlockCache<T>)> {
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    // Both paths read the same input, so they run as one convolution with
    // stacked output channels.
    let weight = stack_leading(p("filter.weight"), p("gate.weight"))?;
    let bias = stack_leading(p("filter.bias"), p("gate.bias"))?;
    let (filter_pre, gate_pre) = split_channels(&ops::conv2d(x, &weight, Some(&bias))?);
    let filter_act = ops::relu(&filter_pre);
    let gate = ops::sigmoid(&gate_pre);
    let gated = ops::elementwise_mul(&filter_act, &gate)?;
    let (normed, bn) = match mode {
        NormMode::Train => {
            let (y, c) = ops::batch_norm_train(&gated, p("bn.scale"), p("bn.offset"), bn_eps)?;
            (y, Some(c))
        }
        NormMode::Eval => (
            ops::batch_norm_eval(&gated, p("bn.scale"), p("bn.offset"), p("bn.running_mean"), p("bn.running_var"), bn_eps)?,
            None,
        ),
    };
    let (mut out, mask) = ops::dropout(&normed, dropout_rate, mode, rng_seed);
    let residual = residual && x.shape() == out.shape();
    if residual {
        out = ops::add(&out, x)?;
    }
    Ok((
        out,
        SubBlockCache {
            input: x.clone(),
            filter_pre,
            filter_act,
            gate,
            bn,
            mask,
            residual,
        },
    ))
}

/// Backward through a sub-block. Parameter gradients are written into
/// `grads` under the same names; returns the input gradient.
pub fn attention_subblock_backward<T: Scalar>(
    cache: &SubBlockCache<T>,
    params: &ParameterSet<T>,
    prefix: &str,
    dy: &Tensor<T>,
    grads: &mut ParameterSet<T>,
) -> Result<Tensor<T>> {
    let name = |s: &str| format!("{prefix}.{s}");
    let bn = cache
        .bn
        .as_ref()
        .ok_or_else(|| Error::Config("backward requires a train-mode forward".into()))?;
    let d_normed = ops::apply_mask(dy, cache.mask.as_deref());
    let bng = ops::batch_norm_backward(bn, params.get(&name("bn.scale")), &d_normed)?;
    *grads.get_mut(&name("bn.scale")) = bng.scale;
    *grads.get_mut(&name("bn.offset")) = bng.offset;
    let (d_filter_act, d_gate) = ops::elementwise_mul_backward(&cache.filter_act, &cache.gate, &bng.input)?;
    let d_filter_pre = ops::relu_backward(&cache.filter_pre, &d_filter_act);
    let d_gate_pre = ops::sigmoid_backward(&cache.gate, &d_gate);
    let weight = stack_leading(params.get(&name("filter.weight")), params.get(&name("gate.weight")))?;
    let g = ops::conv2d_backward(&cache.input, &weight, &concat_channels(&d_filter_pre, &d_gate_pre)?)?;
    let (fw, gw) = split_leading(&g.weight);
    let (fb, gb) = split_leading(&g.bias);
    *grads.get_mut(&name("filter.weight")) = fw;
    *grads.get_mut(&name("filter.bias")) = fb;
    *grads.get_mut(&name("gate.weight")) = gw;
    *grads.get_mut(&name("gate.bias")) = gb;
    let mut dx = g.input;
    if cache.residual {
        dx = ops::add(&dx, dy)?;
    }
    Ok(dx)
}

/// Logits `N×12` plus everything backward needs. In train mode, batch
/// statistics are used and recorded in `cache.running`; parameters are
/// never modified here.
pub fn forward_with_cache<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    batch: &Tensor<T>,
    mode: NormMode,
    rng_seed: u64,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let (n, c, h, w) = batch.dims4("forward")?;
    if c != 1 || [h, w] != config.input_shape {
        return Err(Error::shape(
            "forward",
            format!("batch {:?} does not match input {:?}", batch.shape(), config.input_shape),
        ));
    }
    let mut x = batch.clone();
    let mut subs = Vec::with_capacity(2 * config.n_blocks);
    let mut pools = Vec::with_capacity(config.n_blocks);
    let mut running = Vec::new();
    for b in 0..config.n_blocks {
        for s in 0..2 {
            let prefix = format!("block{b}.sub{s}");
            let layer_seed = seed::derive(rng_seed, &[(2 * b + s) as u64]);
            let (y, cache) = attention_subblock_forward(
                &x,
                params,
                &prefix,
                mode,
                config.dropout_rate,
                layer_seed,
                config.residual,
                config.bn_eps,
            )?;
            if let Some(bn) = &cache.bn {
                running.push(RunningUpdate {
                    prefix: format!("{prefix}.bn"),
                    mean: bn.mean.clone(),
                    var: bn.unbiased_var(),
                });
            }
            subs.push(cache);
            x = y;
        }
        let (y, pc) = ops::maxpool2(&x)?;
        pools.push(pc);
        x = y;
    }
    let block_out_shape = x.shape().to_vec();
    let flat = x.reshape(&[n, config.flatten_size()])?;
    let fc1_pre = ops::linear(&flat, params.get("fc1.weight"), params.get("fc1.bias"))?;
    let act = ops::relu(&fc1_pre);
    let (hidden, fc1_mask) = ops::dropout(&act, config.dropout_rate, mode, seed::derive(rng_seed, &[u64::MAX]));
    let logits = ops::linear(&hidden, params.get("fc2.weight"), params.get("fc2.bias"))?;
    Ok((
        logits,
        ForwardCache {
            subs,
            pools,
            block_out_shape,
            flat,
            fc1_pre,
            fc1_mask,
            hidden,
            running,
        },
    ))
}

pub fn forward<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    batch: &Tensor<T>,
    mode: NormMode,
    rng_seed: u64,
) -> Result<Tensor<T>> {
    Ok(forward_with_cache(params, config, batch, mode, rng_seed)?.0)
}

/// Gradients of every trainable tensor given `d loss / d logits`. Buffers
/// get zero gradients.
pub fn backward<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    cache: &ForwardCache<T>,
    dlogits: &Tensor<T>,
) -> Result<ParameterSet<T>> {
    let mut grads = params.zeros_like();
    let g2 = ops::linear_backward(&cache.hidden, params.get("fc2.weight"), dlogits)?;
    *grads.get_mut("fc2.weight") = g2.weight;
    *grads.get_mut("fc2.bias") = g2.bias;
    let d_act = ops::apply_mask(&g2.input, cache.fc1_mask.as_deref());
    let d_pre = ops::relu_backward(&cache.fc1_pre, &d_act);
    let g1 = ops::linear_backward(&cache.flat, params.get("fc1.weight"), &d_pre)?;
    *grads.get_mut("fc1.weight") = g1.weight;
    *grads.get_mut("fc1.bias") = g1.bias;
    let mut dx = g1.input.reshape(&cache.block_out_shape)?;
    for b in (0..config.n_blocks).rev() {
        dx = ops::maxpool2_backward(&cache.pools[b], &dx);
        for s in (0..2).rev() {
            let prefix = format!("block{b}.sub{s}");
            dx = attention_subblock_backward(&cache.subs[2 * b + s], params, &prefix, &dx, &mut grads)?;
        }
    }
    Ok(grads)
}

/// Blend recorded batch statistics into the running buffers.
pub fn apply_running_updates<T: Scalar>(params: &mut ParameterSet<T>, updates: &[RunningUpdate<T>], momentum: f64) {
    for u in updates {
        let mut mean = params.get(&format!("{}.running_mean", u.prefix)).clone();
        let mut var = params.get(&format!("{}.running_var", u.prefix)).clone();
        ops::update_running_stats(&mut mean, &mut var, &u.mean, &u.var, momentum);
        *params.get_mut(&format!("{}.running_mean", u.prefix)) = mean;
        *params.get_mut(&format!("{}.running_var", u.prefix)) = var;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSF";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_BYTES: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub student: ParameterSet<f32>,
    pub teacher: Option<ParameterSet<f32>>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub epoch: u64,
    /// Base seed of the run and number of steps drawn from it.
    pub rng_seed: u64,
    pub rng_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sections {
    pub teacher: bool,
    pub optimizer: bool,
}

impl Sections {
    pub const ALL: Sections = Sections {
        teacher: true,
        optimizer: true,
    };
    pub const WEIGHTS: Sections = Sections {
        teacher: false,
        optimizer: false,
    };
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    sections: Sections,
}

fn header_json(config: &NetworkConfig, sections: Sections) -> Vec<u8> {
    serde_json::to_vec(&Header {
        config: config.clone(),
        sections,
    })
    .expect("config serializes")
}

/// Exact byte length of a serialized checkpoint.
pub fn checkpoint_size_bytes(config: &NetworkConfig, sections: Sections) -> usize {
    let stored = tensor_count(config);
    let trainable = param_count(config);
    let mut floats = stored;
    if sections.teacher {
        floats += stored;
    }
    if sections.optimizer {
        floats += 2 * trainable;
    }
    4 + 4 + 4 + header_json(config, sections).len() + META_BYTES + 4 * floats + 8
}

impl Checkpoint {
    pub fn sections(&self) -> Sections {
        Sections {
            teacher: self.teacher.is_some(),
            optimizer: self.optimizer.is_some(),
        }
    }

    /// The tensors that count as the trained model: the teacher when present.
    pub fn model(&self) -> &ParameterSet<f32> {
        self.teacher.as_ref().unwrap_or(&self.student)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header_json(&self.config, self.sections());
        let mut out = Vec::with_capacity(checkpoint_size_bytes(&self.config, self.sections()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let (adam_step, lr) = self.optimizer.as_ref().map_or((0, 0.0), |o| (o.step, o.learning_rate));
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_step.to_le_bytes());
        out.extend_from_slice(&adam_step.to_le_bytes());
        out.extend_from_slice(&lr.to_le_bytes());
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.student.iter() {
            put(&p.value);
        }
        if let Some(t) = &self.teacher {
            for (_, p) in t.iter() {
                put(&p.value);
            }
        }
        if let Some(o) = &self.optimizer {
            o.first_moment.values().for_each(&mut put);
            o.second_moment.values().for_each(&mut put);
        }
        let sum = seed::fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 + META_BYTES + 8 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored_sum = u64::from_le_bytes(tail.try_into().unwrap());
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if 12 + json_len + META_BYTES > body.len() {
            return Err(corrupt("truncated header"));
        }
        if seed::fnv1a64(body) != stored_sum {
            return Err(corrupt("checksum mismatch"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..12 + json_len]).map_err(|e| corrupt(&format!("header: {e}")))?;
        header.config.validate().map_err(|e| corrupt(&format!("config: {e}")))?;
        let config = header.config;
        let sections = header.sections;
        if body.len() + 8 != checkpoint_size_bytes(&config, sections) {
            return Err(corrupt("length does not match config"));
        }
        let mut pos = 12 + json_len;
        let u64_at = |pos: &mut usize| {
            let v = u64::from_le_bytes(body[*pos..*pos + 8].try_into().unwrap());
            *pos += 8;
            v
        };
        let epoch = u64_at(&mut pos);
        let rng_seed = u64_at(&mut pos);
        let rng_step = u64_at(&mut pos);
        let adam_step = u64_at(&mut pos);
        let lr = f64::from_bits(u64_at(&mut pos));
        let schema = config.schema();
        let mut read_tensor = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = body[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            Tensor::from_vec(shape, data).unwrap()
        };
        let read_set = |read: &mut dyn FnMut(&[usize]) -> Tensor<f32>| {
            let mut set = ParameterSet::new();
            for (name, shape, trainable) in &schema {
                set.insert(name.clone(), read(shape), *trainable).unwrap();
            }
            set
        };
        let student = read_set(&mut read_tensor);
        let teacher = sections.teacher.then(|| read_set(&mut read_tensor));
        let optimizer = if sections.optimizer {
            let mut state = OptimizerState::new(&student, lr);
            state.step = adam_step;
            for m in state.first_moment.values_mut() {
                *m = read_tensor(m.shape());
            }
            for v in state.second_moment.values_mut() {
                *v = read_tensor(v.shape());
            }
            Some(state)
        } else {
            None
        };
        Ok(Self {
            config,
            student,
            teacher,
            optimizer,
            epoch,
            rng_seed,
            rng_step,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
