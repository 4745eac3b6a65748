//! The classifier ("generator") and the critic that scores its features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{clip_weights, Param, ParamSet, Tensor};

/// Width of each per-tap projection in the critic.
pub const CRITIC_PROJECTION: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// conv(kernel, pad) → ReLU → max-pool(pool).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    pub pool: usize,
}

/// Which generator activations the critic sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSet {
    /// The raw input image.
    pub image: bool,
    /// Indices of conv blocks whose outputs are tapped, ascending.
    pub blocks: Vec<usize>,
    /// The class-probability vector.
    pub output: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input: ImageShape,
    pub blocks: Vec<ConvBlock>,
    pub classes: usize,
    pub taps: TapSet,
}

impl GeneratorConfig {
    /// Four 3×3 conv blocks with 2×2 pooling, every block tapped plus the
    /// output distribution.
    pub fn desk(input: ImageShape, classes: usize, widths: [usize; 4]) -> Self {
        let blocks = widths
            .iter()
            .map(|&out_channels| ConvBlock {
                out_channels,
                kernel: 3,
                pad: 1,
                pool: 2,
            })
            .collect();
        Self {
            input,
            blocks,
            classes,
            taps: TapSet {
                image: false,
                blocks: vec![0, 1, 2, 3],
                output: true,
            },
        }
    }

    /// Per-sample shape after each block, `(channels, height, width)`.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if h + 2 * b.pad < b.kernel || w + 2 * b.pad < b.kernel || b.kernel == 0 {
                return Err(invalid(format!("block {i}: kernel larger than input")));
            }
            h = h + 2 * b.pad - b.kernel + 1;
            w = w + 2 * b.pad - b.kernel + 1;
            if b.pool == 0 || h < b.pool || w < b.pool {
                return Err(invalid(format!("block {i}: pool window larger than map")));
            }
            h /= b.pool;
            w /= b.pool;
            shapes.push([b.out_channels, h, w]);
        }
        Ok(shapes)
    }

    /// Flattened width of the last block's output (the penultimate layer).
    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(match self.block_shapes()?.last() {
            Some([c, h, w]) => c * h * w,
            None => self.input.len(),
        })
    }

    /// Channel count of each tapped feature, in tap order.
    pub fn tap_channels(&self) -> Result<Vec<usize>> {
        let shapes = self.block_shapes()?;
        let mut out = Vec::new();
        if self.taps.image {
            out.push(self.input.channels);
        }
        for &b in &self.taps.blocks {
            let s = shapes
                .get(b)
                .ok_or_else(|| invalid(format!("tap on missing block {b}")))?;
            out.push(s[0]);
        }
        if self.taps.output {
            out.push(self.classes);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("generator: need at least 2 classes"));
        }
        if self.input.is_empty() {
            return Err(invalid("generator: empty input shape"));
        }
        if self.taps.blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("generator: tapped blocks must be strictly ascending"));
        }
        if self.tap_channels()?.is_empty() {
            return Err(invalid("generator: at least one feature tap is required"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn fan_in_bound(fan_in: usize, relu: bool) -> f64 {
    let gain = if relu { 6.0 } else { 1.0 };
    libm::sqrt(gain / fan_in.max(1) as f64)
}

fn accumulate(params: &mut ParamSet, tape: &Tape, bound: &[Var]) {
    for (p, &v) in params.iter_mut().zip(bound) {
        if let Some(g) = tape.grad(v) {
            p.grad.iter_mut().zip(g).for_each(|(a, d)| *a += d);
        }
    }
}

fn bind(params: &ParamSet, tape: &mut Tape, trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect()
}

/// Activations produced by one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorPass {
    /// The tapped features `F(x)`, in tap order; the last entry is the deepest.
    pub features: Vec<Var>,
    /// Class probabilities `(B, K)`.
    pub probs: Var,
    /// Flattened last-block activations `(B, D)`.
    pub embedding: Var,
}

/// Concrete outputs of an inference-only generator pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub features: Vec<Tensor>,
    pub probs: Tensor,
    pub embedding: Tensor,
}

/// The classifier: conv blocks, a linear head and a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    config: GeneratorConfig,
    pub params: ParamSet,
}

impl GeneratorNet {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = config.input.channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let shape = [b.out_channels, cin, b.kernel, b.kernel];
            let bound = fan_in_bound(cin * b.kernel * b.kernel, true);
            params.push(Param::new(format!("block{i}.weight"), uniform(&mut rng, &shape, bound)));
            params.push(Param::new(format!("block{i}.bias"), Tensor::zeros(&[b.out_channels])));
            cin = b.out_channels;
        }
        let d = config.embedding_dim()?;
        let head = uniform(&mut rng, &[config.classes, d], fan_in_bound(d, false));
        params.push(Param::new("head.weight", head));
        params.push(Param::new("head.bias", Tensor::zeros(&[config.classes])));
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters; names and shapes must match
    /// the layout `config` produces.
    pub fn with_params(config: GeneratorConfig, params: &ParamSet) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_values(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(&self.params, tape, trainable)
    }

    /// Adds the tape gradients of bound parameters into `params[..].grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        accumulate(&mut self.params, tape, bound);
    }

    /// `x: (B, C, H, W)` through the network on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<GeneratorPass> {
        let s = tape.shape(x).to_vec();
        let inp = self.config.input;
        if s.len() != 4 || s[1..] != [inp.channels, inp.height, inp.width] {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                left: s,
                right: vec![inp.channels, inp.height, inp.width],
            });
        }
        if bound.len() != self.params.len() {
            return Err(invalid("generator_forward: wrong number of bound parameters"));
        }
        let batch = s[0];
        let mut features = Vec::new();
        if self.config.taps.image {
            features.push(x);
        }
        let mut h = x;
        for (i, b) in self.config.blocks.iter().enumerate() {
            let conv = tape.conv2d(h, bound[2 * i], bound[2 * i + 1], b.pad)?;
            let act = tape.relu(conv)?;
            h = tape.max_pool2d(act, b.pool)?;
            if self.config.taps.blocks.contains(&i) {
                features.push(h);
            }
        }
        let d = self.config.embedding_dim()?;
        let embedding = tape.reshape(h, &[batch, d])?;
        let nb = 2 * self.config.blocks.len();
        let logits = tape.linear(embedding, bound[nb], bound[nb + 1])?;
        let probs = tape.softmax(logits)?;
        if self.config.taps.output {
            features.push(probs);
        }
        Ok(GeneratorPass {
            features,
            probs,
            embedding,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let pass = self.forward(&mut tape, &bound, x)?;
        Ok(Inference {
            features: pass.features.iter().map(|&f| tape.value(f).clone()).collect(),
            probs: tape.value(pass.probs).clone(),
            embedding: tape.value(pass.embedding).clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Channel count of each tapped feature, in tap order.
    pub tap_channels: Vec<usize>,
    /// Weight-clipping bound `c`.
    pub clip: f64,
}

impl CriticConfig {
    pub fn for_generator(gen: &GeneratorConfig, clip: f64) -> Result<Self> {
        Ok(Self {
            tap_channels: gen.tap_channels()?,
            clip,
        })
    }
}

/// Per tap: global average pooling, a 128-wide linear layer and ReLU; the
/// concatenated projections feed a linear layer producing one score.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    config: CriticConfig,
    pub params: ParamSet,
}

impl CriticNet {
    /// Weights are drawn fan-in uniform and then clipped to `[-c, c]`.
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        if config.tap_channels.is_empty() {
            return Err(invalid("critic: no feature taps"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, &c) in config.tap_channels.iter().enumerate() {
            let w = uniform(&mut rng, &[CRITIC_PROJECTION, c], fan_in_bound(c, true));
            params.push(Param::new(format!("tap{i}.weight"), w));
            params.push(Param::new(format!("tap{i}.bias"), Tensor::zeros(&[CRITIC_PROJECTION])));
        }
        let width = CRITIC_PROJECTION * config.tap_channels.len();
        let w = uniform(&mut rng, &[1, width], fan_in_bound(width, false));
        params.push(Param::new("out.weight", w));
        params.push(Param::new("out.bias", Tensor::zeros(&[1])));
        let mut net = Self { config, params };
        net.clip()?;
        Ok(net)
    }

    /// Rebuilds a critic from stored parameters. Values outside the clip
    /// range are rejected rather than silently clipped.
    pub fn with_params(config: CriticConfig, params: &ParamSet) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_values(params)?;
        if net.params.max_abs() > net.config.clip {
            return Err(invalid("critic: stored weights exceed the clip range"));
        }
        Ok(net)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn clip(&mut self) -> Result<()> {
        clip_weights(self.params.as_mut_slice(), self.config.clip)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(&self.params, tape, trainable)
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        accumulate(&mut self.params, tape, bound);
    }

    /// Scores `(B,)` for a batch of tapped features.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], features: &[Var]) -> Result<Var> {
        let taps = &self.config.tap_channels;
        if features.len() != taps.len() {
            return Err(Error::ShapeMismatch {
                op: "critic_forward",
                left: vec![features.len()],
                right: vec![taps.len()],
            });
        }
        let mut projections = Vec::with_capacity(taps.len());
        let mut batch = None;
        for (i, (&f, &c)) in features.iter().zip(taps).enumerate() {
            let s = tape.shape(f).to_vec();
            if (s.len() != 2 && s.len() != 4) || s[1] != c || batch.is_some_and(|b| b != s[0]) {
                return Err(Error::ShapeMismatch {
                    op: "critic_forward",
                    left: s,
                    right: vec![c],
                });
            }
            batch = Some(s[0]);
            let pooled = if s.len() == 4 { tape.global_avg_pool(f)? } else { f };
            let proj = tape.linear(pooled, bound[2 * i], bound[2 * i + 1])?;
            projections.push(tape.relu(proj)?);
        }
        let joined = tape.concat(&projections)?;
        let n = 2 * taps.len();
        let out = tape.linear(joined, bound[n], bound[n + 1])?;
        tape.reshape(out, &[batch.unwrap_or(0)])
    }

    /// Scores for concrete feature tensors, without gradient tracking.
    pub fn score(&self, features: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.forward(&mut tape, &bound, &vars)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predict(z: &[f64]) -> Result<usize> {
    if z.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    let mut best = 0;
    for (i, &p) in z.iter().enumerate().skip(1) {
        if p > z[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Row-wise [`predict`] over a `(B, K)` tensor.
pub fn predict_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| predict(row).expect("rows are non-empty"))
        .collect()
}
