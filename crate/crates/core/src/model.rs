//! Windowed-attention transformer with a temporal feature pyramid.
//!
//! ```text
//! features ─ embed (p1 × conv+ReLU) ─ p2 × transformer ─┬─ level 0 ──────────┐
//!                                                       └─ p3 × downsampling ─┴─ shared head ─ O
//! ```
//!
//! Attention runs inside consecutive non-overlapping windows of `window`
//! timestamps. Every level is decoded by the same conv + sigmoid head, coarse
//! levels are repeated back to full resolution and averaged. Padded
//! timestamps are zeroed after every block, so they never influence valid
//! outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{windowed_attention_forward, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::preprocess::FeatureSequence;
use crate::tensor::Tensor;

const DECODER_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1/√(D_e/N)`, the width of one head.
    #[default]
    PerHead,
    /// `1/√D_e` regardless of the head count.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotterConfig {
    /// Width of the concatenated two-stream input.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub embed_blocks: usize,
    pub transformer_blocks: usize,
    pub pyramid_blocks: usize,
    pub heads: usize,
    /// Attention window length in timestamps.
    pub window: usize,
    /// Fixed padded duration in timestamps.
    pub duration: usize,
    pub embed_kernel: usize,
    pub downsample_kernel: usize,
    pub decoder_kernel: usize,
    pub mlp_ratio: usize,
    pub attention_scale: AttentionScale,
    pub ln_eps: f64,
}

impl Default for SpotterConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            embed_dim: 512,
            embed_blocks: 2,
            transformer_blocks: 2,
            pyramid_blocks: 1,
            heads: 4,
            window: 19,
            duration: 2304,
            embed_kernel: 3,
            downsample_kernel: 3,
            decoder_kernel: 3,
            mlp_ratio: 4,
            attention_scale: AttentionScale::PerHead,
            ln_eps: 1e-5,
        }
    }
}

impl SpotterConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.window == 0 || self.embed_blocks == 0 || self.transformer_blocks == 0 {
            return fail("window, embed_blocks and transformer_blocks must be at least 1".into());
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.duration == 0 {
            return fail("dimensions must be positive".into());
        }
        for (name, k) in [
            ("embed_kernel", self.embed_kernel),
            ("downsample_kernel", self.downsample_kernel),
            ("decoder_kernel", self.decoder_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.pyramid_blocks > 0 && self.duration < 2 {
            return fail("downsampling needs a duration of at least 2".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        let width = match self.attention_scale {
            AttentionScale::PerHead => self.embed_dim / self.heads,
            AttentionScale::Global => self.embed_dim,
        };
        1.0 / (width as f64).sqrt()
    }

    /// Temporal length of pyramid level `i` (level 0 is full resolution).
    pub fn level_len(&self, level: usize) -> usize {
        (0..level).fold(self.duration, |len, _| len.div_ceil(2))
    }

    pub fn param_count(&self) -> usize {
        Layout::build(self).1.iter().map(|s| s.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub attention: AttentionLayout,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub mlp_in: usize,
    pub mlp_in_bias: usize,
    pub mlp_out: usize,
    pub mlp_out_bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PyramidLayout {
    pub block: BlockLayout,
    pub downsample: usize,
    pub downsample_bias: usize,
    pub attention: AttentionLayout,
}

/// Indices of every parameter tensor, in storage order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: Vec<(usize, usize)>,
    pub blocks: Vec<BlockLayout>,
    pub pyramid: Vec<PyramidLayout>,
    pub decoder: usize,
    pub decoder_bias: usize,
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>) -> usize {
        // fan-in is every dimension but the output one
        let fan_in = shape[..shape.len() - 1].iter().product();
        self.add(name, shape, Init::Uniform { fan_in })
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionLayout {
        let mut pair = |n: &str| {
            let w = self.weight(format!("{prefix}.{n}.weight"), vec![d, d]);
            let b = self.add(format!("{prefix}.{n}.bias"), vec![d], Init::Zeros);
            (w, b)
        };
        let (wq, bq) = pair("query");
        let (wk, bk) = pair("key");
        let (wv, bv) = pair("value");
        let (wo, bo) = pair("out");
        AttentionLayout {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn block(&mut self, prefix: &str, cfg: &SpotterConfig) -> BlockLayout {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let ln1_gain = self.add(format!("{prefix}.ln1.gain"), vec![d], Init::Ones);
        let ln1_bias = self.add(format!("{prefix}.ln1.bias"), vec![d], Init::Zeros);
        let attention = self.attention(&format!("{prefix}.attn"), d);
        let ln2_gain = self.add(format!("{prefix}.ln2.gain"), vec![d], Init::Ones);
        let ln2_bias = self.add(format!("{prefix}.ln2.bias"), vec![d], Init::Zeros);
        let mlp_in = self.weight(format!("{prefix}.mlp.in.weight"), vec![d, hidden]);
        let mlp_in_bias = self.add(format!("{prefix}.mlp.in.bias"), vec![hidden], Init::Zeros);
        let mlp_out = self.weight(format!("{prefix}.mlp.out.weight"), vec![hidden, d]);
        let mlp_out_bias = self.add(format!("{prefix}.mlp.out.bias"), vec![d], Init::Zeros);
        BlockLayout {
            ln1_gain,
            ln1_bias,
            attention,
            ln2_gain,
            ln2_bias,
            mlp_in,
            mlp_in_bias,
            mlp_out,
            mlp_out_bias,
        }
    }
}

impl Layout {
    fn build(cfg: &SpotterConfig) -> (Layout, Vec<ParamSpec>) {
        let mut b = SpecBuilder { specs: Vec::new() };
        let d = cfg.embed_dim;
        let embed = (0..cfg.embed_blocks)
            .map(|i| {
                let din = if i == 0 { cfg.input_dim } else { d };
                let w = b.weight(format!("embed.{i}.weight"), vec![cfg.embed_kernel, din, d]);
                let bias = b.add(format!("embed.{i}.bias"), vec![d], Init::Zeros);
                (w, bias)
            })
            .collect();
        let blocks = (0..cfg.transformer_blocks)
            .map(|i| b.block(&format!("encoder.{i}"), cfg))
            .collect();
        let pyramid = (0..cfg.pyramid_blocks)
            .map(|i| {
                let prefix = format!("pyramid.{i}");
                let block = b.block(&prefix, cfg);
                let downsample = b.weight(format!("{prefix}.down.weight"), vec![cfg.downsample_kernel, d, d]);
                let downsample_bias = b.add(format!("{prefix}.down.bias"), vec![d], Init::Zeros);
                let attention = b.attention(&format!("{prefix}.down_attn"), d);
                PyramidLayout {
                    block,
                    downsample,
                    downsample_bias,
                    attention,
                }
            })
            .collect();
        let decoder = b.weight("decoder.weight".into(), vec![cfg.decoder_kernel, d, 1]);
        let decoder_bias = b.add("decoder.bias".into(), vec![1], Init::Constant(DECODER_BIAS_INIT));
        (
            Layout {
                embed,
                blocks,
                pyramid,
                decoder,
                decoder_bias,
            },
            b.specs,
        )
    }
}

/// Every learnable tensor of the network, with names and layout.
#[derive(Debug, Clone)]
pub struct SpotterParams {
    config: SpotterConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl SpotterParams {
    pub fn init(config: &SpotterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let data = match s.init {
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Constant(c) => vec![c; n],
                };
                Tensor::new(s.shape.clone(), data).map(|t| t.with_requires_grad(true))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout of `config`.
    pub fn from_named(config: &SpotterConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        if named.len() != specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            tensors.push(t.with_requires_grad(true));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &SpotterConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, aligned with [`SpotterParams::tensors`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// `x` is `t × d`; returns the per-window multi-head attention followed by the
/// output projection.
pub fn dc_mhsa(
    tape: &Tape,
    p: &Bound,
    l: &AttentionLayout,
    x: Var,
    mask: &[bool],
    cfg: &SpotterConfig,
) -> Result<Var> {
    let proj = |w: usize, b: usize| -> Result<Var> { tape.add_bias(tape.matmul(x, p.get(w))?, p.get(b)) };
    let q = proj(l.wq, l.bq)?;
    let k = proj(l.wk, l.bk)?;
    let v = proj(l.wv, l.bv)?;
    let att = tape.windowed_attention(q, k, v, mask, cfg.window, cfg.heads, cfg.scale())?;
    tape.add_bias(tape.matmul(att, p.get(l.wo))?, p.get(l.bo))
}

/// Pre-norm residual attention followed by a pre-norm residual GELU MLP.
pub fn transformer_block(
    tape: &Tape,
    p: &Bound,
    l: &BlockLayout,
    x: Var,
    mask: &[bool],
    cfg: &SpotterConfig,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.get(l.ln1_gain), p.get(l.ln1_bias), cfg.ln_eps)?;
    let x = tape.add(x, dc_mhsa(tape, p, &l.attention, h, mask, cfg)?)?;
    let h = tape.layer_norm(x, p.get(l.ln2_gain), p.get(l.ln2_bias), cfg.ln_eps)?;
    let h = tape.add_bias(tape.matmul(h, p.get(l.mlp_in))?, p.get(l.mlp_in_bias))?;
    let h = tape.gelu(h)?;
    let h = tape.add_bias(tape.matmul(h, p.get(l.mlp_out))?, p.get(l.mlp_out_bias))?;
    let out = tape.add(x, h)?;
    tape.mask_rows(out, mask)
}

/// OR over consecutive pairs.
pub fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    mask.chunks(2).map(|c| c.iter().any(|&m| m)).collect()
}

/// Transformer block, stride-2 convolution, then windowed attention on the
/// halved sequence. Returns the new level and its mask.
pub fn dtransformer_block(
    tape: &Tape,
    p: &Bound,
    l: &PyramidLayout,
    x: Var,
    mask: &[bool],
    cfg: &SpotterConfig,
) -> Result<(Var, Vec<bool>)> {
    let y = transformer_block(tape, p, &l.block, x, mask, cfg)?;
    let down = tape.conv1d(y, p.get(l.downsample), 2, Padding::Same)?;
    let down = tape.add_bias(down, p.get(l.downsample_bias))?;
    let half = downsample_mask(mask);
    let down = tape.mask_rows(down, &half)?;
    let z = dc_mhsa(tape, p, &l.attention, down, &half, cfg)?;
    let z = tape.mask_rows(z, &half)?;
    Ok((z, half))
}

pub fn embed(tape: &Tape, p: &Bound, layout: &Layout, x: Var, mask: &[bool]) -> Result<Var> {
    let mut h = tape.mask_rows(x, mask)?;
    for &(w, b) in &layout.embed {
        let c = tape.conv1d(h, p.get(w), 1, Padding::Same)?;
        let c = tape.relu(tape.add_bias(c, p.get(b))?)?;
        h = tape.mask_rows(c, mask)?;
    }
    Ok(h)
}

/// One pyramid level: features and validity mask.
#[derive(Debug, Clone)]
pub struct Level {
    pub features: Var,
    pub mask: Vec<bool>,
}

/// Shared conv + sigmoid head on every level, fused at full resolution by
/// averaging over the levels valid at each timestamp. Returns a length-`G`
/// vector that is exactly zero where `mask` is false.
pub fn decode_head(tape: &Tape, p: &Bound, layout: &Layout, levels: &[Level], mask: &[bool]) -> Result<Var> {
    let g = mask.len();
    let mut upsampled = Vec::with_capacity(levels.len());
    for (i, level) in levels.iter().enumerate() {
        let factor = 1usize << i;
        let logits = tape.conv1d(level.features, p.get(layout.decoder), 1, Padding::Same)?;
        let probs = tape.sigmoid(tape.add_bias(logits, p.get(layout.decoder_bias))?)?;
        let up = tape.repeat_rows(probs, factor, g)?;
        let up_mask: Vec<bool> = (0..g).map(|t| level.mask[t / factor] && mask[t]).collect();
        upsampled.push((up, up_mask));
    }
    let counts: Vec<usize> = (0..g)
        .map(|t| upsampled.iter().filter(|(_, m)| m[t]).count())
        .collect();
    let mut fused: Option<Var> = None;
    for (up, up_mask) in &upsampled {
        let weights: Vec<f64> = (0..g)
            .map(|t| if up_mask[t] { 1.0 / counts[t] as f64 } else { 0.0 })
            .collect();
        let term = tape.mul_const(*up, &weights)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let fused = fused.ok_or_else(|| Error::InvalidArgument("no pyramid levels".into()))?;
    tape.reshape(fused, vec![g])
}

pub struct ForwardOutput {
    /// Length-`G` foreground probabilities.
    pub probs: Var,
    pub levels: Vec<Level>,
}

pub fn forward_bound(tape: &Tape, params: &SpotterParams, p: &Bound, seq: &FeatureSequence) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if seq.width() != cfg.input_dim || seq.duration() != cfg.duration {
        return Err(Error::shape(
            "forward",
            seq.features.shape(),
            &[cfg.duration, cfg.input_dim],
        ));
    }
    let x = tape.constant(seq.features.clone());
    let mut h = embed(tape, p, &params.layout, x, &seq.mask)?;
    for block in &params.layout.blocks {
        h = transformer_block(tape, p, block, h, &seq.mask, cfg)?;
    }
    let mut levels = vec![Level {
        features: h,
        mask: seq.mask.clone(),
    }];
    for pl in &params.layout.pyramid {
        let last = levels.last().expect("level 0 present");
        let (z, m) = dtransformer_block(tape, p, pl, last.features, &last.mask, cfg)?;
        levels.push(Level { features: z, mask: m });
    }
    let probs = decode_head(tape, p, &params.layout, &levels, &seq.mask)?;
    Ok(ForwardOutput { probs, levels })
}

/// Inference: per-timestamp foreground probabilities.
pub fn predict(params: &SpotterParams, seq: &FeatureSequence) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out = forward_bound(&tape, params, &bound, seq)?;
    let probs = tape.value(out.probs).data().to_vec();
    Ok(probs)
}

/// Attention weights of one head inside one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWindow {
    pub start: usize,
    pub head: usize,
    /// `len × len`, row-major; row `i` holds query `start + i`.
    pub weights: Vec<f64>,
    pub key_mask: Vec<bool>,
}

impl AttentionWindow {
    pub fn len(&self) -> usize {
        self.key_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_mask.is_empty()
    }
}

/// Materialises the windowed attention matrices for `t × d` queries and keys.
pub fn attention_windows(
    q: &Tensor,
    k: &Tensor,
    mask: &[bool],
    window: usize,
    heads: usize,
    scale: f64,
) -> Result<Vec<AttentionWindow>> {
    if q.shape() != k.shape() || q.shape().len() != 2 || mask.len() != q.rows() {
        return Err(Error::shape("attention_windows", q.shape(), k.shape()));
    }
    if window == 0 || heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::InvalidArgument("invalid window or head count".into()));
    }
    let (t, d) = (q.rows(), q.cols());
    let zeros = vec![0.0; t * d];
    let (_, probs) = windowed_attention_forward(q.data(), k.data(), &zeros, t, d, mask, window, heads, scale);
    let mut out = Vec::new();
    let mut offset = 0;
    for start in (0..t).step_by(window) {
        let n = window.min(t - start);
        for head in 0..heads {
            out.push(AttentionWindow {
                start,
                head,
                weights: probs[offset..offset + n * n].to_vec(),
                key_mask: mask[start..start + n].to_vec(),
            });
            offset += n * n;
        }
    }
    Ok(out)
}
