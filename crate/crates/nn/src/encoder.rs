//! Desk-scale image encoders: a small CNN and a tiny vision transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::init::kaiming_uniform;
use crate::layers::linear;
use crate::{Error, Float, ParamSet, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SmallConv,
    TinyTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        TransformerSpec { blocks: 4, width: 64, heads: 4, patch: 8, mlp_ratio: 2 }
    }
}

/// Fixed per-channel input statistics, applied inside the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelNorm {
    fn default() -> Self {
        ChannelNorm { mean: [0.5; 3], std: [0.25; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub embedding_dim: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub transformer: TransformerSpec,
    #[serde(default)]
    pub normalization: ChannelNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            conv_layers: vec![
                ConvSpec { filters: 16, kernel: 3, stride: 1 },
                ConvSpec { filters: 32, kernel: 3, stride: 2 },
                ConvSpec { filters: 64, kernel: 3, stride: 2 },
            ],
            embedding_dim: 128,
            architecture: Architecture::SmallConv,
            transformer: TransformerSpec::default(),
            normalization: ChannelNorm::default(),
        }
    }
}

impl EncoderConfig {
    /// The transformer layout used for self-distillation at desk scale.
    pub fn tiny_transformer() -> Self {
        EncoderConfig {
            input_size: 64,
            conv_layers: Vec::new(),
            architecture: Architecture::TinyTransformer,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::Config("embedding_dim must be at least 8".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        match self.architecture {
            Architecture::SmallConv => {
                if self.conv_layers.is_empty() {
                    return Err(Error::Config("small_conv needs at least one conv layer".into()));
                }
                if self.conv_layers.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0) {
                    return Err(Error::Config("conv layer fields must be positive".into()));
                }
            }
            Architecture::TinyTransformer => {
                let t = &self.transformer;
                if t.blocks < 4 {
                    return Err(Error::Config("tiny_transformer needs at least 4 blocks".into()));
                }
                if t.heads == 0 || t.width % t.heads != 0 || t.width % 4 != 0 {
                    return Err(Error::Config("transformer width must divide by heads and by 4".into()));
                }
                if t.patch == 0 || self.input_size % t.patch != 0 {
                    return Err(Error::Config("input_size must be a multiple of the patch size".into()));
                }
            }
        }
        Ok(())
    }

    /// Width of each exposed block output (transformer only).
    pub fn block_width(&self) -> usize {
        match self.architecture {
            Architecture::SmallConv => self.conv_layers.last().map_or(0, |c| c.filters),
            Architecture::TinyTransformer => self.transformer.width,
        }
    }
}

/// Outputs of one encoder pass.
pub struct EncoderOutput {
    /// `[B, embedding_dim]`.
    pub embedding: Var,
    /// Mean-pooled per-block features `[B, width]`; transformer only.
    pub blocks: Vec<Var>,
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    proj: (usize, usize),
    ln2_g: usize,
    ln2_b: usize,
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Clone, Debug)]
enum Layout {
    Conv { layers: Vec<(usize, usize)>, fc: usize },
    Transformer { patch: (usize, usize), blocks: Vec<BlockParams>, ln_g: usize, ln_b: usize, fc: usize },
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Float = f32> {
    config: EncoderConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Float> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = match config.architecture {
            Architecture::SmallConv => {
                let mut cin = 3;
                let mut layers = Vec::new();
                for (i, c) in config.conv_layers.iter().enumerate() {
                    let fan_in = c.kernel * c.kernel * cin;
                    let w = params.add(
                        format!("conv{i}.weight"),
                        kaiming_uniform(&[c.kernel, c.kernel, cin, c.filters], fan_in, &mut rng),
                    );
                    let b = params.add(format!("conv{i}.bias"), Tensor::zeros(&[c.filters]));
                    layers.push((w, b));
                    cin = c.filters;
                }
                let fc = params.add("fc.weight", kaiming_uniform(&[cin, config.embedding_dim], cin, &mut rng));
                Layout::Conv { layers, fc }
            }
            Architecture::TinyTransformer => {
                let t = config.transformer;
                let w = t.width;
                let fan = t.patch * t.patch * 3;
                let pw = params.add("patch.weight", kaiming_uniform(&[t.patch, t.patch, 3, w], fan, &mut rng));
                let pb = params.add("patch.bias", Tensor::zeros(&[w]));
                let mut blocks = Vec::new();
                for bi in 0..t.blocks {
                    let p = |s: &str| format!("block{bi}.{s}");
                    let ln1_g = params.add(p("ln1.gamma"), Tensor::full(&[w], T::one()));
                    let ln1_b = params.add(p("ln1.beta"), Tensor::zeros(&[w]));
                    let q = add_linear(&mut params, &p("q"), w, w, &mut rng);
                    let k = add_linear(&mut params, &p("k"), w, w, &mut rng);
                    let v = add_linear(&mut params, &p("v"), w, w, &mut rng);
                    let proj = add_linear(&mut params, &p("proj"), w, w, &mut rng);
                    let ln2_g = params.add(p("ln2.gamma"), Tensor::full(&[w], T::one()));
                    let ln2_b = params.add(p("ln2.beta"), Tensor::zeros(&[w]));
                    let fc1 = add_linear(&mut params, &p("fc1"), w, w * t.mlp_ratio, &mut rng);
                    let fc2 = add_linear(&mut params, &p("fc2"), w * t.mlp_ratio, w, &mut rng);
                    blocks.push(BlockParams { ln1_g, ln1_b, q, k, v, proj, ln2_g, ln2_b, fc1, fc2 });
                }
                let ln_g = params.add("norm.gamma", Tensor::full(&[w], T::one()));
                let ln_b = params.add("norm.beta", Tensor::zeros(&[w]));
                let fc = params.add("fc.weight", kaiming_uniform(&[w, config.embedding_dim], w, &mut rng));
                Layout::Transformer { patch: (pw, pb), blocks, ln_g, ln_b, fc }
            }
        };
        Ok(Encoder { config, params, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Index of the final (bias-free) embedding projection.
    pub fn final_layer_index(&self) -> usize {
        match &self.layout {
            Layout::Conv { fc, .. } | Layout::Transformer { fc, .. } => *fc,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Shape(format!("encoder expects [B, H, W, 3], got {shape:?}")));
        }
        if shape[1] != shape[2] || shape[1] == 0 {
            return Err(Error::Shape(format!("encoder expects square non-empty crops, got {shape:?}")));
        }
        if let Architecture::TinyTransformer = self.config.architecture {
            if shape[1] % self.config.transformer.patch != 0 {
                return Err(Error::Shape(format!(
                    "crop size {} is not a multiple of patch {}",
                    shape[1], self.config.transformer.patch
                )));
            }
        }
        Ok(())
    }

    /// Encodes a `[B, H, W, 3]` batch of `[0, 1]` pixels. `H = W` must be
    /// square; crops other than `input_size` are accepted so multi-crop
    /// training can feed smaller local views.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<EncoderOutput> {
        let shape = g.shape(x).to_vec();
        self.check_input(&shape)?;
        let b = shape[0];
        let norm = &self.config.normalization;
        let inv_std = g.constant(Tensor::from_fn(&[3], |c| T::from_f64_lossy(1.0 / norm.std[c] as f64)));
        let shift = g.constant(Tensor::from_fn(&[3], |c| T::from_f64_lossy(-(norm.mean[c] / norm.std[c]) as f64)));
        let h = g.mul_broadcast(x, inv_std);
        let h = g.add_broadcast(h, shift);
        match &self.layout {
            Layout::Conv { layers, fc } => {
                let mut h = h;
                for (spec, &(w, bias)) in self.config.conv_layers.iter().zip(layers) {
                    let wv = g.param(&self.params, w);
                    let bv = g.param(&self.params, bias);
                    h = g.conv2d(h, wv, spec.stride, spec.kernel / 2);
                    h = g.add_broadcast(h, bv);
                    h = g.relu(h);
                }
                let pooled = g.mean_inner(h);
                let embedding = linear(g, &self.params, pooled, *fc, None);
                Ok(EncoderOutput { embedding, blocks: vec![pooled] })
            }
            Layout::Transformer { patch, blocks, ln_g, ln_b, fc } => {
                let t = self.config.transformer;
                let grid = shape[1] / t.patch;
                let tokens = grid * grid;
                let pw = g.param(&self.params, patch.0);
                let pb = g.param(&self.params, patch.1);
                let h = g.conv2d(h, pw, t.patch, 0);
                let h = g.add_broadcast(h, pb);
                let h = g.reshape(h, &[b, tokens, t.width]);
                let pos = g.constant(sincos_positions(grid, t.width));
                let mut h = g.add_broadcast(h, pos);
                let mut outs = Vec::with_capacity(blocks.len());
                for bp in blocks {
                    h = self.block(g, h, bp, b, tokens);
                    outs.push(g.mean_inner(h));
                }
                let pooled = g.mean_inner(h);
                let pooled = g.layer_norm(pooled, 1e-5);
                let lg = g.param(&self.params, *ln_g);
                let lb = g.param(&self.params, *ln_b);
                let pooled = g.mul_broadcast(pooled, lg);
                let pooled = g.add_broadcast(pooled, lb);
                let embedding = linear(g, &self.params, pooled, *fc, None);
                Ok(EncoderOutput { embedding, blocks: outs })
            }
        }
    }

    fn affine_ln(&self, g: &mut Graph<T>, x: Var, gamma: usize, beta: usize) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gv = g.param(&self.params, gamma);
        let bv = g.param(&self.params, beta);
        let n = g.mul_broadcast(n, gv);
        g.add_broadcast(n, bv)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, bp: &BlockParams, b: usize, tokens: usize) -> Var {
        let t = self.config.transformer;
        let w = t.width;
        let head_dim = w / t.heads;
        // attention
        let n = self.affine_ln(g, x, bp.ln1_g, bp.ln1_b);
        let flat = g.reshape(n, &[b * tokens, w]);
        let heads = |g: &mut Graph<T>, (wi, bi): (usize, usize)| {
            let y = linear(g, &self.params, flat, wi, Some(bi));
            let y = g.reshape(y, &[b, tokens, w]);
            g.split_heads(y, t.heads)
        };
        let q = heads(g, bp.q);
        let k = heads(g, bp.k);
        let v = heads(g, bp.v);
        let scores = g.batch_matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul_t(attn, v, false, false);
        let ctx = g.merge_heads(ctx, t.heads);
        let ctx = g.reshape(ctx, &[b * tokens, w]);
        let ctx = linear(g, &self.params, ctx, bp.proj.0, Some(bp.proj.1));
        let ctx = g.reshape(ctx, &[b, tokens, w]);
        let x = g.add(x, ctx);
        // mlp
        let n = self.affine_ln(g, x, bp.ln2_g, bp.ln2_b);
        let flat = g.reshape(n, &[b * tokens, w]);
        let hdn = linear(g, &self.params, flat, bp.fc1.0, Some(bp.fc1.1));
        let hdn = g.gelu(hdn);
        let out = linear(g, &self.params, hdn, bp.fc2.0, Some(bp.fc2.1));
        let out = g.reshape(out, &[b, tokens, w]);
        g.add(x, out)
    }

    /// Gradient-free convenience pass returning `[B, embedding_dim]`.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.embedding).clone())
    }
}

fn add_linear<T: Float>(params: &mut ParamSet<T>, name: &str, fan_in: usize, out: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let w = params.add(format!("{name}.weight"), kaiming_uniform(&[fan_in, out], fan_in, rng));
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[out]));
    (w, b)
}

/// Fixed 2-D sine/cosine position table `[grid*grid, width]`; half the
/// channels encode the row, half the column.
pub fn sincos_positions<T: Float>(grid: usize, width: usize) -> Tensor<T> {
    let quarter = width / 4;
    Tensor::from_fn(&[grid * grid, width], |idx| {
        let (tok, ch) = (idx / width, idx % width);
        let (row, col) = (tok / grid, tok % grid);
        let half = width / 2;
        let (pos, c) = if ch < half { (row, ch) } else { (col, ch - half) };
        let i = c % quarter.max(1);
        let freq = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
        let angle = pos as f64 * freq;
        T::from_f64_lossy(if c < quarter { angle.sin() } else { angle.cos() })
    })
}
