//! Student acoustic encoder, frozen teacher text encoder, the cross-modal
//! adapter and the prediction head.
//!
//! Student pipeline for an utterance `X` (T x d):
//!
//! ```text
//! X -> subsample (two stride-2 convs + linear) + positional encoding
//!   -> L conformer blocks                      = H~   (T_a x d_a)
//!   -> FC2                                     = H    (T_a x d_t)
//! adapter: H~ + s * LN(FC3(LN(H)))             = H_at (T_a x d_a)
//! head:    log_softmax(FC1(H~ or H_at))
//! ```
//!
//! The teacher wraps a token sequence in `CLS ... SEP`, embeds it and runs
//! a stack of post-norm self-attention layers. Its parameters are never
//! bound as trainable and it only ever runs on its own throwaway graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Array, Graph, GraphError, Var};
use crate::ctc::{TokenSequence, BLANK, CLS, FIRST_CHAR_ID, SEP};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::probe;

/// Shortest input the two stride-2 convolutions accept.
pub const MIN_FRAMES: usize = 8;

const SUBSAMPLE_KERNEL: usize = 3;
const SUBSAMPLE_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("utterance has {frames} frames; at least {min} are required")]
    TooShort { frames: usize, min: usize },
    #[error("input has {got} feature columns, encoder expects {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("reserved id {id} at position {position} in teacher input")]
    ReservedToken { position: usize, id: usize },
    #[error("token id {id} outside a vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Raw acoustic feature width `d`.
    pub feature_dim: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub teacher_dim: usize,
    pub teacher_layers: usize,
    /// Output classes including the reserved ids.
    pub vocab_size: usize,
    pub adapter_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            num_blocks: 2,
            model_dim: 16,
            ffn_dim: 32,
            conv_kernel: 5,
            teacher_dim: 24,
            teacher_layers: 2,
            vocab_size: 30,
            adapter_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("teacher_dim", self.teacher_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(EncoderError::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.vocab_size <= FIRST_CHAR_ID {
            return Err(EncoderError::Config(format!(
                "vocab_size {} leaves no room past the reserved ids",
                self.vocab_size
            )));
        }
        if !(self.adapter_scale >= 0.0) {
            return Err(EncoderError::Config("adapter_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Output length of the subsampler for `frames` input frames.
pub fn subsampled_len(frames: usize) -> usize {
    let once = |t: usize| {
        if t < SUBSAMPLE_KERNEL {
            0
        } else {
            (t - SUBSAMPLE_KERNEL) / SUBSAMPLE_STRIDE + 1
        }
    };
    once(once(frames))
}

/// Absolute sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array {
    Array::from_shape_fn((len, dim), |(pos, i)| {
        let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: init.uniform(&format!("{name}.weight"), inputs, outputs, bound),
            bias: init.zeros(&format!("{name}.bias"), 1, outputs),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        g.add_row(g.matmul(x, p[self.weight])?, p[self.bias])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gain: init.ones(&format!("{name}.gain"), 1, dim),
            bias: init.zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Single-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    dim: usize,
}

impl SelfAttention {
    fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            output: Linear::new(init, &format!("{name}.output"), dim, dim),
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let scores = g.scale(g.matmul(q, g.transpose(k))?, 1.0 / (self.dim as f64).sqrt());
        let context = g.matmul(g.softmax(scores), v)?;
        self.output.forward(g, p, context)
    }
}

/// Pre-norm feed-forward module: LN, expand, Swish, contract.
#[derive(Debug, Clone)]
pub struct FeedForward {
    norm: LayerNorm,
    expand: Linear,
    contract: Linear,
}

impl FeedForward {
    fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            expand: Linear::new(init, &format!("{name}.expand"), dim, hidden),
            contract: Linear::new(init, &format!("{name}.contract"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        let y = self.norm.forward(g, p, x)?;
        let y = g.swish(self.expand.forward(g, p, y)?);
        self.contract.forward(g, p, y)
    }
}

/// LN, pointwise conv to 2d, GLU, depthwise conv, LN, Swish, pointwise conv.
#[derive(Debug, Clone)]
pub struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
    dim: usize,
}

impl ConvModule {
    fn new(init: &mut Init, name: &str, dim: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            pointwise_in: Linear::new(init, &format!("{name}.pointwise_in"), dim, 2 * dim),
            depthwise: init.uniform(
                &format!("{name}.depthwise.weight"),
                kernel,
                dim,
                1.0 / (kernel as f64).sqrt(),
            ),
            depthwise_bias: init.zeros(&format!("{name}.depthwise.bias"), 1, dim),
            mid_norm: LayerNorm::new(init, &format!("{name}.mid_norm"), dim),
            pointwise_out: Linear::new(init, &format!("{name}.pointwise_out"), dim, dim),
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        let y = self.norm.forward(g, p, x)?;
        let y = self.pointwise_in.forward(g, p, y)?;
        let gate = g.sigmoid(g.col_slice(y, self.dim, self.dim)?);
        let y = g.mul(g.col_slice(y, 0, self.dim)?, gate)?;
        let y = g.add_row(g.depthwise_conv(y, p[self.depthwise])?, p[self.depthwise_bias])?;
        let y = g.swish(self.mid_norm.forward(g, p, y)?);
        self.pointwise_out.forward(g, p, y)
    }
}

/// Intermediate values of one conformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockStages {
    pub after_ffn1: Var,
    pub after_attention: Var,
    pub after_conv: Var,
    pub after_ffn2: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ffn1: FeedForward,
    attention_norm: LayerNorm,
    attention: SelfAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    fn new(init: &mut Init, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            ffn1: FeedForward::new(init, &format!("{name}.ffn1"), d, cfg.ffn_dim),
            attention_norm: LayerNorm::new(init, &format!("{name}.attention_norm"), d),
            attention: SelfAttention::new(init, &format!("{name}.attention"), d),
            conv: ConvModule::new(init, &format!("{name}.conv"), d, cfg.conv_kernel),
            ffn2: FeedForward::new(init, &format!("{name}.ffn2"), d, cfg.ffn_dim),
            final_norm: LayerNorm::new(init, &format!("{name}.final_norm"), d),
        }
    }

    /// Half-step FFN, attention, convolution, half-step FFN, each with a
    /// residual connection, then a closing layer norm.
    pub fn stages(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<BlockStages, GraphError> {
        let after_ffn1 = g.add(x, g.scale(self.ffn1.forward(g, p, x)?, 0.5))?;
        let attended = self
            .attention
            .forward(g, p, self.attention_norm.forward(g, p, after_ffn1)?)?;
        let after_attention = g.add(after_ffn1, attended)?;
        let after_conv = g.add(after_attention, self.conv.forward(g, p, after_attention)?)?;
        let after_ffn2 = g.add(after_conv, g.scale(self.ffn2.forward(g, p, after_conv)?, 0.5))?;
        let output = self.final_norm.forward(g, p, after_ffn2)?;
        Ok(BlockStages {
            after_ffn1,
            after_attention,
            after_conv,
            after_ffn2,
            output,
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> std::result::Result<Var, GraphError> {
        Ok(self.stages(g, p, x)?.output)
    }
}

#[derive(Debug, Clone)]
struct Subsampler {
    conv1: Linear,
    conv2: Linear,
    projection: Linear,
}

/// Trainable acoustic side: subsampler, conformer stack, FC1 head, and the
/// FC2/FC3/LN adapter.
#[derive(Debug, Clone)]
pub struct Student {
    pub config: EncoderConfig,
    pub params: ParamSet,
    subsampler: Subsampler,
    blocks: Vec<ConformerBlock>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    adapter_norm_in: LayerNorm,
    adapter_norm_out: LayerNorm,
}

impl Student {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut init = Init {
            set: &mut params,
            rng: &mut rng,
        };
        let (d_in, d_a, d_t) = (config.feature_dim, config.model_dim, config.teacher_dim);
        let subsampler = Subsampler {
            conv1: Linear::new(&mut init, "subsample.conv1", SUBSAMPLE_KERNEL * d_in, d_a),
            conv2: Linear::new(&mut init, "subsample.conv2", SUBSAMPLE_KERNEL * d_a, d_a),
            projection: Linear::new(&mut init, "subsample.projection", d_a, d_a),
        };
        let blocks = (0..config.num_blocks)
            .map(|i| ConformerBlock::new(&mut init, &format!("block{i}"), config))
            .collect();
        let fc1 = Linear::new(&mut init, "fc1", d_a, config.vocab_size);
        let fc2 = Linear::new(&mut init, "fc2", d_a, d_t);
        let fc3 = Linear::new(&mut init, "fc3", d_t, d_a);
        let adapter_norm_in = LayerNorm::new(&mut init, "adapter.norm_in", d_t);
        let adapter_norm_out = LayerNorm::new(&mut init, "adapter.norm_out", d_a);
        Ok(Self {
            config: config.clone(),
            params,
            subsampler,
            blocks,
            fc1,
            fc2,
            fc3,
            adapter_norm_in,
            adapter_norm_out,
        })
    }

    pub fn blocks(&self) -> &[ConformerBlock] {
        &self.blocks
    }

    pub fn bind(&self, g: &Graph) -> Bound {
        self.params.bind(g, true)
    }

    /// Two stride-2 convolutions with ReLU, a linear layer, plus positions.
    pub fn subsample(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let (frames, dim) = g.shape(x);
        if dim != self.config.feature_dim {
            return Err(EncoderError::FeatureDim {
                got: dim,
                expected: self.config.feature_dim,
            });
        }
        if frames < MIN_FRAMES {
            return Err(EncoderError::TooShort {
                frames,
                min: MIN_FRAMES,
            });
        }
        let s = &self.subsampler;
        let y = g.unfold(x, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE)?;
        let y = g.relu(s.conv1.forward(g, p, y)?);
        let y = g.unfold(y, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE)?;
        let y = g.relu(s.conv2.forward(g, p, y)?);
        let y = s.projection.forward(g, p, y)?;
        let (len, d_a) = g.shape(y);
        let positions = g.constant(sinusoidal_positions(len, d_a));
        Ok(g.add(y, positions)?)
    }

    /// Returns `(H~, H)`: the conformer output and its FC2 image.
    pub fn encode(&self, g: &Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = self.subsample(g, p, x)?;
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
        }
        let projected = self.fc2.forward(g, p, h)?;
        Ok((h, projected))
    }

    /// `H~ + s * LN(FC3(LN(H)))`.
    pub fn fuse(&self, g: &Graph, p: &Bound, h_tilde: Var, h: Var, scale: f64) -> Result<Var> {
        let adapted = self.fc3.forward(g, p, self.adapter_norm_in.forward(g, p, h)?)?;
        let adapted = self.adapter_norm_out.forward(g, p, adapted)?;
        Ok(g.add(h_tilde, g.scale(adapted, scale))?)
    }

    /// Log-probabilities over the full vocabulary, one row per frame.
    pub fn predict(&self, g: &Graph, p: &Bound, features: Var) -> Result<Var> {
        Ok(g.log_softmax(self.fc1.forward(g, p, features)?))
    }

    /// Inference-only forward pass on plain values.
    pub fn infer(&self, features: &Array, use_adapter: bool) -> Result<Array> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(features.clone());
        let (h_tilde, h) = self.encode(&g, &p, x)?;
        let top = if use_adapter {
            self.fuse(&g, &p, h_tilde, h, self.config.adapter_scale)?
        } else {
            h_tilde
        };
        let out = self.predict(&g, &p, top)?;
        Ok((*g.value(out)).clone())
    }
}

#[derive(Debug, Clone)]
struct TeacherLayer {
    attention: SelfAttention,
    attention_norm: LayerNorm,
    expand: Linear,
    contract: Linear,
    ffn_norm: LayerNorm,
}

/// Frozen text encoder standing in for a pretrained language model.
#[derive(Debug, Clone)]
pub struct Teacher {
    params: ParamSet,
    embedding: ParamId,
    layers: Vec<TeacherLayer>,
    vocab_size: usize,
    dim: usize,
}

impl Teacher {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut init = Init {
            set: &mut params,
            rng: &mut rng,
        };
        let d = config.teacher_dim;
        let embedding = init.uniform("teacher.embedding", config.vocab_size, d, 3f64.sqrt());
        let layers = (0..config.teacher_layers)
            .map(|i| {
                let name = format!("teacher.layer{i}");
                TeacherLayer {
                    attention: SelfAttention::new(&mut init, &format!("{name}.attention"), d),
                    attention_norm: LayerNorm::new(&mut init, &format!("{name}.attention_norm"), d),
                    expand: Linear::new(&mut init, &format!("{name}.expand"), d, 2 * d),
                    contract: Linear::new(&mut init, &format!("{name}.contract"), 2 * d, d),
                    ffn_norm: LayerNorm::new(&mut init, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        Ok(Self {
            params,
            embedding,
            layers,
            vocab_size: config.vocab_size,
            dim: d,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Z` for `[CLS, tokens..., SEP]`, shape `(len + 2) x d_t`.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<Array> {
        for (position, &id) in tokens.ids().iter().enumerate() {
            if id == BLANK || id == CLS || id == SEP {
                return Err(EncoderError::ReservedToken { position, id });
            }
            if id >= self.vocab_size {
                return Err(EncoderError::OutOfVocabulary {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        probe::record_teacher_pass();
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(tokens.ids());
        ids.push(SEP);

        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let embedded = g.gather_rows(p[self.embedding], &ids)?;
        let positions = g.constant(sinusoidal_positions(ids.len(), self.dim));
        let mut x = g.add(embedded, positions)?;
        for layer in &self.layers {
            let attended = layer.attention.forward(&g, &p, x)?;
            x = layer.attention_norm.forward(&g, &p, g.add(x, attended)?)?;
            let hidden = g.swish(layer.expand.forward(&g, &p, x)?);
            let ff = layer.contract.forward(&g, &p, hidden)?;
            x = layer.ffn_norm.forward(&g, &p, g.add(x, ff)?)?;
        }
        Ok((*g.value(x)).clone())
    }
}
