//! Per-agent universal visual codec.
//!
//! The encoder compresses a `T x d` latent rollout into `K_u = K + 2`
//! universal tokens of width `D` (row 0 global, row 1 style, the rest
//! semantic). The decoder turns any number of universal tokens into a
//! `K_img x d` perturbation of the receiver's image span plus a scalar gate.

mod checkpoint;
mod inject;
pub mod resampler;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::rollout::{LatentRollout, NormMatcher};
use crate::tensor::Tensor;

pub use checkpoint::CODEC_KIND;
pub use inject::{inject, inject_on_tape, resample, resample_matrix};
use resampler::{maybe_drop, Dropout, LayerNorm, Linear, ResamplerBlock};

pub const GLOBAL_ROW: usize = 0;
pub const STYLE_ROW: usize = 1;
/// Clip applied to decoded injection values.
pub const INJECTION_CLIP: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Universal token width `D`.
    pub universal_dim: usize,
    /// Semantic token count `K`; the message carries `K + 2` tokens.
    pub semantic_tokens: usize,
    /// Image query count `K_img`.
    pub image_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            universal_dim: 16,
            semantic_tokens: 6,
            image_queries: 8,
            layers: 2,
            heads: 2,
            dropout: 0.10,
        }
    }
}

impl CodecConfig {
    /// The full-size preset: D=512, K_u=1024, K_img=256, 6 layers of 8 heads.
    pub fn full_scale() -> Self {
        CodecConfig {
            universal_dim: 512,
            semantic_tokens: 1022,
            image_queries: 256,
            layers: 6,
            heads: 8,
            dropout: 0.10,
        }
    }

    /// `K_u = K + 2`.
    pub fn universal_tokens(&self) -> usize {
        self.semantic_tokens + 2
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.universal_dim == 0 || c.semantic_tokens == 0 || c.image_queries == 0 {
            return Err(Error::Contract("codec dimensions must be at least 1".into()));
        }
        if c.layers == 0 || c.heads == 0 || !c.universal_dim.is_multiple_of(c.heads) {
            return Err(Error::Contract(format!(
                "codec width {} must be divisible by {} heads",
                c.universal_dim, c.heads
            )));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Contract(format!("dropout {} not in [0, 1)", c.dropout)));
        }
        Ok(())
    }
}

/// `[mean, std, mean row norm]` of a rollout, over all entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleStats {
    pub mean: f64,
    pub std: f64,
    pub avg_row_norm: f64,
}

impl StyleStats {
    pub fn of(h: &Tensor) -> Self {
        let mean = h.mean();
        let var = h.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h.len() as f64;
        let rows = h.rows();
        let avg_row_norm = (0..rows)
            .map(|r| h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / rows as f64;
        StyleStats {
            mean,
            std: var.sqrt(),
            avg_row_norm,
        }
    }

    pub fn to_tensor(self) -> Tensor {
        Tensor::matrix(1, 3, vec![self.mean, self.std, self.avg_row_norm])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    AgentLocal,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalMessage {
    /// `K_u x D`.
    pub tokens: Tensor,
    pub space: Space,
    pub sender: String,
}

impl UniversalMessage {
    /// Number of reals carried by the message.
    pub fn payload_len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionInjection {
    /// `K_img x d`.
    pub delta: Tensor,
    pub gate: f64,
    pub target_agent: String,
}

impl VisionInjection {
    /// Replace the gate without the open-interval check; used to switch injection off in tests.
    pub fn with_gate_override(mut self, gate: f64) -> Self {
        self.gate = gate;
        self
    }
}

#[derive(Debug, Clone)]
struct EncoderLayout {
    projection: ParamId,
    queries: ParamId,
    blocks: Vec<ResamplerBlock>,
    style_in: Linear,
    style_out: Linear,
}

#[derive(Debug, Clone)]
struct DecoderLayout {
    queries: ParamId,
    blocks: Vec<ResamplerBlock>,
    ln_out: LayerNorm,
    out: Linear,
    gate: Linear,
}

/// Decoder outputs on a tape.
pub struct Decoded<'t> {
    /// `K_img x d`, before gating.
    pub delta: Var<'t>,
    /// `1 x 1` in `(0, 1)`.
    pub gate: Var<'t>,
    /// `1 x D` column mean of the input tokens.
    pub pooled: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Codec {
    model_id: String,
    d: usize,
    config: CodecConfig,
    norm: NormMatcher,
    params: ParamStore,
    enc: EncoderLayout,
    dec: DecoderLayout,
}

impl Codec {
    pub fn new(
        model_id: impl Into<String>,
        d: usize,
        config: CodecConfig,
        norm: NormMatcher,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if d == 0 {
            return Err(Error::Contract("backbone width must be positive".into()));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dim = config.universal_dim;
        let s = 1.0 / (dim as f64).sqrt();

        let projection = store.add("enc.projection", rng.normal_matrix(d, dim, 1.0 / (d as f64).sqrt()));
        let queries = store.add("enc.queries", rng.normal_matrix(config.universal_tokens(), dim, 1.0));
        let blocks = (0..config.layers)
            .map(|l| ResamplerBlock::new(&mut store, &format!("enc.block{l}"), dim, config.heads, &mut rng))
            .collect();
        let style_in = Linear::new(&mut store, "enc.style_in", 3, dim, 1.0 / 3f64.sqrt(), true, &mut rng);
        let style_out = Linear::new(&mut store, "enc.style_out", dim, dim, s, true, &mut rng);
        let enc = EncoderLayout {
            projection,
            queries,
            blocks,
            style_in,
            style_out,
        };

        let queries = store.add("dec.queries", rng.normal_matrix(config.image_queries, dim, 1.0));
        let blocks = (0..config.layers)
            .map(|l| ResamplerBlock::new(&mut store, &format!("dec.block{l}"), dim, config.heads, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "dec.ln_out", dim);
        let out = Linear::new(&mut store, "dec.out", dim, d, 0.1 * s, true, &mut rng);
        let gate = Linear::new(&mut store, "dec.gate", dim, 1, 0.1 * s, true, &mut rng);
        let dec = DecoderLayout {
            queries,
            blocks,
            ln_out,
            out,
            gate,
        };

        Ok(Codec {
            model_id: model_id.into(),
            d,
            config,
            norm,
            params: store,
            enc,
            dec,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn norm_matcher(&self) -> &NormMatcher {
        &self.norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Differentiable encoder: `T x d` rollout to `K_u x D` tokens.
    pub fn encode_on_tape<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        rollout: &Tensor,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var<'t>> {
        let (t, d) = rollout.dims2();
        if d != self.d {
            return Err(Error::dim(
                "encode",
                format!("rollout width {d}, codec expects {}", self.d),
            ));
        }
        rollout.ensure_finite("rollout")?;
        let dim = self.config.universal_dim;
        let h = tape.constant(rollout.clone());
        let z = h
            .matmul(p.get(self.enc.projection))
            .add(tape.constant(sinusoidal_positions(t, dim)));
        let mut q = p.get(self.enc.queries);
        for block in &self.enc.blocks {
            q = block.forward(tape, p, q, z, &mut dropout);
        }
        let stats = tape.constant(StyleStats::of(rollout).to_tensor());
        let style = self
            .enc
            .style_out
            .forward(p, self.enc.style_in.forward(p, stats).gelu());
        let k_u = self.config.universal_tokens();
        let mut rows = vec![q.slice_rows(GLOBAL_ROW, 1), q.slice_rows(STYLE_ROW, 1).add(style)];
        rows.push(q.slice_rows(2, k_u - 2));
        Ok(Var::concat_rows(&rows))
    }

    /// Differentiable decoder over an `n x D` token matrix.
    pub fn decode_on_tape<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        tokens: Var<'t>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Decoded<'t>> {
        let (n, dim) = tokens.dims();
        if dim != self.config.universal_dim {
            return Err(Error::dim(
                "decode",
                format!("token width {dim}, codec expects {}", self.config.universal_dim),
            ));
        }
        if n == 0 {
            return Err(Error::Decode("no tokens to decode".into()));
        }
        let mut q = p.get(self.dec.queries);
        for block in &self.dec.blocks {
            q = block.forward(tape, p, q, tokens, &mut dropout);
        }
        let normed = self.dec.ln_out.forward(p, q);
        let delta = maybe_drop(&mut dropout, tape, self.dec.out.forward(p, normed)).clamp(INJECTION_CLIP);
        let pooled = tokens.col_means();
        let gate = self.dec.gate.forward(p, pooled).sigmoid();
        Ok(Decoded { delta, gate, pooled })
    }

    /// Compress a rollout produced by this codec's own backbone.
    pub fn encode(&self, rollout: &LatentRollout) -> Result<UniversalMessage> {
        if rollout.source_agent != self.model_id {
            return Err(Error::Routing(format!(
                "rollout from {} given to the encoder of {}",
                rollout.source_agent, self.model_id
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let tokens = self.encode_on_tape(&tape, &p, &rollout.steps, None)?.value();
        tokens.ensure_finite("universal tokens")?;
        Ok(UniversalMessage {
            tokens,
            space: Space::AgentLocal,
            sender: self.model_id.clone(),
        })
    }

    pub fn decode(&self, tokens: &Tensor) -> Result<VisionInjection> {
        Ok(self.decode_with_pool(tokens)?.0)
    }

    /// Decode and also return the pooled row that fed the gate.
    pub fn decode_with_pool(&self, tokens: &Tensor) -> Result<(VisionInjection, Tensor)> {
        tokens.ensure_finite("decoder input")?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.decode_on_tape(&tape, &p, tape.constant(tokens.clone()), None)?;
        let delta = out.delta.value();
        delta.ensure_finite("injection")?;
        let inj = VisionInjection {
            delta,
            gate: out.gate.value().data()[0],
            target_agent: self.model_id.clone(),
        };
        Ok((inj, out.pooled.value()))
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Fixed sinusoidal position code, `t x dim`. Keeps token order visible to
/// the otherwise permutation-invariant cross-attention.
pub fn sinusoidal_positions(t: usize, dim: usize) -> Tensor {
    let mut out = vec![0.0; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(t, dim, out)
}
