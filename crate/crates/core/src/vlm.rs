//! A small frozen vision-language backbone.
//!
//! Pre-norm causal transformer with learned absolute positions. A prompt is a
//! token sequence in which a reserved image-marker token stands for one slot
//! of the image span; at those positions the embedding comes from a
//! continuous `L_img x d` matrix instead of the token table. Without an
//! explicit span, the span induced by a fixed dummy image is used.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{gelu, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Tensor};

const LN_EPS: f64 = 1e-5;

fn standardize_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * s));
    }
    Tensor::matrix(r, c, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub model_id: String,
    pub d: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Length of the image-token span.
    pub l_img: usize,
    pub image_marker: usize,
    pub eos_token: usize,
    pub max_positions: usize,
    pub ffn_mult: usize,
    /// Seed of the dummy image whose projection is the baseline span.
    pub dummy_seed: u64,
}

impl BackboneSpec {
    pub fn desk(model_id: impl Into<String>) -> Self {
        BackboneSpec {
            model_id: model_id.into(),
            d: 32,
            vocab_size: 64,
            n_layers: 2,
            n_heads: 2,
            l_img: 12,
            image_marker: 0,
            eos_token: 1,
            max_positions: 2048,
            ffn_mult: 4,
            dummy_seed: 0x5eed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(format!("{}: {m}", self.model_id)));
        if self.model_id.is_empty() {
            return fail("empty model id".into());
        }
        if self.d == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            return fail("d, n_heads, n_layers and ffn_mult must be positive".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return fail(format!("d={} is not divisible by n_heads={}", self.d, self.n_heads));
        }
        if self.l_img == 0 {
            return fail("l_img must be at least 1".into());
        }
        if self.image_marker == self.eos_token {
            return fail("image marker and eos token must differ".into());
        }
        if self.image_marker >= self.vocab_size || self.eos_token >= self.vocab_size {
            return fail("reserved tokens must lie inside the vocabulary".into());
        }
        if self.vocab_size <= self.reserved_tokens().len() {
            return fail("vocabulary has no room for ordinary tokens".into());
        }
        if self.max_positions <= self.l_img {
            return fail("max_positions must exceed the image span".into());
        }
        Ok(())
    }

    pub fn reserved_tokens(&self) -> [usize; 2] {
        [self.image_marker, self.eos_token]
    }

    pub fn is_reserved(&self, token: usize) -> bool {
        self.reserved_tokens().contains(&token)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

/// Image-span embeddings induced by the dummy image.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSpan {
    pub agent: String,
    pub dummy_seed: u64,
    pub values: Tensor,
}

/// Per-layer attention keys and values for every processed position.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PromptState {
    cache: KvCache,
    /// Final-layer, post-norm hidden state at the last position (`h_0`).
    pub boundary_hidden: Tensor,
    pub boundary_logits: Tensor,
    steps: u64,
}

impl PromptState {
    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Backbone position-steps spent building this state.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Bitwise equality of cache and boundary quantities.
    pub fn bitwise_eq(&self, other: &PromptState) -> bool {
        let cache_eq = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y));
        cache_eq(&self.cache.keys, &other.cache.keys)
            && cache_eq(&self.cache.values, &other.cache.values)
            && self.boundary_hidden.bitwise_eq(&other.boundary_hidden)
            && self.boundary_logits.bitwise_eq(&other.boundary_logits)
    }
}

/// Output of a differentiable forward pass.
pub struct Forward<'t> {
    /// Post-final-norm hidden states for the new positions.
    pub hidden: Var<'t>,
    pub keys: Vec<Var<'t>>,
    pub values: Vec<Var<'t>>,
}

pub struct FrozenBackbone {
    spec: BackboneSpec,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<Layer>,
    unembed: Tensor,
    vision_projector: Tensor,
    baseline: OnceLock<BaselineSpan>,
    positions_processed: AtomicU64,
}

impl std::fmt::Debug for FrozenBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenBackbone")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl FrozenBackbone {
    /// Draw every parameter from `N(0, 1/d)` and freeze.
    pub fn build(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = Rng::new(seed);
        let token_embedding = rng.normal_matrix(spec.vocab_size, d, std);
        let position_embedding = rng.normal_matrix(spec.max_positions, d, std);
        let hidden = spec.ffn_mult * d;
        let layers = (0..spec.n_layers)
            .map(|_| Layer {
                wq: rng.normal_matrix(d, d, std),
                wk: rng.normal_matrix(d, d, std),
                wv: rng.normal_matrix(d, d, std),
                wo: rng.normal_matrix(d, d, std),
                w_up: rng.normal_matrix(d, hidden, std),
                w_down: rng.normal_matrix(hidden, d, std),
            })
            .collect();
        let unembed = rng.normal_matrix(d, spec.vocab_size, std);
        let vision_projector = rng.normal_matrix(d, d, std);
        Ok(FrozenBackbone {
            spec,
            token_embedding,
            position_embedding,
            layers,
            unembed,
            vision_projector,
            baseline: OnceLock::new(),
            positions_processed: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn model_id(&self) -> &str {
        &self.spec.model_id
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.token_embedding
    }

    /// Total positions this backbone has processed (prompt tokens plus steps).
    pub fn positions_processed(&self) -> u64 {
        self.positions_processed.load(Ordering::Relaxed)
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out.push(("vision_projector".to_string(), &self.vision_projector));
        out
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.parameters() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The image-span placeholder followed by `text`.
    pub fn image_prompt(&self, text: &[usize]) -> Vec<usize> {
        let mut tokens = vec![self.spec.image_marker; self.spec.l_img];
        tokens.extend_from_slice(text);
        tokens
    }

    /// Project a seeded dummy image through the fixed vision projector.
    pub fn compute_baseline_span(&self, dummy_seed: u64) -> BaselineSpan {
        let d = self.spec.d;
        let pixels = Rng::new(dummy_seed).normal_matrix(self.spec.l_img, d, 1.0 / (d as f64).sqrt());
        let values = pixels.matmul(&self.vision_projector).expect("projector is d x d");
        BaselineSpan {
            agent: self.spec.model_id.clone(),
            dummy_seed,
            values,
        }
    }

    /// Baseline span for `BackboneSpec::dummy_seed`, computed on first use.
    pub fn baseline_span(&self) -> &BaselineSpan {
        self.baseline
            .get_or_init(|| self.compute_baseline_span(self.spec.dummy_seed))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<usize> {
        let mut markers = 0;
        for &t in tokens {
            if t >= self.spec.vocab_size {
                return Err(Error::Vocab {
                    token: t,
                    vocab_size: self.spec.vocab_size,
                });
            }
            if t == self.spec.image_marker {
                markers += 1;
            }
        }
        if markers != 0 && markers != self.spec.l_img {
            return Err(Error::dim(
                "encode_prompt",
                format!("{markers} image markers, span length is {}", self.spec.l_img),
            ));
        }
        Ok(markers)
    }

    fn check_span(&self, span: (usize, usize)) -> Result<()> {
        if span != (self.spec.l_img, self.spec.d) {
            return Err(Error::dim(
                "image span",
                format!(
                    "expected {}x{}, got {}x{}",
                    self.spec.l_img, self.spec.d, span.0, span.1
                ),
            ));
        }
        Ok(())
    }

    /// Input embeddings for `tokens` as an `n x d` tape value, with image-marker
    /// positions filled from `span` in order.
    pub fn embed_on_tape<'t>(&self, tape: &'t Tape, tokens: &[usize], span: Option<Var<'t>>) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        let markers = self.check_tokens(tokens)?;
        let span = match (markers, span) {
            (0, Some(_)) => {
                return Err(Error::Contract(
                    "image span supplied but the prompt has no image markers".into(),
                ))
            }
            (0, None) => None,
            (_, Some(s)) => {
                self.check_span(s.dims())?;
                Some(s)
            }
            (_, None) => Some(tape.constant(self.baseline_span().values.clone())),
        };

        let mut parts = Vec::new();
        let mut text_rows: Vec<f64> = Vec::new();
        let mut span_row = 0;
        let d = self.spec.d;
        let flush = |rows: &mut Vec<f64>, parts: &mut Vec<Var<'t>>| {
            if !rows.is_empty() {
                let n = rows.len() / d;
                parts.push(tape.constant(Tensor::matrix(n, d, std::mem::take(rows))));
            }
        };
        let mut i = 0;
        while i < tokens.len() {
            if tokens[i] == self.spec.image_marker {
                flush(&mut text_rows, &mut parts);
                let start = i;
                while i < tokens.len() && tokens[i] == self.spec.image_marker {
                    i += 1;
                }
                let run = i - start;
                let s = span.expect("markers imply a span");
                parts.push(if run == self.spec.l_img {
                    s
                } else {
                    s.slice_rows(span_row, run)
                });
                span_row += run;
            } else {
                text_rows.extend_from_slice(self.token_embedding.row(tokens[i]));
                i += 1;
            }
        }
        flush(&mut text_rows, &mut parts);
        Ok(Var::concat_rows(&parts))
    }

    /// Differentiable forward over `x` (`n x d` input embeddings) continuing
    /// after the cached positions in `past`.
    pub fn forward_on_tape<'t>(&self, tape: &'t Tape, x: Var<'t>, past: Option<&KvCache>) -> Result<Forward<'t>> {
        let (n, d) = x.dims();
        if d != self.spec.d {
            return Err(Error::dim(
                "forward",
                format!("input width {d}, model d={}", self.spec.d),
            ));
        }
        let start = past.map_or(0, |p| p.len());
        if start + n > self.spec.max_positions {
            return Err(Error::Contract(format!(
                "{} positions exceed max_positions={}",
                start + n,
                self.spec.max_positions
            )));
        }
        self.positions_processed.fetch_add(n as u64, Ordering::Relaxed);

        let pos = tape.constant(self.position_embedding.slice_rows(start, n));
        let mut h = x.add(pos);
        let heads = self.spec.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());

        for (li, layer) in self.layers.iter().enumerate() {
            let a = h.standardize(LN_EPS);
            let q = a.matmul(tape.constant(layer.wq.clone()));
            let k_new = a.matmul(tape.constant(layer.wk.clone()));
            let v_new = a.matmul(tape.constant(layer.wv.clone()));
            let (k, v) = match past {
                Some(p) => (
                    Var::concat_rows(&[tape.constant(p.keys[li].clone()), k_new]),
                    Var::concat_rows(&[tape.constant(p.values[li].clone()), v_new]),
                ),
                None => (k_new, v_new),
            };
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = q.slice_cols(hd * dh, dh);
                let kh = k.slice_cols(hd * dh, dh);
                let vh = v.slice_cols(hd * dh, dh);
                let p = qh.matmul(kh.transpose()).scale(scale).causal_softmax(start);
                outs.push(p.matmul(vh));
            }
            let attn = Var::concat_cols(&outs).matmul(tape.constant(layer.wo.clone()));
            h = h.add(attn);
            let f = h
                .standardize(LN_EPS)
                .matmul(tape.constant(layer.w_up.clone()))
                .gelu()
                .matmul(tape.constant(layer.w_down.clone()));
            h = h.add(f);
            keys.push(k);
            values.push(v);
        }
        Ok(Forward {
            hidden: h.standardize(LN_EPS),
            keys,
            values,
        })
    }

    /// Next-token logits for a `1 x d` hidden row.
    pub fn logits_on_tape<'t>(&self, tape: &'t Tape, hidden_row: Var<'t>) -> Var<'t> {
        hidden_row.matmul(tape.constant(self.unembed.clone()))
    }

    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let h = Tensor::matrix(1, self.spec.d, hidden.data().to_vec());
        Ok(Tensor::vector(h.matmul(&self.unembed)?.into_data()))
    }

    fn check_positions(&self, total: usize) -> Result<()> {
        if total > self.spec.max_positions {
            return Err(Error::Contract(format!(
                "{total} positions exceed max_positions={}",
                self.spec.max_positions
            )));
        }
        Ok(())
    }

    /// Causal attention for the query row `q` over the first `n` cached rows,
    /// heads concatenated into `out`.
    fn attend(&self, q: &[f64], keys: &Tensor, values: &Tensor, n: usize, out: &mut [f64]) {
        let dh = self.spec.d / self.spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut p = vec![0.0; n];
        for hd in 0..self.spec.n_heads {
            let cols = hd * dh..(hd + 1) * dh;
            let qh = &q[cols.clone()];
            for (j, pj) in p.iter_mut().enumerate() {
                let dot = qh
                    .iter()
                    .zip(&keys.row(j)[cols.clone()])
                    .fold(0.0, |s, (a, b)| s + a * b);
                *pj = dot * scale;
            }
            softmax_in_place(&mut p);
            let o = &mut out[cols];
            o.fill(0.0);
            for (j, pj) in p.iter().enumerate() {
                for (oc, vc) in o.iter_mut().zip(&values.row(j)[hd * dh..(hd + 1) * dh]) {
                    *oc += pj * vc;
                }
            }
        }
    }

    fn feed_forward(&self, layer: &Layer, h: &Tensor) -> Result<Tensor> {
        standardize_rows(h).matmul(&layer.w_up)?.map(gelu).matmul(&layer.w_down)
    }

    /// Inference forward over `x` (rows of input embeddings) after the cached
    /// positions, appending to `cache`. Same arithmetic as `forward_on_tape`
    /// without recording a graph; returns the final post-norm hidden rows.
    fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let (n, d) = x.dims2();
        let start = cache.len();
        self.check_positions(start + n)?;
        self.positions_processed.fetch_add(n as u64, Ordering::Relaxed);
        let mut h = x.add(&self.position_embedding.slice_rows(start, n))?;
        for (li, layer) in self.layers.iter().enumerate() {
            let a = standardize_rows(&h);
            let q = a.matmul(&layer.wq)?;
            let (k, v) = (a.matmul(&layer.wk)?, a.matmul(&layer.wv)?);
            for i in 0..n {
                cache.keys[li].push_row(k.row(i));
                cache.values[li].push_row(v.row(i));
            }
            let mut mixed = vec![0.0; n * d];
            for i in 0..n {
                self.attend(
                    q.row(i),
                    &cache.keys[li],
                    &cache.values[li],
                    start + i + 1,
                    &mut mixed[i * d..(i + 1) * d],
                );
            }
            h = h.add(&Tensor::matrix(n, d, mixed).matmul(&layer.wo)?)?;
            h = h.add(&self.feed_forward(layer, &h)?)?;
        }
        Ok(standardize_rows(&h))
    }

    fn empty_cache(&self) -> KvCache {
        let empty = || Tensor::matrix(0, self.spec.d, Vec::new());
        KvCache {
            keys: self.layers.iter().map(|_| empty()).collect(),
            values: self.layers.iter().map(|_| empty()).collect(),
        }
    }

    fn set_boundary(&self, state: &mut PromptState, hidden: &Tensor) -> Result<()> {
        let last = hidden.slice_rows(hidden.rows() - 1, 1);
        state.boundary_logits = Tensor::vector(last.matmul(&self.unembed)?.into_data());
        state.boundary_hidden = Tensor::vector(last.into_data());
        Ok(())
    }

    /// Process a prompt. Image-marker positions take `image_span`, or the
    /// baseline span when none is given.
    pub fn encode_prompt(&self, tokens: &[usize], image_span: Option<&Tensor>) -> Result<PromptState> {
        if let Some(s) = image_span {
            self.check_span(s.dims2())?;
            s.ensure_finite("image span")?;
        }
        let x = self.embed(tokens, image_span)?;
        let mut state = PromptState {
            cache: self.empty_cache(),
            boundary_hidden: Tensor::vector(vec![0.0; self.spec.d]),
            boundary_logits: Tensor::vector(vec![0.0; self.spec.vocab_size]),
            steps: tokens.len() as u64,
        };
        let hidden = self.forward_cached(&x, &mut state.cache)?;
        self.set_boundary(&mut state, &hidden)?;
        Ok(state)
    }

    /// One autoregressive step consuming a continuous embedding. Returns the
    /// new boundary hidden state; the cache grows by one position.
    pub fn step_with_embedding(&self, state: &mut PromptState, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.spec.d {
            return Err(Error::dim(
                "step_with_embedding",
                format!("embedding of length {}", x.len()),
            ));
        }
        x.ensure_finite("step embedding")?;
        let hidden = self.forward_cached(&Tensor::matrix(1, self.spec.d, x.data().to_vec()), &mut state.cache)?;
        self.set_boundary(state, &hidden)?;
        state.steps += 1;
        Ok(state.boundary_hidden.clone())
    }

    pub fn step_with_token(&self, state: &mut PromptState, token: usize) -> Result<Tensor> {
        if token >= self.spec.vocab_size {
            return Err(Error::Vocab {
                token,
                vocab_size: self.spec.vocab_size,
            });
        }
        let x = Tensor::vector(self.token_embedding.row(token).to_vec());
        self.step_with_embedding(state, &x)
    }

    /// Uncached forward over raw input embeddings; returns all hidden rows.
    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_finite("input embeddings")?;
        let tape = Tape::new();
        let fwd = self.forward_on_tape(&tape, tape.constant(x.clone()), None)?;
        Ok(fwd.hidden.value())
    }

    /// Raw input embeddings of a prompt (no positions added).
    pub fn embed(&self, tokens: &[usize], image_span: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let span = image_span.map(|s| tape.constant(s.clone()));
        Ok(self.embed_on_tape(&tape, tokens, span)?.value())
    }

    /// Greedy decoding of up to `budget` tokens. Stops early at the eos token;
    /// the image marker is never emitted.
    pub fn generate_greedy(&self, state: &mut PromptState, budget: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < budget {
            let token = self.argmax_token(&state.boundary_logits);
            if token == self.spec.eos_token {
                break;
            }
            out.push(token);
            if out.len() == budget || state.len() >= self.spec.max_positions {
                break;
            }
            self.step_with_token(state, token)?;
        }
        Ok(out)
    }

    fn argmax_token(&self, logits: &Tensor) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, &v) in logits.data().iter().enumerate() {
            if i != self.spec.image_marker && v > best.1 {
                best = (i, v);
            }
        }
        best.0
    }
}
