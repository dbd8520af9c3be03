//! Cross-attention resampler blocks: a fixed set of queries attends to a
//! variable-length context.
//!
//! ```text
//! Q <- Q + MHA(LN(Q), LN(C), LN(C))
//! Q <- Q + FFN(LN(Q))
//! ```

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;

/// Inverted dropout driven by its own seeded stream.
pub struct Dropout {
    rate: f64,
    rng: Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply<'t>(&mut self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = x.dims();
        let keep = 1.0 / (1.0 - self.rate);
        let mask = (0..r * c)
            .map(|_| if self.rng.uniform() < self.rate { 0.0 } else { keep })
            .collect();
        x.mul(tape.constant(Tensor::matrix(r, c, mask)))
    }
}

pub(crate) fn maybe_drop<'t>(drop: &mut Option<&mut Dropout>, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.standardize(LN_EPS).mul(p.get(self.gain)).add(p.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), rng.normal_matrix(fan_in, fan_out, std));
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(p.get(self.weight));
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResamplerBlock {
    ln_q: LayerNorm,
    ln_ctx: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff_up: Linear,
    ff_down: Linear,
    heads: usize,
}

impl ResamplerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = FFN_MULT * dim;
        ResamplerBlock {
            ln_q: LayerNorm::new(store, &format!("{prefix}.ln_q"), dim),
            ln_ctx: LayerNorm::new(store, &format!("{prefix}.ln_ctx"), dim),
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, s, false, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, s, false, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, s, false, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, s, true, rng),
            ln_ff: LayerNorm::new(store, &format!("{prefix}.ln_ff"), dim),
            ff_up: Linear::new(store, &format!("{prefix}.ff_up"), dim, hidden, s, true, rng),
            ff_down: Linear::new(
                store,
                &format!("{prefix}.ff_down"),
                hidden,
                dim,
                1.0 / (hidden as f64).sqrt(),
                true,
                rng,
            ),
            heads,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        queries: Var<'t>,
        context: Var<'t>,
        drop: &mut Option<&mut Dropout>,
    ) -> Var<'t> {
        let dim = queries.dims().1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qn = self.ln_q.forward(p, queries);
        let cn = self.ln_ctx.forward(p, context);
        let q = self.wq.forward(p, qn);
        let k = self.wk.forward(p, cn);
        let v = self.wv.forward(p, cn);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let attn = qh.matmul(kh.transpose()).scale(scale).softmax_rows();
            outs.push(attn.matmul(vh));
        }
        let attended = self.wo.forward(p, Var::concat_cols(&outs));
        let x = queries.add(maybe_drop(drop, tape, attended));
        let ff = self
            .ff_down
            .forward(p, self.ff_up.forward(p, self.ln_ff.forward(p, x)).gelu());
        x.add(maybe_drop(drop, tape, ff))
    }
}
