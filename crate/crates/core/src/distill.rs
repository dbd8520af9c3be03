//! Label-free teacher-student distillation of a codec.
//!
//! The teacher reads `image(baseline) ⊕ base ⊕ anchor`; the student reads
//! `image(injected) ⊕ base`, where the injection is decoded from the
//! teacher-side rollout. Only codec parameters receive updates; gradients
//! flow through the frozen backbone on the tape.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::resampler::Dropout;
use crate::codec::{inject_on_tape, Codec, VisionInjection, INJECTION_CLIP};
use crate::error::{Error, Result};
use crate::params::{clip_global_norm, AdamW, AdamWConfig, Bound};
use crate::rng::Rng;
use crate::rollout::{latent_rollout, LatentRollout, NormMatcher};
use crate::tensor::Tensor;
use crate::vlm::{BackboneSpec, FrozenBackbone};

/// Clip applied to logits entering the loss.
pub const LOGIT_CLIP: f64 = 1e4;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorText {
    pub id: String,
    pub text: Vec<usize>,
}

impl AnchorText {
    pub fn new(id: impl Into<String>, text: Vec<usize>) -> Self {
        AnchorText { id: id.into(), text }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Contract(format!("anchor {} is empty", self.id)));
        }
        for &t in &self.text {
            if t >= spec.vocab_size {
                return Err(Error::Vocab {
                    token: t,
                    vocab_size: spec.vocab_size,
                });
            }
            if t == spec.image_marker {
                return Err(Error::Contract(format!("anchor {} contains the image marker", self.id)));
            }
        }
        Ok(())
    }
}

/// Seeded random anchors of length 8..=24 over the non-reserved vocabulary.
pub fn synthetic_anchors(spec: &BackboneSpec, n: usize, seed: u64) -> Vec<AnchorText> {
    let mut rng = Rng::new(seed);
    let usable: Vec<usize> = (0..spec.vocab_size).filter(|&t| !spec.is_reserved(t)).collect();
    (0..n)
        .map(|i| {
            let len = rng.range_inclusive(8, 24);
            let text = (0..len).map(|_| usable[rng.below(usable.len())]).collect();
            AnchorText::new(format!("anchor-{i}"), text)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_h: f64,
    pub lambda_kl: f64,
    pub lambda_rms: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Rollout length `T` of the teacher-side rollout.
    pub rollout_len: usize,
    /// Task prompt shared by teacher and student (text tokens only).
    pub base_prompt: Vec<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_h: 1.0,
            lambda_kl: 0.25,
            lambda_rms: 0.1,
            tau: 1.0,
            lr: 2e-4,
            weight_decay: 0.01,
            steps: 200,
            batch_size: 2,
            grad_clip_norm: 1.0,
            seed: 0,
            rollout_len: 16,
            base_prompt: vec![2, 3, 4, 5],
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_h, self.lambda_kl, self.lambda_rms, self.weight_decay];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Contract(
                "loss weights and weight decay must be nonnegative".into(),
            ));
        }
        let positive = [self.tau, self.lr, self.grad_clip_norm];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Contract("tau, lr and grad_clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.rollout_len == 0 {
            return Err(Error::Contract("batch_size and rollout_len must be positive".into()));
        }
        Ok(())
    }
}

/// Teacher-side boundary quantities and rollout for one anchor.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub anchor_id: String,
    pub h_text: Tensor,
    pub l_text: Tensor,
    pub rollout: LatentRollout,
}

pub fn teacher_prompt(backbone: &FrozenBackbone, base_prompt: &[usize], anchor: &AnchorText) -> Vec<usize> {
    let mut text = base_prompt.to_vec();
    text.extend_from_slice(&anchor.text);
    backbone.image_prompt(&text)
}

pub fn teacher_pass(
    backbone: &FrozenBackbone,
    matcher: &NormMatcher,
    anchor: &AnchorText,
    base_prompt: &[usize],
    rollout_len: usize,
) -> Result<TeacherOutput> {
    anchor.validate(backbone.spec())?;
    let state = backbone.encode_prompt(&teacher_prompt(backbone, base_prompt, anchor), None)?;
    let rollout = latent_rollout(backbone, &state, matcher, rollout_len)?;
    Ok(TeacherOutput {
        anchor_id: anchor.id.clone(),
        h_text: state.boundary_hidden,
        l_text: state.boundary_logits,
        rollout,
    })
}

/// Student quantities on a tape.
pub struct StudentTape<'t> {
    /// `1 x d`.
    pub h_vis: Var<'t>,
    /// `1 x vocab`.
    pub l_vis: Var<'t>,
    /// `K_img x d` decoder output, before gating.
    pub delta: Var<'t>,
    pub gate: Var<'t>,
}

#[allow(clippy::too_many_arguments)]
pub fn student_on_tape<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    backbone: &FrozenBackbone,
    codec: &Codec,
    rollout: &LatentRollout,
    base_prompt: &[usize],
    mut dropout: Option<&mut Dropout>,
    gate_override: Option<f64>,
) -> Result<StudentTape<'t>> {
    if rollout.source_agent != backbone.model_id() || codec.model_id() != backbone.model_id() {
        return Err(Error::Routing(format!(
            "student pass for {} given rollout from {} and codec for {}",
            backbone.model_id(),
            rollout.source_agent,
            codec.model_id()
        )));
    }
    let u = codec.encode_on_tape(tape, p, &rollout.steps, dropout.as_deref_mut())?;
    let dec = codec.decode_on_tape(tape, p, u, dropout)?;
    let gate = match gate_override {
        Some(g) => tape.constant(Tensor::scalar(g)),
        None => dec.gate,
    };
    let span = inject_on_tape(tape, &backbone.baseline_span().values, dec.delta, gate)?;
    let x = backbone.embed_on_tape(tape, &backbone.image_prompt(base_prompt), Some(span))?;
    let hidden = backbone.forward_on_tape(tape, x, None)?.hidden;
    let n = hidden.dims().0;
    let h_vis = hidden.slice_rows(n - 1, 1);
    let l_vis = backbone.logits_on_tape(tape, h_vis);
    Ok(StudentTape {
        h_vis,
        l_vis,
        delta: dec.delta,
        gate,
    })
}

#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub h_vis: Tensor,
    pub l_vis: Tensor,
    pub injection: VisionInjection,
}

/// Inference-mode student pass (no dropout).
pub fn student_pass(
    backbone: &FrozenBackbone,
    codec: &Codec,
    rollout: &LatentRollout,
    base_prompt: &[usize],
    gate_override: Option<f64>,
) -> Result<StudentOutput> {
    let tape = Tape::new();
    let p = codec.params().bind(&tape, false);
    let s = student_on_tape(&tape, &p, backbone, codec, rollout, base_prompt, None, gate_override)?;
    Ok(StudentOutput {
        h_vis: Tensor::vector(s.h_vis.value().into_data()),
        l_vis: Tensor::vector(s.l_vis.value().into_data()),
        injection: VisionInjection {
            delta: s.delta.value(),
            gate: s.gate.value().data()[0],
            target_agent: codec.model_id().to_string(),
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// `|h_vis - h_text|^2`.
    pub mse: f64,
    /// `KL(p_text || p_vis)` at temperature `tau`, before the `tau^2` factor.
    pub kl: f64,
    /// `(RMS(g delta) - RMS(baseline))^2`.
    pub rms: f64,
}

impl LossTerms {
    fn accumulate(&mut self, other: &LossTerms, w: f64) {
        self.total += w * other.total;
        self.mse += w * other.mse;
        self.kl += w * other.kl;
        self.rms += w * other.rms;
    }
}

fn checked<'t>(v: Var<'t>, term: &str) -> Result<f64> {
    let x = v.value().data()[0];
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(format!("{term} loss term")))
    }
}

/// Distillation loss on a tape. `h_text` and `l_text` are detached, so no
/// gradient reaches the teacher path.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape<'t>(
    h_text: Var<'t>,
    l_text: Var<'t>,
    h_vis: Var<'t>,
    l_vis: Var<'t>,
    gated_delta: Var<'t>,
    baseline: &Tensor,
    cfg: &DistillConfig,
) -> Result<(Var<'t>, LossTerms)> {
    let h_text = h_text.detach();
    let l_text = l_text.detach();
    if h_text.dims() != h_vis.dims() || l_text.dims() != l_vis.dims() {
        return Err(Error::dim(
            "distill loss",
            format!(
                "teacher {:?}/{:?} vs student {:?}/{:?}",
                h_text.dims(),
                l_text.dims(),
                h_vis.dims(),
                l_vis.dims()
            ),
        ));
    }
    let tape = h_vis.tape();
    let tau = cfg.tau;

    let mse = h_vis.sub(h_text).square().sum_all();

    let p = l_text.value().map(|v| v.clamp(-LOGIT_CLIP, LOGIT_CLIP)).softmax(tau)?;
    let neg_entropy: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let log_q = l_vis.clamp(LOGIT_CLIP).scale(1.0 / tau).log_softmax_rows();
    let kl = tape
        .constant(Tensor::scalar(neg_entropy))
        .sub(tape.constant(p).mul(log_q).sum_all());

    let target = baseline.rms();
    let rms = gated_delta
        .square()
        .mean_all()
        .sqrt()
        .sub(tape.constant(Tensor::scalar(target)))
        .square();

    let terms = LossTerms {
        total: 0.0,
        mse: checked(mse, "hidden-state")?,
        kl: checked(kl, "distribution")?,
        rms: checked(rms, "rms")?,
    };
    let total = mse
        .scale(cfg.lambda_h)
        .add(kl.scale(cfg.lambda_kl * tau * tau))
        .add(rms.scale(cfg.lambda_rms));
    let total_value = checked(total, "total")?;
    Ok((
        total,
        LossTerms {
            total: total_value,
            ..terms
        },
    ))
}

/// Loss on plain values.
pub fn codec_loss(
    h_text: &Tensor,
    l_text: &Tensor,
    h_vis: &Tensor,
    l_vis: &Tensor,
    inj: &VisionInjection,
    baseline: &Tensor,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let tape = Tape::new();
    let row = |t: &Tensor| tape.constant(Tensor::matrix(1, t.len(), t.data().to_vec()));
    let gated = inj.delta.scale(inj.gate);
    let (_, terms) = loss_on_tape(
        row(h_text),
        row(l_text),
        row(h_vis),
        row(l_vis),
        tape.constant(gated),
        baseline,
        cfg,
    )?;
    Ok(terms)
}

/// Loss of one teacher example and its gradient for every codec parameter.
pub fn example_loss_and_gradients(
    backbone: &FrozenBackbone,
    codec: &Codec,
    teacher: &TeacherOutput,
    cfg: &DistillConfig,
    dropout: Option<&mut Dropout>,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = codec.params().bind(&tape, true);
    let (loss, terms) = example_loss_on_tape(&tape, &p, backbone, codec, teacher, cfg, dropout)?;
    let grads = tape.backward(loss)?;
    Ok((terms, p.gradients(&grads)))
}

fn example_loss_on_tape<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    backbone: &FrozenBackbone,
    codec: &Codec,
    teacher: &TeacherOutput,
    cfg: &DistillConfig,
    dropout: Option<&mut Dropout>,
) -> Result<(Var<'t>, LossTerms)> {
    let s = student_on_tape(
        tape,
        p,
        backbone,
        codec,
        &teacher.rollout,
        &cfg.base_prompt,
        dropout,
        None,
    )?;
    let gated = s.delta.mul(s.gate).clamp(INJECTION_CLIP);
    let row = |t: &Tensor| tape.constant(Tensor::matrix(1, t.len(), t.data().to_vec()));
    loss_on_tape(
        row(&teacher.h_text),
        row(&teacher.l_text),
        s.h_vis,
        s.l_vis,
        gated,
        &backbone.baseline_span().values,
        cfg,
    )
}

/// Inference-mode loss of one example.
pub fn example_loss(
    backbone: &FrozenBackbone,
    codec: &Codec,
    teacher: &TeacherOutput,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let tape = Tape::new();
    let p = codec.params().bind(&tape, false);
    Ok(example_loss_on_tape(&tape, &p, backbone, codec, teacher, cfg, None)?.1)
}

/// `KL(softmax(l_text / tau) || softmax(l_vis / tau))` at the prompt boundary.
pub fn boundary_kl(l_text: &Tensor, l_vis: &Tensor, tau: f64) -> Result<f64> {
    let row = |t: &Tensor| Tensor::matrix(1, t.len(), t.data().to_vec());
    let p = row(l_text).softmax(tau)?;
    let q = row(l_vis).softmax(tau)?;
    Ok(p.data()
        .iter()
        .zip(q.data())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum())
}

/// Loss and boundary KL over a set of teachers, computed in inference mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: LossTerms,
    pub boundary_kl: Vec<f64>,
}

impl Evaluation {
    pub fn median_kl(&self) -> f64 {
        median(&self.boundary_kl)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn evaluate(
    backbone: &FrozenBackbone,
    codec: &Codec,
    teachers: &[TeacherOutput],
    cfg: &DistillConfig,
) -> Result<Evaluation> {
    let per: Vec<(LossTerms, f64)> = teachers
        .par_iter()
        .map(|t| {
            let terms = example_loss(backbone, codec, t, cfg)?;
            let s = student_pass(backbone, codec, &t.rollout, &cfg.base_prompt, None)?;
            Ok((terms, boundary_kl(&t.l_text, &s.l_vis, cfg.tau)?))
        })
        .collect::<Result<_>>()?;
    let mut mean = LossTerms::default();
    let w = 1.0 / per.len().max(1) as f64;
    for (terms, _) in &per {
        mean.accumulate(terms, w);
    }
    Ok(Evaluation {
        mean,
        boundary_kl: per.into_iter().map(|(_, kl)| kl).collect(),
    })
}

pub fn teachers_for(
    backbone: &FrozenBackbone,
    matcher: &NormMatcher,
    anchors: &[AnchorText],
    cfg: &DistillConfig,
) -> Result<Vec<TeacherOutput>> {
    anchors
        .par_iter()
        .map(|a| teacher_pass(backbone, matcher, a, &cfg.base_prompt, cfg.rollout_len))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
    pub rms: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub agent: String,
    pub steps: Vec<StepRecord>,
    /// Mean boundary KL over the training anchors before and after training.
    pub initial_kl: f64,
    pub final_kl: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

impl DistillReport {
    /// One JSON object per line: a record per step, then a summary.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.steps {
            let mut v = serde_json::to_value(s)?;
            v["record"] = "step".into();
            v["schema_version"] = REPORT_SCHEMA_VERSION.into();
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        let summary = serde_json::json!({
            "record": "summary",
            "schema_version": REPORT_SCHEMA_VERSION,
            "agent": self.agent,
            "initial_kl": self.initial_kl,
            "final_kl": self.final_kl,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "wall_clock_secs": self.wall_clock_secs,
        });
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Train `codec` on `anchors`. Batches are drawn uniformly with replacement
/// from a stream seeded by `cfg.seed`; per-example gradients are summed in
/// batch order so runs are bitwise reproducible.
pub fn train_codec(
    backbone: &FrozenBackbone,
    codec: &Codec,
    anchors: &[AnchorText],
    cfg: &DistillConfig,
) -> Result<(Codec, DistillReport)> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::Contract("no anchors to train on".into()));
    }
    if codec.model_id() != backbone.model_id() || codec.d() != backbone.d() {
        return Err(Error::Routing(format!(
            "codec for {} cannot train against backbone {}",
            codec.model_id(),
            backbone.model_id()
        )));
    }
    let mut trained = codec.clone();
    if cfg.steps == 0 {
        return Ok((trained, DistillReport::default()));
    }
    let started = Instant::now();
    let teachers = teachers_for(backbone, codec.norm_matcher(), anchors, cfg)?;
    let before = evaluate(backbone, &trained, &teachers, cfg)?;

    let mut sampler = Rng::derive(cfg.seed, 0);
    let mut dropouts: Vec<Dropout> = (0..cfg.batch_size)
        .map(|b| Dropout::new(codec.config().dropout, Rng::derive(cfg.seed, 1 + b as u64)))
        .collect();
    let mut opt = AdamW::new(
        trained.params(),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut records = Vec::with_capacity(cfg.steps);
    let w = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.below(teachers.len())).collect();
        let snapshot = &trained;
        let per: Vec<Result<(LossTerms, Vec<Tensor>)>> = batch
            .par_iter()
            .zip(dropouts.par_iter_mut())
            .map(|(&i, drop)| example_loss_and_gradients(backbone, snapshot, &teachers[i], cfg, Some(drop)))
            .collect();
        let mut terms = LossTerms::default();
        let mut grads: Vec<Tensor> = trained.params().iter().map(|p| p.value.map(|_| 0.0)).collect();
        for r in per {
            let (t, g) = r.map_err(|e| match e {
                Error::Numeric { .. } => Error::Training {
                    step,
                    total: f64::NAN,
                    mse: f64::NAN,
                    kl: f64::NAN,
                    rms: f64::NAN,
                },
                other => other,
            })?;
            terms.accumulate(&t, w);
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += w * b;
                }
            }
        }
        if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                total: terms.total,
                mse: terms.mse,
                kl: terms.kl,
                rms: terms.rms,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        opt.step(trained.params_mut(), &grads);
        records.push(StepRecord {
            step,
            total: terms.total,
            mse: terms.mse,
            kl: terms.kl,
            rms: terms.rms,
            grad_norm,
        });
    }
    let after = evaluate(backbone, &trained, &teachers, cfg)?;
    let report = DistillReport {
        agent: codec.model_id().to_string(),
        steps: records,
        initial_kl: mean_of(&before.boundary_kl),
        final_kl: mean_of(&after.boundary_kl),
        initial_loss: before.mean.total,
        final_loss: after.mean.total,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((trained, report))
}
