//! Read-think-write multi-agent loop over wormhole messages, plus a text
//! channel baseline with the same scheduling.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::align::HubRegistry;
use crate::codec::{inject, Codec, Space, UniversalMessage};
use crate::error::{Error, Result};
use crate::rollout::{latent_rollout, LatentRollout};
use crate::tensor::Tensor;
use crate::vlm::{FrozenBackbone, PromptState};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Chained,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Wormhole,
    Text,
}

/// An agent: a frozen backbone, its codec and a role label.
#[derive(Debug, Clone)]
pub struct AgentHandle {
    pub role: String,
    backbone: Arc<FrozenBackbone>,
    codec: Arc<Codec>,
}

impl AgentHandle {
    pub fn new(role: impl Into<String>, backbone: Arc<FrozenBackbone>, codec: Arc<Codec>) -> Result<Self> {
        if codec.model_id() != backbone.model_id() || codec.d() != backbone.d() {
            return Err(Error::Routing(format!(
                "codec for {} (d={}) does not fit backbone {} (d={})",
                codec.model_id(),
                codec.d(),
                backbone.model_id(),
                backbone.d()
            )));
        }
        Ok(AgentHandle {
            role: role.into(),
            backbone,
            codec,
        })
    }

    pub fn model_id(&self) -> &str {
        self.backbone.model_id()
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }
}

/// Append-only store of reference-space messages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBuffer {
    messages: Vec<UniversalMessage>,
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: UniversalMessage) -> Result<()> {
        if msg.space != Space::Reference {
            return Err(Error::Routing(format!(
                "message from {} is not in reference space",
                msg.sender
            )));
        }
        self.messages.push(msg);
        Ok(())
    }

    pub fn messages(&self) -> &[UniversalMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Row-wise concatenation in insertion order; `None` for an empty buffer.
pub fn aggregate_memory(mem: &MemoryBuffer) -> Result<Option<Tensor>> {
    concat_messages(mem.messages())
}

fn concat_messages(msgs: &[UniversalMessage]) -> Result<Option<Tensor>> {
    let Some(first) = msgs.first() else {
        return Ok(None);
    };
    let dim = first.tokens.cols();
    if let Some(bad) = msgs.iter().find(|m| m.tokens.cols() != dim) {
        return Err(Error::Aggregation(format!(
            "message from {} has width {}, expected {dim}",
            bad.sender,
            bad.tokens.cols()
        )));
    }
    let refs: Vec<&Tensor> = msgs.iter().map(|m| &m.tokens).collect();
    Ok(Some(Tensor::concat_rows(&refs)?))
}

/// Memory mapped into `receiver`'s local space, one message at a time, then
/// concatenated.
pub fn receiver_tokens(receiver: &str, mem: &MemoryBuffer, reg: &HubRegistry) -> Result<Option<Tensor>> {
    let local = mem
        .messages()
        .iter()
        .map(|m| reg.from_reference(m, receiver))
        .collect::<Result<Vec<_>>>()?;
    concat_messages(&local)
}

/// `A_out(encode(rollout))`.
pub fn send(reg: &HubRegistry, sender: &AgentHandle, rollout: &LatentRollout) -> Result<UniversalMessage> {
    let local = sender.codec().encode(rollout)?;
    reg.to_reference(&local)
}

#[derive(Debug, Clone)]
pub struct ReadOutcome {
    pub state: PromptState,
    /// Rows of the injected image span (always the receiver's `L_img`).
    pub injected_span_len: usize,
    /// Gate of the decoded injection; `None` when memory was empty.
    pub gate: Option<f64>,
    pub memory_rows: usize,
}

/// Decode memory into the receiver's image span and encode the task prompt.
/// Empty memory skips the codec and uses the plain dummy-image span.
pub fn read(
    receiver: &AgentHandle,
    mem: &MemoryBuffer,
    reg: &HubRegistry,
    task_prompt: &[usize],
) -> Result<ReadOutcome> {
    let backbone = receiver.backbone();
    let prompt = backbone.image_prompt(task_prompt);
    let baseline = backbone.baseline_span();
    let l_img = backbone.spec().l_img;
    match receiver_tokens(receiver.model_id(), mem, reg)? {
        None => Ok(ReadOutcome {
            state: backbone.encode_prompt(&prompt, None)?,
            injected_span_len: l_img,
            gate: None,
            memory_rows: 0,
        }),
        Some(tokens) => {
            let inj = receiver.codec().decode(&tokens)?;
            let span = inject(baseline, &inj, l_img)?;
            Ok(ReadOutcome {
                state: backbone.encode_prompt(&prompt, Some(&span))?,
                injected_span_len: span.rows(),
                gate: Some(inj.gate),
                memory_rows: tokens.rows(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    /// Latent rollout length `T` of non-final roles.
    pub rollout_len: usize,
    /// New-token budget of the final role.
    pub answer_budget: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            rollout_len: 16,
            answer_budget: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleRecord {
    pub index: usize,
    pub role: String,
    pub agent: String,
    /// Prompt length including image-span positions.
    pub prompt_tokens: usize,
    pub rollout_steps: usize,
    /// Shape of the message written, `[rows, cols]`; `[0, 0]` when none.
    pub message_shape: [usize; 2],
    /// Reals carried by the written message (wormhole) or tokens times the sender's width (text).
    pub payload_reals: usize,
    pub message_tokens: usize,
    /// Backbone positions processed during this role (prompt, rollout and generation).
    pub backbone_steps: u64,
    pub generated_tokens: usize,
    pub injected_span_len: usize,
    pub memory_rows_read: usize,
    pub gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub schema_version: u32,
    pub channel: Channel,
    pub mode: Mode,
    pub roles: Vec<RoleRecord>,
    pub answer: Vec<usize>,
}

impl EpisodeTrace {
    /// Backbone positions processed by every role except the last.
    pub fn non_final_backbone_steps(&self) -> u64 {
        let n = self.roles.len().saturating_sub(1);
        self.roles[..n].iter().map(|r| r.backbone_steps).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub answer: Vec<usize>,
    pub trace: EpisodeTrace,
    pub memory: MemoryBuffer,
}

fn role_prompt_len(agent: &AgentHandle, task: &[usize]) -> usize {
    agent.backbone().spec().l_img + task.len()
}

/// Read, think and write for one non-final role.
fn latent_role(
    index: usize,
    agent: &AgentHandle,
    mem: &MemoryBuffer,
    reg: &HubRegistry,
    task: &[usize],
    cfg: &RuntimeConfig,
) -> Result<(UniversalMessage, RoleRecord)> {
    let read = read(agent, mem, reg, task)?;
    let rollout = latent_rollout(
        agent.backbone(),
        &read.state,
        agent.codec().norm_matcher(),
        cfg.rollout_len,
    )?;
    let msg = send(reg, agent, &rollout)?;
    let record = RoleRecord {
        index,
        role: agent.role.clone(),
        agent: agent.model_id().to_string(),
        prompt_tokens: role_prompt_len(agent, task),
        rollout_steps: rollout.len(),
        message_shape: [msg.tokens.rows(), msg.tokens.cols()],
        payload_reals: msg.payload_len(),
        message_tokens: 0,
        backbone_steps: read.state.steps() + rollout.backbone_steps,
        generated_tokens: 0,
        injected_span_len: read.injected_span_len,
        memory_rows_read: read.memory_rows,
        gate: read.gate,
    };
    Ok((msg, record))
}

fn final_role(
    index: usize,
    agent: &AgentHandle,
    mem: &MemoryBuffer,
    reg: &HubRegistry,
    task: &[usize],
    cfg: &RuntimeConfig,
) -> Result<(Vec<usize>, RoleRecord)> {
    let mut read = read(agent, mem, reg, task)?;
    let answer = agent.backbone().generate_greedy(&mut read.state, cfg.answer_budget)?;
    let record = RoleRecord {
        index,
        role: agent.role.clone(),
        agent: agent.model_id().to_string(),
        prompt_tokens: role_prompt_len(agent, task),
        backbone_steps: read.state.steps(),
        generated_tokens: answer.len(),
        injected_span_len: read.injected_span_len,
        memory_rows_read: read.memory_rows,
        gate: read.gate,
        ..RoleRecord::default()
    };
    Ok((answer, record))
}

fn check_agents(agents: &[AgentHandle]) -> Result<()> {
    if agents.is_empty() {
        return Err(Error::Contract("an episode needs at least one agent".into()));
    }
    Ok(())
}

/// Role `t + 1` reads every message written by roles `<= t`; the last role answers.
pub fn run_chained(agents: &[AgentHandle], task: &[usize], reg: &HubRegistry, cfg: &RuntimeConfig) -> Result<Episode> {
    run_latent(agents, task, reg, cfg, Mode::Chained)
}

/// Non-final roles all read the empty memory; the last role reads every message.
pub fn run_independent_join(
    agents: &[AgentHandle],
    task: &[usize],
    reg: &HubRegistry,
    cfg: &RuntimeConfig,
) -> Result<Episode> {
    run_latent(agents, task, reg, cfg, Mode::Independent)
}

pub fn run_wormhole(
    agents: &[AgentHandle],
    task: &[usize],
    reg: &HubRegistry,
    cfg: &RuntimeConfig,
    mode: Mode,
) -> Result<Episode> {
    run_latent(agents, task, reg, cfg, mode)
}

fn run_latent(
    agents: &[AgentHandle],
    task: &[usize],
    reg: &HubRegistry,
    cfg: &RuntimeConfig,
    mode: Mode,
) -> Result<Episode> {
    check_agents(agents)?;
    let (last, workers) = agents.split_last().expect("checked nonempty");
    let mut mem = MemoryBuffer::new();
    let empty = MemoryBuffer::new();
    let mut roles = Vec::with_capacity(agents.len());
    for (i, agent) in workers.iter().enumerate() {
        let view = match mode {
            Mode::Chained => &mem,
            Mode::Independent => &empty,
        };
        let (msg, record) = latent_role(i, agent, view, reg, task, cfg).map_err(|e| e.in_role(i))?;
        mem.push(msg).map_err(|e| e.in_role(i))?;
        roles.push(record);
    }
    let n = workers.len();
    let (answer, record) = final_role(n, last, &mem, reg, task, cfg).map_err(|e| e.in_role(n))?;
    roles.push(record);
    Ok(Episode {
        trace: EpisodeTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            channel: Channel::Wormhole,
            mode,
            roles,
            answer: answer.clone(),
        },
        answer,
        memory: mem,
    })
}

/// Text channel: each non-final role greedily generates up to `budget`
/// tokens. A role's prompt is the task followed by the earlier roles' text
/// (chained), or just the task with only the final role reading every
/// message (independent). All agents must share one vocabulary.
pub fn run_text_baseline(
    agents: &[AgentHandle],
    task: &[usize],
    budget: usize,
    cfg: &RuntimeConfig,
    mode: Mode,
) -> Result<Episode> {
    check_agents(agents)?;
    let spec0 = agents[0].backbone().spec();
    for a in agents {
        let s = a.backbone().spec();
        if s.vocab_size != spec0.vocab_size || s.image_marker != spec0.image_marker || s.eos_token != spec0.eos_token {
            return Err(Error::Routing(format!(
                "text channel needs a shared vocabulary; {} differs from {}",
                s.model_id, spec0.model_id
            )));
        }
    }
    let n = agents.len();
    let mut transcript = task.to_vec();
    let mut roles = Vec::with_capacity(n);
    let mut answer = Vec::new();
    for (i, agent) in agents.iter().enumerate() {
        let backbone = agent.backbone();
        let l_img = backbone.spec().l_img;
        let is_final = i + 1 == n;
        let prompt = if is_final || mode == Mode::Chained {
            &transcript[..]
        } else {
            task
        };
        let limit = if is_final { cfg.answer_budget } else { budget };
        let mut state = backbone
            .encode_prompt(&backbone.image_prompt(prompt), None)
            .map_err(|e| e.in_role(i))?;
        let text = backbone.generate_greedy(&mut state, limit).map_err(|e| e.in_role(i))?;
        let mut record = RoleRecord {
            index: i,
            role: agent.role.clone(),
            agent: agent.model_id().to_string(),
            prompt_tokens: l_img + prompt.len(),
            backbone_steps: state.steps(),
            generated_tokens: text.len(),
            injected_span_len: l_img,
            ..RoleRecord::default()
        };
        if is_final {
            answer = text;
        } else {
            record.message_tokens = text.len();
            record.message_shape = [text.len(), backbone.d()];
            record.payload_reals = text.len() * backbone.d();
            transcript.extend_from_slice(&text);
        }
        roles.push(record);
    }
    Ok(Episode {
        trace: EpisodeTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            channel: Channel::Text,
            mode,
            roles,
            answer: answer.clone(),
        },
        answer,
        memory: MemoryBuffer::new(),
    })
}
