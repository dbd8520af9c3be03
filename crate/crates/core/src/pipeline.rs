//! End-to-end driver: build backbones from a config, train codecs, fit the
//! registry, run episodes and benchmark the two channels. Artifacts live
//! under one output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{collect_anchor_tokens, fit_alignment, AlignParticipant, HubRegistry};
use crate::codec::Codec;
use crate::config::{RunConfig, SeedPurpose};
use crate::distill::{evaluate, median, synthetic_anchors, teachers_for, train_codec, AnchorText, DistillReport};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rollout::NormMatcher;
use crate::runtime::{run_text_baseline, run_wormhole, AgentHandle, Channel, Episode, Mode};
use crate::vlm::FrozenBackbone;

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// File locations under an output root.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn codec(&self, agent: &str) -> PathBuf {
        self.root.join("codecs").join(format!("{agent}.codec"))
    }

    pub fn distill_report(&self, agent: &str) -> PathBuf {
        self.root.join("reports").join(format!("{agent}.distill.jsonl"))
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.bin")
    }

    pub fn align_summary(&self) -> PathBuf {
        self.root.join("reports").join("align.json")
    }

    pub fn trace(&self, channel: Channel, mode: Mode) -> PathBuf {
        let c = match channel {
            Channel::Wormhole => "wormhole",
            Channel::Text => "text",
        };
        let m = match mode {
            Mode::Chained => "chained",
            Mode::Independent => "independent",
        };
        self.root.join("traces").join(format!("{c}-{m}.json"))
    }

    pub fn bench_records(&self) -> PathBuf {
        self.root.join("bench").join("records.jsonl")
    }

    pub fn bench_table(&self) -> PathBuf {
        self.root.join("bench").join("table.txt")
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// A config with its backbones built.
pub struct Workspace {
    pub config: RunConfig,
    backbones: BTreeMap<String, Arc<FrozenBackbone>>,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        let backbones = config
            .agent
            .iter()
            .map(|(id, a)| Ok((id.clone(), Arc::new(FrozenBackbone::build(a.spec(id), a.seed)?))))
            .collect::<Result<_>>()?;
        Ok(Workspace { config, backbones })
    }

    pub fn backbone(&self, id: &str) -> Result<&Arc<FrozenBackbone>> {
        self.backbones
            .get(id)
            .ok_or_else(|| Error::Routing(format!("agent {id} is not defined")))
    }

    pub fn backbones(&self) -> impl Iterator<Item = &Arc<FrozenBackbone>> {
        self.backbones.values()
    }

    fn index(&self, id: &str) -> usize {
        self.config.agent_index(id).expect("agent ids come from the config")
    }

    /// The untrained codec of `id`, seeded from the run seed.
    pub fn fresh_codec(&self, id: &str) -> Result<Codec> {
        let b = self.backbone(id)?;
        let norm = NormMatcher::fit(b, self.config.rollout.eps)?;
        Codec::new(
            id,
            b.d(),
            self.config.codec,
            norm,
            self.config.seed(SeedPurpose::CodecInit(self.index(id))),
        )
    }

    fn anchors(&self, n: usize, purpose: SeedPurpose) -> Vec<AnchorText> {
        // agents share one vocabulary, so any spec will do
        let spec = self.backbones.values().next().expect("at least one agent").spec();
        synthetic_anchors(spec, n, self.config.seed(purpose))
    }

    pub fn train_anchors(&self) -> Vec<AnchorText> {
        self.anchors(self.config.distill.anchors, SeedPurpose::TrainAnchors)
    }

    pub fn align_anchors(&self) -> Vec<AnchorText> {
        self.anchors(self.config.align.anchors, SeedPurpose::AlignAnchors)
    }

    pub fn heldout_anchors(&self) -> Vec<AnchorText> {
        self.anchors(self.config.bench.heldout_anchors, SeedPurpose::HeldoutAnchors)
    }

    /// Train every agent's codec; agents train in parallel.
    pub fn train_codecs(&self) -> Result<BTreeMap<String, (Codec, DistillReport)>> {
        let anchors = self.train_anchors();
        let ids: Vec<&String> = self.backbones.keys().collect();
        let trained = ids
            .par_iter()
            .map(|id| {
                let codec = self.fresh_codec(id)?;
                let cfg = self.config.distill_config(self.index(id));
                let out = train_codec(&self.backbones[*id], &codec, &anchors, &cfg)?;
                Ok(((*id).clone(), out))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(trained.into_iter().collect())
    }

    pub fn align(&self, codecs: &BTreeMap<String, Codec>) -> Result<AlignOutcome> {
        let parts: Vec<AlignParticipant> = self
            .backbones
            .iter()
            .map(|(id, b)| AlignParticipant {
                backbone: b,
                codec: codecs.get(id),
            })
            .collect();
        let batch = collect_anchor_tokens(
            &parts,
            &self.align_anchors(),
            &self.config.distill.base_prompt,
            self.config.rollout.steps,
        )?;
        let reference = &self.config.align.reference;
        let registry = fit_alignment(&batch, reference, self.config.align.lambda)?;
        let u_ref = batch.flatten(reference)?;
        let mut residuals = Vec::new();
        for id in registry.agents() {
            let pair = registry.get(id).expect("listed agent");
            let u = batch.flatten(id)?;
            let rms = |a: &crate::tensor::Tensor, b: &crate::tensor::Tensor| -> Result<f64> { Ok(a.sub(b)?.rms()) };
            residuals.push(FitResidual {
                agent: id.to_string(),
                out_rms: rms(&pair.out.apply(&u)?, &u_ref)?,
                in_rms: rms(&pair.inn.apply(&u_ref)?, &u)?,
            });
        }
        Ok(AlignOutcome {
            param_count: registry.param_count(),
            registry,
            residuals,
        })
    }

    /// Agents in `runtime.order` with their role labels.
    pub fn agents(&self, codecs: &BTreeMap<String, Arc<Codec>>) -> Result<Vec<AgentHandle>> {
        let labels = self.config.role_labels();
        self.config
            .runtime
            .order
            .iter()
            .zip(labels)
            .map(|(id, role)| {
                let codec = codecs
                    .get(id)
                    .ok_or_else(|| Error::Registry(format!("no codec for agent {id}")))?;
                AgentHandle::new(role, self.backbone(id)?.clone(), codec.clone())
            })
            .collect()
    }

    /// The configured task, or a seeded one.
    pub fn task(&self) -> Vec<usize> {
        match &self.config.runtime.task {
            Some(t) => t.clone(),
            None => self.seeded_task(0, self.config.runtime.task_len),
        }
    }

    fn seeded_task(&self, episode: usize, len: usize) -> Vec<usize> {
        let spec = self.backbones.values().next().expect("at least one agent").spec();
        let usable: Vec<usize> = (0..spec.vocab_size).filter(|&t| !spec.is_reserved(t)).collect();
        let mut rng = Rng::new(self.config.seed(SeedPurpose::Task(episode)));
        (0..len).map(|_| usable[rng.below(usable.len())]).collect()
    }

    /// Task prompt of bench episode `e`, with a seeded length.
    pub fn bench_task(&self, episode: usize) -> Vec<usize> {
        let b = &self.config.bench;
        let mut rng = Rng::derive(self.config.seed(SeedPurpose::Task(episode)), 1);
        let len = rng.range_inclusive(b.task_len_min, b.task_len_max);
        self.seeded_task(episode, len)
    }

    pub fn run_episode(
        &self,
        agents: &[AgentHandle],
        registry: &HubRegistry,
        channel: Channel,
        mode: Mode,
        task: &[usize],
        text_budget: usize,
    ) -> Result<Episode> {
        let cfg = self.config.runtime_config();
        match channel {
            Channel::Wormhole => run_wormhole(agents, task, registry, &cfg, mode),
            Channel::Text => run_text_baseline(agents, task, text_budget, &cfg, mode),
        }
    }

    /// Run the benchmark with `workers` threads. Records come back in
    /// episode order whatever the worker count.
    pub fn bench(
        &self,
        trained: &BTreeMap<String, Arc<Codec>>,
        registry: &HubRegistry,
        workers: usize,
    ) -> Result<BenchResult> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Contract(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| self.bench_inner(trained, registry))
    }

    fn bench_inner(&self, trained: &BTreeMap<String, Arc<Codec>>, registry: &HubRegistry) -> Result<BenchResult> {
        let agents = self.agents(trained)?;
        let mode = self.config.runtime.mode;
        let t = self.config.rollout.steps as u64;
        let budgets = &self.config.bench.text_budgets;

        let mut jobs: Vec<(usize, Channel, Option<usize>)> = Vec::new();
        for e in 0..self.config.bench.episodes {
            jobs.push((e, Channel::Wormhole, None));
            for &b in budgets {
                jobs.push((e, Channel::Text, Some(b)));
            }
        }
        let episodes = jobs
            .par_iter()
            .map(|&(e, channel, budget)| {
                let task = self.bench_task(e);
                let ep = self.run_episode(&agents, registry, channel, mode, &task, budget.unwrap_or(0))?;
                let roles = &ep.trace.roles;
                let non_final = &roles[..roles.len() - 1];
                let expected = match channel {
                    Channel::Wormhole => {
                        non_final.iter().map(|r| r.prompt_tokens as u64).sum::<u64>() + non_final.len() as u64 * t
                    }
                    Channel::Text => non_final
                        .iter()
                        .map(|r| (r.prompt_tokens + r.generated_tokens.saturating_sub(1)) as u64)
                        .sum(),
                };
                Ok(EpisodeRecord {
                    schema_version: OUTPUT_SCHEMA_VERSION,
                    episode: e,
                    channel,
                    mode: ep.trace.mode,
                    text_budget: budget,
                    task_len: task.len(),
                    payloads: non_final.iter().map(|r| r.payload_reals).collect(),
                    message_tokens: non_final.iter().map(|r| r.message_tokens).collect(),
                    non_final_backbone_steps: ep.trace.non_final_backbone_steps(),
                    expected_non_final_steps: expected,
                    answer: ep.answer,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let heldout = self.heldout_anchors();
        let fidelity = self
            .backbones
            .keys()
            .map(|id| {
                let b = &self.backbones[id];
                let codec = trained
                    .get(id)
                    .ok_or_else(|| Error::Registry(format!("no codec for agent {id}")))?;
                let cfg = self.config.distill_config(self.index(id));
                let teachers = teachers_for(b, codec.norm_matcher(), &heldout, &cfg)?;
                let after = evaluate(b, codec, &teachers, &cfg)?;
                let before = evaluate(b, &self.fresh_codec(id)?, &teachers, &cfg)?;
                Ok(FidelityRecord {
                    schema_version: OUTPUT_SCHEMA_VERSION,
                    agent: id.clone(),
                    heldout_anchors: heldout.len(),
                    trained_median_kl: after.median_kl(),
                    untrained_median_kl: before.median_kl(),
                    trained_mean_loss: after.mean.total,
                    untrained_mean_loss: before.mean.total,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchResult { episodes, fidelity })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResidual {
    pub agent: String,
    /// RMS of `A_out(U_i) - U_ref` over the alignment anchors.
    pub out_rms: f64,
    /// RMS of `A_in(U_ref) - U_i`.
    pub in_rms: f64,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub registry: HubRegistry,
    pub residuals: Vec<FitResidual>,
    pub param_count: usize,
}

impl AlignOutcome {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "reference": self.registry.reference,
            "lambda": self.registry.lambda,
            "agents": self.registry.len(),
            "param_count": self.param_count,
            "residuals": self.residuals,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub episode: usize,
    pub channel: Channel,
    pub mode: Mode,
    pub text_budget: Option<usize>,
    pub task_len: usize,
    /// Reals carried by each non-final role's message.
    pub payloads: Vec<usize>,
    pub message_tokens: Vec<usize>,
    pub non_final_backbone_steps: u64,
    /// For wormhole runs: prompt lengths plus `T` per non-final role.
    pub expected_non_final_steps: u64,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub schema_version: u32,
    pub agent: String,
    pub heldout_anchors: usize,
    pub trained_median_kl: f64,
    pub untrained_median_kl: f64,
    pub trained_mean_loss: f64,
    pub untrained_mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub episodes: Vec<EpisodeRecord>,
    pub fidelity: Vec<FidelityRecord>,
}

/// Mean and population variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

impl BenchResult {
    /// Per-message payloads of one channel (and budget, for text).
    pub fn payloads(&self, channel: Channel, budget: Option<usize>) -> Vec<f64> {
        self.episodes
            .iter()
            .filter(|r| r.channel == channel && (budget.is_none() || r.text_budget == budget))
            .flat_map(|r| r.payloads.iter().map(|&p| p as f64))
            .collect()
    }

    pub fn write_jsonl(&self, mut w: impl std::io::Write) -> Result<()> {
        for r in &self.episodes {
            let mut v = serde_json::to_value(r)?;
            v["record"] = "episode".into();
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        for r in &self.fidelity {
            let mut v = serde_json::to_value(r)?;
            v["record"] = "fidelity".into();
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        Ok(())
    }

    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 6]> = vec![[
            "channel".into(),
            "budget".into(),
            "episodes".into(),
            "payload/msg mean".into(),
            "payload var".into(),
            "non-final steps mean".into(),
        ]];
        let mut groups: Vec<(Channel, Option<usize>)> = vec![(Channel::Wormhole, None)];
        let mut budgets: Vec<usize> = self.episodes.iter().filter_map(|r| r.text_budget).collect();
        budgets.sort_unstable();
        budgets.dedup();
        groups.extend(budgets.into_iter().map(|b| (Channel::Text, Some(b))));
        for (channel, budget) in groups {
            let eps: Vec<&EpisodeRecord> = self
                .episodes
                .iter()
                .filter(|r| r.channel == channel && r.text_budget == budget)
                .collect();
            let (pm, pv) = mean_var(&self.payloads(channel, budget));
            let steps: Vec<f64> = eps.iter().map(|r| r.non_final_backbone_steps as f64).collect();
            rows.push([
                match channel {
                    Channel::Wormhole => "wormhole".into(),
                    Channel::Text => "text".into(),
                },
                budget.map_or("-".into(), |b| b.to_string()),
                eps.len().to_string(),
                format!("{pm:.1}"),
                format!("{pv:.1}"),
                format!("{:.1}", mean_var(&steps).0),
            ]);
        }
        let mut out = format!("schema_version {OUTPUT_SCHEMA_VERSION}\n\n");
        render(&mut out, &rows);
        out.push('\n');
        let mut fid: Vec<[String; 6]> = vec![[
            "agent".into(),
            "heldout".into(),
            "median KL trained".into(),
            "median KL untrained".into(),
            "loss trained".into(),
            "loss untrained".into(),
        ]];
        for f in &self.fidelity {
            fid.push([
                f.agent.clone(),
                f.heldout_anchors.to_string(),
                format!("{:.5}", f.trained_median_kl),
                format!("{:.5}", f.untrained_median_kl),
                format!("{:.4}", f.trained_mean_loss),
                format!("{:.4}", f.untrained_mean_loss),
            ]);
        }
        render(&mut out, &fid);
        out
    }
}

fn render<const N: usize>(out: &mut String, rows: &[[String; N]]) {
    let widths: Vec<usize> = (0..N)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (N - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
}

/// Save trained codecs and their reports.
pub fn save_training(layout: &Layout, trained: &BTreeMap<String, (Codec, DistillReport)>) -> Result<()> {
    for (id, (codec, report)) in trained {
        codec.save(&layout.codec(id))?;
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf)?;
        write_file(&layout.distill_report(id), &buf)?;
    }
    Ok(())
}

/// Load one checkpoint per configured agent and check it fits its backbone.
pub fn load_codecs(layout: &Layout, ws: &Workspace) -> Result<BTreeMap<String, Codec>> {
    let mut out = BTreeMap::new();
    for b in ws.backbones() {
        let id = b.model_id();
        let path = layout.codec(id);
        if !path.exists() {
            return Err(Error::Registry(format!("missing codec checkpoint {}", path.display())));
        }
        let codec = Codec::load(&path)?;
        if codec.model_id() != id || codec.d() != b.d() {
            return Err(Error::Registry(format!(
                "checkpoint {} was trained for {} (d={})",
                path.display(),
                codec.model_id(),
                codec.d()
            )));
        }
        out.insert(id.to_string(), codec);
    }
    Ok(out)
}

pub fn save_alignment(layout: &Layout, outcome: &AlignOutcome) -> Result<()> {
    outcome.registry.save(&layout.registry())?;
    let text = serde_json::to_string_pretty(&outcome.summary_json())?;
    write_file(&layout.align_summary(), format!("{text}\n").as_bytes())
}

pub fn load_registry(layout: &Layout) -> Result<HubRegistry> {
    let path = layout.registry();
    if !path.exists() {
        return Err(Error::Registry(format!("missing registry {}", path.display())));
    }
    HubRegistry::load(&path)
}

pub fn save_trace(layout: &Layout, ep: &Episode) -> Result<PathBuf> {
    let path = layout.trace(ep.trace.channel, ep.trace.mode);
    let text = serde_json::to_string_pretty(&ep.trace)?;
    write_file(&path, format!("{text}\n").as_bytes())?;
    Ok(path)
}

pub fn save_bench(layout: &Layout, result: &BenchResult) -> Result<()> {
    let mut buf = Vec::new();
    result.write_jsonl(&mut buf)?;
    write_file(&layout.bench_records(), &buf)?;
    let mut f = Vec::new();
    f.write_all(result.table().as_bytes())?;
    write_file(&layout.bench_table(), &f)
}

pub fn arc_codecs(codecs: BTreeMap<String, Codec>) -> BTreeMap<String, Arc<Codec>> {
    codecs.into_iter().map(|(k, v)| (k, Arc::new(v))).collect()
}

/// Median of the trained and untrained boundary KL across agents' records.
pub fn fidelity_medians(result: &BenchResult) -> (f64, f64) {
    let t: Vec<f64> = result.fidelity.iter().map(|f| f.trained_median_kl).collect();
    let u: Vec<f64> = result.fidelity.iter().map(|f| f.untrained_median_kl).collect();
    (median(&t), median(&u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig::parse(
            r#"
[run]
seed = 11
[agent.a]
d = 32
l_img = 12
seed = 1
[agent.b]
d = 48
l_img = 20
seed = 2
[rollout]
steps = 4
[distill]
steps = 3
anchors = 4
[align]
reference = "a"
anchors = 6
[runtime]
order = ["a", "b", "a"]
answer_budget = 4
[bench]
episodes = 3
text_budgets = [2, 6]
heldout_anchors = 3
"#,
        )
        .unwrap()
    }

    #[test]
    fn artifacts_roundtrip_through_the_layout() {
        let ws = Workspace::new(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let trained = ws.train_codecs().unwrap();
        save_training(&layout, &trained).unwrap();
        let codecs = load_codecs(&layout, &ws).unwrap();
        assert!(codecs["a"].params().bitwise_eq(trained["a"].0.params()));
        let outcome = ws.align(&codecs).unwrap();
        assert_eq!(outcome.param_count, 2 * 2 * (16 * 16 + 16));
        assert!(outcome
            .residuals
            .iter()
            .all(|r| r.out_rms.is_finite() && r.in_rms.is_finite()));
        save_alignment(&layout, &outcome).unwrap();
        let reg = load_registry(&layout).unwrap();
        assert_eq!(reg, outcome.registry);

        fs::remove_file(layout.codec("b")).unwrap();
        assert!(matches!(load_codecs(&layout, &ws), Err(Error::Registry(_))));
    }

    #[test]
    fn bench_is_ordered_and_worker_independent() {
        let ws = Workspace::new(small_config()).unwrap();
        let codecs: BTreeMap<String, Codec> = ws.train_codecs().unwrap().into_iter().map(|(k, v)| (k, v.0)).collect();
        let reg = ws.align(&codecs).unwrap().registry;
        let codecs = arc_codecs(codecs);
        let one = ws.bench(&codecs, &reg, 1).unwrap();
        let four = ws.bench(&codecs, &reg, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.episodes.len(), 3 * 3);
        assert!(one.payloads(Channel::Wormhole, None).iter().all(|&p| p == 128.0));
        for r in one.episodes.iter().filter(|r| r.channel == Channel::Wormhole) {
            assert_eq!(r.non_final_backbone_steps, r.expected_non_final_steps);
        }
        assert_eq!(one.fidelity.len(), 2);
        let table = one.table();
        assert!(table.starts_with("schema_version 1"));
        assert!(table.contains("wormhole") && table.contains("median KL trained"));
    }

    #[test]
    fn seeded_tasks() {
        let ws = Workspace::new(small_config()).unwrap();
        assert_eq!(ws.task().len(), 8);
        let t = ws.bench_task(2);
        assert_eq!(t, ws.bench_task(2));
        assert!((4..=12).contains(&t.len()));
        assert!(t.iter().all(|&x| x > 1));
    }
}
