//! Run configuration, read from a TOML document.
//!
//! ```toml
//! [run]
//! seed = 7
//! output_dir = "out"
//!
//! [agent.alpha]
//! d = 32
//! l_img = 12
//! seed = 1
//!
//! [align]
//! reference = "alpha"
//!
//! [runtime]
//! order = ["alpha", "alpha"]
//! ```
//!
//! Every other section and field falls back to the desk-scale defaults.
//! `configs/desk.toml` in the repository lists all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rollout::DEFAULT_EPS;
use crate::runtime::{Mode, RuntimeConfig};
use crate::vlm::BackboneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub agent: BTreeMap<String, AgentSection>,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub distill: DistillSection,
    pub align: AlignSection,
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub d: usize,
    pub l_img: usize,
    /// Seed of the backbone weights.
    pub seed: u64,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::two")]
    pub layers: usize,
    #[serde(default = "defaults::two")]
    pub heads: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub image_marker: usize,
    #[serde(default = "defaults::one")]
    pub eos_token: usize,
    #[serde(default = "defaults::dummy_seed")]
    pub dummy_seed: u64,
}

impl AgentSection {
    pub fn spec(&self, id: &str) -> BackboneSpec {
        BackboneSpec {
            model_id: id.to_string(),
            d: self.d,
            vocab_size: self.vocab_size,
            n_layers: self.layers,
            n_heads: self.heads,
            l_img: self.l_img,
            image_marker: self.image_marker,
            eos_token: self.eos_token,
            max_positions: self.max_positions,
            ffn_mult: self.ffn_mult,
            dummy_seed: self.dummy_seed,
        }
    }
}

mod defaults {
    pub fn vocab_size() -> usize {
        64
    }
    pub fn one() -> usize {
        1
    }
    pub fn two() -> usize {
        2
    }
    pub fn ffn_mult() -> usize {
        4
    }
    pub fn max_positions() -> usize {
        2048
    }
    pub fn dummy_seed() -> u64 {
        0x5eed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    /// Latent rollout length `T`.
    pub steps: usize,
    pub eps: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            steps: 16,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub lambda_h: f64,
    pub lambda_kl: f64,
    pub lambda_rms: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    /// Number of synthetic training anchors.
    pub anchors: usize,
    pub base_prompt: Vec<usize>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            lambda_h: d.lambda_h,
            lambda_kl: d.lambda_kl,
            lambda_rms: d.lambda_rms,
            tau: d.tau,
            lr: d.lr,
            weight_decay: d.weight_decay,
            steps: d.steps,
            batch_size: d.batch_size,
            grad_clip_norm: d.grad_clip_norm,
            anchors: 16,
            base_prompt: d.base_prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSection {
    pub reference: String,
    #[serde(default = "defaults_align::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults_align::anchors")]
    pub anchors: usize,
}

mod defaults_align {
    pub fn lambda() -> f64 {
        crate::align::DEFAULT_RIDGE_LAMBDA
    }
    pub fn anchors() -> usize {
        32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    /// Agent ids in role order; the last one answers.
    pub order: Vec<String>,
    /// Role labels, one per entry of `order`. Metadata only.
    #[serde(default)]
    pub roles: Vec<String>,
    #[serde(default = "defaults_runtime::mode")]
    pub mode: Mode,
    #[serde(default = "defaults_runtime::sixteen")]
    pub answer_budget: usize,
    /// Per-role budget of the text channel.
    #[serde(default = "defaults_runtime::text_budget")]
    pub text_budget: usize,
    /// Task prompt tokens; when absent a seeded prompt of `task_len` tokens is drawn.
    #[serde(default)]
    pub task: Option<Vec<usize>>,
    #[serde(default = "defaults_runtime::task_len")]
    pub task_len: usize,
}

mod defaults_runtime {
    use crate::runtime::Mode;
    pub fn mode() -> Mode {
        Mode::Chained
    }
    pub fn sixteen() -> usize {
        16
    }
    pub fn text_budget() -> usize {
        64
    }
    pub fn task_len() -> usize {
        8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub episodes: usize,
    pub text_budgets: Vec<usize>,
    pub heldout_anchors: usize,
    pub task_len_min: usize,
    pub task_len_max: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            episodes: 32,
            text_budgets: vec![8, 64, 512],
            heldout_anchors: 16,
            task_len_min: 4,
            task_len_max: 12,
        }
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    CodecInit(usize),
    Distill(usize),
    TrainAnchors,
    AlignAnchors,
    HeldoutAnchors,
    Task(usize),
}

impl SeedPurpose {
    fn stream(self) -> u64 {
        match self {
            SeedPurpose::CodecInit(i) => 0x1000 + i as u64,
            SeedPurpose::Distill(i) => 0x2000 + i as u64,
            SeedPurpose::TrainAnchors => 0x3000,
            SeedPurpose::AlignAnchors => 0x3001,
            SeedPurpose::HeldoutAnchors => 0x3002,
            SeedPurpose::Task(e) => 0x10_0000 + e as u64,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn output_dir(&self) -> &Path {
        &self.run.output_dir
    }

    pub fn seed(&self, purpose: SeedPurpose) -> u64 {
        Rng::derive(self.run.seed, purpose.stream()).next_u64()
    }

    /// Agent ids in sorted order; an agent's index is its position here.
    pub fn agent_ids(&self) -> Vec<&str> {
        self.agent.keys().map(String::as_str).collect()
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agent.keys().position(|k| k == id)
    }

    pub fn specs(&self) -> Vec<BackboneSpec> {
        self.agent.iter().map(|(id, a)| a.spec(id)).collect()
    }

    pub fn distill_config(&self, agent_index: usize) -> DistillConfig {
        let s = &self.distill;
        DistillConfig {
            lambda_h: s.lambda_h,
            lambda_kl: s.lambda_kl,
            lambda_rms: s.lambda_rms,
            tau: s.tau,
            lr: s.lr,
            weight_decay: s.weight_decay,
            steps: s.steps,
            batch_size: s.batch_size,
            grad_clip_norm: s.grad_clip_norm,
            seed: self.seed(SeedPurpose::Distill(agent_index)),
            rollout_len: self.rollout.steps,
            base_prompt: s.base_prompt.clone(),
        }
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            rollout_len: self.rollout.steps,
            answer_budget: self.runtime.answer_budget,
        }
    }

    /// Role label of each position in `runtime.order`.
    pub fn role_labels(&self) -> Vec<String> {
        if !self.runtime.roles.is_empty() {
            return self.runtime.roles.clone();
        }
        let n = self.runtime.order.len();
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    "judger".to_string()
                } else {
                    format!("role{i}")
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.agent.is_empty() {
            return bad("at least one [agent.<id>] section is required".into());
        }
        let specs = self.specs();
        for s in &specs {
            s.validate()?;
        }
        let first = &specs[0];
        for s in &specs[1..] {
            if s.vocab_size != first.vocab_size
                || s.image_marker != first.image_marker
                || s.eos_token != first.eos_token
            {
                return bad(format!(
                    "agents {} and {} must share vocab_size, image_marker and eos_token",
                    first.model_id, s.model_id
                ));
            }
        }
        self.codec.validate()?;
        if self.rollout.steps == 0 || !(self.rollout.eps > 0.0) {
            return bad("rollout.steps and rollout.eps must be positive".into());
        }
        self.distill_config(0).validate()?;
        if self.distill.anchors == 0 || self.align.anchors == 0 {
            return bad("distill.anchors and align.anchors must be positive".into());
        }
        for &t in &self.distill.base_prompt {
            if t >= first.vocab_size || t == first.image_marker {
                return bad(format!("distill.base_prompt token {t} is not an ordinary token"));
            }
        }
        if !self.agent.contains_key(&self.align.reference) {
            return bad(format!(
                "align.reference `{}` is not a defined agent",
                self.align.reference
            ));
        }
        if !(self.align.lambda > 0.0) {
            return bad("align.lambda must be positive".into());
        }
        let rt = &self.runtime;
        if rt.order.is_empty() {
            return bad("runtime.order must name at least one agent".into());
        }
        if let Some(unknown) = rt.order.iter().find(|id| !self.agent.contains_key(*id)) {
            return bad(format!("runtime.order names undefined agent `{unknown}`"));
        }
        if !rt.roles.is_empty() && rt.roles.len() != rt.order.len() {
            return bad(format!(
                "runtime.roles has {} labels for {} roles",
                rt.roles.len(),
                rt.order.len()
            ));
        }
        if let Some(task) = &rt.task {
            if let Some(t) = task.iter().find(|&&t| t >= first.vocab_size || t == first.image_marker) {
                return bad(format!("runtime.task token {t} is not an ordinary token"));
            }
        } else if rt.task_len == 0 {
            return bad("runtime.task_len must be positive".into());
        }
        let b = &self.bench;
        if b.episodes == 0 || b.text_budgets.is_empty() || b.heldout_anchors == 0 {
            return bad("bench.episodes, bench.text_budgets and bench.heldout_anchors must be nonempty".into());
        }
        if b.task_len_min == 0 || b.task_len_min > b.task_len_max {
            return bad("bench task length range is empty".into());
        }
        Ok(())
    }
}

fn config_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    let msg = e.message().to_string();
    if let Some(field) = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
        return Error::MissingField {
            section: enclosing_section(text, line),
            field: field.to_string(),
        };
    }
    Error::Config { line, msg }
}

/// Header of the table containing `line` (1-based), or `root`.
fn enclosing_section(text: &str, line: usize) -> String {
    text.lines()
        .take(line.max(1))
        .filter_map(|l| {
            let t = l.trim();
            t.strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .map(str::to_string)
        })
        .last()
        .unwrap_or_else(|| "root".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
seed = 3

[agent.alpha]
d = 32
l_img = 12
seed = 1

[agent.beta]
d = 48
l_img = 20
seed = 2

[align]
reference = "alpha"

[runtime]
order = ["alpha", "beta", "alpha", "beta"]
roles = ["planner", "critic", "refiner", "judger"]
"#;

    #[test]
    fn minimal_config_gets_desk_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.agent_ids(), ["alpha", "beta"]);
        assert_eq!(c.codec, CodecConfig::default());
        assert_eq!(c.rollout.steps, 16);
        assert_eq!(c.distill.steps, 200);
        assert_eq!(c.bench.text_budgets, [8, 64, 512]);
        assert_eq!(c.runtime.mode, Mode::Chained);
        assert_eq!(c.output_dir(), Path::new("out"));
        let d = c.distill_config(1);
        assert_eq!((d.lambda_h, d.lambda_kl, d.lambda_rms, d.tau), (1.0, 0.25, 0.1, 1.0));
        assert_eq!(c.specs()[1].l_img, 20);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        let a = c.seed(SeedPurpose::CodecInit(0));
        assert_eq!(a, RunConfig::parse(MINIMAL).unwrap().seed(SeedPurpose::CodecInit(0)));
        assert_ne!(a, c.seed(SeedPurpose::CodecInit(1)));
        assert_ne!(c.seed(SeedPurpose::AlignAnchors), c.seed(SeedPurpose::HeldoutAnchors));
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("l_img = 20\n", "");
        match RunConfig::parse(&text).unwrap_err() {
            Error::MissingField { section, field } => {
                assert_eq!(field, "l_img");
                assert_eq!(section, "agent.beta");
            }
            other => panic!("unexpected {other}"),
        }
        let err = RunConfig::parse(&MINIMAL.replace("reference = \"alpha\"", "")).unwrap_err();
        assert!(err.to_string().contains("reference"), "{err}");
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let text = MINIMAL.replace("seed = 2", "seed = = 2");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Config { line, .. } => assert_eq!(line, 13),
            other => panic!("unexpected {other}"),
        }
        let typo = MINIMAL.replace("d = 48", "dd = 48");
        assert!(RunConfig::parse(&typo).unwrap_err().to_string().contains("dd"));
    }

    #[test]
    fn semantic_checks() {
        let cases = [
            MINIMAL.replace("reference = \"alpha\"", "reference = \"gamma\""),
            MINIMAL.replace(
                "order = [\"alpha\", \"beta\", \"alpha\", \"beta\"]",
                "order = [\"alpha\", \"delta\"]",
            ),
            MINIMAL.replace("seed = 2", "seed = 2\nvocab_size = 80"),
            MINIMAL.replace(
                "roles = [\"planner\", \"critic\", \"refiner\", \"judger\"]",
                "roles = [\"x\"]",
            ),
            format!("{MINIMAL}\n[codec]\nheads = 3\n"),
        ];
        for text in cases {
            assert!(RunConfig::parse(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn repository_example_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.role_labels().len(), c.runtime.order.len());
    }
}
