//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits nonzero if any fails. Pass criterion numbers as arguments
//! to run a subset: `cargo test -p wormhole-core --test acceptance -- 3 7`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use wormhole::align::{fit_alignment, fit_ridge, ridge_objective, Affine, AffineMapPair, AnchorBatch, HubRegistry};
use wormhole::codec::{inject, resample, Codec, CodecConfig, Space, UniversalMessage, VisionInjection};
use wormhole::config::RunConfig;
use wormhole::distill::{
    evaluate, example_loss, example_loss_and_gradients, synthetic_anchors, teacher_pass, teachers_for, DistillConfig,
    DistillReport,
};
use wormhole::pipeline::{arc_codecs, mean_var, AlignOutcome, BenchResult, Workspace};
use wormhole::rng::Rng;
use wormhole::rollout::{NormMatcher, DEFAULT_EPS};
use wormhole::runtime::{aggregate_memory, receiver_tokens, Channel, Episode, MemoryBuffer, Mode};
use wormhole::vlm::{BackboneSpec, BaselineSpan, FrozenBackbone};
use wormhole::Tensor;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).expect("configs/desk.toml parses")
}

/// One full train -> align -> bench run over the desk config, shared by the
/// criteria that inspect it.
struct Pipeline {
    ws: Workspace,
    frozen_before: BTreeMap<String, (String, Vec<(String, Tensor)>)>,
    trained: BTreeMap<String, (Codec, DistillReport)>,
    align: AlignOutcome,
    bench: BenchResult,
}

fn snapshot(ws: &Workspace) -> BTreeMap<String, (String, Vec<(String, Tensor)>)> {
    ws.backbones()
        .map(|b| {
            let params = b.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
            (b.model_id().to_string(), (b.fingerprint(), params))
        })
        .collect()
}

fn pipeline() -> &'static Pipeline {
    static CELL: OnceLock<Pipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let ws = Workspace::new(desk_config()).expect("workspace");
        let frozen_before = snapshot(&ws);
        let trained = ws.train_codecs().expect("training");
        let codecs: BTreeMap<String, Codec> = trained.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect();
        let align = ws.align(&codecs).expect("alignment");
        let bench = ws.bench(&arc_codecs(codecs), &align.registry, 1).expect("bench");
        Pipeline {
            ws,
            frozen_before,
            trained,
            align,
            bench,
        }
    })
}

fn gradient_fidelity() -> Check {
    let backbone = ok(FrozenBackbone::build(BackboneSpec::desk("fd"), 21))?;
    let norm = ok(NormMatcher::fit(&backbone, DEFAULT_EPS))?;
    let codec = ok(Codec::new("fd", 32, CodecConfig::default(), norm, 22))?;
    let cfg = DistillConfig::default();
    let anchor = &synthetic_anchors(backbone.spec(), 1, 23)[0];
    let teacher = ok(teacher_pass(
        &backbone,
        codec.norm_matcher(),
        anchor,
        &cfg.base_prompt,
        cfg.rollout_len,
    ))?;
    let (_, grads) = ok(example_loss_and_gradients(&backbone, &codec, &teacher, &cfg, None))?;

    let n_params = 64;
    let h = 1e-5;
    let mut rng = Rng::new(24);
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let k = rng.below(grads.len());
        let idx = rng.below(grads[k].len());
        let shifted = |by: f64| -> Result<f64, String> {
            let mut c = codec.clone();
            c.params_mut().iter_mut().nth(k).unwrap().value.data_mut()[idx] += by;
            Ok(ok(example_loss(&backbone, &c, &teacher, &cfg))?.total)
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let an = grads[k].data()[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
        let name = &codec.params().iter().nth(k).unwrap().name;
        ensure!(
            rel <= 1e-4,
            "{name}[{idx}]: finite difference {fd:e} vs analytic {an:e} (rel {rel:.2e})"
        );
    }
    Ok(format!("{n_params} parameters, worst relative error {worst:.2e}"))
}

fn distillation_efficacy() -> Check {
    let p = pipeline();
    let id = "alpha";
    let b = ok(p.ws.backbone(id))?;
    let cfg = p.ws.config.distill_config(p.ws.config.agent_index(id).unwrap());
    ensure!(b.d() == 32, "alpha has d={}", b.d());
    ensure!(
        cfg.rollout_len == 16 && cfg.steps == 200,
        "T={} steps={}",
        cfg.rollout_len,
        cfg.steps
    );
    ensure!(p.ws.train_anchors().len() == 16, "training anchors");
    ensure!(
        (cfg.lambda_h, cfg.lambda_kl, cfg.lambda_rms, cfg.tau) == (1.0, 0.25, 0.1, 1.0),
        "loss weights {:?}",
        (cfg.lambda_h, cfg.lambda_kl, cfg.lambda_rms, cfg.tau)
    );
    let (trained, report) = &p.trained[id];
    let ratio = report.final_loss / report.initial_loss;
    ensure!(
        ratio < 0.5,
        "mean loss {:.3} -> {:.3} (ratio {ratio:.3})",
        report.initial_loss,
        report.final_loss
    );

    let heldout = p.ws.heldout_anchors();
    ensure!(heldout.len() == 16, "held-out anchors");
    let teachers = ok(teachers_for(b, trained.norm_matcher(), &heldout, &cfg))?;
    let after = ok(evaluate(b, trained, &teachers, &cfg))?.median_kl();
    let before = ok(evaluate(b, &ok(p.ws.fresh_codec(id))?, &teachers, &cfg))?.median_kl();
    ensure!(
        after < before,
        "held-out median KL trained {after:.5} vs untrained {before:.5}"
    );
    Ok(format!(
        "loss ratio {ratio:.3} (lr {}, batch {}); held-out median KL {before:.4} -> {after:.4}",
        cfg.lr, cfg.batch_size
    ))
}

/// `n_agents` agents whose tokens are exact affine images of agent0's.
fn affine_world(seed: u64, n_agents: usize, anchors: usize, rows: usize, dim: usize) -> (AnchorBatch, Vec<Affine>) {
    let mut rng = Rng::new(seed);
    let reference: Vec<Tensor> = (0..anchors).map(|_| rng.normal_matrix(rows, dim, 1.0)).collect();
    let mut tokens = BTreeMap::new();
    let mut truths = vec![Affine::identity(dim)];
    for a in 1..n_agents {
        let map = Affine {
            w: rng.normal_matrix(dim, dim, 1.0 / (dim as f64).sqrt()),
            b: rng.normal_matrix(1, dim, 1.0),
        };
        tokens.insert(
            format!("agent{a}"),
            reference.iter().map(|u| map.apply(u).unwrap()).collect(),
        );
        truths.push(map);
    }
    tokens.insert("agent0".to_string(), reference);
    let batch = AnchorBatch {
        anchor_ids: (0..anchors).map(|i| format!("anchor-{i}")).collect(),
        tokens,
    };
    (batch, truths)
}

fn alignment_recovery() -> Check {
    let dim = CodecConfig::default().universal_dim;
    let rows = CodecConfig::default().universal_tokens();
    // M = 10 D token rows in total
    let anchors = 10 * dim / rows;
    let (batch, truths) = affine_world(31, 4, anchors, rows, dim);
    ensure!(anchors * rows == 10 * dim, "anchor rows {}", anchors * rows);
    let reg = ok(fit_alignment(&batch, "agent0", 1e-8))?;
    let mut rng = Rng::new(32);
    let mut worst: f64 = 0.0;
    for (a, truth) in truths.iter().enumerate().skip(1) {
        let pair = reg.get(&format!("agent{a}")).unwrap();
        let u_ref = rng.normal_matrix(64, dim, 1.0);
        let local = ok(truth.apply(&u_ref))?;
        let round = ok(pair.inn.apply(&ok(pair.out.apply(&local))?))?;
        let back = ok(pair.out.apply(&ok(pair.inn.apply(&u_ref))?))?;
        worst = worst.max(round.max_abs_diff(&local)).max(back.max_abs_diff(&u_ref));
    }
    ensure!(worst <= 1e-4, "round-trip error {worst:.2e}");
    Ok(format!(
        "3 agents, D={dim}, {} anchor rows, worst entrywise error {worst:.2e}",
        10 * dim
    ))
}

fn linear_scaling() -> Check {
    let dim = CodecConfig::default().universal_dim;
    let (big, _) = affine_world(41, 8, 12, 8, dim);
    let mut counts = Vec::new();
    for n in [1, 2, 4, 8] {
        let mut sub = big.clone();
        sub.tokens
            .retain(|k, _| k["agent".len()..].parse::<usize>().unwrap() < n);
        let reg = ok(fit_alignment(&sub, "agent0", 1e-3))?;
        ensure!(reg.len() == n, "{n} agents gave {} entries", reg.len());
        let expected = 2 * n * (dim * dim + dim);
        ensure!(
            reg.param_count() == expected,
            "N={n}: {} parameters, expected {expected}",
            reg.param_count()
        );
        counts.push(reg.param_count());
    }

    let mut seven = big.clone();
    seven.tokens.remove("agent7");
    let before = ok(fit_alignment(&seven, "agent0", 1e-3))?;
    let after = ok(fit_alignment(&big, "agent0", 1e-3))?;
    for id in before.agents() {
        ensure!(
            before.get(id).unwrap().bitwise_eq(after.get(id).unwrap()),
            "refit changed {id}"
        );
    }
    let mut grown = before.clone();
    ok(grown.insert(after.get("agent7").unwrap().clone()))?;
    for id in before.agents() {
        ensure!(
            before.get(id).unwrap().bitwise_eq(grown.get(id).unwrap()),
            "insert changed {id}"
        );
    }
    Ok(format!("parameter counts {counts:?}; existing maps bitwise unchanged"))
}

fn bounded_bandwidth() -> Check {
    let p = pipeline();
    let cfg = &p.ws.config;
    ensure!(cfg.bench.episodes == 32, "episodes {}", cfg.bench.episodes);
    ensure!(
        cfg.bench.text_budgets == [8, 64, 512],
        "budgets {:?}",
        cfg.bench.text_budgets
    );
    let per_message = cfg.codec.universal_tokens() * cfg.codec.universal_dim;
    let t = cfg.rollout.steps as u64;

    let worm = p.bench.payloads(Channel::Wormhole, None);
    ensure!(!worm.is_empty(), "no wormhole messages");
    ensure!(
        worm.iter().all(|&x| x == per_message as f64),
        "wormhole payloads differ from {per_message}"
    );
    let (_, worm_var) = mean_var(&worm);
    ensure!(worm_var == 0.0, "wormhole payload variance {worm_var}");
    let mut text_vars = Vec::new();
    for &b in &cfg.bench.text_budgets {
        let (_, v) = mean_var(&p.bench.payloads(Channel::Text, Some(b)));
        ensure!(v > 0.0, "text payload variance is zero at budget {b}");
        text_vars.push(v);
    }

    let n_roles = cfg.runtime.order.len();
    let mut episodes = 0;
    for r in p.bench.episodes.iter().filter(|r| r.channel == Channel::Wormhole) {
        let task = p.ws.bench_task(r.episode);
        let prompts: u64 = cfg.runtime.order[..n_roles - 1]
            .iter()
            .map(|id| p.ws.backbone(id).unwrap().image_prompt(&task).len() as u64)
            .sum();
        let expected = prompts + (n_roles as u64 - 1) * t;
        ensure!(
            r.non_final_backbone_steps == expected,
            "episode {}: {} non-final steps, expected {expected}",
            r.episode,
            r.non_final_backbone_steps
        );
        episodes += 1;
    }
    ensure!(episodes == 32, "{episodes} wormhole episodes");

    // cross-check the trace accounting against the backbones' own counters
    let codecs = arc_codecs(p.trained.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect());
    let agents = ok(p.ws.agents(&codecs))?;
    let task = p.ws.bench_task(0);
    let counted = |run: &dyn Fn() -> Result<Episode, String>| -> Result<(Episode, u64), String> {
        let before: u64 = agents.iter().map(|a| a.backbone().positions_processed()).sum::<u64>();
        let ep = run()?;
        let after: u64 = agents.iter().map(|a| a.backbone().positions_processed()).sum::<u64>();
        Ok((ep, after - before))
    };
    let (ep, delta) = counted(&|| {
        ok(p.ws.run_episode(&agents, &p.align.registry, Channel::Wormhole, Mode::Chained, &task, 0))
    })?;
    // each handle shares its backbone with the other roles of the same agent
    let sharing = agents.len() as u64 / p.ws.backbones().count() as u64;
    let traced: u64 = ep.trace.roles.iter().map(|r| r.backbone_steps).sum();
    ensure!(
        delta == traced * sharing,
        "backbone counters saw {delta} steps, trace says {traced}"
    );

    Ok(format!(
        "payload {per_message} reals/message (variance 0); text variance {:?}; steps exact over {episodes} episodes",
        text_vars.iter().map(|v| format!("{v:.0}")).collect::<Vec<_>>()
    ))
}

fn frozen_backbones() -> Check {
    let p = pipeline();
    let after = snapshot(&p.ws);
    let mut tensors = 0;
    for (id, (fp, params)) in &p.frozen_before {
        let (fp2, params2) = &after[id];
        ensure!(fp == fp2, "{id}: fingerprint changed");
        ensure!(params.len() == params2.len(), "{id}: parameter list changed");
        for ((n, a), (_, b)) in params.iter().zip(params2) {
            ensure!(a.bitwise_eq(b), "{id}: {n} changed");
            tensors += 1;
        }
    }
    ensure!(p.bench.episodes.len() == 32 * 4, "bench did not run in full");
    Ok(format!(
        "{tensors} backbone tensors bitwise unchanged after train, align and bench"
    ))
}

fn injection_algebra() -> Check {
    let mut rng = Rng::new(71);
    let (k, d) = (8, 24);
    let mut worst: f64 = 0.0;
    for l in [1, 2, 5, 8, 12, 20, 33] {
        let baseline = BaselineSpan {
            agent: "r".into(),
            dummy_seed: 0,
            values: rng.normal_matrix(l, d, 0.3),
        };
        let inj = VisionInjection {
            delta: rng.normal_matrix(k, d, 1.0),
            gate: 0.37,
            target_agent: "r".into(),
        };
        let got = ok(inject(&baseline, &inj, l))?;
        // linear interpolation of the delta rows onto l evenly spaced points
        for j in 0..l {
            let x = if l == 1 {
                (k - 1) as f64 / 2.0
            } else {
                j as f64 * (k - 1) as f64 / (l - 1) as f64
            };
            let lo = (x.floor() as usize).min(k - 1);
            let hi = (lo + 1).min(k - 1);
            let w = x - lo as f64;
            for c in 0..d {
                let r = (1.0 - w) * inj.delta.at(lo, c) + w * inj.delta.at(hi, c);
                let direct = baseline.values.at(j, c) + inj.gate * r;
                worst = worst.max((got.at(j, c) - direct).abs());
            }
        }
        let off = ok(inject(&baseline, &inj.clone().with_gate_override(0.0), l))?;
        ensure!(off.bitwise_eq(&baseline.values), "gate 0 at L={l} changed the span");
        let zero = VisionInjection {
            delta: Tensor::zeros(k, d),
            ..inj.clone()
        };
        ensure!(
            ok(inject(&baseline, &zero, l))?.bitwise_eq(&baseline.values),
            "zero delta at L={l} changed the span"
        );
    }
    ensure!(worst <= 1e-12, "direct recomputation differs by {worst:e}");
    let delta = rng.normal_matrix(k, d, 1.0);
    ensure!(
        ok(resample(&delta, k))?.bitwise_eq(&delta),
        "resample at L=K is not the identity"
    );
    Ok(format!(
        "worst deviation {worst:.1e} over 7 span lengths; reductions exact"
    ))
}

fn heterogeneous_end_to_end() -> Check {
    // (trace json, registry bytes, answer, checkpoint bytes)
    type Run = (Vec<u8>, Vec<u8>, Vec<usize>, Vec<Vec<u8>>);
    let once = || -> Result<Run, String> {
        let ws = ok(Workspace::new(desk_config()))?;
        let trained = ok(ws.train_codecs())?;
        let codecs: BTreeMap<String, Codec> = trained.into_iter().map(|(k, v)| (k, v.0)).collect();
        let align = ok(ws.align(&codecs))?;
        let blobs = codecs.values().map(|c| c.to_container().to_bytes().unwrap()).collect();
        let agents = ok(ws.agents(&arc_codecs(codecs)))?;
        let ep = ok(ws.run_episode(
            &agents,
            &align.registry,
            Channel::Wormhole,
            Mode::Chained,
            &ws.task(),
            0,
        ))?;
        let registry = ok(align.registry.to_container().to_bytes())?;
        Ok((ok(serde_json::to_vec(&ep.trace))?, registry, ep.answer, blobs))
    };
    let cfg = desk_config();
    let dims: Vec<(usize, usize)> = cfg.agent.values().map(|a| (a.d, a.l_img)).collect();
    ensure!(dims.len() == 2 && dims[0] != dims[1], "backbones {dims:?}");
    ensure!(cfg.runtime.order.len() == 4, "{} roles", cfg.runtime.order.len());
    let a = once()?;
    let b = once()?;
    ensure!(a.0 == b.0, "traces differ between runs");
    ensure!(a.1 == b.1, "registries differ between runs");
    ensure!(a.2 == b.2, "answers differ: {:?} vs {:?}", a.2, b.2);
    ensure!(a.3 == b.3, "codec checkpoints differ between runs");
    ensure!(!a.2.is_empty(), "empty answer");
    Ok(format!(
        "backbones (d, L_img) {dims:?}; 4 roles; answer {:?} reproduced bitwise",
        a.2
    ))
}

fn ridge_optimality() -> Check {
    let mut rng = Rng::new(91);
    let mut worst: f64 = 0.0;
    let problems = [
        (40, 6, 1e-3),
        (25, 8, 0.1),
        (120, 16, 1e-2),
        (12, 10, 1.0),
        (60, 4, 1e-6),
    ];
    for &(m, dim, lambda) in &problems {
        let x = rng.normal_matrix(m, dim, 1.0);
        let y = rng.normal_matrix(m, dim, 1.0);
        let fit = ok(fit_ridge(&x, &y, lambda))?;
        let base = ok(ridge_objective(&x, &y, &fit, lambda))?;
        for _ in 0..100 {
            let dir = rng.normal_matrix(dim, dim, 1.0);
            let w = ok(fit.w.add(&dir.scale(1e-4 / dir.frobenius_norm())))?;
            let moved = ok(ridge_objective(&x, &y, &Affine { w, b: fit.b.clone() }, lambda))?;
            worst = worst.max(base - moved);
            ensure!(
                moved >= base - 1e-10,
                "perturbation lowered the objective by {:e}",
                base - moved
            );
        }
    }
    Ok(format!(
        "{} problems x 100 perturbations; largest decrease {:.1e}",
        problems.len(),
        worst.max(0.0)
    ))
}

fn aggregation_equivalence() -> Check {
    let p = pipeline();
    let reg: &HubRegistry = &p.align.registry;
    let cfg = &p.ws.config.codec;
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for receiver in reg.agents() {
        for n in 1..=5 {
            let mut mem = MemoryBuffer::new();
            for s in 0..n {
                let sender: Vec<&str> = reg.agents().collect();
                ok(mem.push(UniversalMessage {
                    tokens: rng.normal_matrix(cfg.universal_tokens(), cfg.universal_dim, 1.0),
                    space: Space::Reference,
                    sender: sender[s % sender.len()].to_string(),
                }))?;
            }
            let per = ok(receiver_tokens(receiver, &mem, reg))?.unwrap();
            let pair: &AffineMapPair = reg.get(receiver).unwrap();
            let stacked = ok(pair.inn.apply(&ok(aggregate_memory(&mem))?.unwrap()))?;
            worst = worst.max(per.max_abs_diff(&stacked));
            checked += 1;
        }
    }
    ensure!(worst <= 1e-12, "per-message and stacked mapping differ by {worst:e}");
    Ok(format!("{checked} memories, worst deviation {worst:.1e}"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient fidelity",
            limit: Some(Duration::from_secs(120)),
            run: gradient_fidelity,
        },
        Criterion {
            id: 2,
            name: "distillation efficacy",
            limit: Some(Duration::from_secs(600)),
            run: distillation_efficacy,
        },
        Criterion {
            id: 3,
            name: "alignment oracle recovery",
            limit: Some(Duration::from_secs(60)),
            run: alignment_recovery,
        },
        Criterion {
            id: 4,
            name: "linear registry scaling",
            limit: None,
            run: linear_scaling,
        },
        Criterion {
            id: 5,
            name: "bounded bandwidth",
            limit: None,
            run: bounded_bandwidth,
        },
        Criterion {
            id: 6,
            name: "frozen backbones",
            limit: None,
            run: frozen_backbones,
        },
        Criterion {
            id: 7,
            name: "injection algebra",
            limit: None,
            run: injection_algebra,
        },
        Criterion {
            id: 8,
            name: "heterogeneous end-to-end",
            limit: Some(Duration::from_secs(120)),
            run: heterogeneous_end_to_end,
        },
        Criterion {
            id: 9,
            name: "ridge optimality",
            limit: None,
            run: ridge_optimality,
        },
        Criterion {
            id: 10,
            name: "aggregation equivalence",
            limit: None,
            run: aggregation_equivalence,
        },
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in &criteria {
            println!("criterion-{}: test", c.id);
        }
        return;
    }
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();

    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} {}: PASS ({detail}; {:.2}s)",
                c.id,
                c.name,
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "criterion {:>2} {}: FAIL ({why}; {:.2}s)",
                    c.id,
                    c.name,
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
