//! Hub-and-spoke affine alignment of universal tokens.
//!
//! Each agent `i` gets `A_out: U_i -> U_ref` and `A_in: U_ref -> U_i`, both
//! fitted by closed-form ridge regression on tokens of a shared anchor set.
//! The reference agent's pair is the identity, so the registry stores
//! `2 N (D^2 + D)` reals for `N` agents.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::codec::{Codec, Space, UniversalMessage};
use crate::container::Container;
use crate::distill::{teacher_prompt, AnchorText};
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::rollout::latent_rollout;
use crate::tensor::Tensor;
use crate::vlm::FrozenBackbone;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
pub const REGISTRY_KIND: &str = "hub-registry";
const SCHEMA_VERSION: u32 = 1;

/// `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    /// `1 x D`.
    pub b: Tensor,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Affine {
            w: Tensor::eye(dim),
            b: Tensor::zeros(1, dim),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        let (r, c) = y.dims2();
        let b = self.b.data();
        let mut out = y.into_data();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += b[j];
            }
        }
        Ok(Tensor::matrix(r, c, out))
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn bitwise_eq(&self, other: &Affine) -> bool {
        self.w.bitwise_eq(&other.w) && self.b.bitwise_eq(&other.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMapPair {
    pub agent: String,
    pub out: Affine,
    pub inn: Affine,
}

impl AffineMapPair {
    pub fn identity(agent: impl Into<String>, dim: usize) -> Self {
        AffineMapPair {
            agent: agent.into(),
            out: Affine::identity(dim),
            inn: Affine::identity(dim),
        }
    }

    pub fn bitwise_eq(&self, other: &AffineMapPair) -> bool {
        self.agent == other.agent && self.out.bitwise_eq(&other.out) && self.inn.bitwise_eq(&other.inn)
    }
}

/// `|X W + 1 b^T - Y|_F^2 + lambda |W|_F^2`.
pub fn ridge_objective(x: &Tensor, y: &Tensor, map: &Affine, lambda: f64) -> Result<f64> {
    let resid = map.apply(x)?.sub(y)?;
    let fit: f64 = resid.data().iter().map(|v| v * v).sum();
    let reg: f64 = map.w.data().iter().map(|v| v * v).sum();
    Ok(fit + lambda * reg)
}

/// Closed-form ridge fit after mean-centring both sides.
pub fn fit_ridge(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Affine> {
    let (n, dx) = x.dims2();
    let (ny, dy) = y.dims2();
    if n != ny {
        return Err(Error::dim("fit_ridge", format!("X has {n} rows, Y has {ny}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Contract(format!("ridge lambda must be positive, got {lambda}")));
    }
    x.ensure_finite("ridge inputs")?;
    y.ensure_finite("ridge targets")?;
    let mx = x.col_means();
    let my = y.col_means();
    let center = |t: &Tensor, m: &Tensor| {
        let c = t.cols();
        let md = m.data();
        let data = t.data().iter().enumerate().map(|(i, v)| v - md[i % c]).collect();
        Tensor::matrix(t.rows(), c, data)
    };
    let xc = center(x, &mx);
    let yc = center(y, &my);
    let xt = xc.transpose();
    let mut gram = xt.matmul(&xc)?;
    for i in 0..dx {
        gram.data_mut()[i * dx + i] += lambda;
    }
    let w = solve_spd(&gram, &xt.matmul(&yc)?)?;
    let b = my.sub(&mx.matmul(&w)?)?;
    let map = Affine { w, b };
    if !map.w.is_finite() || !map.b.is_finite() {
        return Err(Error::numeric("ridge solution"));
    }
    debug_assert_eq!(map.b.cols(), dy);
    Ok(map)
}

/// Universal tokens of every agent for a shared, ordered anchor set.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub anchor_ids: Vec<String>,
    /// Per agent, one `K_u x D` matrix per anchor in `anchor_ids` order.
    pub tokens: BTreeMap<String, Vec<Tensor>>,
}

impl AnchorBatch {
    /// Stack anchors (outer) by token rows (inner) into `(M K_u) x D`.
    pub fn flatten(&self, agent: &str) -> Result<Tensor> {
        let mats = self
            .tokens
            .get(agent)
            .ok_or_else(|| Error::Alignment(format!("no anchor tokens for {agent}")))?;
        if mats.len() != self.anchor_ids.len() {
            return Err(Error::Alignment(format!(
                "{agent} has {} anchor token sets, expected {}",
                mats.len(),
                self.anchor_ids.len()
            )));
        }
        let refs: Vec<&Tensor> = mats.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

/// One agent taking part in anchor collection; `codec` may be missing.
pub struct AlignParticipant<'a> {
    pub backbone: &'a FrozenBackbone,
    pub codec: Option<&'a Codec>,
}

/// prompt -> rollout -> encode for every (agent, anchor).
pub fn collect_anchor_tokens(
    agents: &[AlignParticipant<'_>],
    anchors: &[AnchorText],
    base_prompt: &[usize],
    rollout_len: usize,
) -> Result<AnchorBatch> {
    let mut tokens = BTreeMap::new();
    for a in agents {
        let id = a.backbone.model_id();
        let codec = a
            .codec
            .ok_or_else(|| Error::Registry(format!("agent {id} has no trained codec")))?;
        if codec.model_id() != id {
            return Err(Error::Registry(format!(
                "codec for {} supplied for agent {id}",
                codec.model_id()
            )));
        }
        let mats = anchors
            .par_iter()
            .map(|anchor| {
                anchor.validate(a.backbone.spec())?;
                let state = a
                    .backbone
                    .encode_prompt(&teacher_prompt(a.backbone, base_prompt, anchor), None)?;
                let rollout = latent_rollout(a.backbone, &state, codec.norm_matcher(), rollout_len)?;
                Ok(codec.encode(&rollout)?.tokens)
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.insert(id.to_string(), mats).is_some() {
            return Err(Error::Registry(format!("agent {id} listed twice")));
        }
    }
    Ok(AnchorBatch {
        anchor_ids: anchors.iter().map(|a| a.id.clone()).collect(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubRegistry {
    pub reference: String,
    pub lambda: f64,
    pub dim: usize,
    maps: BTreeMap<String, AffineMapPair>,
}

impl HubRegistry {
    /// A registry holding only the reference agent's identity pair.
    pub fn new(reference: impl Into<String>, dim: usize, lambda: f64) -> Self {
        let reference = reference.into();
        let mut maps = BTreeMap::new();
        maps.insert(reference.clone(), AffineMapPair::identity(reference.clone(), dim));
        HubRegistry {
            reference,
            lambda,
            dim,
            maps,
        }
    }

    pub fn get(&self, agent: &str) -> Option<&AffineMapPair> {
        self.maps.get(agent)
    }

    pub fn agents(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn insert(&mut self, pair: AffineMapPair) -> Result<()> {
        if pair.agent == self.reference {
            return Err(Error::Registry(
                "the reference agent's maps are fixed to identity".into(),
            ));
        }
        for a in [&pair.out, &pair.inn] {
            if a.w.dims2() != (self.dim, self.dim) || a.b.dims2() != (1, self.dim) {
                return Err(Error::dim(
                    "registry insert",
                    format!("maps for {} are not {}-dimensional", pair.agent, self.dim),
                ));
            }
        }
        self.maps.insert(pair.agent.clone(), pair);
        Ok(())
    }

    /// Total stored reals, counting the reference identity pair.
    pub fn param_count(&self) -> usize {
        self.maps
            .values()
            .map(|p| p.out.num_params() + p.inn.num_params())
            .sum()
    }

    fn pair(&self, agent: &str) -> Result<&AffineMapPair> {
        self.maps
            .get(agent)
            .ok_or_else(|| Error::Routing(format!("agent {agent} is not registered")))
    }

    pub fn to_reference(&self, msg: &UniversalMessage) -> Result<UniversalMessage> {
        if msg.space != Space::AgentLocal {
            return Err(Error::Routing(format!(
                "message from {} is already in reference space",
                msg.sender
            )));
        }
        let pair = self.pair(&msg.sender)?;
        Ok(UniversalMessage {
            tokens: pair.out.apply(&msg.tokens)?,
            space: Space::Reference,
            sender: msg.sender.clone(),
        })
    }

    /// Map a reference-space message into `receiver`'s local space. The
    /// sender label is kept.
    pub fn from_reference(&self, msg: &UniversalMessage, receiver: &str) -> Result<UniversalMessage> {
        if msg.space != Space::Reference {
            return Err(Error::Routing(format!(
                "message from {} is not in reference space",
                msg.sender
            )));
        }
        let pair = self.pair(receiver)?;
        Ok(UniversalMessage {
            tokens: pair.inn.apply(&msg.tokens)?,
            space: Space::AgentLocal,
            sender: msg.sender.clone(),
        })
    }

    pub fn to_container(&self) -> Container {
        let agents: Vec<&str> = self.agents().collect();
        let mut c = Container::new(json!({
            "kind": REGISTRY_KIND,
            "schema_version": SCHEMA_VERSION,
            "reference": self.reference,
            "lambda": self.lambda,
            "dim": self.dim,
            "agents": agents,
        }));
        for (id, p) in &self.maps {
            c.push(format!("{id}/out/w"), p.out.w.clone());
            c.push(format!("{id}/out/b"), p.out.b.clone());
            c.push(format!("{id}/in/w"), p.inn.w.clone());
            c.push(format!("{id}/in/b"), p.inn.b.clone());
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let h = &c.header;
        if h["kind"] != REGISTRY_KIND || h["schema_version"] != SCHEMA_VERSION {
            return Err(bad(format!(
                "not a registry (kind {}, schema {})",
                h["kind"], h["schema_version"]
            )));
        }
        let reference = h["reference"].as_str().ok_or_else(|| bad("missing reference".into()))?;
        let lambda = h["lambda"].as_f64().ok_or_else(|| bad("missing lambda".into()))?;
        let dim = h["dim"].as_u64().ok_or_else(|| bad("missing dim".into()))? as usize;
        let agents: Vec<String> = serde_json::from_value(h["agents"].clone())?;
        let mut reg = HubRegistry::new(reference, dim, lambda);
        let get = |name: String| {
            c.get(&name)
                .cloned()
                .ok_or_else(|| bad(format!("missing array {name}")))
        };
        for id in agents {
            let pair = AffineMapPair {
                out: Affine {
                    w: get(format!("{id}/out/w"))?,
                    b: get(format!("{id}/out/b"))?,
                },
                inn: Affine {
                    w: get(format!("{id}/in/w"))?,
                    b: get(format!("{id}/in/b"))?,
                },
                agent: id.clone(),
            };
            if id == reference {
                if !pair.bitwise_eq(&AffineMapPair::identity(id.clone(), dim)) {
                    return Err(bad("reference maps are not the identity".into()));
                }
            } else {
                reg.insert(pair)?;
            }
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        HubRegistry::from_container(&Container::load(path)?, path)
    }
}

/// Fit one non-reference agent's pair against the reference tokens.
pub fn fit_agent(batch: &AnchorBatch, reference: &str, agent: &str, lambda: f64) -> Result<AffineMapPair> {
    let u_ref = batch.flatten(reference)?;
    let u_i = batch.flatten(agent)?;
    if u_ref.dims2() != u_i.dims2() {
        return Err(Error::Alignment(format!(
            "{agent} tokens are {:?}, reference tokens are {:?}",
            u_i.dims2(),
            u_ref.dims2()
        )));
    }
    Ok(AffineMapPair {
        agent: agent.to_string(),
        out: fit_ridge(&u_i, &u_ref, lambda)?,
        inn: fit_ridge(&u_ref, &u_i, lambda)?,
    })
}

pub fn fit_alignment(batch: &AnchorBatch, reference: &str, lambda: f64) -> Result<HubRegistry> {
    let u_ref = batch.flatten(reference)?;
    let mut reg = HubRegistry::new(reference, u_ref.cols(), lambda);
    let others: Vec<&String> = batch.tokens.keys().filter(|a| a.as_str() != reference).collect();
    let pairs = others
        .par_iter()
        .map(|a| fit_agent(batch, reference, a, lambda))
        .collect::<Result<Vec<_>>>()?;
    for p in pairs {
        reg.insert(p)?;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn affine_world(seed: u64, agents: usize, m: usize, k_u: usize, dim: usize) -> AnchorBatch {
        let mut rng = Rng::new(seed);
        let reference: Vec<Tensor> = (0..m).map(|_| rng.normal_matrix(k_u, dim, 1.0)).collect();
        let mut tokens = BTreeMap::new();
        for a in 1..agents {
            let mut w = rng.normal_matrix(dim, dim, 0.3);
            for i in 0..dim {
                w.data_mut()[i * dim + i] += 1.0;
            }
            let map = Affine {
                w,
                b: rng.normal_matrix(1, dim, 1.0),
            };
            tokens.insert(
                format!("agent{a}"),
                reference.iter().map(|u| map.apply(u).unwrap()).collect(),
            );
        }
        tokens.insert("agent0".to_string(), reference);
        AnchorBatch {
            anchor_ids: (0..m).map(|i| format!("anchor-{i}")).collect(),
            tokens,
        }
    }

    #[test]
    fn self_map_is_identity() {
        let x = Rng::new(1).normal_matrix(40, 5, 1.0);
        let a = fit_ridge(&x, &x, 1e-8).unwrap();
        assert!(a.w.max_abs_diff(&Tensor::eye(5)) <= 1e-5);
        assert!(a.b.data().iter().all(|v| v.abs() <= 1e-5));
    }

    #[test]
    fn recovers_synthetic_affine_map() {
        let dim = 6;
        let mut rng = Rng::new(2);
        let x = rng.normal_matrix(10 * dim, dim, 1.0);
        let truth = Affine {
            w: rng.normal_matrix(dim, dim, 1.0),
            b: rng.normal_matrix(1, dim, 1.0),
        };
        let y = truth.apply(&x).unwrap();
        let fit = fit_ridge(&x, &y, 1e-8).unwrap();
        assert!(fit.w.max_abs_diff(&truth.w) <= 1e-5);
        assert!(fit.b.max_abs_diff(&truth.b) <= 1e-5);
    }

    #[test]
    fn heavy_regularisation_shrinks_to_the_mean() {
        let mut rng = Rng::new(3);
        let x = rng.normal_matrix(30, 4, 1.0);
        let y = rng.normal_matrix(30, 4, 1.0);
        let fit = fit_ridge(&x, &y, 1e8).unwrap();
        let scale = x.frobenius_norm() * y.frobenius_norm() / 1e8;
        assert!(fit.w.data().iter().all(|v| v.abs() <= scale));
        assert!(fit.b.max_abs_diff(&y.col_means()) <= 1e-4 * scale.max(1.0));
    }

    #[test]
    fn ridge_solution_is_a_local_minimum() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(25, 5, 1.0);
        let y = rng.normal_matrix(25, 5, 1.0);
        let lambda = 0.1;
        let fit = fit_ridge(&x, &y, lambda).unwrap();
        let base = ridge_objective(&x, &y, &fit, lambda).unwrap();
        for _ in 0..100 {
            let dir = rng.normal_matrix(5, 5, 1.0);
            let w = fit.w.add(&dir.scale(1e-4 / dir.frobenius_norm())).unwrap();
            let moved = Affine { w, b: fit.b.clone() };
            assert!(ridge_objective(&x, &y, &moved, lambda).unwrap() >= base - 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::zeros(3, 2);
        assert!(fit_ridge(&x, &Tensor::zeros(4, 2), 1.0).is_err());
        assert!(fit_ridge(&x, &x, 0.0).is_err());
        assert!(matches!(
            fit_ridge(&Tensor::filled(3, 2, f64::NAN), &x, 1.0),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn affine_world_round_trip() {
        let batch = affine_world(5, 3, 20, 4, 8);
        let reg = fit_alignment(&batch, "agent0", 1e-8).unwrap();
        let mut rng = Rng::new(6);
        let u_ref = rng.normal_matrix(4, 8, 1.0);
        for agent in ["agent1", "agent2"] {
            let pair = reg.get(agent).unwrap();
            let local = pair.inn.apply(&u_ref).unwrap();
            let msg = UniversalMessage {
                tokens: local.clone(),
                space: Space::AgentLocal,
                sender: agent.into(),
            };
            let r = reg.to_reference(&msg).unwrap();
            assert!(r.tokens.max_abs_diff(&u_ref) <= 1e-4);
            let back = reg.from_reference(&r, agent).unwrap();
            assert_eq!(back.space, Space::AgentLocal);
            assert!(back.tokens.max_abs_diff(&local) <= 1e-4);
        }
    }

    #[test]
    fn reference_is_identity_and_bias_only_on_zero() {
        let batch = affine_world(7, 2, 10, 3, 4);
        let reg = fit_alignment(&batch, "agent0", 1e-3).unwrap();
        let u = Rng::new(8).normal_matrix(3, 4, 1.0);
        let own = UniversalMessage {
            tokens: u.clone(),
            space: Space::AgentLocal,
            sender: "agent0".into(),
        };
        assert!(reg.to_reference(&own).unwrap().tokens.bitwise_eq(&u));
        let zero = UniversalMessage {
            tokens: Tensor::zeros(3, 4),
            sender: "agent1".into(),
            ..own.clone()
        };
        let r = reg.to_reference(&zero).unwrap();
        let b = &reg.get("agent1").unwrap().out.b;
        for i in 0..3 {
            assert_eq!(r.tokens.row(i), b.data());
        }
        let stranger = UniversalMessage {
            sender: "nobody".into(),
            ..own
        };
        assert!(matches!(reg.to_reference(&stranger), Err(Error::Routing(_))));
    }

    #[test]
    fn to_reference_matches_direct_oracle_and_is_affine() {
        let batch = affine_world(9, 2, 10, 3, 4);
        let reg = fit_alignment(&batch, "agent0", 1e-3).unwrap();
        let pair = reg.get("agent1").unwrap();
        let mut rng = Rng::new(10);
        let (u1, u2) = (rng.normal_matrix(3, 4, 1.0), rng.normal_matrix(3, 4, 1.0));
        let msg = |t: &Tensor| UniversalMessage {
            tokens: t.clone(),
            space: Space::AgentLocal,
            sender: "agent1".into(),
        };
        let r1 = reg.to_reference(&msg(&u1)).unwrap().tokens;
        for i in 0..3 {
            for j in 0..4 {
                let direct: f64 = (0..4).map(|k| u1.at(i, k) * pair.out.w.at(k, j)).sum::<f64>() + pair.out.b.data()[j];
                assert!((r1.at(i, j) - direct).abs() <= 1e-12);
            }
        }
        let (alpha, beta) = (0.7, -1.3);
        let mix = u1.scale(alpha).add(&u2.scale(beta)).unwrap();
        let lhs = reg.to_reference(&msg(&mix)).unwrap().tokens;
        let r2 = reg.to_reference(&msg(&u2)).unwrap().tokens;
        let bias = Tensor::from_rows(&vec![pair.out.b.data().to_vec(); 3]).unwrap();
        let rhs = r1
            .scale(alpha)
            .add(&r2.scale(beta))
            .unwrap()
            .add(&bias.scale(1.0 - alpha - beta))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn parameter_count_is_linear_and_refits_are_modular() {
        let dim = 4;
        let big = affine_world(11, 8, 12, 3, dim);
        for n in [1, 2, 4, 8] {
            let mut sub = big.clone();
            sub.tokens
                .retain(|k, _| k["agent".len()..].parse::<usize>().unwrap() < n);
            let reg = fit_alignment(&sub, "agent0", 1e-3).unwrap();
            assert_eq!(reg.len(), n);
            assert_eq!(reg.param_count(), 2 * n * (dim * dim + dim));
        }
        let mut small = big.clone();
        small.tokens.remove("agent7");
        let a = fit_alignment(&small, "agent0", 1e-3).unwrap();
        let b = fit_alignment(&big, "agent0", 1e-3).unwrap();
        for id in a.agents() {
            assert!(a.get(id).unwrap().bitwise_eq(b.get(id).unwrap()));
        }
    }

    #[test]
    fn mismatched_anchor_sets_are_rejected() {
        let mut batch = affine_world(12, 2, 5, 3, 4);
        batch.tokens.get_mut("agent1").unwrap().pop();
        assert!(matches!(
            fit_alignment(&batch, "agent0", 1e-3),
            Err(Error::Alignment(_))
        ));
        let batch = affine_world(12, 1, 5, 3, 4);
        let reg = fit_alignment(&batch, "agent0", 1e-3).unwrap();
        assert_eq!(reg.len(), 1);
        assert!(fit_alignment(&batch, "missing", 1e-3).is_err());
    }

    #[test]
    fn registry_roundtrip_is_bitwise() {
        let batch = affine_world(13, 3, 10, 3, 4);
        let reg = fit_alignment(&batch, "agent0", 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.bin");
        reg.save(&path).unwrap();
        let back = HubRegistry::load(&path).unwrap();
        assert_eq!(back.len(), 3);
        for id in reg.agents() {
            assert!(back.get(id).unwrap().bitwise_eq(reg.get(id).unwrap()));
        }
        assert_eq!(back.to_container().to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn collects_tokens_per_agent_and_anchor() {
        use crate::codec::CodecConfig;
        use crate::distill::synthetic_anchors;
        use crate::rollout::{NormMatcher, DEFAULT_EPS};
        use crate::vlm::BackboneSpec;

        let backbones: Vec<FrozenBackbone> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| FrozenBackbone::build(BackboneSpec::desk(*id), 40 + i as u64).unwrap())
            .collect();
        let codecs: Vec<Codec> = backbones
            .iter()
            .map(|b| {
                let norm = NormMatcher::fit(b, DEFAULT_EPS).unwrap();
                Codec::new(b.model_id(), b.d(), CodecConfig::default(), norm, 1).unwrap()
            })
            .collect();
        let parts: Vec<AlignParticipant> = backbones
            .iter()
            .zip(&codecs)
            .map(|(b, c)| AlignParticipant {
                backbone: b,
                codec: Some(c),
            })
            .collect();
        let anchors = synthetic_anchors(backbones[0].spec(), 3, 2);
        let batch = collect_anchor_tokens(&parts, &anchors, &[2, 3], 4).unwrap();
        assert_eq!(batch.tokens.values().map(Vec::len).sum::<usize>(), 6);
        assert!(batch.tokens.values().flatten().all(|t| t.dims2() == (8, 16)));
        assert_eq!(batch, collect_anchor_tokens(&parts, &anchors, &[2, 3], 4).unwrap());
        assert!(batch.tokens["a"][0].max_abs_diff(&batch.tokens["b"][0]) > 0.0);

        let missing = [AlignParticipant {
            backbone: &backbones[0],
            codec: None,
        }];
        assert!(matches!(
            collect_anchor_tokens(&missing, &anchors, &[2], 4),
            Err(Error::Registry(_))
        ));
    }
}
