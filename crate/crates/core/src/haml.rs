//! Drift functionals, the mirror operator, and numeric checks of their axioms.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::CooperativeMarkovGame;
use crate::oracle::{evaluate, LocalAdvantage, TabularJointPolicy};
use crate::simplex::{kl, Segment};

/// Structure a solver may exploit when maximising the mirror operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftStructure {
    Trivial,
    Kl { coef: f64 },
    ClipRelu { eps: f64 },
    Opaque,
}

/// A drift `D_pi(pi_hat | s, prefix)` of one agent, evaluated on the per-state tables of
/// [`LocalAdvantage`] (which carry the current row, the updated prefix and the advantages).
pub trait DriftFunctional: Send + Sync {
    fn value(&self, local: &LocalAdvantage, candidate: &[f64]) -> f64;

    fn structure(&self) -> DriftStructure {
        DriftStructure::Opaque
    }

    fn name(&self) -> String;

    /// Gradient in the candidate row; central differences unless overridden.
    fn gradient(&self, local: &LocalAdvantage, candidate: &[f64]) -> Vec<f64> {
        let h = 1e-7;
        (0..candidate.len())
            .map(|a| {
                let mut up = candidate.to_vec();
                let mut down = candidate.to_vec();
                up[a] += h;
                down[a] = (down[a] - h).max(0.0);
                (self.value(local, &up) - self.value(local, &down)) / (up[a] - down[a])
            })
            .collect()
    }
}

impl fmt::Debug for dyn DriftFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrivialDrift;

impl DriftFunctional for TrivialDrift {
    fn value(&self, _: &LocalAdvantage, _: &[f64]) -> f64 {
        0.0
    }

    fn structure(&self) -> DriftStructure {
        DriftStructure::Trivial
    }

    fn name(&self) -> String {
        "trivial".into()
    }

    fn gradient(&self, _: &LocalAdvantage, candidate: &[f64]) -> Vec<f64> {
        vec![0.0; candidate.len()]
    }
}

/// `coef * KL(pi(.|s) || pi_hat(.|s))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlDrift {
    pub coef: f64,
}

impl DriftFunctional for KlDrift {
    fn value(&self, local: &LocalAdvantage, candidate: &[f64]) -> f64 {
        self.coef * kl(&local.current, candidate)
    }

    fn structure(&self) -> DriftStructure {
        DriftStructure::Kl { coef: self.coef }
    }

    fn name(&self) -> String {
        format!("kl(coef={})", self.coef)
    }

    fn gradient(&self, local: &LocalAdvantage, candidate: &[f64]) -> Vec<f64> {
        local
            .current
            .iter()
            .zip(candidate)
            .map(|(&p, &x)| if p > 0.0 { -self.coef * p / x } else { 0.0 })
            .collect()
    }
}

/// The drift hidden in the clipped objective:
/// `E_{prefix ~ new, a ~ pi}[ReLU((r - clip(r, 1 +- eps)) * A^{prefix, i}(s, a^prefix, a))]`
/// with `r = pi_hat(a|s) / pi(a|s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReluDrift {
    pub eps: f64,
}

impl DriftFunctional for ClipReluDrift {
    fn value(&self, local: &LocalAdvantage, candidate: &[f64]) -> f64 {
        happo_drift(local, candidate, self.eps)
    }

    fn structure(&self) -> DriftStructure {
        DriftStructure::ClipRelu { eps: self.eps }
    }

    fn name(&self) -> String {
        format!("clip_relu(eps={})", self.eps)
    }
}

pub fn happo_drift(local: &LocalAdvantage, candidate: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for (a, (&p, &x)) in local.current.iter().zip(candidate).enumerate() {
        if p == 0.0 {
            continue;
        }
        let r = x / p;
        let excess = r - r.clamp(1.0 - eps, 1.0 + eps);
        if excess == 0.0 {
            continue;
        }
        for (w, row) in local.prefix_weights.iter().zip(&local.joint_adv) {
            total += w * p * (excess * row[a]).max(0.0);
        }
    }
    total
}

/// Linear pieces of `<x, g> - happo_drift(x)`: per action, below / inside / above the clip band.
pub(crate) fn clip_segments(local: &LocalAdvantage, g: &[f64], eps: f64) -> Vec<Segment> {
    let mut segs = Vec::with_capacity(3 * g.len());
    for (a, (&p, &ga)) in local.current.iter().zip(g).enumerate() {
        if p == 0.0 {
            segs.push(Segment { action: a, capacity: 1.0, slope: ga, rank: 1 });
            continue;
        }
        let (mut pos, mut neg) = (0.0, 0.0);
        for (w, row) in local.prefix_weights.iter().zip(&local.joint_adv) {
            if row[a] > 0.0 {
                pos += w * row[a];
            } else {
                neg += w * row[a];
            }
        }
        let lower = (1.0 - eps) * p;
        let upper = ((1.0 + eps) * p).min(1.0);
        segs.push(Segment { action: a, capacity: lower, slope: ga - neg, rank: 0 });
        segs.push(Segment { action: a, capacity: upper - lower, slope: ga, rank: 1 });
        segs.push(Segment { action: a, capacity: 1.0 - upper, slope: ga - pos, rank: 2 });
    }
    segs
}

/// One evaluation of the mirror operator at a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamoEvaluation {
    pub state: usize,
    pub agent: usize,
    pub prefix: Vec<usize>,
    pub candidate: Vec<f64>,
    pub advantage: f64,
    pub drift: f64,
    pub value: f64,
}

/// `E_{prefix ~ new, a ~ candidate}[A^i(s, a^prefix, a)] - D(candidate)`.
pub fn hamo(local: &LocalAdvantage, drift: &dyn DriftFunctional, candidate: &[f64]) -> HamoEvaluation {
    let advantage: f64 = local
        .expected_advantage()
        .iter()
        .zip(candidate)
        .map(|(g, x)| g * x)
        .sum();
    let d = drift.value(local, candidate);
    HamoEvaluation {
        state: local.state,
        agent: local.agent,
        prefix: local.prefix.clone(),
        candidate: candidate.to_vec(),
        advantage,
        drift: d,
        value: advantage - d,
    }
}

/// Region of candidate policies an agent may move to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Neighbourhood {
    Full,
    /// `sum_s beta(s) KL(pi(.|s) || pi_hat(.|s)) <= delta` with `beta` normalised.
    KlBall { delta: f64 },
}

impl Neighbourhood {
    /// Membership of `candidate` (rows per state) around `current` under state weights `beta`.
    pub fn contains(&self, current: &[Vec<f64>], candidate: &[Vec<f64>], beta: &[f64]) -> bool {
        match *self {
            Neighbourhood::Full => true,
            Neighbourhood::KlBall { delta } => mean_kl(current, candidate, beta) <= delta * (1.0 + 1e-12),
        }
    }
}

/// `sum_s beta(s) KL(current_s || candidate_s) / sum_s beta(s)`.
pub fn mean_kl(current: &[Vec<f64>], candidate: &[Vec<f64>], beta: &[f64]) -> f64 {
    let total: f64 = beta.iter().sum();
    current
        .iter()
        .zip(candidate)
        .zip(beta)
        .map(|((p, q), b)| b * kl(p, q))
        .sum::<f64>()
        / total
}

/// State distribution under which the mirror operator is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingDist {
    #[default]
    Visitation,
    Uniform,
}

impl SamplingDist {
    pub fn weights(&self, rho: &[f64]) -> Vec<f64> {
        match self {
            SamplingDist::Visitation => rho.to_vec(),
            SamplingDist::Uniform => vec![1.0 / rho.len() as f64; rho.len()],
        }
    }
}

/// Drift, neighbourhood and sampling distribution of one agent.
#[derive(Clone, Debug)]
pub struct DriftSpec {
    pub drift: Arc<dyn DriftFunctional>,
    pub neighbourhood: Neighbourhood,
    pub sampling: SamplingDist,
}

impl DriftSpec {
    pub fn new(drift: Arc<dyn DriftFunctional>, neighbourhood: Neighbourhood, sampling: SamplingDist) -> Self {
        Self {
            drift,
            neighbourhood,
            sampling,
        }
    }

    /// Zero drift, whole policy space: sequential greedy improvement.
    pub fn greedy() -> Self {
        Self::new(Arc::new(TrivialDrift), Neighbourhood::Full, SamplingDist::Visitation)
    }

    /// Zero drift inside a mean-KL ball.
    pub fn trust_region(delta: f64) -> Self {
        Self::new(Arc::new(TrivialDrift), Neighbourhood::KlBall { delta }, SamplingDist::Visitation)
    }

    /// Clip drift over the whole policy space.
    pub fn clipped(eps: f64) -> Self {
        Self::new(Arc::new(ClipReluDrift { eps }), Neighbourhood::Full, SamplingDist::Visitation)
    }

    pub fn describe(&self) -> String {
        format!("{} / {:?} / {:?}", self.drift.name(), self.neighbourhood, self.sampling)
    }
}

/// Axiom a drift failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HadfAxiom {
    NonNegative,
    ZeroAtCurrent,
    ZeroGradient,
}

/// A (state, agent, prefix, candidate) sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HadfWitness {
    pub axiom: HadfAxiom,
    pub state: usize,
    pub agent: usize,
    pub prefix: Vec<usize>,
    pub prefix_rows: Vec<Vec<f64>>,
    pub candidate: Vec<f64>,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HadfClass {
    /// Zero on every sample.
    Trivial,
    /// Zero only at the current policy on every sample.
    Positive,
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HadfReport {
    pub drift: String,
    pub samples: usize,
    pub non_negative: bool,
    pub zero_at_current: bool,
    pub zero_gradient: bool,
    pub passed: bool,
    pub worst_negative: f64,
    pub worst_at_current: f64,
    pub worst_derivative: f64,
    pub class: HadfClass,
    pub witness: Option<HadfWitness>,
}

impl HadfReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Random point of the simplex, uniform (flat Dirichlet).
pub fn random_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    x
}

/// Random full-support joint policy whose entries stay above `floor / n_actions`.
pub fn random_policy(game: &CooperativeMarkovGame, rng: &mut impl Rng, floor: f64) -> TabularJointPolicy {
    let policies = game
        .n_actions()
        .iter()
        .map(|&na| {
            (0..game.n_states())
                .map(|_| {
                    random_row(rng, na)
                        .into_iter()
                        .map(|x| (1.0 - floor) * x + floor / na as f64)
                        .collect()
                })
                .collect()
        })
        .collect();
    TabularJointPolicy::new(policies)
}

/// Random zero-sum direction on the support of `p`, unit Euclidean norm.
fn tangent_direction(rng: &mut impl Rng, p: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..p.len()).filter(|&a| p[a] > 0.0).collect();
    if support.len() < 2 {
        return None;
    }
    let mut d = vec![0.0; p.len()];
    for &a in &support {
        d[a] = rng.random::<f64>() * 2.0 - 1.0;
    }
    let mean = support.iter().map(|&a| d[a]).sum::<f64>() / support.len() as f64;
    for &a in &support {
        d[a] -= mean;
    }
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    d.iter_mut().for_each(|x| *x /= norm);
    Some(d)
}

const NEGATIVITY_TOL: f64 = 1e-12;
const DERIVATIVE_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Samples random (state, agent, updated prefix, candidate) tuples and checks non-negativity,
/// zero value at the current policy, and zero directional derivatives there.
pub fn check_hadf(
    drift: &dyn DriftFunctional,
    game: &CooperativeMarkovGame,
    policy: &TabularJointPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<HadfReport> {
    policy.validate(game)?;
    let profile = evaluate(game, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = game.n_agents();
    let mut report = HadfReport {
        drift: drift.name(),
        samples: n_samples,
        non_negative: true,
        zero_at_current: true,
        zero_gradient: true,
        passed: true,
        worst_negative: 0.0,
        worst_at_current: 0.0,
        worst_derivative: 0.0,
        class: HadfClass::Trivial,
        witness: None,
    };
    let mut positive = true;

    for _ in 0..n_samples {
        let state = rng.random_range(0..game.n_states());
        let agent = rng.random_range(0..n);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != agent).collect();
        others.shuffle(&mut rng);
        let len = rng.random_range(0..=others.len());
        let prefix: Vec<usize> = others[..len].to_vec();
        let prefix_rows: Vec<Vec<f64>> = prefix.iter().map(|&j| random_row(&mut rng, game.n_actions()[j])).collect();
        let rows_ref: Vec<&[f64]> = prefix_rows.iter().map(|r| r.as_slice()).collect();
        let local = LocalAdvantage::build(game, policy, &profile, state, &prefix, &rows_ref, agent)?;
        let na = game.n_actions()[agent];
        let candidate = if rng.random_bool(0.5) {
            random_row(&mut rng, na)
        } else {
            let t: f64 = rng.random::<f64>() * 0.5;
            let r = random_row(&mut rng, na);
            local.current.iter().zip(&r).map(|(p, q)| (1.0 - t) * p + t * q).collect()
        };

        let witness = |axiom, magnitude: f64, cand: &[f64]| HadfWitness {
            axiom,
            state,
            agent,
            prefix: prefix.clone(),
            prefix_rows: prefix_rows.clone(),
            candidate: cand.to_vec(),
            magnitude,
        };

        let value = drift.value(&local, &candidate);
        if value < -report.worst_negative {
            report.worst_negative = -value;
        }
        if value < -NEGATIVITY_TOL && report.non_negative {
            report.non_negative = false;
            report.witness.get_or_insert(witness(HadfAxiom::NonNegative, value, &candidate));
        }
        let differs = candidate.iter().zip(&local.current).any(|(a, b)| (a - b).abs() > 1e-9);
        if value != 0.0 {
            report.class = HadfClass::Positive;
        } else if differs {
            positive = false;
        }

        let at_current = drift.value(&local, &local.current);
        report.worst_at_current = report.worst_at_current.max(at_current.abs());
        if at_current.abs() > NEGATIVITY_TOL && report.zero_at_current {
            report.zero_at_current = false;
            report.witness.get_or_insert(witness(HadfAxiom::ZeroAtCurrent, at_current, &local.current));
        }

        if let Some(d) = tangent_direction(&mut rng, &local.current) {
            let room = local
                .current
                .iter()
                .zip(&d)
                .filter(|(_, &da)| da != 0.0)
                .map(|(&p, &da)| 1e-3 * p / da.abs())
                .fold(f64::INFINITY, f64::min);
            let h = FD_STEP.min(room);
            let up: Vec<f64> = local.current.iter().zip(&d).map(|(p, da)| p + h * da).collect();
            let down: Vec<f64> = local.current.iter().zip(&d).map(|(p, da)| p - h * da).collect();
            let deriv = (drift.value(&local, &up) - drift.value(&local, &down)) / (2.0 * h);
            report.worst_derivative = report.worst_derivative.max(deriv.abs());
            if deriv.abs() > DERIVATIVE_TOL && report.zero_gradient {
                report.zero_gradient = false;
                report.witness.get_or_insert(witness(HadfAxiom::ZeroGradient, deriv, &up));
            }
        }
    }
    report.passed = report.non_negative && report.zero_at_current && report.zero_gradient;
    if report.class == HadfClass::Positive && !positive {
        report.class = HadfClass::Neither;
    }
    Ok(report)
}

/// Result of a state-wise mirror step checked against exact values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatewiseReport {
    pub permutation: Vec<usize>,
    /// Smallest accepted HAMO value over states and agents (non-negative by construction).
    pub min_hamo: f64,
    /// `min_s V_new(s) - V_old(s)`.
    pub min_value_gain: f64,
    pub j_old: f64,
    pub j_new: f64,
    pub accepted_rows: usize,
}

/// Builds a new joint policy agent by agent (random order) whose rows, state by state, do not
/// lower the mirror operator below its value at the old row, then compares exact values.
pub fn statewise_check(
    game: &CooperativeMarkovGame,
    policy: &TabularJointPolicy,
    drift: &dyn DriftFunctional,
    seed: u64,
) -> Result<StatewiseReport> {
    let old = evaluate(game, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut permutation: Vec<usize> = (0..game.n_agents()).collect();
    permutation.shuffle(&mut rng);
    let mut new_rows: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    let mut min_hamo = f64::INFINITY;
    let mut accepted_rows = 0;
    for &agent in &permutation {
        let mut rows = Vec::with_capacity(game.n_states());
        for s in 0..game.n_states() {
            let prefix: Vec<usize> = new_rows.iter().map(|(a, _)| *a).collect();
            let prefix_rows: Vec<&[f64]> = new_rows.iter().map(|(_, r)| r[s].as_slice()).collect();
            let local = LocalAdvantage::build(game, policy, &old, s, &prefix, &prefix_rows, agent)?;
            let baseline = hamo(&local, drift, &local.current).value;
            let g = local.expected_advantage();
            let best = g
                .iter()
                .enumerate()
                .fold(0, |b, (a, &x)| if x > g[b] { a } else { b });
            let t: f64 = rng.random();
            let candidate: Vec<f64> = if rng.random_bool(0.5) {
                local
                    .current
                    .iter()
                    .enumerate()
                    .map(|(a, &p)| (1.0 - t) * p + if a == best { t } else { 0.0 })
                    .collect()
            } else {
                let r = random_row(&mut rng, local.n_actions);
                local.current.iter().zip(&r).map(|(p, q)| (1.0 - t) * p + t * q).collect()
            };
            let value = hamo(&local, drift, &candidate).value;
            if value >= baseline {
                accepted_rows += 1;
                min_hamo = min_hamo.min(value);
                rows.push(candidate);
            } else {
                min_hamo = min_hamo.min(baseline);
                rows.push(local.current.clone());
            }
        }
        new_rows.push((agent, rows));
    }
    let mut next = policy.clone();
    for (agent, rows) in new_rows {
        next.set_agent(agent, rows);
    }
    let new = evaluate(game, &next)?;
    let min_value_gain = new
        .v
        .iter()
        .zip(&old.v)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    Ok(StatewiseReport {
        permutation,
        min_hamo,
        min_value_gain,
        j_old: old.j,
        j_new: new.j,
        accepted_rows,
    })
}

pub(crate) fn ensure_drift_sane(drift: &dyn DriftFunctional, local: &LocalAdvantage, candidate: &[f64]) -> Result<f64> {
    let at_current = drift.value(local, &local.current);
    if at_current.abs() > NEGATIVITY_TOL {
        return Err(Error::InvalidArgument(format!(
            "drift {} is {at_current} at the current policy in state {}",
            drift.name(),
            local.state
        )));
    }
    let value = drift.value(local, candidate);
    if value < -NEGATIVITY_TOL {
        return Err(Error::NegativeDrift {
            state: local.state,
            value,
        });
    }
    Ok(value)
}
