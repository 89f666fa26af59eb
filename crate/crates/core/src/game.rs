//! Cooperative Markov games and the built-in environments.
//!
//! A [`CooperativeMarkovGame`] is a finite tabular game with a shared reward.
//! Joint actions are flattened in row-major agent order: agent 0 is the most
//! significant digit, so for action counts `(A0, A1, A2)` the joint action
//! `(a0, a1, a2)` has index `(a0 * A1 + a1) * A2 + a2`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of the transition kernel and the initial distribution must sum to one within this.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Default cap on the number of states a grid game may enumerate.
pub const DEFAULT_STATE_CAP: usize = 20_000;

/// How a state index is turned into an input vector for function approximators.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// One-hot encoding of the state index.
    #[default]
    OneHot,
    /// Concatenated one-hot encodings of each agent's grid cell.
    GridPositions { side: usize, n_agents: usize },
}

impl FeatureMap {
    pub fn dim(&self, n_states: usize) -> usize {
        match self {
            FeatureMap::OneHot => n_states,
            FeatureMap::GridPositions { side, n_agents } => side * side * n_agents,
        }
    }

    pub fn encode(&self, n_states: usize, state: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim(n_states)];
        match self {
            FeatureMap::OneHot => out[state] = 1.0,
            FeatureMap::GridPositions { side, n_agents } => {
                let cells = side * side;
                let mut rest = state;
                for agent in (0..*n_agents).rev() {
                    let cell = rest % cells;
                    rest /= cells;
                    out[agent * cells + cell] = 1.0;
                }
            }
        }
        out
    }
}

/// Mixed-radix codec between per-agent actions and flat joint-action indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointActionSpace {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl JointActionSpace {
    pub fn new(sizes: &[usize]) -> Self {
        let mut strides = vec![1; sizes.len()];
        for i in (0..sizes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        let total = sizes.iter().product();
        Self {
            sizes: sizes.to_vec(),
            strides,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.sizes.len());
        actions.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    pub fn decode_into(&self, index: usize, out: &mut [usize]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (index / self.strides[i]) % self.sizes[i];
        }
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        self.decode_into(index, &mut out);
        out
    }

    /// Action of `agent` inside joint index `index`.
    pub fn action_of(&self, index: usize, agent: usize) -> usize {
        (index / self.strides[agent]) % self.sizes[agent]
    }
}

/// Finite cooperative Markov game `<N, S, A, r, P, gamma, d>`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooperativeMarkovGame {
    n_states: usize,
    joint: JointActionSpace,
    gamma: f64,
    /// `reward[s * J + j]`
    reward: Vec<f64>,
    /// `transition[(s * J + j) * S + s']`
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
    features: FeatureMap,
    episode_limit: Option<usize>,
}

impl CooperativeMarkovGame {
    /// Builds and validates a game from flat tables.
    pub fn new(
        n_actions: Vec<usize>,
        n_states: usize,
        gamma: f64,
        reward: Vec<f64>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let game = Self {
            n_states,
            joint: JointActionSpace::new(&n_actions),
            gamma,
            reward,
            transition,
            initial_dist,
            features: FeatureMap::OneHot,
            episode_limit: None,
        };
        game.validate()?;
        Ok(game)
    }

    pub fn with_features(mut self, features: FeatureMap) -> Self {
        self.features = features;
        self
    }

    pub fn with_episode_limit(mut self, limit: Option<usize>) -> Self {
        self.episode_limit = limit;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGame(m));
        if self.joint.n_agents() == 0 {
            return bad("at least one agent is required".into());
        }
        if self.joint.sizes().contains(&0) {
            return bad("every agent needs at least one action".into());
        }
        if self.n_states == 0 {
            return bad("at least one state is required".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        let nj = self.joint.len();
        if self.reward.len() != self.n_states * nj {
            return bad(format!(
                "reward table has {} entries, expected {}",
                self.reward.len(),
                self.n_states * nj
            ));
        }
        if let Some(r) = self.reward.iter().find(|r| !r.is_finite()) {
            return bad(format!("reward {r} is not finite"));
        }
        if self.transition.len() != self.n_states * nj * self.n_states {
            return bad("transition table has the wrong shape".into());
        }
        for (row_idx, row) in self.transition.chunks(self.n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return bad(format!("transition row {row_idx} has a negative entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("transition row {row_idx} sums to {sum}"));
            }
        }
        if self.initial_dist.len() != self.n_states {
            return bad("initial distribution has the wrong length".into());
        }
        if self.initial_dist.iter().any(|&p| !(p > 0.0)) {
            return bad("initial distribution must be strictly positive".into());
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return bad(format!("initial distribution sums to {sum}"));
        }
        if let FeatureMap::GridPositions { side, n_agents } = self.features {
            if (side * side).pow(n_agents as u32) != self.n_states {
                return bad("grid feature map does not match the state count".into());
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.joint.n_agents()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> &[usize] {
        self.joint.sizes()
    }

    pub fn n_joint(&self) -> usize {
        self.joint.len()
    }

    pub fn joint(&self) -> &JointActionSpace {
        &self.joint
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn episode_limit(&self) -> Option<usize> {
        self.episode_limit
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(self.n_states)
    }

    pub fn state_features(&self, state: usize) -> Vec<f64> {
        self.features.encode(self.n_states, state)
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state * self.joint.len() + joint]
    }

    /// Reward for a joint action given as per-agent actions.
    pub fn reward_of(&self, state: usize, actions: &[usize]) -> f64 {
        self.reward(state, self.joint.encode(actions))
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        let start = (state * self.joint.len() + joint) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GameDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GameDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// JSON document form of a game: nested arrays indexed `[s][joint]` and `[s][joint][s']`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameDocument {
    pub n_agents: usize,
    pub n_states: usize,
    pub n_actions: Vec<usize>,
    pub gamma: f64,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_one_hot")]
    pub features: FeatureMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_limit: Option<usize>,
}

fn is_one_hot(f: &FeatureMap) -> bool {
    *f == FeatureMap::OneHot
}

impl From<&CooperativeMarkovGame> for GameDocument {
    fn from(g: &CooperativeMarkovGame) -> Self {
        let nj = g.n_joint();
        let reward = g.reward.chunks(nj).map(<[f64]>::to_vec).collect();
        let transition = (0..g.n_states)
            .map(|s| (0..nj).map(|j| g.transition_row(s, j).to_vec()).collect())
            .collect();
        Self {
            n_agents: g.n_agents(),
            n_states: g.n_states,
            n_actions: g.n_actions().to_vec(),
            gamma: g.gamma,
            reward,
            transition,
            initial_dist: g.initial_dist.clone(),
            features: g.features.clone(),
            episode_limit: g.episode_limit,
        }
    }
}

impl TryFrom<GameDocument> for CooperativeMarkovGame {
    type Error = Error;

    fn try_from(doc: GameDocument) -> Result<Self> {
        if doc.n_actions.len() != doc.n_agents {
            return Err(Error::InvalidGame(format!(
                "n_actions lists {} agents but n_agents is {}",
                doc.n_actions.len(),
                doc.n_agents
            )));
        }
        if doc.reward.len() != doc.n_states || doc.transition.len() != doc.n_states {
            return Err(Error::InvalidGame("outer table length differs from n_states".into()));
        }
        let reward = doc.reward.into_iter().flatten().collect();
        let transition = doc.transition.into_iter().flatten().flatten().collect();
        Ok(CooperativeMarkovGame::new(
            doc.n_actions,
            doc.n_states,
            doc.gamma,
            reward,
            transition,
            doc.initial_dist,
        )?
        .with_features(doc.features)
        .with_episode_limit(doc.episode_limit))
    }
}

/// Builds a single-state game from a reward function over joint actions.
pub fn single_state_game(n_actions: Vec<usize>, reward: impl Fn(&[usize]) -> f64) -> Result<CooperativeMarkovGame> {
    let space = JointActionSpace::new(&n_actions);
    let rewards: Vec<f64> = (0..space.len()).map(|j| reward(&space.decode(j))).collect();
    let transition = vec![1.0; space.len()];
    Ok(CooperativeMarkovGame::new(n_actions, 1, 0.0, rewards, transition, vec![1.0])?.with_episode_limit(Some(1)))
}

/// Two-agent matrix game where independent simultaneous best responses miscoordinate.
///
/// `r(0,0)=0`, `r(0,1)=r(1,0)=2`, `r(1,1)=-1`, one state, `gamma = 0` so `Q == r`.
pub fn make_matrix_game_example2() -> CooperativeMarkovGame {
    single_state_game(vec![2, 2], |a| match (a[0], a[1]) {
        (0, 0) => 0.0,
        (1, 1) => -1.0,
        _ => 2.0,
    })
    .expect("static game is valid")
}

/// One-state team game on `{0,1}^n` paying 1 only for `(0^{n/2}, 1^{n/2})` and `(1^{n/2}, 0^{n/2})`.
pub fn make_xor_team_game(n: usize) -> Result<CooperativeMarkovGame> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "xor team game needs an even number of agents >= 2, got {n}"
        )));
    }
    let half = n / 2;
    single_state_game(vec![2; n], |a| {
        let first = &a[..half];
        let second = &a[half..];
        let lo_hi = first.iter().all(|&x| x == 0) && second.iter().all(|&x| x == 1);
        let hi_lo = first.iter().all(|&x| x == 1) && second.iter().all(|&x| x == 0);
        if lo_hi || hi_lo {
            1.0
        } else {
            0.0
        }
    })
}

/// Seeded random game: i.i.d. uniform rewards in `[0, 1)`, normalised positive transition rows,
/// uniform initial distribution.
pub fn make_random_game(
    n_agents: usize,
    n_states: usize,
    n_actions: &[usize],
    gamma: f64,
    seed: u64,
) -> Result<CooperativeMarkovGame> {
    if n_agents == 0 || n_actions.len() != n_agents {
        return Err(Error::InvalidArgument(format!(
            "need one action count per agent ({} given for {n_agents} agents)",
            n_actions.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if n_states == 0 || n_actions.contains(&0) {
        return Err(Error::InvalidArgument("state and action counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nj: usize = n_actions.iter().product();
    let reward = (0..n_states * nj).map(|_| rng.random::<f64>()).collect();
    let mut transition = Vec::with_capacity(n_states * nj * n_states);
    for _ in 0..n_states * nj {
        let row: Vec<f64> = (0..n_states).map(|_| 1.0 - rng.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.into_iter().map(|p| p / total));
    }
    let initial = vec![1.0 / n_states as f64; n_states];
    CooperativeMarkovGame::new(n_actions.to_vec(), n_states, gamma, reward, transition, initial)
}

/// Control layout of each agent in the rendezvous grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRoles {
    /// Every agent maps actions to the same compass moves.
    #[default]
    Symmetric,
    /// Agent `k` has its compass rotated by `k` quarter turns, so equal action
    /// indices move different agents in different directions.
    Rotated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub side: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub gamma: f64,
    #[serde(default)]
    pub roles: GridRoles,
    #[serde(default = "default_state_cap")]
    pub state_cap: usize,
}

fn default_state_cap() -> usize {
    DEFAULT_STATE_CAP
}

impl GridConfig {
    pub fn new(side: usize, n_agents: usize, horizon: usize, gamma: f64) -> Self {
        Self {
            side,
            n_agents,
            horizon,
            gamma,
            roles: GridRoles::Symmetric,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

/// Moves: 0 stay, 1 north, 2 south, 3 east, 4 west.
const MOVES: [(i64, i64); 5] = [(0, 0), (0, -1), (0, 1), (1, 0), (-1, 0)];
/// Clockwise quarter turn on compass indices: N -> E -> S -> W -> N.
const QUARTER_TURN: [usize; 5] = [0, 3, 4, 2, 1];

fn grid_move(roles: GridRoles, agent: usize, action: usize) -> (i64, i64) {
    let mut a = action;
    if roles == GridRoles::Rotated {
        for _ in 0..agent % 4 {
            a = QUARTER_TURN[a];
        }
    }
    MOVES[a]
}

/// Grid rendezvous: `n` agents on a `side x side` grid, five moves each, shared reward
/// `-(sum of pairwise Manhattan distances) / max_possible` for the current joint position.
///
/// The state is the joint position (agent 0 most significant); the game is discounted and
/// infinite-horizon, with `horizon` carried as the episode time limit for sampled rollouts.
pub fn make_grid_rendezvous(side: usize, n: usize, horizon: usize, gamma: f64) -> Result<CooperativeMarkovGame> {
    make_grid_rendezvous_with(&GridConfig::new(side, n, horizon, gamma))
}

pub fn make_grid_rendezvous_with(cfg: &GridConfig) -> Result<CooperativeMarkovGame> {
    let GridConfig {
        side,
        n_agents: n,
        horizon,
        gamma,
        roles,
        state_cap,
    } = *cfg;
    if side < 2 {
        return Err(Error::InvalidArgument(format!("grid side must be >= 2, got {side}")));
    }
    if !(2..=3).contains(&n) {
        return Err(Error::InvalidArgument(format!("grid rendezvous supports 2 or 3 agents, got {n}")));
    }
    let cells = side * side;
    let n_states = cells.pow(n as u32);
    if n_states > state_cap {
        return Err(Error::InvalidArgument(format!(
            "grid rendezvous would have {n_states} states, above the cap of {state_cap}"
        )));
    }
    let joint = JointActionSpace::new(&vec![5; n]);
    let nj = joint.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let normalizer = pairs * 2.0 * (side - 1) as f64;

    let decode_state = |s: usize| -> Vec<(i64, i64)> {
        let mut rest = s;
        let mut pos = vec![(0, 0); n];
        for agent in (0..n).rev() {
            let cell = rest % cells;
            rest /= cells;
            pos[agent] = ((cell % side) as i64, (cell / side) as i64);
        }
        pos
    };
    let encode_state = |pos: &[(i64, i64)]| -> usize {
        pos.iter()
            .fold(0, |acc, &(x, y)| acc * cells + (y as usize) * side + x as usize)
    };

    let mut reward = vec![0.0; n_states * nj];
    let mut transition = vec![0.0; n_states * nj * n_states];
    let mut actions = vec![0; n];
    for s in 0..n_states {
        let pos = decode_state(s);
        let mut dist = 0i64;
        for i in 0..n {
            for k in i + 1..n {
                dist += (pos[i].0 - pos[k].0).abs() + (pos[i].1 - pos[k].1).abs();
            }
        }
        let r = -(dist as f64) / normalizer;
        for j in 0..nj {
            joint.decode_into(j, &mut actions);
            let next: Vec<(i64, i64)> = pos
                .iter()
                .enumerate()
                .map(|(agent, &(x, y))| {
                    let (dx, dy) = grid_move(roles, agent, actions[agent]);
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
                        (x, y)
                    } else {
                        (nx, ny)
                    }
                })
                .collect();
            reward[s * nj + j] = r;
            transition[(s * nj + j) * n_states + encode_state(&next)] = 1.0;
        }
    }
    let initial = vec![1.0 / n_states as f64; n_states];
    Ok(
        CooperativeMarkovGame::new(vec![5; n], n_states, gamma, reward, transition, initial)?
            .with_features(FeatureMap::GridPositions { side, n_agents: n })
            .with_episode_limit(Some(horizon)),
    )
}

/// Single-step two-agent game with real-valued actions.
#[derive(Clone, Copy, Debug)]
pub struct ContinuousTwoAgentGame {
    reward_fn: fn(f64, f64) -> f64,
    gradient_fn: Option<fn(f64, f64) -> [f64; 2]>,
}

impl ContinuousTwoAgentGame {
    pub fn new(reward_fn: fn(f64, f64) -> f64) -> Self {
        Self { reward_fn, gradient_fn: None }
    }

    pub fn with_gradient(mut self, gradient_fn: fn(f64, f64) -> [f64; 2]) -> Self {
        self.gradient_fn = Some(gradient_fn);
        self
    }

    pub fn reward(&self, a1: f64, a2: f64) -> f64 {
        (self.reward_fn)(a1, a2)
    }

    /// Analytic gradient when one was supplied.
    pub fn gradient(&self, a1: f64, a2: f64) -> Option<[f64; 2]> {
        self.gradient_fn.map(|g| g(a1, a2))
    }

    pub fn horizon(&self) -> usize {
        1
    }
}

/// The bilinear game `r(a1, a2) = a1 * a2`.
pub fn make_diff_game() -> ContinuousTwoAgentGame {
    ContinuousTwoAgentGame::new(|a1, a2| a1 * a2).with_gradient(|a1, a2| [a2, a1])
}

/// Continuous single-step target-matching game with a finite set of contexts.
///
/// Each context `s` fixes a target `t[s][i]` per agent; agents act in `[-1, 1]` and share
/// `r = -sum_i (a_i - t_i)^2 - (sum_i a_i - sum_i t_i)^2`. The optimum is 0 in every context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMatchingGame {
    pub targets: Vec<Vec<f64>>,
}

impl TargetMatchingGame {
    pub fn new(targets: Vec<Vec<f64>>) -> Result<Self> {
        let n = targets.first().map_or(0, Vec::len);
        if n == 0 || targets.iter().any(|t| t.len() != n) {
            return Err(Error::InvalidArgument("targets must be a non-empty rectangular table".into()));
        }
        if targets.iter().flatten().any(|t| !(-1.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("targets must lie in [-1, 1]".into()));
        }
        Ok(Self { targets })
    }

    /// Four contexts for two agents with targets spread over the action box.
    pub fn default_two_agent() -> Self {
        Self::new(vec![
            vec![0.5, -0.5],
            vec![-0.6, 0.3],
            vec![0.2, 0.7],
            vec![-0.4, -0.2],
        ])
        .expect("static targets are valid")
    }

    pub fn n_agents(&self) -> usize {
        self.targets[0].len()
    }

    pub fn n_contexts(&self) -> usize {
        self.targets.len()
    }

    pub fn reward(&self, context: usize, actions: &[f64]) -> f64 {
        let t = &self.targets[context];
        let own: f64 = actions.iter().zip(t).map(|(a, t)| (a - t) * (a - t)).sum();
        let sum_gap = actions.iter().sum::<f64>() - t.iter().sum::<f64>();
        -own - sum_gap * sum_gap
    }

    pub fn optimal_return(&self) -> f64 {
        0.0
    }
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: usize,
    /// The episode time limit was reached; the caller should bootstrap and reset.
    pub truncated: bool,
}

/// Seeded simulator over a shared tabular game.
#[derive(Clone, Debug)]
pub struct EnvInstance {
    game: Arc<CooperativeMarkovGame>,
    current_state: usize,
    rng: ChaCha8Rng,
    rng_seed: u64,
    step_count: usize,
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl EnvInstance {
    pub fn new(game: Arc<CooperativeMarkovGame>, seed: u64) -> Self {
        let mut env = Self {
            game,
            current_state: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rng_seed: seed,
            step_count: 0,
        };
        env.reset();
        env
    }

    pub fn game(&self) -> &CooperativeMarkovGame {
        &self.game
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn state(&self) -> usize {
        self.current_state
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn reset(&mut self) -> usize {
        self.current_state = sample_index(&mut self.rng, self.game.initial_dist());
        self.step_count = 0;
        self.current_state
    }

    pub fn step(&mut self, actions: &[usize]) -> StepOutcome {
        let j = self.game.joint().encode(actions);
        let reward = self.game.reward(self.current_state, j);
        let next_state = sample_index(&mut self.rng, self.game.transition_row(self.current_state, j));
        self.current_state = next_state;
        self.step_count += 1;
        let truncated = self.game.episode_limit().is_some_and(|limit| self.step_count >= limit);
        StepOutcome {
            reward,
            next_state,
            truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example2_rewards() {
        let g = make_matrix_game_example2();
        assert_eq!(g.reward_of(0, &[0, 1]), 2.0);
        assert_eq!(g.reward_of(0, &[1, 0]), 2.0);
        assert_eq!(g.reward_of(0, &[1, 1]), -1.0);
        assert_eq!(g.reward_of(0, &[0, 0]), 0.0);
        assert_eq!(g.transition_row(0, 3), &[1.0]);
        assert_eq!(g.gamma(), 0.0);
    }

    #[test]
    fn xor_game_pays_two_joint_actions() {
        let g = make_xor_team_game(2).unwrap();
        assert_eq!(g.reward_of(0, &[0, 1]), 1.0);
        assert_eq!(g.reward_of(0, &[0, 0]), 0.0);
        let g4 = make_xor_team_game(4).unwrap();
        assert_eq!(g4.reward_of(0, &[0, 0, 1, 1]), 1.0);
        assert_eq!(g4.reward_of(0, &[1, 1, 0, 0]), 1.0);
        assert_eq!(g4.reward_of(0, &[0, 1, 0, 1]), 0.0);
        for n in [2, 4, 6] {
            let g = make_xor_team_game(n).unwrap();
            let paying = g.reward_table().iter().filter(|&&r| r == 1.0).count();
            let zero = g.reward_table().iter().filter(|&&r| r == 0.0).count();
            assert_eq!(paying, 2);
            assert_eq!(zero, (1 << n) - 2);
        }
    }

    #[test]
    fn xor_rejects_odd() {
        assert!(make_xor_team_game(3).is_err());
        assert!(make_xor_team_game(0).is_err());
    }

    #[test]
    fn random_game_is_deterministic_and_normalised() {
        let a = make_random_game(2, 3, &[2, 2], 0.9, 7).unwrap();
        let b = make_random_game(2, 3, &[2, 2], 0.9, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reward_table().len(), 12);
        for s in 0..3 {
            for j in 0..4 {
                let sum: f64 = a.transition_row(s, j).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        assert!(make_random_game(2, 3, &[2, 2], 1.0, 7).is_err());
        assert_ne!(a, make_random_game(2, 3, &[2, 2], 0.9, 8).unwrap());
    }

    #[test]
    fn diff_game_is_a_product() {
        let g = make_diff_game();
        assert_eq!(g.reward(2.0, 3.0), 6.0);
        assert_eq!(g.reward(-1.0, 0.5), -0.5);
        assert_eq!(g.reward(0.0, 17.0), 0.0);
        assert_eq!(g.gradient(2.0, 3.0), Some([3.0, 2.0]));
    }

    #[test]
    fn grid_shape_and_colocated_reward() {
        let g = make_grid_rendezvous(3, 2, 20, 0.9).unwrap();
        assert_eq!(g.n_states(), 81);
        assert_eq!(g.n_joint(), 25);
        // both agents in cell 4 (centre): state 4 * 9 + 4
        assert_eq!(g.reward(40, 0), 0.0);
        // opposite corners: distance 4, normaliser 4
        assert_eq!(g.reward(8, 0), -1.0);
        let f = g.state_features(4 * 9 + 8);
        assert_eq!(f.len(), 18);
        assert_eq!(f[4], 1.0);
        assert_eq!(f[9 + 8], 1.0);
        assert!(make_grid_rendezvous(1, 2, 5, 0.9).is_err());
        assert!(make_grid_rendezvous(12, 2, 5, 0.9).is_err());
        assert!(make_grid_rendezvous(3, 4, 5, 0.9).is_err());
    }

    #[test]
    fn rotated_roles_change_moves() {
        let cfg = GridConfig {
            roles: GridRoles::Rotated,
            ..GridConfig::new(3, 2, 10, 0.9)
        };
        let g = make_grid_rendezvous_with(&cfg).unwrap();
        // both start at the centre; action 3 (east) for both
        let s = 4 * 9 + 4;
        let j = g.joint().encode(&[3, 3]);
        let next = g.transition_row(s, j).iter().position(|&p| p == 1.0).unwrap();
        // agent 0 moves east to cell 5, agent 1's "east" is rotated to south: cell 7
        assert_eq!(next, 5 * 9 + 7);
    }

    #[test]
    fn env_is_reproducible() {
        let game = Arc::new(make_random_game(2, 4, &[2, 3], 0.9, 1).unwrap().with_episode_limit(Some(5)));
        let run = |seed| {
            let mut env = EnvInstance::new(game.clone(), seed);
            let mut trace = vec![env.state()];
            for t in 0..12 {
                let out = env.step(&[t % 2, t % 3]);
                trace.push(out.next_state);
                if out.truncated {
                    trace.push(env.reset());
                }
            }
            trace
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let g = make_random_game(2, 3, &[2, 3], 0.95, 11).unwrap();
        let back = CooperativeMarkovGame::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
        let grid = make_grid_rendezvous(2, 2, 7, 0.5).unwrap();
        assert_eq!(grid, CooperativeMarkovGame::from_json(&grid.to_json().unwrap()).unwrap());
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(CooperativeMarkovGame::new(vec![1], 1, 0.5, vec![0.0], vec![0.9], vec![1.0]).is_err());
        assert!(CooperativeMarkovGame::new(vec![1], 2, 0.5, vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(CooperativeMarkovGame::new(vec![1], 1, 0.5, vec![f64::NAN], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn joint_codec_roundtrip() {
        let space = JointActionSpace::new(&[2, 3, 4]);
        assert_eq!(space.len(), 24);
        assert_eq!(space.encode(&[1, 2, 3]), 23);
        for j in 0..24 {
            assert_eq!(space.encode(&space.decode(j)), j);
            assert_eq!(space.action_of(j, 1), space.decode(j)[1]);
        }
    }
}
