//! Deterministic, seeded desk-scale environments.
//!
//! Three families:
//! - [`TabularCMDP`]: small enumerable CMDPs with an exact return-distribution
//!   oracle built on a forward dynamic program over `(state, reward-prefix)`
//!   pairs;
//! - [`PointMass`]: a continuous 2-D task with a hazard-proximity cost and a
//!   speed-limit cost, both in [0, 1] per step;
//! - [`TwoStateRewardToy`]: two states with Gaussian rewards, used by the
//!   TD(lambda) bias-variance study.

use crate::error::{Error, Result};
use crate::qdist::WeightedAtomSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// One environment step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Behavior-policy density at the taken action; strictly positive.
    pub behavior_prob: f64,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub done: bool,
    pub next_state: Vec<f64>,
}

impl Transition {
    /// `1 - d_t` as a multiplicative factor.
    pub fn continuation(&self) -> f64 {
        if self.done {
            0.0
        } else {
            1.0
        }
    }
}

/// Common episodic interface used by the trainer.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn num_costs(&self) -> usize;
    fn episode_len(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Advances one step. `behavior_prob` is the acting policy's density at
    /// `action` and is stored in the returned transition.
    fn step(&mut self, action: &[f64], behavior_prob: f64, rng: &mut ChaCha8Rng) -> Transition;
}

// --- tabular CMDP -----------------------------------------------------------

/// Which scalar channel of a CMDP to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Reward,
    Cost(usize),
}

/// A finite CMDP with dense tables indexed `[s][a][s']`.
#[derive(Debug, Clone)]
pub struct TabularCMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl TabularCMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        costs: Vec<Vec<f64>>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let cells = n_states * n_actions * n_states;
        if n_states * n_actions > 64 {
            return Err(Error::invalid("TabularCMDP::new", "|S| * |A| must be <= 64"));
        }
        if transition.len() != cells || reward.len() != cells {
            return Err(Error::DimensionMismatch {
                context: "TabularCMDP tables",
                expected: cells,
                got: transition.len(),
            });
        }
        if !(0.0..1.0).contains(&gamma) || gamma <= 0.0 {
            return Err(Error::invalid("TabularCMDP::new", "gamma in (0, 1)"));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::invalid(
                        "TabularCMDP::new",
                        format!("transition row ({s},{a}) sums to {sum}"),
                    ));
                }
            }
        }
        for table in &costs {
            if table.len() != cells {
                return Err(Error::DimensionMismatch {
                    context: "TabularCMDP cost table",
                    expected: cells,
                    got: table.len(),
                });
            }
            if table.iter().any(|&c| c < 0.0) {
                return Err(Error::invalid("TabularCMDP::new", "costs must be >= 0"));
            }
        }
        if initial.len() != n_states || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("TabularCMDP::new", "bad initial distribution"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            costs,
            initial,
            gamma,
        })
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn channel_value(&self, channel: Channel, s: usize, a: usize, s2: usize) -> f64 {
        let idx = (s * self.n_actions + a) * self.n_states + s2;
        match channel {
            Channel::Reward => self.reward[idx],
            Channel::Cost(k) => self.costs[k][idx],
        }
    }

    pub fn channel_abs_max(&self, channel: Channel) -> f64 {
        let table = match channel {
            Channel::Reward => &self.reward,
            Channel::Cost(k) => &self.costs[k],
        };
        table.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Range width of the discounted channel return, used by truncation
    /// certificates.
    pub fn return_range(&self, channel: Channel) -> f64 {
        2.0 * self.channel_abs_max(channel) / (1.0 - self.gamma)
    }

    /// Draws `s' ~ P(.|s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for s2 in 0..self.n_states {
            cum += self.prob(s, a, s2);
            if u < cum {
                return s2;
            }
        }
        self.n_states - 1
    }

    /// A two-transient / two-absorbing 4-state CMDP used by the operator
    /// tests: every trajectory is absorbed with zero reward after two steps,
    /// so return distributions are exactly enumerable.
    pub fn dag4(gamma: f64) -> Self {
        let n_states = 4;
        let n_actions = 2;
        let mut p = vec![0.0; n_states * n_actions * n_states];
        let mut r = vec![0.0; n_states * n_actions * n_states];
        let mut set = |s: usize, a: usize, s2: usize, prob: f64, rew: f64| {
            p[(s * n_actions + a) * n_states + s2] = prob;
            r[(s * n_actions + a) * n_states + s2] = rew;
        };
        // s0, s1 transient (forward only), s2, s3 absorbing with zero reward.
        set(0, 0, 1, 0.7, 1.0);
        set(0, 0, 2, 0.3, -0.5);
        set(0, 1, 1, 0.4, 0.25);
        set(0, 1, 3, 0.6, 0.75);
        set(1, 0, 2, 0.8, 0.5);
        set(1, 0, 3, 0.2, -1.0);
        set(1, 1, 3, 1.0, 1.5);
        set(2, 0, 2, 1.0, 0.0);
        set(2, 1, 2, 1.0, 0.0);
        set(3, 0, 3, 1.0, 0.0);
        set(3, 1, 3, 1.0, 0.0);
        let cost = r.iter().map(|v| v.abs() * 0.5).collect();
        TabularCMDP::new(
            n_states,
            n_actions,
            p,
            r,
            vec![cost],
            vec![1.0, 0.0, 0.0, 0.0],
            gamma,
        )
        .expect("dag4 tables are valid")
    }

    /// Single absorbing state with one action and a constant reward.
    pub fn single_state(reward: f64, gamma: f64) -> Self {
        TabularCMDP::new(1, 1, vec![1.0], vec![reward], vec![], vec![1.0], gamma)
            .expect("single-state tables are valid")
    }
}

/// Exact return distributions with a certified truncation bound.
#[derive(Debug, Clone)]
pub struct ReturnTable {
    /// One distribution per `(s, a)`, indexed `s * n_actions + a`.
    pub dists: Vec<WeightedAtomSet>,
    /// `gamma^cut * max|value| / (1 - gamma)`: every distribution is within
    /// this 1-Wasserstein distance of the untruncated return.
    pub tail_bound: f64,
}

/// Exhaustive truncated return distribution of a fixed policy table.
///
/// Trajectories are enumerated as a forward dynamic program over
/// `(state, discounted-prefix)` pairs; identical prefixes merge exactly, so
/// early-absorbing CMDPs stay small. Errors when the live pair count exceeds
/// `budget`.
pub fn exact_return_distribution(
    mdp: &TabularCMDP,
    policy: &[f64],
    channel: Channel,
    horizon_cut: usize,
    budget: usize,
) -> Result<ReturnTable> {
    check_policy_table(mdp, policy)?;
    let mut dists = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s0 in 0..mdp.n_states {
        for a0 in 0..mdp.n_actions {
            // layer: (state, prefix bits) -> probability
            let mut layer: BTreeMap<(usize, u64), f64> = BTreeMap::new();
            layer.insert((s0, 0.0f64.to_bits()), 1.0);
            let mut discount = 1.0;
            let mut first_action = Some(a0);
            for _t in 0..horizon_cut {
                let mut next: BTreeMap<(usize, u64), f64> = BTreeMap::new();
                for (&(s, pfx_bits), &w) in &layer {
                    let pfx = f64::from_bits(pfx_bits);
                    for a in 0..mdp.n_actions {
                        let pa = match first_action {
                            Some(fixed) => {
                                if a == fixed {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            None => policy[s * mdp.n_actions + a],
                        };
                        if pa == 0.0 {
                            continue;
                        }
                        for s2 in 0..mdp.n_states {
                            let p = mdp.prob(s, a, s2);
                            if p == 0.0 {
                                continue;
                            }
                            let value = mdp.channel_value(channel, s, a, s2);
                            let new_pfx = pfx + discount * value;
                            *next.entry((s2, new_pfx.to_bits())).or_insert(0.0) += w * pa * p;
                        }
                    }
                }
                if next.len() > budget {
                    return Err(Error::BudgetExceeded {
                        context: "exact_return_distribution",
                        used: next.len(),
                        budget,
                    });
                }
                layer = next;
                discount *= mdp.gamma;
                first_action = None;
            }
            let entries: Vec<(f64, f64)> = layer
                .iter()
                .map(|(&(_, bits), &w)| (f64::from_bits(bits), w))
                .collect();
            dists.push(WeightedAtomSet::new(entries)?);
        }
    }
    let tail_bound = mdp.gamma.powi(horizon_cut as i32) * mdp.channel_abs_max(channel)
        / (1.0 - mdp.gamma);
    Ok(ReturnTable { dists, tail_bound })
}

pub(crate) fn check_policy_table(mdp: &TabularCMDP, policy: &[f64]) -> Result<()> {
    if policy.len() != mdp.n_states * mdp.n_actions {
        return Err(Error::DimensionMismatch {
            context: "policy table",
            expected: mdp.n_states * mdp.n_actions,
            got: policy.len(),
        });
    }
    for s in 0..mdp.n_states {
        let row = &policy[s * mdp.n_actions..][..mdp.n_actions];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(
                "policy table",
                format!("row {s} sums to {sum}"),
            ));
        }
    }
    Ok(())
}

// --- tabular env adapter ----------------------------------------------------

/// Drives a [`TabularCMDP`] through the continuous [`Env`] interface: states
/// are one-hot encoded and the scalar action in [-1, 1] is binned uniformly
/// into the discrete action set.
pub struct TabularEnvAdapter {
    pub mdp: TabularCMDP,
    pub horizon: usize,
    state: usize,
    t: usize,
    clamp_warned: bool,
}

impl TabularEnvAdapter {
    pub fn new(mdp: TabularCMDP, horizon: usize) -> Self {
        Self {
            mdp,
            horizon,
            state: 0,
            t: 0,
            clamp_warned: false,
        }
    }

    fn encode(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states];
        v[s] = 1.0;
        v
    }

    pub fn discretize(&self, raw: f64) -> usize {
        let n = self.mdp.n_actions as f64;
        let idx = ((raw + 1.0) / 2.0 * n).floor() as isize;
        idx.clamp(0, self.mdp.n_actions as isize - 1) as usize
    }
}

impl Env for TabularEnvAdapter {
    fn state_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn num_costs(&self) -> usize {
        self.mdp.costs.len()
    }

    fn episode_len(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        self.state = self.mdp.n_states - 1;
        for s in 0..self.mdp.n_states {
            cum += self.mdp.initial[s];
            if u < cum {
                self.state = s;
                break;
            }
        }
        self.t = 0;
        self.encode(self.state)
    }

    fn step(&mut self, action: &[f64], behavior_prob: f64, rng: &mut ChaCha8Rng) -> Transition {
        let raw = clamp_action(action[0], &mut self.clamp_warned, "tabular env");
        let a = self.discretize(raw);
        let s = self.state;
        let s2 = self.mdp.sample_next(s, a, rng);
        let reward = self.mdp.channel_value(Channel::Reward, s, a, s2);
        let costs = (0..self.mdp.costs.len())
            .map(|k| self.mdp.channel_value(Channel::Cost(k), s, a, s2))
            .collect();
        self.state = s2;
        self.t += 1;
        Transition {
            state: self.encode(s),
            action: vec![raw],
            behavior_prob,
            reward,
            costs,
            done: self.t >= self.horizon,
            next_state: self.encode(s2),
        }
    }
}

fn clamp_action(raw: f64, warned: &mut bool, what: &str) -> f64 {
    if (-1.0..=1.0).contains(&raw) {
        return raw;
    }
    if !*warned {
        eprintln!("warning: {what}: action {raw} outside [-1, 1], clamped");
        *warned = true;
    }
    raw.clamp(-1.0, 1.0)
}

// --- point mass --------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Configuration of the 2-D point-mass task.
#[derive(Debug, Clone)]
pub struct PointMassConfig {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub start_jitter: f64,
    pub hazard_center: [f64; 2],
    pub hazard_radius: f64,
    pub v_max: f64,
    pub episode_len: usize,
    /// Spawn episodes at the hazard center instead of the start region;
    /// used to engineer infeasible starting policies.
    pub spawn_at_hazard: bool,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            start: [-1.2, 0.0],
            goal: [1.2, 0.0],
            start_jitter: 0.1,
            hazard_center: [0.0, 0.0],
            hazard_radius: 0.4,
            v_max: 1.0,
            episode_len: 200,
            spawn_at_hazard: false,
        }
    }
}

/// Force-controlled point mass on the plane. State is
/// `position (+) velocity (+) goal-relative offset`; the two cost channels
/// are hazard proximity `sigmoid(10 (0.2 - d_hazard))` and speed excess
/// `sigmoid(10 (|v| - v_max))`.
pub struct PointMass {
    pub cfg: PointMassConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
    clamp_warned: bool,
}

const DT: f64 = 0.1;
const VEL_DECAY: f64 = 0.9;
const ACCEL: f64 = 0.2;

impl PointMass {
    pub fn new(cfg: PointMassConfig) -> Self {
        Self {
            cfg,
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            t: 0,
            clamp_warned: false,
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.cfg.goal[0] - self.pos[0],
            self.cfg.goal[1] - self.pos[1],
        ]
    }

    /// Distance from the hazard disc (zero inside it).
    pub fn hazard_distance(&self, pos: &[f64; 2]) -> f64 {
        let dx = pos[0] - self.cfg.hazard_center[0];
        let dy = pos[1] - self.cfg.hazard_center[1];
        ((dx * dx + dy * dy).sqrt() - self.cfg.hazard_radius).max(0.0)
    }

    pub fn hazard_cost(&self, pos: &[f64; 2]) -> f64 {
        sigmoid(10.0 * (0.2 - self.hazard_distance(pos)))
    }

    pub fn speed_cost(&self, vel: &[f64; 2]) -> f64 {
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        sigmoid(10.0 * (speed - self.cfg.v_max))
    }
}

impl Env for PointMass {
    fn state_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn num_costs(&self) -> usize {
        2
    }

    fn episode_len(&self) -> usize {
        self.cfg.episode_len
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let center = if self.cfg.spawn_at_hazard {
            self.cfg.hazard_center
        } else {
            self.cfg.start
        };
        let jx: f64 = StandardNormal.sample(rng);
        let jy: f64 = StandardNormal.sample(rng);
        self.pos = [
            center[0] + self.cfg.start_jitter * jx,
            center[1] + self.cfg.start_jitter * jy,
        ];
        self.vel = [0.0, 0.0];
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f64], behavior_prob: f64, rng: &mut ChaCha8Rng) -> Transition {
        let _ = rng; // dynamics are deterministic given the reset
        let state = self.state();
        let ax = clamp_action(action[0], &mut self.clamp_warned, "point mass");
        let ay = clamp_action(action[1], &mut self.clamp_warned, "point mass");
        self.vel[0] = VEL_DECAY * self.vel[0] + ACCEL * ax;
        self.vel[1] = VEL_DECAY * self.vel[1] + ACCEL * ay;
        self.pos[0] += DT * self.vel[0];
        self.pos[1] += DT * self.vel[1];
        self.t += 1;

        let dx = self.cfg.goal[0] - self.pos[0];
        let dy = self.cfg.goal[1] - self.pos[1];
        let d_goal = (dx * dx + dy * dy).sqrt();
        let reward = -0.1 * d_goal;
        let costs = vec![self.hazard_cost(&self.pos), self.speed_cost(&self.vel)];
        Transition {
            state,
            action: vec![ax, ay],
            behavior_prob,
            reward,
            costs,
            done: self.t >= self.cfg.episode_len,
            next_state: self.state(),
        }
    }
}

// --- two-state reward toy -----------------------------------------------------

/// Two states visited uniformly at random with Gaussian per-state rewards.
#[derive(Debug, Clone)]
pub struct TwoStateRewardToy {
    pub means: [f64; 2],
    pub stds: [f64; 2],
}

impl Default for TwoStateRewardToy {
    fn default() -> Self {
        Self {
            means: [-0.005, 0.005],
            stds: [0.02, 0.03],
        }
    }
}

impl TwoStateRewardToy {
    pub fn sample_reward(&self, state: usize, rng: &mut ChaCha8Rng) -> f64 {
        let eps: f64 = StandardNormal.sample(rng);
        self.means[state] + self.stds[state] * eps
    }

    pub fn sample_state(&self, rng: &mut ChaCha8Rng) -> usize {
        if rng.gen::<f64>() < 0.5 {
            0
        } else {
            1
        }
    }

    /// A sampled trajectory of `(state, reward, next_state)` triples.
    pub fn sample_trajectory(
        &self,
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::with_capacity(len);
        let mut s = self.sample_state(rng);
        for _ in 0..len {
            let r = self.sample_reward(s, rng);
            let s2 = self.sample_state(rng);
            out.push((s, r, s2));
            s = s2;
        }
        out
    }

    /// Monte-Carlo reference return distribution per state, truncated at
    /// `horizon` (the tail is below `gamma^horizon * max_r / (1 - gamma)`).
    pub fn reference_returns(
        &self,
        gamma: f64,
        horizon: usize,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> [WeightedAtomSet; 2] {
        let mut make = |s0: usize| {
            let w = 1.0 / samples as f64;
            let entries: Vec<(f64, f64)> = (0..samples)
                .map(|_| {
                    let mut acc = 0.0;
                    let mut disc = 1.0;
                    let mut s = s0;
                    for _ in 0..horizon {
                        acc += disc * self.sample_reward(s, rng);
                        disc *= gamma;
                        s = self.sample_state(rng);
                    }
                    (acc, w)
                })
                .collect();
            WeightedAtomSet::new(entries).expect("nonempty reference")
        };
        [make(0), make(1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_absorbing_state_geometric_sum() {
        let mdp = TabularCMDP::single_state(1.0, 0.9);
        let table =
            exact_return_distribution(&mdp, &[1.0], Channel::Reward, 200, 1_000_000).unwrap();
        let d = &table.dists[0];
        assert_eq!(d.len(), 1);
        let expect: f64 = (0..200).map(|t| 0.9f64.powi(t)).sum();
        assert!((d.mean() - expect).abs() < 1e-12);
        assert!(table.tail_bound < 1e-8);
    }

    #[test]
    fn zero_reward_mdp_is_dirac_at_zero() {
        let mdp = TabularCMDP::single_state(0.0, 0.5);
        let table =
            exact_return_distribution(&mdp, &[1.0], Channel::Reward, 64, 1_000).unwrap();
        assert_eq!(table.dists[0].entries(), &[(0.0, 1.0)]);
    }

    #[test]
    fn coin_flip_mdp_two_atoms() {
        // One transient state branching to two absorbing states with rewards
        // 0 and 1 on the branch step, then zero forever.
        let n_states = 3;
        let n_actions = 1;
        let mut p = vec![0.0; n_states * n_actions * n_states];
        let mut r = vec![0.0; n_states * n_actions * n_states];
        p[0 * n_states + 1] = 0.5;
        p[0 * n_states + 2] = 0.5;
        r[0 * n_states + 2] = 1.0;
        p[1 * n_states + 1] = 1.0;
        p[2 * n_states + 2] = 1.0;
        let mdp = TabularCMDP::new(
            n_states,
            n_actions,
            p,
            r,
            vec![],
            vec![1.0, 0.0, 0.0],
            0.9,
        )
        .unwrap();
        let table =
            exact_return_distribution(&mdp, &[1.0, 1.0, 1.0], Channel::Reward, 80, 10_000)
                .unwrap();
        let d = table.dists[0].sorted_merged();
        assert_eq!(d.len(), 2);
        assert!((d[0].0 - 0.0).abs() < 1e-12 && (d[0].1 - 0.5).abs() < 1e-12);
        assert!((d[1].0 - 1.0).abs() < 1e-12 && (d[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tail_certificate_shrinks_with_horizon() {
        let mdp = TabularCMDP::dag4(0.9);
        let policy = vec![0.5; 8];
        let short =
            exact_return_distribution(&mdp, &policy, Channel::Reward, 10, 100_000).unwrap();
        let long =
            exact_return_distribution(&mdp, &policy, Channel::Reward, 40, 100_000).unwrap();
        for (a, b) in short.dists.iter().zip(&long.dists) {
            let w = crate::qdist::wasserstein1(a, b);
            assert!(w <= short.tail_bound + 1e-12, "w = {w} > {}", short.tail_bound);
        }
    }

    #[test]
    fn point_mass_cost_values() {
        let pm = PointMass::new(PointMassConfig::default());
        // At the hazard center: sigmoid(10 * 0.2) = 0.88079...
        let at_center = pm.hazard_cost(&[0.0, 0.0]);
        assert!((at_center - 0.8807970779778823).abs() < 1e-12);
        // Far away (d >= 2): below sigmoid(-18).
        let far = pm.hazard_cost(&[2.5, 0.0]);
        assert!(far < 2e-8);
    }

    #[test]
    fn point_mass_costs_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pm = PointMass::new(PointMassConfig::default());
        pm.reset(&mut rng);
        for i in 0..100_000 {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let tr = pm.step(&a, 1.0, &mut rng);
            for c in &tr.costs {
                assert!((0.0..=1.0).contains(c));
            }
            if tr.done {
                pm.reset(&mut rng);
            }
            if i == 0 {
                assert_eq!(tr.state.len(), 6);
            }
        }
    }

    #[test]
    fn tabular_env_replays_identically_under_same_seed() {
        let mdp = TabularCMDP::dag4(0.9);
        let run = |seed: u64| -> Vec<usize> {
            let mut env = TabularEnvAdapter::new(TabularCMDP::dag4(0.9), 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            env.reset(&mut rng);
            (0..8)
                .map(|i| {
                    let a = if i % 2 == 0 { -0.5 } else { 0.5 };
                    let tr = env.step(&[a], 1.0, &mut rng);
                    tr.next_state.iter().position(|&v| v == 1.0).unwrap()
                })
                .collect()
        };
        assert_eq!(run(7), run(7));
        let _ = mdp;
    }

    #[test]
    fn two_state_toy_reference_moments() {
        let toy = TwoStateRewardToy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs = toy.reference_returns(0.9, 60, 4000, &mut rng);
        // Mean return from s0: -0.005 + gamma * 0 (uniform mixing of +-0.005).
        assert!((refs[0].mean() - (-0.005)).abs() < 0.01);
        assert!((refs[1].mean() - 0.005).abs() < 0.01);
    }
}
