//! TD(lambda) target distributions.
//!
//! [`build_targets`] runs the backward recursion over one trajectory: the
//! target at step `t` mixes the one-step bootstrapped target with the shifted
//! previous target, restores the CDF of the combination and projects it back
//! to `m_proj` quantile atoms. The carry weight follows
//! `w_tot <- lambda * (pi/mu) * (1 - d) * (1 - lambda + w_tot)`, so episode
//! boundaries zero the recursion and off-policy steps are importance
//! weighted.
//!
//! [`apply_operator_exact`] evaluates the same operator without sampling on a
//! small tabular CMDP by enumerating `(state, reward-prefix)` layers, which
//! is what the contraction and fixed-point checks run against.

use crate::critic::CriticEnsemble;
use crate::envs::{self, Channel, ReturnTable, TabularCMDP, Transition};
use crate::error::{Error, Result};
use crate::numgrad::ParamVector;
use crate::policy::{self, PolicyNet};
use crate::qdist::{self, QuantileDistribution, WeightedAtomSet};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// Ratio cap that effectively disables clipping; the recursion never clips
/// unless configured down for variance control.
pub const DEFAULT_RATIO_CAP: f64 = 1e6;

/// An ordered single-trajectory slice of transitions.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn new(steps: Vec<Transition>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyInput("Trajectory::new"));
        }
        for (i, s) in steps.iter().enumerate() {
            if !(s.behavior_prob > 0.0) || !s.behavior_prob.is_finite() {
                return Err(Error::invalid(
                    "Trajectory::new",
                    format!("behavior_prob at step {i} must be positive, got {}", s.behavior_prob),
                ));
            }
            if !s.reward.is_finite() || s.costs.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("Trajectory::new rewards/costs"));
            }
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Scalar channel of one transition.
pub fn step_value(step: &Transition, channel: Channel) -> f64 {
    match channel {
        Channel::Reward => step.reward,
        Channel::Cost(k) => step.costs[k],
    }
}

/// Bootstrap-distribution and current-policy access used by the recursion.
///
/// One implementation wraps the neural policy and critic; the tabular one
/// backs the toy studies and the operator cross-checks.
pub trait TargetModel {
    /// Atom positions of the bootstrap distribution at `next_state`, drawn
    /// with a fresh policy action.
    fn bootstrap_atoms(&self, next_state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Current-policy log-density at a stored action.
    fn log_policy_prob(&self, state: &[f64], action: &[f64]) -> Result<f64>;
}

/// Neural policy plus critic ensemble for one channel.
pub struct NeuralTargetModel<'a> {
    pub policy: &'a PolicyNet,
    pub policy_params: &'a ParamVector,
    pub critic: &'a CriticEnsemble,
}

impl TargetModel for NeuralTargetModel<'_> {
    fn bootstrap_atoms(&self, next_state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let noise: Vec<f64> = (0..self.policy.action_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let eval = policy::sample(self.policy, self.policy_params, next_state, &noise)?;
        self.critic.pooled_atoms(next_state, &eval.action)
    }

    fn log_policy_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        policy::log_prob_of_action(self.policy, self.policy_params, state, action)
    }
}

/// Tabular policy and per-`(s, a)` atom table. States and actions travel as
/// single-element vectors holding the index.
pub struct TabularTargetModel<'a> {
    pub pi: &'a [f64],
    pub n_actions: usize,
    /// Equal-weight atoms per `(s, a)`, indexed `s * n_actions + a`.
    pub atoms: &'a [Vec<f64>],
}

impl TabularTargetModel<'_> {
    fn decode(v: &[f64]) -> usize {
        v[0] as usize
    }
}

impl TargetModel for TabularTargetModel<'_> {
    fn bootstrap_atoms(&self, next_state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        use rand::Rng;
        let s = Self::decode(next_state);
        let row = &self.pi[s * self.n_actions..][..self.n_actions];
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut a = self.n_actions - 1;
        for (i, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                a = i;
                break;
            }
        }
        Ok(self.atoms[s * self.n_actions + a].clone())
    }

    fn log_policy_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let s = Self::decode(state);
        let a = Self::decode(action);
        let p = self.pi[s * self.n_actions + a];
        if p <= 0.0 {
            return Err(Error::invalid(
                "TabularTargetModel::log_policy_prob",
                "policy mass zero at stored action",
            ));
        }
        Ok(p.ln())
    }
}

/// Backward recursion producing one projected target per trajectory step.
pub fn build_targets(
    traj: &Trajectory,
    model: &impl TargetModel,
    channel: Channel,
    gamma: f64,
    lambda: f64,
    m_proj: usize,
    ratio_cap: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QuantileDistribution>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("build_targets", "lambda in [0, 1]"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("build_targets", "gamma in (0, 1)"));
    }
    if m_proj == 0 {
        return Err(Error::invalid("build_targets", "m_proj >= 1"));
    }
    let t_len = traj.len();
    let last = &traj.steps[t_len - 1];

    // Running shifted target. Starts as a one-step target at the final step.
    let boot = model.bootstrap_atoms(&last.next_state, rng)?;
    let mut z_tot = shifted_bootstrap(&boot, step_value(last, channel), gamma * last.continuation())?;
    let mut w_tot = lambda;

    let mut out: Vec<Option<QuantileDistribution>> = vec![None; t_len];
    for t in (0..t_len).rev() {
        let step = &traj.steps[t];
        let boot = model.bootstrap_atoms(&step.next_state, rng)?;
        let one_step =
            shifted_bootstrap(&boot, step_value(step, channel), gamma * step.continuation())?;
        let w = 1.0 - lambda;
        let combined = if w + w_tot > 1e-12 {
            qdist::mix(&[(&one_step, w), (&z_tot, w_tot)])?
        } else {
            // lambda = 1 with a dead carry (episode boundary or a vanishing
            // importance ratio): the mixture degenerates to the one-step
            // target.
            one_step.clone()
        };
        let projected = qdist::project(&combined, m_proj)?;
        if t > 0 {
            let prev = &traj.steps[t - 1];
            let cont_prev = prev.continuation();
            z_tot = qdist::affine(&projected.to_weighted(), gamma * cont_prev, step_value(prev, channel));
            let log_pi = model.log_policy_prob(&step.state, &step.action)?;
            let ratio = (log_pi - step.behavior_prob.ln()).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite("build_targets importance ratio"));
            }
            let ratio = ratio.min(ratio_cap);
            w_tot = lambda * ratio * cont_prev * (1.0 - lambda + w_tot);
        }
        out[t] = Some(projected);
    }
    Ok(out.into_iter().map(|d| d.expect("filled")).collect())
}

fn shifted_bootstrap(atoms: &[f64], value: f64, scale: f64) -> Result<WeightedAtomSet> {
    let w = 1.0 / atoms.len() as f64;
    WeightedAtomSet::new(atoms.iter().map(|&a| (value + scale * a, w)).collect())
}

/// Fraction of the operator's mixture weight lost to truncating the outer
/// sum at index `horizon_cut` (geometric tail).
pub fn operator_tail_fraction(lambda: f64, horizon_cut: usize) -> f64 {
    lambda.powi(horizon_cut as i32 + 1)
}

/// Smallest cut with `lambda^cut < 1e-8`, the default truncation rule.
pub fn default_horizon_cut(lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 1;
    }
    let mut cut = 1;
    let mut p = lambda;
    while p >= 1e-8 && cut < 10_000 {
        p *= lambda;
        cut += 1;
    }
    cut
}

/// Exact (non-sampled) application of the truncated TD(lambda) operator on a
/// tabular CMDP.
///
/// For every start pair the trajectory space is expanded as layers of
/// `(state, discounted-prefix)` records under the behavior policy with
/// importance products toward the target policy; each layer contributes the
/// pushforward of the input table at the layer's states. Errors when a layer
/// or the output atom count exceeds `budget`.
pub fn apply_operator_exact(
    mdp: &TabularCMDP,
    dists: &[WeightedAtomSet],
    mu: &[f64],
    pi: &[f64],
    lambda: f64,
    horizon_cut: usize,
    budget: usize,
) -> Result<Vec<WeightedAtomSet>> {
    envs::check_policy_table(mdp, mu)?;
    envs::check_policy_table(mdp, pi)?;
    if dists.len() != mdp.n_states * mdp.n_actions {
        return Err(Error::DimensionMismatch {
            context: "apply_operator_exact input table",
            expected: mdp.n_states * mdp.n_actions,
            got: dists.len(),
        });
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(
            "apply_operator_exact",
            "lambda in [0, 1); the untruncated lambda = 1 operator has no
             normalizable truncation",
        ));
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            if pi[s * mdp.n_actions + a] > 0.0 && mu[s * mdp.n_actions + a] <= 0.0 {
                return Err(Error::invalid(
                    "apply_operator_exact",
                    format!("mu gives zero mass where pi does not at ({s},{a})"),
                ));
            }
        }
    }

    let mut out = Vec::with_capacity(dists.len());
    for s0 in 0..mdp.n_states {
        for a0 in 0..mdp.n_actions {
            // Layer after the first transition: i = 0 contributions.
            let mut layer: BTreeMap<(usize, u64), f64> = BTreeMap::new();
            for s1 in 0..mdp.n_states {
                let p = mdp.prob(s0, a0, s1);
                if p > 0.0 {
                    let r0 = mdp.channel_value(Channel::Reward, s0, a0, s1);
                    *layer.entry((s1, r0.to_bits())).or_insert(0.0) += p;
                }
            }
            let mut entries: Vec<(f64, f64)> = Vec::new();
            let mut lambda_pow = 1.0;
            let mut discount = mdp.gamma;
            for depth in 0..=horizon_cut {
                // Contribution of term i = depth.
                for (&(s, pfx_bits), &w) in &layer {
                    let pfx = f64::from_bits(pfx_bits);
                    for a_next in 0..mdp.n_actions {
                        let pa = pi[s * mdp.n_actions + a_next];
                        if pa == 0.0 {
                            continue;
                        }
                        let dist = &dists[s * mdp.n_actions + a_next];
                        let outer = lambda_pow * w * pa;
                        for &(z, wz) in dist.entries() {
                            entries.push((pfx + discount * z, outer * wz));
                        }
                    }
                }
                if entries.len() > budget {
                    return Err(Error::BudgetExceeded {
                        context: "apply_operator_exact atoms",
                        used: entries.len(),
                        budget,
                    });
                }
                if depth == horizon_cut {
                    break;
                }
                // Advance one behavior step with importance reweighting.
                let mut next: BTreeMap<(usize, u64), f64> = BTreeMap::new();
                for (&(s, pfx_bits), &w) in &layer {
                    let pfx = f64::from_bits(pfx_bits);
                    for a in 0..mdp.n_actions {
                        let pmu = mu[s * mdp.n_actions + a];
                        let ppi = pi[s * mdp.n_actions + a];
                        if pmu == 0.0 || ppi == 0.0 {
                            continue;
                        }
                        let ratio = ppi / pmu;
                        for s2 in 0..mdp.n_states {
                            let p = mdp.prob(s, a, s2);
                            if p == 0.0 {
                                continue;
                            }
                            let r = mdp.channel_value(Channel::Reward, s, a, s2);
                            let new_pfx = pfx + discount * r;
                            *next.entry((s2, new_pfx.to_bits())).or_insert(0.0) +=
                                w * pmu * ratio * p;
                        }
                    }
                }
                if next.len() > budget {
                    return Err(Error::BudgetExceeded {
                        context: "apply_operator_exact layer",
                        used: next.len(),
                        budget,
                    });
                }
                layer = next;
                lambda_pow *= lambda;
                discount *= mdp.gamma;
            }
            out.push(WeightedAtomSet::new(entries)?);
        }
    }
    Ok(out)
}

/// Result of iterating the exact operator toward its fixed point with
/// projection compression between applications.
#[derive(Debug)]
pub struct FixedPointRun {
    pub final_table: Vec<WeightedAtomSet>,
    /// Certified upper bound on the final max-entry W1 distance to the
    /// reference return table, accumulated from the truncation and
    /// compression errors actually incurred.
    pub certified_bound: f64,
    pub distance_to_reference: f64,
    pub iterations: usize,
}

/// Iterates `z <- Proj(T z)` from a Dirac-at-zero table, tracking a certified
/// error budget:
/// `B_{k+1} = gamma B_k + e_k` with `e_k` the measured projection error, plus
/// the operator's truncation gap and the reference's own tail bound.
pub fn iterate_operator_to_fixed_point(
    mdp: &TabularCMDP,
    mu: &[f64],
    pi: &[f64],
    lambda: f64,
    horizon_cut: usize,
    proj_atoms: usize,
    iterations: usize,
    reference: &ReturnTable,
    budget: usize,
) -> Result<FixedPointRun> {
    let n = mdp.n_states * mdp.n_actions;
    let range = mdp.return_range(Channel::Reward);
    // Distance from the truncated operator's fixed point to the true return
    // distribution: each application differs by at most the dropped tail mass
    // moving across the full return range.
    let op_gap = 2.0 * operator_tail_fraction(lambda, horizon_cut) * range / (1.0 - mdp.gamma);

    let mut table: Vec<WeightedAtomSet> = (0..n).map(|_| WeightedAtomSet::dirac(0.0)).collect();
    let max_w1 = |a: &[WeightedAtomSet], b: &[WeightedAtomSet]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| qdist::wasserstein1(x, y))
            .fold(0.0, f64::max)
    };
    // d(z_0, fixed point) <= d(z_0, reference) + ref tail + op gap.
    let mut bound = max_w1(&table, &reference.dists) + reference.tail_bound + op_gap;
    for _ in 0..iterations {
        let applied = apply_operator_exact(mdp, &table, mu, pi, lambda, horizon_cut, budget)?;
        let mut projected = Vec::with_capacity(n);
        let mut proj_err: f64 = 0.0;
        for d in &applied {
            let q = qdist::project(d, proj_atoms)?;
            let qw = q.to_weighted();
            proj_err = proj_err.max(qdist::wasserstein1(&qw, d));
            projected.push(qw);
        }
        bound = mdp.gamma * bound + proj_err;
        table = projected;
    }
    let certified_bound = bound + op_gap / (1.0 - mdp.gamma) + reference.tail_bound;
    let distance_to_reference = max_w1(&table, &reference.dists);
    Ok(FixedPointRun {
        final_table: table,
        certified_bound,
        distance_to_reference,
        iterations,
    })
}

pub mod toy {
    //! Two-state Gaussian-reward study: train a tabular quantile table
    //! against TD(lambda) targets and track the Wasserstein distance to a
    //! Monte-Carlo reference return distribution per iteration.

    use super::*;
    use crate::critic::quantile_loss;
    use crate::envs::TwoStateRewardToy;
    use rand::SeedableRng;

    #[derive(Debug, Clone)]
    pub struct ToyProtocol {
        pub gamma: f64,
        pub lambda: f64,
        pub atoms: usize,
        pub m_proj: usize,
        pub iterations: usize,
        pub trajectories_per_iter: usize,
        pub trajectory_len: usize,
        pub learning_rate: f64,
        pub init_atom_value: f64,
    }

    impl ToyProtocol {
        pub fn with_lambda(lambda: f64) -> Self {
            Self {
                gamma: 0.9,
                lambda,
                atoms: 25,
                m_proj: 50,
                iterations: 25,
                trajectories_per_iter: 8,
                trajectory_len: 30,
                learning_rate: 0.6,
                init_atom_value: 5.0,
            }
        }
    }

    #[derive(Debug, Clone)]
    pub struct ToyRun {
        /// Mean-over-states W1 distance to the reference, one per iteration.
        pub w1: Vec<f64>,
    }

    impl ToyRun {
        /// Mean and std of the `window` most recent distances ending at
        /// 1-based iteration `upto`.
        pub fn window_stats(&self, upto: usize, window: usize) -> (f64, f64) {
            let hi = upto.min(self.w1.len());
            let lo = hi.saturating_sub(window);
            let slice = &self.w1[lo..hi];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / slice.len() as f64;
            (mean, var.sqrt())
        }
    }

    /// One training run of the tabular quantile table against recursive
    /// TD(lambda) targets.
    pub fn run_two_state_protocol(
        toy: &TwoStateRewardToy,
        protocol: &ToyProtocol,
        seed: u64,
        reference: &[WeightedAtomSet; 2],
    ) -> Result<ToyRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut atoms: Vec<Vec<f64>> =
            vec![vec![protocol.init_atom_value; protocol.atoms]; 2];
        let pi = vec![1.0, 1.0];
        let mut w1 = Vec::with_capacity(protocol.iterations);
        for _iter in 0..protocol.iterations {
            // Collect targets grouped by state, then update the table.
            let mut targets: Vec<(usize, QuantileDistribution)> = Vec::new();
            for _ in 0..protocol.trajectories_per_iter {
                let raw = toy.sample_trajectory(protocol.trajectory_len, &mut rng);
                let steps: Vec<Transition> = raw
                    .iter()
                    .map(|&(s, r, s2)| Transition {
                        state: vec![s as f64],
                        action: vec![0.0],
                        behavior_prob: 1.0,
                        reward: r,
                        costs: vec![],
                        done: false,
                        next_state: vec![s2 as f64],
                    })
                    .collect();
                let traj = Trajectory::new(steps)?;
                let model = TabularTargetModel {
                    pi: &pi,
                    n_actions: 1,
                    atoms: &atoms,
                };
                let projected = build_targets(
                    &traj,
                    &model,
                    Channel::Reward,
                    protocol.gamma,
                    protocol.lambda,
                    protocol.m_proj,
                    DEFAULT_RATIO_CAP,
                    &mut rng,
                )?;
                for (step, target) in raw.iter().zip(projected) {
                    targets.push((step.0, target));
                }
            }
            for (s, target) in &targets {
                let (_, grad) = quantile_loss(&atoms[*s], &target.to_weighted())?;
                for (a, g) in atoms[*s].iter_mut().zip(&grad) {
                    *a -= protocol.learning_rate * g;
                }
            }
            let dist = (0..2)
                .map(|s| {
                    let est = WeightedAtomSet::equal_weights(&atoms[s])?;
                    Ok(qdist::wasserstein1(&est, &reference[s]))
                })
                .collect::<Result<Vec<f64>>>()?;
            w1.push(0.5 * (dist[0] + dist[1]));
        }
        Ok(ToyRun { w1 })
    }
}
