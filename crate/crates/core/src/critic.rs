//! Distributional quantile critics.
//!
//! A critic maps `state (+) action` to `M` atom positions; atom `m` is
//! regressed toward the `tau_mid(m) = (m + 1/2) / M` quantile of its target
//! through the pinball loss `rho_tau(x) = x (tau - 1_{x<0})`. Raw outputs are
//! not forced sorted during training; sorting happens when members are pooled
//! into one equal-weight distribution at prediction time.
//!
//! Training is plain SGD with momentum; the velocity is transient state and
//! is not part of checkpoints.

use crate::error::{Error, Result};
use crate::numgrad::{self, Activation, NetSpec, ParamVector};
use crate::qdist::{QuantileDistribution, WeightedAtomSet};
use rand::Rng;
use std::path::Path;

/// Network shape shared by all members of one critic ensemble.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub spec: NetSpec,
    pub state_dim: usize,
    pub action_dim: usize,
    pub atoms: usize,
}

impl CriticNet {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden_dims: Vec<usize>,
        atoms: usize,
        activation: Activation,
    ) -> Result<Self> {
        if atoms == 0 {
            return Err(Error::invalid("CriticNet::new", "atoms must be >= 1"));
        }
        let spec = NetSpec::new(state_dim + action_dim, hidden_dims, atoms, activation)?;
        Ok(Self {
            spec,
            state_dim,
            action_dim,
            atoms,
        })
    }
}

/// An ensemble of quantile critics over a shared network shape.
#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    pub net: CriticNet,
    pub members: Vec<ParamVector>,
    velocities: Vec<Vec<f64>>,
    pub momentum: f64,
}

/// Default SGD momentum for critic updates.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl CriticEnsemble {
    pub fn new(net: CriticNet, ensemble_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(Error::invalid("CriticEnsemble::new", "ensemble size >= 1"));
        }
        let members: Vec<ParamVector> = (0..ensemble_size)
            .map(|_| numgrad::init_params(&net.spec, rng))
            .collect();
        let velocities = members
            .iter()
            .map(|m| vec![0.0; m.len()])
            .collect();
        Ok(Self {
            net,
            members,
            velocities,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn from_members(net: CriticNet, members: Vec<ParamVector>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput("CriticEnsemble::from_members"));
        }
        for m in &members {
            m.check_for(&net.spec, "CriticEnsemble::from_members")?;
        }
        let velocities = members.iter().map(|m| vec![0.0; m.len()]).collect();
        Ok(Self {
            net,
            members,
            velocities,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    fn input(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.net.state_dim {
            return Err(Error::DimensionMismatch {
                context: "critic state",
                expected: self.net.state_dim,
                got: state.len(),
            });
        }
        if action.len() != self.net.action_dim {
            return Err(Error::DimensionMismatch {
                context: "critic action",
                expected: self.net.action_dim,
                got: action.len(),
            });
        }
        let mut x = Vec::with_capacity(state.len() + action.len());
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        Ok(x)
    }

    /// Raw (unsorted) atom slots of one member.
    pub fn member_raw(&self, member: usize, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let x = self.input(state, action)?;
        numgrad::forward(&self.net.spec, &self.members[member], &x)
    }

    /// All members' raw outputs concatenated (`E * M` values, unsorted).
    pub fn pooled_atoms(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let x = self.input(state, action)?;
        let mut all = Vec::with_capacity(self.members.len() * self.net.atoms);
        for m in &self.members {
            all.extend(numgrad::forward(&self.net.spec, m, &x)?);
        }
        Ok(all)
    }

    /// Pooled prediction: member outputs concatenated, sorted, reinterpreted
    /// as an `E * M`-atom equal-weight distribution.
    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<QuantileDistribution> {
        QuantileDistribution::from_unsorted(self.pooled_atoms(state, action)?)
    }

    /// First moment of the pooled prediction.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let atoms = self.pooled_atoms(state, action)?;
        Ok(atoms.iter().sum::<f64>() / atoms.len() as f64)
    }

    /// Second moment of the pooled prediction.
    pub fn s_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let atoms = self.pooled_atoms(state, action)?;
        Ok(atoms.iter().map(|a| a * a).sum::<f64>() / atoms.len() as f64)
    }

    /// One SGD-with-momentum step per member on the mean quantile loss over
    /// the batch; every member regresses against the same targets.
    pub fn fit_step(
        &mut self,
        batch: &[(&[f64], &[f64], &WeightedAtomSet)],
        learning_rate: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("CriticEnsemble::fit_step"));
        }
        let inv_n = 1.0 / batch.len() as f64;
        let inv_members = 1.0 / self.members.len() as f64;
        let mut mean_loss = 0.0;
        for (member, velocity) in self.members.iter_mut().zip(&mut self.velocities) {
            let mut grad = vec![0.0; member.len()];
            let mut loss_acc = 0.0;
            for &(state, action, target) in batch {
                let mut x = Vec::with_capacity(state.len() + action.len());
                x.extend_from_slice(state);
                x.extend_from_slice(action);
                let trace = numgrad::forward_trace(&self.net.spec, member, &x)?;
                let (loss, grad_pred) = quantile_loss(&trace.output, target)?;
                loss_acc += loss;
                let (g, _) =
                    numgrad::backward_trace(&self.net.spec, member, &trace, &grad_pred, false)?;
                crate::vecmath::axpy(inv_n, g.as_slice(), &mut grad);
            }
            mean_loss += loss_acc * inv_n * inv_members;
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(&mut member.0) {
                *v = self.momentum * *v + g;
                *p -= learning_rate * *v;
            }
        }
        Ok(mean_loss)
    }

    /// Checkpoint with one text block per member.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for m in &self.members {
            text.push_str(&numgrad::write_checkpoint_string(&self.net.spec, m)?);
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads members from a multi-block checkpoint written by
    /// [`CriticEnsemble::save_checkpoint`].
    pub fn load_checkpoint(net: CriticNet, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().peekable();
        let mut members = Vec::new();
        while lines.peek().is_some() {
            let (spec, params) = numgrad::read_checkpoint_block(&mut lines)?;
            if spec != net.spec {
                return Err(Error::CheckpointFormat(
                    "member spec does not match the critic net".into(),
                ));
            }
            members.push(params);
        }
        Self::from_members(net, members)
    }
}

/// Pinball loss of predicted atom slots against a weighted target and its
/// exact subgradient with respect to the predictions.
///
/// `loss = sum_m sum_j w_j rho_{tau_mid(m)}(z_j - pred_m)` and
/// `grad_m = sum_j w_j (1_{z_j < pred_m} - tau_mid(m))`; ties `z_j == pred_m`
/// count as `z >= pred` and contribute `-tau_mid(m)`.
pub fn quantile_loss(pred_atoms: &[f64], target: &WeightedAtomSet) -> Result<(f64, Vec<f64>)> {
    if target.is_empty() {
        return Err(Error::EmptyInput("critic::quantile_loss"));
    }
    let m_atoms = pred_atoms.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m_atoms];
    for (m, &pred) in pred_atoms.iter().enumerate() {
        let tau = (m as f64 + 0.5) / m_atoms as f64;
        let mut g = 0.0;
        for &(z, w) in target.entries() {
            let x = z - pred;
            let indicator = if x < 0.0 { 1.0 } else { 0.0 };
            loss += w * x * (tau - indicator);
            g += w * (indicator - tau);
        }
        grad[m] = g;
    }
    Ok((loss, grad))
}

/// Left-continuous CDF inverse of a weighted atom set at level `tau`: the
/// smallest position whose cumulative weight reaches `tau`.
pub fn target_quantile(target: &WeightedAtomSet, tau: f64) -> f64 {
    let entries = target.sorted_merged();
    let total: f64 = entries.iter().map(|&(_, w)| w).sum();
    let level = tau * total;
    let mut cum = 0.0;
    for &(p, w) in &entries {
        cum += w;
        if cum >= level {
            return p;
        }
    }
    entries.last().expect("nonempty target").0
}
