//! Tanh-squashed diagonal Gaussian policy.
//!
//! The network maps a state to `[mean, raw_log_std]`; the log-std is clamped
//! to [`LOG_STD_MIN`], [`LOG_STD_MAX`] and actions are `tanh(mean + eps *
//! std)` with `eps ~ N(0, 1)`. Log-densities carry the change-of-variables
//! correction `-sum log(1 - tanh^2)`.
//!
//! KL between two policies at a state is the closed-form diagonal Gaussian
//! KL of the pre-squash distributions; the shared invertible tanh map leaves
//! KL unchanged. The KL Hessian-vector product uses the Gauss-Newton form
//! `J' F J v` with the analytic Fisher `diag(1/sigma^2, 2)` in
//! `(mean, log_std)` coordinates, which equals the exact KL Hessian at the
//! expansion point.

use crate::error::{Error, Result};
use crate::numgrad::{self, NetSpec, ParamVector, Trace};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Default damping added to the Fisher in both solvers.
pub const DEFAULT_DAMPING: f64 = 1e-2;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean and clamped log-std of the pre-squash Gaussian at one state.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

/// One sampled action with its log-density and pre-squash value.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub pre_squash: Vec<f64>,
}

/// Network shape of a policy: state in, `[mean, log_std]` out.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub spec: NetSpec,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl PolicyNet {
    pub fn new(state_dim: usize, hidden_dims: Vec<usize>, action_dim: usize) -> Result<Self> {
        let spec = NetSpec::new(
            state_dim,
            hidden_dims,
            2 * action_dim,
            numgrad::Activation::Relu,
        )?;
        Ok(Self {
            spec,
            state_dim,
            action_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Head values plus the forward trace and the clamp mask on the raw
    /// log-std outputs (1 inside the clamp interval, 0 outside).
    pub fn head_trace(
        &self,
        params: &ParamVector,
        state: &[f64],
    ) -> Result<(GaussianHead, Trace, Vec<f64>)> {
        let trace = numgrad::forward_trace(&self.spec, params, state)?;
        let a = self.action_dim;
        let mean = trace.output[..a].to_vec();
        let mut mask = vec![1.0; a];
        let log_std: Vec<f64> = trace.output[a..]
            .iter()
            .enumerate()
            .map(|(i, &raw)| {
                if raw < LOG_STD_MIN {
                    mask[i] = 0.0;
                    LOG_STD_MIN
                } else if raw > LOG_STD_MAX {
                    mask[i] = 0.0;
                    LOG_STD_MAX
                } else {
                    raw
                }
            })
            .collect();
        Ok((GaussianHead { mean, log_std }, trace, mask))
    }

    pub fn head(&self, params: &ParamVector, state: &[f64]) -> Result<GaussianHead> {
        Ok(self.head_trace(params, state)?.0)
    }
}

/// `log(1 - tanh(x)^2)` evaluated stably as `2 (ln 2 - x - softplus(-2x))`.
pub fn log_one_minus_tanh_sq(x: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Gaussian log-density of `pre` under the head plus the tanh correction.
pub fn log_prob_of_pre_squash(head: &GaussianHead, pre: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..head.mean.len() {
        let std = head.log_std[i].exp();
        let z = (pre[i] - head.mean[i]) / std;
        lp += -HALF_LN_2PI - head.log_std[i] - 0.5 * z * z;
        lp -= log_one_minus_tanh_sq(pre[i]);
    }
    lp
}

/// Draws the action `tanh(mean + noise * std)` for a given standard normal
/// noise vector.
pub fn sample(
    net: &PolicyNet,
    params: &ParamVector,
    state: &[f64],
    noise: &[f64],
) -> Result<PolicyEvaluation> {
    if noise.len() != net.action_dim {
        return Err(Error::DimensionMismatch {
            context: "policy::sample noise",
            expected: net.action_dim,
            got: noise.len(),
        });
    }
    let head = net.head(params, state)?;
    let pre: Vec<f64> = (0..net.action_dim)
        .map(|i| head.mean[i] + noise[i] * head.log_std[i].exp())
        .collect();
    let action: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
    let log_prob = log_prob_of_pre_squash(&head, &pre);
    Ok(PolicyEvaluation {
        action,
        log_prob,
        pre_squash: pre,
    })
}

/// Log-density of a stored squashed action under the current policy.
///
/// The pre-squash point is recovered through `atanh`; actions are pulled
/// marginally inside (-1, 1) first so saturated values stay finite.
pub fn log_prob_of_action(
    net: &PolicyNet,
    params: &ParamVector,
    state: &[f64],
    action: &[f64],
) -> Result<f64> {
    if action.len() != net.action_dim {
        return Err(Error::DimensionMismatch {
            context: "policy::log_prob_of_action",
            expected: net.action_dim,
            got: action.len(),
        });
    }
    let head = net.head(params, state)?;
    let pre: Vec<f64> = action
        .iter()
        .map(|&a| a.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh())
        .collect();
    Ok(log_prob_of_pre_squash(&head, &pre))
}

/// Closed-form KL divergence `KL(pi_old(.|state) || pi_new(.|state))` of the
/// pre-squash Gaussians.
pub fn kl(
    net: &PolicyNet,
    params_old: &ParamVector,
    params_new: &ParamVector,
    state: &[f64],
) -> Result<f64> {
    let old = net.head(params_old, state)?;
    let new = net.head(params_new, state)?;
    Ok(kl_heads(&old, &new))
}

pub fn kl_heads(old: &GaussianHead, new: &GaussianHead) -> f64 {
    let mut acc = 0.0;
    for i in 0..old.mean.len() {
        let s_old = old.log_std[i].exp();
        let s_new = new.log_std[i].exp();
        let dm = old.mean[i] - new.mean[i];
        acc += new.log_std[i] - old.log_std[i]
            + (s_old * s_old + dm * dm) / (2.0 * s_new * s_new)
            - 0.5;
    }
    acc
}

/// Mean closed-form KL over a batch of states.
pub fn mean_kl(
    net: &PolicyNet,
    params_old: &ParamVector,
    params_new: &ParamVector,
    states: &[Vec<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyInput("policy::mean_kl"));
    }
    let mut acc = 0.0;
    for s in states {
        acc += kl(net, params_old, params_new, s)?;
    }
    Ok(acc / states.len() as f64)
}

/// Precomputed per-state traces for repeated Fisher-vector products against
/// one parameter vector. The traces are v-independent, so a conjugate
/// gradient solve reuses them across iterations.
pub struct FisherKernel<'a> {
    net: &'a PolicyNet,
    params: &'a ParamVector,
    traces: Vec<Trace>,
    /// Per state: (inverse variances for the mean block, clamp mask).
    weights: Vec<(Vec<f64>, Vec<f64>)>,
    pub damping: f64,
}

impl<'a> FisherKernel<'a> {
    pub fn new(
        net: &'a PolicyNet,
        params: &'a ParamVector,
        states: &[Vec<f64>],
        damping: f64,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyInput("FisherKernel::new"));
        }
        if damping < 0.0 {
            return Err(Error::invalid("FisherKernel::new", "damping must be >= 0"));
        }
        let mut traces = Vec::with_capacity(states.len());
        let mut weights = Vec::with_capacity(states.len());
        for s in states {
            let (head, trace, mask) = net.head_trace(params, s)?;
            let inv_var: Vec<f64> = head.log_std.iter().map(|l| (-2.0 * l).exp()).collect();
            traces.push(trace);
            weights.push((inv_var, mask));
        }
        Ok(Self {
            net,
            params,
            traces,
            weights,
            damping,
        })
    }

    /// `(H + damping I) v` with `H` the state-averaged Gauss-Newton Fisher.
    pub fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        let a = self.net.action_dim;
        let mut out = vec![0.0; self.params.len()];
        for (trace, (inv_var, mask)) in self.traces.iter().zip(&self.weights) {
            let t = numgrad::jvp_trace(&self.net.spec, self.params, trace, v)?;
            let mut cot = vec![0.0; 2 * a];
            for i in 0..a {
                cot[i] = t[i] * inv_var[i];
                // The clamp mask enters both J and J'; it is 0/1 so the
                // square is itself.
                cot[a + i] = 2.0 * t[a + i] * mask[i];
            }
            let (g, _) = numgrad::backward_trace(&self.net.spec, self.params, trace, &cot, false)?;
            crate::vecmath::axpy(1.0, g.as_slice(), &mut out);
        }
        let scale = 1.0 / self.traces.len() as f64;
        for (o, vi) in out.iter_mut().zip(v.as_slice()) {
            *o = *o * scale + self.damping * vi;
        }
        Ok(ParamVector(out))
    }
}

/// `(H + damping I) v` for the state-averaged KL Hessian.
pub fn kl_hvp(
    net: &PolicyNet,
    params: &ParamVector,
    states: &[Vec<f64>],
    v: &ParamVector,
    damping: f64,
) -> Result<ParamVector> {
    FisherKernel::new(net, params, states, damping)?.apply(v)
}

/// Monte-Carlo entropy estimate: mean of `-log_prob` over one sampled action
/// per (state, noise) pair. The squashed density has no closed-form entropy.
pub fn entropy_estimate(
    net: &PolicyNet,
    params: &ParamVector,
    states: &[Vec<f64>],
    noises: &[Vec<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyInput("policy::entropy_estimate"));
    }
    if states.len() != noises.len() {
        return Err(Error::DimensionMismatch {
            context: "policy::entropy_estimate noises",
            expected: states.len(),
            got: noises.len(),
        });
    }
    let mut acc = 0.0;
    for (s, n) in states.iter().zip(noises) {
        acc -= sample(net, params, s, n)?.log_prob;
    }
    Ok(acc / states.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::init_params;
    use crate::oracles::normal;
    use crate::vecmath::dot;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn net_1d() -> PolicyNet {
        PolicyNet::new(2, vec![8], 1).unwrap()
    }

    fn random_states(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect()
    }

    #[test]
    fn zero_noise_gives_tanh_mean() {
        let net = net_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&net.spec, &mut rng);
        let state = vec![0.2, -0.4];
        let head = net.head(&params, &state).unwrap();
        let eval = sample(&net, &params, &state, &[0.0]).unwrap();
        assert!((eval.action[0] - head.mean[0].tanh()).abs() < 1e-15);
    }

    #[test]
    fn standard_head_log_prob_at_zero() {
        // mean = 0, log_std = 0, noise = 0: the Gaussian density at 0 is
        // -0.5 ln(2 pi) and the tanh correction vanishes.
        let head = GaussianHead {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        let lp = log_prob_of_pre_squash(&head, &[0.0]);
        assert!((lp + 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn density_matches_histogram_of_samples() {
        // 1-D fixed head; exp(log_prob) against a binned Monte-Carlo estimate
        // of the squashed density, within 3 sigma of the binomial bin noise.
        let head = GaussianHead {
            mean: vec![0.3],
            log_std: vec![-0.2],
        };
        let n: usize = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bins = 40;
        let mut counts = vec![0usize; bins];
        let std = head.log_std[0].exp();
        for _ in 0..n {
            let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let a = (head.mean[0] + eps * std).tanh();
            let idx = (((a + 1.0) / 2.0) * bins as f64) as usize;
            counts[idx.min(bins - 1)] += 1;
        }
        let width = 2.0 / bins as f64;
        let mut checked = 0;
        for b in 0..bins {
            // Bin mass from the claimed density: Simpson over the bin.
            let lo = -1.0 + b as f64 * width;
            let segs = 64;
            let step = width / segs as f64;
            let density_at = |a: f64| -> f64 {
                let a = a.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                log_prob_of_pre_squash(&head, &[a.atanh()]).exp()
            };
            let mut acc = density_at(lo) + density_at(lo + width);
            for k in 1..segs {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * density_at(lo + k as f64 * step);
            }
            let p_bin = acc * step / 3.0;
            if p_bin < 1e-4 {
                continue;
            }
            let expect = n as f64 * p_bin;
            let sigma = (n as f64 * p_bin * (1.0 - p_bin)).sqrt();
            assert!(
                ((counts[b] as f64) - expect).abs() <= 3.0 * sigma + 1e-4 * expect,
                "bin {b}: count {} expect {expect}",
                counts[b]
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn kl_zero_at_equal_params_and_closed_form_case() {
        let net = net_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&net.spec, &mut rng);
        let state = vec![0.1, 0.7];
        assert_eq!(kl(&net, &params, &params, &state).unwrap(), 0.0);

        let a = GaussianHead {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        let b = GaussianHead {
            mean: vec![1.0],
            log_std: vec![0.0],
        };
        assert!((kl_heads(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let net = net_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p1 = init_params(&net.spec, &mut rng);
            let p2 = init_params(&net.spec, &mut rng);
            let s = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            assert!(kl(&net, &p1, &p2, &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn hvp_zero_vector_and_psd() {
        let net = PolicyNet::new(3, vec![6], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(&net.spec, &mut rng);
        let states = random_states(&mut rng, 4, 3);
        let damping = 1e-2;
        let zero = ParamVector::zeros(net.param_count());
        let out = kl_hvp(&net, &params, &states, &zero, damping).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        for _ in 0..20 {
            let v = init_params(&net.spec, &mut rng);
            let hv = kl_hvp(&net, &params, &states, &v, damping).unwrap();
            let quad = dot(v.as_slice(), hv.as_slice());
            let vv = dot(v.as_slice(), v.as_slice());
            assert!(quad >= damping * vv - 1e-12);
        }
    }

    #[test]
    fn hvp_is_linear_in_v() {
        let net = PolicyNet::new(2, vec![5], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_params(&net.spec, &mut rng);
        let states = random_states(&mut rng, 3, 2);
        let kernel = FisherKernel::new(&net, &params, &states, 0.01).unwrap();
        let v1 = init_params(&net.spec, &mut rng);
        let v2 = init_params(&net.spec, &mut rng);
        let alpha = 1.7;
        let combo = ParamVector(
            v1.as_slice()
                .iter()
                .zip(v2.as_slice())
                .map(|(a, b)| alpha * a + b)
                .collect(),
        );
        let h_combo = kernel.apply(&combo).unwrap();
        let h1 = kernel.apply(&v1).unwrap();
        let h2 = kernel.apply(&v2).unwrap();
        for i in 0..h_combo.len() {
            let expect = alpha * h1.as_slice()[i] + h2.as_slice()[i];
            assert!((h_combo.as_slice()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn hvp_matches_double_finite_difference_of_kl() {
        // (Hv)_i = d^2/ds dt KL(psi || psi + s e_i + t v) at 0 by the
        // four-point cross difference; compares to the Gauss-Newton product.
        let net = PolicyNet::new(2, vec![4], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(&net.spec, &mut rng);
        let states = random_states(&mut rng, 3, 2);
        let v = init_params(&net.spec, &mut rng);
        let hv = kl_hvp(&net, &params, &states, &v, 0.0).unwrap();

        let mean_kl_at = |p: &ParamVector| -> f64 {
            states
                .iter()
                .map(|s| kl(&net, &params, p, s).unwrap())
                .sum::<f64>()
                / states.len() as f64
        };
        let h = 1e-4;
        let n = params.len();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let eval = |si: f64, ti: f64| {
                let mut p = params.clone();
                p.0[i] += si * h;
                for (pk, vk) in p.0.iter_mut().zip(v.as_slice()) {
                    *pk += ti * h * vk;
                }
                mean_kl_at(&p)
            };
            fd[i] = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h * h);
        }
        let rel = crate::oracles::finite_diff::rel_error(hv.as_slice(), &fd);
        assert!(rel < 1e-3, "rel error {rel}");
    }

    #[test]
    fn squashing_correction_identity() {
        // log_prob + sum log(1 - tanh^2) equals the raw Gaussian log-density.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let mean = rng.gen_range(-2.0..2.0);
            let log_std = rng.gen_range(-2.0..1.0);
            let pre = rng.gen_range(-4.0..4.0);
            let head = GaussianHead {
                mean: vec![mean],
                log_std: vec![log_std],
            };
            let lp = log_prob_of_pre_squash(&head, &[pre]);
            let std: f64 = log_std.exp();
            let z: f64 = (pre - mean) / std;
            let gauss = -0.9189385332046727 - log_std - 0.5 * z * z;
            let recon = lp + log_one_minus_tanh_sq(pre);
            assert!((recon - gauss).abs() < 1e-10);
        }
    }

    #[test]
    fn entropy_monotone_in_std_and_empty_batch_errors() {
        let net = net_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_params(&net.spec, &mut rng);
        let states = random_states(&mut rng, 64, 2);
        let noises: Vec<Vec<f64>> = (0..64)
            .map(|_| vec![rand_distr::StandardNormal.sample(&mut rng)])
            .collect();
        // The last bias entry of the output layer feeds the log-std head.
        let mut tight = params.clone();
        let n = tight.0.len();
        tight.0[n - 1] = -5.0;
        let mut wide = params.clone();
        wide.0[n - 1] = 0.0;
        let h_tight = entropy_estimate(&net, &tight, &states, &noises).unwrap();
        let h_wide = entropy_estimate(&net, &wide, &states, &noises).unwrap();
        assert!(h_tight < h_wide);
        assert!(entropy_estimate(&net, &params, &[], &[]).is_err());
    }

    #[test]
    fn entropy_estimate_matches_quadrature() {
        // Pre-squash N(0.2, 1); squashed entropy by Simpson quadrature:
        // H = H_gauss + E[log(1 - tanh^2 X)].
        let mean = 0.2;
        let h_gauss = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let m = 20_000;
        let lo = mean - 10.0;
        let hi = mean + 10.0;
        let step = (hi - lo) / m as f64;
        let mut acc = 0.0;
        for k in 0..=m {
            let x = lo + k as f64 * step;
            let w = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * normal::pdf(x - mean) * log_one_minus_tanh_sq(x);
        }
        let correction = acc * step / 3.0;
        let truth = h_gauss + correction;

        let head = GaussianHead {
            mean: vec![mean],
            log_std: vec![0.0],
        };
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let pre = mean + eps;
            let nl = -log_prob_of_pre_squash(&head, &[pre]);
            sum += nl;
            sum_sq += nl * nl;
        }
        let est = sum / n as f64;
        let var = (sum_sq / n as f64 - est * est).max(0.0);
        let stderr = (var / n as f64).sqrt();
        assert!(
            (est - truth).abs() <= 3.0 * stderr,
            "est {est} truth {truth} stderr {stderr}"
        );
    }
}
