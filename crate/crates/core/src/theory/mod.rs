//! Executable checks of the adaptation theory: total-variation policy drift
//! versus representation drift, existence of affine token corrections, and
//! optimal low-rank weight corrections.
//!
//! Policies here are discrete (factorized softmax heads over action bins) so
//! the total-variation distance is computed exactly by enumerating the joint
//! outcome space. `z` is always a mean-pooled token summary.

use serde::Serialize;

pub mod scenarios;

use crate::autodiff::{softmax, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::linalg::{cholesky_solve, svd, Svd};
use crate::params::{Binder, ParamStore};
use crate::policy::{self, PolicyConfig, PolicyInput};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{train, AdaptConfig, TrainReport};

/// Slack on empirical bound checks.
pub const BOUND_SLACK: f64 = 0.05;
/// Ridge added when the normal equations are singular.
pub const RIDGE: f64 = 1e-9;
const DIST_TOL: f64 = 1e-9;

/// `½ Σ |pᵢ − qᵢ|` for probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(contract_err!("tv_distance of lengths {} and {}", p.len(), q.len()));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if v.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > DIST_TOL {
            return Err(contract_err!("not a probability vector (sum {s})"));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Anything mapping a token summary to a distribution over actions.
pub trait TokenPolicy {
    fn distribution(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn distributions(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        zs.iter().map(|z| self.distribution(z)).collect()
    }
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> TokenPolicy for F {
    fn distribution(&self, z: &[f64]) -> Result<Vec<f64>> {
        self(z)
    }
}

/// The action expert read through its discrete head. The token summary `z`
/// is the whole visual prefix (one token); state and task are held fixed.
/// The distribution is the exact joint over the bins of the first executed
/// action (`bins^action_dim` outcomes, first dimension slowest).
#[derive(Clone, Debug)]
pub struct DiscretePolicy {
    pub config: PolicyConfig,
    pub width: usize,
    pub params: ParamStore,
    pub state: Vec<f64>,
}

impl DiscretePolicy {
    pub fn new(mut config: PolicyConfig, width: usize, state: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        config.discrete = true;
        if state.len() != config.state_dim {
            return Err(shape_err!("state of length {} for state_dim {}", state.len(), config.state_dim));
        }
        let params = policy::init_params(&config, width, rng)?;
        Ok(Self {
            config,
            width,
            params,
            state,
        })
    }

    /// Logits `(B · H · d_a) × bins` for a batch of summaries.
    fn logits_on_tape(&self, tape: &mut Tape, binder: &mut Binder, zs: &[Vec<f64>]) -> Result<Var> {
        let b = zs.len();
        let cfg = &self.config;
        if zs.iter().any(|z| z.len() != self.width) {
            return Err(shape_err!("token summaries must have width {}", self.width));
        }
        let visual = tape.constant(Tensor::new(&[b, self.width], zs.concat())?)?;
        let states = Tensor::new(&[b, cfg.state_dim], self.state.repeat(b))?;
        let tasks = vec![0; b];
        let noisy = Tensor::zeros(&[b * cfg.horizon, cfg.action_dim]);
        let taus = vec![0.5; b];
        // Discrete logits are read in the prefix, which never sees these inputs.
        let bins = vec![0; b * cfg.n_discrete_tokens()];
        let input = PolicyInput {
            visual,
            n_visual: 1,
            tasks: &tasks,
            states: &states,
            noisy_actions: &noisy,
            taus: &taus,
            discrete_bins: Some(&bins),
        };
        let out = policy::forward(tape, binder, cfg, self.width, &input)?;
        out.discrete_logits
            .ok_or_else(|| contract_err!("discrete head missing from policy output"))
    }

    /// Per-factor probabilities of the first action, one vector per action
    /// dimension, for each summary.
    pub fn factor_probs(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let frozen = |_: &str| false;
        let mut binder = Binder::new(&self.params, &frozen);
        let mut tape = Tape::new();
        let l = self.logits_on_tape(&mut tape, &mut binder, zs)?;
        let logits = tape.value(l);
        let nd = self.config.n_discrete_tokens();
        Ok((0..zs.len())
            .map(|s| (0..self.config.action_dim).map(|f| softmax(logits.row(s * nd + f))).collect())
            .collect())
    }

    /// Behavior cloning on `(z, bins)` pairs, `bins` holding all `H · d_a`
    /// discrete targets per sample.
    pub fn fit(&mut self, zs: &[Vec<f64>], bins: &[Vec<usize>], cfg: &AdaptConfig) -> Result<TrainReport> {
        let nd = self.config.n_discrete_tokens();
        if zs.len() != bins.len() || zs.is_empty() || bins.iter().any(|b| b.len() != nd) {
            return Err(shape_err!("{} summaries vs {} bin rows of length {nd}", zs.len(), bins.len()));
        }
        let flat: Vec<usize> = bins.concat();
        let mut params = std::mem::take(&mut self.params);
        let view = self.clone();
        let result = train(&mut params, &|_| true, cfg, |tape, binder, _| {
            let l = view.logits_on_tape(tape, binder, zs)?;
            tape.cross_entropy(l, &flat)
        });
        self.params = params;
        result
    }
}

fn joint(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for p in factors {
        out = out.iter().flat_map(|a| p.iter().map(move |b| a * b)).collect();
    }
    out
}

impl TokenPolicy for DiscretePolicy {
    fn distribution(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(joint(&self.factor_probs(&[z.to_vec()])?[0]))
    }

    fn distributions(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(256) {
            out.extend(self.factor_probs(chunk)?.iter().map(|f| joint(f)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzEstimate {
    pub l_hat: f64,
    pub pairs_used: usize,
    /// Indices of the maximizing pair in the combined candidate list.
    pub max_pair: Option<(usize, usize)>,
}

/// Empirical Lipschitz constant: max `d_TV / ‖z − z'‖` over `n_pairs` random
/// pairs of `samples`, one `(z, z + δ)` pair per sample with `‖δ‖ = delta`,
/// and any `extra_pairs`. Pairs closer than 1e-12 are skipped.
pub fn estimate_lipschitz(
    policy: &dyn TokenPolicy,
    samples: &[Vec<f64>],
    extra_pairs: &[(Vec<f64>, Vec<f64>)],
    n_pairs: usize,
    delta: f64,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(contract_err!("estimate_lipschitz needs at least two samples"));
    }
    // Candidate points: samples, their δ-neighbours, then the extra pairs.
    let mut points: Vec<Vec<f64>> = samples.to_vec();
    let mut pairs: Vec<(usize, usize)> = (0..n_pairs).map(|_| (rng.below(n), rng.below(n))).collect();
    if delta > 0.0 {
        for (i, z) in samples.iter().enumerate() {
            let dir = rng.gaussian(&[z.len()], 1.0);
            let norm = dir.frobenius_norm();
            if norm < 1e-12 {
                continue;
            }
            points.push(z.iter().zip(dir.data()).map(|(a, b)| a + delta * b / norm).collect());
            pairs.push((i, points.len() - 1));
        }
    }
    for (a, b) in extra_pairs {
        points.push(a.clone());
        points.push(b.clone());
        pairs.push((points.len() - 2, points.len() - 1));
    }
    let dists = policy.distributions(&points)?;
    let mut best = LipschitzEstimate {
        l_hat: 0.0,
        pairs_used: 0,
        max_pair: None,
    };
    for (i, j) in pairs {
        let d = dist(&points[i], &points[j]);
        if d < 1e-12 {
            continue;
        }
        best.pairs_used += 1;
        let r = tv_distance(&dists[i], &dists[j])? / d;
        if r > best.l_hat {
            best.l_hat = r;
            best.max_pair = Some((i, j));
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct Bound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftBoundReport {
    pub mean_tv: f64,
    pub mean_drift: f64,
    pub l_hat: f64,
    pub bound: Bound,
    /// Largest `d_TV − L̂‖z − z*‖` over samples (positive means that sample
    /// alone exceeds the bound).
    pub worst_violation: f64,
    /// `E‖z − z*‖ ≤ sqrt(E‖z − z*‖²)`.
    pub jensen_holds: bool,
}

/// Compares mean `d_TV(g(z), g(z*))` with `L̂ · E‖z − z*‖ · (1 + slack)`.
pub fn check_drift_bound(
    policy: &dyn TokenPolicy,
    z_t: &[Vec<f64>],
    z_star: &[f64],
    l_hat: f64,
    slack: f64,
) -> Result<DriftBoundReport> {
    if z_t.is_empty() {
        return Err(contract_err!("check_drift_bound needs samples"));
    }
    let p_star = policy.distribution(z_star)?;
    let p_t = policy.distributions(z_t)?;
    let mut tv_sum = 0.0;
    let mut drift_sum = 0.0;
    let mut drift_sq = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for (z, p) in z_t.iter().zip(&p_t) {
        let tv = tv_distance(p, &p_star)?;
        let d = dist(z, z_star);
        tv_sum += tv;
        drift_sum += d;
        drift_sq += d * d;
        worst = worst.max(tv - l_hat * d);
    }
    let n = z_t.len() as f64;
    let mean_tv = tv_sum / n;
    let mean_drift = drift_sum / n;
    let rhs = l_hat * mean_drift * (1.0 + slack);
    Ok(DriftBoundReport {
        mean_tv,
        mean_drift,
        l_hat,
        bound: Bound {
            lhs: mean_tv,
            rhs,
            holds: mean_tv <= rhs,
        },
        worst_violation: worst,
        jensen_holds: mean_drift <= (drift_sq / n).sqrt() + 1e-15,
    })
}

/// `A(z) = M z + b`.
#[derive(Clone, Debug, Serialize)]
pub struct AffineCorrection {
    /// `D × D`, diagonal in FTM mode.
    pub m: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub diagonal: bool,
}

impl AffineCorrection {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(z).map(|(m, x)| m * x).sum::<f64>() + b)
            .collect()
    }

    /// FTM parameters `(γ, β)` with `1 + γ = diag(M)`.
    pub fn as_ftm(&self) -> (Vec<f64>, Vec<f64>) {
        let gamma = (0..self.b.len()).map(|i| self.m[i][i] - 1.0).collect();
        (gamma, self.b.clone())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AffineFit {
    pub correction: AffineCorrection,
    /// Root-mean-square residual norm `sqrt(E‖A(z_t) − z_s‖²)`.
    pub epsilon: f64,
    /// Mean squared residual per coordinate, the units of the FTM training loss.
    pub mse: f64,
    pub ridge_used: bool,
}

fn residual_stats(corr: &AffineCorrection, z_t: &[Vec<f64>], z_s: &[Vec<f64>]) -> (f64, f64) {
    let mut sq = 0.0;
    for (t, s) in z_t.iter().zip(z_s) {
        let a = corr.apply(t);
        sq += a.iter().zip(s).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    let n = z_t.len() as f64;
    let d = z_t[0].len() as f64;
    ((sq / n).sqrt(), sq / (n * d))
}

/// Closed-form least-squares fit of `M z_t + b ≈ z_s`.
pub fn fit_affine_oracle(z_t: &[Vec<f64>], z_s: &[Vec<f64>], diagonal_only: bool) -> Result<AffineFit> {
    if z_t.len() != z_s.len() || z_t.is_empty() {
        return Err(shape_err!("fit_affine_oracle: {} vs {} samples", z_t.len(), z_s.len()));
    }
    let d = z_t[0].len();
    if z_t.iter().chain(z_s).any(|z| z.len() != d) {
        return Err(shape_err!("fit_affine_oracle: ragged samples"));
    }
    let n = z_t.len() as f64;
    let mut ridge_used = false;
    let correction = if diagonal_only {
        let mut m = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for j in 0..d {
            let mx = z_t.iter().map(|z| z[j]).sum::<f64>() / n;
            let my = z_s.iter().map(|z| z[j]).sum::<f64>() / n;
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for (x, y) in z_t.iter().zip(z_s) {
                sxx += (x[j] - mx) * (x[j] - mx);
                sxy += (x[j] - mx) * (y[j] - my);
            }
            let slope = if sxx > 1e-300 {
                sxy / sxx
            } else {
                ridge_used = true;
                sxy / (sxx + RIDGE)
            };
            m[j][j] = slope;
            b[j] = my - slope * mx;
        }
        AffineCorrection { m, b, diagonal: true }
    } else {
        // Augmented design [z_t, 1]; normal equations XᵀX W = XᵀY.
        let k = d + 1;
        let mut xtx = Tensor::zeros(&[k, k]);
        let mut xty = Tensor::zeros(&[k, d]);
        for (x, y) in z_t.iter().zip(z_s) {
            let xa: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..k {
                for j in 0..k {
                    let v = xtx.get2(i, j) + xa[i] * xa[j];
                    xtx.set2(i, j, v);
                }
                for j in 0..d {
                    let v = xty.get2(i, j) + xa[i] * y[j];
                    xty.set2(i, j, v);
                }
            }
        }
        let w = match cholesky_solve(&xtx, &xty)? {
            Some(w) => w,
            None => {
                ridge_used = true;
                let mut r = xtx.clone();
                for i in 0..k {
                    let v = r.get2(i, i) + RIDGE;
                    r.set2(i, i, v);
                }
                cholesky_solve(&r, &xty)?.ok_or_else(|| contract_err!("normal equations singular even with ridge"))?
            }
        };
        let m = (0..d).map(|o| (0..d).map(|i| w.get2(i, o)).collect()).collect();
        let b = (0..d).map(|o| w.get2(d, o)).collect();
        AffineCorrection { m, b, diagonal: false }
    };
    let (epsilon, mse) = residual_stats(&correction, z_t, z_s);
    Ok(AffineFit {
        correction,
        epsilon,
        mse,
        ridge_used,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AffineRecoveryReport {
    pub epsilon: f64,
    pub mean_tv_before: f64,
    pub mean_tv_after: f64,
    pub max_tv_after: f64,
    pub l_hat: f64,
    pub bound: Bound,
    pub jensen_holds: bool,
}

/// Fits a diagonal correction to `z_t = M₀ z_s + b₀` and measures the policy
/// shift between corrected target tokens and their paired source tokens.
pub fn verify_affine_recovery(
    policy: &dyn TokenPolicy,
    z_s: &[Vec<f64>],
    m0: &[f64],
    b0: &[f64],
    l_hat: f64,
) -> Result<(AffineRecoveryReport, AffineFit)> {
    let z_t: Vec<Vec<f64>> = z_s
        .iter()
        .map(|z| z.iter().zip(m0).zip(b0).map(|((x, m), b)| m * x + b).collect())
        .collect();
    let fit = fit_affine_oracle(&z_t, z_s, true)?;
    let mut before = 0.0;
    let mut after = 0.0;
    let mut max_after: f64 = 0.0;
    let mut res = 0.0;
    let mut res_sq = 0.0;
    let corrected: Vec<Vec<f64>> = z_t.iter().map(|t| fit.correction.apply(t)).collect();
    let p_s = policy.distributions(z_s)?;
    let p_t = policy.distributions(&z_t)?;
    let p_c = policy.distributions(&corrected)?;
    for i in 0..z_s.len() {
        before += tv_distance(&p_t[i], &p_s[i])?;
        let tv = tv_distance(&p_c[i], &p_s[i])?;
        after += tv;
        max_after = max_after.max(tv);
        let r = dist(&corrected[i], &z_s[i]);
        res += r;
        res_sq += r * r;
    }
    let n = z_s.len() as f64;
    let rhs = l_hat * fit.epsilon * (1.0 + BOUND_SLACK);
    let report = AffineRecoveryReport {
        epsilon: fit.epsilon,
        mean_tv_before: before / n,
        mean_tv_after: after / n,
        max_tv_after: max_after,
        l_hat,
        bound: Bound {
            lhs: after / n,
            rhs,
            holds: after / n <= rhs + 1e-12,
        },
        jensen_holds: res / n <= (res_sq / n).sqrt() + 1e-15,
    };
    Ok((report, fit))
}

/// Gradient-trained FTM on the pairs `(z_t, z_s)`; returns the training
/// report whose losses are in the oracle's `mse` units.
pub fn train_ftm(z_t: &[Vec<f64>], z_s: &[Vec<f64>], cfg: &AdaptConfig) -> Result<(Vec<f64>, Vec<f64>, TrainReport)> {
    let d = z_t[0].len();
    let xt = Tensor::new(&[z_t.len(), d], z_t.concat())?;
    let ys = Tensor::new(&[z_s.len(), d], z_s.concat())?;
    let mut params = crate::adapters::ftm_params(d);
    let report = train(&mut params, &crate::params::is_adapter_param, cfg, |tape, binder, _| {
        let x = tape.constant(xt.clone())?;
        let y = tape.constant(ys.clone())?;
        let out = crate::adapters::apply_ftm(tape, binder, x)?;
        tape.mse(out, y)
    })?;
    let gamma = params.get(crate::adapters::FTM_GAMMA)?.data().to_vec();
    let beta = params.get(crate::adapters::FTM_BETA)?.data().to_vec();
    Ok((gamma, beta, report))
}

/// Learning-rate preset for the small closed-form regression problems.
pub fn toy_train_config(steps: usize, seed: u64) -> AdaptConfig {
    AdaptConfig {
        steps,
        warmup_steps: 100.min(steps),
        decay_steps: steps.max(100),
        peak_lr: 1e-2,
        min_lr: 1e-4,
        seed,
        ..AdaptConfig::ftm_reference()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    pub sigma: Vec<f64>,
    /// `tail_energies[r] = Σ_{i>r} σᵢ²` for `r = 0..=k`.
    pub tail_energies: Vec<f64>,
    /// Measured `‖ΔW* − ΔW_r‖²_F` for the same ranks.
    pub errors: Vec<f64>,
    pub max_gap: f64,
    /// No sampled rank-r competitor had a smaller error.
    pub optimal: bool,
}

/// Checks the truncated SVD against the tail energy for every rank and
/// against `trials` random rank-`r` competitors per rank.
pub fn verify_eckart_young(m: &Tensor, trials: usize, rng: &mut Rng) -> Result<SpectrumReport> {
    let s: Svd = svd(m)?;
    let k = s.sigma.len();
    let (p, q) = m.dims2();
    let mut tails = Vec::with_capacity(k + 1);
    let mut errors = Vec::with_capacity(k + 1);
    let mut max_gap: f64 = 0.0;
    let mut optimal = true;
    for r in 0..=k {
        let approx = s.reconstruct_rank(r);
        let err = m.sub(&approx)?.data().iter().map(|x| x * x).sum::<f64>();
        let tail = s.tail_energy(r);
        max_gap = max_gap.max((err - tail).abs());
        tails.push(tail);
        errors.push(err);
        if r == 0 || r == k {
            continue;
        }
        for t in 0..trials {
            let cand = if t % 2 == 0 {
                let a = rng.gaussian(&[p, r], 1.0);
                let b = rng.gaussian(&[r, q], 1.0);
                let c = a.matmul(&b)?;
                // Best scalar multiple of the random rank-r matrix.
                let num: f64 = c.data().iter().zip(m.data()).map(|(x, y)| x * y).sum();
                let den: f64 = c.data().iter().map(|x| x * x).sum();
                c.scale(if den > 0.0 { num / den } else { 0.0 })
            } else {
                // Small perturbation of the optimal factors stays rank r.
                let mut u = Tensor::zeros(&[p, r]);
                let mut v = Tensor::zeros(&[r, q]);
                for i in 0..p {
                    for c in 0..r {
                        u.set2(i, c, s.u.get2(i, c) * s.sigma[c] + 1e-3 * rng.normal());
                    }
                }
                for c in 0..r {
                    for j in 0..q {
                        v.set2(c, j, s.v.get2(j, c) + 1e-3 * rng.normal());
                    }
                }
                u.matmul(&v)?
            };
            let e = m.sub(&cand)?.data().iter().map(|x| x * x).sum::<f64>();
            if e < err - 1e-12 {
                optimal = false;
            }
        }
    }
    Ok(SpectrumReport {
        sigma: s.sigma,
        tail_energies: tails,
        errors,
        max_gap,
        optimal,
    })
}

/// `U diag(sigma) Vᵀ` with Haar-like random orthonormal factors.
pub fn planted_matrix(rows: usize, cols: usize, sigma: &[f64], rng: &mut Rng) -> Result<Tensor> {
    let k = sigma.len();
    if k > rows.min(cols) {
        return Err(contract_err!("{k} singular values do not fit a {rows}x{cols} matrix"));
    }
    let u = svd(&rng.gaussian(&[rows, k], 1.0))?.u;
    let v = svd(&rng.gaussian(&[cols, k], 1.0))?.u;
    let mut us = u.clone();
    for i in 0..rows {
        for c in 0..k {
            us.set2(i, c, u.get2(i, c) * sigma[c]);
        }
    }
    us.matmul(&v.transpose())
}

#[derive(Clone, Debug, Serialize)]
pub struct RankRow {
    pub rank: usize,
    pub closed_form_error: f64,
    pub trained_error: f64,
    pub trainable_params: usize,
}

/// Fits `B A ≈ ΔW*` by gradient descent from the low-rank adapter init
/// (`A ~ N(0, 0.02²)`, `B = 0`) and compares with the truncated-SVD optimum.
/// The loss is `‖ΔW* − B A‖²_F`, i.e. the layer's output error on an
/// identity probe batch.
pub fn fla_rank_sweep(delta_w: &Tensor, ranks: &[usize], cfg: &AdaptConfig) -> Result<Vec<RankRow>> {
    let s = svd(delta_w)?;
    let (d_out, d_in) = delta_w.dims2();
    let mut rows = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let linears = vec![("probe".to_string(), d_in, d_out)];
        let mut rng = Rng::with_stream(cfg.seed, r as u64);
        let mut params = crate::adapters::lora_params(&linears, r, &mut rng)?;
        let target = delta_w.clone();
        let report = train(&mut params, &crate::params::is_adapter_param, cfg, |tape, binder, _| {
            let a = binder.get(tape, "adapter/probe.lora_a")?;
            let b = binder.get(tape, "adapter/probe.lora_b")?;
            let ba = tape.matmul(b, a)?;
            let t = tape.constant(target.clone())?;
            let diff = tape.sub(ba, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.sum(sq)
        })?;
        let a = params.get("adapter/probe.lora_a")?;
        let b = params.get("adapter/probe.lora_b")?;
        let fitted = b.matmul(a)?;
        let trained_error = delta_w.sub(&fitted)?.data().iter().map(|x| x * x).sum::<f64>();
        drop(report);
        rows.push(RankRow {
            rank: r,
            closed_form_error: s.tail_energy(r),
            trained_error,
            trainable_params: crate::adapters::fla_param_count(&linears, r),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftMetrics {
    pub mean_to_mean_before: f64,
    pub mean_to_mean_after: f64,
    pub nn_before: f64,
    pub nn_after: f64,
    /// `mean_to_mean_after / mean_to_mean_before` (0 when both vanish).
    pub ratio: f64,
}

fn mean_vec(z: &[Vec<f64>]) -> Vec<f64> {
    let d = z[0].len();
    let mut m = vec![0.0; d];
    for v in z {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= z.len() as f64);
    m
}

fn mean_nn(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Quantifies how far target embeddings sit from the source cloud, before and
/// after adaptation.
pub fn embedding_drift_report(z_s: &[Vec<f64>], z_t: &[Vec<f64>], z_t_adapted: &[Vec<f64>]) -> Result<DriftMetrics> {
    if z_s.is_empty() || z_t.is_empty() || z_t_adapted.is_empty() {
        return Err(contract_err!("embedding_drift_report needs non-empty sets"));
    }
    let ms = mean_vec(z_s);
    let before = dist(&mean_vec(z_t), &ms);
    let after = dist(&mean_vec(z_t_adapted), &ms);
    Ok(DriftMetrics {
        mean_to_mean_before: before,
        mean_to_mean_after: after,
        nn_before: mean_nn(z_t, z_s),
        nn_after: mean_nn(z_t_adapted, z_s),
        ratio: if before > 0.0 { after / before } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.25);
        assert!(tv_distance(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(tv_distance(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn eckart_young_diagonal() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let rep = verify_eckart_young(&m, 10, &mut Rng::new(0)).unwrap();
        assert_eq!(rep.errors[2], 1.0);
        assert!(rep.errors[3] < 1e-24);
        assert!(rep.optimal);
    }

    #[test]
    fn affine_examples() {
        let mut rng = Rng::new(2);
        let z_s: Vec<Vec<f64>> = (0..20).map(|_| rng.gaussian(&[3], 1.0).into_data()).collect();
        let z_t: Vec<Vec<f64>> = z_s.iter().map(|z| z.iter().map(|x| 2.0 * x + 1.0).collect()).collect();
        let fit = fit_affine_oracle(&z_t, &z_s, true).unwrap();
        for j in 0..3 {
            assert!((fit.correction.m[j][j] - 0.5).abs() < 1e-12);
            assert!((fit.correction.b[j] + 0.5).abs() < 1e-12);
        }
        assert!(fit.epsilon < 1e-10);
        let same = fit_affine_oracle(&z_s, &z_s, false).unwrap();
        assert!(same.epsilon < 1e-10);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((same.correction.m[i][j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn drift_report_shift() {
        let z_s = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let z_t: Vec<Vec<f64>> = z_s.iter().map(|z| vec![z[0] + 3.0, z[1] + 4.0]).collect();
        let rep = embedding_drift_report(&z_s, &z_t, &z_s).unwrap();
        assert!((rep.mean_to_mean_before - 5.0).abs() < 1e-12);
        assert_eq!(rep.mean_to_mean_after, 0.0);
        assert_eq!(rep.ratio, 0.0);
    }
}
