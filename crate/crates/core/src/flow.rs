//! Coupled actor–critic dynamics: timescale schedules, the continuous flow
//! (RK4 and exponential Euler) and the discrete two-timescale scheme.
//!
//! The continuous integrators evolve an unnormalised log-density `u` with
//! `du/dt = −(Q_θ + τu)`; the policy is `ℓ = u − ln Σ_a μ e^u`, so the
//! per-state offset of `u` never enters any diagnostic.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actor::{advantage_from_q, approx_advantage, density_rate, mirror_descent_step};
use crate::analysis::dtheta_pi_dt_with;
use crate::critic::{best_parameters_with, gram_data, linear_system, q_of_theta, GramData};
use crate::dp::{optimality_gap, solve_optimal, OptimalSolution, FIXED_POINT_TOL};
use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, FiniteMdp, Policy};
use crate::scalar::{flatten_sa, lit, to_f64, unflatten_sa, Scalar};

/// Default guard on `|θ|`.
pub const THETA_GUARD: f64 = 1e6;
/// Default guard on `K_t`.
pub const KL_GUARD: f64 = 1e4;

/// Critic/actor speed ratio `η_t ≥ 1`, non-decreasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimescaleSchedule {
    Constant { eta0: f64 },
    /// `η_t = η₀ e^{k₁ t}`.
    Exponential { eta0: f64, k1: f64 },
    /// `η_t = t^p + η₀`.
    Polynomial { eta0: f64, p: f64 },
}

impl TimescaleSchedule {
    pub fn validate(&self) -> Result<()> {
        let eta0 = self.eta0();
        if !(eta0 >= 1.0 && eta0.is_finite()) {
            return Err(Error::BadSchedule(format!("eta0 = {eta0} must be finite and >= 1")));
        }
        match *self {
            Self::Constant { .. } => Ok(()),
            Self::Exponential { k1, .. } => {
                if k1 >= 0.0 && k1.is_finite() {
                    Ok(())
                } else {
                    Err(Error::BadSchedule(format!("k1 = {k1} must be finite and >= 0")))
                }
            }
            Self::Polynomial { p, .. } => {
                if p > 0.0 && p <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::BadSchedule(format!("p = {p} must lie in (0, 1]")))
                }
            }
        }
    }

    pub fn eta0(&self) -> f64 {
        match *self {
            Self::Constant { eta0 } | Self::Exponential { eta0, .. } | Self::Polynomial { eta0, .. } => eta0,
        }
    }

    pub fn eta(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { eta0 } => eta0,
            Self::Exponential { eta0, k1 } => eta0 * (k1 * t).exp(),
            Self::Polynomial { eta0, p } => t.max(0.0).powf(p) + eta0,
        }
    }

    /// `∫_{t0}^{t1} η_r dr`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match *self {
            Self::Constant { eta0 } => eta0 * (t1 - t0),
            Self::Exponential { eta0, k1 } => {
                if k1 == 0.0 {
                    eta0 * (t1 - t0)
                } else {
                    eta0 * (k1 * t0).exp() * (k1 * (t1 - t0)).exp_m1() / k1
                }
            }
            Self::Polynomial { eta0, p } => {
                let q = p + 1.0;
                (t1.max(0.0).powf(q) - t0.max(0.0).powf(q)) / q + eta0 * (t1 - t0)
            }
        }
    }

    /// Smallest `α` with `dη/dt ≤ α η` on `[0, ∞)`.
    pub fn growth_rate(&self) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Exponential { k1, .. } => k1,
            // p t^{p−1} / (t^p + η₀) is unbounded at 0 for p < 1
            Self::Polynomial { p, .. } => {
                if p == 1.0 {
                    1.0 / self.eta0()
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

/// Coupled state `(t, θ, π)`.
#[derive(Debug, Clone)]
pub struct FlowState<T: Scalar> {
    pub t: f64,
    pub theta: DVector<T>,
    pub policy: Policy<T>,
}

/// `(dθ/dt, dℓ/dt) = (−η_t g(θ,π), −A(·;θ))`.
pub fn flow_rhs<T: Scalar>(
    state: &FlowState<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    schedule: &TimescaleSchedule,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let g = crate::critic::semi_gradient(&state.theta, &state.policy, mdp, features)?;
    let eta: T = lit(schedule.eta(state.t));
    let adv = approx_advantage(&state.theta, &state.policy, mdp, features)?;
    Ok((-g * eta, -adv.a))
}

/// Model data shared by every step and snapshot of a run.
#[derive(Debug, Clone)]
pub struct FlowContext<T: Scalar> {
    pub mdp: FiniteMdp<T>,
    pub features: FeatureMap<T>,
    pub gram: GramData<T>,
    pub optimum: OptimalSolution<T>,
}

impl<T: Scalar> FlowContext<T> {
    pub fn new(mdp: FiniteMdp<T>, features: FeatureMap<T>) -> Result<Self> {
        let gram = gram_data(&mdp, &features)?;
        let optimum = solve_optimal(&mdp, lit(FIXED_POINT_TOL))?;
        Ok(Self {
            mdp,
            features,
            gram,
            optimum,
        })
    }

    /// `(θ_{π*}, π*)`; the critic part is the β-least-squares fit of `Q*`.
    pub fn equilibrium(&self) -> FlowState<T> {
        let (theta, _) = crate::critic::fit_table(&self.optimum.q, &self.mdp, &self.features, &self.gram);
        FlowState {
            t: 0.0,
            theta,
            policy: self.optimum.policy.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4,
    ExponentialEuler,
}

/// Per-snapshot diagnostics, all in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub theta_norm: f64,
    /// `K_t = max_s KL(π_t(·|s)|μ)`.
    pub k_t: f64,
    pub v_rho: f64,
    /// `V^{π_t}(ρ) − V*(ρ)`.
    pub gap: f64,
    /// `|θ_t − θ_{π_t}|`.
    pub theta_err: f64,
    pub msbe: f64,
    /// `(2η_t)^{-1} d|θ|²/dt = −⟨θ, g⟩`.
    pub drift_lhs: f64,
    /// `−Γ|θ|²/2 + τ²γ²K²/Γ + |c|²/Γ`.
    pub drift_rhs: f64,
    pub eta: f64,
    /// `|Q_{θ_t}|_∞`.
    pub q_theta_sup: f64,
    /// `|Q^{π_t}_τ|_∞`.
    pub q_pi_sup: f64,
    /// `|A(·;θ_t)|_∞` under `π_t`.
    pub adv_sup: f64,
    /// `|A^{π_t}_τ|_∞`.
    pub exact_adv_sup: f64,
    /// `|ln dπ_t/dμ|_∞`.
    pub log_density_sup: f64,
    /// `|dθ_{π_t}/dt|` along the actual policy motion.
    pub dtheta_pi_norm: f64,
    /// Bound on `|dθ_{π_t}/dt|` from `|A|_∞` and `max_s Σ_a |∂_t π|`.
    pub dtheta_pi_bound: f64,
    /// Fit residual of `Q^{π_t}_τ` by the features.
    pub realisability: f64,
    pub normalisation: f64,
    /// `KL(π*|π_t)` integrated against `d^{π*}_ρ`.
    pub kl_opt_weighted: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot<T: Scalar> {
    pub t: f64,
    pub theta: DVector<T>,
    pub log_density: DMatrix<T>,
    pub diag: Diagnostics,
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub snapshots: Vec<Snapshot<T>>,
    pub steps: usize,
}

impl<T: Scalar> Trajectory<T> {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn series(&self, f: impl Fn(&Diagnostics) -> f64) -> Vec<f64> {
        self.snapshots.iter().map(|s| f(&s.diag)).collect()
    }

    pub fn last(&self) -> &Snapshot<T> {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }
}

/// Diagnostics of `(θ, π)` at clock `t` with speed ratio `eta`.
pub fn diagnose<T: Scalar>(ctx: &FlowContext<T>, theta: &DVector<T>, pi: &Policy<T>, eta: f64) -> Result<Diagnostics> {
    let mdp = &ctx.mdp;
    let tau = mdp.tau();
    let gm = mdp.gamma();
    let gc = ctx.gram.gamma_const;
    let sys = linear_system(pi, mdp, &ctx.features)?;
    let g = sys.gradient(theta);
    let best = best_parameters_with(pi, mdp, &ctx.features, &ctx.gram)?;
    let q_theta = q_of_theta(theta, &ctx.features, mdp)?;
    let k_t = pi.max_kl(mdp.mu());
    let theta_sq = theta.norm_squared();
    let c_inf = mdp.cost_sup();

    // Bellman residual of the critic, weighted by d^π_β
    let delta = crate::scalar::flatten_sa(&(&q_theta - crate::dp::bellman_apply(&q_theta, pi, mdp)?));
    let msbe = sys.occupancy.dot(&delta.component_mul(&delta)) * lit(0.5);

    let adv = advantage_from_q(&q_theta, pi, tau);
    let exact_adv = advantage_from_q(&best.values.q, pi, tau);
    let dpi = density_rate(&adv, pi);
    let (dtheta_pi, bound) = dtheta_pi_dt_with(pi, &dpi, &exact_adv, mdp, &ctx.features, &ctx.gram)?;

    let opt = &ctx.optimum;
    let d_star = crate::occupancy::state_occupancy_kernel(&opt.policy, mdp)?.transpose() * mdp.rho();
    let kl_opt = d_star.dot(&opt.policy.kl_to(pi));

    Ok(Diagnostics {
        theta_norm: to_f64(theta_sq.sqrt()),
        k_t: to_f64(k_t),
        v_rho: to_f64(best.values.value_at(mdp.rho())),
        gap: to_f64(optimality_gap(pi, &opt.policy, mdp)?),
        theta_err: to_f64((theta - &best.theta).norm()),
        msbe: to_f64(msbe),
        drift_lhs: to_f64(-theta.dot(&g)),
        drift_rhs: to_f64(
            -gc * theta_sq * lit(0.5) + tau * tau * gm * gm * k_t * k_t / gc + c_inf * c_inf / gc,
        ),
        eta,
        q_theta_sup: to_f64(q_theta.amax()),
        q_pi_sup: to_f64(best.values.q.amax()),
        adv_sup: to_f64(adv.sup_norm()),
        exact_adv_sup: to_f64(exact_adv.sup_norm()),
        log_density_sup: to_f64(pi.log_density().amax()),
        dtheta_pi_norm: to_f64(dtheta_pi.norm()),
        dtheta_pi_bound: to_f64(bound),
        realisability: to_f64(best.residual),
        normalisation: to_f64(pi.normalisation_residual(mdp.mu())),
        kl_opt_weighted: to_f64(kl_opt),
    })
}

/// Settings for [`integrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub method: Method,
    pub dt: f64,
    pub t_end: f64,
    /// Strictly increasing snapshot times in `[0, t_end]`.
    pub output_times: Vec<f64>,
    pub theta_guard: f64,
    pub kl_guard: f64,
}

impl IntegrateOptions {
    /// Uniform grid `0, Δ, 2Δ, …, t_end`.
    pub fn uniform(method: Method, dt: f64, t_end: f64, n_out: usize) -> Self {
        Self {
            method,
            dt,
            t_end,
            output_times: uniform_grid(t_end, n_out),
            theta_guard: THETA_GUARD,
            kl_guard: KL_GUARD,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::BadIntegration(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::BadIntegration(format!("t_end = {} must be positive", self.t_end)));
        }
        if self.output_times.is_empty() {
            return Err(Error::BadIntegration("no output times".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for &t in &self.output_times {
            if !(t > prev) || t < 0.0 || t > self.t_end * (1.0 + 1e-12) {
                return Err(Error::BadIntegration(format!(
                    "output times must be strictly increasing in [0, t_end]; offending value {t}"
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

/// `n_out + 1` equally spaced points on `[0, t_end]`.
pub fn uniform_grid(t_end: f64, n_out: usize) -> Vec<f64> {
    let n = n_out.max(1);
    (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
}

/// Uniform grid merged with `per_decade` log-spaced points from `t_first` to
/// `t_end`, so that fast initial transients are resolved.
pub fn graded_grid(t_end: f64, n_out: usize, t_first: f64, per_decade: usize) -> Vec<f64> {
    let mut ts = uniform_grid(t_end, n_out);
    if t_first > 0.0 && t_first < t_end && per_decade > 0 {
        let decades = (t_end / t_first).log10();
        let n = (decades * per_decade as f64).ceil() as usize;
        ts.extend((0..n).map(|k| t_first * 10f64.powf(k as f64 / per_decade as f64)));
    }
    ts.sort_by(f64::total_cmp);
    let tol = 1e-9 * t_end;
    let mut out: Vec<f64> = Vec::with_capacity(ts.len());
    for t in ts {
        if out.last().is_none_or(|&p| t - p > tol) {
            out.push(t);
        }
    }
    out
}

/// Default step `10⁻³ min(1, 1/η(t_end))`.
pub fn default_dt(schedule: &TimescaleSchedule, t_end: f64) -> f64 {
    1e-3 * (1.0 / schedule.eta(t_end)).min(1.0)
}

/// Integrator state: `θ` and the unnormalised log-density `u`.
struct Raw<T: Scalar> {
    theta: DVector<T>,
    u: DMatrix<T>,
}

impl<T: Scalar> Raw<T> {
    fn policy(&self, mu: &DVector<T>) -> Result<Policy<T>> {
        Policy::from_logits(&self.u, mu)
    }
}

fn raw_rhs<T: Scalar>(
    ctx: &FlowContext<T>,
    schedule: &TimescaleSchedule,
    t: f64,
    theta: &DVector<T>,
    u: &DMatrix<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let pi = Policy::from_logits(u, ctx.mdp.mu())?;
    let sys = linear_system(&pi, &ctx.mdp, &ctx.features)?;
    let eta: T = lit(schedule.eta(t));
    let q = q_of_theta(theta, &ctx.features, &ctx.mdp)?;
    Ok((-sys.gradient(theta) * eta, -(q + u * ctx.mdp.tau())))
}

fn rk4_step<T: Scalar>(ctx: &FlowContext<T>, schedule: &TimescaleSchedule, t: f64, h: f64, x: &Raw<T>) -> Result<Raw<T>> {
    let hh: T = lit(h);
    let half: T = lit(0.5 * h);
    let (k1t, k1u) = raw_rhs(ctx, schedule, t, &x.theta, &x.u)?;
    let (k2t, k2u) = raw_rhs(ctx, schedule, t + 0.5 * h, &(&x.theta + &k1t * half), &(&x.u + &k1u * half))?;
    let (k3t, k3u) = raw_rhs(ctx, schedule, t + 0.5 * h, &(&x.theta + &k2t * half), &(&x.u + &k2u * half))?;
    let (k4t, k4u) = raw_rhs(ctx, schedule, t + h, &(&x.theta + &k3t * hh), &(&x.u + &k3u * hh))?;
    let sixth: T = lit(h / 6.0);
    let two: T = lit(2.0);
    Ok(Raw {
        theta: &x.theta + (k1t + k2t * two + k3t * two + k4t) * sixth,
        u: &x.u + (k1u + k2u * two + k3u * two + k4u) * sixth,
    })
}

/// One exponential-Euler step. With `π` frozen over the step the pair
/// `(θ, u)` obeys a linear system (`η` replaced by its mean over the step),
/// which is propagated exactly by one exponential of the augmented matrix
///
/// ```text
/// [ −η̄A   0    0   ]
/// [ −Φ   −τI  −Φθ* ]
/// [  0    0    0   ]
/// ```
///
/// acting on `(θ − θ*, vec u, 1)`, where `Aθ* = b`.
fn exp_euler_step<T: Scalar>(
    ctx: &FlowContext<T>,
    schedule: &TimescaleSchedule,
    t: f64,
    h: f64,
    x: &Raw<T>,
) -> Result<Raw<T>> {
    let mdp = &ctx.mdp;
    let pi = x.policy(mdp.mu())?;
    let sys = linear_system(&pi, mdp, &ctx.features)?;
    let eta_bar: T = lit(schedule.integral(t, t + h) / h);
    let theta_star = sys
        .a
        .clone()
        .lu()
        .solve(&sys.b)
        .ok_or_else(|| Error::SolveFailure("critic system matrix is singular".into()))?;

    let phi = ctx.features.phi();
    let (n, m) = (phi.ncols(), phi.nrows());
    let dim = n + m + 1;
    let hh: T = lit(h);
    let mut gen = DMatrix::<T>::zeros(dim, dim);
    gen.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * (-eta_bar * hh)));
    gen.view_mut((n, 0), (m, n)).copy_from(&(phi * (-hh)));
    for i in 0..m {
        gen[(n + i, n + i)] = -mdp.tau() * hh;
    }
    gen.view_mut((n, n + m), (m, 1)).copy_from(&(phi * &theta_star * (-hh)));
    let prop = gen.exp();

    let mut z = DVector::<T>::zeros(dim);
    z.rows_mut(0, n).copy_from(&(&x.theta - &theta_star));
    z.rows_mut(n, m).copy_from(&flatten_sa(&x.u));
    z[n + m] = T::one();
    let z = prop * z;
    let theta = &theta_star + z.rows(0, n);
    let u = unflatten_sa(&z.rows(n, m).into_owned(), mdp.n_states(), mdp.n_actions());
    Ok(Raw { theta, u })
}

fn check_step<T: Scalar>(x: &Raw<T>, mu: &DVector<T>, t: f64, h: f64, opts_guard: (f64, f64)) -> Result<()> {
    if x.theta.iter().chain(x.u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::StepSizeTooLarge { t, dt: h });
    }
    let theta_norm = to_f64(x.theta.norm());
    let pi = x.policy(mu)?;
    let kl = to_f64(pi.max_kl(mu));
    if !(theta_norm <= opts_guard.0) || !(kl <= opts_guard.1) {
        return Err(Error::BlowupDetected {
            t,
            theta_norm,
            kl,
        });
    }
    Ok(())
}

fn snapshot<T: Scalar>(ctx: &FlowContext<T>, schedule: &TimescaleSchedule, t: f64, x: &Raw<T>) -> Result<Snapshot<T>> {
    let pi = x.policy(ctx.mdp.mu())?;
    let diag = diagnose(ctx, &x.theta, &pi, schedule.eta(t))?;
    Ok(Snapshot {
        t,
        theta: x.theta.clone(),
        log_density: pi.log_density().clone(),
        diag,
    })
}

/// Integrates the coupled flow from `initial` (whose clock is ignored; runs
/// start at `t = 0`) and records snapshots at `opts.output_times`.
pub fn integrate<T: Scalar>(
    initial: &FlowState<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    schedule: &TimescaleSchedule,
    opts: &IntegrateOptions,
) -> Result<Trajectory<T>> {
    let ctx = FlowContext::new(mdp.clone(), features.clone())?;
    integrate_with(&ctx, initial, schedule, opts)
}

pub fn integrate_with<T: Scalar>(
    ctx: &FlowContext<T>,
    initial: &FlowState<T>,
    schedule: &TimescaleSchedule,
    opts: &IntegrateOptions,
) -> Result<Trajectory<T>> {
    schedule.validate()?;
    opts.validate()?;
    if initial.theta.len() != ctx.features.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial theta",
            expected: ctx.features.dim(),
            found: initial.theta.len(),
        });
    }
    let mu = ctx.mdp.mu();
    let mut x = Raw {
        theta: initial.theta.clone(),
        u: initial.policy.log_density().clone(),
    };
    let guards = (opts.theta_guard, opts.kl_guard);
    let mut t = 0.0_f64;
    let mut steps = 0usize;
    let mut snapshots = Vec::with_capacity(opts.output_times.len());
    for &target in &opts.output_times {
        while target - t > 1e-12 * opts.dt {
            let h = opts.dt.min(target - t);
            x = match opts.method {
                Method::Rk4 => rk4_step(ctx, schedule, t, h, &x)?,
                Method::ExponentialEuler => exp_euler_step(ctx, schedule, t, h, &x)?,
            };
            t = if target - (t + h) <= 1e-12 * opts.dt { target } else { t + h };
            steps += 1;
            check_step(&x, mu, t, h, guards)?;
        }
        snapshots.push(snapshot(ctx, schedule, target, &x)?);
    }
    Ok(Trajectory { snapshots, steps })
}

/// Settings for [`run_two_timescale`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimescaleOptions {
    pub n_steps: usize,
    /// Update the policy with `θ^{n+1}` (true) or `θ^n`.
    pub policy_uses_updated_critic: bool,
    /// Snapshot every this many iterations (the last iterate is always kept).
    pub record_every: usize,
    pub theta_guard: f64,
    pub kl_guard: f64,
}

impl TwoTimescaleOptions {
    pub fn new(n_steps: usize) -> Self {
        Self {
            n_steps,
            policy_uses_updated_critic: true,
            record_every: 1,
            theta_guard: THETA_GUARD,
            kl_guard: KL_GUARD,
        }
    }
}

/// Discrete scheme
/// `θ^{n+1} = θ^n − h_n g(θ^n, π^n)`, `π^{n+1} = MD(π^n, A(·;θ^{n+1}), λ_n)`.
///
/// `steps(n)` returns `(h_n, λ_n)`; snapshot clocks are `t_n = Σ_{k<n} λ_k`.
pub fn run_two_timescale<T: Scalar>(
    ctx: &FlowContext<T>,
    theta0: &DVector<T>,
    pi0: &Policy<T>,
    steps: impl Fn(usize) -> (f64, f64),
    opts: &TwoTimescaleOptions,
) -> Result<Trajectory<T>> {
    let mdp = &ctx.mdp;
    let mu = mdp.mu();
    let every = opts.record_every.max(1);
    let mut theta = theta0.clone();
    let mut pi = pi0.clone();
    let mut t = 0.0_f64;
    let mut eta_now = {
        let (h, l) = steps(0);
        h / l
    };
    let mut snapshots = vec![Snapshot {
        t,
        theta: theta.clone(),
        log_density: pi.log_density().clone(),
        diag: diagnose(ctx, &theta, &pi, eta_now)?,
    }];
    for n in 0..opts.n_steps {
        let (h, lambda) = steps(n);
        if !(h > 0.0 && lambda > 0.0 && h.is_finite() && lambda.is_finite()) {
            return Err(Error::BadStepSizes {
                step: n,
                reason: format!("h = {h}, lambda = {lambda} must be positive"),
            });
        }
        eta_now = h / lambda;
        if !(eta_now > 1.0) {
            return Err(Error::BadStepSizes {
                step: n,
                reason: format!("timescale ratio h/lambda = {eta_now} must exceed 1"),
            });
        }
        let g = linear_system(&pi, mdp, &ctx.features)?.gradient(&theta);
        let next_theta = &theta - g * lit::<T>(h);
        let critic = if opts.policy_uses_updated_critic { &next_theta } else { &theta };
        let adv = approx_advantage(critic, &pi, mdp, &ctx.features)?;
        pi = mirror_descent_step(&pi, &adv, lit(lambda), mu)?;
        theta = next_theta;
        t += lambda;

        let x = Raw {
            theta: theta.clone(),
            u: pi.log_density().clone(),
        };
        check_step(&x, mu, t, lambda, (opts.theta_guard, opts.kl_guard))?;
        if (n + 1) % every == 0 || n + 1 == opts.n_steps {
            snapshots.push(Snapshot {
                t,
                theta: theta.clone(),
                log_density: pi.log_density().clone(),
                diag: diagnose(ctx, &theta, &pi, eta_now)?,
            });
        }
    }
    Ok(Trajectory {
        snapshots,
        steps: opts.n_steps,
    })
}

/// Step sequence `h_n = η(t_n) λ`, `λ_n = λ` matching the continuous clock.
pub fn matched_steps(schedule: TimescaleSchedule, lambda: f64) -> impl Fn(usize) -> (f64, f64) {
    move |n| (schedule.eta(n as f64 * lambda) * lambda, lambda)
}

/// CSV columns of a trajectory file.
pub const CSV_COLUMNS: [&str; 9] = [
    "t",
    "theta_norm",
    "K_t",
    "V_rho",
    "gap",
    "theta_err",
    "msbe",
    "drift_lhs",
    "drift_rhs",
];

/// Writes the trajectory CSV preceded by a `# config_hash=` comment line.
pub fn write_trajectory_csv<T: Scalar, W: Write>(traj: &Trajectory<T>, config_hash: &str, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for s in &traj.snapshots {
        let d = &s.diag;
        let row = [
            s.t,
            d.theta_norm,
            d.k_t,
            d.v_rho,
            d.gap,
            d.theta_err,
            d.msbe,
            d.drift_lhs,
            d.drift_rhs,
        ];
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_mdp, random_policy, random_vector, sample_random_mdp, RawMdp, Structure};

    fn single_point() -> FiniteMdp<f64> {
        build_mdp(&RawMdp {
            transition: vec![vec![vec![1.0]]],
            cost: vec![vec![0.5]],
            gamma: 0.5,
            tau: 1.0,
            mu: vec![1.0],
            beta: Some(vec![vec![1.0]]),
        })
        .unwrap()
    }

    #[test]
    fn schedule_integrals_match_quadrature() {
        let cases = [
            TimescaleSchedule::Constant { eta0: 2.0 },
            TimescaleSchedule::Exponential { eta0: 1.5, k1: 0.3 },
            TimescaleSchedule::Polynomial { eta0: 3.0, p: 0.5 },
        ];
        for s in cases {
            s.validate().unwrap();
            let (a, b) = (0.7, 2.9);
            let n = 20_000;
            let h = (b - a) / n as f64;
            let simpson: f64 = (0..n)
                .map(|i| {
                    let x = a + i as f64 * h;
                    (s.eta(x) + 4.0 * s.eta(x + 0.5 * h) + s.eta(x + h)) * h / 6.0
                })
                .sum();
            assert!((simpson - s.integral(a, b)).abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(TimescaleSchedule::Constant { eta0: 0.5 }.validate().is_err());
        assert!(TimescaleSchedule::Exponential { eta0: 1.0, k1: -1.0 }.validate().is_err());
        assert!(TimescaleSchedule::Polynomial { eta0: 1.0, p: 1.5 }.validate().is_err());
    }

    #[test]
    fn single_point_rhs_by_hand() {
        let m = single_point();
        let f = FeatureMap::one_hot(&m);
        let st = FlowState {
            t: 0.0,
            theta: DVector::from_element(1, 0.0),
            policy: Policy::reference(1, m.mu()),
        };
        let (dth, dl) = flow_rhs(&st, &m, &f, &TimescaleSchedule::Constant { eta0: 1.0 }).unwrap();
        assert!((dth[0] - 0.5).abs() < 1e-15);
        assert_eq!(dl[(0, 0)], 0.0);
    }

    #[test]
    fn equilibrium_is_stationary() {
        let inst = sample_random_mdp::<f64>(3, 3, 2, 0.6, 0.5, Structure::TabularOnehot).unwrap();
        let ctx = FlowContext::new(inst.mdp.clone(), inst.features.clone()).unwrap();
        let eq = ctx.equilibrium();
        let sch = TimescaleSchedule::Constant { eta0: 5.0 };
        let (dth, dl) = flow_rhs(&eq, &inst.mdp, &inst.features, &sch).unwrap();
        assert!(dth.amax() < 1e-8 && dl.amax() < 1e-8);
        for method in [Method::Rk4, Method::ExponentialEuler] {
            let opts = IntegrateOptions::uniform(method, 0.01, 10.0, 10);
            let tr = integrate_with(&ctx, &eq, &sch, &opts).unwrap();
            for s in &tr.snapshots {
                assert!((&s.theta - &eq.theta).amax() < 1e-7);
                assert!((&s.log_density - eq.policy.log_density()).amax() < 1e-7);
                assert!(s.diag.gap < 1e-12);
            }
        }
    }

    #[test]
    fn normalisation_and_output_times() {
        let inst = sample_random_mdp::<f64>(4, 3, 2, 0.5, 1.0, Structure::TabularOnehot).unwrap();
        let ctx = FlowContext::new(inst.mdp.clone(), inst.features.clone()).unwrap();
        let st = FlowState {
            t: 0.0,
            theta: random_vector(1, 6, 1.0),
            policy: random_policy(2, &inst.mdp, 1.0),
        };
        let sch = TimescaleSchedule::Constant { eta0: 10.0 };
        let opts = IntegrateOptions {
            output_times: vec![0.0, 0.25, 0.5, 1.0],
            ..IntegrateOptions::uniform(Method::ExponentialEuler, 0.003, 1.0, 1)
        };
        let tr = integrate_with(&ctx, &st, &sch, &opts).unwrap();
        assert_eq!(tr.times(), vec![0.0, 0.25, 0.5, 1.0]);
        assert!(tr.snapshots.iter().all(|s| s.diag.normalisation < 1e-12));
        let bad = IntegrateOptions {
            output_times: vec![0.5, 0.25],
            ..opts
        };
        assert!(matches!(
            integrate_with(&ctx, &st, &sch, &bad),
            Err(Error::BadIntegration(_))
        ));
    }

    #[test]
    fn frozen_policy_scheme_converges_to_theta_pi() {
        let inst = sample_random_mdp::<f64>(5, 3, 2, 0.5, 1.0, Structure::TabularOnehot).unwrap();
        let ctx = FlowContext::new(inst.mdp.clone(), inst.features.clone()).unwrap();
        let pi0 = random_policy(4, &inst.mdp, 1.0);
        let th0 = DVector::zeros(6);
        let mut opts = TwoTimescaleOptions::new(4000);
        opts.record_every = 4000;
        let tr = run_two_timescale(&ctx, &th0, &pi0, |_| (1.0, 1e-14), &opts).unwrap();
        let best = crate::critic::best_parameters(&pi0, &inst.mdp, &inst.features).unwrap();
        let last = tr.last();
        assert!((&last.theta - &best.theta).norm() < 1e-6);
        assert!((&last.log_density - pi0.log_density()).amax() < 1e-9);
    }

    #[test]
    fn ratio_at_most_one_is_rejected() {
        let inst = sample_random_mdp::<f64>(5, 2, 2, 0.5, 1.0, Structure::TabularOnehot).unwrap();
        let ctx = FlowContext::new(inst.mdp.clone(), inst.features.clone()).unwrap();
        let pi0 = Policy::reference(2, inst.mdp.mu());
        let r = run_two_timescale(&ctx, &DVector::zeros(4), &pi0, |_| (0.1, 0.1), &TwoTimescaleOptions::new(3));
        assert!(matches!(r, Err(Error::BadStepSizes { step: 0, .. })));
    }

    #[test]
    fn csv_has_header_and_hash() {
        let inst = sample_random_mdp::<f64>(5, 2, 2, 0.5, 1.0, Structure::TabularOnehot).unwrap();
        let ctx = FlowContext::new(inst.mdp.clone(), inst.features.clone()).unwrap();
        let eq = ctx.equilibrium();
        let opts = IntegrateOptions::uniform(Method::ExponentialEuler, 0.1, 1.0, 2);
        let tr = integrate_with(&ctx, &eq, &TimescaleSchedule::Constant { eta0: 2.0 }, &opts).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&tr, "abc", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=abc"));
        assert_eq!(lines.next(), Some("t,theta_norm,K_t,V_rho,gap,theta_err,msbe,drift_lhs,drift_rhs"));
        assert_eq!(lines.count(), 3);
    }
}
