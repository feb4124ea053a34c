//! Constants of the stability and convergence statements and the runtime
//! certificates that check them against simulated trajectories.
//!
//! Every certificate recomputes both sides from raw snapshot data and the
//! closed-form constants; margins are `rhs − lhs` (negative means violated).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actor::{exact_advantage, AdvantageTable};
use crate::critic::{gram_data, GramData};
use crate::error::{Error, Result};
use crate::flow::{TimescaleSchedule, Trajectory};
use crate::mdp::{FeatureMap, FiniteMdp, Policy};
use crate::occupancy::state_occupancy_kernel;
use crate::scalar::{flatten_sa, lit, to_f64, Scalar};

/// Convergence certificates start here; the bound is degenerate at `t = 0`.
pub const T_MIN: f64 = 0.1;
/// Relative slack of the drift certificate.
pub const DRIFT_SLACK: f64 = 1e-8;
/// Absolute slack of the along-flow bounds.
pub const FLOW_BOUND_SLACK: f64 = 1e-8;
/// Fit residual above which realisability-dependent checks are skipped.
pub const REALISABILITY_GATE: f64 = 1e-8;

/// Closed-form constants of the stability and convergence statements.
///
/// Fields that only exist under `η₀ > τ/Γ` are `None` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub gamma: f64,
    pub tau: f64,
    pub eta0: f64,
    /// `Γ = λ_β(1−γ)(1−√γ)`.
    pub gamma_const: f64,
    pub lambda_beta: f64,
    pub c_inf: f64,
    /// `max(1, |ln dπ₀/dμ|_∞)`.
    pub c1: f64,
    pub theta0_norm: f64,
    /// `|θ₀ − θ_{π₀}|`.
    pub theta0_err: f64,
    /// `η₀ > τ/Γ`.
    pub eta0_admissible_kl: bool,
    /// `η₀ > 1/Γ`.
    pub eta0_admissible_conv: bool,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    /// `64γ² / (Γ² − Γτ/η₀) < 1` (false when `η₀ ≤ τ/Γ`).
    pub small_gamma_flag: bool,
    /// `a₁τ/(τ − a₂)` under the small-γ flag.
    pub k_sq_uniform: Option<f64>,
    /// Uniform bound on `|θ_t|` under the small-γ flag.
    pub theta_uniform: Option<f64>,
    /// `|θ_t| ≤ r₁ e^{r₂ t}`.
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    /// Coefficients of the critic-error integral bound (`η₀ > τ/(2Γ)`).
    pub b1: Option<f64>,
    pub b2: Option<f64>,
}

impl BoundConstants {
    /// Recomputes the small-γ flag from the stored fields.
    pub fn small_gamma_recomputed(&self) -> bool {
        let g = self.gamma_const;
        let denom = g * g - g * self.tau / self.eta0;
        denom > 0.0 && 64.0 * self.gamma * self.gamma / denom < 1.0
    }

    /// `|θ_t|` bound `sqrt(max(|θ₀|², 2(|c|² + τ²γ² κ)/Γ²))` for `K_t² ≤ κ`.
    pub fn theta_bound_for_kl_sq(&self, kappa: f64) -> f64 {
        let g = self.gamma_const;
        let tg = self.tau * self.gamma;
        let b = 2.0 * (self.c_inf * self.c_inf + tg * tg * kappa) / (g * g);
        self.theta0_norm.powi(2).max(b).sqrt()
    }

    /// Named numeric fields, for report provenance.
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("gamma", Some(self.gamma));
        put("tau", Some(self.tau));
        put("eta0", Some(self.eta0));
        put("Gamma", Some(self.gamma_const));
        put("lambda_beta", Some(self.lambda_beta));
        put("c_inf", Some(self.c_inf));
        put("C1", Some(self.c1));
        put("sigma1", self.sigma1);
        put("sigma2", self.sigma2);
        put("a1", self.a1);
        put("a2", self.a2);
        put("K_sq_uniform", self.k_sq_uniform);
        put("R", self.theta_uniform);
        put("r1", self.r1);
        put("r2", self.r2);
        put("b1", self.b1);
        put("b2", self.b2);
        m
    }

    fn pick(&self, keys: &[&str]) -> BTreeMap<String, f64> {
        let all = self.as_map();
        keys.iter()
            .filter_map(|k| all.get(*k).map(|v| (k.to_string(), *v)))
            .collect()
    }
}

/// Constants without the admissibility gate: inadmissible fields are `None`.
pub fn bound_constants<T: Scalar>(
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    theta0: &DVector<T>,
    pi0: &Policy<T>,
    schedule: &TimescaleSchedule,
) -> Result<BoundConstants> {
    let gram = gram_data(mdp, features)?;
    let best = crate::critic::best_parameters_with(pi0, mdp, features, &gram)?;
    let gamma = to_f64(mdp.gamma());
    let tau = to_f64(mdp.tau());
    let eta0 = schedule.eta0();
    let gc = to_f64(gram.gamma_const);
    let c_inf = to_f64(mdp.cost_sup());
    let c1 = to_f64(pi0.log_density().amax()).max(1.0);
    let theta0_norm = to_f64(theta0.norm());
    let theta0_err = to_f64((theta0 - &best.theta).norm());

    let kl_ok = eta0 > tau / gc;
    let (mut sigma1, mut sigma2, mut a1, mut a2) = (None, None, None, None);
    if kl_ok {
        let f = 1.0 - tau / (gc * eta0);
        let s1 = theta0_norm.powi(2) / (gc * eta0 * f) + 2.0 * c_inf * c_inf / (gc * gc * tau * f);
        let s2 = 2.0 * tau * tau * gamma * gamma / (gc * gc * f);
        sigma1 = Some(s1);
        sigma2 = Some(s2);
        a1 = Some(8.0 * c1 * c1 + 32.0 * s1 / tau);
        a2 = Some(32.0 * s2 / tau);
    }
    let denom = gc * gc - gc * tau / eta0;
    let small_gamma_flag = kl_ok && denom > 0.0 && 64.0 * gamma * gamma / denom < 1.0;

    let mut out = BoundConstants {
        gamma,
        tau,
        eta0,
        gamma_const: gc,
        lambda_beta: to_f64(gram.lambda_beta),
        c_inf,
        c1,
        theta0_norm,
        theta0_err,
        eta0_admissible_kl: kl_ok,
        eta0_admissible_conv: eta0 > 1.0 / gc,
        sigma1,
        sigma2,
        a1,
        a2,
        small_gamma_flag,
        k_sq_uniform: None,
        theta_uniform: None,
        r1: None,
        r2: None,
        b1: None,
        b2: None,
    };
    if let (Some(a1), Some(a2)) = (a1, a2) {
        out.r1 = Some(out.theta_bound_for_kl_sq(a1));
        out.r2 = Some(0.5 * a2);
        if small_gamma_flag {
            let k = a1 * tau / (tau - a2);
            out.k_sq_uniform = Some(k);
            out.theta_uniform = Some(out.theta_bound_for_kl_sq(k));
        }
    }
    let f2 = 1.0 - tau / (2.0 * gc * eta0);
    if f2 > 0.0 {
        out.b1 = Some(theta0_err.powi(2) / (gc * eta0 * f2));
        out.b2 = Some(1.0 / (gc * f2));
    }
    Ok(out)
}

/// Constants for a run; fails when `η₀ ≤ τ/Γ`.
pub fn compute_constants<T: Scalar>(
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    theta0: &DVector<T>,
    pi0: &Policy<T>,
    schedule: &TimescaleSchedule,
) -> Result<BoundConstants> {
    let c = bound_constants(mdp, features, theta0, pi0, schedule)?;
    if !c.eta0_admissible_kl {
        return Err(Error::InadmissibleEta {
            eta0: c.eta0,
            threshold: c.tau / c.gamma_const,
            what: "the KL Gronwall inequality",
        });
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

/// One certificate outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateEntry {
    pub name: String,
    pub status: Status,
    /// Worst `rhs − lhs` over the checked snapshots (or the fitted statistic).
    pub margin: f64,
    pub t_worst: f64,
    pub constants_used: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CertificateEntry {
    fn not_applicable(name: &str, why: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            status: Status::NotApplicable,
            margin: f64::NAN,
            t_worst: f64::NAN,
            constants_used: BTreeMap::new(),
            note: Some(why.into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub entries: Vec<CertificateEntry>,
}

impl CertificateReport {
    pub fn push(&mut self, e: CertificateEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, es: impl IntoIterator<Item = CertificateEntry>) {
        self.entries.extend(es);
    }

    pub fn get(&self, name: &str) -> Option<&CertificateEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CertificateEntry> {
        self.entries.iter().filter(|e| e.status == Status::Fail)
    }

    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Tracks the worst margin of a pointwise inequality.
struct Worst {
    margin: f64,
    t: f64,
    ok: bool,
}

impl Worst {
    fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            t: f64::NAN,
            ok: true,
        }
    }

    /// Records `lhs ≤ rhs` with an absolute tolerance.
    fn record(&mut self, t: f64, lhs: f64, rhs: f64, tol: f64) {
        let m = rhs - lhs;
        if !(m >= -tol) {
            self.ok = false;
        }
        if m < self.margin || m.is_nan() {
            self.margin = m;
            self.t = t;
        }
    }

    fn entry(self, name: &str, constants_used: BTreeMap<String, f64>) -> CertificateEntry {
        CertificateEntry {
            name: name.to_string(),
            status: if self.ok { Status::Pass } else { Status::Fail },
            margin: self.margin,
            t_worst: self.t,
            constants_used,
            note: None,
        }
    }
}

/// `(2η_t)^{-1} d|θ|²/dt ≤ −(Γ/2)|θ|² + τ²γ²K²/Γ + |c|²/Γ` at every snapshot.
pub fn check_lyapunov_drift<T: Scalar>(traj: &Trajectory<T>, c: &BoundConstants) -> CertificateEntry {
    let g = c.gamma_const;
    let tg = c.tau * c.gamma;
    let mut w = Worst::new();
    for s in &traj.snapshots {
        let d = &s.diag;
        let rhs = -0.5 * g * d.theta_norm.powi(2) + tg * tg * d.k_t * d.k_t / g + c.c_inf * c.c_inf / g;
        w.record(s.t, d.drift_lhs, rhs, DRIFT_SLACK * (1.0 + rhs.abs()));
    }
    w.entry("lyapunov_drift", c.pick(&["Gamma", "tau", "gamma", "c_inf"]))
}

/// `∫_0^{t_k} e^{−κ(t_k − r)} f(r) dr` on the snapshot grid, exact for
/// piecewise-linear `f`.
pub fn exp_convolution(times: &[f64], values: &[f64], kappa: f64) -> Vec<f64> {
    assert_eq!(times.len(), values.len());
    let mut out = Vec::with_capacity(times.len());
    if times.is_empty() {
        return out;
    }
    let t0 = times[0];
    // the grid may not start at 0; the integral over [0, t0] is not available
    debug_assert!(t0 >= 0.0);
    let mut acc = 0.0;
    out.push(acc);
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let (w0, w1) = exp_trapezoid_weights(h, kappa);
        acc = acc * (-kappa * h).exp() + w0 * values[k - 1] + w1 * values[k];
        out.push(acc);
    }
    out
}

/// Weights of `∫_0^h e^{−κ(h−r)} f(r) dr ≈ w₀ f(0) + w₁ f(h)` for linear `f`.
fn exp_trapezoid_weights(h: f64, kappa: f64) -> (f64, f64) {
    let x = kappa * h;
    if x < 1e-4 {
        (
            h * (0.5 - x / 3.0 + x * x / 8.0),
            h * (0.5 - x / 6.0 + x * x / 24.0),
        )
    } else {
        let e = (-x).exp();
        let r = -(-x).exp_m1() / x;
        ((r - e) / kappa, (1.0 - r) / kappa)
    }
}

/// Integral inequality `K_t² ≤ a₁ + a₂ ∫ e^{−τ(t−r)} K_r² dr`, its envelope
/// `K_t² ≤ a₁ e^{a₂ t}` and the growth bound `|θ_t| ≤ r₁ e^{r₂ t}`.
pub fn check_gronwall_kl<T: Scalar>(traj: &Trajectory<T>, c: &BoundConstants) -> Result<Vec<CertificateEntry>> {
    let (a1, a2) = match (c.a1, c.a2) {
        (Some(a1), Some(a2)) => (a1, a2),
        _ => {
            return Err(Error::InadmissibleEta {
                eta0: c.eta0,
                threshold: c.tau / c.gamma_const,
                what: "the KL Gronwall inequality",
            })
        }
    };
    let times = traj.times();
    let k_sq: Vec<f64> = traj.series(|d| d.k_t * d.k_t);
    let conv = exp_convolution(&times, &k_sq, c.tau);
    let mut integral = Worst::new();
    let mut envelope = Worst::new();
    let mut growth = Worst::new();
    let (r1, r2) = (c.r1.unwrap_or(f64::INFINITY), c.r2.unwrap_or(0.0));
    for (i, s) in traj.snapshots.iter().enumerate() {
        let rhs = a1 + a2 * conv[i];
        integral.record(s.t, k_sq[i], rhs, 1e-12 * rhs);
        let env = a1 * (a2 * s.t).exp();
        envelope.record(s.t, k_sq[i], env, 1e-12 * env);
        let gr = r1 * (r2 * s.t).exp();
        growth.record(s.t, s.diag.theta_norm, gr, 1e-12 * gr);
    }
    Ok(vec![
        integral.entry("gronwall_kl_integral", c.pick(&["a1", "a2", "tau"])),
        envelope.entry("gronwall_kl_envelope", c.pick(&["a1", "a2"])),
        growth.entry("theta_growth", c.pick(&["r1", "r2", "Gamma", "a1"])),
    ])
}

/// Uniform bounds `K_t² ≤ a₁τ/(τ − a₂)` and `|θ_t| ≤ R` in the small-γ regime.
pub fn check_uniform_bounds<T: Scalar>(traj: &Trajectory<T>, c: &BoundConstants) -> Vec<CertificateEntry> {
    let (kbar, r) = match (c.small_gamma_flag, c.k_sq_uniform, c.theta_uniform) {
        (true, Some(k), Some(r)) => (k, r),
        _ => {
            let why = "small-discount condition 64γ²/(Γ² − Γτ/η₀) < 1 not satisfied";
            return vec![
                CertificateEntry::not_applicable("uniform_kl", why),
                CertificateEntry::not_applicable("uniform_theta", why),
            ];
        }
    };
    debug_assert!(c.a2.is_some_and(|a2| a2 < c.tau));
    let mut kl = Worst::new();
    let mut th = Worst::new();
    for s in &traj.snapshots {
        kl.record(s.t, s.diag.k_t * s.diag.k_t, kbar, 1e-12 * kbar);
        th.record(s.t, s.diag.theta_norm, r, 1e-12 * r);
    }
    vec![
        kl.entry("uniform_kl", c.pick(&["a1", "a2", "tau", "K_sq_uniform"])),
        th.entry("uniform_theta", c.pick(&["R", "K_sq_uniform", "Gamma", "c_inf"])),
    ]
}

/// `dQ^π/dt = γ/(1−γ) Σ_{s'} P(s'|s,a) Σ_{s''} d^π(s''|s') Σ_{a''} A^π ∂_tπ`.
pub fn dq_dt_oracle<T: Scalar>(pi: &Policy<T>, dpi_dt: &DMatrix<T>, mdp: &FiniteMdp<T>) -> Result<DMatrix<T>> {
    let adv = exact_advantage(pi, mdp)?;
    dq_dt_with(pi, dpi_dt, &adv, mdp)
}

fn check_tangent<T: Scalar>(dpi_dt: &DMatrix<T>, mdp: &FiniteMdp<T>) -> Result<()> {
    if dpi_dt.shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch {
            what: "policy derivative",
            expected: mdp.n_pairs(),
            found: dpi_dt.len(),
        });
    }
    for (s, row) in dpi_dt.row_iter().enumerate() {
        let sum = row.sum();
        let scale = row.iter().fold(T::one(), |a, &b| a.max(b.abs()));
        if to_f64(sum.abs()) > 1e-9 * to_f64(scale) {
            return Err(Error::NotTangent {
                state: s,
                sum: to_f64(sum),
            });
        }
    }
    Ok(())
}

pub(crate) fn dq_dt_with<T: Scalar>(
    pi: &Policy<T>,
    dpi_dt: &DMatrix<T>,
    adv: &AdvantageTable<T>,
    mdp: &FiniteMdp<T>,
) -> Result<DMatrix<T>> {
    check_tangent(dpi_dt, mdp)?;
    let w = DVector::from_fn(mdp.n_states(), |s, _| {
        (0..mdp.n_actions()).fold(T::zero(), |acc, a| acc + adv.a[(s, a)] * dpi_dt[(s, a)])
    });
    let d = state_occupancy_kernel(pi, mdp)?;
    let g = mdp.gamma();
    let flat = mdp.transition() * (d * w) * (g / (T::one() - g));
    Ok(crate::scalar::unflatten_sa(&flat, mdp.n_states(), mdp.n_actions()))
}

/// `dθ_π/dt = Σ_β^{-1} Σ β φ dQ^π/dt`.
pub fn dtheta_pi_dt<T: Scalar>(
    pi: &Policy<T>,
    dpi_dt: &DMatrix<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<DVector<T>> {
    let gram = gram_data(mdp, features)?;
    let adv = exact_advantage(pi, mdp)?;
    Ok(dtheta_pi_dt_with(pi, dpi_dt, &adv, mdp, features, &gram)?.0)
}

/// `dθ_π/dt` and its bound `γ/(λ_β(1−γ)) |A^π|_∞ max_s Σ_a |∂_tπ(a|s)|`.
pub fn dtheta_pi_dt_with<T: Scalar>(
    pi: &Policy<T>,
    dpi_dt: &DMatrix<T>,
    adv: &AdvantageTable<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    gram: &GramData<T>,
) -> Result<(DVector<T>, T)> {
    let dq = dq_dt_with(pi, dpi_dt, adv, mdp)?;
    let w = flatten_sa(mdp.beta()).component_mul(&flatten_sa(&dq));
    let v = gram.solve(&features.phi().tr_mul(&w));
    let tv = dpi_dt
        .row_iter()
        .map(|r| r.iter().fold(T::zero(), |a, &b| a + b.abs()))
        .fold(T::zero(), |a, b| a.max(b));
    let g = mdp.gamma();
    let bound = g / (gram.lambda_beta * (T::one() - g)) * adv.sup_norm() * tv;
    Ok((v, bound))
}

/// Options for the rate regressions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateWindow {
    /// Fit on `[t_start, t_stop]`; `None` drops the first 20% of the horizon.
    pub t_start: Option<f64>,
    pub t_stop: Option<f64>,
}

impl RateWindow {
    fn resolve(&self, times: &[f64]) -> (f64, f64) {
        let end = *times.last().unwrap_or(&0.0);
        let stop = self.t_stop.unwrap_or(end);
        let start = self.t_start.unwrap_or(0.2 * end);
        (start, stop)
    }
}

/// Running minimum.
pub fn running_min(xs: &[f64]) -> Vec<f64> {
    let mut m = f64::INFINITY;
    xs.iter()
        .map(|&x| {
            m = m.min(x);
            m
        })
        .collect()
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx > 0.0 {
        Some(sxy / sxx)
    } else {
        None
    }
}

/// Fitted exponential decay rate `−d ln(min-gap)/dt` on a window.
pub fn fitted_decay_rate<T: Scalar>(traj: &Trajectory<T>, window: RateWindow) -> Option<f64> {
    let times = traj.times();
    let mg = running_min(&traj.series(|d| d.gap));
    let (a, b) = window.resolve(&times);
    let (x, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mg)
        .filter(|(t, g)| **t >= a && **t <= b && **g > 0.0)
        .map(|(t, g)| (*t, g.ln()))
        .unzip();
    ls_slope(&x, &y).map(|s| -s)
}

/// Fitted log-log slope `d ln(min-gap)/d ln t` on a window.
pub fn fitted_loglog_slope<T: Scalar>(traj: &Trajectory<T>, window: RateWindow) -> Option<f64> {
    let times = traj.times();
    let mg = running_min(&traj.series(|d| d.gap));
    let (a, b) = window.resolve(&times);
    let (x, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mg)
        .filter(|(t, g)| **t >= a.max(f64::MIN_POSITIVE) && **t <= b && **g > 0.0)
        .map(|(t, g)| (t.ln(), g.ln()))
        .unzip();
    ls_slope(&x, &y)
}

/// Settings of [`check_convergence_envelopes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOptions {
    pub window: RateWindow,
    /// Allowed shortfall of the exponential rate below `τ/2`.
    pub rate_tolerance: f64,
    /// Allowed deviation of the log-log slope from `−p`.
    pub slope_tolerance: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            window: RateWindow::default(),
            rate_tolerance: 0.05,
            slope_tolerance: 0.15,
        }
    }
}

fn realisable_along<T: Scalar>(traj: &Trajectory<T>) -> bool {
    traj.snapshots.iter().all(|s| s.diag.realisability <= REALISABILITY_GATE)
}

/// Convergence certificates:
/// * `convergence_min_gap`: `0 ≤ min-gap ≤` the bound with the critic-error integral,
/// * `critic_error_integral`: the critic-error integral bound (`η₀ > 1/Γ`, `τ < 1`),
/// * `exponential_envelope`: the `e^{−τt/2}` envelope for exponential schedules,
/// * `exponential_rate`: fitted decay rate `≥ τ/2 − tol` for exponential schedules,
/// * `polynomial_slope`: fitted log-log slope `≈ −p` for polynomial schedules
///   in the small-γ regime.
pub fn check_convergence_envelopes<T: Scalar>(
    traj: &Trajectory<T>,
    c: &BoundConstants,
    schedule: &TimescaleSchedule,
    opts: &ConvergenceOptions,
) -> Vec<CertificateEntry> {
    let mut out = Vec::new();
    if !realisable_along(traj) {
        let why = "features do not realise Q^pi along the trajectory";
        for n in [
            "convergence_min_gap",
            "critic_error_integral",
            "exponential_envelope",
            "exponential_rate",
            "polynomial_slope",
        ] {
            out.push(CertificateEntry::not_applicable(n, why));
        }
        return out;
    }
    let tau = c.tau;
    let kappa = 0.5 * tau;
    let times = traj.times();
    let min_gap = running_min(&traj.series(|d| d.gap));
    let err_sq = traj.series(|d| d.theta_err * d.theta_err);
    let j = exp_convolution(&times, &err_sq, kappa);
    let kl0 = traj.snapshots[0].diag.kl_opt_weighted;
    let lead = |t: f64| tau / (2.0 * (1.0 - c.gamma) * (-(-kappa * t).exp_m1()));

    // min-gap bound with the critic error
    let mut w = Worst::new();
    for (i, &t) in times.iter().enumerate() {
        if t < T_MIN {
            continue;
        }
        let rhs = lead(t) * ((-kappa * t).exp() * kl0 + j[i] / (2.0 * tau));
        w.record(t, min_gap[i], rhs, 1e-12 * (1.0 + rhs));
        w.record(t, 0.0, min_gap[i], 1e-10);
    }
    let mut used = c.pick(&["tau", "gamma"]);
    used.insert("kl_opt_init".into(), kl0);
    out.push(w.entry("convergence_min_gap", used));

    // critic-error integral bound
    let conv_ok = c.eta0_admissible_conv && tau < 1.0;
    let (b1, b2) = match (c.b1, c.b2) {
        (Some(b1), Some(b2)) if conv_ok => (b1, b2),
        _ => {
            let why = "requires eta0 > 1/Gamma and tau < 1";
            out.push(CertificateEntry::not_applicable("critic_error_integral", why));
            out.push(CertificateEntry::not_applicable("exponential_envelope", why));
            out.push(rate_entry(traj, c, schedule, opts));
            out.push(slope_entry(traj, c, schedule, opts));
            return out;
        }
    };
    let drift = traj.series(|d| d.dtheta_pi_norm * d.dtheta_pi_norm / d.eta);
    let i_t = exp_convolution(&times, &drift, kappa);
    let mut w = Worst::new();
    for (i, &t) in times.iter().enumerate() {
        let rhs = b1 * (-kappa * t).exp() + b2 * i_t[i];
        w.record(t, j[i], rhs, 1e-10 * (1.0 + rhs));
    }
    out.push(w.entry("critic_error_integral", c.pick(&["b1", "b2", "tau", "Gamma", "eta0"])));

    // exponential envelope with k2 = b1 + b2 sup e^{τt/2} I_t
    if let TimescaleSchedule::Exponential { .. } = schedule {
        let k2 = b1
            + b2 * times
                .iter()
                .zip(&i_t)
                .map(|(t, v)| (kappa * t).exp() * v)
                .fold(0.0, f64::max);
        let mut w = Worst::new();
        for (i, &t) in times.iter().enumerate() {
            if t < T_MIN {
                continue;
            }
            let rhs = lead(t) * (-kappa * t).exp() * (kl0 + k2 / (2.0 * tau));
            w.record(t, min_gap[i], rhs, 1e-12 * (1.0 + rhs));
        }
        let mut used = c.pick(&["tau", "gamma", "b1", "b2"]);
        used.insert("k2".into(), k2);
        used.insert("kl_opt_init".into(), kl0);
        out.push(w.entry("exponential_envelope", used));
    } else {
        out.push(CertificateEntry::not_applicable(
            "exponential_envelope",
            "schedule is not exponential",
        ));
    }
    out.push(rate_entry(traj, c, schedule, opts));
    out.push(slope_entry(traj, c, schedule, opts));
    out
}

fn rate_entry<T: Scalar>(
    traj: &Trajectory<T>,
    c: &BoundConstants,
    schedule: &TimescaleSchedule,
    opts: &ConvergenceOptions,
) -> CertificateEntry {
    if !matches!(schedule, TimescaleSchedule::Exponential { .. }) {
        return CertificateEntry::not_applicable("exponential_rate", "schedule is not exponential");
    }
    if !(c.eta0_admissible_conv && c.tau < 1.0) {
        return CertificateEntry::not_applicable("exponential_rate", "requires eta0 > 1/Gamma and tau < 1");
    }
    let target = 0.5 * c.tau - opts.rate_tolerance;
    let (a, b) = opts.window.resolve(&traj.times());
    match fitted_decay_rate(traj, opts.window) {
        Some(rate) => CertificateEntry {
            name: "exponential_rate".into(),
            status: if rate >= target { Status::Pass } else { Status::Fail },
            margin: rate - target,
            t_worst: b,
            constants_used: [
                ("fitted_rate".to_string(), rate),
                ("target".to_string(), target),
                ("window_start".to_string(), a),
                ("window_stop".to_string(), b),
            ]
            .into_iter()
            .collect(),
            note: None,
        },
        None => CertificateEntry::not_applicable("exponential_rate", "too few positive gaps in the window"),
    }
}

fn slope_entry<T: Scalar>(
    traj: &Trajectory<T>,
    c: &BoundConstants,
    schedule: &TimescaleSchedule,
    opts: &ConvergenceOptions,
) -> CertificateEntry {
    let p = match schedule {
        TimescaleSchedule::Polynomial { p, .. } => *p,
        _ => return CertificateEntry::not_applicable("polynomial_slope", "schedule is not polynomial"),
    };
    if !(c.small_gamma_flag && c.eta0_admissible_conv) {
        return CertificateEntry::not_applicable(
            "polynomial_slope",
            "requires the small-discount condition and eta0 > 1/Gamma",
        );
    }
    let (a, b) = opts.window.resolve(&traj.times());
    match fitted_loglog_slope(traj, opts.window) {
        Some(slope) => {
            let margin = opts.slope_tolerance - (slope + p).abs();
            CertificateEntry {
                name: "polynomial_slope".into(),
                status: if margin >= 0.0 { Status::Pass } else { Status::Fail },
                margin,
                t_worst: b,
                constants_used: [
                    ("fitted_slope".to_string(), slope),
                    ("expected_slope".to_string(), -p),
                    ("window_start".to_string(), a),
                    ("window_stop".to_string(), b),
                ]
                .into_iter()
                .collect(),
                note: None,
            }
        }
        None => CertificateEntry::not_applicable("polynomial_slope", "too few positive gaps in the window"),
    }
}

/// Along-flow bounds:
/// `|A_t|_∞ ≤ 2|Q_t|_∞ + 2τ|ℓ_t|_∞`, `(1−γ)|Q^{π_t}|_∞ ≤ |c|_∞ + τγK_t`,
/// `|ℓ_t|_∞ ≤ C₁ + (2/τ) sup_{r≤t}|θ_r| + sup_{r≤t} K_r`.
pub fn check_bounds_along_flow<T: Scalar>(traj: &Trajectory<T>, c: &BoundConstants) -> Vec<CertificateEntry> {
    let mut adv = Worst::new();
    let mut q = Worst::new();
    let mut ell = Worst::new();
    let (mut th_sup, mut k_sup) = (0.0_f64, 0.0_f64);
    for s in &traj.snapshots {
        let d = &s.diag;
        th_sup = th_sup.max(d.theta_norm);
        k_sup = k_sup.max(d.k_t);
        adv.record(s.t, d.adv_sup, 2.0 * d.q_theta_sup + 2.0 * c.tau * d.log_density_sup, FLOW_BOUND_SLACK);
        q.record(s.t, (1.0 - c.gamma) * d.q_pi_sup, c.c_inf + c.tau * c.gamma * d.k_t, FLOW_BOUND_SLACK);
        ell.record(s.t, d.log_density_sup, c.c1 + 2.0 / c.tau * th_sup + k_sup, FLOW_BOUND_SLACK);
    }
    vec![
        adv.entry("flow_bound_advantage", c.pick(&["tau"])),
        q.entry("flow_bound_q", c.pick(&["tau", "gamma", "c_inf"])),
        ell.entry("flow_bound_log_density", c.pick(&["tau", "C1"])),
    ]
}

/// `|dθ_π/dt|` against its bound at every snapshot.
pub fn check_dtheta_pi_bound<T: Scalar>(traj: &Trajectory<T>) -> CertificateEntry {
    let mut w = Worst::new();
    for s in &traj.snapshots {
        w.record(s.t, s.diag.dtheta_pi_norm, s.diag.dtheta_pi_bound, 1e-8);
    }
    w.entry("dtheta_pi_bound", BTreeMap::new())
}

/// Named certificate groups selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certificate {
    LyapunovDrift,
    GronwallKl,
    UniformBounds,
    Convergence,
    FlowBounds,
    DthetaPi,
}

impl Certificate {
    pub const ALL: [Certificate; 6] = [
        Certificate::LyapunovDrift,
        Certificate::GronwallKl,
        Certificate::UniformBounds,
        Certificate::Convergence,
        Certificate::FlowBounds,
        Certificate::DthetaPi,
    ];
}

/// Runs the selected certificate groups; inadmissible ones are reported as
/// not applicable rather than failing.
pub fn run_certificates<T: Scalar>(
    traj: &Trajectory<T>,
    c: &BoundConstants,
    schedule: &TimescaleSchedule,
    which: &[Certificate],
    conv: &ConvergenceOptions,
) -> CertificateReport {
    let mut report = CertificateReport::default();
    for cert in which {
        match cert {
            Certificate::LyapunovDrift => report.push(check_lyapunov_drift(traj, c)),
            Certificate::GronwallKl => match check_gronwall_kl(traj, c) {
                Ok(es) => report.extend(es),
                Err(e) => {
                    for n in ["gronwall_kl_integral", "gronwall_kl_envelope", "theta_growth"] {
                        report.push(CertificateEntry::not_applicable(n, e.to_string()));
                    }
                }
            },
            Certificate::UniformBounds => report.extend(check_uniform_bounds(traj, c)),
            Certificate::Convergence => report.extend(check_convergence_envelopes(traj, c, schedule, conv)),
            Certificate::FlowBounds => report.extend(check_bounds_along_flow(traj, c)),
            Certificate::DthetaPi => report.push(check_dtheta_pi_bound(traj)),
        }
    }
    report
}

/// Small helper for callers that hold `f64` parameters.
pub fn as_scalar<T: Scalar>(x: f64) -> T {
    lit(x)
}
