//! Soft dynamic programming on a finite model: policy evaluation, the
//! optimal soft value and policy, and the performance-difference identity.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Policy};
use crate::occupancy::{pair_kernel, state_occupancy_kernel};
use crate::scalar::{flatten_sa, lit, log_sum_exp_weighted, sup_norm, to_f64, unflatten_sa, Scalar};

/// Default fixed-point tolerance.
pub const FIXED_POINT_TOL: f64 = 1e-10;
/// Iteration budget for value iteration and the iterative evaluator.
pub const DEFAULT_MAX_ITER: usize = 200_000;

fn check_table<T: Scalar>(f: &DMatrix<T>, mdp: &FiniteMdp<T>, what: &'static str) -> Result<()> {
    if f.shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch {
            what,
            expected: mdp.n_pairs(),
            found: f.len(),
        });
    }
    Ok(())
}

fn check_policy<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<()> {
    check_table(pi.log_density(), mdp, "policy")
}

/// `c + γ τ Σ_{s'} P(s'|s,a) KL(π(·|s')|μ)` flattened over pairs.
fn regularised_cost<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> DVector<T> {
    let kl = pi.kl_to_reference(mdp.mu());
    flatten_sa(mdp.cost()) + mdp.transition() * kl * (mdp.gamma() * mdp.tau())
}

/// `(T^π f)(s,a) = c(s,a) + γ Σ_{s'} P(s'|s,a) [Σ_{a'} π(a'|s') f(s',a') + τ KL(π(·|s')|μ)]`.
pub fn bellman_apply<T: Scalar>(f: &DMatrix<T>, pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<DMatrix<T>> {
    check_table(f, mdp, "Q table")?;
    check_policy(pi, mdp)?;
    let kl = pi.kl_to_reference(mdp.mu());
    let (g, tau) = (mdp.gamma(), mdp.tau());
    let next = DVector::from_fn(mdp.n_states(), |s, _| {
        let mut acc = tau * kl[s];
        for a in 0..mdp.n_actions() {
            acc += pi.prob()[(s, a)] * f[(s, a)];
        }
        acc
    });
    let flat = flatten_sa(mdp.cost()) + mdp.transition() * next * g;
    Ok(unflatten_sa(&flat, mdp.n_states(), mdp.n_actions()))
}

/// `|f − T^π f|_∞`.
pub fn bellman_residual<T: Scalar>(f: &DMatrix<T>, pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<T> {
    Ok(sup_norm(&(bellman_apply(f, pi, mdp)? - f)))
}

/// Value functions of one policy.
#[derive(Debug, Clone)]
pub struct ValueFunctions<T: Scalar> {
    pub q: DMatrix<T>,
    pub v: DVector<T>,
    /// `KL(π(·|s)|μ)` per state.
    pub kl: DVector<T>,
    pub policy: Policy<T>,
    /// Sup-norm Bellman residual of `q`.
    pub residual: T,
}

impl<T: Scalar> ValueFunctions<T> {
    /// `V(ρ)`.
    pub fn value_at(&self, rho: &DVector<T>) -> T {
        self.v.dot(rho)
    }
}

/// Evaluation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// LU solve of the `|S||A|` system followed by residual refinement.
    LinearSolve,
    /// Fixed-point iteration of `T^π` from zero.
    Iterative { max_iter: usize },
}

/// `V(s) = Σ_a π(a|s) Q(s,a) + τ KL(π(·|s)|μ)`.
pub fn state_values<T: Scalar>(q: &DMatrix<T>, pi: &Policy<T>, kl: &DVector<T>, tau: T) -> DVector<T> {
    DVector::from_fn(q.nrows(), |s, _| {
        (0..q.ncols()).fold(tau * kl[s], |acc, a| acc + pi.prob()[(s, a)] * q[(s, a)])
    })
}

/// `Q^π_τ` and `V^π_τ` by direct linear solve (default).
pub fn evaluate_policy<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>, tol: T) -> Result<ValueFunctions<T>> {
    evaluate_policy_with(pi, mdp, tol, EvalMethod::LinearSolve)
}

pub fn evaluate_policy_with<T: Scalar>(
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    tol: T,
    method: EvalMethod,
) -> Result<ValueFunctions<T>> {
    check_policy(pi, mdp)?;
    if !(tol > T::zero()) {
        return Err(Error::BadIntegration(format!("tolerance must be positive, got {tol}")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let q = match method {
        EvalMethod::LinearSolve => {
            let n = mdp.n_pairs();
            let rhs = regularised_cost(pi, mdp);
            let a = DMatrix::identity(n, n) - pair_kernel(pi, mdp) * mdp.gamma();
            let lu = a.clone().lu();
            let mut x = lu
                .solve(&rhs)
                .ok_or_else(|| Error::SolveFailure("policy evaluation system is singular".into()))?;
            // one step of iterative refinement
            let r = &rhs - &a * &x;
            if let Some(dx) = lu.solve(&r) {
                x += dx;
            }
            unflatten_sa(&x, ns, na)
        }
        EvalMethod::Iterative { max_iter } => {
            let mut q = DMatrix::zeros(ns, na);
            let mut res = T::zero();
            let mut converged = false;
            for _ in 0..max_iter {
                let next = bellman_apply(&q, pi, mdp)?;
                res = sup_norm(&(&next - &q));
                q = next;
                if res <= tol * (T::one() - mdp.gamma()) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NonConvergence {
                    iterations: max_iter,
                    residual: to_f64(res),
                });
            }
            q
        }
    };
    let residual = bellman_residual(&q, pi, mdp)?;
    if !(residual <= tol) {
        return Err(Error::SolveFailure(format!(
            "policy evaluation residual {:e} exceeds tolerance {:e}",
            to_f64(residual),
            to_f64(tol)
        )));
    }
    let kl = pi.kl_to_reference(mdp.mu());
    let v = state_values(&q, pi, &kl, mdp.tau());
    Ok(ValueFunctions {
        q,
        v,
        kl,
        policy: pi.clone(),
        residual,
    })
}

/// Optimal soft quantities.
#[derive(Debug, Clone)]
pub struct OptimalSolution<T: Scalar> {
    pub q: DMatrix<T>,
    pub v: DVector<T>,
    pub policy: Policy<T>,
    /// `|Q* − (c + γ P V*)|_∞` with `V*` the soft minimum of `Q*`.
    pub residual: T,
    pub iterations: usize,
}

/// `V(s) = −τ ln Σ_a μ(a) exp(−Q(s,a)/τ)`.
pub fn soft_min<T: Scalar>(q: &DMatrix<T>, mu: &DVector<T>, tau: T) -> DVector<T> {
    let na = q.ncols();
    let mut buf = vec![T::zero(); na];
    DVector::from_fn(q.nrows(), |s, _| {
        for (a, b) in buf.iter_mut().enumerate() {
            *b = -q[(s, a)] / tau;
        }
        -tau * log_sum_exp_weighted(&buf, mu.as_slice())
    })
}

/// Gibbs policy `π ∝ exp(−Q/τ) μ`.
pub fn gibbs_policy<T: Scalar>(q: &DMatrix<T>, mdp: &FiniteMdp<T>) -> Result<Policy<T>> {
    let f = q * (-T::one() / mdp.tau());
    Policy::from_logits(&f, mdp.mu())
}

fn soft_bellman_optimal<T: Scalar>(q: &DMatrix<T>, mdp: &FiniteMdp<T>) -> DMatrix<T> {
    let v = soft_min(q, mdp.mu(), mdp.tau());
    let flat = flatten_sa(mdp.cost()) + mdp.transition() * v * mdp.gamma();
    unflatten_sa(&flat, mdp.n_states(), mdp.n_actions())
}

/// Soft value iteration to `tol`, polished by soft policy iteration.
pub fn solve_optimal<T: Scalar>(mdp: &FiniteMdp<T>, tol: T) -> Result<OptimalSolution<T>> {
    solve_optimal_with(mdp, tol, DEFAULT_MAX_ITER)
}

pub fn solve_optimal_with<T: Scalar>(mdp: &FiniteMdp<T>, tol: T, max_iter: usize) -> Result<OptimalSolution<T>> {
    if !(tol > T::zero()) {
        return Err(Error::BadIntegration(format!("tolerance must be positive, got {tol}")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = DMatrix::zeros(ns, na);
    let mut iterations = 0;
    let mut res: T = lit(f64::INFINITY);
    // contraction: |Q_k − Q*| ≤ res γ/(1−γ); aim a little below tol
    let target = tol * (T::one() - mdp.gamma()) * lit(0.1);
    while iterations < max_iter {
        let next = soft_bellman_optimal(&q, mdp);
        res = sup_norm(&(&next - &q));
        q = next;
        iterations += 1;
        if res <= target {
            break;
        }
    }
    if !(res <= target) && !(res <= tol) {
        return Err(Error::NonConvergence {
            iterations,
            residual: to_f64(res),
        });
    }

    // policy iteration polish: Q* = Q^{π*} to solver precision
    let eval_tol = tol.max(lit(1e-6));
    let mut policy = gibbs_policy(&q, mdp)?;
    for _ in 0..8 {
        let vf = evaluate_policy(&policy, mdp, eval_tol)?;
        let change = sup_norm(&(&vf.q - &q));
        q = vf.q;
        policy = gibbs_policy(&q, mdp)?;
        iterations += 1;
        if change <= T::default_epsilon() * lit(64.0) * (T::one() + sup_norm(&q)) {
            break;
        }
    }
    let v = soft_min(&q, mdp.mu(), mdp.tau());
    let residual = sup_norm(&(soft_bellman_optimal(&q, mdp) - &q));
    if !(residual <= tol) {
        return Err(Error::NonConvergence {
            iterations,
            residual: to_f64(residual),
        });
    }
    Ok(OptimalSolution {
        q,
        v,
        policy,
        residual,
        iterations,
    })
}

/// Both sides of the performance-difference identity.
#[derive(Debug, Clone)]
pub struct PerformanceDifference<T: Scalar> {
    /// `V^π(ρ) − V^{π'}(ρ)`.
    pub lhs: T,
    /// `(1−γ)^{-1} Σ_s d^π_ρ(s) integrand(s)`.
    pub rhs: T,
    /// `Σ_a (Q^{π'} + τ ℓ')(π − π') + τ KL(π|π')` per state.
    pub per_state: DVector<T>,
}

pub fn performance_difference<T: Scalar>(
    pi: &Policy<T>,
    pi_prime: &Policy<T>,
    mdp: &FiniteMdp<T>,
) -> Result<PerformanceDifference<T>> {
    let tol = lit(FIXED_POINT_TOL);
    let vp = evaluate_policy(pi, mdp, tol)?;
    let vq = evaluate_policy(pi_prime, mdp, tol)?;
    let lhs = vp.value_at(mdp.rho()) - vq.value_at(mdp.rho());
    let tau = mdp.tau();
    let kl = pi.kl_to(pi_prime);
    let per_state = DVector::from_fn(mdp.n_states(), |s, _| {
        (0..mdp.n_actions()).fold(tau * kl[s], |acc, a| {
            let h = vq.q[(s, a)] + tau * pi_prime.log_density()[(s, a)];
            acc + h * (pi.prob()[(s, a)] - pi_prime.prob()[(s, a)])
        })
    });
    let d_rho = state_occupancy_kernel(pi, mdp)?.transpose() * mdp.rho();
    let rhs = d_rho.dot(&per_state) / (T::one() - mdp.gamma());
    Ok(PerformanceDifference { lhs, rhs, per_state })
}

/// `V^π(ρ) − V*(ρ) = τ/(1−γ) Σ_s d^π_ρ(s) KL(π(·|s)|π*(·|s))`.
///
/// Non-negative by construction and free of cancellation near the optimum.
pub fn optimality_gap<T: Scalar>(pi: &Policy<T>, opt: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<T> {
    let d_rho = state_occupancy_kernel(pi, mdp)?.transpose() * mdp.rho();
    Ok(d_rho.dot(&pi.kl_to(opt)) * mdp.tau() / (T::one() - mdp.gamma()))
}
