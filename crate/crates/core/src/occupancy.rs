//! Transition kernels induced by a policy, occupancy measures and the
//! transport operator `J_π`.
//!
//! Occupancies are computed by direct linear solves rather than by summing
//! the discounted series.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Policy};
use crate::scalar::{flatten_sa, sup_norm, unflatten_sa, Scalar};

/// State kernel `P_π(s'|s) = Σ_a π(a|s) P(s'|s,a)`, `|S| × |S|`.
pub fn state_kernel<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> DMatrix<T> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let p = mdp.transition();
    DMatrix::from_fn(ns, ns, |s, s2| {
        (0..na).fold(T::zero(), |acc, a| acc + pi.prob()[(s, a)] * p[(s * na + a, s2)])
    })
}

/// Pair kernel `P^π((s',a')|(s,a)) = P(s'|s,a) π(a'|s')`, `|S||A| × |S||A|`.
pub fn pair_kernel<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> DMatrix<T> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let p = mdp.transition();
    DMatrix::from_fn(ns * na, ns * na, |r, c| p[(r, c / na)] * pi.prob()[(c / na, c % na)])
}

fn check_pair_table<T: Scalar>(m: &DMatrix<T>, mdp: &FiniteMdp<T>, what: &'static str) -> Result<()> {
    if m.shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch {
            what,
            expected: mdp.n_pairs(),
            found: m.len(),
        });
    }
    Ok(())
}

/// `(J_π β)(s',a') = Σ_{s,a} β(s,a) P(s'|s,a) π(a'|s')`.
pub fn j_apply<T: Scalar>(
    beta_in: &DMatrix<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
) -> Result<DMatrix<T>> {
    check_pair_table(beta_in, mdp, "beta_in")?;
    let next_state = mdp.transition().transpose() * flatten_sa(beta_in);
    Ok(DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        next_state[s] * pi.prob()[(s, a)]
    }))
}

/// Occupancy kernels and measures of one policy.
#[derive(Debug, Clone)]
pub struct OccupancyBundle<T: Scalar> {
    /// Row `s` is `d^π(·|s)`.
    pub d_state: DMatrix<T>,
    /// `d^π_ρ`.
    pub d_state_rho: DVector<T>,
    /// `d^π_β` as an `|S| × |A|` table.
    pub d_sa: DMatrix<T>,
    pub policy: Policy<T>,
    pub beta: DMatrix<T>,
}

fn lu_solve<T: Scalar>(a: DMatrix<T>, b: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::SolveFailure(format!("singular system for {what}")))
}

/// `d^π_ξ` for an arbitrary source distribution `ξ` over pairs.
pub fn pair_occupancy<T: Scalar>(
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    source: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_pair_table(source, mdp, "source distribution")?;
    let n = mdp.n_pairs();
    let g = mdp.gamma();
    // dᵀ (I − γM) = (1−γ) ξᵀ
    let a = DMatrix::identity(n, n) - pair_kernel(pi, mdp).transpose() * g;
    let rhs = DMatrix::from_column_slice(n, 1, flatten_sa(source).as_slice()) * (T::one() - g);
    let d = lu_solve(a, &rhs, "pair occupancy")?;
    Ok(unflatten_sa(&d.column(0).into_owned(), mdp.n_states(), mdp.n_actions()))
}

/// `d^π(·|s)` for every `s`, solved in one batch: `(1−γ)(I − γP_π)^{-1}`.
pub fn state_occupancy_kernel<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<DMatrix<T>> {
    let ns = mdp.n_states();
    let g = mdp.gamma();
    let a = DMatrix::identity(ns, ns) - state_kernel(pi, mdp) * g;
    let rhs = DMatrix::identity(ns, ns) * (T::one() - g);
    lu_solve(a, &rhs, "state occupancy")
}

/// All occupancy objects of `pi` under the model's `β` and `ρ`.
pub fn occupancy_measures<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<OccupancyBundle<T>> {
    let d_state = state_occupancy_kernel(pi, mdp)?;
    let d_state_rho = d_state.transpose() * mdp.rho();
    let d_sa = pair_occupancy(pi, mdp, mdp.beta())?;
    Ok(OccupancyBundle {
        d_state,
        d_state_rho,
        d_sa,
        policy: pi.clone(),
        beta: mdp.beta().clone(),
    })
}

/// Max-norm residuals of the two occupancy identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResiduals<T> {
    /// `|d^π_{J_π β} − J_π d^π_β|_∞`.
    pub commutation: T,
    /// `|d^π_β − γ d^π_{J_π β} − (1−γ) β|_∞`.
    pub balance: T,
}

pub fn check_occupancy_identities<T: Scalar>(
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    beta_in: &DMatrix<T>,
) -> Result<IdentityResiduals<T>> {
    let jb = j_apply(beta_in, pi, mdp)?;
    let d_jb = pair_occupancy(pi, mdp, &jb)?;
    let d_b = pair_occupancy(pi, mdp, beta_in)?;
    let j_db = j_apply(&d_b, pi, mdp)?;
    let g = mdp.gamma();
    Ok(IdentityResiduals {
        commutation: sup_norm(&(&d_jb - &j_db)),
        balance: sup_norm(&(&d_b - &d_jb * g - beta_in * (T::one() - g))),
    })
}

/// Both sides of `∫ f(s,a) f(s',a') P^π(ds',da'|s,a) d^π_β(ds,da) ≤ γ^{-1/2} ∫ f² d^π_β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderBound<T> {
    pub lhs: T,
    pub rhs: T,
}

impl<T: Scalar> HolderBound<T> {
    pub fn holds(&self, slack: T) -> bool {
        self.lhs <= self.rhs + slack
    }
}

pub fn holder_integral_bound_check<T: Scalar>(
    f: &DMatrix<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
) -> Result<HolderBound<T>> {
    check_pair_table(f, mdp, "test function")?;
    let d = flatten_sa(&pair_occupancy(pi, mdp, mdp.beta())?);
    let fv = flatten_sa(f);
    let next = pair_kernel(pi, mdp) * &fv;
    let lhs = d.iter().zip(fv.iter()).zip(next.iter()).fold(T::zero(), |acc, ((&w, &x), &y)| acc + w * x * y);
    let sq = d.iter().zip(fv.iter()).fold(T::zero(), |acc, (&w, &x)| acc + w * x * x);
    Ok(HolderBound {
        lhs,
        rhs: sq / mdp.gamma().sqrt(),
    })
}

/// Product distribution `ρ ⊗ π` over pairs.
pub fn product_distribution<T: Scalar>(rho: &DVector<T>, pi: &Policy<T>) -> DMatrix<T> {
    DMatrix::from_fn(pi.n_states(), pi.n_actions(), |s, a| rho[s] * pi.prob()[(s, a)])
}

/// `|x.sum() − 1|` helper used by the invariant checks.
pub fn mass_defect<T: Scalar>(m: &DMatrix<T>) -> T {
    (m.sum() - T::one()).abs()
}
