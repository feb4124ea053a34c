//! Soft advantages, the pointwise mirror-descent update and the Fisher–Rao
//! right-hand side.

use nalgebra::DMatrix;

use crate::critic::q_of_theta;
use crate::dp::{evaluate_policy, FIXED_POINT_TOL};
use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, FiniteMdp, Policy};
use crate::scalar::{lit, Scalar};
use nalgebra::DVector;

/// Advantage table, π-centred per state.
#[derive(Debug, Clone)]
pub struct AdvantageTable<T: Scalar> {
    pub a: DMatrix<T>,
    /// Largest per-state `|Σ_a A π|` before re-centring.
    pub centering_residual: T,
}

impl<T: Scalar> AdvantageTable<T> {
    /// `max_s |Σ_a A(s,a) π(a|s)|` of the stored (re-centred) table.
    pub fn centering_error(&self, pi: &Policy<T>) -> T {
        (0..self.a.nrows()).fold(T::zero(), |acc, s| {
            let m = (0..self.a.ncols()).fold(T::zero(), |m, a| m + self.a[(s, a)] * pi.prob()[(s, a)]);
            acc.max(m.abs())
        })
    }

    pub fn sup_norm(&self) -> T {
        self.a.amax()
    }
}

/// `h − Σ_a π h` per state, subtracting the π-mean twice to remove round-off.
pub fn centre<T: Scalar>(h: &DMatrix<T>, pi: &Policy<T>) -> AdvantageTable<T> {
    let (ns, na) = h.shape();
    let mean = |m: &DMatrix<T>, s: usize| (0..na).fold(T::zero(), |acc, a| acc + m[(s, a)] * pi.prob()[(s, a)]);
    let mut a = h.clone();
    for s in 0..ns {
        let m = mean(&a, s);
        a.row_mut(s).add_scalar_mut(-m);
    }
    let mut raw = T::zero();
    for s in 0..ns {
        let m = mean(&a, s);
        raw = raw.max(m.abs());
        a.row_mut(s).add_scalar_mut(-m);
    }
    AdvantageTable {
        a,
        centering_residual: raw,
    }
}

/// Advantage of a Q-like table: `Q + τℓ − Σ_a π (Q + τℓ)`.
pub fn advantage_from_q<T: Scalar>(q: &DMatrix<T>, pi: &Policy<T>, tau: T) -> AdvantageTable<T> {
    centre(&(q + pi.log_density() * tau), pi)
}

/// `A^π_τ = Q^π_τ + τ ln dπ/dμ − V^π_τ`.
pub fn exact_advantage<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>) -> Result<AdvantageTable<T>> {
    let vf = evaluate_policy(pi, mdp, lit(FIXED_POINT_TOL))?;
    Ok(advantage_from_q(&vf.q, pi, mdp.tau()))
}

/// `A(s,a;θ) = Q_θ + τℓ − Σ_a π (Q_θ + τℓ)`.
pub fn approx_advantage<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<AdvantageTable<T>> {
    let q = q_of_theta(theta, features, mdp)?;
    Ok(advantage_from_q(&q, pi, mdp.tau()))
}

/// `ℓ_{n+1} = ℓ_n − λA − ln Σ_a π_n exp(−λA)`.
pub fn mirror_descent_step<T: Scalar>(
    pi: &Policy<T>,
    advantage: &AdvantageTable<T>,
    lambda: T,
    mu: &DVector<T>,
) -> Result<Policy<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::BadStepSizes {
            step: 0,
            reason: format!("mirror-descent step must be positive, got {lambda}"),
        });
    }
    if advantage.a.shape() != pi.log_density().shape() {
        return Err(Error::DimensionMismatch {
            what: "advantage table",
            expected: pi.log_density().len(),
            found: advantage.a.len(),
        });
    }
    let f = pi.log_density() - &advantage.a * lambda;
    Policy::from_logits(&f, mu)
}

/// `dℓ/dt = −A(·;θ)`; in density form `∂_t π = −A π`.
pub fn fisher_rao_rhs<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<DMatrix<T>> {
    Ok(-approx_advantage(theta, pi, mdp, features)?.a)
}

/// `∂_t π = −A π` for a given advantage table.
pub fn density_rate<T: Scalar>(advantage: &AdvantageTable<T>, pi: &Policy<T>) -> DMatrix<T> {
    -advantage.a.component_mul(pi.prob())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::best_parameters;
    use crate::dp::solve_optimal;
    use crate::mdp::{random_policy, random_vector, sample_random_mdp, Structure};

    #[test]
    fn optimal_advantage_vanishes() {
        let inst = sample_random_mdp::<f64>(3, 3, 2, 0.8, 0.5, Structure::TabularOnehot).unwrap();
        let opt = solve_optimal(&inst.mdp, 1e-12).unwrap();
        let adv = exact_advantage(&opt.policy, &inst.mdp).unwrap();
        assert!(adv.sup_norm() < 1e-8);
    }

    #[test]
    fn realisable_critic_reproduces_exact_advantage() {
        let inst = sample_random_mdp::<f64>(4, 3, 3, 0.7, 0.3, Structure::TabularOnehot).unwrap();
        let pi = random_policy(1, &inst.mdp, 1.0);
        let best = best_parameters(&pi, &inst.mdp, &inst.features).unwrap();
        let a = approx_advantage(&best.theta, &pi, &inst.mdp, &inst.features).unwrap();
        let b = exact_advantage(&pi, &inst.mdp).unwrap();
        assert!((a.a - b.a).amax() < 1e-9);
    }

    #[test]
    fn zero_critic_at_reference_has_zero_advantage() {
        let inst = sample_random_mdp::<f64>(4, 3, 3, 0.7, 0.3, Structure::TabularOnehot).unwrap();
        let pi = Policy::reference(3, inst.mdp.mu());
        let a = approx_advantage(&DVector::zeros(9), &pi, &inst.mdp, &inst.features).unwrap();
        assert_eq!(a.sup_norm(), 0.0);
    }

    #[test]
    fn mirror_descent_limits() {
        let inst = sample_random_mdp::<f64>(5, 3, 3, 0.7, 0.3, Structure::TabularOnehot).unwrap();
        let m = &inst.mdp;
        let pi = random_policy(2, m, 1.0);
        let th = random_vector(3, 9, 1.0);
        let adv = approx_advantage(&th, &pi, m, &inst.features).unwrap();
        let tiny = mirror_descent_step(&pi, &adv, 1e-12, m.mu()).unwrap();
        assert!((tiny.log_density() - pi.log_density()).amax() < 1e-10);
        let zero = AdvantageTable {
            a: DMatrix::zeros(3, 3),
            centering_residual: 0.0,
        };
        let same = mirror_descent_step(&pi, &zero, 0.7, m.mu()).unwrap();
        assert!((same.log_density() - pi.log_density()).amax() < 1e-14);
        let lam = 1e-6;
        let next = mirror_descent_step(&pi, &adv, lam, m.mu()).unwrap();
        let fd = (next.prob() - pi.prob()) / lam;
        assert!((fd - density_rate(&adv, &pi)).amax() < 1e-4);
    }

    #[test]
    fn fisher_rao_conserves_mass() {
        let inst = sample_random_mdp::<f64>(6, 4, 2, 0.5, 1.0, Structure::TabularOnehot).unwrap();
        let pi = random_policy(3, &inst.mdp, 2.0);
        let th = random_vector(4, 8, 3.0);
        let rhs = fisher_rao_rhs(&th, &pi, &inst.mdp, &inst.features).unwrap();
        for s in 0..4 {
            let m: f64 = (0..2).map(|a| rhs[(s, a)] * pi.prob()[(s, a)]).sum();
            assert!(m.abs() < 1e-12);
        }
    }
}
