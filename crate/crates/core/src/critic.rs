//! Linear critic `Q(s,a;θ) = ⟨θ, φ(s,a)⟩`: Bellman error, semi-gradient,
//! squared loss, best parameters and the semi-gradient geometry inequality.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dp::{bellman_apply, evaluate_policy, ValueFunctions, FIXED_POINT_TOL};
use crate::error::{Error, Result};
use crate::mdp::{lambda_min, weighted_gram, FeatureMap, FiniteMdp, Policy};
use crate::occupancy::{pair_kernel, pair_occupancy};
use crate::scalar::{flatten_sa, lit, to_f64, unflatten_sa, Scalar};

/// Gram matrices with `λ_min` at or below this are treated as singular.
pub const SINGULAR_GRAM_TOL: f64 = 1e-12;
/// Largest sup-norm fit residual accepted as realisability of `Q^π_τ`.
pub const REALISABILITY_TOL: f64 = 1e-8;

/// Gram matrix under `β` and the derived contraction constant.
#[derive(Debug, Clone)]
pub struct GramData<T: Scalar> {
    pub sigma_beta: DMatrix<T>,
    pub lambda_beta: T,
    /// `Γ = λ_β (1−γ)(1−√γ)`.
    pub gamma_const: T,
    chol: Cholesky<T, Dyn>,
}

impl<T: Scalar> GramData<T> {
    /// `Σ_β^{-1} x`.
    pub fn solve(&self, x: &DVector<T>) -> DVector<T> {
        self.chol.solve(x)
    }
}

pub fn gram_data<T: Scalar>(mdp: &FiniteMdp<T>, features: &FeatureMap<T>) -> Result<GramData<T>> {
    check_features(mdp, features)?;
    let sigma_beta = weighted_gram(features.phi(), mdp.beta());
    let lambda_beta = lambda_min(&sigma_beta);
    if !(to_f64(lambda_beta) > SINGULAR_GRAM_TOL) {
        return Err(Error::SingularGram {
            lambda_min: to_f64(lambda_beta),
        });
    }
    let chol = Cholesky::new(sigma_beta.clone()).ok_or(Error::SingularGram {
        lambda_min: to_f64(lambda_beta),
    })?;
    let g = mdp.gamma();
    Ok(GramData {
        gamma_const: lambda_beta * (T::one() - g) * (T::one() - g.sqrt()),
        sigma_beta,
        lambda_beta,
        chol,
    })
}

fn check_features<T: Scalar>(mdp: &FiniteMdp<T>, features: &FeatureMap<T>) -> Result<()> {
    if features.phi().nrows() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch {
            what: "feature rows",
            expected: mdp.n_pairs(),
            found: features.phi().nrows(),
        });
    }
    Ok(())
}

fn check_theta<T: Scalar>(theta: &DVector<T>, features: &FeatureMap<T>) -> Result<()> {
    if theta.len() != features.dim() {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: features.dim(),
            found: theta.len(),
        });
    }
    Ok(())
}

/// `Q_θ` as an `|S| × |A|` table.
pub fn q_of_theta<T: Scalar>(theta: &DVector<T>, features: &FeatureMap<T>, mdp: &FiniteMdp<T>) -> Result<DMatrix<T>> {
    check_features(mdp, features)?;
    check_theta(theta, features)?;
    Ok(unflatten_sa(&(features.phi() * theta), mdp.n_states(), mdp.n_actions()))
}

/// `Φᵀ diag(w) x` for pair weights `w` and a pair vector `x`.
fn weighted_project<T: Scalar>(phi: &DMatrix<T>, w: &DVector<T>, x: &DVector<T>) -> DVector<T> {
    phi.tr_mul(&w.component_mul(x))
}

/// Bellman residual `Q_θ − T^π Q_θ` flattened, together with `d^π_β` flattened.
fn bellman_error<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let q = q_of_theta(theta, features, mdp)?;
    let delta = &q - bellman_apply(&q, pi, mdp)?;
    let d = pair_occupancy(pi, mdp, mdp.beta())?;
    Ok((flatten_sa(&delta), flatten_sa(&d)))
}

/// `½ Σ d^π_β (Q_θ − T^π Q_θ)²`.
pub fn msbe<T: Scalar>(theta: &DVector<T>, pi: &Policy<T>, mdp: &FiniteMdp<T>, features: &FeatureMap<T>) -> Result<T> {
    let (delta, d) = bellman_error(theta, pi, mdp, features)?;
    Ok(d.dot(&delta.component_mul(&delta)) * lit(0.5))
}

/// `g(θ,π) = Σ d^π_β (Q_θ − T^π Q_θ) φ`.
pub fn semi_gradient<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<DVector<T>> {
    let (delta, d) = bellman_error(theta, pi, mdp, features)?;
    Ok(weighted_project(features.phi(), &d, &delta))
}

/// Affine form of the semi-gradient for a fixed policy: `g(θ,π) = A θ − b`.
#[derive(Debug, Clone)]
pub struct CriticSystem<T: Scalar> {
    /// `Φᵀ D (I − γ P^π) Φ`.
    pub a: DMatrix<T>,
    /// `Φᵀ D (c + γτ P KL)`.
    pub b: DVector<T>,
    /// `d^π_β` flattened.
    pub occupancy: DVector<T>,
}

impl<T: Scalar> CriticSystem<T> {
    pub fn gradient(&self, theta: &DVector<T>) -> DVector<T> {
        &self.a * theta - &self.b
    }
}

pub fn linear_system<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>, features: &FeatureMap<T>) -> Result<CriticSystem<T>> {
    check_features(mdp, features)?;
    let phi = features.phi();
    let n = mdp.n_pairs();
    let d = flatten_sa(&pair_occupancy(pi, mdp, mdp.beta())?);
    let m = DMatrix::identity(n, n) - pair_kernel(pi, mdp) * mdp.gamma();
    let mut dm = m * phi;
    for (i, mut row) in dm.row_iter_mut().enumerate() {
        row *= d[i];
    }
    let a = phi.tr_mul(&dm);
    let kl = pi.kl_to_reference(mdp.mu());
    let r = flatten_sa(mdp.cost()) + mdp.transition() * kl * (mdp.gamma() * mdp.tau());
    let b = weighted_project(phi, &d, &r);
    Ok(CriticSystem { a, b, occupancy: d })
}

/// Squared loss `½ Σ ζ (⟨θ,φ⟩ − Q^π_τ)²` and its gradient.
pub fn squared_loss_and_grad<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    zeta: &DMatrix<T>,
) -> Result<(T, DVector<T>)> {
    let vf = evaluate_policy(pi, mdp, lit(FIXED_POINT_TOL))?;
    squared_loss_with_target(theta, &vf.q, features, mdp, zeta)
}

/// Same as [`squared_loss_and_grad`] with a precomputed target table.
pub fn squared_loss_with_target<T: Scalar>(
    theta: &DVector<T>,
    target: &DMatrix<T>,
    features: &FeatureMap<T>,
    mdp: &FiniteMdp<T>,
    zeta: &DMatrix<T>,
) -> Result<(T, DVector<T>)> {
    if zeta.shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch {
            what: "zeta",
            expected: mdp.n_pairs(),
            found: zeta.len(),
        });
    }
    let q = q_of_theta(theta, features, mdp)?;
    let e = flatten_sa(&(q - target));
    let w = flatten_sa(zeta);
    let loss = w.dot(&e.component_mul(&e)) * lit(0.5);
    Ok((loss, weighted_project(features.phi(), &w, &e)))
}

/// `θ_π = Σ_β^{-1} Σ β φ Q^π_τ` with the sup-norm fit residual.
#[derive(Debug, Clone)]
pub struct BestParameters<T: Scalar> {
    pub theta: DVector<T>,
    /// `max_{s,a} |⟨θ_π, φ⟩ − Q^π_τ|`.
    pub residual: T,
    pub values: ValueFunctions<T>,
}

impl<T: Scalar> BestParameters<T> {
    pub fn realisable(&self) -> bool {
        to_f64(self.residual) <= REALISABILITY_TOL
    }
}

pub fn best_parameters<T: Scalar>(pi: &Policy<T>, mdp: &FiniteMdp<T>, features: &FeatureMap<T>) -> Result<BestParameters<T>> {
    let gram = gram_data(mdp, features)?;
    best_parameters_with(pi, mdp, features, &gram)
}

pub fn best_parameters_with<T: Scalar>(
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    gram: &GramData<T>,
) -> Result<BestParameters<T>> {
    let values = evaluate_policy(pi, mdp, lit(FIXED_POINT_TOL))?;
    let (theta, residual) = fit_table(&values.q, mdp, features, gram);
    Ok(BestParameters {
        theta,
        residual,
        values,
    })
}

/// `β`-weighted least-squares fit of a pair table; returns `(θ, sup residual)`.
pub fn fit_table<T: Scalar>(
    table: &DMatrix<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
    gram: &GramData<T>,
) -> (DVector<T>, T) {
    let y = flatten_sa(table);
    let rhs = weighted_project(features.phi(), &flatten_sa(mdp.beta()), &y);
    let theta = gram.solve(&rhs);
    let fit = features.phi() * &theta - y;
    (theta, fit.amax())
}

/// Both sides of `−⟨g(θ,π), θ−θ_π⟩ ≤ −(1−√γ)(1−γ)⟨∇L(θ,π;β), θ−θ_π⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryCheck<T> {
    pub lhs: T,
    pub rhs: T,
}

impl<T: Scalar> GeometryCheck<T> {
    pub fn holds(&self, slack: T) -> bool {
        self.lhs <= self.rhs + slack
    }
}

pub fn geometry_inequality_check<T: Scalar>(
    theta: &DVector<T>,
    pi: &Policy<T>,
    mdp: &FiniteMdp<T>,
    features: &FeatureMap<T>,
) -> Result<GeometryCheck<T>> {
    let best = best_parameters(pi, mdp, features)?;
    if !best.realisable() {
        return Err(Error::NotRealisable {
            residual: to_f64(best.residual),
        });
    }
    let diff = theta - &best.theta;
    let g = semi_gradient(theta, pi, mdp, features)?;
    let (_, grad) = squared_loss_with_target(theta, &best.values.q, features, mdp, mdp.beta())?;
    let gm = mdp.gamma();
    let k = (T::one() - gm.sqrt()) * (T::one() - gm);
    Ok(GeometryCheck {
        lhs: -g.dot(&diff),
        rhs: -k * grad.dot(&diff),
    })
}
