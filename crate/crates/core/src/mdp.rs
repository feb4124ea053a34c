//! Finite entropy-regularised MDPs, feature maps, policies and random instances.
//!
//! State-action pairs are flattened row-major: index `s * n_actions + a`.
//! The transition kernel is stored as an `(|S|·|A|) × |S|` matrix whose row
//! `(s, a)` is `P(·|s, a)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{from_usize, kl_kernel, lit, log_sum_exp_weighted, to_f64, Scalar};

/// Tolerance applied to every probability vector before exact renormalisation.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Unvalidated MDP description as nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMdp<T> {
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<T>>>,
    /// `cost[s][a]`.
    pub cost: Vec<Vec<T>>,
    pub gamma: T,
    pub tau: T,
    pub mu: Vec<T>,
    /// Defaults to uniform when absent.
    pub beta: Option<Vec<Vec<T>>>,
}

/// Validated finite MDP `(S, A, P, c, γ)` with regulariser `τ`, reference
/// action measure `μ` and full-support state-action distribution `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp<T: Scalar> {
    n_states: usize,
    n_actions: usize,
    transition: DMatrix<T>,
    cost: DMatrix<T>,
    gamma: T,
    tau: T,
    mu: DVector<T>,
    beta: DMatrix<T>,
    rho: DVector<T>,
}

/// Probability tolerance widened to the resolution of `T`.
fn probability_tol<T: Scalar>() -> f64 {
    PROBABILITY_TOL.max(64.0 * crate::scalar::epsilon::<T>())
}

fn check_probability<T: Scalar>(v: impl Iterator<Item = T>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    for x in v {
        let x = to_f64(x);
        sum += x;
        min = min.min(x);
    }
    (sum, min)
}

impl<T: Scalar> FiniteMdp<T> {
    /// Validates and renormalises the model.
    ///
    /// `transition` is `(|S|·|A|) × |S|`, `cost` and `beta` are `|S| × |A|`.
    pub fn new(
        transition: DMatrix<T>,
        cost: DMatrix<T>,
        gamma: T,
        tau: T,
        mu: DVector<T>,
        beta: Option<DMatrix<T>>,
    ) -> Result<Self> {
        let (n_states, n_actions) = cost.shape();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::EmptySpace);
        }
        let n_sa = n_states * n_actions;
        if transition.nrows() != n_sa {
            return Err(Error::DimensionMismatch {
                what: "transition rows",
                expected: n_sa,
                found: transition.nrows(),
            });
        }
        if transition.ncols() != n_states {
            return Err(Error::DimensionMismatch {
                what: "transition columns",
                expected: n_states,
                found: transition.ncols(),
            });
        }
        if mu.len() != n_actions {
            return Err(Error::DimensionMismatch {
                what: "mu",
                expected: n_actions,
                found: mu.len(),
            });
        }
        let g = to_f64(gamma);
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::BadDiscount(g));
        }
        let t = to_f64(tau);
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::BadRegulariser(t));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                if !cost[(s, a)].is_finite() {
                    return Err(Error::NonFiniteCost { state: s, action: a });
                }
            }
        }

        let mut transition = transition;
        for s in 0..n_states {
            for a in 0..n_actions {
                let r = s * n_actions + a;
                let (sum, min) = check_probability(transition.row(r).iter().copied());
                if !(min >= 0.0) || !((sum - 1.0).abs() <= probability_tol::<T>()) {
                    return Err(Error::NonStochasticRow {
                        state: s,
                        action: a,
                        sum,
                        min,
                    });
                }
                let total = transition.row(r).sum();
                transition.row_mut(r).unscale_mut(total);
            }
        }

        let (sum, min) = check_probability(mu.iter().copied());
        if !(min > 0.0) {
            return Err(Error::BadReferenceMeasure {
                reason: format!("entries must be positive (min {min})"),
            });
        }
        if !((sum - 1.0).abs() <= probability_tol::<T>()) {
            return Err(Error::BadReferenceMeasure {
                reason: format!("entries sum to {sum}"),
            });
        }
        let mu_total = mu.sum();
        let mu = mu.unscale(mu_total);

        let beta = match beta {
            Some(b) => {
                if b.shape() != (n_states, n_actions) {
                    return Err(Error::DimensionMismatch {
                        what: "beta",
                        expected: n_sa,
                        found: b.len(),
                    });
                }
                for s in 0..n_states {
                    for a in 0..n_actions {
                        let v = to_f64(b[(s, a)]);
                        if !(v > 0.0) {
                            return Err(Error::NonFullSupportBeta {
                                state: s,
                                action: a,
                                value: v,
                            });
                        }
                    }
                }
                let (sum, _) = check_probability(b.iter().copied());
                if !((sum - 1.0).abs() <= probability_tol::<T>()) {
                    return Err(Error::BetaNotNormalised { sum });
                }
                let total = b.sum();
                b.unscale(total)
            }
            None => DMatrix::from_element(n_states, n_actions, T::one() / from_usize(n_sa)),
        };
        let rho = DVector::from_fn(n_states, |s, _| beta.row(s).sum());

        Ok(Self {
            n_states,
            n_actions,
            transition,
            cost,
            gamma,
            tau,
            mu,
            beta,
            rho,
        })
    }

    /// Replaces `β` (and hence `ρ`), revalidating full support.
    pub fn with_beta(&self, beta: DMatrix<T>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.cost.clone(),
            self.gamma,
            self.tau,
            self.mu.clone(),
            Some(beta),
        )
    }

    /// Same model with a different discount.
    pub fn with_gamma(&self, gamma: T) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.cost.clone(),
            gamma,
            self.tau,
            self.mu.clone(),
            Some(self.beta.clone()),
        )
    }

    /// Same model with a different regulariser.
    pub fn with_tau(&self, tau: T) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.cost.clone(),
            self.gamma,
            tau,
            self.mu.clone(),
            Some(self.beta.clone()),
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
    /// `(|S|·|A|) × |S|` kernel, row `(s, a)` is `P(·|s, a)`.
    pub fn transition(&self) -> &DMatrix<T> {
        &self.transition
    }
    pub fn cost(&self) -> &DMatrix<T> {
        &self.cost
    }
    pub fn gamma(&self) -> T {
        self.gamma
    }
    pub fn tau(&self) -> T {
        self.tau
    }
    pub fn mu(&self) -> &DVector<T> {
        &self.mu
    }
    pub fn beta(&self) -> &DMatrix<T> {
        &self.beta
    }
    pub fn rho(&self) -> &DVector<T> {
        &self.rho
    }
    /// `|c|_∞`.
    pub fn cost_sup(&self) -> T {
        crate::scalar::sup_norm(&self.cost)
    }
}

/// Builds a validated model from nested arrays.
pub fn build_mdp<T: Scalar>(raw: &RawMdp<T>) -> Result<FiniteMdp<T>> {
    let ns = raw.transition.len();
    if ns == 0 {
        return Err(Error::EmptySpace);
    }
    let na = raw.transition[0].len();
    if na == 0 {
        return Err(Error::EmptySpace);
    }
    let mut transition = DMatrix::zeros(ns * na, ns);
    for (s, row) in raw.transition.iter().enumerate() {
        if row.len() != na {
            return Err(Error::DimensionMismatch {
                what: "transition actions",
                expected: na,
                found: row.len(),
            });
        }
        for (a, probs) in row.iter().enumerate() {
            if probs.len() != ns {
                return Err(Error::DimensionMismatch {
                    what: "transition next-states",
                    expected: ns,
                    found: probs.len(),
                });
            }
            for (s2, &p) in probs.iter().enumerate() {
                transition[(s * na + a, s2)] = p;
            }
        }
    }
    let cost = nested_to_matrix(&raw.cost, ns, na, "cost")?;
    let beta = match &raw.beta {
        Some(b) => Some(nested_to_matrix(b, ns, na, "beta")?),
        None => None,
    };
    FiniteMdp::new(
        transition,
        cost,
        raw.gamma,
        raw.tau,
        DVector::from_column_slice(&raw.mu),
        beta,
    )
}

pub(crate) fn nested_to_matrix<T: Scalar>(
    rows: &[Vec<T>],
    nrows: usize,
    ncols: usize,
    what: &'static str,
) -> Result<DMatrix<T>> {
    if rows.len() != nrows {
        return Err(Error::DimensionMismatch {
            what,
            expected: nrows,
            found: rows.len(),
        });
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::DimensionMismatch {
                what,
                expected: ncols,
                found: r.len(),
            });
        }
        for (j, &v) in r.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub(crate) fn matrix_to_nested<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `Σ_ξ = Σ_{s,a} ξ(s,a) φ(s,a) φ(s,a)ᵀ` for a weight table `ξ` over pairs.
pub fn weighted_gram<T: Scalar>(phi: &DMatrix<T>, weights: &DMatrix<T>) -> DMatrix<T> {
    let w = crate::scalar::flatten_sa(weights);
    let mut scaled = phi.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let g = phi.transpose() * scaled;
    // exact symmetry for the eigensolver
    (&g + g.transpose()) * lit::<T>(0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min<T: Scalar>(m: &DMatrix<T>) -> T {
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().fold(eig.eigenvalues[0], |a, &b| a.min(b))
}

/// Feature vectors `φ(s, a) ∈ R^N`, one row per flattened pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    phi: DMatrix<T>,
    scale: T,
}

impl<T: Scalar> FeatureMap<T> {
    /// Rescales rows globally so that `max |φ(s,a)| ≤ 1` and checks that the
    /// Gram matrix under the model's `β` is non-singular.
    pub fn new(phi: DMatrix<T>, mdp: &FiniteMdp<T>) -> Result<Self> {
        if phi.nrows() != mdp.n_pairs() {
            return Err(Error::DimensionMismatch {
                what: "feature rows",
                expected: mdp.n_pairs(),
                found: phi.nrows(),
            });
        }
        if phi.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: 1,
                found: 0,
            });
        }
        let mut max_norm = T::zero();
        for (i, row) in phi.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteFeature {
                    state: i / mdp.n_actions(),
                    action: i % mdp.n_actions(),
                });
            }
            max_norm = max_norm.max(row.norm());
        }
        let (phi, scale) = if max_norm > T::one() {
            let scale = T::one() / max_norm;
            (phi * scale, scale)
        } else {
            (phi, T::one())
        };
        let lmin = lambda_min(&weighted_gram(&phi, mdp.beta()));
        if !(to_f64(lmin) > crate::critic::SINGULAR_GRAM_TOL) {
            return Err(Error::SingularGram {
                lambda_min: to_f64(lmin),
            });
        }
        Ok(Self { phi, scale })
    }

    /// One-hot encoding of the pairs, `N = |S|·|A|`.
    pub fn one_hot(mdp: &FiniteMdp<T>) -> Self {
        Self {
            phi: DMatrix::identity(mdp.n_pairs(), mdp.n_pairs()),
            scale: T::one(),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }
    pub fn phi(&self) -> &DMatrix<T> {
        &self.phi
    }
    /// Global factor applied to the raw rows at construction (1 if none).
    pub fn scale(&self) -> T {
        self.scale
    }
}

/// Stationary stochastic policy stored as `ℓ(s,a) = ln dπ/dμ (s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T: Scalar> {
    log_density: DMatrix<T>,
    prob: DMatrix<T>,
}

impl<T: Scalar> Policy<T> {
    /// `ℓ = f − ln Σ_a exp(f(s,a)) μ(a)`, computed per state in log domain.
    pub fn from_logits(f: &DMatrix<T>, mu: &DVector<T>) -> Result<Self> {
        let (ns, na) = f.shape();
        if na != mu.len() {
            return Err(Error::DimensionMismatch {
                what: "logit columns",
                expected: mu.len(),
                found: na,
            });
        }
        for s in 0..ns {
            for a in 0..na {
                if !f[(s, a)].is_finite() {
                    return Err(Error::NonFiniteLogit { state: s, action: a });
                }
            }
        }
        let mu_s = mu.as_slice();
        let mut log_density = f.clone();
        let mut buf = vec![T::zero(); na];
        for s in 0..ns {
            for (a, b) in buf.iter_mut().enumerate() {
                *b = f[(s, a)];
            }
            let z = log_sum_exp_weighted(&buf, mu_s);
            for a in 0..na {
                log_density[(s, a)] -= z;
            }
        }
        let prob = DMatrix::from_fn(ns, na, |s, a| log_density[(s, a)].exp() * mu[a]);
        Ok(Self { log_density, prob })
    }

    /// `π = μ` in every state.
    pub fn reference(n_states: usize, mu: &DVector<T>) -> Self {
        let na = mu.len();
        Self {
            log_density: DMatrix::zeros(n_states, na),
            prob: DMatrix::from_fn(n_states, na, |_, a| mu[a]),
        }
    }

    pub fn n_states(&self) -> usize {
        self.log_density.nrows()
    }
    pub fn n_actions(&self) -> usize {
        self.log_density.ncols()
    }
    /// `ℓ(s,a) = ln dπ/dμ`.
    pub fn log_density(&self) -> &DMatrix<T> {
        &self.log_density
    }
    /// `π(a|s)`.
    pub fn prob(&self) -> &DMatrix<T> {
        &self.prob
    }

    /// `KL(π(·|s) | μ)` per state, computed as `Σ_a μ(a) h(ℓ(s,a))`.
    pub fn kl_to_reference(&self, mu: &DVector<T>) -> DVector<T> {
        DVector::from_fn(self.n_states(), |s, _| {
            (0..self.n_actions()).fold(T::zero(), |acc, a| {
                acc + mu[a] * kl_kernel(self.log_density[(s, a)])
            })
        })
    }

    /// `K = max_s KL(π(·|s) | μ)`.
    pub fn max_kl(&self, mu: &DVector<T>) -> T {
        self.kl_to_reference(mu)
            .iter()
            .fold(T::zero(), |a, &b| a.max(b))
    }

    /// `KL(π(·|s) | π'(·|s))` per state, cancellation-free near `π = π'`.
    pub fn kl_to(&self, other: &Policy<T>) -> DVector<T> {
        DVector::from_fn(self.n_states(), |s, _| {
            (0..self.n_actions()).fold(T::zero(), |acc, a| {
                let d = self.log_density[(s, a)] - other.log_density[(s, a)];
                acc + other.prob[(s, a)] * kl_kernel(d)
            })
        })
    }

    /// `max_s |Σ_a exp(ℓ(s,a)) μ(a) − 1|`.
    pub fn normalisation_residual(&self, mu: &DVector<T>) -> T {
        (0..self.n_states()).fold(T::zero(), |acc, s| {
            let tot = (0..self.n_actions())
                .fold(T::zero(), |t, a| t + self.log_density[(s, a)].exp() * mu[a]);
            acc.max((tot - T::one()).abs())
        })
    }
}

/// Normalises arbitrary finite logits into an admissible policy for `mdp`.
pub fn policy_from_logits<T: Scalar>(f: &DMatrix<T>, mdp: &FiniteMdp<T>) -> Result<Policy<T>> {
    if f.nrows() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            what: "logit rows",
            expected: mdp.n_states(),
            found: f.nrows(),
        });
    }
    Policy::from_logits(f, mdp.mu())
}

/// Linear-MDP factorisation `c = ⟨w, φ⟩`, `P(·|s,a) = Σ_i φ_i(s,a) ψ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdpSpec<T: Scalar> {
    pub w: DVector<T>,
    /// `N × |S|`; row `i` is the signed measure `ψ_i`.
    pub psi: DMatrix<T>,
}

impl<T: Scalar> LinearMdpSpec<T> {
    pub fn reconstruct_cost(&self, features: &FeatureMap<T>, mdp: &FiniteMdp<T>) -> DMatrix<T> {
        let flat = features.phi() * &self.w;
        crate::scalar::unflatten_sa(&flat, mdp.n_states(), mdp.n_actions())
    }

    pub fn reconstruct_kernel(&self, features: &FeatureMap<T>) -> DMatrix<T> {
        features.phi() * &self.psi
    }

    /// Max-norm residuals `(cost, kernel)` against the model.
    pub fn residuals(&self, features: &FeatureMap<T>, mdp: &FiniteMdp<T>) -> (T, T) {
        let dc = self.reconstruct_cost(features, mdp) - mdp.cost();
        let dp = self.reconstruct_kernel(features) - mdp.transition();
        (crate::scalar::sup_norm(&dc), crate::scalar::sup_norm(&dp))
    }
}

/// Feature structure for [`sample_random_mdp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Structure {
    /// Identity features, `N = |S|·|A|`; realisable for every policy.
    TabularOnehot,
    /// Features on the probability simplex with a linear kernel; realisable.
    LinearMdp { dim: usize },
    /// Gaussian features; realisability not guaranteed.
    DenseRandom { dim: usize },
}

/// A sampled model together with its feature map.
#[derive(Debug, Clone)]
pub struct RandomInstance<T: Scalar> {
    pub mdp: FiniteMdp<T>,
    pub features: FeatureMap<T>,
    pub linear: Option<LinearMdpSpec<T>>,
}

const LINEAR_MDP_ATTEMPTS: usize = 16;

fn simplex_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Dirichlet(1, ..., 1) via normalised exponentials
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Seeded random model with uniform `μ` and `β`.
pub fn sample_random_mdp<T: Scalar>(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    gamma: T,
    tau: T,
    structure: Structure,
) -> Result<RandomInstance<T>> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::EmptySpace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sa = n_states * n_actions;
    let mu = DVector::from_element(n_actions, T::one() / from_usize(n_actions));
    let conv = |v: f64| -> T { lit(v) };

    match structure {
        Structure::TabularOnehot | Structure::DenseRandom { .. } => {
            let mut transition = DMatrix::zeros(n_sa, n_states);
            for r in 0..n_sa {
                for (s2, p) in simplex_sample(&mut rng, n_states).into_iter().enumerate() {
                    transition[(r, s2)] = conv(p);
                }
            }
            let cost = DMatrix::from_fn(n_states, n_actions, |_, _| conv(rng.gen::<f64>()));
            let mdp = FiniteMdp::new(transition, cost, gamma, tau, mu, None)?;
            let features = match structure {
                Structure::DenseRandom { dim } => {
                    let phi = DMatrix::from_fn(n_sa, dim, |_, _| conv(standard_normal(&mut rng)));
                    FeatureMap::new(phi, &mdp)?
                }
                _ => FeatureMap::one_hot(&mdp),
            };
            Ok(RandomInstance {
                mdp,
                features,
                linear: None,
            })
        }
        Structure::LinearMdp { dim } => {
            if dim == 0 {
                return Err(Error::DimensionMismatch {
                    what: "linear-MDP dimension",
                    expected: 1,
                    found: 0,
                });
            }
            for _ in 0..LINEAR_MDP_ATTEMPTS {
                let mut phi = DMatrix::zeros(n_sa, dim);
                for r in 0..n_sa {
                    for (i, p) in simplex_sample(&mut rng, dim).into_iter().enumerate() {
                        phi[(r, i)] = conv(p);
                    }
                }
                let mut psi = DMatrix::zeros(dim, n_states);
                for i in 0..dim {
                    for (s2, p) in simplex_sample(&mut rng, n_states).into_iter().enumerate() {
                        psi[(i, s2)] = conv(p);
                    }
                }
                let w = DVector::from_fn(dim, |_, _| conv(rng.gen::<f64>()));
                let flat_cost = &phi * &w;
                let cost = crate::scalar::unflatten_sa(&flat_cost, n_states, n_actions);
                let transition = &phi * &psi;
                let mdp = match FiniteMdp::new(transition, cost, gamma, tau, mu.clone(), None) {
                    Ok(m) => m,
                    Err(Error::NonStochasticRow { .. }) => continue,
                    Err(e) => return Err(e),
                };
                match FeatureMap::new(phi, &mdp) {
                    Ok(features) => {
                        // simplex rows already satisfy |φ| ≤ 1, so no rescaling occurred
                        let linear = LinearMdpSpec { w, psi };
                        return Ok(RandomInstance {
                            mdp,
                            features,
                            linear: Some(linear),
                        });
                    }
                    Err(Error::SingularGram { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::InfeasibleSpec {
                attempts: LINEAR_MDP_ATTEMPTS,
            })
        }
    }
}

/// Deterministic random policy with standard-normal logits scaled by `spread`.
pub fn random_policy<T: Scalar>(seed: u64, mdp: &FiniteMdp<T>, spread: f64) -> Policy<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |_, _| {
        lit::<T>(spread * standard_normal(&mut rng))
    });
    Policy::from_logits(&f, mdp.mu()).expect("finite logits")
}

/// Deterministic random vector with standard-normal entries scaled by `spread`.
pub fn random_vector<T: Scalar>(seed: u64, n: usize, spread: f64) -> DVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| lit::<T>(spread * standard_normal(&mut rng)))
}

/// Deterministic random full-support distribution over pairs.
pub fn random_distribution<T: Scalar>(seed: u64, n_states: usize, n_actions: usize) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = simplex_sample(&mut rng, n_states * n_actions);
    // keep every entry bounded away from zero
    let floor = 0.1 / (n_states * n_actions) as f64;
    let total: f64 = p.iter().map(|x| x + floor).sum();
    DMatrix::from_fn(n_states, n_actions, |s, a| {
        lit::<T>((p[s * n_actions + a] + floor) / total)
    })
}
