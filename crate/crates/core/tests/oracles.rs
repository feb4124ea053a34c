//! Independent oracles for values derived from the definitions.

use acflow::actor::{approx_advantage, exact_advantage, fisher_rao_rhs};
use acflow::analysis::{
    bound_constants, check_gronwall_kl, check_lyapunov_drift, dq_dt_oracle, dtheta_pi_dt, exp_convolution, Status,
};
use acflow::critic::{best_parameters, gram_data, msbe, q_of_theta, semi_gradient};
use acflow::dp::{evaluate_policy, solve_optimal};
use acflow::flow::{
    flow_rhs, integrate, integrate_with, run_two_timescale, uniform_grid, FlowContext, FlowState, IntegrateOptions,
    Method, TimescaleSchedule, TwoTimescaleOptions, KL_GUARD, THETA_GUARD,
};
use acflow::mdp::{
    build_mdp, random_policy, random_vector, sample_random_mdp, FeatureMap, FiniteMdp, Policy, RawMdp, Structure,
};
use acflow::occupancy::occupancy_measures;
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};

fn inst(seed: u64, ns: usize, na: usize, g: f64, tau: f64, s: Structure) -> (FiniteMdp<f64>, FeatureMap<f64>) {
    let i = sample_random_mdp::<f64>(seed, ns, na, g, tau, s).unwrap();
    (i.mdp, i.features)
}

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

fn p(mdp: &FiniteMdp<f64>, s: usize, a: usize, s2: usize) -> f64 {
    mdp.transition()[(s * mdp.n_actions() + a, s2)]
}

#[test]
fn random_logits_match_direct_normalisation() {
    let mu = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let f = DMatrix::from_fn(3, 4, |s, a| ((s * 7 + a * 3) as f64).sin() * 4.0);
    let pi = Policy::from_logits(&f, &mu).unwrap();
    for s in 0..3 {
        let z: f64 = (0..4).map(|a| f[(s, a)].exp() * mu[a]).sum();
        for a in 0..4 {
            assert_relative_eq!(pi.prob()[(s, a)], f[(s, a)].exp() * mu[a] / z, max_relative = 1e-12);
        }
    }
}

#[test]
fn evaluation_matches_truncated_rollout() {
    let (mdp, _) = inst(40, 4, 3, 0.9, 0.3, Structure::TabularOnehot);
    let pi = random_policy(41, &mdp, 1.0);
    let kl = pi.kl_to_reference(mdp.mu());
    // V = Σ_n γⁿ P_πⁿ (c_π + τ KL)
    let (ns, na) = (4, 3);
    let p_pi = DMatrix::<f64>::from_fn(ns, ns, |s, s2| (0..na).map(|a| pi.prob()[(s, a)] * p(&mdp, s, a, s2)).sum());
    let r = DVector::from_fn(ns, |s, _| {
        (0..na).map(|a| pi.prob()[(s, a)] * mdp.cost()[(s, a)]).sum::<f64>() + mdp.tau() * kl[s]
    });
    let mut v = DVector::zeros(ns);
    let mut term = r.clone();
    let mut disc = 1.0;
    for _ in 0..100_000 {
        v += &term * disc;
        term = &p_pi * term;
        disc *= mdp.gamma();
        if disc < 1e-300 {
            break;
        }
    }
    let vf = evaluate_policy(&pi, &mdp, 1e-12).unwrap();
    assert!((vf.v - v).amax() < 1e-6);
}

#[test]
fn reference_policy_gives_unregularised_values() {
    let (mdp, _) = inst(42, 3, 2, 0.7, 2.0, Structure::TabularOnehot);
    let mu = Policy::reference(3, mdp.mu());
    let vf = evaluate_policy(&mu, &mdp, 1e-12).unwrap();
    // plain Q iteration without the KL term
    let mut q = DMatrix::zeros(3, 2);
    for _ in 0..2000 {
        let v = DVector::from_fn(3, |s, _| (0..2).map(|a| mu.prob()[(s, a)] * q[(s, a)]).sum::<f64>());
        q = DMatrix::from_fn(3, 2, |s, a| {
            mdp.cost()[(s, a)] + mdp.gamma() * (0..3).map(|s2| p(&mdp, s, a, s2) * v[s2]).sum::<f64>()
        });
    }
    assert!((vf.q - q).amax() < 1e-10);
}

#[test]
fn value_and_q_bounds() {
    for seed in 0..10 {
        let (mdp, _) = inst(seed, 4, 3, 0.8, 0.7, Structure::TabularOnehot);
        let pi = random_policy(seed + 1, &mdp, 2.0);
        let vf = evaluate_policy(&pi, &mdp, 1e-12).unwrap();
        for s in 0..4 {
            let v: f64 = (0..3)
                .map(|a| (vf.q[(s, a)] + mdp.tau() * pi.log_density()[(s, a)]) * pi.prob()[(s, a)])
                .sum();
            assert!((v - vf.v[s]).abs() < 1e-9);
        }
        let bound = (mdp.cost_sup() + mdp.tau() * mdp.gamma() * pi.max_kl(mdp.mu())) / (1.0 - mdp.gamma());
        assert!(vf.q.amax() <= bound + 1e-9);
    }
}

#[test]
fn optimal_q_is_soft_bellman_fixed_point() {
    let (mdp, _) = inst(7, 2, 2, 0.9, 0.2, Structure::TabularOnehot);
    let o = solve_optimal(&mdp, 1e-12).unwrap();
    let vstar = DVector::from_fn(2, |s, _| {
        let z: f64 = (0..2).map(|a| mdp.mu()[a] * (-o.q[(s, a)] / mdp.tau()).exp()).sum();
        -mdp.tau() * z.ln()
    });
    assert!((&vstar - &o.v).amax() < 1e-10);
    let back = evaluate_policy(&o.policy, &mdp, 1e-12).unwrap();
    assert!((back.v - o.v).amax() < 1e-8);
}

#[test]
fn occupancy_matches_truncated_series() {
    let (mdp, _) = inst(43, 4, 2, 0.6, 0.5, Structure::TabularOnehot);
    let pi = random_policy(44, &mdp, 1.0);
    let occ = occupancy_measures(&pi, &mdp).unwrap();
    let n = 8;
    let m = DMatrix::from_fn(n, n, |i, j| p(&mdp, i / 2, i % 2, j / 2) * pi.prob()[(j / 2, j % 2)]);
    let beta = DVector::from_fn(n, |i, _| mdp.beta()[(i / 2, i % 2)]);
    let mut d = DVector::zeros(n);
    let mut term = beta.clone();
    for k in 0..200 {
        d += &term * ((1.0 - 0.6) * 0.6f64.powi(k));
        term = m.transpose() * term;
    }
    let got = DVector::from_fn(n, |i, _| occ.d_sa[(i / 2, i % 2)]);
    assert!((got - d).amax() < 1e-10);
}

#[test]
fn critic_quantities_match_loops() {
    let (mdp, features) = inst(45, 3, 2, 0.5, 0.4, Structure::DenseRandom { dim: 3 });
    let pi = random_policy(46, &mdp, 1.0);
    let theta = random_vector(47, 3, 1.0);
    let phi = features.phi();
    let q = q_of_theta(&theta, &features, &mdp).unwrap();
    for s in 0..3 {
        for a in 0..2 {
            let mut x = 0.0;
            for i in 0..3 {
                x += theta[i] * phi[(s * 2 + a, i)];
            }
            assert!((q[(s, a)] - x).abs() < 1e-14);
        }
    }
    let kl = pi.kl_to_reference(mdp.mu());
    let d = occupancy_measures(&pi, &mdp).unwrap().d_sa;
    let (mut loss, mut g) = (0.0, DVector::zeros(3));
    for s in 0..3 {
        for a in 0..2 {
            let mut tq = mdp.cost()[(s, a)];
            for s2 in 0..3 {
                let inner: f64 = (0..2).map(|a2| q[(s2, a2)] * pi.prob()[(s2, a2)]).sum::<f64>() + mdp.tau() * kl[s2];
                tq += mdp.gamma() * p(&mdp, s, a, s2) * inner;
            }
            let delta = q[(s, a)] - tq;
            loss += 0.5 * d[(s, a)] * delta * delta;
            for i in 0..3 {
                g[i] += d[(s, a)] * delta * phi[(s * 2 + a, i)];
            }
        }
    }
    assert!((msbe(&theta, &pi, &mdp, &features).unwrap() - loss).abs() < 1e-12);
    assert!((semi_gradient(&theta, &pi, &mdp, &features).unwrap() - g).amax() < 1e-12);
}

#[test]
fn lambda_beta_matches_power_iteration() {
    let (mdp, features) = inst(48, 4, 2, 0.5, 0.4, Structure::DenseRandom { dim: 3 });
    let gram = gram_data(&mdp, &features).unwrap();
    let s = &gram.sigma_beta;
    // power iteration on (σ_max I − Σ) finds σ_max − λ_min
    let top = {
        let mut v = DVector::from_element(3, 1.0);
        let mut l = 0.0;
        for _ in 0..5000 {
            let w = s * &v;
            l = w.norm();
            v = w / l;
        }
        l
    };
    let shifted = DMatrix::identity(3, 3) * top - s;
    let mut v = DVector::from_vec(vec![1.0, -0.5, 0.25]);
    let mut l = 0.0;
    for _ in 0..20000 {
        let w = &shifted * &v;
        l = w.norm();
        v = w / l;
    }
    assert!((top - l - gram.lambda_beta).abs() < 1e-8);
}

#[test]
fn linear_mdp_best_parameters_follow_closed_form() {
    let i = sample_random_mdp::<f64>(2, 3, 2, 0.5, 1.0, Structure::LinearMdp { dim: 3 }).unwrap();
    let lin = i.linear.unwrap();
    let pi = random_policy(3, &i.mdp, 1.0);
    let best = best_parameters(&pi, &i.mdp, &i.features).unwrap();
    assert!(best.residual < 1e-8);
    let v = evaluate_policy(&pi, &i.mdp, 1e-12).unwrap().v;
    let closed = &lin.w + (&lin.psi * v) * i.mdp.gamma();
    assert!((best.theta - closed).amax() < 1e-8);
}

#[test]
fn dense_features_with_few_dimensions_are_not_realisable() {
    let (mdp, features) = inst(3, 2, 2, 0.5, 1.0, Structure::DenseRandom { dim: 2 });
    let pi = random_policy(1, &mdp, 1.0);
    assert!(best_parameters(&pi, &mdp, &features).unwrap().residual > 0.0);
}

#[test]
fn exact_advantage_matches_independent_assembly() {
    let (mdp, _) = inst(49, 4, 3, 0.7, 0.6, Structure::TabularOnehot);
    let pi = random_policy(50, &mdp, 1.0);
    let vf = evaluate_policy(&pi, &mdp, 1e-12).unwrap();
    let adv = exact_advantage(&pi, &mdp).unwrap();
    for s in 0..4 {
        for a in 0..3 {
            let x = vf.q[(s, a)] + mdp.tau() * pi.log_density()[(s, a)] - vf.v[s];
            assert!((adv.a[(s, a)] - x).abs() < 1e-10);
        }
    }
}

#[test]
fn flow_rhs_is_definitional() {
    let (mdp, features) = inst(51, 3, 2, 0.5, 0.5, Structure::TabularOnehot);
    let state = FlowState {
        t: 0.0,
        theta: random_vector(52, 6, 1.0),
        policy: random_policy(53, &mdp, 1.0),
    };
    let sch = TimescaleSchedule::Polynomial { eta0: 3.0, p: 0.5 };
    let (dth, dl) = flow_rhs(&state, &mdp, &features, &sch).unwrap();
    let g = semi_gradient(&state.theta, &state.policy, &mdp, &features).unwrap();
    assert!((dth + g * 3.0).amax() < 1e-13);
    assert_eq!(dl, fisher_rao_rhs(&state.theta, &state.policy, &mdp, &features).unwrap());
}

#[test]
fn single_point_flow_rhs() {
    let mdp = single_point();
    let features = FeatureMap::one_hot(&mdp);
    let state = FlowState {
        t: 0.0,
        theta: DVector::zeros(1),
        policy: Policy::reference(1, mdp.mu()),
    };
    let (dth, _) = flow_rhs(&state, &mdp, &features, &TimescaleSchedule::Constant { eta0: 1.0 }).unwrap();
    assert!((dth[0] - 0.5).abs() < 1e-15);
}

fn opts(method: Method, dt: f64, t_end: f64) -> IntegrateOptions {
    IntegrateOptions {
        method,
        dt,
        t_end,
        output_times: vec![0.0, t_end],
        theta_guard: THETA_GUARD,
        kl_guard: KL_GUARD,
    }
}

#[test]
fn integrator_step_halving() {
    let (mdp, features) = inst(54, 3, 2, 0.5, 0.5, Structure::TabularOnehot);
    let ctx = FlowContext::new(mdp, features).unwrap();
    let x0 = FlowState {
        t: 0.0,
        theta: random_vector(55, 6, 1.0),
        policy: random_policy(56, &ctx.mdp, 1.0),
    };
    let sch = TimescaleSchedule::Constant { eta0: 5.0 };
    let end = |m, dt| {
        let tr = integrate_with(&ctx, &x0, &sch, &opts(m, dt, 1.0)).unwrap();
        let l = tr.last();
        (l.theta.clone(), l.log_density.clone())
    };
    let err = |a: &(DVector<f64>, DMatrix<f64>), b: &(DVector<f64>, DMatrix<f64>)| {
        (&a.0 - &b.0).amax().max((&a.1 - &b.1).amax())
    };
    let r = [end(Method::Rk4, 0.04), end(Method::Rk4, 0.02), end(Method::Rk4, 0.01)];
    let rk_order = (err(&r[0], &r[1]) / err(&r[1], &r[2])).log2();
    assert!((rk_order - 4.0).abs() < 0.5, "rk4 order {rk_order}");
    let e = [
        end(Method::ExponentialEuler, 0.02),
        end(Method::ExponentialEuler, 0.01),
        end(Method::ExponentialEuler, 0.005),
    ];
    let ee_order = (err(&e[0], &e[1]) / err(&e[1], &e[2])).log2();
    assert!((ee_order - 1.0).abs() < 0.2, "exponential Euler order {ee_order}");

    // cross-agreement from the zero critic and reference policy at unit timescale
    let x0 = FlowState {
        t: 0.0,
        theta: DVector::zeros(6),
        policy: Policy::reference(ctx.mdp.n_states(), ctx.mdp.mu()),
    };
    let sch = TimescaleSchedule::Constant { eta0: 1.0 };
    let end = |m, dt| {
        let tr = integrate_with(&ctx, &x0, &sch, &opts(m, dt, 1.0)).unwrap();
        let l = tr.last();
        (l.theta.clone(), l.log_density.clone())
    };
    let fine_rk = end(Method::Rk4, 1e-3);
    let fine_ee = end(Method::ExponentialEuler, 1e-3);
    assert!(err(&fine_rk, &fine_ee) < 1e-5, "{}", err(&fine_rk, &fine_ee));
}

#[test]
fn gronwall_envelope_on_two_by_two() {
    let (mdp, features) = inst(57, 2, 2, 0.5, 1.0, Structure::TabularOnehot);
    let gram = gram_data(&mdp, &features).unwrap();
    let sch = TimescaleSchedule::Constant { eta0: 2.0 / gram.gamma_const };
    let pi0 = random_policy(58, &mdp, 1.0);
    let x0 = FlowState {
        t: 0.0,
        theta: DVector::zeros(4),
        policy: pi0.clone(),
    };
    let mut o = opts(Method::ExponentialEuler, 0.01, 20.0);
    o.output_times = uniform_grid(20.0, 400);
    let tr = integrate(&x0, &mdp, &features, &sch, &o).unwrap();
    let c = bound_constants(&mdp, &features, &x0.theta, &pi0, &sch).unwrap();
    assert!(check_gronwall_kl(&tr, &c).unwrap().iter().all(|e| e.status == Status::Pass));
}

#[test]
fn scalar_drift_is_negative_from_large_theta() {
    let mdp = single_point();
    let features = FeatureMap::one_hot(&mdp);
    let x0 = FlowState {
        t: 0.0,
        theta: DVector::from_element(1, 10.0),
        policy: Policy::reference(1, mdp.mu()),
    };
    let sch = TimescaleSchedule::Constant { eta0: 10.0 };
    let tr = integrate(&x0, &mdp, &features, &sch, &opts(Method::Rk4, 1e-3, 0.1)).unwrap();
    let d0 = tr.snapshots[0].diag;
    // −θ g = −10 (10 − 0.5 − 0.5·10) = −45
    assert!((d0.drift_lhs + 45.0).abs() < 1e-10);
    let c = bound_constants(&mdp, &features, &x0.theta, &x0.policy, &sch).unwrap();
    assert_eq!(check_lyapunov_drift(&tr, &c).status, Status::Pass);
}

#[test]
fn convolution_refinement_is_stable() {
    let f = |t: f64| (-(3.0 * t)).exp() + 0.2 * (t * 0.7).sin().powi(2);
    let grid = |n: usize| uniform_grid(10.0, n);
    let run = |n: usize| {
        let ts = grid(n);
        let vs: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        *exp_convolution(&ts, &vs, 0.5).last().unwrap()
    };
    let (a, b) = (run(2000), run(4000));
    assert!(((a - b) / b).abs() < 1e-4);
}

#[test]
fn frozen_policy_recursion_reaches_theta_pi() {
    let (mdp, features) = inst(59, 3, 2, 0.5, 0.5, Structure::TabularOnehot);
    let ctx = FlowContext::new(mdp, features).unwrap();
    let pi0 = random_policy(60, &ctx.mdp, 1.0);
    let best = best_parameters(&pi0, &ctx.mdp, &ctx.features).unwrap();
    let o = TwoTimescaleOptions::new(20_000);
    let tr = run_two_timescale(&ctx, &DVector::zeros(6), &pi0, |_| (0.5, 1e-14), &o).unwrap();
    assert!((&tr.last().theta - &best.theta).norm() < 1e-6);
}

#[test]
fn dq_dt_along_exact_flow_and_one_hot_theta_derivative() {
    let (mdp, features) = inst(61, 3, 2, 0.6, 0.5, Structure::TabularOnehot);
    let pi = random_policy(62, &mdp, 1.0);
    let adv = exact_advantage(&pi, &mdp).unwrap();
    let dpi = -adv.a.component_mul(pi.prob());
    let dq = dq_dt_oracle(&pi, &dpi, &mdp).unwrap();
    assert!(dq.max() <= 1e-14);
    let dth = dtheta_pi_dt(&pi, &dpi, &mdp, &features).unwrap();
    let flat = DVector::from_fn(6, |i, _| dq[(i / 2, i % 2)]);
    assert!((dth - flat).amax() < 1e-10);
}

#[test]
fn realisable_critic_advantage_matches_exact() {
    let i = sample_random_mdp::<f64>(63, 4, 2, 0.5, 0.5, Structure::LinearMdp { dim: 3 }).unwrap();
    let pi = random_policy(64, &i.mdp, 1.0);
    let best = best_parameters(&pi, &i.mdp, &i.features).unwrap();
    let a = approx_advantage(&best.theta, &pi, &i.mdp, &i.features).unwrap();
    let b = exact_advantage(&pi, &i.mdp).unwrap();
    assert!((a.a - b.a).amax() < 1e-8);
}
