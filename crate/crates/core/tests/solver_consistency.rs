//! Cross-module consistency of the exact solver against the non-dualized
//! problem: at converged slices the dualized per-state value must equal the
//! direct penalized supremum, and the extracted quotes must be
//! coordinate-wise unimprovable.

use rfqmm_core::begv;
use rfqmm_core::forward_kpi;
use rfqmm_core::hjb_exact::{self, InventoryGrid, SolveParams};
use rfqmm_core::linalg::SymmetricMatrix;
use rfqmm_core::market_model::{
    ArrivalBook, FillCurve, MarketSpec, RiskSpec, Side, SizeLadder, TargetSpec, TierTarget,
};

fn desk_spec(kappa: f64, sigma: f64) -> MarketSpec {
    let ladder = SizeLadder::new(vec![1.0, 5.0, 20.0]).unwrap();
    let mut arrivals = ArrivalBook::zeroed(1, 1, 3);
    let lambdas = [500.0, 200.0, 50.0];
    let ab = [(2.0, 2.0), (1.5, 1.5), (1.0, 1.0)];
    for k in 0..3 {
        for side in Side::BOTH {
            arrivals.set(
                0,
                0,
                side,
                k,
                lambdas[k],
                FillCurve::logistic(ab[k].0, ab[k].1),
            );
        }
    }
    let risk = RiskSpec {
        phi: 1.0,
        eta: 0.0,
        sigma_cov: SymmetricMatrix::from_diagonal(&[sigma * sigma]),
        horizon: 1.0,
    };
    let targets = TargetSpec::none(1).with_target(0, TierTarget { r_star: 0.1, kappa });
    MarketSpec::new(
        vec!["B1".into()],
        vec!["T1".into()],
        ladder,
        arrivals,
        risk,
        targets,
    )
    .unwrap()
}

#[test]
fn dualized_step_equals_direct_penalized_supremum() {
    let spec = desk_spec(10.0, 1.0);
    let grid = InventoryGrid::new(spec.ladder(), 1, 100.0).unwrap();
    let params = SolveParams {
        dt: Some(1e-4),
        store_every: Some(2000),
    };
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &params).unwrap();
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    let u0 = &value.u[0];
    let target = spec.targets().get(0).unwrap();
    let w = spec.notional_scale(0).unwrap();

    for q in [-50i64, -20, 0, 20, 50] {
        let s = grid.index_of(&[q]).unwrap();
        let pos = policy.pos_of_state(s).unwrap();
        let xi = policy.xi_value(pos, 0);
        let mut deltas: Vec<f64> = Vec::new();
        let mut dus: Vec<f64> = Vec::new();
        for (ri, r) in spec.rungs().iter().enumerate() {
            let du = hjb_exact::reduced_increment(
                u0,
                &grid,
                s,
                r.bond,
                r.side,
                grid.z_steps(r.k),
                r.size,
            )
            .unwrap();
            dus.push(du);
            deltas.push(policy.offset(pos, ri));
        }
        // direct (non-dualized) objective at a quote vector
        let direct = |ds: &[f64]| -> f64 {
            let mut flow = 0.0;
            let mut zlam = 0.0;
            for ((r, d), du) in spec.rungs().iter().zip(ds).zip(&dus) {
                let lam = r.lambda * r.curve.prob_unchecked(*d);
                flow += r.size * lam * (d - du);
                zlam += r.size * lam;
            }
            let dev = zlam / w - target.r_star;
            flow - 0.5 * target.kappa * w * dev * dev
        };
        let dual_value = {
            let mut hsum = 0.0;
            for (ri, du) in dus.iter().enumerate() {
                hsum += spec.rungs()[ri].size * tables.get(ri).eval_h(du - xi).unwrap();
            }
            w * (-xi * target.r_star + xi * xi / (2.0 * target.kappa)) + hsum
        };
        let direct_value = direct(&deltas);
        assert!(
            (dual_value - direct_value).abs() <= 1e-8 * dual_value.abs().max(1.0),
            "q={q}: dual {dual_value} vs direct {direct_value}"
        );
        // no single-quote perturbation may improve the direct objective
        for i in 0..deltas.len() {
            for eps in [-0.05, -0.01, 0.01, 0.05] {
                let mut trial = deltas.clone();
                trial[i] += eps;
                assert!(
                    direct(&trial) <= direct_value + 1e-9,
                    "q={q}: quote {i} improved by {eps}"
                );
            }
        }
    }
}

#[test]
fn converged_dual_field_satisfies_first_order_condition() {
    // residual of ξ = κ(r★ + (1/W) Σ z H'(Δu − ξ)) at the converged slice
    let spec = desk_spec(10.0, 1.0);
    let grid = InventoryGrid::new(spec.ladder(), 1, 100.0).unwrap();
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &SolveParams::default()).unwrap();
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    let u0 = &value.u[0];
    let target = spec.targets().get(0).unwrap();
    let w = spec.notional_scale(0).unwrap();
    for q in [-50i64, 0, 17, 50] {
        let s = grid.index_of(&[q]).unwrap();
        let xi = policy.xi_value(policy.pos_of_state(s).unwrap(), 0);
        let mut s_h1 = 0.0;
        for (ri, r) in spec.rungs().iter().enumerate() {
            let du = hjb_exact::reduced_increment(
                u0,
                &grid,
                s,
                r.bond,
                r.side,
                grid.z_steps(r.k),
                r.size,
            )
            .unwrap();
            s_h1 += r.size * tables.get(ri).eval_h1(du - xi).unwrap();
        }
        let residual = xi - target.kappa * (target.r_star + s_h1 / w);
        assert!(
            residual.abs() <= 1e-10,
            "q={q}: first-order residual {residual:.3e}"
        );
    }
}

#[test]
fn exact_and_quadratic_duals_agree_at_flat_inventory() {
    let spec = desk_spec(10.0, 0.5);
    let grid = InventoryGrid::new(spec.ladder(), 1, 100.0).unwrap();
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &SolveParams::default()).unwrap();
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    let origin = grid.origin();
    let xi_exact = policy.xi_value(policy.pos_of_state(origin).unwrap(), 0);
    let a0 = {
        let qv = begv::quadratic_value(&spec, &tables, 2).unwrap();
        begv::riccati_closed_form(&qv.dcal, spec.risk(), 0.0).unwrap()
    };
    let xi_fp = begv::xi_fixed_point(&spec, &tables, &a0, None, &[0.0]).unwrap()[0];
    // the residual gap is the quadratic-ansatz error in the flat-inventory
    // increments; in quote space it is below a millibp
    assert!(
        (xi_exact - xi_fp).abs() <= 1e-2 * xi_exact.abs(),
        "exact dual {xi_exact} vs quadratic fixed point {xi_fp}"
    );
}

/// Two-bond exact solve on a small lattice: symmetry under q -> -q, genuine
/// cross-bond coupling through the correlated covariance, and consistent
/// policy extraction.
#[test]
fn two_bond_exact_solve_couples_inventories() {
    let ladder = SizeLadder::new(vec![1.0, 2.0]).unwrap();
    let mut arrivals = ArrivalBook::zeroed(2, 2, 2);
    for (bond, tier, lams) in [(0usize, 0usize, [80.0, 40.0]), (1, 1, [40.0, 20.0])] {
        for (k, lam) in lams.iter().enumerate() {
            for side in Side::BOTH {
                arrivals.set(bond, tier, side, k, *lam, FillCurve::logistic(1.5, 1.5));
            }
        }
    }
    let sigma = SymmetricMatrix::from_dense(2, &[1.0, 0.8, 0.8, 1.0]).unwrap();
    let spec = MarketSpec::new(
        vec!["A".into(), "B".into()],
        vec!["bg".into(), "tgt".into()],
        ladder,
        arrivals,
        RiskSpec {
            phi: 1.0,
            eta: 0.0,
            sigma_cov: sigma,
            horizon: 0.3,
        },
        TargetSpec::none(2).with_target(1, TierTarget { r_star: 0.2, kappa: 5.0 }),
    )
    .unwrap();
    let grid = InventoryGrid::new(spec.ladder(), 2, 6.0).unwrap();
    assert_eq!(grid.state_count(), 169);
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &SolveParams::default()).unwrap();
    let u0 = &value.u[0];
    // symmetric scenario: u(q) = u(-q)
    for s in 0..grid.state_count() {
        let m = grid.negate(s);
        assert!((u0[s] - u0[m]).abs() <= 1e-9 * u0[s].abs().max(1.0));
    }
    // positive correlation: holding the other bond long lowers the value of
    // additional long inventory, so u(3, 3) < u(3, -3)
    let s_pp = grid.index_of(&[3, 3]).unwrap();
    let s_pm = grid.index_of(&[3, -3]).unwrap();
    assert!(
        u0[s_pp] < u0[s_pm],
        "aligned inventories must be more costly: {} vs {}",
        u0[s_pp],
        u0[s_pm]
    );
    // policy: targeted-bond ask at flat targeted inventory falls as the
    // background bond gets long
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    let ask_tgt = spec
        .rungs()
        .iter()
        .position(|r| r.bond == 1 && r.side == Side::Ask && r.k == 0)
        .unwrap();
    let flat = grid.index_of(&[0, 0]).unwrap();
    let bg_long = grid.index_of(&[3, 0]).unwrap();
    let a_flat = policy.offset(policy.pos_of_state(flat).unwrap(), ask_tgt);
    let a_long = policy.offset(policy.pos_of_state(bg_long).unwrap(), ask_tgt);
    assert!(a_long < a_flat, "cross-bond skew missing: {a_long} vs {a_flat}");
}

/// Fractional grid unit (0.5 M) through solve, policy and propagation.
#[test]
fn fractional_grid_unit_pipeline() {
    let ladder = SizeLadder::new(vec![0.5, 2.0]).unwrap();
    assert_eq!(ladder.grid_unit(), 0.5);
    let mut arrivals = ArrivalBook::zeroed(1, 1, 2);
    for (k, lam) in [120.0, 30.0].iter().enumerate() {
        for side in Side::BOTH {
            arrivals.set(0, 0, side, k, *lam, FillCurve::logistic(2.0, 2.0));
        }
    }
    let spec = MarketSpec::new(
        vec!["A".into()],
        vec!["t".into()],
        ladder,
        arrivals,
        RiskSpec {
            phi: 1.0,
            eta: 0.0,
            sigma_cov: SymmetricMatrix::from_diagonal(&[1.0]),
            horizon: 0.5,
        },
        TargetSpec::none(1).with_target(0, TierTarget { r_star: 0.15, kappa: 5.0 }),
    )
    .unwrap();
    let grid = InventoryGrid::new(spec.ladder(), 1, 10.0).unwrap();
    assert_eq!(grid.state_count(), 41);
    assert_eq!(grid.z_steps(0), 1);
    assert_eq!(grid.z_steps(1), 4);
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &SolveParams::default()).unwrap();
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    // inventory coordinates come out in millions on the half-unit lattice
    let s = grid.index_of(&[7]).unwrap();
    assert_eq!(grid.q_millions(s), vec![3.5]);
    // propagate and conserve mass
    let worst = forward_kpi::max_outflow(&policy, &spec, &grid).unwrap();
    let law = forward_kpi::forward_propagate(&policy, &spec, &grid, grid.origin(), 0.1 / worst, None)
        .unwrap();
    let mass: f64 = law.mu_final().iter().sum();
    assert!((mass - 1.0).abs() < 1e-12);
    let kpi = forward_kpi::expected_objective(&law, &spec).unwrap();
    assert!(kpi.pnl > 0.0);
}

/// Two targeted tiers with different targets solve jointly; each tier gets
/// its own dual field and the signs follow the targets.
#[test]
fn two_targeted_tiers_have_independent_duals() {
    let ladder = SizeLadder::new(vec![1.0, 5.0]).unwrap();
    let mut arrivals = ArrivalBook::zeroed(1, 2, 2);
    for tier in 0..2 {
        for (k, lam) in [200.0, 60.0].iter().enumerate() {
            for side in Side::BOTH {
                arrivals.set(0, tier, side, k, *lam, FillCurve::logistic(2.0, 2.0));
            }
        }
    }
    let spec = MarketSpec::new(
        vec!["A".into()],
        vec!["hungry".into(), "content".into()],
        ladder,
        arrivals,
        RiskSpec {
            phi: 1.0,
            eta: 0.0,
            sigma_cov: SymmetricMatrix::from_diagonal(&[1.0]),
            horizon: 0.3,
        },
        TargetSpec::none(2)
            .with_target(0, TierTarget { r_star: 0.3, kappa: 20.0 })
            .with_target(1, TierTarget { r_star: 0.02, kappa: 20.0 }),
    )
    .unwrap();
    let grid = InventoryGrid::new(spec.ladder(), 1, 25.0).unwrap();
    let (value, tables) = hjb_exact::solve_auto(&spec, &grid, &SolveParams::default()).unwrap();
    let policy = hjb_exact::extract_policy(&value, &spec, &tables, 0.0).unwrap();
    let pos = policy.pos_of_state(grid.origin()).unwrap();
    let xi_hungry = policy.xi_value(pos, 0);
    let xi_content = policy.xi_value(pos, 1);
    // tier 0 targets far above the riskless ratio (subsidize), tier 1 far
    // below it (harvest)
    assert!(xi_hungry > 0.0, "xi_hungry = {xi_hungry}");
    assert!(xi_content < 0.0, "xi_content = {xi_content}");
    // each tier's quotes shift in its own dual direction: same curve and
    // intensity, so the hungry tier quotes strictly inside the content tier
    let top_ask = |tier: usize| {
        let ri = spec
            .rungs()
            .iter()
            .position(|r| r.tier == tier && r.side == Side::Ask && r.k == 0)
            .unwrap();
        policy.offset(pos, ri)
    };
    assert!(top_ask(0) < top_ask(1));
    // hit ratios at the origin move toward the respective targets
    let r0 = policy.tier_hit_ratio(&spec, pos, 0).unwrap();
    let r1 = policy.tier_hit_ratio(&spec, pos, 1).unwrap();
    assert!(r0 > r1);
    assert!(r0 < 0.3 && r0 > 0.1, "r0 = {r0}");
    assert!(r1 > 0.02 && r1 < 0.1, "r1 = {r1}");
}
