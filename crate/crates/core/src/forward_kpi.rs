//! Forward Kolmogorov propagation of the inventory law under a frozen
//! stationary policy, and the desk KPIs evaluated against it.
//!
//! The policy induces a continuous-time Markov chain on the inventory
//! lattice with rates `q → q ± z_k e_m` equal to Σ_τ Λ(δ★); the law μ_t
//! evolves by
//!
//! ```text
//! ∂_t μ(q) = Σ_{s,k} [ 1{q ∓ z_k ∈ 𝒬} μ(q ∓ z_k) Λ(δ★(q ∓ z_k)) − μ(q) Λ(δ★(q)) ]
//! ```
//!
//! integrated by explicit Euler with left-point KPI quadrature (consistent
//! with the propagation order). KPI accumulators ride along with the law so
//! expectations integrate at full time resolution regardless of how many μ
//! snapshots are stored.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hjb_exact::{self, InventoryGrid, SolveParams};
use crate::market_model::MarketSpec;
use crate::quotes::{self, QuotePolicy};

const MODULE: &str = "forward_kpi";

const PAR_THRESHOLD: usize = 4096;

/// Transition rates out of one state under a policy: `(destination, rate)`
/// pairs, rates summed over tiers per (bond, size, side). Boundary-exiting
/// transitions are absent (their rate is zero by deactivation).
pub fn generator_rates(
    policy: &QuotePolicy,
    spec: &MarketSpec,
    grid: &InventoryGrid,
    state: usize,
) -> Result<Vec<(usize, f64)>> {
    let pos = policy.pos_of_state(state)?;
    let mut rates: std::collections::BTreeMap<usize, f64> = Default::default();
    for (ri, r) in spec.rungs().iter().enumerate() {
        let delta = policy.offset(pos, ri);
        if delta.is_nan() {
            continue;
        }
        let steps = if r.side == crate::market_model::Side::Bid {
            grid.z_steps(r.k)
        } else {
            -grid.z_steps(r.k)
        };
        if let Some(dest) = grid.shift(state, r.bond, steps) {
            *rates.entry(dest).or_insert(0.0) += r.lambda * r.curve.prob_unchecked(delta);
        }
    }
    Ok(rates.into_iter().collect())
}

/// KPI integrals accumulated during propagation (left-point rule on the same
/// explicit time grid).
#[derive(Debug, Clone, Serialize)]
pub struct KpiAccumulators {
    /// ∫ Σ_q μ Σ z Λ(δ★) δ★ dt — expected spread P&L.
    pub pnl: f64,
    /// ∫ Σ_q μ qᵀΣq dt (φ/2 applied at reporting time).
    pub inv_quad: f64,
    /// ∫ Σ_q μ Σ_τ (κ W/2)(r_τ(δ★(q)) − r★)² dt.
    pub hr_penalty: f64,
    /// Per tier: ∫ Σ_q μ Σ_{s,k} z Λ(δ★) dt — intensity-integral numerator.
    pub hit_num: Vec<f64>,
    /// Per tier: ∫ Σ_q μ r_τ(δ★(q)) dt — time-average-of-r numerator.
    pub r_avg_num: Vec<f64>,
    /// `E[Q_TᵀΣQ_T]` at the final time (η/2 applied at reporting time).
    pub terminal_quad: f64,
}

/// Time-indexed probability distribution over the inventory lattice with
/// attached KPI accumulators.
#[derive(Debug, Clone)]
pub struct InventoryLaw {
    pub t_stored: Vec<f64>,
    /// μ snapshots aligned with `t_stored` (always includes t = 0 and t = T).
    pub mu_stored: Vec<Vec<f64>>,
    pub q0_state: usize,
    pub horizon: f64,
    pub acc: KpiAccumulators,
}

impl InventoryLaw {
    pub fn mu_final(&self) -> &[f64] {
        self.mu_stored.last().unwrap()
    }
}

fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

struct Precomp {
    outflow: Vec<f64>,
    /// CSR incoming edges: for state s, `edges[in_start[s]..in_start[s+1]]`
    /// holds `(source, rate)`.
    in_start: Vec<usize>,
    in_edges: Vec<(u32, f64)>,
    pnl_rate: Vec<f64>,
    inv_quad_rate: Vec<f64>,
    hr_pen_rate: Vec<f64>,
    tier_zlam: Vec<Vec<f64>>,
    tier_r: Vec<Vec<f64>>,
}

fn precompute(policy: &QuotePolicy, spec: &MarketSpec, grid: &InventoryGrid) -> Result<Precomp> {
    let n = grid.state_count();
    if policy.states.len() != n {
        return Err(Error::invalid(
            MODULE,
            "propagation requires a policy covering every lattice state",
        ));
    }
    let n_tiers = spec.n_tiers();
    let mut outflow = vec![0.0; n];
    let mut out_edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut pnl_rate = vec![0.0; n];
    let mut inv_quad_rate = vec![0.0; n];
    let mut hr_pen_rate = vec![0.0; n];
    let mut tier_zlam = vec![vec![0.0; n]; n_tiers];
    let mut tier_r = vec![vec![0.0; n]; n_tiers];
    let sigma = &spec.risk().sigma_cov;
    let w_of: Vec<f64> = (0..n_tiers)
        .map(|t| spec.notional_scale(t).unwrap())
        .collect();

    for s in 0..n {
        let pos = policy.pos_of_state(s)?;
        let q = grid.q_millions(s);
        inv_quad_rate[s] = sigma.quad_form(&q);
        for (ri, r) in spec.rungs().iter().enumerate() {
            let delta = policy.offset(pos, ri);
            if delta.is_nan() {
                continue;
            }
            let steps = if r.side == crate::market_model::Side::Bid {
                grid.z_steps(r.k)
            } else {
                -grid.z_steps(r.k)
            };
            let dest = match grid.shift(s, r.bond, steps) {
                Some(d) => d,
                None => continue,
            };
            let rate = r.lambda * r.curve.prob_unchecked(delta);
            out_edges[s].push((dest, rate));
            outflow[s] += rate;
            pnl_rate[s] += r.size * rate * delta;
            tier_zlam[r.tier][s] += r.size * rate;
        }
        for tier in 0..n_tiers {
            tier_r[tier][s] = tier_zlam[tier][s] / w_of[tier];
            if let Some(target) = spec.targets().get(tier) {
                let dev = tier_r[tier][s] - target.r_star;
                hr_pen_rate[s] += 0.5 * target.kappa * w_of[tier] * dev * dev;
            }
        }
    }

    // reverse adjacency in CSR form
    let mut counts = vec![0usize; n + 1];
    for edges in &out_edges {
        for &(dest, _) in edges {
            counts[dest + 1] += 1;
        }
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let in_start = counts.clone();
    let mut fill = in_start.clone();
    let mut in_edges = vec![(0u32, 0.0f64); in_start[n]];
    for (src, edges) in out_edges.iter().enumerate() {
        for &(dest, rate) in edges {
            in_edges[fill[dest]] = (src as u32, rate);
            fill[dest] += 1;
        }
    }

    Ok(Precomp {
        outflow,
        in_start,
        in_edges,
        pnl_rate,
        inv_quad_rate,
        hr_pen_rate,
        tier_zlam,
        tier_r,
    })
}

/// Largest total outflow rate over lattice states under a policy; the
/// propagation time step must satisfy `dt · max_outflow ≤ 0.1`.
pub fn max_outflow(policy: &QuotePolicy, spec: &MarketSpec, grid: &InventoryGrid) -> Result<f64> {
    let pre = precompute(policy, spec, grid)?;
    Ok(pre.outflow.iter().fold(0.0f64, |m, &x| m.max(x)))
}

/// Propagate the inventory law from a point mass at `q0_state` over the
/// spec's horizon. Mass must be conserved to 1e-12 per unit time and stay
/// nonnegative beyond −1e-14, else the step size is rejected.
pub fn forward_propagate(
    policy: &QuotePolicy,
    spec: &MarketSpec,
    grid: &InventoryGrid,
    q0_state: usize,
    dt: f64,
    store_every: Option<usize>,
) -> Result<InventoryLaw> {
    let n = grid.state_count();
    if q0_state >= n {
        return Err(Error::invalid(MODULE, "q0 outside lattice"));
    }
    let horizon = spec.risk().horizon;
    if !(dt > 0.0) {
        return Err(Error::invalid(MODULE, "dt must be positive"));
    }
    let pre = precompute(policy, spec, grid)?;
    let worst = pre.outflow.iter().fold(0.0f64, |m, &x| m.max(x));
    if dt * worst > 0.1 + 1e-12 {
        return Err(Error::invalid(
            MODULE,
            format!(
                "dt {dt} violates the stability bound 0.1/max_outflow = {:.3e}",
                0.1 / worst
            ),
        ));
    }
    let n_tiers = spec.n_tiers();
    let n_steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let stride = store_every.unwrap_or_else(|| (n_steps / 50).max(1));

    let mut mu = vec![0.0; n];
    mu[q0_state] = 1.0;
    let mut acc = KpiAccumulators {
        pnl: 0.0,
        inv_quad: 0.0,
        hr_penalty: 0.0,
        hit_num: vec![0.0; n_tiers],
        r_avg_num: vec![0.0; n_tiers],
        terminal_quad: 0.0,
    };
    let mut t_stored = vec![0.0];
    let mut mu_stored = vec![mu.clone()];

    let check_mass = |mu: &[f64], t: f64| -> Result<()> {
        let mass = neumaier_sum(mu);
        if (mass - 1.0).abs() > 1e-12 * t.max(1.0) {
            return Err(Error::numerical(
                MODULE,
                format!("mass drift {:.3e} at t={t}; reduce dt", mass - 1.0),
            ));
        }
        if mu.iter().any(|&x| x < -1e-14) {
            return Err(Error::numerical(
                MODULE,
                format!("negative mass at t={t}; reduce dt"),
            ));
        }
        Ok(())
    };

    let mut t = 0.0;
    for step in 1..=n_steps {
        let h = if step == n_steps { horizon - t } else { dt };
        // left-point KPI accumulation with the current law
        acc.pnl += h * dot(&mu, &pre.pnl_rate);
        acc.inv_quad += h * dot(&mu, &pre.inv_quad_rate);
        acc.hr_penalty += h * dot(&mu, &pre.hr_pen_rate);
        for tier in 0..n_tiers {
            acc.hit_num[tier] += h * dot(&mu, &pre.tier_zlam[tier]);
            acc.r_avg_num[tier] += h * dot(&mu, &pre.tier_r[tier]);
        }
        // explicit Euler update in gather form
        let mut next = vec![0.0; n];
        let kernel = |s: usize, mu: &[f64]| -> f64 {
            let mut inflow = 0.0;
            for &(src, rate) in &pre.in_edges[pre.in_start[s]..pre.in_start[s + 1]] {
                inflow += mu[src as usize] * rate;
            }
            mu[s] * (1.0 - h * pre.outflow[s]) + h * inflow
        };
        if n >= PAR_THRESHOLD {
            next.par_iter_mut()
                .enumerate()
                .for_each(|(s, slot)| *slot = kernel(s, &mu));
        } else {
            for (s, slot) in next.iter_mut().enumerate() {
                *slot = kernel(s, &mu);
            }
        }
        mu = next;
        t = if step == n_steps {
            horizon
        } else {
            step as f64 * dt
        };
        if step == n_steps || step % stride == 0 {
            check_mass(&mu, t)?;
            t_stored.push(t);
            mu_stored.push(mu.clone());
        }
    }
    acc.terminal_quad = (0..n).map(|s| mu[s] * pre.inv_quad_rate[s]).sum();

    Ok(InventoryLaw {
        t_stored,
        mu_stored,
        q0_state,
        horizon,
        acc,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Expected realized size-weighted hit ratio of one tier over the horizon:
/// `∫ Σ_q μ_t Σ_{s,k} z Λ(δ★) dt / (T Σ z λ)`.
pub fn expected_hit_ratio(law: &InventoryLaw, spec: &MarketSpec, tier: usize) -> Result<f64> {
    let w = spec.notional_scale(tier)?;
    if w <= 0.0 {
        return Err(Error::invalid(
            MODULE,
            format!("tier {tier} has no arrivals"),
        ));
    }
    Ok(law.acc.hit_num[tier] / (law.horizon * w))
}

/// The same expectation via the time average of the instantaneous ratio;
/// agrees with [`expected_hit_ratio`] to rounding.
pub fn expected_hit_ratio_time_average(
    law: &InventoryLaw,
    spec: &MarketSpec,
    tier: usize,
) -> Result<f64> {
    if tier >= spec.n_tiers() {
        return Err(Error::invalid(MODULE, "tier out of range"));
    }
    Ok(law.acc.r_avg_num[tier] / law.horizon)
}

/// Mean-field KPI report: objective = pnl − inventory − hit-ratio − terminal,
/// exact by construction.
#[derive(Debug, Clone, Serialize)]
pub struct KpiReport {
    pub expected_hit_ratio: Vec<f64>,
    pub objective: f64,
    pub pnl: f64,
    pub inventory_penalty: f64,
    pub hit_ratio_penalty: f64,
    pub terminal_penalty: f64,
}

/// Evaluate the mean-field objective components against a propagated law.
pub fn expected_objective(law: &InventoryLaw, spec: &MarketSpec) -> Result<KpiReport> {
    let risk = spec.risk();
    let pnl = law.acc.pnl;
    let inventory_penalty = 0.5 * risk.phi * law.acc.inv_quad;
    let hit_ratio_penalty = law.acc.hr_penalty;
    let terminal_penalty = 0.5 * risk.eta * law.acc.terminal_quad;
    let expected: Result<Vec<f64>> = (0..spec.n_tiers())
        .map(|t| expected_hit_ratio(law, spec, t))
        .collect();
    Ok(KpiReport {
        expected_hit_ratio: expected?,
        objective: pnl - inventory_penalty - hit_ratio_penalty - terminal_penalty,
        pnl,
        inventory_penalty,
        hit_ratio_penalty,
        terminal_penalty,
    })
}

/// Sweep axes for the desk experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Hit-ratio penalty κ applied to every targeted tier.
    Kappa,
    /// Background-to-targeted notional-intensity ratio; 0 removes the
    /// background tiers entirely.
    IntensityRatio,
    /// Uniform off-diagonal correlation of the bond covariance.
    Correlation,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Kappa => "kappa",
            SweepAxis::IntensityRatio => "intensity_ratio",
            SweepAxis::Correlation => "correlation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kappa" => Ok(SweepAxis::Kappa),
            "intensity_ratio" => Ok(SweepAxis::IntensityRatio),
            "correlation" => Ok(SweepAxis::Correlation),
            other => Err(Error::invalid(
                MODULE,
                format!("unknown sweep axis '{other}'"),
            )),
        }
    }
}

/// Rebuild a spec with the axis value applied.
pub fn respec(spec: &MarketSpec, axis: SweepAxis, value: f64) -> Result<MarketSpec> {
    match axis {
        SweepAxis::Kappa => {
            if !(value >= 0.0) {
                return Err(Error::invalid(MODULE, "kappa must be >= 0"));
            }
            let mut targets = crate::market_model::TargetSpec::none(spec.n_tiers());
            for tau in spec.targets().targeted() {
                let t = spec.targets().get(tau).unwrap();
                targets = targets.with_target(
                    tau,
                    crate::market_model::TierTarget {
                        r_star: t.r_star,
                        kappa: value,
                    },
                );
            }
            MarketSpec::new(
                spec.bonds().to_vec(),
                spec.tiers().to_vec(),
                spec.ladder().clone(),
                spec.arrivals().clone(),
                spec.risk().clone(),
                targets,
            )
        }
        SweepAxis::IntensityRatio => {
            if !(value >= 0.0) {
                return Err(Error::invalid(MODULE, "intensity ratio must be >= 0"));
            }
            let targeted = spec.targets().targeted();
            if targeted.is_empty() || targeted.len() == spec.n_tiers() {
                return Err(Error::invalid(
                    MODULE,
                    "intensity-ratio sweep needs at least one targeted and one background tier",
                ));
            }
            let w_target: f64 = targeted
                .iter()
                .map(|&t| spec.notional_scale(t).unwrap())
                .sum();
            let background: Vec<usize> = (0..spec.n_tiers())
                .filter(|t| !targeted.contains(t))
                .collect();
            let w_bg: f64 = background
                .iter()
                .map(|&t| spec.notional_scale(t).unwrap())
                .sum();
            if value == 0.0 {
                // drop background tiers entirely (a zero-intensity tier is
                // invalid by construction)
                let keep = targeted.clone();
                let tiers: Vec<String> = keep.iter().map(|&t| spec.tiers()[t].clone()).collect();
                let mut arrivals = crate::market_model::ArrivalBook::zeroed(
                    spec.n_bonds(),
                    keep.len(),
                    spec.ladder().len(),
                );
                for (new_t, &old_t) in keep.iter().enumerate() {
                    for m in 0..spec.n_bonds() {
                        for side in crate::market_model::Side::BOTH {
                            for k in 0..spec.ladder().len() {
                                arrivals.set(
                                    m,
                                    new_t,
                                    side,
                                    k,
                                    spec.arrivals().lambda(m, old_t, side, k),
                                    *spec.arrivals().curve(m, old_t, side, k),
                                );
                            }
                        }
                    }
                }
                let mut targets = crate::market_model::TargetSpec::none(keep.len());
                for (new_t, &old_t) in keep.iter().enumerate() {
                    let t = spec.targets().get(old_t).unwrap();
                    targets = targets.with_target(new_t, *t);
                }
                return MarketSpec::new(
                    spec.bonds().to_vec(),
                    tiers,
                    spec.ladder().clone(),
                    arrivals,
                    spec.risk().clone(),
                    targets,
                );
            }
            let factor = value * w_target / w_bg;
            let mut arrivals = spec.arrivals().clone();
            for &t in &background {
                for m in 0..spec.n_bonds() {
                    for side in crate::market_model::Side::BOTH {
                        for k in 0..spec.ladder().len() {
                            let l = spec.arrivals().lambda(m, t, side, k);
                            arrivals.set(
                                m,
                                t,
                                side,
                                k,
                                factor * l,
                                *spec.arrivals().curve(m, t, side, k),
                            );
                        }
                    }
                }
            }
            MarketSpec::new(
                spec.bonds().to_vec(),
                spec.tiers().to_vec(),
                spec.ladder().clone(),
                arrivals,
                spec.risk().clone(),
                spec.targets().clone(),
            )
        }
        SweepAxis::Correlation => {
            if !(value > -1.0 && value < 1.0) {
                return Err(Error::invalid(MODULE, "correlation must lie in (-1, 1)"));
            }
            if spec.n_bonds() < 2 {
                return Err(Error::invalid(
                    MODULE,
                    "correlation sweep needs at least two bonds",
                ));
            }
            let old = &spec.risk().sigma_cov;
            let m = spec.n_bonds();
            let mut data = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    data[i * m + j] = if i == j {
                        old.get(i, i)
                    } else {
                        value * (old.get(i, i) * old.get(j, j)).sqrt()
                    };
                }
            }
            let sigma = crate::linalg::SymmetricMatrix::from_dense(m, &data)?;
            let risk = crate::market_model::RiskSpec {
                phi: spec.risk().phi,
                eta: spec.risk().eta,
                sigma_cov: sigma,
                horizon: spec.risk().horizon,
            };
            MarketSpec::new(
                spec.bonds().to_vec(),
                spec.tiers().to_vec(),
                spec.ladder().clone(),
                spec.arrivals().clone(),
                risk,
                spec.targets().clone(),
            )
        }
    }
}

/// One sweep result row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis_value: f64,
    /// Expected hit ratio per template tier label (NaN when the tier was
    /// removed, e.g. intensity ratio 0).
    pub expected_hit_ratio: Vec<f64>,
    pub objective: f64,
    pub pnl: f64,
    pub inv_penalty: f64,
    pub hr_penalty: f64,
    pub terminal_penalty: f64,
    pub solve_mode: String,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

/// Sweep results with the template's tier labels for the CSV header.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub tier_labels: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV per the sweep schema; the wall-time column is the only
    /// nondeterministic one.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value");
        for label in &self.tier_labels {
            out.push_str(&format!(",expected_hit_ratio_{label}"));
        }
        out.push_str(
            ",objective,pnl,inv_penalty,hr_penalty,terminal_penalty,solve_mode,wall_time_s\n",
        );
        for row in &self.rows {
            out.push_str(&quotes::fmt9(row.axis_value));
            for r in &row.expected_hit_ratio {
                out.push(',');
                out.push_str(&if r.is_nan() {
                    "nan".to_string()
                } else {
                    quotes::fmt9(*r)
                });
            }
            let f = |x: f64| {
                if x.is_nan() {
                    "nan".to_string()
                } else {
                    quotes::fmt9(x)
                }
            };
            out.push_str(&format!(
                ",{},{},{},{},{},{},{}\n",
                f(row.objective),
                f(row.pnl),
                f(row.inv_penalty),
                f(row.hr_penalty),
                f(row.terminal_penalty),
                row.solve_mode,
                quotes::fmt9(row.wall_time_s),
            ));
        }
        out
    }
}

/// Solve the control problem and freeze the stationary policy: the exact
/// t = 0 policy for single-bond specs, the quadratic fixed-point closure
/// otherwise.
pub fn stationary_policy(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    dt_solve: Option<f64>,
) -> Result<(QuotePolicy, String)> {
    if spec.n_bonds() == 1 {
        let params = SolveParams {
            dt: dt_solve,
            store_every: None,
        };
        let (value, tables) = hjb_exact::solve_auto(spec, grid, &params)?;
        let policy = hjb_exact::extract_policy(&value, spec, &tables, 0.0)?;
        Ok((policy, "exact".to_string()))
    } else {
        let tables = crate::hamiltonian::TableSet::build_default(spec)?;
        let begv = quotes::StationaryBegv::new(spec, &tables)?;
        let states: Vec<usize> = (0..grid.state_count()).collect();
        let policy = begv.policy_xi_q(spec, grid, &tables, &states)?;
        Ok((policy, "begv_exact_map_xi_q".to_string()))
    }
}

/// Run a sweep: per axis value, rebuild the spec, solve, propagate the law
/// from flat inventory and report KPIs. Rows are independent and run in
/// parallel; individual failures are recorded in their row and the sweep
/// continues.
pub fn sweep(
    spec: &MarketSpec,
    q_max: f64,
    axis: SweepAxis,
    values: &[f64],
    dt_solve: Option<f64>,
) -> Result<SweepTable> {
    let tier_labels = spec.tiers().to_vec();
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&value| {
            let started = std::time::Instant::now();
            let result = sweep_row(spec, q_max, axis, value, dt_solve);
            let wall = started.elapsed().as_secs_f64();
            sweep_row_to_record(&tier_labels, value, result, wall)
        })
        .collect();
    Ok(SweepTable { tier_labels, rows })
}

fn sweep_row_to_record(
    tier_labels: &[String],
    value: f64,
    result: Result<(KpiReport, Vec<String>, String)>,
    wall: f64,
) -> SweepRow {
    match result {
        Ok((kpi, labels, mode)) => {
            // map per-row tiers back onto the template labels
            let mut by_label = vec![f64::NAN; tier_labels.len()];
            for (i, label) in labels.iter().enumerate() {
                if let Some(j) = tier_labels.iter().position(|l| l == label) {
                    by_label[j] = kpi.expected_hit_ratio[i];
                }
            }
            SweepRow {
                axis_value: value,
                expected_hit_ratio: by_label,
                objective: kpi.objective,
                pnl: kpi.pnl,
                inv_penalty: kpi.inventory_penalty,
                hr_penalty: kpi.hit_ratio_penalty,
                terminal_penalty: kpi.terminal_penalty,
                solve_mode: mode,
                wall_time_s: wall,
                error: None,
            }
        }
        Err(e) => {
            let msg: String = format!("{e}").replace([',', '\n'], ";");
            SweepRow {
                axis_value: value,
                expected_hit_ratio: vec![f64::NAN; tier_labels.len()],
                objective: f64::NAN,
                pnl: f64::NAN,
                inv_penalty: f64::NAN,
                hr_penalty: f64::NAN,
                terminal_penalty: f64::NAN,
                solve_mode: format!("failed: {msg}"),
                wall_time_s: wall,
                error: Some(msg),
            }
        }
    }
}

fn sweep_row(
    spec: &MarketSpec,
    q_max: f64,
    axis: SweepAxis,
    value: f64,
    dt_solve: Option<f64>,
) -> Result<(KpiReport, Vec<String>, String)> {
    let modified = respec(spec, axis, value)?;
    let grid = InventoryGrid::new(modified.ladder(), modified.n_bonds(), q_max)?;
    let (policy, mode) = stationary_policy(&modified, &grid, dt_solve)?;
    let worst = max_outflow(&policy, &modified, &grid)?;
    let dt = (0.1 / worst).min(modified.risk().horizon);
    let law = forward_propagate(&policy, &modified, &grid, grid.origin(), dt, None)?;
    let kpi = expected_objective(&law, &modified)?;
    Ok((kpi, modified.tiers().to_vec(), mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::TableSet;
    use crate::linalg::SymmetricMatrix;
    use crate::market_model::{
        ArrivalBook, FillCurve, RiskSpec, Side, SizeLadder, TargetSpec, TierTarget,
    };
    use crate::quotes::{quote_from_value, PSource, XiClosure};

    fn tiny_spec(horizon: f64) -> MarketSpec {
        let ladder = SizeLadder::new(vec![1.0]).unwrap();
        let mut arrivals = ArrivalBook::zeroed(1, 1, 1);
        for side in Side::BOTH {
            arrivals.set(0, 0, side, 0, 100.0, FillCurve::logistic(2.0, 2.0));
        }
        let risk = RiskSpec {
            phi: 1.0,
            eta: 0.5,
            sigma_cov: SymmetricMatrix::from_diagonal(&[1.0]),
            horizon,
        };
        MarketSpec::new(
            vec!["B".into()],
            vec!["T".into()],
            ladder,
            arrivals,
            risk,
            TargetSpec::none(1).with_target(
                0,
                TierTarget {
                    r_star: 0.1,
                    kappa: 10.0,
                },
            ),
        )
        .unwrap()
    }

    fn flat_policy(spec: &MarketSpec, grid: &InventoryGrid, offset: f64) -> QuotePolicy {
        let tables = TableSet::build_default(spec).unwrap();
        let a = SymmetricMatrix::zeros(spec.n_bonds());
        let xi: Vec<f64> = spec
            .rungs()
            .iter()
            .map(|_| 0.0)
            .take(spec.n_tiers())
            .collect();
        let states: Vec<usize> = (0..grid.state_count()).collect();
        let mut policy = quote_from_value(
            spec,
            grid,
            &tables,
            &PSource::Quadratic {
                a: &a,
                b: None,
                closure: XiClosure::Constant(&xi),
            },
            &states,
        )
        .unwrap();
        // overwrite with a constant offset, keeping NaN deactivations
        for v in policy.offsets.iter_mut() {
            if !v.is_nan() {
                *v = offset;
            }
        }
        policy
    }

    #[test]
    fn generator_rates_match_fill_intensity() {
        let spec = tiny_spec(1.0);
        let grid = InventoryGrid::new(spec.ladder(), 1, 3.0).unwrap();
        let policy = flat_policy(&spec, &grid, 0.7);
        let s = grid.origin();
        let rates = generator_rates(&policy, &spec, &grid, s).unwrap();
        assert_eq!(rates.len(), 2);
        let lam = 100.0 * FillCurve::logistic(2.0, 2.0).prob_unchecked(0.7);
        for (dest, rate) in rates {
            assert!((rate - lam).abs() < 1e-12);
            assert!(dest == grid.index_of(&[1]).unwrap() || dest == grid.index_of(&[-1]).unwrap());
        }
        // boundary state: only the inward transition survives
        let top = grid.index_of(&[3]).unwrap();
        let rates_top = generator_rates(&policy, &spec, &grid, top).unwrap();
        assert_eq!(rates_top.len(), 1);
        assert_eq!(rates_top[0].0, grid.index_of(&[2]).unwrap());
    }

    #[test]
    fn zero_rates_keep_point_mass() {
        let spec = tiny_spec(0.5);
        let grid = InventoryGrid::new(spec.ladder(), 1, 3.0).unwrap();
        // push offsets far out so fill probabilities vanish
        let policy = flat_policy(&spec, &grid, 400.0);
        let law = forward_propagate(&policy, &spec, &grid, grid.origin(), 1e-3, Some(100)).unwrap();
        let mu = law.mu_final();
        assert!((mu[grid.origin()] - 1.0).abs() < 1e-10);
        assert!(law.acc.pnl.abs() < 1e-250);
    }

    #[test]
    fn symmetric_policy_keeps_zero_mean_and_conserves_mass() {
        let spec = tiny_spec(1.0);
        let grid = InventoryGrid::new(spec.ladder(), 1, 10.0).unwrap();
        let policy = flat_policy(&spec, &grid, 0.5);
        let law = forward_propagate(&policy, &spec, &grid, grid.origin(), 5e-4, Some(200)).unwrap();
        for (t, mu) in law.t_stored.iter().zip(&law.mu_stored) {
            let mass: f64 = super::neumaier_sum(mu);
            assert!(
                (mass - 1.0).abs() <= 1e-12 * t.max(1.0),
                "t={t}: mass {mass}"
            );
            let mean: f64 = mu
                .iter()
                .enumerate()
                .map(|(s, m)| m * grid.q_millions(s)[0])
                .sum();
            assert!(mean.abs() < 1e-10, "t={t}: mean {mean}");
        }
    }

    #[test]
    fn stability_bound_enforced() {
        let spec = tiny_spec(1.0);
        let grid = InventoryGrid::new(spec.ladder(), 1, 3.0).unwrap();
        let policy = flat_policy(&spec, &grid, -5.0); // f near 1, outflow ~200/day
        let worst = max_outflow(&policy, &spec, &grid).unwrap();
        assert!(worst > 150.0);
        assert!(forward_propagate(&policy, &spec, &grid, grid.origin(), 0.01, None).is_err());
        assert!(forward_propagate(
            &policy,
            &spec,
            &grid,
            grid.origin(),
            0.1 / worst,
            Some(1000)
        )
        .is_ok());
    }

    /// Dense 3x3 matrix exponential by scaling and squaring on the Taylor
    /// series; oracle for the truncated-chain propagation.
    fn expm3(a: [[f64; 3]; 3], t: f64) -> [[f64; 3]; 3] {
        let norm: f64 = a
            .iter()
            .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * t;
        let s = (norm.log2().ceil().max(0.0)) as u32 + 1;
        let scale = t / (2f64.powi(s as i32));
        let mul = |x: &[[f64; 3]; 3], y: &[[f64; 3]; 3]| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    for j in 0..3 {
                        out[i][j] += x[i][k] * y[k][j];
                    }
                }
            }
            out
        };
        // exp(A*scale) by 24-term Taylor
        let mut result = [[0.0; 3]; 3];
        for (i, row) in result.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut term = result;
        for n in 1..24 {
            let mut at = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    at[i][j] = a[i][j] * scale / n as f64;
                }
            }
            term = mul(&term, &at);
            for i in 0..3 {
                for j in 0..3 {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            result = mul(&result, &result);
        }
        result
    }

    #[test]
    fn three_state_chain_matches_matrix_exponential() {
        // q_max = 1 unit, single rung: states {-1, 0, 1}
        let spec = tiny_spec(1.0);
        let grid = InventoryGrid::new(spec.ladder(), 1, 1.0).unwrap();
        assert_eq!(grid.state_count(), 3);
        let policy = flat_policy(&spec, &grid, 0.3);
        let lam = 100.0 * FillCurve::logistic(2.0, 2.0).prob_unchecked(0.3);
        // generator Qᵀ for the forward equation dμ/dt = Qᵀ μ, states ordered
        // (-1, 0, +1): from 0 both directions at rate lam; from ±1 only inward
        let qt = [[-lam, lam, 0.0], [lam, -2.0 * lam, lam], [0.0, lam, -lam]];
        let dt = 0.05 / lam;
        let law =
            forward_propagate(&policy, &spec, &grid, grid.origin(), dt, Some(1_000_000)).unwrap();
        let mu = law.mu_final();
        let e = expm3(qt, 1.0);
        // μ_T = exp(Qᵀ T) μ_0 with μ_0 = e_1 (origin)
        for s in 0..3 {
            let oracle = e[s][1];
            assert!(
                (mu[s] - oracle).abs() <= 1e-6,
                "state {s}: {} vs oracle {oracle}",
                mu[s]
            );
        }
    }

    #[test]
    fn mean_inventory_ode_consistency() {
        let spec = tiny_spec(0.2);
        let grid = InventoryGrid::new(spec.ladder(), 1, 5.0).unwrap();
        // asymmetric constant policy: tighter ask drains inventory
        let tables = TableSet::build_default(&spec).unwrap();
        let a = SymmetricMatrix::from_diagonal(&[0.1]);
        let xi = vec![0.0];
        let states: Vec<usize> = (0..grid.state_count()).collect();
        let policy = quote_from_value(
            &spec,
            &grid,
            &tables,
            &PSource::Quadratic {
                a: &a,
                b: None,
                closure: XiClosure::Constant(&xi),
            },
            &states,
        )
        .unwrap();
        let dt = 2e-4;
        let law = forward_propagate(
            &policy,
            &spec,
            &grid,
            grid.index_of(&[2]).unwrap(),
            dt,
            Some(1),
        )
        .unwrap();
        // discrete identity: E[Q](t+h) − E[Q](t) = h Σ_q μ_t(q) drift(q)
        for w in law.t_stored.windows(2).take(50) {
            let i = law.t_stored.iter().position(|&t| t == w[0]).unwrap();
            let mu0 = &law.mu_stored[i];
            let mu1 = &law.mu_stored[i + 1];
            let h = w[1] - w[0];
            let mean = |mu: &Vec<f64>| -> f64 {
                mu.iter()
                    .enumerate()
                    .map(|(s, m)| m * grid.q_millions(s)[0])
                    .sum()
            };
            let mut drift = 0.0;
            for s in 0..grid.state_count() {
                if mu0[s] == 0.0 {
                    continue;
                }
                for (dest, rate) in generator_rates(&policy, &spec, &grid, s).unwrap() {
                    drift += mu0[s] * rate * (grid.q_millions(dest)[0] - grid.q_millions(s)[0]);
                }
            }
            let lhs = mean(mu1) - mean(mu0);
            assert!(
                (lhs - h * drift).abs() <= 1e-10 * lhs.abs().max(h),
                "d/dt E[Q] mismatch: {lhs} vs {}",
                h * drift
            );
        }
    }

    #[test]
    fn hit_ratio_forms_agree_and_constant_fill_recovers_probability() {
        let spec = tiny_spec(1.0);
        // walk spread is sqrt(2 λ f T) ≈ 7 units; keep the boundary ~6 sigma out
        let grid = InventoryGrid::new(spec.ladder(), 1, 45.0).unwrap();
        let curve = FillCurve::logistic(2.0, 2.0);
        let offset = curve.inverse(0.25).unwrap();
        let policy = flat_policy(&spec, &grid, offset);
        let law = forward_propagate(&policy, &spec, &grid, grid.origin(), 2e-4, None).unwrap();
        let r1 = expected_hit_ratio(&law, &spec, 0).unwrap();
        let r2 = expected_hit_ratio_time_average(&law, &spec, 0).unwrap();
        assert!((r1 - r2).abs() <= 1e-12, "forms differ: {r1} vs {r2}");
        // f == 0.25 on every active rung, so the realized ratio is 0.25 up to
        // the negligible boundary tail
        assert!((r1 - 0.25).abs() < 1e-6, "ratio {r1}");
    }

    #[test]
    fn penalty_free_objective_is_pure_positive_pnl() {
        // phi = eta = 0, no target: objective reduces to expected spread P&L,
        // positive near the riskless spreads
        let ladder = SizeLadder::new(vec![1.0]).unwrap();
        let mut arrivals = ArrivalBook::zeroed(1, 1, 1);
        for side in Side::BOTH {
            arrivals.set(0, 0, side, 0, 100.0, FillCurve::logistic(2.0, 2.0));
        }
        let spec = MarketSpec::new(
            vec!["B".into()],
            vec!["T".into()],
            ladder,
            arrivals,
            RiskSpec {
                phi: 0.0,
                eta: 0.0,
                sigma_cov: SymmetricMatrix::from_diagonal(&[1.0]),
                horizon: 0.5,
            },
            TargetSpec::none(1),
        )
        .unwrap();
        let grid = InventoryGrid::new(spec.ladder(), 1, 30.0).unwrap();
        let policy = flat_policy(&spec, &grid, 0.52);
        let law = forward_propagate(&policy, &spec, &grid, grid.origin(), 4e-4, None).unwrap();
        let kpi = expected_objective(&law, &spec).unwrap();
        assert_eq!(kpi.objective, kpi.pnl);
        assert_eq!(kpi.inventory_penalty, 0.0);
        assert_eq!(kpi.hit_ratio_penalty, 0.0);
        assert_eq!(kpi.terminal_penalty, 0.0);
        assert!(kpi.pnl > 0.0);
    }

    #[test]
    fn objective_components_sum_exactly() {
        let spec = tiny_spec(0.5);
        let grid = InventoryGrid::new(spec.ladder(), 1, 8.0).unwrap();
        let policy = flat_policy(&spec, &grid, 0.6);
        let law = forward_propagate(&policy, &spec, &grid, grid.origin(), 2e-4, None).unwrap();
        let kpi = expected_objective(&law, &spec).unwrap();
        assert_eq!(
            kpi.objective,
            kpi.pnl - kpi.inventory_penalty - kpi.hit_ratio_penalty - kpi.terminal_penalty
        );
        assert!(kpi.pnl > 0.0);
        assert!(
            kpi.terminal_penalty > 0.0,
            "eta = 0.5 with diffused inventory"
        );
    }

    #[test]
    fn respec_axes() {
        let spec = tiny_spec(1.0);
        let re = respec(&spec, SweepAxis::Kappa, 123.0).unwrap();
        assert_eq!(re.targets().get(0).unwrap().kappa, 123.0);
        assert!(respec(&spec, SweepAxis::Kappa, -1.0).is_err());
        // single-tier spec cannot run an intensity-ratio sweep
        assert!(respec(&spec, SweepAxis::IntensityRatio, 1.0).is_err());
        // correlation sweep needs two bonds
        assert!(respec(&spec, SweepAxis::Correlation, 0.5).is_err());
    }

    #[test]
    fn sweep_records_row_failures_and_continues() {
        let spec = tiny_spec(0.02);
        let table = sweep(&spec, 5.0, SweepAxis::Kappa, &[1.0, -5.0, 2.0], None).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.rows[0].error.is_none());
        assert!(table.rows[1].error.is_some());
        assert!(table.rows[1].objective.is_nan());
        assert!(table.rows[2].error.is_none());
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("failed:"));
    }
}
