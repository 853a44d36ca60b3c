//! Exact dualized HJB solver on a discrete inventory lattice.
//!
//! The reduced value function u(t, q) satisfies, backward from
//! u(T, q) = −(η/2) qᵀΣq,
//!
//! ```text
//! 0 = ∂_t u − (φ/2) qᵀΣq + Σ_{τ∉𝒜} Σ z_k H(Δu)
//!   + Σ_{τ∈𝒜} inf_ξ W_τ [ −ξ r★ + ξ²/(2κ_τ) + (1/W_τ) Σ z_k H(Δu − ξ) ]
//! ```
//!
//! with reduced increments `Δ^{s,k}_m u = (u(q) − u(q ± z_k e_m))/z_k` (top
//! sign = bid). The inner minimization is a strictly convex scalar problem per
//! targeted tier solved by warm-started Newton on its monotone first-order
//! condition. Time stepping is explicit Euler; rungs whose fill would leave
//! the lattice are deactivated (their intensity treated as zero), matching a
//! hard position limit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianTable, TableSet};
use crate::market_model::{MarketSpec, Side, SizeLadder};
use crate::quotes::{QuoteMode, QuotePolicy};

const MODULE: &str = "hjb_exact";

/// Parallelize per-state work above this lattice size.
const PAR_THRESHOLD: usize = 4096;
const PAR_CHUNK: usize = 1024;

/// Discrete inventory lattice `{−q_max, …, q_max}^M` in steps of the ladder
/// grid unit (the gcd of the ladder sizes).
#[derive(Debug, Clone)]
pub struct InventoryGrid {
    unit: f64,
    /// Steps per side: coordinates run in `[−n, n]`.
    n: i64,
    n_bonds: usize,
    /// Ladder sizes expressed in grid steps.
    z_steps: Vec<i64>,
}

impl InventoryGrid {
    pub fn new(ladder: &SizeLadder, n_bonds: usize, q_max: f64) -> Result<Self> {
        if q_max <= 0.0 || !q_max.is_finite() {
            return Err(Error::invalid(MODULE, "q_max must be positive"));
        }
        let unit = ladder.grid_unit();
        let n = (q_max / unit + 1e-9).floor() as i64;
        if n < 1 {
            return Err(Error::invalid(
                MODULE,
                format!("q_max {q_max} below one grid unit {unit}"),
            ));
        }
        let z_steps: Vec<i64> = ladder
            .sizes()
            .iter()
            .map(|z| (z / unit).round() as i64)
            .collect();
        for (z, &s) in ladder.sizes().iter().zip(&z_steps) {
            if ((s as f64) * unit - z).abs() > 1e-9 * z {
                return Err(Error::invalid(
                    MODULE,
                    format!("ladder size {z} is not a multiple of unit {unit}"),
                ));
            }
        }
        let per_bond = 2 * n as u128 + 1;
        let count = per_bond.pow(n_bonds as u32);
        if count > 100_000_000 {
            return Err(Error::invalid(
                MODULE,
                format!("lattice of {count} points is infeasible (reduce q_max or bond count)"),
            ));
        }
        Ok(Self {
            unit,
            n,
            n_bonds,
            z_steps,
        })
    }

    pub fn unit(&self) -> f64 {
        self.unit
    }

    pub fn steps_per_side(&self) -> i64 {
        self.n
    }

    pub fn n_bonds(&self) -> usize {
        self.n_bonds
    }

    pub fn points_per_bond(&self) -> usize {
        (2 * self.n + 1) as usize
    }

    pub fn state_count(&self) -> usize {
        self.points_per_bond().pow(self.n_bonds as u32)
    }

    /// Size of ladder rung `k` in grid steps.
    pub fn z_steps(&self, k: usize) -> i64 {
        self.z_steps[k]
    }

    /// Coordinate (in grid steps, signed) of `state` along `bond`.
    #[inline]
    pub fn coord(&self, state: usize, bond: usize) -> i64 {
        let w = self.points_per_bond();
        ((state / w.pow(bond as u32)) % w) as i64 - self.n
    }

    /// State index from signed step coordinates.
    pub fn index_of(&self, coords: &[i64]) -> Result<usize> {
        if coords.len() != self.n_bonds {
            return Err(Error::invalid(MODULE, "coordinate dimension mismatch"));
        }
        let w = self.points_per_bond();
        let mut idx = 0usize;
        for (m, &c) in coords.iter().enumerate() {
            if c.abs() > self.n {
                return Err(Error::invalid(
                    MODULE,
                    format!("coordinate {c} outside [-{}, {}]", self.n, self.n),
                ));
            }
            idx += ((c + self.n) as usize) * w.pow(m as u32);
        }
        Ok(idx)
    }

    /// State index of the flat (zero-inventory) point.
    pub fn origin(&self) -> usize {
        self.index_of(&vec![0; self.n_bonds]).unwrap()
    }

    /// Shift along `bond` by `dsteps`; `None` if the destination leaves the
    /// lattice (the rung is deactivated there).
    #[inline]
    pub fn shift(&self, state: usize, bond: usize, dsteps: i64) -> Option<usize> {
        let c = self.coord(state, bond);
        let nc = c + dsteps;
        if nc.abs() > self.n {
            return None;
        }
        let w = self.points_per_bond();
        Some((state as i64 + dsteps * (w as i64).pow(bond as u32)) as usize)
    }

    /// Inventory vector in millions for a state.
    pub fn q_millions(&self, state: usize) -> Vec<f64> {
        (0..self.n_bonds)
            .map(|m| self.coord(state, m) as f64 * self.unit)
            .collect()
    }

    /// Mirror state: q ↦ −q.
    pub fn negate(&self, state: usize) -> usize {
        let coords: Vec<i64> = (0..self.n_bonds).map(|m| -self.coord(state, m)).collect();
        self.index_of(&coords).unwrap()
    }
}

/// Reduced increment `Δ^{s,k}_m u = (u(q) − u(q ± z e_m))/z` with the top sign
/// for bids. `None` when the destination is off-lattice (rung inactive at q).
#[inline]
pub fn reduced_increment(
    u: &[f64],
    grid: &InventoryGrid,
    state: usize,
    bond: usize,
    side: Side,
    z_steps: i64,
    z_millions: f64,
) -> Option<f64> {
    let dest = grid.shift(
        state,
        bond,
        if side == Side::Bid { z_steps } else { -z_steps },
    )?;
    Some((u[state] - u[dest]) / z_millions)
}

/// One rung's contribution to a tier dual problem: size z, the marginal cost
/// before the dual shift, and its Hamiltonian table.
#[derive(Debug, Clone, Copy)]
pub struct DualEntry<'a> {
    pub z: f64,
    pub p_base: f64,
    pub table: &'a HamiltonianTable,
}

/// Solve the inner dual minimization for one targeted tier:
///
/// `min_ξ  −ξ r★ + ξ²/(2κ) + (1/W) Σ z_k H(p_base − ξ)`
///
/// via Newton on the monotone first-order condition
/// `ξ/κ − r★ − (1/W) Σ z_k H′(p_base − ξ) = 0`, with a maintained bisection
/// bracket. The admissible window keeps every `p_base − ξ` inside the table
/// range; a root outside it is a range error (tables must be rebuilt wider).
pub fn dual_inner_solve(
    entries: &[DualEntry],
    w: f64,
    r_star: f64,
    kappa: f64,
    warm: f64,
) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(0.0);
    }
    if entries.is_empty() {
        // no active rungs at this state: objective is −ξ r★ + ξ²/(2κ)
        return Ok(kappa * r_star);
    }
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for e in entries {
        lo = lo.max(e.p_base - e.table.p_max());
        hi = hi.min(e.p_base - e.table.p_min());
    }
    if !(lo < hi) {
        return Err(Error::numerical(
            MODULE,
            "dual variable outside table range: increments spread too wide",
        ));
    }
    let g = |xi: f64| -> Result<(f64, f64)> {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for e in entries {
            let p = e.p_base - xi;
            s1 += e.z * e.table.eval_h1(p)?;
            s2 += e.z * e.table.eval_h2(p)?;
        }
        Ok((xi / kappa - r_star - s1 / w, 1.0 / kappa + s2 / w))
    };
    // shrink the window slightly so interpolation stays strictly inside
    let pad = 1e-12 * (hi - lo).max(1.0);
    lo += pad;
    hi -= pad;
    let (g_lo, _) = g(lo)?;
    let (g_hi, _) = g(hi)?;
    if g_lo > 0.0 || g_hi < 0.0 {
        return Err(Error::numerical(
            MODULE,
            format!("dual first-order condition root outside table range: p span [{lo:.3}, {hi:.3}], g = [{g_lo:.3e}, {g_hi:.3e}]"),
        ));
    }
    let tol = 1e-10 / kappa.max(1.0);
    let mut x = warm.clamp(lo, hi);
    let mut blo = lo;
    let mut bhi = hi;
    for _ in 0..200 {
        let (gx, slope) = g(x)?;
        if gx.abs() <= tol {
            return Ok(x);
        }
        if gx > 0.0 {
            bhi = x;
        } else {
            blo = x;
        }
        let mut next = x - gx / slope;
        if !(next > blo && next < bhi) {
            next = 0.5 * (blo + bhi);
        }
        if (next - x).abs() <= 1e-16 * x.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::numerical(
        MODULE,
        "dual solve did not converge in 200 iterations",
    ))
}

/// Per-tier rung bookkeeping shared by the sweep loops.
#[derive(Debug)]
struct TierPlan {
    /// Rung indices into `spec.rungs()`, grouped per tier.
    rungs: Vec<Vec<usize>>,
    /// Targeted tiers with κ > 0 in tier order, with (W, r★, κ).
    targeted: Vec<(usize, f64, f64, f64)>,
}

impl TierPlan {
    fn new(spec: &MarketSpec) -> Result<Self> {
        let mut rungs = vec![Vec::new(); spec.n_tiers()];
        for (i, r) in spec.rungs().iter().enumerate() {
            rungs[r.tier].push(i);
        }
        let mut targeted = Vec::new();
        for tau in spec.targets().targeted() {
            let t = spec.targets().get(tau).unwrap();
            if t.kappa > 0.0 {
                targeted.push((tau, spec.notional_scale(tau)?, t.r_star, t.kappa));
            }
        }
        Ok(Self { rungs, targeted })
    }

    fn targeted_pos(&self, tier: usize) -> Option<usize> {
        self.targeted.iter().position(|&(tau, ..)| tau == tier)
    }
}

/// Solver parameters. `dt = None` applies the stability default
/// `min(1e-4, 0.1 / Σ λ)`; `store_every = None` stores every node for small
/// lattices and strides large ones (first and last slices always kept).
#[derive(Debug, Clone, Default)]
pub struct SolveParams {
    pub dt: Option<f64>,
    pub store_every: Option<usize>,
}

/// Stability-bounded default time step.
pub fn default_dt(spec: &MarketSpec) -> f64 {
    let total_lambda: f64 = spec.rungs().iter().map(|r| r.lambda).sum();
    (0.1 / total_lambda).min(1e-4)
}

/// Backward solution of the reduced HJB: value slices u(t, ·) and the dual
/// fields ξ_τ(t, ·) at stored time nodes (ascending t, always containing 0
/// and T).
#[derive(Debug, Clone)]
pub struct ValueGrid {
    pub grid: InventoryGrid,
    pub t_stored: Vec<f64>,
    /// Value slices aligned with `t_stored`.
    pub u: Vec<Vec<f64>>,
    /// Dual slices aligned with `t_stored`, state-major:
    /// `xi[node][state * n_targeted + j]` for targeted tier `targeted[j]`.
    pub xi: Vec<Vec<f64>>,
    /// Targeted tier ids (κ > 0) in tier order.
    pub targeted: Vec<usize>,
    pub dt: f64,
}

impl ValueGrid {
    /// Index of a stored time node.
    pub fn stored_index(&self, t: f64) -> Result<usize> {
        self.t_stored
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9)
            .ok_or_else(|| Error::invalid(MODULE, format!("t={t} is not on the stored time grid")))
    }

    /// ξ_τ(t_index, state); zero for untargeted tiers.
    pub fn xi_at(&self, t_index: usize, state: usize, tier: usize) -> f64 {
        match self.targeted.iter().position(|&x| x == tier) {
            Some(j) => self.xi[t_index][state * self.targeted.len() + j],
            None => 0.0,
        }
    }
}

struct StepContext<'a> {
    spec: &'a MarketSpec,
    grid: &'a InventoryGrid,
    tables: &'a TableSet,
    plan: &'a TierPlan,
    phi_sigma: &'a crate::linalg::SymmetricMatrix,
}

impl<'a> StepContext<'a> {
    /// RHS of the reduced HJB at one state plus the tier duals used.
    /// `xi_out` has length `plan.targeted.len()`.
    fn state_rhs(
        &self,
        u: &[f64],
        state: usize,
        warm: &[f64],
        xi_out: &mut [f64],
        scratch: &mut Vec<(f64, f64, usize)>,
    ) -> Result<f64> {
        let q = self.grid.q_millions(state);
        let mut rhs = -0.5 * self.phi_sigma.quad_form(&q);
        for tier in 0..self.spec.n_tiers() {
            scratch.clear();
            for &ri in &self.plan.rungs[tier] {
                let r = &self.spec.rungs()[ri];
                if let Some(delta_u) = reduced_increment(
                    u,
                    self.grid,
                    state,
                    r.bond,
                    r.side,
                    self.grid.z_steps(r.k),
                    r.size,
                ) {
                    scratch.push((r.size, delta_u, ri));
                }
            }
            match self.plan.targeted_pos(tier) {
                Some(j) => {
                    let (_, w, r_star, kappa) = self.plan.targeted[j];
                    let entries: Vec<DualEntry> = scratch
                        .iter()
                        .map(|&(z, p, ri)| DualEntry {
                            z,
                            p_base: p,
                            table: self.tables.get(ri),
                        })
                        .collect();
                    let xi = dual_inner_solve(&entries, w, r_star, kappa, warm[j])?;
                    xi_out[j] = xi;
                    let mut hsum = 0.0;
                    for e in &entries {
                        hsum += e.z * e.table.eval_h(e.p_base - xi)?;
                    }
                    rhs += w * (-xi * r_star + xi * xi / (2.0 * kappa)) + hsum;
                }
                None => {
                    for &(z, p, ri) in scratch.iter() {
                        rhs += z * self.tables.get(ri).eval_h(p)?;
                    }
                }
            }
        }
        Ok(rhs)
    }

    /// One explicit Euler step over a contiguous state chunk.
    fn step_chunk(
        &self,
        u_next: &[f64],
        xi_warm: &[f64],
        dt: f64,
        first_state: usize,
        u_out: &mut [f64],
        xi_out: &mut [f64],
    ) -> Result<()> {
        let nt = self.plan.targeted.len();
        let mut scratch = Vec::with_capacity(16);
        let mut xi_buf = vec![0.0; nt];
        for (i, u_slot) in u_out.iter_mut().enumerate() {
            let s = first_state + i;
            let warm = &xi_warm[s * nt..(s + 1) * nt];
            xi_buf.copy_from_slice(warm);
            let rhs = self.state_rhs(u_next, s, warm, &mut xi_buf, &mut scratch)?;
            let v = u_next[s] + dt * rhs;
            if !v.is_finite() {
                return Err(Error::numerical(
                    MODULE,
                    format!("non-finite value at q = {:?}", self.grid.q_millions(s)),
                ));
            }
            *u_slot = v;
            xi_out[i * nt..(i + 1) * nt].copy_from_slice(&xi_buf);
        }
        Ok(())
    }

    /// Dual field for a whole slice (used for stored nodes and at T). Newton
    /// warm-starts from the previous time node when available, else from the
    /// neighboring state just solved.
    fn xi_slice(&self, u: &[f64], warm: &[f64]) -> Result<Vec<f64>> {
        let nt = self.plan.targeted.len();
        let n = self.grid.state_count();
        let mut out = vec![0.0; n * nt];
        let mut scratch: Vec<(f64, f64, usize)> = Vec::with_capacity(16);
        for s in 0..n {
            for j in 0..nt {
                let (tier, w, r_star, kappa) = self.plan.targeted[j];
                scratch.clear();
                for &ri in &self.plan.rungs[tier] {
                    let r = &self.spec.rungs()[ri];
                    if let Some(delta_u) = reduced_increment(
                        u,
                        self.grid,
                        s,
                        r.bond,
                        r.side,
                        self.grid.z_steps(r.k),
                        r.size,
                    ) {
                        scratch.push((r.size, delta_u, ri));
                    }
                }
                let entries: Vec<DualEntry> = scratch
                    .iter()
                    .map(|&(z, p, ri)| DualEntry {
                        z,
                        p_base: p,
                        table: self.tables.get(ri),
                    })
                    .collect();
                let mut start = warm[s * nt + j];
                if start == 0.0 && s > 0 {
                    start = out[(s - 1) * nt + j];
                }
                out[s * nt + j] = dual_inner_solve(&entries, w, r_star, kappa, start)?;
            }
        }
        Ok(out)
    }
}

/// One explicit Euler step `u_prev = u_next + dt · RHS(u_next)`.
///
/// `xi_warm` is the state-major dual field from the previous step (length
/// `state_count × n_targeted`); returns the new value slice and the dual
/// field evaluated at `u_next`.
pub fn hjb_step(
    u_next: &[f64],
    xi_warm: &[f64],
    spec: &MarketSpec,
    grid: &InventoryGrid,
    tables: &TableSet,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let plan = TierPlan::new(spec)?;
    let phi_sigma = spec.risk().sigma_cov.scale(spec.risk().phi);
    let ctx = StepContext {
        spec,
        grid,
        tables,
        plan: &plan,
        phi_sigma: &phi_sigma,
    };
    step_once(&ctx, u_next, xi_warm, dt)
}

fn step_once(
    ctx: &StepContext,
    u_next: &[f64],
    xi_warm: &[f64],
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = ctx.grid.state_count();
    let nt = ctx.plan.targeted.len();
    let mut u_out = vec![0.0; n];
    let mut xi_out = vec![0.0; n * nt];
    if n >= PAR_THRESHOLD {
        // chunked data-parallel map with a barrier per step; output chunks are
        // disjoint so the result is deterministic
        let results: Result<Vec<()>> = u_out
            .par_chunks_mut(PAR_CHUNK)
            .zip(xi_out.par_chunks_mut(PAR_CHUNK * nt.max(1)))
            .enumerate()
            .map(|(ci, (uc, xc))| ctx.step_chunk(u_next, xi_warm, dt, ci * PAR_CHUNK, uc, xc))
            .collect();
        results?;
    } else {
        ctx.step_chunk(u_next, xi_warm, dt, 0, &mut u_out, &mut xi_out)?;
    }
    Ok((u_out, xi_out))
}

/// Solve the reduced HJB backward from T to 0.
///
/// Stores u and ξ at every time node for lattices up to 1000 points and
/// strided (plus the t = 0 and t = T slices) beyond. The per-state dual
/// Newtons warm-start from the previous time node.
pub fn solve(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    tables: &TableSet,
    params: &SolveParams,
) -> Result<ValueGrid> {
    if grid.n_bonds() != spec.n_bonds() {
        return Err(Error::invalid(
            MODULE,
            "grid does not match spec bond count",
        ));
    }
    if spec.n_bonds() > 2 {
        return Err(Error::invalid(
            MODULE,
            "exact solver is capped at M <= 2 bonds; use the quadratic approximation",
        ));
    }
    let n = grid.state_count();
    let plan = TierPlan::new(spec)?;
    let nt = plan.targeted.len();
    let horizon = spec.risk().horizon;
    let dt = params.dt.unwrap_or_else(|| default_dt(spec)).min(horizon);
    if dt <= 0.0 {
        return Err(Error::invalid(MODULE, "dt must be positive"));
    }
    let n_steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let store_every = params
        .store_every
        .unwrap_or(if n <= 1000 { 1 } else { 100 });

    let phi_sigma = spec.risk().sigma_cov.scale(spec.risk().phi);
    let ctx = StepContext {
        spec,
        grid,
        tables,
        plan: &plan,
        phi_sigma: &phi_sigma,
    };

    // terminal condition u(T, q) = −(η/2) qᵀΣq, exact
    let eta_sigma = spec.risk().sigma_cov.scale(spec.risk().eta);
    let mut u: Vec<f64> = (0..n)
        .map(|s| -0.5 * eta_sigma.quad_form(&grid.q_millions(s)))
        .collect();
    let mut xi = ctx.xi_slice(&u, &vec![0.0; n * nt])?;

    // divergence guard: generous bound on |u| growth per unit time
    let mut rate_bound = 0.0;
    for (i, r) in spec.rungs().iter().enumerate() {
        rate_bound += r.size * tables.get(i).eval_h(tables.p_min())?;
    }
    let q_edge = vec![grid.steps_per_side() as f64 * grid.unit(); grid.n_bonds()];
    rate_bound += 0.5 * phi_sigma.quad_form(&q_edge);
    for (tau, w, r_star, kappa) in &plan.targeted {
        let _ = tau;
        rate_bound += w * kappa * r_star * r_star;
    }
    let u_bound = u.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 2.0 * rate_bound * horizon + 1.0;

    let mut t_stored = vec![horizon];
    let mut u_stored = vec![u.clone()];
    let mut xi_stored = vec![xi.clone()];

    let mut t = horizon;
    for step in 1..=n_steps {
        let h = if step == n_steps { t } else { dt };
        let (u_prev, xi_now) = step_once(&ctx, &u, &xi, h)?;
        u = u_prev;
        xi = xi_now;
        t = if step == n_steps {
            0.0
        } else {
            horizon - step as f64 * dt
        };
        let max_u = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_u > u_bound {
            return Err(Error::numerical(
                MODULE,
                format!("instability detected at t={t:.6} (|u| = {max_u:.3e}); reduce dt"),
            ));
        }
        if step == n_steps || step % store_every == 0 {
            t_stored.push(t);
            u_stored.push(u.clone());
            // ξ stored for slice t must be the dual of u(t, ·)
            xi_stored.push(ctx.xi_slice(&u, &xi)?);
        }
    }

    t_stored.reverse();
    u_stored.reverse();
    xi_stored.reverse();
    Ok(ValueGrid {
        grid: grid.clone(),
        t_stored,
        u: u_stored,
        xi: xi_stored,
        targeted: plan.targeted.iter().map(|&(tau, ..)| tau).collect(),
        dt,
    })
}

/// Solve with automatic table management: builds default tables and rebuilds
/// them wider (×2, up to three times) if any encountered `Δu − ξ` leaves the
/// range.
pub fn solve_auto(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    params: &SolveParams,
) -> Result<(ValueGrid, TableSet)> {
    let mut tables = TableSet::build_default(spec)?;
    for _ in 0..3 {
        match solve(spec, grid, &tables, params) {
            Ok(v) => return Ok((v, tables)),
            Err(e) if e.is_range_error() => {
                tables = tables.rebuild_wider(spec, 2.0)?;
            }
            Err(e) => return Err(e),
        }
    }
    let v = solve(spec, grid, &tables, params)?;
    Ok((v, tables))
}

/// Extract the exact optimal quote policy at a stored time node: per active
/// rung and lattice point, `δ★ = δ̃(Δu − ξ_τ·1{τ∈𝒜})` via the exact control
/// map.
pub fn extract_policy(
    value: &ValueGrid,
    spec: &MarketSpec,
    tables: &TableSet,
    t: f64,
) -> Result<QuotePolicy> {
    let ti = value.stored_index(t)?;
    let grid = &value.grid;
    let n = grid.state_count();
    let n_rungs = spec.rungs().len();
    let n_tiers = spec.n_tiers();
    let u = &value.u[ti];
    let mut offsets = vec![f64::NAN; n * n_rungs];
    let mut xi = vec![0.0; n * n_tiers];
    for s in 0..n {
        for tier in 0..n_tiers {
            xi[s * n_tiers + tier] = value.xi_at(ti, s, tier);
        }
        for (ri, r) in spec.rungs().iter().enumerate() {
            if let Some(delta_u) =
                reduced_increment(u, grid, s, r.bond, r.side, grid.z_steps(r.k), r.size)
            {
                let p = delta_u - xi[s * n_tiers + r.tier];
                offsets[s * n_rungs + ri] = tables.get(ri).control_map(p)?;
            }
        }
    }
    Ok(QuotePolicy {
        mode: QuoteMode::Exact,
        states: (0..n).collect(),
        n_rungs,
        n_tiers,
        offsets,
        xi,
        decomposition: None,
    })
}
