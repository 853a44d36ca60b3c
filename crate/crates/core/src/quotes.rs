//! Quote surfaces from any value-function representation.
//!
//! Every mode feeds a per-rung marginal cost p into the exact control map
//! δ̃(p), except the linearized mode which uses
//! `δ★ ≈ δ₀ + p/c` and reports the decomposition into riskless spread,
//! inventory-risk correction and hit-ratio correction separately.
//!
//! Rungs whose fill would leave the inventory lattice are deactivated
//! (offset stored as NaN) in all modes, consistent with the solver and the
//! forward generator.

use crate::begv::{self, AsymCoefficients, LinearXi, QuadraticValue};
use crate::error::{Error, Result};
use crate::hamiltonian::{LinearizationConstants, TableSet};
use crate::hjb_exact::{dual_inner_solve, DualEntry, InventoryGrid, ValueGrid};
use crate::linalg::SymmetricMatrix;
use crate::market_model::{MarketSpec, Side};

const MODULE: &str = "quotes";

/// Available policy modes. The `begv_*` names state which dual closure feeds
/// the exact control map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteMode {
    Exact,
    BegvXiQ,
    BegvXiQuadratic,
    BegvXiConst,
    Linearized,
}

impl QuoteMode {
    pub fn label(self) -> &'static str {
        match self {
            QuoteMode::Exact => "exact",
            QuoteMode::BegvXiQ => "begv_exact_map_xi_q",
            QuoteMode::BegvXiQuadratic => "begv_exact_map_xi_quadratic",
            QuoteMode::BegvXiConst => "begv_exact_map_xi_const",
            QuoteMode::Linearized => "linearized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(QuoteMode::Exact),
            "begv_exact_map_xi_q" => Ok(QuoteMode::BegvXiQ),
            "begv_exact_map_xi_quadratic" => Ok(QuoteMode::BegvXiQuadratic),
            "begv_exact_map_xi_const" => Ok(QuoteMode::BegvXiConst),
            "linearized" => Ok(QuoteMode::Linearized),
            other => Err(Error::invalid(
                MODULE,
                format!("unknown quote mode '{other}'"),
            )),
        }
    }
}

/// Linearized-mode component split, aligned with the offsets array:
/// `offset = riskless + inventory − hit_ratio` by construction.
#[derive(Debug, Clone)]
pub struct QuoteDecomposition {
    pub riskless: Vec<f64>,
    pub inventory: Vec<f64>,
    pub hit_ratio: Vec<f64>,
}

/// A quote policy over a set of lattice states: one offset per (state, rung)
/// with NaN marking rungs deactivated at that state, and the tier dual values
/// used.
#[derive(Debug, Clone)]
pub struct QuotePolicy {
    pub mode: QuoteMode,
    /// Lattice state indices covered, ascending.
    pub states: Vec<usize>,
    pub n_rungs: usize,
    pub n_tiers: usize,
    /// `[pos * n_rungs + rung]`.
    pub offsets: Vec<f64>,
    /// `[pos * n_tiers + tier]`; zero for untargeted tiers.
    pub xi: Vec<f64>,
    pub decomposition: Option<QuoteDecomposition>,
}

impl QuotePolicy {
    /// Position of a lattice state within `states`.
    pub fn pos_of_state(&self, state: usize) -> Result<usize> {
        self.states.binary_search(&state).map_err(|_| {
            Error::invalid(MODULE, format!("state {state} not covered by this policy"))
        })
    }

    pub fn offset(&self, pos: usize, rung: usize) -> f64 {
        self.offsets[pos * self.n_rungs + rung]
    }

    pub fn xi_value(&self, pos: usize, tier: usize) -> f64 {
        self.xi[pos * self.n_tiers + tier]
    }

    /// Restriction of the policy to a subset of its states (ascending).
    pub fn subset(&self, states: &[usize]) -> Result<QuotePolicy> {
        let mut offsets = Vec::with_capacity(states.len() * self.n_rungs);
        let mut xi = Vec::with_capacity(states.len() * self.n_tiers);
        let mut dec = self.decomposition.as_ref().map(|_| QuoteDecomposition {
            riskless: Vec::new(),
            inventory: Vec::new(),
            hit_ratio: Vec::new(),
        });
        for &s in states {
            let pos = self.pos_of_state(s)?;
            offsets.extend_from_slice(&self.offsets[pos * self.n_rungs..(pos + 1) * self.n_rungs]);
            xi.extend_from_slice(&self.xi[pos * self.n_tiers..(pos + 1) * self.n_tiers]);
            if let (Some(out), Some(src)) = (dec.as_mut(), self.decomposition.as_ref()) {
                let range = pos * self.n_rungs..(pos + 1) * self.n_rungs;
                out.riskless.extend_from_slice(&src.riskless[range.clone()]);
                out.inventory
                    .extend_from_slice(&src.inventory[range.clone()]);
                out.hit_ratio.extend_from_slice(&src.hit_ratio[range]);
            }
        }
        Ok(QuotePolicy {
            mode: self.mode,
            states: states.to_vec(),
            n_rungs: self.n_rungs,
            n_tiers: self.n_tiers,
            offsets,
            xi,
            decomposition: dec,
        })
    }

    /// Instantaneous size-weighted hit ratio of one tier at a covered state;
    /// deactivated rungs contribute zero intensity.
    pub fn tier_hit_ratio(&self, spec: &MarketSpec, pos: usize, tier: usize) -> Result<f64> {
        let w = spec.notional_scale(tier)?;
        let mut acc = 0.0;
        for (ri, r) in spec.rungs().iter().enumerate() {
            if r.tier != tier {
                continue;
            }
            let d = self.offset(pos, ri);
            if d.is_nan() {
                continue;
            }
            acc += r.size * r.lambda * r.curve.prob_unchecked(d);
        }
        Ok(acc / w)
    }
}

/// Which dual closure feeds the quadratic-ansatz marginal costs.
pub enum XiClosure<'a> {
    /// Constant per tier (the explicit closure, or any fixed vector).
    Constant(&'a [f64]),
    /// ξ₀ + ½ qᵀB_τ q per tier.
    LocalQuadratic(&'a [(f64, SymmetricMatrix)]),
    /// Exact scalar fixed point solved per state.
    FixedPoint,
    /// Affine asymmetric closure ξ(q) = c + w·q.
    AsymLinear(&'a LinearXi),
}

/// Marginal-cost source for [`quote_from_value`].
pub enum PSource<'a> {
    /// Exact reduced value function at a stored time node.
    Exact { value: &'a ValueGrid, t: f64 },
    /// Quadratic ansatz `Δu = e_mᵀA(±q + ½z e_m) ± B_m` with a dual closure.
    Quadratic {
        a: &'a SymmetricMatrix,
        b: Option<&'a [f64]>,
        closure: XiClosure<'a>,
    },
}

impl PSource<'_> {
    fn mode(&self) -> QuoteMode {
        match self {
            PSource::Exact { .. } => QuoteMode::Exact,
            PSource::Quadratic { closure, .. } => match closure {
                XiClosure::Constant(_) | XiClosure::AsymLinear(_) => QuoteMode::BegvXiConst,
                XiClosure::LocalQuadratic(_) => QuoteMode::BegvXiQuadratic,
                XiClosure::FixedPoint => QuoteMode::BegvXiQ,
            },
        }
    }
}

/// Assemble a quote policy over `states` by applying the exact control map
/// per rung to the marginal costs of the chosen source.
pub fn quote_from_value(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    tables: &TableSet,
    source: &PSource,
    states: &[usize],
) -> Result<QuotePolicy> {
    let mode = source.mode();
    let n_rungs = spec.rungs().len();
    let n_tiers = spec.n_tiers();
    let mut offsets = vec![f64::NAN; states.len() * n_rungs];
    let mut xi = vec![0.0; states.len() * n_tiers];

    match source {
        PSource::Exact { value, t } => {
            let ti = value.stored_index(*t)?;
            let u = &value.u[ti];
            for (pos, &s) in states.iter().enumerate() {
                for tier in 0..n_tiers {
                    xi[pos * n_tiers + tier] = value.xi_at(ti, s, tier);
                }
                for (ri, r) in spec.rungs().iter().enumerate() {
                    if let Some(du) = crate::hjb_exact::reduced_increment(
                        u,
                        grid,
                        s,
                        r.bond,
                        r.side,
                        grid.z_steps(r.k),
                        r.size,
                    ) {
                        let p = du - xi[pos * n_tiers + r.tier];
                        offsets[pos * n_rungs + ri] = tables.get(ri).control_map(p)?;
                    }
                }
            }
        }
        PSource::Quadratic { a, b, closure } => {
            let closures = begv::tier_closures(spec, tables)?;
            for (pos, &s) in states.iter().enumerate() {
                let q = grid.q_millions(s);
                let aq = a.mul_vec(&q);
                // dual per targeted tier for this state
                match closure {
                    XiClosure::Constant(c) => {
                        for tier in 0..n_tiers {
                            xi[pos * n_tiers + tier] = c[tier];
                        }
                    }
                    XiClosure::LocalQuadratic(lq) => {
                        for (tier, (x0, hess)) in lq.iter().enumerate() {
                            xi[pos * n_tiers + tier] = x0 + 0.5 * hess.quad_form(&q);
                        }
                    }
                    XiClosure::AsymLinear(lin) => {
                        for tier in 0..n_tiers {
                            xi[pos * n_tiers + tier] = lin.eval(tier, &q);
                        }
                    }
                    XiClosure::FixedPoint => {
                        for tc in &closures {
                            // dual over the rungs active at this state, as in
                            // the exact solver's boundary treatment
                            let mut entries: Vec<DualEntry> = Vec::new();
                            for (ri, r) in spec.rungs().iter().enumerate() {
                                if r.tier != tc.tier {
                                    continue;
                                }
                                let step = if r.side == Side::Bid {
                                    grid.z_steps(r.k)
                                } else {
                                    -grid.z_steps(r.k)
                                };
                                if grid.shift(s, r.bond, step).is_none() {
                                    continue;
                                }
                                entries.push(DualEntry {
                                    z: r.size,
                                    p_base: begv::ansatz_p_base(a, *b, r, &aq),
                                    table: tables.get(ri),
                                });
                            }
                            let warm = tc.kappa_tilde * tc.y(a);
                            xi[pos * n_tiers + tc.tier] =
                                dual_inner_solve(&entries, tc.w, tc.r_star, tc.kappa, warm)?;
                        }
                    }
                }
                for (ri, r) in spec.rungs().iter().enumerate() {
                    let step = if r.side == Side::Bid {
                        grid.z_steps(r.k)
                    } else {
                        -grid.z_steps(r.k)
                    };
                    if grid.shift(s, r.bond, step).is_none() {
                        continue;
                    }
                    let p = begv::ansatz_p_base(a, *b, r, &aq) - xi[pos * n_tiers + r.tier];
                    offsets[pos * n_rungs + ri] = tables.get(ri).control_map(p)?;
                }
            }
        }
    }

    Ok(QuotePolicy {
        mode,
        states: states.to_vec(),
        n_rungs,
        n_tiers,
        offsets,
        xi,
        decomposition: None,
    })
}

/// Fully linearized quotes with the component decomposition
/// `δ★ = δ₀ + (1/c) e_mᵀA(±q + ½z e_m) ± (1/c)B_m − (1/c)ξ_τ 1{τ∈𝒜}`.
///
/// `consts` is aligned with `spec.rungs()`; A, B and ξ are the stationary
/// objects (B zero and ξ constant under side symmetry).
pub fn quote_linearized(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    consts: &[LinearizationConstants],
    a: &SymmetricMatrix,
    b: Option<&[f64]>,
    xi: &LinearXi,
    states: &[usize],
) -> Result<QuotePolicy> {
    if consts.len() != spec.rungs().len() {
        return Err(Error::invalid(
            MODULE,
            "linearization constants not aligned with rung list",
        ));
    }
    let n_rungs = spec.rungs().len();
    let n_tiers = spec.n_tiers();
    let targeted = spec.targets().targeted();
    let mut offsets = vec![f64::NAN; states.len() * n_rungs];
    let mut xi_out = vec![0.0; states.len() * n_tiers];
    let mut riskless = vec![f64::NAN; states.len() * n_rungs];
    let mut inventory = vec![f64::NAN; states.len() * n_rungs];
    let mut hit_ratio = vec![f64::NAN; states.len() * n_rungs];

    for (pos, &s) in states.iter().enumerate() {
        let q = grid.q_millions(s);
        let aq = a.mul_vec(&q);
        for tier in 0..n_tiers {
            xi_out[pos * n_tiers + tier] = xi.eval(tier, &q);
        }
        for (ri, r) in spec.rungs().iter().enumerate() {
            let step = if r.side == Side::Bid {
                grid.z_steps(r.k)
            } else {
                -grid.z_steps(r.k)
            };
            if grid.shift(s, r.bond, step).is_none() {
                continue;
            }
            let c = consts[ri].c;
            let sign = r.side.sign();
            let mut inv = (sign * aq[r.bond] + 0.5 * r.size * a.get(r.bond, r.bond)) / c;
            if let Some(bv) = b {
                inv += sign * bv[r.bond] / c;
            }
            let hr = if targeted.contains(&r.tier) {
                xi_out[pos * n_tiers + r.tier] / c
            } else {
                0.0
            };
            riskless[pos * n_rungs + ri] = consts[ri].delta0;
            inventory[pos * n_rungs + ri] = inv;
            hit_ratio[pos * n_rungs + ri] = hr;
            offsets[pos * n_rungs + ri] = consts[ri].delta0 + inv - hr;
        }
    }

    Ok(QuotePolicy {
        mode: QuoteMode::Linearized,
        states: states.to_vec(),
        n_rungs,
        n_tiers,
        offsets,
        xi: xi_out,
        decomposition: Some(QuoteDecomposition {
            riskless,
            inventory,
            hit_ratio,
        }),
    })
}

/// Stationary-policy bundle for a spec: quadratic value objects plus the
/// chosen closure, able to produce a policy over any state set.
pub struct StationaryBegv {
    pub qv: QuadraticValue,
    pub coeffs: AsymCoefficients,
}

impl StationaryBegv {
    pub fn new(spec: &MarketSpec, tables: &TableSet) -> Result<Self> {
        if spec.risk().phi <= 0.0 {
            return Err(Error::invalid(
                MODULE,
                "no stationary regime without a running penalty (phi = 0)",
            ));
        }
        let qv = begv::quadratic_value(spec, tables, 2)?;
        let coeffs = qv.coeffs.clone();
        Ok(Self { qv, coeffs })
    }

    /// Policy with the exact-map fixed-point closure over all lattice states.
    pub fn policy_xi_q(
        &self,
        spec: &MarketSpec,
        grid: &InventoryGrid,
        tables: &TableSet,
        states: &[usize],
    ) -> Result<QuotePolicy> {
        let b = if self.coeffs.is_zero() {
            None
        } else {
            Some(self.qv.b_stat.as_slice())
        };
        let src = PSource::Quadratic {
            a: &self.qv.a_stat,
            b,
            closure: XiClosure::FixedPoint,
        };
        quote_from_value(spec, grid, tables, &src, states)
    }
}

/// Fixed 9-decimal float formatting shared by every CSV export (negative zero
/// normalized).
pub fn fmt9(x: f64) -> String {
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    format!("{x:.9}")
}

/// Full policy table as CSV: one row per covered state, active rung and side,
/// with fill probabilities, the tier dual and the tier's instantaneous hit
/// ratio at that state.
pub fn policy_table(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    policy: &QuotePolicy,
) -> Result<String> {
    let mut out = String::new();
    for m in 0..spec.n_bonds() {
        out.push_str(&format!("q{}_m,", m + 1));
    }
    out.push_str("bond,tier,side,size_m,offset_bp,fill_prob,hit_ratio,xi\n");
    for (pos, &s) in policy.states.iter().enumerate() {
        let q = grid.q_millions(s);
        // per-tier ratios at this state, computed once
        let ratios: Result<Vec<f64>> = (0..spec.n_tiers())
            .map(|tier| policy.tier_hit_ratio(spec, pos, tier))
            .collect();
        let ratios = ratios?;
        for (ri, r) in spec.rungs().iter().enumerate() {
            let d = policy.offset(pos, ri);
            if d.is_nan() {
                continue;
            }
            for v in &q {
                out.push_str(&fmt9(*v));
                out.push(',');
            }
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                spec.bonds()[r.bond],
                spec.tiers()[r.tier],
                r.side.label(),
                fmt9(r.size),
                fmt9(d),
                fmt9(r.curve.prob_unchecked(d)),
                fmt9(ratios[r.tier]),
                fmt9(policy.xi_value(pos, r.tier)),
            ));
        }
    }
    Ok(out)
}
