//! CSV and JSON writers for solver outputs.
//!
//! All floats print with fixed 9-decimal formatting (negative zero
//! normalized) so repeated runs of the same build produce byte-identical
//! files.

use serde::Serialize;

use crate::begv::QuadraticValue;
use crate::error::Result;
use crate::forward_kpi::InventoryLaw;
use crate::hjb_exact::{InventoryGrid, ValueGrid};
use crate::market_model::MarketSpec;
use crate::quotes::{fmt9, QuotePolicy};

/// Value-function slices as CSV: `t, q1_m.., u`.
pub fn value_csv(value: &ValueGrid, ts: &[f64]) -> Result<String> {
    let grid = &value.grid;
    let mut out = String::from("t");
    for m in 0..grid.n_bonds() {
        out.push_str(&format!(",q{}_m", m + 1));
    }
    out.push_str(",u\n");
    for &t in ts {
        let ti = value.stored_index(t)?;
        for s in 0..grid.state_count() {
            out.push_str(&fmt9(value.t_stored[ti]));
            for q in grid.q_millions(s) {
                out.push(',');
                out.push_str(&fmt9(q));
            }
            out.push(',');
            out.push_str(&fmt9(value.u[ti][s]));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Policy slice as CSV with the time column:
/// `t, q.., bond, tier, side, size_m, offset_bp, fill_prob, xi`.
pub fn policy_csv(spec: &MarketSpec, grid: &InventoryGrid, policy: &QuotePolicy, t: f64) -> String {
    let mut out = String::from("t");
    for m in 0..grid.n_bonds() {
        out.push_str(&format!(",q{}_m", m + 1));
    }
    out.push_str(",tier,bond,side,size_m,offset_bp,fill_prob,xi\n");
    for (pos, &s) in policy.states.iter().enumerate() {
        let q = grid.q_millions(s);
        for (ri, r) in spec.rungs().iter().enumerate() {
            let d = policy.offset(pos, ri);
            if d.is_nan() {
                continue;
            }
            out.push_str(&fmt9(t));
            for v in &q {
                out.push(',');
                out.push_str(&fmt9(*v));
            }
            out.push_str(&format!(
                ",{},{},{},{},{},{},{}\n",
                spec.tiers()[r.tier],
                spec.bonds()[r.bond],
                r.side.label(),
                fmt9(r.size),
                fmt9(d),
                fmt9(r.curve.prob_unchecked(d)),
                fmt9(policy.xi_value(pos, r.tier)),
            ));
        }
    }
    out
}

/// Quadratic-value paths as CSV: `t, a_ij.., b_i.., xi0_<tier>..` with the
/// explicit dual closure evaluated on each stored A(t).
pub fn begv_paths_csv(spec: &MarketSpec, qv: &QuadraticValue, xi0: &[Vec<f64>]) -> String {
    let nb = spec.n_bonds();
    let targeted = spec.targets().targeted();
    let mut out = String::from("t");
    for i in 0..nb {
        for j in i..nb {
            out.push_str(&format!(",a_{}{}", i + 1, j + 1));
        }
    }
    for i in 0..nb {
        out.push_str(&format!(",b_{}", i + 1));
    }
    for &tau in &targeted {
        out.push_str(&format!(",xi0_{}", spec.tiers()[tau]));
    }
    out.push('\n');
    for (k, &t) in qv.t_grid.iter().enumerate() {
        out.push_str(&fmt9(t));
        for i in 0..nb {
            for j in i..nb {
                out.push(',');
                out.push_str(&fmt9(qv.a_path[k].get(i, j)));
            }
        }
        for i in 0..nb {
            out.push(',');
            out.push_str(&fmt9(qv.b_path[k][i]));
        }
        for &tau in &targeted {
            out.push(',');
            out.push_str(&fmt9(xi0[k][tau]));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct StationaryJson<'a> {
    bonds: &'a [String],
    tiers: &'a [String],
    a_stationary: Vec<Vec<f64>>,
    b_stationary: &'a [f64],
    d_diagonal: &'a [f64],
    d_corrected: Vec<Vec<f64>>,
    h11: &'a [Vec<f64>],
    h12: &'a [Vec<f64>],
    h22: &'a [Vec<f64>],
    kappa_tilde: Vec<f64>,
    xi0_stationary: Vec<f64>,
}

/// Stationary quadratic objects as JSON for downstream quote construction.
pub fn begv_stationary_json(
    spec: &MarketSpec,
    qv: &QuadraticValue,
    kappa_tilde: &[f64],
    xi0_stat: &[f64],
) -> Result<String> {
    let nb = spec.n_bonds();
    let dense = |m: &crate::linalg::SymmetricMatrix| -> Vec<Vec<f64>> {
        (0..nb)
            .map(|i| (0..nb).map(|j| m.get(i, j)).collect())
            .collect()
    };
    let doc = StationaryJson {
        bonds: spec.bonds(),
        tiers: spec.tiers(),
        a_stationary: dense(&qv.a_stat),
        b_stationary: &qv.b_stat,
        d_diagonal: &qv.d_diag,
        d_corrected: dense(&qv.dcal),
        h11: &qv.coeffs.h11,
        h12: &qv.coeffs.h12,
        h22: &qv.coeffs.h22,
        kappa_tilde: kappa_tilde.to_vec(),
        xi0_stationary: xi0_stat.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&doc).expect("serialization cannot fail") + "\n")
}

/// Inventory-law snapshots as CSV (`t, q.., mu`), skipping mass below 1e-12.
pub fn law_csv(law: &InventoryLaw, grid: &InventoryGrid) -> String {
    let mut out = String::from("t");
    for m in 0..grid.n_bonds() {
        out.push_str(&format!(",q{}_m", m + 1));
    }
    out.push_str(",mu\n");
    for (t, mu) in law.t_stored.iter().zip(&law.mu_stored) {
        for (s, &mass) in mu.iter().enumerate() {
            if mass < 1e-12 {
                continue;
            }
            out.push_str(&fmt9(*t));
            for q in grid.q_millions(s) {
                out.push(',');
                out.push_str(&fmt9(q));
            }
            out.push(',');
            out.push_str(&fmt9(mass));
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct QuoteRowJson {
    bond: String,
    tier: String,
    side: &'static str,
    size_m: f64,
    offset_bp: f64,
    fill_prob: f64,
    xi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    riskless: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inventory_correction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hit_ratio_correction: Option<f64>,
}

#[derive(Serialize)]
struct QuoteStateJson {
    mode: &'static str,
    q_m: Vec<f64>,
    hit_ratio: Vec<f64>,
    quotes: Vec<QuoteRowJson>,
}

/// Single-state quote query as JSON, including the component decomposition in
/// linearized mode.
pub fn quotes_json(
    spec: &MarketSpec,
    grid: &InventoryGrid,
    policy: &QuotePolicy,
    state: usize,
) -> Result<String> {
    let pos = policy.pos_of_state(state)?;
    let mut quotes = Vec::new();
    for (ri, r) in spec.rungs().iter().enumerate() {
        let d = policy.offset(pos, ri);
        if d.is_nan() {
            continue;
        }
        let dec = policy.decomposition.as_ref();
        quotes.push(QuoteRowJson {
            bond: spec.bonds()[r.bond].clone(),
            tier: spec.tiers()[r.tier].clone(),
            side: r.side.label(),
            size_m: r.size,
            offset_bp: d,
            fill_prob: r.curve.prob_unchecked(d),
            xi: policy.xi_value(pos, r.tier),
            riskless: dec.map(|x| x.riskless[pos * policy.n_rungs + ri]),
            inventory_correction: dec.map(|x| x.inventory[pos * policy.n_rungs + ri]),
            hit_ratio_correction: dec.map(|x| x.hit_ratio[pos * policy.n_rungs + ri]),
        });
    }
    let hit_ratio: Result<Vec<f64>> = (0..spec.n_tiers())
        .map(|tier| policy.tier_hit_ratio(spec, pos, tier))
        .collect();
    let doc = QuoteStateJson {
        mode: policy.mode.label(),
        q_m: grid.q_millions(state),
        hit_ratio: hit_ratio?,
        quotes,
    };
    Ok(serde_json::to_string_pretty(&doc).expect("serialization cannot fail") + "\n")
}
