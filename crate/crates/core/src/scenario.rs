//! Scenario files: a single TOML document with sections `[bonds]`, `[tiers]`,
//! `[ladder]`, `[[arrivals]]`, `[risk]` and `[[targets.tiers]]`, parsed and
//! validated into a [`MarketSpec`] plus the lattice bound.
//!
//! Arrival blocks are side-symmetric by default (`lambda`, `alpha`, `beta`
//! arrays over the ladder); per-side overrides use the `_bid` / `_ask`
//! suffixed forms. Unknown keys are rejected. Syntax errors carry the TOML
//! line/column; semantic errors name the offending section and field.
//!
//! ```toml
//! [bonds]
//! labels = ["XS1"]
//!
//! [tiers]
//! labels = ["clients"]
//!
//! [ladder]
//! sizes_m = [1.0, 5.0, 20.0]
//!
//! [[arrivals]]
//! bond = "XS1"
//! tier = "clients"
//! lambda = [500.0, 200.0, 50.0]
//! alpha = [2.0, 1.5, 1.0]
//! beta = [2.0, 1.5, 1.0]
//!
//! [risk]
//! phi = 1.0
//! eta = 0.0
//! horizon_days = 1.0
//! sigma = [1.0]          # bp / sqrt(day), per bond
//! q_max_m = 100.0
//!
//! [[targets.tiers]]
//! tier = "clients"
//! r_star = 0.1
//! kappa = 10.0
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::SymmetricMatrix;
use crate::market_model::{
    ArrivalBook, CurveForm, FillCurve, MarketSpec, RiskSpec, Side, SizeLadder, TargetSpec,
    TierTarget,
};

const MODULE: &str = "scenario";

/// A validated problem instance plus the per-bond inventory bound.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: MarketSpec,
    pub q_max: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    bonds: Labels,
    tiers: Labels,
    ladder: LadderSection,
    arrivals: Vec<ArrivalSection>,
    risk: RiskSection,
    targets: Option<TargetsSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    labels: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LadderSection {
    sizes_m: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrivalSection {
    bond: String,
    tier: String,
    form: Option<String>,
    lambda: Option<Vec<f64>>,
    lambda_bid: Option<Vec<f64>>,
    lambda_ask: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    alpha_bid: Option<Vec<f64>>,
    alpha_ask: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    beta_bid: Option<Vec<f64>>,
    beta_ask: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskSection {
    phi: f64,
    eta: f64,
    horizon_days: f64,
    /// Per-bond volatility in bp/sqrt(day).
    sigma: Vec<f64>,
    /// Optional correlation matrix; identity when absent.
    correlation: Option<Vec<Vec<f64>>>,
    q_max_m: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsSection {
    tiers: Vec<TargetEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetEntry {
    tier: String,
    r_star: f64,
    kappa: f64,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(MODULE, msg)
}

/// Resolve the symmetric-or-per-side pair for one field of an arrival block.
fn per_side(
    ctx: &str,
    name: &str,
    both: &Option<Vec<f64>>,
    bid: &Option<Vec<f64>>,
    ask: &Option<Vec<f64>>,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let check_len = |v: &Vec<f64>, which: &str| -> Result<()> {
        if v.len() != n {
            return Err(invalid(format!(
                "{ctx}: {which} has {} entries, ladder has {n}",
                v.len()
            )));
        }
        Ok(())
    };
    match (both, bid, ask) {
        (Some(v), None, None) => {
            check_len(v, name)?;
            Ok((v.clone(), v.clone()))
        }
        (None, Some(b), Some(a)) => {
            check_len(b, &format!("{name}_bid"))?;
            check_len(a, &format!("{name}_ask"))?;
            Ok((b.clone(), a.clone()))
        }
        (None, None, None) => Err(invalid(format!(
            "{ctx}: missing {name} (or {name}_bid/{name}_ask)"
        ))),
        _ => Err(invalid(format!(
            "{ctx}: give either {name} or both {name}_bid and {name}_ask, not a mixture"
        ))),
    }
}

/// Parse and validate a scenario document.
pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| invalid(format!("parse error: {e}")))?;

    let bonds = file.bonds.labels;
    let tiers = file.tiers.labels;
    if bonds.is_empty() {
        return Err(invalid("[bonds]: labels must not be empty"));
    }
    if tiers.is_empty() {
        return Err(invalid("[tiers]: labels must not be empty"));
    }
    for (name, labels) in [("bonds", &bonds), ("tiers", &tiers)] {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(invalid(format!("[{name}]: duplicate label '{l}'")));
            }
        }
    }
    let ladder = SizeLadder::new(file.ladder.sizes_m)?;
    let n_sizes = ladder.len();

    let mut arrivals = ArrivalBook::zeroed(bonds.len(), tiers.len(), n_sizes);
    let mut seen: Vec<(usize, usize)> = Vec::new();
    for (i, block) in file.arrivals.iter().enumerate() {
        let ctx = format!(
            "arrivals[{i}] (bond '{}', tier '{}')",
            block.bond, block.tier
        );
        let m = bonds
            .iter()
            .position(|b| *b == block.bond)
            .ok_or_else(|| invalid(format!("{ctx}: unknown bond")))?;
        let t = tiers
            .iter()
            .position(|x| *x == block.tier)
            .ok_or_else(|| invalid(format!("{ctx}: unknown tier")))?;
        if seen.contains(&(m, t)) {
            return Err(invalid(format!("{ctx}: duplicate arrival block")));
        }
        seen.push((m, t));
        match block.form.as_deref() {
            None | Some("logistic") => {}
            Some(other) => return Err(invalid(format!("{ctx}: unknown curve form '{other}'"))),
        }
        let (lam_b, lam_a) = per_side(
            &ctx,
            "lambda",
            &block.lambda,
            &block.lambda_bid,
            &block.lambda_ask,
            n_sizes,
        )?;
        let (al_b, al_a) = per_side(
            &ctx,
            "alpha",
            &block.alpha,
            &block.alpha_bid,
            &block.alpha_ask,
            n_sizes,
        )?;
        let (be_b, be_a) = per_side(
            &ctx,
            "beta",
            &block.beta,
            &block.beta_bid,
            &block.beta_ask,
            n_sizes,
        )?;
        for k in 0..n_sizes {
            for (side, lam, al, be) in [
                (Side::Bid, &lam_b, &al_b, &be_b),
                (Side::Ask, &lam_a, &al_a, &be_a),
            ] {
                if !(lam[k].is_finite() && lam[k] >= 0.0) {
                    return Err(invalid(format!(
                        "{ctx}: lambda[{k}] = {} must be finite and >= 0",
                        lam[k]
                    )));
                }
                let curve = FillCurve {
                    alpha: al[k],
                    beta: be[k],
                    form: CurveForm::Logistic,
                };
                if lam[k] > 0.0 {
                    curve
                        .validate()
                        .map_err(|e| invalid(format!("{ctx}: size {k}: {e}")))?;
                }
                arrivals.set(m, t, side, k, lam[k], curve);
            }
        }
    }

    let risk_in = file.risk;
    if risk_in.sigma.len() != bonds.len() {
        return Err(invalid(format!(
            "[risk]: sigma has {} entries for {} bonds",
            risk_in.sigma.len(),
            bonds.len()
        )));
    }
    for (i, s) in risk_in.sigma.iter().enumerate() {
        if !(s.is_finite() && *s >= 0.0) {
            return Err(invalid(format!(
                "[risk]: sigma[{i}] = {s} must be finite and >= 0"
            )));
        }
    }
    let m = bonds.len();
    let mut cov = vec![0.0; m * m];
    match &risk_in.correlation {
        None => {
            for i in 0..m {
                cov[i * m + i] = risk_in.sigma[i] * risk_in.sigma[i];
            }
        }
        Some(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(invalid("[risk]: correlation must be an MxM matrix"));
            }
            for i in 0..m {
                if (rows[i][i] - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("[risk]: correlation[{i}][{i}] must be 1")));
                }
                for j in 0..m {
                    if rows[i][j].abs() > 1.0 + 1e-12 {
                        return Err(invalid(format!(
                            "[risk]: correlation[{i}][{j}] outside [-1, 1]"
                        )));
                    }
                    cov[i * m + j] = rows[i][j] * risk_in.sigma[i] * risk_in.sigma[j];
                }
            }
        }
    }
    let sigma_cov = SymmetricMatrix::from_dense(m, &cov)
        .map_err(|e| invalid(format!("[risk]: correlation matrix: {e}")))?;
    let risk = RiskSpec {
        phi: risk_in.phi,
        eta: risk_in.eta,
        sigma_cov,
        horizon: risk_in.horizon_days,
    };
    if !(risk_in.q_max_m > 0.0 && risk_in.q_max_m.is_finite()) {
        return Err(invalid("[risk]: q_max_m must be positive"));
    }

    let mut targets = TargetSpec::none(tiers.len());
    if let Some(section) = file.targets {
        let mut seen_t: Vec<usize> = Vec::new();
        for entry in &section.tiers {
            let t = tiers
                .iter()
                .position(|x| *x == entry.tier)
                .ok_or_else(|| invalid(format!("[targets]: unknown tier '{}'", entry.tier)))?;
            if seen_t.contains(&t) {
                return Err(invalid(format!(
                    "[targets]: duplicate tier '{}'",
                    entry.tier
                )));
            }
            seen_t.push(t);
            targets = targets.with_target(
                t,
                TierTarget {
                    r_star: entry.r_star,
                    kappa: entry.kappa,
                },
            );
        }
    }

    let spec = MarketSpec::new(bonds, tiers, ladder, arrivals, risk, targets)?;
    Ok(Scenario {
        spec,
        q_max: risk_in.q_max_m,
    })
}

/// Load a scenario from a file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}
