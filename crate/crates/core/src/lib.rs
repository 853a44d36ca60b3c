//! Optimal OTC market-making quotes on a size ladder with inventory risk and
//! size-weighted hit-ratio targets.
//!
//! The library solves the dealer's quoting problem three ways and evaluates
//! the result:
//!
//! - [`hjb_exact`] — the exact dualized HJB equation on a discrete inventory
//!   lattice, solved backward in time by explicit Euler with a per-state
//!   scalar dual minimization for each targeted tier.
//! - [`begv`] — the quadratic value-function hierarchy: second-order
//!   Hamiltonian expansion, matrix Riccati equation in closed form, three dual
//!   closures (constant, local-quadratic, exact scalar fixed point), and the
//!   full asymmetric-intensity extension with a linear value term.
//! - [`quotes`] — quote surfaces assembled from either representation via the
//!   exact control map, plus the fully linearized decomposition into riskless
//!   spread, inventory-risk correction and hit-ratio correction.
//! - [`forward_kpi`] — forward Kolmogorov propagation of the inventory law
//!   under a frozen policy and desk-level KPIs (expected realized hit ratio,
//!   mean-field objective), with sweep drivers over penalty, intensity-ratio
//!   and correlation axes.
//!
//! Units: offsets in bp, sizes and inventory in millions of notional,
//! intensities in 1/day, time in days, covariance in bp²/day.

pub mod begv;
pub mod error;
pub mod export;
pub mod forward_kpi;
pub mod hamiltonian;
pub mod hjb_exact;
pub mod linalg;
pub mod market_model;
pub mod quotes;
pub mod scenario;

pub use error::{Error, Result};
pub use linalg::SymmetricMatrix;
pub use market_model::{
    fill_intensity, ArrivalBook, CurveForm, FillCurve, MarketSpec, RiskSpec, Rung, Side,
    SizeLadder, TargetSpec, TierTarget,
};
