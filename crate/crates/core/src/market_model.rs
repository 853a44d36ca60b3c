//! Problem instance: instruments, client tiers, size ladder, fill curves,
//! arrival intensities, risk and target parameters, and the elementary market
//! primitives built on them.
//!
//! Units are fixed throughout the library: offsets in bp, sizes in millions of
//! notional, intensities per day, time in days, covariance in bp²/day. All
//! types are immutable after validation and safe to share across threads.

use serde::Serialize;

use crate::error::{Error, Result};

const MODULE: &str = "market_model";

/// Quote side. Bid fills add inventory, ask fills remove it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Bid, Side::Ask];

    /// Inventory sign convention: bid = +1 (top sign), ask = −1.
    pub fn sign(self) -> f64 {
        match self {
            Side::Bid => 1.0,
            Side::Ask => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Bid => 0,
            Side::Ask => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::Bid => "bid",
            Side::Ask => "ask",
        }
    }
}

/// Supported fill-probability curve families.
///
/// Only the logistic family is built in; the enum is the extension point for
/// other strictly decreasing families with a closed-form inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveForm {
    Logistic,
}

/// Fill-probability curve f(δ) for one rung; the probability a quoted offset
/// δ (bp from mid) wins the request.
///
/// Logistic form: `f(δ) = 1 / (1 + exp(α + βδ))`, strictly decreasing with
/// range in (0,1); α is dimensionless, β is in 1/bp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FillCurve {
    pub alpha: f64,
    pub beta: f64,
    pub form: CurveForm,
}

impl FillCurve {
    pub fn logistic(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            form: CurveForm::Logistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::invalid(
                MODULE,
                "fill curve parameters must be finite",
            ));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid(
                MODULE,
                format!("fill curve requires beta > 0, got {}", self.beta),
            ));
        }
        Ok(())
    }

    /// Fill probability f(δ). Rejects non-finite offsets.
    pub fn probability(&self, delta_bp: f64) -> Result<f64> {
        if !delta_bp.is_finite() {
            return Err(Error::invalid(
                MODULE,
                format!("non-finite offset {delta_bp}"),
            ));
        }
        Ok(self.prob_unchecked(delta_bp))
    }

    /// f(δ) without the finiteness check, for hot loops over validated inputs.
    #[inline]
    pub fn prob_unchecked(&self, delta_bp: f64) -> f64 {
        match self.form {
            CurveForm::Logistic => {
                let x = self.alpha + self.beta * delta_bp;
                // branch keeps full relative precision on both tails
                if x >= 0.0 {
                    let e = (-x).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + x.exp())
                }
            }
        }
    }

    /// Complement 1 − f(δ), computed without cancellation (needed where f is
    /// close to 1).
    #[inline]
    pub fn complement(&self, delta_bp: f64) -> f64 {
        match self.form {
            CurveForm::Logistic => {
                let x = self.alpha + self.beta * delta_bp;
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Inverse of the fill probability: the offset quoting probability `u`.
    /// Logistic closed form: `δ = (ln(1/u − 1) − α) / β`.
    pub fn inverse(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::invalid(
                MODULE,
                format!("fill probability {u} outside (0,1)"),
            ));
        }
        match self.form {
            CurveForm::Logistic => Ok((((1.0 - u) / u).ln() - self.alpha) / self.beta),
        }
    }

    /// f′(δ) = −β f (1 − f) for the logistic family.
    #[inline]
    pub fn deriv1(&self, delta_bp: f64) -> f64 {
        match self.form {
            CurveForm::Logistic => {
                let f = self.prob_unchecked(delta_bp);
                let c = self.complement(delta_bp);
                -self.beta * f * c
            }
        }
    }

    /// f″(δ) = β² f (1 − f)(1 − 2f).
    #[inline]
    pub fn deriv2(&self, delta_bp: f64) -> f64 {
        match self.form {
            CurveForm::Logistic => {
                let f = self.prob_unchecked(delta_bp);
                let c = self.complement(delta_bp);
                self.beta * self.beta * f * c * (1.0 - 2.0 * f)
            }
        }
    }

    /// f‴(δ) = −β³ f (1 − f)(1 − 6f + 6f²).
    #[inline]
    pub fn deriv3(&self, delta_bp: f64) -> f64 {
        match self.form {
            CurveForm::Logistic => {
                let f = self.prob_unchecked(delta_bp);
                let c = self.complement(delta_bp);
                -self.beta.powi(3) * f * c * (1.0 - 6.0 * f + 6.0 * f * f)
            }
        }
    }
}

/// OTC fill intensity Λ(δ) = λ · f(δ), in 1/day.
pub fn fill_intensity(lambda: f64, curve: &FillCurve, delta_bp: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::invalid(
            MODULE,
            format!("negative arrival intensity {lambda}"),
        ));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * curve.probability(delta_bp)?)
}

/// Ladder of tradable notional sizes z_k (millions), strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeLadder {
    sizes: Vec<f64>,
}

/// Resolution for expressing ladder sizes as integers (1 notional unit when
/// sizes are in millions).
const SIZE_QUANTUM: f64 = 1e-6;

impl SizeLadder {
    pub fn new(sizes: Vec<f64>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid(MODULE, "size ladder is empty"));
        }
        for w in sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(
                    MODULE,
                    "ladder sizes must be strictly increasing",
                ));
            }
        }
        if sizes[0] <= 0.0 {
            return Err(Error::invalid(
                MODULE,
                "ladder sizes must be strictly positive",
            ));
        }
        for &z in &sizes {
            let q = z / SIZE_QUANTUM;
            if (q - q.round()).abs() > 1e-6 * q.max(1.0) {
                return Err(Error::invalid(
                    MODULE,
                    format!("ladder size {z} is below the 1-unit resolution"),
                ));
            }
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Grid unit: the gcd of the ladder sizes, so every size is an integer
    /// multiple of it.
    pub fn grid_unit(&self) -> f64 {
        let mut g: u64 = 0;
        for &z in &self.sizes {
            g = gcd(g, (z / SIZE_QUANTUM).round() as u64);
        }
        g as f64 * SIZE_QUANTUM
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Arrival intensities and fill curves per (bond, tier, side, rung).
#[derive(Debug, Clone)]
pub struct ArrivalBook {
    n_bonds: usize,
    n_tiers: usize,
    n_sizes: usize,
    lambda: Vec<f64>,
    curves: Vec<FillCurve>,
}

impl ArrivalBook {
    /// All-zero book; fill in per-rung entries before building the spec.
    pub fn zeroed(n_bonds: usize, n_tiers: usize, n_sizes: usize) -> Self {
        let n = n_bonds * n_tiers * 2 * n_sizes;
        Self {
            n_bonds,
            n_tiers,
            n_sizes,
            lambda: vec![0.0; n],
            curves: vec![FillCurve::logistic(0.0, 1.0); n],
        }
    }

    #[inline]
    fn idx(&self, bond: usize, tier: usize, side: Side, k: usize) -> usize {
        ((bond * self.n_tiers + tier) * 2 + side.index()) * self.n_sizes + k
    }

    pub fn set(
        &mut self,
        bond: usize,
        tier: usize,
        side: Side,
        k: usize,
        lambda: f64,
        curve: FillCurve,
    ) {
        let i = self.idx(bond, tier, side, k);
        self.lambda[i] = lambda;
        self.curves[i] = curve;
    }

    pub fn lambda(&self, bond: usize, tier: usize, side: Side, k: usize) -> f64 {
        self.lambda[self.idx(bond, tier, side, k)]
    }

    pub fn curve(&self, bond: usize, tier: usize, side: Side, k: usize) -> &FillCurve {
        &self.curves[self.idx(bond, tier, side, k)]
    }

    fn validate(&self) -> Result<()> {
        for (&l, c) in self.lambda.iter().zip(&self.curves) {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::invalid(
                    MODULE,
                    format!("arrival intensity {l} must be finite and >= 0"),
                ));
            }
            if l > 0.0 {
                c.validate()?;
            }
        }
        for tier in 0..self.n_tiers {
            let total: f64 = (0..self.n_bonds)
                .flat_map(|m| {
                    Side::BOTH
                        .iter()
                        .flat_map(move |&s| (0..self.n_sizes).map(move |k| (m, s, k)))
                })
                .map(|(m, s, k)| self.lambda(m, tier, s, k))
                .sum();
            if total <= 0.0 {
                return Err(Error::invalid(
                    MODULE,
                    format!("tier {tier} has zero total arrival intensity"),
                ));
            }
        }
        Ok(())
    }
}

/// Risk parameters: running penalty φ, terminal penalty η, covariance Σ
/// (bp²/day) and horizon T (days).
#[derive(Debug, Clone)]
pub struct RiskSpec {
    pub phi: f64,
    pub eta: f64,
    pub sigma_cov: crate::linalg::SymmetricMatrix,
    pub horizon: f64,
}

impl RiskSpec {
    fn validate(&self, n_bonds: usize) -> Result<()> {
        if self.phi < 0.0 || !self.phi.is_finite() {
            return Err(Error::invalid(MODULE, "phi must be finite and >= 0"));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::invalid(MODULE, "eta must be finite and >= 0"));
        }
        if self.horizon <= 0.0 || !self.horizon.is_finite() {
            return Err(Error::invalid(MODULE, "horizon must be positive"));
        }
        if self.sigma_cov.dim() != n_bonds {
            return Err(Error::invalid(
                MODULE,
                "covariance dimension does not match bond count",
            ));
        }
        let min = self.sigma_cov.min_eigenvalue()?;
        if min < -1e-10 * self.sigma_cov.max_abs().max(1.0) {
            return Err(Error::invalid(
                MODULE,
                format!("covariance not PSD (eigenvalue {min:.3e})"),
            ));
        }
        Ok(())
    }
}

/// Hit-ratio target for one tier: level r★ in (0,1) and penalty weight κ ≥ 0.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TierTarget {
    pub r_star: f64,
    pub kappa: f64,
}

/// Targeted tier set 𝒜 with per-tier targets; `None` marks untargeted tiers.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    entries: Vec<Option<TierTarget>>,
}

impl TargetSpec {
    pub fn none(n_tiers: usize) -> Self {
        Self {
            entries: vec![None; n_tiers],
        }
    }

    pub fn with_target(mut self, tier: usize, target: TierTarget) -> Self {
        self.entries[tier] = Some(target);
        self
    }

    pub fn get(&self, tier: usize) -> Option<&TierTarget> {
        self.entries[tier].as_ref()
    }

    /// Indices of targeted tiers, in tier order.
    pub fn targeted(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|_| i))
            .collect()
    }

    fn validate(&self, n_tiers: usize) -> Result<()> {
        if self.entries.len() != n_tiers {
            return Err(Error::invalid(
                MODULE,
                "target entries do not match tier count",
            ));
        }
        for t in self.entries.iter().flatten() {
            if !(t.r_star > 0.0 && t.r_star < 1.0) {
                return Err(Error::invalid(
                    MODULE,
                    format!("target hit ratio {} outside (0,1)", t.r_star),
                ));
            }
            if t.kappa < 0.0 || !t.kappa.is_finite() {
                return Err(Error::invalid(MODULE, "kappa must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// One quoting opportunity: a (bond, tier, side, rung) cell with positive
/// arrival intensity.
#[derive(Debug, Clone, Copy)]
pub struct Rung {
    pub bond: usize,
    pub tier: usize,
    pub side: Side,
    pub k: usize,
    /// Notional size z_k in millions.
    pub size: f64,
    pub lambda: f64,
    pub curve: FillCurve,
}

/// The full problem instance. Validated on construction; immutable afterwards.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    bonds: Vec<String>,
    tiers: Vec<String>,
    ladder: SizeLadder,
    arrivals: ArrivalBook,
    risk: RiskSpec,
    targets: TargetSpec,
    /// Flat list of all rungs with λ > 0, in (bond, tier, side, k) order.
    rungs: Vec<Rung>,
}

impl MarketSpec {
    pub fn new(
        bonds: Vec<String>,
        tiers: Vec<String>,
        ladder: SizeLadder,
        arrivals: ArrivalBook,
        risk: RiskSpec,
        targets: TargetSpec,
    ) -> Result<Self> {
        if bonds.is_empty() {
            return Err(Error::invalid(MODULE, "at least one bond required"));
        }
        if tiers.is_empty() {
            return Err(Error::invalid(MODULE, "at least one tier required"));
        }
        if arrivals.n_bonds != bonds.len()
            || arrivals.n_tiers != tiers.len()
            || arrivals.n_sizes != ladder.len()
        {
            return Err(Error::invalid(
                MODULE,
                "arrival book dimensions do not match bonds/tiers/ladder",
            ));
        }
        arrivals.validate()?;
        risk.validate(bonds.len())?;
        targets.validate(tiers.len())?;

        let mut rungs = Vec::new();
        for m in 0..bonds.len() {
            for tau in 0..tiers.len() {
                for side in Side::BOTH {
                    for k in 0..ladder.len() {
                        let l = arrivals.lambda(m, tau, side, k);
                        if l > 0.0 {
                            rungs.push(Rung {
                                bond: m,
                                tier: tau,
                                side,
                                k,
                                size: ladder.sizes()[k],
                                lambda: l,
                                curve: *arrivals.curve(m, tau, side, k),
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            bonds,
            tiers,
            ladder,
            arrivals,
            risk,
            targets,
            rungs,
        })
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn n_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn bonds(&self) -> &[String] {
        &self.bonds
    }

    pub fn tiers(&self) -> &[String] {
        &self.tiers
    }

    pub fn ladder(&self) -> &SizeLadder {
        &self.ladder
    }

    pub fn arrivals(&self) -> &ArrivalBook {
        &self.arrivals
    }

    pub fn risk(&self) -> &RiskSpec {
        &self.risk
    }

    pub fn targets(&self) -> &TargetSpec {
        &self.targets
    }

    /// All quoting opportunities with λ > 0.
    pub fn rungs(&self) -> &[Rung] {
        &self.rungs
    }

    pub fn tier_index(&self, label: &str) -> Result<usize> {
        self.tiers
            .iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::invalid(MODULE, format!("unknown tier '{label}'")))
    }

    pub fn bond_index(&self, label: &str) -> Result<usize> {
        self.bonds
            .iter()
            .position(|b| b == label)
            .ok_or_else(|| Error::invalid(MODULE, format!("unknown bond '{label}'")))
    }

    /// Notional-arrival scale W_τ = Σ_{m,s,k} z_k λ (notional/day).
    pub fn notional_scale(&self, tier: usize) -> Result<f64> {
        if tier >= self.n_tiers() {
            return Err(Error::invalid(
                MODULE,
                format!("tier index {tier} out of range"),
            ));
        }
        Ok(self
            .rungs
            .iter()
            .filter(|r| r.tier == tier)
            .map(|r| r.size * r.lambda)
            .sum())
    }

    /// True if every rung of `tier` has identical bid/ask intensity and curve.
    pub fn tier_side_symmetric(&self, tier: usize) -> bool {
        for m in 0..self.n_bonds() {
            for k in 0..self.ladder.len() {
                let lb = self.arrivals.lambda(m, tier, Side::Bid, k);
                let la = self.arrivals.lambda(m, tier, Side::Ask, k);
                if lb != la {
                    return false;
                }
                if lb > 0.0
                    && self.arrivals.curve(m, tier, Side::Bid, k)
                        != self.arrivals.curve(m, tier, Side::Ask, k)
                {
                    return false;
                }
            }
        }
        true
    }

    /// True if every tier is side-symmetric.
    pub fn side_symmetric(&self) -> bool {
        (0..self.n_tiers()).all(|t| self.tier_side_symmetric(t))
    }

    /// Size-weighted instantaneous hit ratio
    /// `r_τ = (1/W_τ) Σ_{m,s,k} z_k Λ(δ)` for a quote vector.
    ///
    /// `offsets` is aligned with `rungs()`; every rung of the tier must carry
    /// a quote (missing quote on an active rung is an incomplete policy).
    pub fn instantaneous_hit_ratio(&self, offsets: &[Option<f64>], tier: usize) -> Result<f64> {
        if offsets.len() != self.rungs.len() {
            return Err(Error::invalid(
                MODULE,
                "offset vector not aligned with rung list",
            ));
        }
        let w = self.notional_scale(tier)?;
        let mut acc = 0.0;
        for (rung, quote) in self.rungs.iter().zip(offsets) {
            if rung.tier != tier {
                continue;
            }
            match quote {
                Some(delta) => acc += rung.size * fill_intensity(rung.lambda, &rung.curve, *delta)?,
                None => {
                    return Err(Error::invalid(
                        MODULE,
                        format!(
                            "incomplete policy: missing quote for bond {} tier {} {} size {}",
                            rung.bond,
                            rung.tier,
                            rung.side.label(),
                            rung.size
                        ),
                    ))
                }
            }
        }
        Ok(acc / w)
    }
}
