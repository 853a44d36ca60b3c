//! Per-rung Hamiltonians `H(p) = sup_δ Λ(δ)(δ − p)`, their derivatives, the
//! exact control map, and pre-computed interpolation tables.
//!
//! For the logistic fill curve the first-order condition of the inner
//! maximization is `(δ − p) β (1 − f(δ)) = 1`, solved by safeguarded Newton
//! in log form. The envelope theorem then gives every derivative analytically:
//!
//! ```text
//! H′(p)  = −Λ(δ̃)                      (envelope)
//! H″(p)  = −Λ′(δ̃) / c(δ̃) = λ β f (1−f)²
//! H‴(p)  = −λ β² f (1−f)³ (1−3f)
//! c(δ)   = 2 − f f″ / (f′)² = 1/(1−f)   (control-map slope is 1/c)
//! ```
//!
//! Tables store H, H′, H″, H‴ and the maximizer δ̃ on a uniform p-grid and
//! answer queries by cubic Hermite interpolation (the stored next-higher
//! derivative supplies exact slopes), so interpolated H is C¹ and H″ is
//! available continuously for Newton steps on the dual variable.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market_model::{FillCurve, MarketSpec};

const MODULE: &str = "hamiltonian";

/// Newton tolerance for the inner maximizer, in bp.
const MAXIMIZER_TOL: f64 = 1e-12;
const MAXIMIZER_MAX_ITER: usize = 200;

/// Default table range (bp) and node count.
pub const DEFAULT_P_MIN: f64 = -30.0;
pub const DEFAULT_P_MAX: f64 = 30.0;
pub const DEFAULT_NODES: usize = 2049;

/// Riskless spread δ₀ = argmax_δ Λ(δ)δ: the revenue-maximizing offset with no
/// inventory or target pressure. Requires λ > 0 (a no-flow rung is excluded
/// from quoting).
pub fn riskless_spread(lambda: f64, curve: &FillCurve) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::invalid(
            MODULE,
            "riskless spread undefined for zero arrival intensity",
        ));
    }
    maximizer(curve, 0.0)
}

/// Solve the shifted first-order condition `(δ − p) β (1 − f(δ)) = 1` for the
/// unique interior maximizer δ̃(p).
///
/// Works in log form `h(δ) = ln(β(δ−p)) + ln(1−f(δ))`, which is strictly
/// increasing with analytic slope `1/(δ−p) + βf`, and keeps a hard bracket:
/// `h < 0` at `p + 1/β` and `h ≥ 0` at `max(p + 2/β, −α/β)`.
fn maximizer(curve: &FillCurve, p: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::invalid(
            MODULE,
            format!("non-finite marginal cost {p}"),
        ));
    }
    let beta = curve.beta;
    let mut lo = p + 1.0 / beta;
    let mut hi = (p + 2.0 / beta).max(-curve.alpha / beta);
    let h = |d: f64| (beta * (d - p)).ln() + curve.complement(d).ln();
    let h_slope = |d: f64| 1.0 / (d - p) + beta * curve.prob_unchecked(d);

    let mut x = 0.5 * (lo + hi);
    for _ in 0..MAXIMIZER_MAX_ITER {
        let hx = h(x);
        if hx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = hx / h_slope(x);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= MAXIMIZER_TOL {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::numerical(
        MODULE,
        format!("maximizer did not converge for p={p} (bracket [{lo}, {hi}])"),
    ))
}

/// Evaluate the Hamiltonian and its maximizer directly (no table).
/// Returns `(H(p), δ̃(p))`.
pub fn hamiltonian_eval(lambda: f64, curve: &FillCurve, p: f64) -> Result<(f64, f64)> {
    if lambda <= 0.0 {
        return Err(Error::invalid(
            MODULE,
            "Hamiltonian undefined for zero arrival intensity",
        ));
    }
    let d = maximizer(curve, p)?;
    Ok((lambda * curve.prob_unchecked(d) * (d - p), d))
}

/// Analytic derivatives of H at the maximizer δ̃(p); logistic envelope chain.
fn envelope_derivs(lambda: f64, curve: &FillCurve, delta_star: f64) -> (f64, f64, f64) {
    let f = curve.prob_unchecked(delta_star);
    let c = curve.complement(delta_star); // 1 - f
    let beta = curve.beta;
    let h1 = -lambda * f;
    let h2 = lambda * beta * f * c * c;
    let h3 = -lambda * beta * beta * f * c * c * c * (1.0 - 3.0 * f);
    (h1, h2, h3)
}

/// Linearization constants of one rung at p = 0: the riskless spread δ₀, the
/// curvature constant c, and H′(0), H″(0).
#[derive(Debug, Clone, Copy)]
pub struct LinearizationConstants {
    pub delta0: f64,
    /// c = 2 − f f″/(f′)² at δ₀; the linearized control map slope is 1/c.
    pub c: f64,
    pub h1_0: f64,
    pub h2_0: f64,
}

/// Compute the linearization constants for one rung. The generic curvature
/// formula is cross-checked against the envelope identity
/// `H″(0) = −Λ′(δ₀)/c` to 1e-8 relative.
pub fn linearization_constants(lambda: f64, curve: &FillCurve) -> Result<LinearizationConstants> {
    let delta0 = riskless_spread(lambda, curve)?;
    let f = curve.prob_unchecked(delta0);
    let f1 = curve.deriv1(delta0);
    let f2 = curve.deriv2(delta0);
    if f1 == 0.0 {
        return Err(Error::numerical(
            MODULE,
            "degenerate fill curve: f'(delta0) = 0",
        ));
    }
    let c = 2.0 - f * f2 / (f1 * f1);
    let h1_0 = -lambda * f;
    let h2_0 = lambda * f / (delta0 * c);
    let h2_alt = -lambda * f1 / c;
    if (h2_0 - h2_alt).abs() > 1e-8 * h2_0.abs() {
        return Err(Error::numerical(
            MODULE,
            format!("curvature identity violated: {h2_0} vs {h2_alt}"),
        ));
    }
    Ok(LinearizationConstants {
        delta0,
        c,
        h1_0,
        h2_0,
    })
}

/// Tabulated Hamiltonian for one rung on a uniform p-grid, with analytic
/// derivative nodes and cubic Hermite queries.
#[derive(Debug, Clone)]
pub struct HamiltonianTable {
    pub lambda: f64,
    pub curve: FillCurve,
    p_min: f64,
    p_max: f64,
    step: f64,
    h: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    h3: Vec<f64>,
    delta_star: Vec<f64>,
}

impl HamiltonianTable {
    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn n_nodes(&self) -> usize {
        self.h.len()
    }

    pub fn node_p(&self, i: usize) -> f64 {
        self.p_min + self.step * i as f64
    }

    pub fn node_values(&self, i: usize) -> (f64, f64, f64, f64, f64) {
        (
            self.h[i],
            self.h1[i],
            self.h2[i],
            self.h3[i],
            self.delta_star[i],
        )
    }

    #[inline]
    fn locate(&self, p: f64) -> Result<(usize, f64)> {
        if !(p >= self.p_min && p <= self.p_max) {
            return Err(Error::numerical(
                MODULE,
                format!("p={p} outside table range [{}, {}]", self.p_min, self.p_max),
            ));
        }
        let t = (p - self.p_min) / self.step;
        let mut i = t.floor() as usize;
        if i >= self.h.len() - 1 {
            i = self.h.len() - 2;
        }
        Ok((i, (p - self.node_p(i)) / self.step))
    }

    /// Cubic Hermite on values `v` with slopes `dv` (slopes in p units).
    #[inline]
    fn hermite(&self, v: &[f64], dv: &[f64], i: usize, t: f64) -> f64 {
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        h00 * v[i] + h01 * v[i + 1] + self.step * (h10 * dv[i] + h11 * dv[i + 1])
    }

    pub fn eval_h(&self, p: f64) -> Result<f64> {
        let (i, t) = self.locate(p)?;
        Ok(self.hermite(&self.h, &self.h1, i, t))
    }

    pub fn eval_h1(&self, p: f64) -> Result<f64> {
        let (i, t) = self.locate(p)?;
        Ok(self.hermite(&self.h1, &self.h2, i, t))
    }

    pub fn eval_h2(&self, p: f64) -> Result<f64> {
        let (i, t) = self.locate(p)?;
        Ok(self.hermite(&self.h2, &self.h3, i, t))
    }

    /// H‴ by linear interpolation between analytic nodes (accuracy demands on
    /// the third derivative are mild; it feeds a second-order correction).
    pub fn eval_h3(&self, p: f64) -> Result<f64> {
        let (i, t) = self.locate(p)?;
        Ok((1.0 - t) * self.h3[i] + t * self.h3[i + 1])
    }

    /// Exact control map `δ̃(p) = f⁻¹(−H′(p)/λ)`.
    pub fn control_map(&self, p: f64) -> Result<f64> {
        let u = -self.eval_h1(p)? / self.lambda;
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::numerical(
                MODULE,
                format!("control map fill probability {u} outside (0,1): corrupt table"),
            ));
        }
        self.curve.inverse(u)
    }

    /// Content hash of (λ, curve, grid), the cache key for binary table reuse.
    pub fn cache_key(
        lambda: f64,
        curve: &FillCurve,
        p_min: f64,
        p_max: f64,
        n_nodes: usize,
    ) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(lambda.to_le_bytes());
        h.update(curve.alpha.to_le_bytes());
        h.update(curve.beta.to_le_bytes());
        h.update([match curve.form {
            crate::market_model::CurveForm::Logistic => 0u8,
        }]);
        h.update(p_min.to_le_bytes());
        h.update(p_max.to_le_bytes());
        h.update((n_nodes as u64).to_le_bytes());
        h.finalize().into()
    }

    /// Serialize to a small binary blob (exact f64 bits, little endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.h.len();
        let mut out = Vec::with_capacity(64 + n * 40);
        out.extend_from_slice(b"HTAB0001");
        out.extend_from_slice(&Self::cache_key(
            self.lambda,
            &self.curve,
            self.p_min,
            self.p_max,
            n,
        ));
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.curve.alpha.to_le_bytes());
        out.extend_from_slice(&self.curve.beta.to_le_bytes());
        out.extend_from_slice(&self.p_min.to_le_bytes());
        out.extend_from_slice(&self.p_max.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for arr in [&self.h, &self.h1, &self.h2, &self.h3, &self.delta_star] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Deserialize a blob written by [`Self::to_bytes`], verifying the content key.
    pub fn from_bytes(bytes: &[u8], expected_key: &[u8; 32]) -> Result<Self> {
        let err = || Error::invalid(MODULE, "malformed table blob");
        if bytes.len() < 8 + 32 + 48 || &bytes[..8] != b"HTAB0001" {
            return Err(err());
        }
        if &bytes[8..40] != expected_key {
            return Err(Error::invalid(MODULE, "table cache key mismatch"));
        }
        let f = |off: usize| -> f64 { f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) };
        let lambda = f(40);
        let alpha = f(48);
        let beta = f(56);
        let p_min = f(64);
        let p_max = f(72);
        let n = u64::from_le_bytes(bytes[80..88].try_into().unwrap()) as usize;
        if bytes.len() != 88 + 5 * n * 8 {
            return Err(err());
        }
        let mut arrays = Vec::with_capacity(5);
        for a in 0..5 {
            let base = 88 + a * n * 8;
            arrays.push((0..n).map(|i| f(base + i * 8)).collect::<Vec<f64>>());
        }
        let delta_star = arrays.pop().unwrap();
        let h3 = arrays.pop().unwrap();
        let h2 = arrays.pop().unwrap();
        let h1 = arrays.pop().unwrap();
        let h = arrays.pop().unwrap();
        Ok(Self {
            lambda,
            curve: FillCurve::logistic(alpha, beta),
            p_min,
            p_max,
            step: (p_max - p_min) / (n - 1) as f64,
            h,
            h1,
            h2,
            h3,
            delta_star,
        })
    }
}

/// Build the table for one rung. Derivative nodes come from the envelope
/// relations; every node is validated against the sign/convexity invariants
/// (H > 0, H′ < 0, H″ > 0, |H′ + Λ(δ̃)| ≤ 1e-8 Λ(δ₀)).
pub fn build_table(
    lambda: f64,
    curve: &FillCurve,
    p_min: f64,
    p_max: f64,
    n_nodes: usize,
) -> Result<HamiltonianTable> {
    if !(p_min < 0.0 && p_max > 0.0) {
        return Err(Error::invalid(MODULE, "table range must contain 0"));
    }
    if n_nodes < 64 {
        return Err(Error::invalid(MODULE, "table needs at least 64 nodes"));
    }
    if lambda <= 0.0 {
        return Err(Error::invalid(
            MODULE,
            "cannot tabulate a zero-intensity rung",
        ));
    }
    curve.validate()?;
    let step = (p_max - p_min) / (n_nodes - 1) as f64;
    let mut h = Vec::with_capacity(n_nodes);
    let mut h1 = Vec::with_capacity(n_nodes);
    let mut h2 = Vec::with_capacity(n_nodes);
    let mut h3 = Vec::with_capacity(n_nodes);
    let mut delta_star = Vec::with_capacity(n_nodes);
    let lambda0 = lambda * curve.prob_unchecked(riskless_spread(lambda, curve)?);
    for i in 0..n_nodes {
        let p = p_min + step * i as f64;
        let d = maximizer(curve, p)?;
        let value = lambda * curve.prob_unchecked(d) * (d - p);
        let (d1, d2, d3) = envelope_derivs(lambda, curve, d);
        if !(value > 0.0) || !(d1 < 0.0) || !(d2 > 0.0) {
            return Err(Error::numerical(
                MODULE,
                format!("table invariant violated at p={p}: H={value}, H'={d1}, H''={d2}"),
            ));
        }
        if (d1 + lambda * curve.prob_unchecked(d)).abs() > 1e-8 * lambda0 {
            return Err(Error::numerical(
                MODULE,
                format!("envelope identity violated at p={p}"),
            ));
        }
        h.push(value);
        h1.push(d1);
        h2.push(d2);
        h3.push(d3);
        delta_star.push(d);
    }
    Ok(HamiltonianTable {
        lambda,
        curve: *curve,
        p_min,
        p_max,
        step,
        h,
        h1,
        h2,
        h3,
        delta_star,
    })
}

/// Tables for every active rung of a spec, aligned with `spec.rungs()`.
#[derive(Debug, Clone)]
pub struct TableSet {
    tables: Vec<HamiltonianTable>,
    p_min: f64,
    p_max: f64,
}

impl TableSet {
    pub fn build(spec: &MarketSpec, p_min: f64, p_max: f64, n_nodes: usize) -> Result<Self> {
        let tables: Result<Vec<_>> = spec
            .rungs()
            .iter()
            .map(|r| build_table(r.lambda, &r.curve, p_min, p_max, n_nodes))
            .collect();
        Ok(Self {
            tables: tables?,
            p_min,
            p_max,
        })
    }

    pub fn build_default(spec: &MarketSpec) -> Result<Self> {
        Self::build(spec, DEFAULT_P_MIN, DEFAULT_P_MAX, DEFAULT_NODES)
    }

    pub fn get(&self, rung_index: usize) -> &HamiltonianTable {
        &self.tables[rung_index]
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// Rebuild with a range widened by `factor` (same node spacing density).
    pub fn rebuild_wider(&self, spec: &MarketSpec, factor: f64) -> Result<Self> {
        let n = self.tables.first().map_or(DEFAULT_NODES, |t| t.n_nodes());
        let n_wide = (((n - 1) as f64 * factor).round() as usize) + 1;
        Self::build(spec, self.p_min * factor, self.p_max * factor, n_wide)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: exhaustive grid search for sup_δ Λ(δ)(δ−p).
    fn grid_search_h(lambda: f64, curve: &FillCurve, p: f64, step: f64) -> (f64, f64) {
        let lo = p;
        let hi = (p + 2.0 / curve.beta).max(-curve.alpha / curve.beta) + 2.0 / curve.beta;
        let n = ((hi - lo) / step).ceil() as usize;
        let mut best = (f64::MIN, lo);
        for i in 0..=n {
            let d = lo + step * i as f64;
            let v = lambda * curve.prob_unchecked(d) * (d - p);
            if v > best.0 {
                best = (v, d);
            }
        }
        best
    }

    #[test]
    fn riskless_spread_baseline_rung() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let d0 = riskless_spread(500.0, &curve).unwrap();
        assert!(d0 > 0.5 && d0 < 1.0, "delta0 = {d0}");
        // against a brute-force maximization of Λδ on a 1e-5 grid
        let (_, d_grid) = grid_search_h(500.0, &curve, 0.0, 1e-5);
        assert!((d0 - d_grid).abs() < 1e-4, "{d0} vs {d_grid}");
        // f.o.c. residual
        let f = curve.prob_unchecked(d0);
        let f1 = curve.deriv1(d0);
        assert!((f + d0 * f1).abs() < 1e-10);
        // delta0 > 1/beta always
        assert!(d0 > 0.5);
        assert!(riskless_spread(0.0, &curve).is_err());
    }

    #[test]
    fn riskless_spread_scales_inversely_with_beta() {
        // with alpha fixed, x0 = alpha + beta*delta0 is beta-free, so
        // doubling beta exactly halves delta0
        for alpha in [0.5, 1.0, 2.0] {
            let d1 = riskless_spread(100.0, &FillCurve::logistic(alpha, 1.0)).unwrap();
            let d2 = riskless_spread(100.0, &FillCurve::logistic(alpha, 2.0)).unwrap();
            assert!(
                (d1 - 2.0 * d2).abs() < 1e-9,
                "alpha={alpha}: {d1} vs {}",
                2.0 * d2
            );
            let f1 = FillCurve::logistic(alpha, 1.0).prob_unchecked(d1);
            let f2 = FillCurve::logistic(alpha, 2.0).prob_unchecked(d2);
            assert!((f1 - f2).abs() < 1e-10);
        }
    }

    #[test]
    fn hamiltonian_eval_matches_grid_oracle() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let (h, _) = hamiltonian_eval(500.0, &curve, 2.0).unwrap();
        let (h_grid, _) = grid_search_h(500.0, &curve, 2.0, 1e-4);
        assert!((h - h_grid).abs() <= 1e-6 * h.abs(), "{h} vs {h_grid}");
        // H(0) = Λ(δ0)·δ0
        let d0 = riskless_spread(500.0, &curve).unwrap();
        let (h0, dstar) = hamiltonian_eval(500.0, &curve, 0.0).unwrap();
        assert!((h0 - 500.0 * curve.prob_unchecked(d0) * d0).abs() < 1e-9 * h0);
        assert!((dstar - d0).abs() < 1e-10);
    }

    #[test]
    fn hamiltonian_decreasing_in_p() {
        let curve = FillCurve::logistic(1.5, 1.5);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let p = -5.0 + 0.3 * i as f64;
            let (h, _) = hamiltonian_eval(200.0, &curve, p).unwrap();
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn table_nodes_match_direct_eval() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -10.0, 10.0, 129).unwrap();
        for i in [0usize, 17, 64, 128] {
            let p = table.node_p(i);
            let (h, d) = hamiltonian_eval(500.0, &curve, p).unwrap();
            let (th, _, _, _, td) = table.node_values(i);
            assert_eq!(th, h);
            assert_eq!(td, d);
        }
    }

    #[test]
    fn interpolation_accuracy_vs_direct() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table =
            build_table(500.0, &curve, DEFAULT_P_MIN, DEFAULT_P_MAX, DEFAULT_NODES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let p = rng.gen_range(-29.9..29.9);
            let (h, _) = hamiltonian_eval(500.0, &curve, p).unwrap();
            let ht = table.eval_h(p).unwrap();
            assert!((ht - h).abs() <= 1e-6 * h.abs(), "p={p}: {ht} vs {h}");
        }
        assert!(table.eval_h(31.0).is_err());
        assert!(table.eval_h(-31.0).is_err());
    }

    #[test]
    fn tabulated_h1_matches_finite_differences() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -10.0, 10.0, 513).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        for _ in 0..100 {
            let p = rng.gen_range(-9.0..9.0);
            let fd = (hamiltonian_eval(500.0, &curve, p + h).unwrap().0
                - hamiltonian_eval(500.0, &curve, p - h).unwrap().0)
                / (2.0 * h);
            let h1 = table.eval_h1(p).unwrap();
            assert!((h1 - fd).abs() <= 1e-6 * h1.abs(), "p={p}: {h1} vs {fd}");
        }
    }

    #[test]
    fn convexity_h2_nonnegative_and_second_differences() {
        let curve = FillCurve::logistic(1.0, 1.0);
        let table = build_table(50.0, &curve, -10.0, 10.0, 257).unwrap();
        for i in 0..table.n_nodes() {
            let (_, _, h2, _, _) = table.node_values(i);
            assert!(h2 >= 0.0);
        }
        for i in 1..table.n_nodes() - 1 {
            let (hm, ..) = table.node_values(i - 1);
            let (h0, ..) = table.node_values(i);
            let (hp, ..) = table.node_values(i + 1);
            assert!(hp - 2.0 * h0 + hm >= -1e-10 * h0.abs().max(1.0));
        }
    }

    #[test]
    fn h3_matches_finite_difference_of_h2() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -10.0, 10.0, 1025).unwrap();
        let half = 0.5 * (table.p_max() - table.p_min()) / (table.n_nodes() - 1) as f64;
        for i in (8..table.n_nodes() - 8).step_by(37) {
            let p = table.node_p(i);
            let fd = (table.eval_h2(p + half).unwrap() - table.eval_h2(p - half).unwrap())
                / (2.0 * half);
            let h3 = table.eval_h3(p).unwrap();
            assert!(
                (h3 - fd).abs() <= 1e-4 * h3.abs().max(1e-12),
                "p={p}: H3={h3} fd={fd}"
            );
        }
    }

    #[test]
    fn control_map_matches_recorded_maximizer_and_is_increasing() {
        let curve = FillCurve::logistic(1.5, 1.5);
        let table = build_table(200.0, &curve, -10.0, 10.0, 1025).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = rng.gen_range(-9.5..9.5);
            let d_table = table.control_map(p).unwrap();
            let (_, d_direct) = hamiltonian_eval(200.0, &curve, p).unwrap();
            assert!(
                (d_table - d_direct).abs() < 1e-6,
                "p={p}: {d_table} vs {d_direct}"
            );
        }
        for _ in 0..1000 {
            let p1 = rng.gen_range(-9.5..9.4);
            let p2 = rng.gen_range(p1..9.5);
            if p2 > p1 {
                assert!(table.control_map(p1).unwrap() < table.control_map(p2).unwrap());
            }
        }
        // p = 0 reproduces the riskless spread
        let d0 = riskless_spread(200.0, &curve).unwrap();
        assert!((table.control_map(0.0).unwrap() - d0).abs() < 1e-8);
    }

    #[test]
    fn control_map_slope_tends_to_inv_c_at_zero() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -10.0, 10.0, 2049).unwrap();
        let consts = linearization_constants(500.0, &curve).unwrap();
        let h = 1e-4;
        let slope = (table.control_map(h).unwrap() - table.control_map(-h).unwrap()) / (2.0 * h);
        assert!(
            (slope - 1.0 / consts.c).abs() <= 1e-3 * (1.0 / consts.c),
            "slope {slope} vs 1/c {}",
            1.0 / consts.c
        );
    }

    #[test]
    fn linearization_constants_identities() {
        // hypothetical parameters with f(delta0) = 1/2: alpha = -2 gives
        // delta0 = 2/beta and f = 1/2, hence c = 2
        let c_half = linearization_constants(100.0, &FillCurve::logistic(-2.0, 1.0)).unwrap();
        assert!((c_half.c - 2.0).abs() < 1e-9);
        let curve = FillCurve::logistic(2.0, 2.0);
        let consts = linearization_constants(500.0, &curve).unwrap();
        // logistic simplification c = 1/(1 - f(delta0))
        let f0 = curve.prob_unchecked(consts.delta0);
        assert!((consts.c - 1.0 / (1.0 - f0)).abs() < 1e-10);
        // H''(0) from constants equals the tabulated node value
        let table = build_table(500.0, &curve, -10.0, 10.0, 257).unwrap();
        let h2_table = table.eval_h2(0.0).unwrap();
        assert!((consts.h2_0 - h2_table).abs() <= 1e-6 * h2_table);
        assert!((consts.h1_0 + 500.0 * f0).abs() < 1e-12 * 500.0);
    }

    #[test]
    fn envelope_identity_on_nodes() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -20.0, 20.0, 513).unwrap();
        let d0 = riskless_spread(500.0, &curve).unwrap();
        let lam0 = 500.0 * curve.prob_unchecked(d0);
        for i in 0..table.n_nodes() {
            let (_, h1, _, _, d) = table.node_values(i);
            assert!((h1 + 500.0 * curve.prob_unchecked(d)).abs() <= 1e-8 * lam0);
        }
    }

    #[test]
    fn random_rungs_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..25 {
            let lambda = rng.gen_range(10.0..1000.0);
            let curve = FillCurve::logistic(rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0));
            let p = rng.gen_range(-5.0..5.0);
            let (h, _) = hamiltonian_eval(lambda, &curve, p).unwrap();
            let (h_grid, _) = grid_search_h(lambda, &curve, p, 1e-4);
            assert!((h - h_grid).abs() <= 1e-6 * h.abs(), "{h} vs {h_grid}");
        }
    }

    #[test]
    fn table_blob_round_trip_is_bit_exact() {
        let curve = FillCurve::logistic(2.0, 2.0);
        let table = build_table(500.0, &curve, -10.0, 10.0, 129).unwrap();
        let key = HamiltonianTable::cache_key(500.0, &curve, -10.0, 10.0, 129);
        let blob = table.to_bytes();
        let back = HamiltonianTable::from_bytes(&blob, &key).unwrap();
        for i in 0..table.n_nodes() {
            assert_eq!(table.node_values(i), back.node_values(i));
        }
        let other_key = HamiltonianTable::cache_key(501.0, &curve, -10.0, 10.0, 129);
        assert!(HamiltonianTable::from_bytes(&blob, &other_key).is_err());
    }
}
