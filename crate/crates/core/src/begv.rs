//! Quadratic value-function hierarchy.
//!
//! Expanding each Hamiltonian to second order in p around 0 and adopting the
//! ansatz `u(t,q) ≈ −½ qᵀA(t)q − B(t)ᵀq` turns the reduced HJB into a matrix
//! Riccati equation
//!
//! ```text
//! A′(t) = A(t) 𝒟 A(t) − φΣ,   A(T) = ηΣ,
//! A(t)  = 𝒟^{-1/2} 𝒢 tanh(𝒢(T−t) + arctanh((η/φ)𝒢)) 𝒟^{-1/2},
//! 𝒢     = (𝒟^{1/2} φΣ 𝒟^{1/2})^{1/2},
//! ```
//!
//! while the quote map itself stays exact. With side-symmetric intensities
//! `𝒟 = D = diag(Σ_{τ,s,k} z_k H″(0))` and `B ≡ 0`; asymmetric intensities
//! produce the h-coefficient corrections, a rank-one-per-tier modification of
//! D, and a non-homogeneous linear ODE for B(t) solved by a cosh-kernel
//! integral.
//!
//! Three closures are provided for the dual variable of each targeted tier:
//! the inventory-independent constant `ξ = κ̃ y`, its local quadratic
//! refinement `ξ(q) ≈ ξ₀ + ½ qᵀB_τ q`, and the exact scalar fixed point that
//! keeps the tabulated nonlinear H′.

use crate::error::{Error, Result};
use crate::hamiltonian::TableSet;
use crate::hjb_exact::{dual_inner_solve, DualEntry};
use crate::linalg::SymmetricMatrix;
use crate::market_model::{MarketSpec, RiskSpec, Side};

const MODULE: &str = "begv";

/// Spectral matrix function `f(S) = Q diag(f(λ)) Qᵀ` for symmetric `S`.
///
/// `f` may reject eigenvalues outside its domain; the error names the value.
pub fn sym_matrix_function(
    s: &SymmetricMatrix,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<SymmetricMatrix> {
    s.map_spectrum(f)
}

/// Per-tier constants entering every dual closure.
#[derive(Debug, Clone)]
pub struct TierClosure {
    pub tier: usize,
    pub w: f64,
    pub kappa: f64,
    pub r_star: f64,
    /// Effective penalty `1/κ̃ = 1/κ + (1/W) Σ z_k H″(0)`; zero when κ = 0.
    pub kappa_tilde: f64,
    /// Σ_{m,s,k} z_k H′(0).
    pub sz_h1: f64,
    /// Σ_{m,s,k} z_k H″(0).
    pub sz_h2: f64,
    /// Per bond m: Σ_{s,k} z_k² H″(0), the weight of A_mm(t) in y_τ.
    pub sz2_h2_bond: Vec<f64>,
}

impl TierClosure {
    /// `y_τ = r★ + (1/W) Σ z H′(0) + (1/2W) Σ z² A_mm H″(0)`.
    pub fn y(&self, a: &SymmetricMatrix) -> f64 {
        let mut acc = self.r_star + self.sz_h1 / self.w;
        for (m, s2) in self.sz2_h2_bond.iter().enumerate() {
            acc += 0.5 * s2 * a.get(m, m) / self.w;
        }
        acc
    }
}

/// Closure constants for every targeted tier (κ = 0 included with κ̃ = 0).
pub fn tier_closures(spec: &MarketSpec, tables: &TableSet) -> Result<Vec<TierClosure>> {
    let mut out = Vec::new();
    for tau in spec.targets().targeted() {
        let target = spec.targets().get(tau).unwrap();
        let w = spec.notional_scale(tau)?;
        let mut sz_h1 = 0.0;
        let mut sz_h2 = 0.0;
        let mut sz2 = vec![0.0; spec.n_bonds()];
        for (ri, r) in spec.rungs().iter().enumerate() {
            if r.tier != tau {
                continue;
            }
            let h1 = tables.get(ri).eval_h1(0.0)?;
            let h2 = tables.get(ri).eval_h2(0.0)?;
            sz_h1 += r.size * h1;
            sz_h2 += r.size * h2;
            sz2[r.bond] += r.size * r.size * h2;
        }
        let kappa_tilde = if target.kappa == 0.0 {
            0.0
        } else {
            1.0 / (1.0 / target.kappa + sz_h2 / w)
        };
        out.push(TierClosure {
            tier: tau,
            w,
            kappa: target.kappa,
            r_star: target.r_star,
            kappa_tilde,
            sz_h1,
            sz_h2,
            sz2_h2_bond: sz2,
        });
    }
    Ok(out)
}

/// Diagonal curvature coefficients `d_m = Σ_{τ,s,k} z_k H″(0)`; every tier
/// contributes regardless of targeting.
pub fn curvature_matrix_d(spec: &MarketSpec, tables: &TableSet) -> Result<Vec<f64>> {
    let mut d = vec![0.0; spec.n_bonds()];
    for (ri, r) in spec.rungs().iter().enumerate() {
        let h2 = tables.get(ri).eval_h2(0.0)?;
        if h2 <= 0.0 {
            return Err(Error::numerical(
                MODULE,
                format!("H''(0) = {h2} <= 0: corrupt table"),
            ));
        }
        d[r.bond] += r.size * h2;
    }
    if d.iter().any(|&x| x <= 0.0) {
        return Err(Error::numerical(
            MODULE,
            "curvature matrix has a non-positive diagonal entry",
        ));
    }
    Ok(d)
}

/// Asymmetric-intensity coefficients
/// `h^{ij}_{m,τ} = Σ_k z_k^i (H^{b,(j)}(0) − H^{a,(j)}(0))`,
/// indexed `[tier][bond]`; identically zero under side symmetry.
#[derive(Debug, Clone)]
pub struct AsymCoefficients {
    pub h11: Vec<Vec<f64>>,
    pub h12: Vec<Vec<f64>>,
    pub h22: Vec<Vec<f64>>,
}

impl AsymCoefficients {
    pub fn is_zero(&self) -> bool {
        self.h11
            .iter()
            .chain(&self.h12)
            .chain(&self.h22)
            .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Compute the h coefficients and the corrected curvature matrix
/// `𝒟 = D − Σ_{τ∈𝒜} (κ̃_τ/W_τ) h^{12} h^{12ᵀ}`.
pub fn asym_coefficients(
    spec: &MarketSpec,
    tables: &TableSet,
) -> Result<(AsymCoefficients, SymmetricMatrix)> {
    let nb = spec.n_bonds();
    let nt = spec.n_tiers();
    let mut h11 = vec![vec![0.0; nb]; nt];
    let mut h12 = vec![vec![0.0; nb]; nt];
    let mut h22 = vec![vec![0.0; nb]; nt];
    for (ri, r) in spec.rungs().iter().enumerate() {
        let sign = match r.side {
            Side::Bid => 1.0,
            Side::Ask => -1.0,
        };
        let h1 = tables.get(ri).eval_h1(0.0)?;
        let h2 = tables.get(ri).eval_h2(0.0)?;
        h11[r.tier][r.bond] += sign * r.size * h1;
        h12[r.tier][r.bond] += sign * r.size * h2;
        h22[r.tier][r.bond] += sign * r.size * r.size * h2;
    }
    let d = curvature_matrix_d(spec, tables)?;
    let mut dcal = SymmetricMatrix::from_diagonal(&d);
    for tc in tier_closures(spec, tables)? {
        if tc.kappa_tilde == 0.0 {
            continue;
        }
        let ratio = tc.kappa_tilde / tc.w;
        for i in 0..nb {
            for j in i..nb {
                let v = dcal.get(i, j) - ratio * h12[tc.tier][i] * h12[tc.tier][j];
                dcal.set_sym(i, j, v);
            }
        }
    }
    let min = dcal.min_eigenvalue()?;
    if min <= 0.0 {
        return Err(Error::numerical(
            MODULE,
            format!("corrected curvature matrix not positive definite (eigenvalue {min:.3e}); reduce kappa"),
        ));
    }
    Ok((AsymCoefficients { h11, h12, h22 }, dcal))
}

/// Shared spectral machinery for one (𝒟, risk) pair: everything is a function
/// of `𝒢 = (𝒟^{1/2} φΣ 𝒟^{1/2})^{1/2}` in its eigenbasis.
#[derive(Debug, Clone)]
pub struct RiccatiKernel {
    pub dcal: SymmetricMatrix,
    d_sqrt: SymmetricMatrix,
    d_inv_sqrt: SymmetricMatrix,
    /// Eigenvectors of 𝒟^{1/2} φΣ 𝒟^{1/2} (row-major, column i = vector i).
    q: Vec<f64>,
    /// g_i = √eigenvalue_i ≥ 0, ascending.
    g: Vec<f64>,
    /// arctanh((η/φ) g_i).
    c_arg: Vec<f64>,
    horizon: f64,
    phi: f64,
}

impl RiccatiKernel {
    pub fn new(dcal: &SymmetricMatrix, risk: &RiskSpec) -> Result<Self> {
        if risk.phi <= 0.0 {
            return Err(Error::invalid(
                MODULE,
                "closed-form Riccati requires phi > 0; use the ODE path",
            ));
        }
        let d_sqrt = dcal.sqrt_psd()?;
        let d_inv_sqrt = dcal.inv_sqrt_pd()?;
        let m0 = d_sqrt.sandwich(&risk.sigma_cov.scale(risk.phi));
        let eig = m0.eigen()?;
        let scale = m0.max_abs().max(f64::MIN_POSITIVE);
        let g: Result<Vec<f64>> = eig
            .values
            .iter()
            .map(|&l| {
                if l < -1e-10 * scale {
                    Err(Error::invalid(
                        MODULE,
                        format!("phi*Sigma congruence not PSD (eigenvalue {l:.3e})"),
                    ))
                } else {
                    Ok(l.max(0.0).sqrt())
                }
            })
            .collect();
        let g = g?;
        let ratio = risk.eta / risk.phi;
        let c_arg: Result<Vec<f64>> = g
            .iter()
            .map(|&gi| {
                let x = ratio * gi;
                if x.abs() >= 1.0 {
                    Err(Error::invalid(
                        MODULE,
                        format!("arctanh domain violated by eigenvalue {gi:.6} (eta/phi*g = {x:.6}); use the stationary or ODE path"),
                    ))
                } else {
                    Ok(x.atanh())
                }
            })
            .collect();
        Ok(Self {
            dcal: dcal.clone(),
            d_sqrt,
            d_inv_sqrt,
            q: eig.vectors,
            g,
            c_arg: c_arg?,
            horizon: risk.horizon,
            phi: risk.phi,
        })
    }

    fn recompose(&self, vals: &[f64]) -> SymmetricMatrix {
        let n = self.g.len();
        let mut core = SymmetricMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.q[i * n + k] * vals[k] * self.q[j * n + k];
                }
                core.set_sym(i, j, s);
            }
        }
        self.d_inv_sqrt.sandwich(&core)
    }

    /// Closed-form A(t) = 𝒟^{-1/2} 𝒢 tanh(𝒢(T−t) + arctanh((η/φ)𝒢)) 𝒟^{-1/2}.
    pub fn a_at(&self, t: f64) -> SymmetricMatrix {
        let tt = self.horizon - t;
        let vals: Vec<f64> = self
            .g
            .iter()
            .zip(&self.c_arg)
            .map(|(&g, &c)| g * (tt * g + c).tanh())
            .collect();
        self.recompose(&vals)
    }

    /// Stationary limit `A = 𝒟^{-1/2} 𝒢 𝒟^{-1/2}`; requires Σ positive
    /// definite so 𝒢 is invertible.
    pub fn a_stationary(&self) -> Result<SymmetricMatrix> {
        let gmax = self.g.last().copied().unwrap_or(0.0);
        if self.g.iter().any(|&g| g <= 1e-12 * gmax.max(1.0)) {
            return Err(Error::invalid(
                MODULE,
                "stationary Riccati requires positive definite Sigma",
            ));
        }
        Ok(self.recompose(&self.g))
    }

    /// Stationary B = 𝒟^{-1/2} 𝒢^{-1} 𝒟^{1/2} Y.
    pub fn b_stationary(&self, y: &[f64]) -> Result<Vec<f64>> {
        let gmax = self.g.last().copied().unwrap_or(0.0);
        if self.g.iter().any(|&g| g <= 1e-12 * gmax.max(1.0)) {
            return Err(Error::invalid(
                MODULE,
                "stationary B requires positive definite Sigma",
            ));
        }
        let w = self.to_eigenbasis(y);
        let scaled: Vec<f64> = w.iter().zip(&self.g).map(|(wi, gi)| wi / gi).collect();
        Ok(self.from_eigenbasis(&scaled))
    }

    /// Qᵀ 𝒟^{1/2} y.
    fn to_eigenbasis(&self, y: &[f64]) -> Vec<f64> {
        let n = self.g.len();
        let dy = self.d_sqrt.mul_vec(y);
        (0..n)
            .map(|k| (0..n).map(|i| self.q[i * n + k] * dy[i]).sum())
            .collect()
    }

    /// 𝒟^{-1/2} Q w.
    fn from_eigenbasis(&self, w: &[f64]) -> Vec<f64> {
        let n = self.g.len();
        let qw: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| self.q[i * n + k] * w[k]).sum())
            .collect();
        self.d_inv_sqrt.mul_vec(&qw)
    }

    /// Kernel ratio `cosh(θ(s)) / cosh(θ(t))` per eigenvalue, θ(t) = g(T−t)+c,
    /// in overflow-safe form (t ≤ s ≤ T).
    fn cosh_ratio(&self, i: usize, s: f64, t: f64) -> f64 {
        let th_s = self.g[i] * (self.horizon - s) + self.c_arg[i];
        let th_t = self.g[i] * (self.horizon - t) + self.c_arg[i];
        ((th_s - th_t).exp()) * (1.0 + (-2.0 * th_s).exp()) / (1.0 + (-2.0 * th_t).exp())
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// A(t) for the quadratic ansatz. Dispatches to the tanh closed form for
/// φ > 0 and to RK4 integration of `A′ = A𝒟A − φΣ` when φ = 0 (the closed
/// form degenerates there).
pub fn riccati_closed_form(
    dcal: &SymmetricMatrix,
    risk: &RiskSpec,
    t: f64,
) -> Result<SymmetricMatrix> {
    if !(t >= 0.0 && t <= risk.horizon) {
        return Err(Error::invalid(
            MODULE,
            format!("t={t} outside [0, {}]", risk.horizon),
        ));
    }
    if risk.phi > 0.0 {
        Ok(RiccatiKernel::new(dcal, risk)?.a_at(t))
    } else {
        let path = riccati_ode_path(dcal, risk, &[t], 1e-4)?;
        Ok(path.into_iter().next().unwrap())
    }
}

/// Stationary Riccati solution `A = √φ 𝒟^{-1/2}(𝒟^{1/2}Σ𝒟^{1/2})^{1/2}𝒟^{-1/2}`,
/// the PSD root of `A𝒟A = φΣ`.
pub fn riccati_stationary(dcal: &SymmetricMatrix, risk: &RiskSpec) -> Result<SymmetricMatrix> {
    if risk.phi <= 0.0 {
        return Err(Error::invalid(
            MODULE,
            "stationary Riccati requires phi > 0",
        ));
    }
    RiccatiKernel::new(dcal, risk)?.a_stationary()
}

/// RK4 integration of `A′ = A𝒟A − φΣ` backward from `A(T) = ηΣ`, reporting A
/// at the requested times (ascending). Production path for φ = 0.
pub fn riccati_ode_path(
    dcal: &SymmetricMatrix,
    risk: &RiskSpec,
    ts: &[f64],
    step: f64,
) -> Result<Vec<SymmetricMatrix>> {
    let n = dcal.dim();
    let rhs = |a: &SymmetricMatrix| -> SymmetricMatrix {
        a.sandwich(dcal).sub(&risk.sigma_cov.scale(risk.phi))
    };
    let mut sorted: Vec<(usize, f64)> = ts.iter().copied().enumerate().collect();
    sorted.sort_by(|x, y| y.1.total_cmp(&x.1)); // descending t
    let mut out = vec![SymmetricMatrix::zeros(n); ts.len()];
    let mut a = risk.sigma_cov.scale(risk.eta);
    let mut t = risk.horizon;
    for (orig_idx, t_target) in sorted {
        if !(t_target >= 0.0 && t_target <= risk.horizon) {
            return Err(Error::invalid(
                MODULE,
                format!("t={t_target} outside [0, {}]", risk.horizon),
            ));
        }
        while t > t_target + 1e-15 {
            let h = step.min(t - t_target);
            // backward step of size h: A(t−h) from A(t)
            let k1 = rhs(&a);
            let a2 = a.sub(&k1.scale(0.5 * h));
            let k2 = rhs(&a2);
            let a3 = a.sub(&k2.scale(0.5 * h));
            let k3 = rhs(&a3);
            let a4 = a.sub(&k3.scale(h));
            let k4 = rhs(&a4);
            let incr = k1
                .add(&k2.scale(2.0))
                .add(&k3.scale(2.0))
                .add(&k4)
                .scale(h / 6.0);
            a = a.sub(&incr);
            t -= h;
        }
        out[orig_idx] = a.clone();
    }
    Ok(out)
}

/// Inventory-independent dual closure `ξ_τ(t) = κ̃_τ y_τ(t)`; requires
/// side-symmetric intensities on every targeted tier (otherwise the
/// asymmetric closure applies). Returns one value per tier, zero for
/// untargeted tiers.
pub fn xi_explicit(spec: &MarketSpec, tables: &TableSet, a: &SymmetricMatrix) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.n_tiers()];
    for tc in tier_closures(spec, tables)? {
        if !spec.tier_side_symmetric(tc.tier) {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "tier {} has asymmetric intensities: use the asymmetric closure (xi_asym)",
                    tc.tier
                ),
            ));
        }
        out[tc.tier] = tc.kappa_tilde * tc.y(a);
    }
    Ok(out)
}

/// Marginal cost of one rung under the quadratic ansatz before the dual
/// shift: `e_mᵀA(±q + ½ z e_m) ± B_m`.
#[inline]
pub fn ansatz_p_base(
    a: &SymmetricMatrix,
    b: Option<&[f64]>,
    rung: &crate::market_model::Rung,
    aq: &[f64],
) -> f64 {
    let sign = rung.side.sign();
    let mut p = sign * aq[rung.bond] + 0.5 * rung.size * a.get(rung.bond, rung.bond);
    if let Some(bv) = b {
        p += sign * bv[rung.bond];
    }
    p
}

/// Refined closure: solve the exact scalar fixed point of the dual
/// first-order condition with tabulated H′ at
/// `p = e_mᵀA(±q + ½ z e_m) ± B_m − ξ`. Returns one ξ per tier (zero for
/// untargeted).
pub fn xi_fixed_point(
    spec: &MarketSpec,
    tables: &TableSet,
    a: &SymmetricMatrix,
    b: Option<&[f64]>,
    q: &[f64],
) -> Result<Vec<f64>> {
    if q.len() != spec.n_bonds() {
        return Err(Error::invalid(MODULE, "inventory dimension mismatch"));
    }
    let aq = a.mul_vec(q);
    let mut out = vec![0.0; spec.n_tiers()];
    for tc in tier_closures(spec, tables)? {
        let entries: Vec<DualEntry> = spec
            .rungs()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.tier == tc.tier)
            .map(|(ri, r)| DualEntry {
                z: r.size,
                p_base: ansatz_p_base(a, b, r, &aq),
                table: tables.get(ri),
            })
            .collect();
        let warm = tc.kappa_tilde * tc.y(a);
        out[tc.tier] = dual_inner_solve(&entries, tc.w, tc.r_star, tc.kappa, warm)?;
    }
    Ok(out)
}

/// Local quadratic refinement of the constant closure:
/// `ξ_τ(t, q) ≈ ξ₀(t) + ½ qᵀ B_τ q`, with the Hessian
///
/// ```text
/// B_τ = (1/W) Σ z H‴(ζ) A e_m e_mᵀ A / [ 1/κ + (1/W) Σ z H″(ζ) ],
/// ζ_{m}^k = (z_k/2) A_mm − ξ_τ(t, 0),
/// ```
///
/// where ζ is evaluated at the exact scalar fixed point at q = 0 and the
/// reported constant ξ₀ is the explicit closure. Side-symmetric tiers only.
pub fn xi_local_quadratic(
    spec: &MarketSpec,
    tables: &TableSet,
    a: &SymmetricMatrix,
) -> Result<Vec<(f64, SymmetricMatrix)>> {
    let nb = spec.n_bonds();
    if !spec.side_symmetric() {
        return Err(Error::invalid(
            MODULE,
            "local quadratic closure requires side-symmetric intensities",
        ));
    }
    let xi0 = xi_explicit(spec, tables, a)?;
    let xi_center = xi_fixed_point(spec, tables, a, None, &vec![0.0; nb])?;
    let mut out = vec![(0.0, SymmetricMatrix::zeros(nb)); spec.n_tiers()];
    for tc in tier_closures(spec, tables)? {
        if tc.kappa == 0.0 {
            continue;
        }
        // numerator Σ_{m,s,k} z H‴(ζ) a_m a_mᵀ and denominator 1/κ + (1/W)Σ z H″(ζ)
        let mut coef = vec![0.0; nb];
        let mut denom = 1.0 / tc.kappa;
        for (ri, r) in spec.rungs().iter().enumerate() {
            if r.tier != tc.tier {
                continue;
            }
            let zeta = 0.5 * r.size * a.get(r.bond, r.bond) - xi_center[tc.tier];
            coef[r.bond] += r.size * tables.get(ri).eval_h3(zeta)?;
            denom += r.size * tables.get(ri).eval_h2(zeta)? / tc.w;
        }
        if denom <= 0.0 {
            return Err(Error::numerical(
                MODULE,
                "quadratic closure denominator not positive",
            ));
        }
        let mut hess = SymmetricMatrix::zeros(nb);
        for m in 0..nb {
            if coef[m] == 0.0 {
                continue;
            }
            let col: Vec<f64> = (0..nb).map(|i| a.get(i, m)).collect();
            for i in 0..nb {
                for j in i..nb {
                    let v = hess.get(i, j) + coef[m] * col[i] * col[j];
                    hess.set_sym(i, j, v);
                }
            }
        }
        out[tc.tier] = (xi0[tc.tier], hess.scale(1.0 / (tc.w * denom)));
    }
    Ok(out)
}

/// Asymmetric explicit closure
/// `ξ_τ(t,q) = κ̃ y_τ(t) + (κ̃/W) Σ_m h¹²_{m,τ} (e_mᵀA q + B_m)`, linear in q.
pub fn xi_asym(
    spec: &MarketSpec,
    tables: &TableSet,
    coeffs: &AsymCoefficients,
    a: &SymmetricMatrix,
    b: &[f64],
    q: &[f64],
) -> Result<Vec<f64>> {
    let aq = a.mul_vec(q);
    let mut out = vec![0.0; spec.n_tiers()];
    for tc in tier_closures(spec, tables)? {
        let mut xi = tc.kappa_tilde * tc.y(a);
        for m in 0..spec.n_bonds() {
            xi += tc.kappa_tilde / tc.w * coeffs.h12[tc.tier][m] * (aq[m] + b[m]);
        }
        out[tc.tier] = xi;
    }
    Ok(out)
}

/// Dual closure as an affine function of inventory: `ξ_τ(q) = c_τ + w_τ·q`.
/// Symmetric tiers have zero gradient; asymmetric tiers get the h¹² term.
#[derive(Debug, Clone)]
pub struct LinearXi {
    pub constant: Vec<f64>,
    pub gradient: Vec<Vec<f64>>,
}

impl LinearXi {
    pub fn eval(&self, tier: usize, q: &[f64]) -> f64 {
        self.constant[tier]
            + self.gradient[tier]
                .iter()
                .zip(q)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

/// Build the affine dual closure from the stationary (or any fixed) A and B.
pub fn linear_xi_closure(
    spec: &MarketSpec,
    tables: &TableSet,
    coeffs: &AsymCoefficients,
    a: &SymmetricMatrix,
    b: &[f64],
) -> Result<LinearXi> {
    let nb = spec.n_bonds();
    let mut constant = vec![0.0; spec.n_tiers()];
    let mut gradient = vec![vec![0.0; nb]; spec.n_tiers()];
    for tc in tier_closures(spec, tables)? {
        let mut c = tc.kappa_tilde * tc.y(a);
        let ratio = if tc.w > 0.0 {
            tc.kappa_tilde / tc.w
        } else {
            0.0
        };
        for m in 0..nb {
            c += ratio * coeffs.h12[tc.tier][m] * b[m];
            for i in 0..nb {
                gradient[tc.tier][i] += ratio * coeffs.h12[tc.tier][m] * a.get(m, i);
            }
        }
        constant[tc.tier] = c;
    }
    Ok(LinearXi { constant, gradient })
}

/// The assembled quadratic value object: A(t) path, B(t) path (zero under
/// side symmetry), stationary limits, curvature matrices, and the h
/// coefficients.
#[derive(Debug, Clone)]
pub struct QuadraticValue {
    pub t_grid: Vec<f64>,
    pub a_path: Vec<SymmetricMatrix>,
    pub b_path: Vec<Vec<f64>>,
    pub a_stat: SymmetricMatrix,
    pub b_stat: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub dcal: SymmetricMatrix,
    pub coeffs: AsymCoefficients,
}

impl QuadraticValue {
    pub fn node_index(&self, t: f64) -> Result<usize> {
        self.t_grid
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9)
            .ok_or_else(|| Error::invalid(MODULE, format!("t={t} not on the quadratic value grid")))
    }
}

/// Vector Y(t) driving the B ODE (asymmetric case):
/// `Y = A(t) Σ_m [ −Σ_{τ∈𝒯}(h¹¹ + ½A_mm h²²) + Σ_{τ∈𝒜} κ̃ y_τ(t) h¹² ] e_m`.
pub fn y_vector(
    spec: &MarketSpec,
    closures: &[TierClosure],
    coeffs: &AsymCoefficients,
    a: &SymmetricMatrix,
) -> Vec<f64> {
    let nb = spec.n_bonds();
    let mut v = vec![0.0; nb];
    for m in 0..nb {
        for tau in 0..spec.n_tiers() {
            v[m] -= coeffs.h11[tau][m] + 0.5 * a.get(m, m) * coeffs.h22[tau][m];
        }
        for tc in closures {
            v[m] += tc.kappa_tilde * tc.y(a) * coeffs.h12[tc.tier][m];
        }
    }
    a.mul_vec(&v)
}

/// B(t) by the cosh-kernel integral in the 𝒢 eigenbasis, composite Simpson
/// with panel doubling to a 1e-8 target.
fn b_by_quadrature(
    spec: &MarketSpec,
    closures: &[TierClosure],
    coeffs: &AsymCoefficients,
    kernel: &RiccatiKernel,
    t: f64,
    horizon: f64,
) -> Result<Vec<f64>> {
    let nb = spec.n_bonds();
    if horizon - t <= 0.0 {
        return Ok(vec![0.0; nb]);
    }
    let integrand = |s: f64| -> Vec<f64> {
        let a_s = kernel.a_at(s);
        let y = y_vector(spec, closures, coeffs, &a_s);
        let w = kernel.to_eigenbasis(&y);
        (0..nb).map(|i| kernel.cosh_ratio(i, s, t) * w[i]).collect()
    };
    let simpson = |panels: usize| -> Vec<f64> {
        let h = (horizon - t) / panels as f64;
        let mut acc = vec![0.0; nb];
        let add = |s: f64, wgt: f64, acc: &mut Vec<f64>| {
            for (a, v) in acc.iter_mut().zip(integrand(s)) {
                *a += wgt * v;
            }
        };
        add(t, 1.0, &mut acc);
        add(horizon, 1.0, &mut acc);
        for i in 1..panels {
            let s = t + h * i as f64;
            add(s, if i % 2 == 1 { 4.0 } else { 2.0 }, &mut acc);
        }
        acc.iter().map(|v| v * h / 3.0).collect()
    };
    let mut panels = ((512.0 * (horizon - t)).ceil() as usize).max(8);
    if panels % 2 == 1 {
        panels += 1;
    }
    let mut prev = simpson(panels);
    for _ in 0..6 {
        panels *= 2;
        let next = simpson(panels);
        let diff = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if diff <= 1e-8 {
            return Ok(kernel.from_eigenbasis(&next));
        }
        prev = next;
    }
    Err(Error::numerical(
        MODULE,
        "B quadrature did not reach 1e-8 after panel doubling",
    ))
}

/// Assemble the full quadratic value object on `n_nodes` time nodes.
///
/// Side-symmetric inputs degenerate exactly: h = 0, 𝒟 = D, Y ≡ 0, B ≡ 0.
/// With φ = 0 the A path falls back to RK4 integration and no stationary
/// objects exist (an error is returned if they are requested downstream).
pub fn quadratic_value(
    spec: &MarketSpec,
    tables: &TableSet,
    n_nodes: usize,
) -> Result<QuadraticValue> {
    if n_nodes < 2 {
        return Err(Error::invalid(MODULE, "need at least 2 time nodes"));
    }
    let risk = spec.risk();
    let horizon = risk.horizon;
    let (coeffs, dcal) = asym_coefficients(spec, tables)?;
    let d_diag = curvature_matrix_d(spec, tables)?;
    let closures = tier_closures(spec, tables)?;
    let t_grid: Vec<f64> = (0..n_nodes)
        .map(|i| horizon * i as f64 / (n_nodes - 1) as f64)
        .collect();
    let asym = !coeffs.is_zero();
    let nb = spec.n_bonds();

    let (a_path, b_path, a_stat, b_stat) = if risk.phi > 0.0 {
        let kernel = RiccatiKernel::new(&dcal, risk)?;
        let a_path: Vec<SymmetricMatrix> = t_grid.iter().map(|&t| kernel.a_at(t)).collect();
        let b_path: Vec<Vec<f64>> = if asym {
            t_grid
                .iter()
                .map(|&t| b_by_quadrature(spec, &closures, &coeffs, &kernel, t, horizon))
                .collect::<Result<_>>()?
        } else {
            vec![vec![0.0; nb]; n_nodes]
        };
        let a_stat = kernel.a_stationary()?;
        let b_stat = if asym {
            let y_stat = y_vector(spec, &closures, &coeffs, &a_stat);
            kernel.b_stationary(&y_stat)?
        } else {
            vec![0.0; nb]
        };
        (a_path, b_path, a_stat, b_stat)
    } else {
        let a_path = riccati_ode_path(&dcal, risk, &t_grid, horizon / 65536.0)?;
        let b_path = if asym {
            b_ode_rk4(
                spec,
                &closures,
                &coeffs,
                &dcal,
                risk,
                &t_grid,
                horizon / 65536.0,
            )?
        } else {
            vec![vec![0.0; nb]; n_nodes]
        };
        // no stationary regime without a running penalty; expose zero-size
        // markers the callers must not rely on
        (a_path, b_path, SymmetricMatrix::zeros(nb), vec![0.0; nb])
    };

    Ok(QuadraticValue {
        t_grid,
        a_path,
        b_path,
        a_stat,
        b_stat,
        d_diag,
        dcal,
        coeffs,
    })
}

/// RK4 integration of `−B′ + A𝒟B = Y` backward from `B(T) = 0` (production
/// path for φ = 0, oracle elsewhere).
pub fn b_ode_rk4(
    spec: &MarketSpec,
    closures: &[TierClosure],
    coeffs: &AsymCoefficients,
    dcal: &SymmetricMatrix,
    risk: &RiskSpec,
    ts: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let nb = spec.n_bonds();
    // B' = A D B − Y integrated backward from B(T) = 0, with A(t) sampled
    // once on a dense cache and interpolated linearly
    let n_cache = ((risk.horizon / step).ceil() as usize).max(2);
    let cache_ts: Vec<f64> = (0..=n_cache)
        .map(|i| risk.horizon * i as f64 / n_cache as f64)
        .collect();
    let a_cache: Vec<SymmetricMatrix> = if risk.phi > 0.0 {
        let kernel = RiccatiKernel::new(dcal, risk)?;
        cache_ts.iter().map(|&t| kernel.a_at(t)).collect()
    } else {
        riccati_ode_path(dcal, risk, &cache_ts, step)?
    };
    let a_interp = |t: f64| -> SymmetricMatrix {
        let x = (t / risk.horizon * n_cache as f64).clamp(0.0, n_cache as f64);
        let i = (x.floor() as usize).min(n_cache - 1);
        let w = x - i as f64;
        a_cache[i].scale(1.0 - w).add(&a_cache[i + 1].scale(w))
    };
    let rhs = |t: f64, b: &[f64]| -> Vec<f64> {
        let a = a_interp(t);
        let y = y_vector(spec, closures, coeffs, &a);
        let db = dcal.mul_vec(b);
        let adb = a.mul_vec(&db);
        (0..nb).map(|i| adb[i] - y[i]).collect()
    };
    let mut sorted: Vec<(usize, f64)> = ts.iter().copied().enumerate().collect();
    sorted.sort_by(|x, y| y.1.total_cmp(&x.1));
    let mut out = vec![vec![0.0; nb]; ts.len()];
    let mut b = vec![0.0; nb];
    let mut t = risk.horizon;
    for (orig_idx, t_target) in sorted {
        while t > t_target + 1e-15 {
            let h = step.min(t - t_target);
            let k1 = rhs(t, &b);
            let b2: Vec<f64> = b.iter().zip(&k1).map(|(x, k)| x - 0.5 * h * k).collect();
            let k2 = rhs(t - 0.5 * h, &b2);
            let b3: Vec<f64> = b.iter().zip(&k2).map(|(x, k)| x - 0.5 * h * k).collect();
            let k3 = rhs(t - 0.5 * h, &b3);
            let b4: Vec<f64> = b.iter().zip(&k3).map(|(x, k)| x - h * k).collect();
            let k4 = rhs(t - h, &b4);
            for i in 0..nb {
                b[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t -= h;
        }
        out[orig_idx] = b.clone();
    }
    Ok(out)
}
