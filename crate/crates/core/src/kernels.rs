//! Quadratic interaction kernels.
//!
//! The second-order motion of a lost direction is governed by a convolution
//! kernel `K(σ) = Σ_j c_j e^{−j²|σ|}` built from coefficient products of the
//! nonlinearity, optionally carrying an exponential shift `e^{λ|σ|}`. This
//! module provides
//!
//! * coefficient extraction from a [`NonlinearitySpec`],
//! * pointwise kernel evaluation with derivatives,
//! * the spectral side `K̂(ξ) = 2 Σ_j c_j (j²−λ)/((j²−λ)² + ξ²)` with a
//!   piecewise-Chebyshev cache for fast sweeps,
//! * the plateau constants `γ(s)`, `γ±(s, L)`, the plateau half-width `L(s,ε)`
//!   and the profile-weighted window factor `G`,
//! * the quadratic forms `∫₀^τ u(t) ∫₀^t u(t') K(t−t') dt' dt` evaluated in
//!   the time domain (exact per-cell recursion) and in the frequency domain
//!   (`(1/4π) ∫ conj(â) b̂ K̂ dξ`, mandatory for carriers too fast to sample).

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::profiles::{BlockProfile, ProfileKind};
use crate::signals::{ec0, ec1, AtomMeta, ControlSignal};
use crate::system::NonlinearitySpec;

// ---------------------------------------------------------------------------
// quadrature tables
// ---------------------------------------------------------------------------

const GL15_X: [f64; 15] = [
    -0.9879925180204854,
    -0.9372733924007060,
    -0.8482065834104272,
    -0.7244177313601700,
    -0.5709721726085388,
    -0.3941513470775634,
    -0.2011940939974345,
    0.0,
    0.2011940939974345,
    0.3941513470775634,
    0.5709721726085388,
    0.7244177313601700,
    0.8482065834104272,
    0.9372733924007060,
    0.9879925180204854,
];
const GL15_W: [f64; 15] = [
    0.0307532419961173,
    0.0703660474881081,
    0.1071592204671719,
    0.1395706779261543,
    0.1662692058169939,
    0.1861610000155622,
    0.1984314853271112,
    0.2025782419255609,
    0.1984314853271112,
    0.1861610000155622,
    0.1662692058169939,
    0.1395706779261543,
    0.1071592204671719,
    0.0703660474881081,
    0.0307532419961173,
];

const GL7_X: [f64; 7] = [
    -0.9491079123427585,
    -0.7415311855993945,
    -0.4058451513773972,
    0.0,
    0.4058451513773972,
    0.7415311855993945,
    0.9491079123427585,
];
const GL7_W: [f64; 7] = [
    0.1294849661688697,
    0.2797053914892766,
    0.3818300505051189,
    0.4179591836734694,
    0.3818300505051189,
    0.2797053914892766,
    0.1294849661688697,
];

fn gl15_panel(a: f64, b: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (&x, &w) in GL15_X.iter().zip(&GL15_W) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// GL15 over [a, b] split into panels of width ≤ `max_width`.
fn integrate_panels(a: f64, b: f64, max_width: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = ((b - a) / max_width).ceil().max(1.0) as usize;
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        acc += gl15_panel(a + i as f64 * h, a + (i + 1) as f64 * h, f);
    }
    acc
}

// ---------------------------------------------------------------------------
// plateau constants
// ---------------------------------------------------------------------------

/// The exponential window `w_s(x) = e^{(4−4s)x}/(1 + e^{4x})`, i.e. the
/// `γ(s)` integrand after the substitution `y = e^x`, evaluated in the stable
/// orientation on each half-line.
pub fn plateau_weight(s: f64, x: f64) -> f64 {
    if x > 0.0 {
        (-4.0 * s * x).exp() / (1.0 + (-4.0 * x).exp())
    } else {
        ((4.0 - 4.0 * s) * x).exp() / (1.0 + (4.0 * x).exp())
    }
}

/// `γ(s) = ∫₀^∞ y^{3−4s}/(1+y⁴) dy`, by splitting at `y = 1`, folding the
/// tail back with `y ↦ 1/y`, and integrating the power parts exactly:
/// `γ(s) = 1/(4−4s) + 1/(4s) − ∫₀¹ (y^{7−4s} + y^{3+4s})/(1+y⁴) dy`.
/// The remaining integrand vanishes at least cubically at 0, so dyadic
/// Gauss panels converge uniformly over the whole range s ∈ (0,1).
pub fn gamma_s(s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
    }
    let mut f = |y: f64| (y.powf(7.0 - 4.0 * s) + y.powf(3.0 + 4.0 * s)) / (1.0 + y.powi(4));
    let mut parts = Vec::new();
    let mut hi = 1.0f64;
    for _ in 0..80 {
        let lo = 0.5 * hi;
        let p = gl15_panel(lo, hi, &mut f);
        parts.push(p);
        if p.abs() < 1e-22 {
            break;
        }
        hi = lo;
    }
    let correction: f64 = parts.iter().rev().sum();
    Ok(1.0 / (4.0 - 4.0 * s) + 1.0 / (4.0 * s) - correction)
}

/// Smallest half-width `L` such that the mass of `w_s` outside `[−L, L]`
/// equals `ε·γ(s)`; a plateau of that half-width captures a `(1−ε)` fraction
/// of the full window integral.
pub fn plateau_scale(s: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("ε must lie in (0,1), got {eps}")));
    }
    let gamma = gamma_s(s)?;
    let tail =
        |l: f64| -> f64 { gamma - integrate_panels(-l, l, 0.5, &mut |x| plateau_weight(s, x)) };
    let target = eps * gamma;
    let mut lo = 1e-6;
    let mut hi = 1.0;
    while tail(hi) > target {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Solver("plateau-scale bracket failed to close".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `G = ∫₀^∞ y^{3−4s}/(1+y⁴) · Θ(ln(y√ω)) dy`, integrated in `x = ln y` over
/// the profile's block structure (Gauss panels split at every trapezoid
/// kink). `ω` enters as `ln ω`, which stays representable for carriers far
/// beyond f64 range.
pub fn g_factor(s: f64, theta: &BlockProfile, ln_omega: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
    }
    if !ln_omega.is_finite() {
        return Err(Error::invalid("ln ω must be finite"));
    }
    // Θ is sampled at t = x + lnω/2; integrate over t with the window shifted
    let c = 0.5 * ln_omega;
    let x_hi = 745.0 / (4.0 * s);
    let x_lo = -745.0 / (4.0 - 4.0 * s);
    let (t_lo, t_hi) = (c + x_lo, c + x_hi);
    let two_l = 2.0 * theta.l_scale;
    let mut f = |t: f64| plateau_weight(s, t - c) * theta.eval(t);
    let mut acc = 0.0;
    match theta.kind {
        ProfileKind::Periodic => {
            let m_lo = (t_lo / two_l).floor() as i64;
            let m_hi = (t_hi / two_l).ceil() as i64;
            for m in m_lo..m_hi {
                let a = (m as f64 * two_l).max(t_lo);
                let b = ((m + 1) as f64 * two_l).min(t_hi);
                if b > a {
                    acc += integrate_panels(a, b, 1.0, &mut f);
                }
            }
        }
        ProfileKind::Sparse => {
            for &(start, _) in &theta.blocks {
                for seg in 0..3 {
                    let a = (two_l * (start + seg as f64)).max(t_lo);
                    let b = (two_l * (start + seg as f64 + 1.0)).min(t_hi);
                    if b > a {
                        acc += integrate_panels(a, b, 1.0, &mut f);
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// Window weights of an isolated `+`/`−` block pair seen from its own plateau
/// centers: `γ₊` at the center of the `+` plateau (the `−` partner sits
/// immediately to the right), `γ₋` at the center of the `−` plateau (the `+`
/// partner immediately to the left). Both lie in `[(1−2ε)γ(s), γ(s)]` when
/// `L = plateau_scale(s, ε)`.
pub fn gamma_pm(s: f64, l_scale: f64) -> Result<(f64, f64)> {
    let pair_plus = BlockProfile {
        l_scale,
        blocks: vec![(-1.5, 1), (1.5, -1)],
        kind: ProfileKind::Sparse,
        index: 0,
        horizon: 0,
    };
    let pair_minus = BlockProfile {
        l_scale,
        blocks: vec![(-4.5, 1), (-1.5, -1)],
        kind: ProfileKind::Sparse,
        index: 0,
        horizon: 0,
    };
    let gp = g_factor(s, &pair_plus, 0.0)?;
    let gm = -g_factor(s, &pair_minus, 0.0)?;
    Ok((gp, gm))
}

// ---------------------------------------------------------------------------
// kernel specifications
// ---------------------------------------------------------------------------

/// Claimed power-law tail `c_j ≈ scale·j^{1−4s−4n}` (`n = 0` for the bare
/// law); used to continue truncated sums past the stored range and to bound
/// the dropped tail.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AsymptoticLaw {
    pub scale: f64,
    pub s: f64,
    pub n: u32,
}

impl AsymptoticLaw {
    pub fn exponent(&self) -> f64 {
        1.0 - 4.0 * self.s - 4.0 * self.n as f64
    }

    pub fn coefficient(&self, j: f64) -> f64 {
        self.scale * j.powf(self.exponent())
    }

    /// Bound on `Σ_{j>J} |c_j|` under this law.
    pub fn tail_beyond(&self, j: f64) -> f64 {
        let p = self.exponent();
        if p >= -1.0 {
            f64::INFINITY
        } else {
            self.scale.abs() * j.powf(p + 1.0) / (-(p + 1.0))
        }
    }
}

/// Coefficient storage: an explicit truncation, or the closed-form family
/// `c_j = scale·Θ(ln j)·j^{1−4s}` evaluated lazily — its support reaches mode
/// indices like `e^{2000}` that no array could hold.
#[derive(Debug, Clone)]
pub enum KernelData {
    Explicit { c: Vec<f64> },
    ThetaPower { profile: BlockProfile, s: f64, scale: f64 },
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    data: KernelData,
    lambda: f64,
    asymptotic: Option<AsymptoticLaw>,
}

/// A spectral value together with the reported truncation/continuation bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HatValue {
    pub value: f64,
    pub tail_bound: f64,
}

/// Hard cap on exact mode enumeration in pointwise kernel sums.
const ENUM_CAP: f64 = 3.0e6;
/// Exact-enumeration cap for spectral sums; beyond it the integral
/// continuation of the coefficient law is accurate to O(J⁻²) relative.
const HAT_ENUM_CAP: f64 = 1.0e5;

impl KernelSpec {
    pub fn explicit(c: Vec<f64>) -> Result<Self> {
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("kernel coefficients must be finite"));
        }
        Ok(KernelSpec { data: KernelData::Explicit { c }, lambda: 0.0, asymptotic: None })
    }

    /// `c_j = scale·j^{1−4s}` materialized to `j_max`, with the matching
    /// asymptotic law attached for tail continuation.
    pub fn power_law(scale: f64, s: f64, j_max: usize) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
        }
        let p = 1.0 - 4.0 * s;
        let c = (1..=j_max).map(|j| scale * (j as f64).powf(p)).collect();
        Ok(KernelSpec {
            data: KernelData::Explicit { c },
            lambda: 0.0,
            asymptotic: Some(AsymptoticLaw { scale, s, n: 0 }),
        })
    }

    /// `c_j = Θ(ln j)·j^{1−4s}` (lazily evaluated).
    pub fn theta_power(profile: BlockProfile, s: f64) -> Result<Self> {
        Self::theta_power_scaled(profile, s, 1.0)
    }

    pub fn theta_power_scaled(profile: BlockProfile, s: f64, scale: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("kernel scale must be finite"));
        }
        Ok(KernelSpec {
            data: KernelData::ThetaPower { profile, s, scale },
            lambda: 0.0,
            asymptotic: None,
        })
    }

    pub fn with_asymptotic(mut self, law: AsymptoticLaw) -> Self {
        self.asymptotic = Some(law);
        self
    }

    /// Attach the exponential shift `e^{λ|σ|}`, i.e. replace every decay rate
    /// `j²` by `j² − λ`. Requires `λ < j₁²/2` for the first active mode `j₁`
    /// so that all summands still decay; the check runs in log space because
    /// `j₁` itself can overflow.
    pub fn with_shift(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("shift λ must be finite and ≥ 0"));
        }
        if lambda > 0.0 {
            if let Some(ln_j1) = self.first_active_ln_j() {
                if (2.0 * lambda).ln() >= 2.0 * ln_j1 {
                    return Err(Error::invalid(format!(
                        "shift λ = {lambda} violates λ < j₁²/2 for first active mode \
                         ln j₁ = {ln_j1:.6}"
                    )));
                }
            }
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn data(&self) -> &KernelData {
        &self.data
    }

    pub fn asymptotic(&self) -> Option<AsymptoticLaw> {
        self.asymptotic
    }

    /// `c_j` (1-based); zero beyond an explicit truncation.
    pub fn coefficient(&self, j: usize) -> f64 {
        match &self.data {
            KernelData::Explicit { c } => c.get(j - 1).copied().unwrap_or(0.0),
            KernelData::ThetaPower { profile, s, scale } => {
                let jf = j as f64;
                let t = profile.eval(jf.ln());
                if t == 0.0 {
                    0.0
                } else {
                    scale * t * jf.powf(1.0 - 4.0 * s)
                }
            }
        }
    }

    /// Bound on the coefficient mass dropped beyond the stored truncation
    /// (zero when the stored object is itself the definition).
    pub fn tail_bound(&self) -> f64 {
        match (&self.data, &self.asymptotic) {
            (KernelData::Explicit { c }, Some(law)) => law.tail_beyond(c.len() as f64 + 0.5),
            _ => 0.0,
        }
    }

    fn first_active_ln_j(&self) -> Option<f64> {
        match &self.data {
            KernelData::Explicit { c } => {
                c.iter().position(|&x| x != 0.0).map(|i| ((i + 1) as f64).ln())
            }
            KernelData::ThetaPower { profile, .. } => {
                let x0 = profile.inf_supp().max(0.0);
                if x0 <= ENUM_CAP.ln() {
                    let mut j = x0.exp().floor().max(1.0) as u64;
                    while (j as f64) <= 2.0 * ENUM_CAP {
                        if profile.eval((j as f64).ln()) != 0.0 {
                            return Some((j as f64).ln());
                        }
                        j += 1;
                    }
                    Some(x0)
                } else {
                    Some(x0)
                }
            }
        }
    }
}

/// Kink-aligned support segments of a `Θ(ln j)`-type coefficient law inside
/// `[x_lo, x_hi]` (`x` is the log of the mode index), ascending, each at most
/// one trapezoid edge wide. `x_hi` must be finite.
fn theta_segments(profile: &BlockProfile, x_lo: f64, x_hi: f64) -> Vec<(f64, f64)> {
    let two_l = 2.0 * profile.l_scale;
    let mut segs = Vec::new();
    if !(x_hi > x_lo) || !x_hi.is_finite() {
        return segs;
    }
    match profile.kind {
        ProfileKind::Periodic => {
            let m_lo = (x_lo / two_l).floor().max(0.0) as u64;
            let m_hi = (x_hi / two_l).ceil() as u64;
            for m in m_lo..m_hi {
                let a = (m as f64 * two_l).max(x_lo);
                let b = ((m + 1) as f64 * two_l).min(x_hi);
                if b > a {
                    segs.push((a, b));
                }
            }
        }
        ProfileKind::Sparse => {
            for &(start, _) in &profile.blocks {
                for k in 0..3 {
                    let a = (two_l * (start + k as f64)).max(x_lo);
                    let b = (two_l * (start + k as f64 + 1.0)).min(x_hi);
                    if b > a {
                        segs.push((a, b));
                    }
                }
            }
        }
    }
    segs
}

/// Merge touching segments into disjoint spans (for integer enumeration).
fn merge_spans(segs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for &(a, b) in segs {
        match spans.last_mut() {
            Some(last) if a <= last.1 + 1e-12 => last.1 = last.1.max(b),
            _ => spans.push((a, b)),
        }
    }
    spans
}

/// Integers in the half-open log-interval `(a, b]`, as an inclusive range.
fn span_modes(a: f64, b: f64) -> (u64, u64) {
    let lo = if a <= 0.0 { 1 } else { a.exp().floor() as u64 + 1 };
    (lo.max(1), b.exp().floor() as u64)
}

/// End of the support in log coordinates (+∞ for periodic profiles).
fn support_end(profile: &BlockProfile) -> f64 {
    match profile.kind {
        ProfileKind::Periodic => f64::INFINITY,
        ProfileKind::Sparse => profile
            .blocks
            .iter()
            .map(|&(start, _)| 2.0 * profile.l_scale * (start + 3.0))
            .fold(0.0, f64::max),
    }
}

// ---------------------------------------------------------------------------
// coefficient extraction
// ---------------------------------------------------------------------------

/// Kernel coefficients `c_j = ⟨μ, φ_j⟩⟨Γ'[0]φ_j, φ_target⟩` of a
/// nonlinearity toward one target mode.
///
/// Affine specs produce an explicit truncation at `j_max` (an error if the
/// stored spectral depth cannot reach it, or if the fitted coefficient tail
/// beyond `j_max` exceeds `tail_tol`). The closed-form specs return the lazy
/// `Θ`-power family; for the all-odd-lost variant the index `j` counts the
/// even source modes `2j` and the family prefactor is included in the scale.
pub fn coefficients(
    spec: &NonlinearitySpec,
    target_mode: usize,
    j_max: usize,
    tail_tol: f64,
) -> Result<KernelSpec> {
    if let Some(s) = spec.fractional_order() {
        if let Some(theta) = spec.single_profile() {
            return if target_mode == 0 {
                KernelSpec::theta_power(theta.clone(), s)
            } else {
                KernelSpec::explicit(vec![0.0; j_max])
            };
        }
        if let Some(family) = spec.profile_family() {
            return if target_mode % 2 == 1 {
                let k = (target_mode - 1) / 2;
                let theta = family.get(k).ok_or_else(|| {
                    Error::InsufficientHorizon(format!(
                        "profile family holds {} members, target mode {target_mode} needs \
                         index {k}",
                        family.len()
                    ))
                })?;
                let c_theta = spec.c_theta().unwrap_or(1.0);
                KernelSpec::theta_power_scaled(theta.clone(), s, c_theta)
            } else {
                KernelSpec::explicit(vec![0.0; j_max])
            };
        }
    }
    let mu = spec.mu_modes_deep();
    if mu.len() <= j_max {
        return Err(Error::invalid(format!(
            "truncation too small: spec stores {} μ-modes, need {j_max}",
            mu.len().saturating_sub(1)
        )));
    }
    let row = spec.retroaction_row(target_mode, j_max)?;
    let c: Vec<f64> = (1..=j_max).map(|j| mu[j] * row[j - 1]).collect();
    // fitted tail estimate from the last stored decade
    let pts: Vec<(f64, f64)> = (j_max / 2..j_max)
        .filter(|&i| c[i].abs() > 0.0)
        .map(|i| (((i + 1) as f64).ln(), c[i].abs().ln()))
        .collect();
    if pts.len() >= 8 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let inter = (sy - slope * sx) / n;
        let tail = if slope < -1.05 {
            inter.exp() * (j_max as f64).powf(slope + 1.0) / (-(slope + 1.0))
        } else {
            f64::INFINITY
        };
        if tail > tail_tol {
            return Err(Error::invalid(format!(
                "truncation too small: fitted coefficient tail {tail:.3e} beyond j = {j_max} \
                 exceeds tolerance {tail_tol:.3e}"
            )));
        }
    }
    KernelSpec::explicit(c)
}

// ---------------------------------------------------------------------------
// time-domain kernel
// ---------------------------------------------------------------------------

/// `deriv`-th one-sided derivative of the (shifted) kernel at `σ`:
/// `Σ_j c_j (λ−j²)^deriv e^{−(j²−λ)|σ|}`.
///
/// The derivative-weighted sum must have converged inside the truncation: if
/// the top half of the stored modes still carries more than 25% of the
/// weighted mass, the requested order is not supported by the coefficient
/// decay and the call fails instead of returning a truncation artifact.
/// `Θ`-power kernels are summed exactly while the active range fits below the
/// enumeration cap and refused — not approximated — otherwise.
pub fn kernel_eval(k: &KernelSpec, sigma: f64, deriv: u32) -> Result<f64> {
    let a = sigma.abs();
    let lam = k.lambda;
    match &k.data {
        KernelData::Explicit { c } => {
            let jn = c.len();
            let mut total = 0.0;
            let mut weighted = 0.0;
            let mut weighted_top = 0.0;
            for (i, &cj) in c.iter().enumerate() {
                if cj == 0.0 {
                    continue;
                }
                let w = ((i + 1) * (i + 1)) as f64 - lam;
                if w * a > 745.0 {
                    break;
                }
                let amp = (-w).powi(deriv as i32) * (-w * a).exp();
                total += cj * amp;
                let wt = cj.abs() * amp.abs();
                weighted += wt;
                if i >= jn / 2 {
                    weighted_top += wt;
                }
            }
            if deriv > 0 && jn >= 10 && weighted > 0.0 && weighted_top > 0.25 * weighted {
                return Err(Error::TailError(format!(
                    "divergent-derivative: order {deriv} weighted sum has not converged \
                     (top half of the truncation holds {:.1}% of the mass)",
                    100.0 * weighted_top / weighted
                )));
            }
            if let Some(law) = k.asymptotic {
                let j0 = jn as f64 + 0.5;
                if (-(j0 * j0 - lam) * a).exp() > 1e-18 {
                    let x_hi = if a > 0.0 { (0.5 * (746.0 / a).ln()).min(170.0) } else { 170.0 };
                    if x_hi > j0.ln() {
                        total += integrate_panels(j0.ln(), x_hi, 0.25, &mut |x| {
                            let y = x.exp();
                            let w = y * y - lam;
                            law.coefficient(y) * (-w).powi(deriv as i32) * (-w * a).exp() * y
                        });
                    }
                }
            }
            Ok(total)
        }
        KernelData::ThetaPower { profile, s, scale } => {
            let x_max = if a > 0.0 {
                0.5 * ((745.0 + lam.max(0.0)) / a).ln()
            } else {
                f64::INFINITY
            };
            let reach = x_max.min(support_end(profile));
            if reach > ENUM_CAP.ln() {
                return Err(Error::TailError(format!(
                    "kernel sum is live out to mode index e^{:.1}: refused, not approximated \
                     (use the spectral side)",
                    reach
                )));
            }
            let p = 1.0 - 4.0 * s;
            let mut total = 0.0;
            for (xa, xb) in merge_spans(&theta_segments(profile, 0.0, reach)) {
                let (j_lo, j_hi) = span_modes(xa, xb);
                for j in j_lo..=j_hi {
                    let jf = j as f64;
                    let t = profile.eval(jf.ln());
                    if t == 0.0 {
                        continue;
                    }
                    let w = jf * jf - lam;
                    if w * a > 745.0 {
                        break;
                    }
                    total += scale * t * jf.powf(p) * (-w).powi(deriv as i32) * (-w * a).exp();
                }
            }
            Ok(total)
        }
    }
}

/// `K^{(p)}(0⁺) = Σ_j c_j (λ−j²)^p`, with the convergence check of
/// [`kernel_eval`].
pub fn kernel_deriv_at_zero(k: &KernelSpec, p: u32) -> Result<f64> {
    kernel_eval(k, 0.0, p)
}

/// Explicit kernel with coefficients `c_j·j^{4n}` — the kernel governing the
/// `n`-times antidifferentiated control after integration by parts.
pub fn derivative_kernel(k: &KernelSpec, n: u32) -> Result<KernelSpec> {
    let KernelData::Explicit { c } = &k.data else {
        return Err(Error::invalid(
            "derivative kernels are available for explicit truncations only",
        ));
    };
    let scaled = c
        .iter()
        .enumerate()
        .map(|(i, &cj)| cj * ((i + 1) as f64).powi(4 * n as i32))
        .collect();
    KernelSpec::explicit(scaled)
}

/// Drift series `a = Σ_j j^{2(2n−1)} c_j` with a top-half convergence check
/// and tail continuation under the attached law.
pub fn drift_coefficient(k: &KernelSpec, n: u32) -> Result<f64> {
    let KernelData::Explicit { c } = &k.data else {
        return Err(Error::invalid(
            "series drift coefficients require an explicit truncation; power-law kernels \
             carry the drift scale in their asymptotic law",
        ));
    };
    let pw = 2 * (2 * n as i32 - 1);
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut mass_top = 0.0;
    for (i, &cj) in c.iter().enumerate() {
        let term = cj * ((i + 1) as f64).powi(pw);
        total += term;
        mass += term.abs();
        if i >= c.len() / 2 {
            mass_top += term.abs();
        }
    }
    if c.len() >= 10 && mass > 0.0 && mass_top > 0.25 * mass {
        return Err(Error::TailError(format!(
            "drift series has not converged within the truncation \
             (top half holds {:.1}% of the mass)",
            100.0 * mass_top / mass
        )));
    }
    if let Some(law) = k.asymptotic {
        let p = law.exponent() + pw as f64;
        if p >= -1.0 {
            return Err(Error::TailError(
                "drift series diverges under the attached asymptotic law".into(),
            ));
        }
        let j0 = c.len() as f64 + 0.5;
        total += law.scale * j0.powf(p + 1.0) / (-(p + 1.0));
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// frequency-domain kernel
// ---------------------------------------------------------------------------

/// `d/(d² + ξ²)` without forming overflowing squares.
fn lorentz_ratio(d: f64, xi: f64) -> f64 {
    if xi >= 1.0 {
        let q = d / xi;
        q / (xi * (1.0 + q * q))
    } else if d.abs() >= 1.0 {
        let r = xi / d;
        1.0 / (d * (1.0 + r * r))
    } else {
        d / (d * d + xi * xi)
    }
}

/// Stable continuum integrand of the spectral sum in `x = ln y`:
/// `2·scale·θ·y^{2−4s}·(y²−λ)/((y²−λ)²+ξ²)` with `y = e^x`.
fn hat_point(x: f64, s: f64, lambda: f64, ln_xi: f64, theta_val: f64, scale: f64) -> f64 {
    if theta_val == 0.0 || scale == 0.0 {
        return 0.0;
    }
    let front = 2.0 * scale * theta_val;
    if x <= 170.0 {
        let y = x.exp();
        let d = y * y - lambda;
        let xi = ln_xi.exp(); // overflow collapses the ratio to 0, correctly
        front * ((2.0 - 4.0 * s) * x).exp() * lorentz_ratio(d, xi)
    } else {
        // e^{2x} dwarfs λ here; branch on u = ln(y²/ξ)
        let u = 2.0 * x - ln_xi;
        if u >= 40.0 {
            front * (-4.0 * s * x).exp()
        } else if u <= -40.0 {
            front * ((4.0 - 4.0 * s) * x - 2.0 * ln_xi).exp()
        } else {
            let q = u.exp();
            front * ((4.0 - 4.0 * s) * x - 2.0 * ln_xi).exp() / (1.0 + q * q)
        }
    }
}

/// `K̂_λ(ξ) = 2 Σ_j c_j (j²−λ)/((j²−λ)² + ξ²)`.
///
/// Explicit truncations are summed directly and continued with an integral of
/// the asymptotic law when one is attached. `Θ`-power kernels sum exactly
/// over active modes below [`HAT_ENUM_CAP`] and integrate the coefficient law
/// over the remaining blocks — everything in log variables, so carriers near
/// the f64 exponent limit stay representable (ξ² is never formed).
pub fn kernel_hat(k: &KernelSpec, xi: f64) -> Result<HatValue> {
    if !xi.is_finite() {
        return Err(Error::invalid("ξ must be finite"));
    }
    let xi = xi.abs();
    let ln_xi = if xi > 0.0 { xi.ln() } else { f64::NEG_INFINITY };
    let lam = k.lambda;
    match &k.data {
        KernelData::Explicit { c } => {
            let mut value = 0.0;
            for (i, &cj) in c.iter().enumerate() {
                if cj == 0.0 {
                    continue;
                }
                let d = ((i + 1) * (i + 1)) as f64 - lam;
                value += 2.0 * cj * lorentz_ratio(d, xi);
            }
            let mut tail_bound = 0.0;
            if let Some(law) = k.asymptotic {
                let j0 = c.len() as f64 + 0.5;
                let x0 = j0.ln();
                let x_hi =
                    x0.max(0.5 * ln_xi.max(0.0)) + 60.0 / (4.0 * law.s + 4.0 * law.n as f64);
                let s_eff = (1.0 - law.exponent()) / 4.0;
                value += integrate_panels(x0, x_hi, 0.5, &mut |x| {
                    hat_point(x, s_eff, lam, ln_xi, 1.0, law.scale)
                });
                let g = |j: f64| 2.0 * law.coefficient(j) * lorentz_ratio(j * j - lam, xi);
                tail_bound = (g(j0 + 1.0) - g(j0)).abs() / 24.0;
            }
            Ok(HatValue { value, tail_bound })
        }
        KernelData::ThetaPower { profile, s, scale } => {
            let p = 1.0 - 4.0 * s;
            let x_enum = HAT_ENUM_CAP.ln();
            // reference magnitude for negligibility cuts: γ-scale · ξ^{−2s}
            let ln_ref = scale.abs().max(1e-300).ln() - 2.0 * s * ln_xi.max(0.0);
            let x_stop = (0.5 * ln_xi.max(0.0)).max(x_enum) + 80.0 / (4.0 * s);
            let mut value = 0.0;
            for (xa, xb) in merge_spans(&theta_segments(profile, 0.0, x_enum)) {
                let (j_lo, j_hi) = span_modes(xa, xb);
                for j in j_lo..=j_hi {
                    let jf = j as f64;
                    let t = profile.eval(jf.ln());
                    if t == 0.0 {
                        continue;
                    }
                    value += 2.0 * scale * t * jf.powf(p) * lorentz_ratio(jf * jf - lam, xi);
                }
            }
            let mut continuum_used = false;
            for (xa, xb) in theta_segments(profile, x_enum, x_stop) {
                // skip segments whose peak magnitude cannot matter
                let xc = (0.5 * ln_xi.max(0.0)).clamp(xa, xb);
                let ln_amp = scale.abs().max(1e-300).ln();
                let ln_peak = if 2.0 * xc >= ln_xi {
                    ln_amp - 4.0 * s * xc
                } else {
                    ln_amp + (4.0 - 4.0 * s) * xc - 2.0 * ln_xi
                };
                if ln_peak < ln_ref - 55.0 {
                    continue;
                }
                continuum_used = true;
                value += integrate_panels(xa, xb, 0.5, &mut |x| {
                    hat_point(x, *s, lam, ln_xi, profile.eval(x), *scale)
                });
            }
            let tail_bound = if continuum_used {
                value.abs() * (-0.5 * 1.0f64.min(2.0 - 2.0 * s) * ln_xi.max(0.0)).exp()
            } else {
                0.0
            };
            Ok(HatValue { value, tail_bound })
        }
    }
}

/// Export `(ξ, K̂(ξ), tail_bound)` rows.
pub fn export_spectrum(k: &KernelSpec, xis: &[f64], path: &std::path::Path) -> Result<()> {
    let mut table = crate::io::CsvTable::new(&["xi", "kernel_hat", "tail_bound"]);
    for &xi in xis {
        let h = kernel_hat(k, xi)?;
        table.push_row(&[xi, h.value, h.tail_bound]);
    }
    table.write(path)
}

// ---------------------------------------------------------------------------
// Chebyshev cache for K̂
// ---------------------------------------------------------------------------

struct HatPanel {
    lo: f64,
    hi: f64,
    coef: Vec<f64>,
}

/// Piecewise-Chebyshev interpolant of `ξ ↦ K̂_λ(ξ)` on dyadic panels
/// `[0,1], [1,2], [2,4], …` — quadratic-form sweeps sample the kernel at
/// hundreds of thousands of frequencies, and `K̂` is analytic on each dyadic
/// octave (its poles sit at distance ≥ j₁² − λ in the complex plane), so a
/// few hundred exact evaluations plus Clenshaw recurrences replace dense
/// direct summation.
pub struct KernelHatTable {
    spec: KernelSpec,
    panels: Vec<HatPanel>,
    /// max relative interpolation error observed at probe points
    pub max_check_error: f64,
}

const CHEB_N: usize = 24;

impl KernelHatTable {
    pub fn build(spec: &KernelSpec, xi_max: f64) -> Result<Self> {
        if !(xi_max > 0.0 && xi_max.is_finite()) {
            return Err(Error::invalid("table range must be positive and finite"));
        }
        let mut edges = vec![0.0, 1.0];
        while *edges.last().unwrap() < xi_max {
            let e = *edges.last().unwrap() * 2.0;
            edges.push(e);
        }
        let mut panels = Vec::with_capacity(edges.len() - 1);
        let mut max_err = 0.0f64;
        for win in edges.windows(2) {
            let (lo, hi) = (win[0], win[1]);
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let nm1 = (CHEB_N - 1) as f64;
            let mut vals = Vec::with_capacity(CHEB_N);
            for kk in 0..CHEB_N {
                let x = (std::f64::consts::PI * kk as f64 / nm1).cos();
                vals.push(kernel_hat(spec, mid + half * x)?.value);
            }
            let mut coef = vec![0.0; CHEB_N];
            for (n, cn) in coef.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (kk, &v) in vals.iter().enumerate() {
                    let w = if kk == 0 || kk == CHEB_N - 1 { 0.5 } else { 1.0 };
                    acc += w * v * (std::f64::consts::PI * n as f64 * kk as f64 / nm1).cos();
                }
                *cn = 2.0 * acc / nm1;
            }
            coef[0] *= 0.5;
            coef[CHEB_N - 1] *= 0.5;
            let panel = HatPanel { lo, hi, coef };
            for frac in [0.21, 0.55, 0.83] {
                let xi = lo + frac * (hi - lo);
                let direct = kernel_hat(spec, xi)?.value;
                let interp = clenshaw(&panel, xi);
                let denom = direct.abs().max(1e-300);
                max_err = max_err.max((interp - direct).abs() / denom);
            }
            panels.push(panel);
        }
        Ok(KernelHatTable { spec: spec.clone(), panels, max_check_error: max_err })
    }

    /// Interpolated `K̂(ξ)`; frequencies beyond the table fall back to direct
    /// evaluation.
    pub fn eval(&self, xi: f64) -> Result<f64> {
        let xi = xi.abs();
        let found = self.panels.binary_search_by(|p| {
            if xi < p.lo {
                std::cmp::Ordering::Greater
            } else if xi >= p.hi {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Equal
            }
        });
        match found {
            Ok(idx) => Ok(clenshaw(&self.panels[idx], xi)),
            Err(_) => Ok(kernel_hat(&self.spec, xi)?.value),
        }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Frequency-domain quadratic form reusing this cache; see
    /// [`quadratic_form_freq`].
    pub fn quadratic_form(&self, u: &ControlSignal, w: &ControlSignal, tau: f64) -> Result<f64> {
        let plan = FreqPlan::prepare(&self.spec, u, w, tau)?;
        plan.evaluate(self)
    }
}

fn clenshaw(panel: &HatPanel, xi: f64) -> f64 {
    let x = (2.0 * xi - (panel.lo + panel.hi)) / (panel.hi - panel.lo);
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &a in panel.coef.iter().rev() {
        let b0 = 2.0 * x * b1 - b2 + a;
        b2 = b1;
        b1 = b0;
    }
    b1 - x * b2
}

// ---------------------------------------------------------------------------
// quadratic form, time domain
// ---------------------------------------------------------------------------

struct PlCells {
    /// (value, slope, width index) per cell, in time order
    cells: Vec<(f64, f64, usize)>,
    widths: Vec<f64>,
}

fn pl_cells(u: &ControlSignal, tau: f64) -> Result<PlCells> {
    let t_end = u.t_end();
    if !(tau >= 0.0 && tau <= t_end * (1.0 + 1e-9) + 1e-12) {
        return Err(Error::invalid(format!(
            "τ = {tau} outside the signal horizon [0, {t_end}]"
        )));
    }
    let dt = u.dt();
    let s = u.samples();
    let mut cells = Vec::new();
    let mut widths = vec![dt];
    let n_full = (((tau / dt) + 1e-9).floor() as usize).min(s.len() - 1);
    for i in 0..n_full {
        cells.push((s[i], (s[i + 1] - s[i]) / dt, 0));
    }
    let rest = tau - n_full as f64 * dt;
    if rest > 1e-12 * t_end.max(1.0) && n_full < s.len() - 1 {
        widths.push(rest);
        cells.push((s[n_full], (s[n_full + 1] - s[n_full]) / dt, 1));
    }
    Ok(PlCells { cells, widths })
}

/// Stable `(e^{−wh}, ∫₀^h e^{−wσ}dσ, ∫₀^h σe^{−wσ}dσ)`.
fn exp_moments(w: f64, h: f64) -> (f64, f64, f64) {
    let x = w * h;
    if x < 1e-3 {
        let e0 = h * (1.0 - x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x / 120.0))));
        let f1 = h * h * (0.5 - x * (1.0 / 3.0 - x * (0.125 - x * (1.0 / 30.0 - x / 144.0))));
        ((-x).exp(), e0, f1)
    } else {
        let ew = (-x).exp();
        let e0 = (1.0 - ew) / w;
        let f1 = (e0 - h * ew) / w;
        (ew, e0, f1)
    }
}

/// Decay-rate × cell-width product above which a mode's memory is below
/// double rounding within a single cell.
const DEAD_EXP: f64 = 40.0;

/// `∫₀^τ u(t) ∫₀^t u(t') K(t−t') dt' dt` — exact for the piecewise-linear
/// signal (descriptor atoms are materialized first; carriers too fast to
/// sample fail over to the frequency-domain form by design).
///
/// Modes with resolvable decay run a per-cell exponential recursion. Modes
/// whose memory dies inside one cell reduce exactly to three signal
/// functionals weighted by inverse-rate moments `M₁, M₂, M₄`, summed exactly
/// below the enumeration cap and continued as integrals of the coefficient
/// law above it.
pub fn quadratic_form_time(k: &KernelSpec, u: &ControlSignal, tau: f64) -> Result<f64> {
    if !u.atoms.is_empty() {
        let dense = u.resampled(u.dt())?;
        return quadratic_form_time(k, &dense, tau);
    }
    let pc = pl_cells(u, tau)?;
    if pc.cells.is_empty() || pc.cells.iter().all(|&(a, b, _)| a == 0.0 && b == 0.0) {
        return Ok(0.0);
    }
    let lam = k.lambda;
    let h_min = pc.widths.iter().cloned().fold(f64::INFINITY, f64::min);
    let w_live_max = DEAD_EXP / h_min;
    let j_live_max = ((w_live_max + lam.max(0.0)).sqrt().floor() as usize).max(1);

    let live: Vec<(f64, f64)> = match &k.data {
        KernelData::Explicit { c } => (0..c.len().min(j_live_max))
            .filter(|&i| c[i] != 0.0)
            .map(|i| (((i + 1) * (i + 1)) as f64 - lam, c[i]))
            .collect(),
        KernelData::ThetaPower { profile, s, scale } => {
            let mut v = Vec::new();
            let segs = theta_segments(profile, 0.0, ((j_live_max as f64) + 0.5).ln());
            for (xa, xb) in merge_spans(&segs) {
                let (j_lo, j_hi) = span_modes(xa, xb);
                for j in j_lo..=j_hi.min(j_live_max as u64) {
                    let jf = j as f64;
                    let t = profile.eval(jf.ln());
                    if t != 0.0 {
                        v.push((jf * jf - lam, scale * t * jf.powf(1.0 - 4.0 * s)));
                    }
                }
            }
            v
        }
    };
    if live.len().saturating_mul(pc.cells.len()) > 3_000_000_000 {
        return Err(Error::Solver(format!(
            "time-domain form too large ({} live modes × {} cells); \
             use the frequency-domain form",
            live.len(),
            pc.cells.len()
        )));
    }

    let contributions: Vec<f64> = live
        .par_iter()
        .map(|&(w, cj)| {
            let params: Vec<(f64, f64, f64)> =
                pc.widths.iter().map(|&h| exp_moments(w, h)).collect();
            let mut hist = 0.0; // ∫₀^{t_i} u(t') e^{−w(t_i−t')} dt'
            let mut q = 0.0;
            for &(a, b, hi) in &pc.cells {
                let h = pc.widths[hi];
                let (ew, e0, f1) = params[hi];
                let c1 = a / w - b / (w * w);
                let c2 = b / w;
                let a1 = a * (h - e0) + b * (0.5 * h * h - f1);
                let a2 = 0.5 * a * h * h + b * h * h * h / 3.0;
                q += hist * (a * e0 + b * f1) + c1 * a1 + c2 * a2;
                hist = ew * hist + c1 * (1.0 - ew) + c2 * h;
            }
            cj * q
        })
        .collect();
    let live_sum: f64 = contributions.iter().sum();

    // dead modes: the exact cell algebra collapses to three functionals
    let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
    for &(a, b, hi) in &pc.cells {
        let h = pc.widths[hi];
        s1 += h * (a * a + a * b * h + b * b * h * h / 3.0);
        s2 += a * (a + b * h) + 0.5 * (b * h) * (b * h);
        s4 += b * b;
    }
    let m = dead_moments(k, j_live_max)?;
    Ok(live_sum + m[0] * s1 - m[1] * s2 + m[2] * s4)
}

/// `M_p = Σ_{j > j_live} c_j/(j²−λ)^p` for `p = 1, 2, 4`.
fn dead_moments(k: &KernelSpec, j_live_max: usize) -> Result<[f64; 3]> {
    let lam = k.lambda;
    let mut m = [0.0f64; 3];
    match &k.data {
        KernelData::Explicit { c } => {
            for i in j_live_max..c.len() {
                if c[i] == 0.0 {
                    continue;
                }
                let w = ((i + 1) * (i + 1)) as f64 - lam;
                m[0] += c[i] / w;
                m[1] += c[i] / (w * w);
                m[2] += c[i] / (w * w * w * w);
            }
            if let Some(law) = k.asymptotic {
                let x0 = (c.len().max(j_live_max) as f64 + 0.5).ln();
                for (idx, p) in [(0usize, 1i32), (1, 2), (2, 4)] {
                    m[idx] += moment_integral(law.scale, law.exponent(), lam, p, x0);
                }
            }
        }
        KernelData::ThetaPower { profile, s, scale } => {
            let pexp = 1.0 - 4.0 * s;
            let x_live = ((j_live_max as f64) + 0.5).ln();
            for (xa, xb) in merge_spans(&theta_segments(profile, x_live, ENUM_CAP.ln())) {
                let (j_lo, j_hi) = span_modes(xa, xb);
                for j in j_lo.max(j_live_max as u64 + 1)..=j_hi {
                    let jf = j as f64;
                    let t = profile.eval(jf.ln());
                    if t == 0.0 {
                        continue;
                    }
                    let cj = scale * t * jf.powf(pexp);
                    let w = jf * jf - lam;
                    m[0] += cj / w;
                    m[1] += cj / (w * w);
                    m[2] += cj / (w * w * w * w);
                }
            }
            let x_from = ENUM_CAP.ln().max(x_live);
            for (idx, p) in [(0usize, 1i32), (1, 2), (2, 4)] {
                let decay = 2.0 * p as f64 + 4.0 * s - 2.0;
                let x_hi = x_from + 90.0 / decay;
                for (xa, xb) in theta_segments(profile, x_from, x_hi) {
                    m[idx] += integrate_panels(xa, xb, 0.5, &mut |x| {
                        scale * profile.eval(x) * moment_point(x, pexp, lam, p)
                    });
                }
            }
        }
    }
    Ok(m)
}

/// `y^{1+pexp}/(y²−λ)^p` in `x = ln y` (log-stable).
fn moment_point(x: f64, pexp: f64, lam: f64, p: i32) -> f64 {
    let corr = (-lam * (-2.0 * x).exp()).ln_1p();
    ((1.0 + pexp - 2.0 * p as f64) * x - p as f64 * corr).exp()
}

fn moment_integral(scale: f64, pexp: f64, lam: f64, p: i32, x0: f64) -> f64 {
    let decay = 2.0 * p as f64 - 1.0 - pexp;
    if decay <= 0.0 {
        return f64::INFINITY;
    }
    let x_hi = x0 + 90.0 / decay;
    scale * integrate_panels(x0, x_hi, 0.5, &mut |x| moment_point(x, pexp, lam, p))
}

// ---------------------------------------------------------------------------
// quadratic form, frequency domain
// ---------------------------------------------------------------------------

/// Frequency-domain evaluation of the same triangular form with the shift
/// absorbed into the signals:
/// `Q = (1/4π) ∫ conj(â) b̂ K̂_λ dξ` where `a = 1_{[0,τ]} e^{λt} u` and
/// `b = 1_{[0,τ]} e^{λt} w`; for `u = w` this equals [`quadratic_form_time`]
/// of `e^{λt}u` against the shifted kernel.
///
/// Sampled content and resolvable carriers are integrated over one contiguous
/// window `[0, Ξ]` with Gauss panels matched to the phase scale `π/(2τ)`.
/// Atoms whose carriers would exceed the panel budget (frequencies up to
/// `e^{k⁴}` arise) contribute through the exact resonant-pair reduction
/// `K̂(ω)·½∫a_i b_j dt` — the Plancherel limit of the window integral, with
/// relative error `O(1/(τω))`; detuned pairs (> half a log-unit apart) are
/// spectrally disjoint and dropped.
pub fn quadratic_form_freq(
    k: &KernelSpec,
    u: &ControlSignal,
    w: &ControlSignal,
    tau: f64,
) -> Result<f64> {
    let plan = FreqPlan::prepare(k, u, w, tau)?;
    let table = KernelHatTable::build(k, plan.x_total.max(1.0))?;
    plan.evaluate(&table)
}

const PANEL_BUDGET: usize = 320_000;

struct ShiftedSide {
    /// (grid index, value, slope) for nonzero full cells of the sampled part
    cells: Vec<(u32, f64, f64)>,
    dt: f64,
    /// (start, value, slope, width) of a τ-clipped trailing cell
    partial: Option<(f64, f64, f64, f64)>,
    atoms_direct: Vec<AtomMeta>,
    atoms_huge: Vec<AtomMeta>,
}

struct FreqPlan {
    a: ShiftedSide,
    b: ShiftedSide,
    lambda: f64,
    tau: f64,
    x_total: f64,
    panel_w: f64,
}

impl FreqPlan {
    fn prepare(k: &KernelSpec, u: &ControlSignal, w: &ControlSignal, tau: f64) -> Result<FreqPlan> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("τ must be positive"));
        }
        let tol = 1e-9 * tau;
        if tau > u.t_end() + tol || tau > w.t_end() + tol {
            return Err(Error::invalid(format!(
                "incompatible durations: τ = {tau} exceeds a signal horizon ({}, {})",
                u.t_end(),
                w.t_end()
            )));
        }
        let lambda = k.lambda();
        let panel_w = std::f64::consts::FRAC_PI_2 / tau;
        let split = |sig: &ControlSignal| -> ShiftedSide {
            let mut direct = Vec::new();
            let mut huge = Vec::new();
            for atom in &sig.atoms {
                let panels_needed = window_cut(atom.omega, tau) / panel_w;
                if !(panels_needed <= PANEL_BUDGET as f64) {
                    huge.push(atom.clone());
                } else {
                    direct.push(atom.clone());
                }
            }
            let dt = sig.dt();
            let s = sig.samples();
            let n = (((tau / dt) + 1e-9).floor() as usize).min(s.len() - 1);
            let mut cells = Vec::new();
            for i in 0..n {
                if s[i] != 0.0 || s[i + 1] != 0.0 {
                    cells.push((i as u32, s[i], (s[i + 1] - s[i]) / dt));
                }
            }
            let t_done = n as f64 * dt;
            let partial = if tau - t_done > 1e-12 && n < s.len() - 1 {
                Some((t_done, s[n], (s[n + 1] - s[n]) / dt, tau - t_done))
            } else {
                None
            };
            ShiftedSide { cells, dt, partial, atoms_direct: direct, atoms_huge: huge }
        };
        let a = split(u);
        let b = split(w);

        // window extent: decay base + every resolvable carrier's cut
        let mut x_total = 240.0 / tau + 4.0 * lambda + 100.0;
        for atom in a.atoms_direct.iter().chain(&b.atoms_direct) {
            x_total = x_total.max(window_cut(atom.omega, tau));
        }
        // crude spectral envelope of the windowed parts: |â| ≤ c0/ξ + c1/ξ²
        let pl_consts = |side: &ShiftedSide, sig: &ControlSignal| -> (f64, f64) {
            let boost = (lambda * tau).exp();
            let pl_at = |t: f64| -> f64 {
                let smp = sig.samples();
                let i = ((t / side.dt).floor() as usize).min(smp.len() - 2);
                let fr = (t - i as f64 * side.dt) / side.dt;
                smp[i] + fr * (smp[i + 1] - smp[i])
            };
            let mut c0 = pl_at(0.0).abs() + pl_at(tau).abs();
            let mut c1 = 0.0;
            let mut prev = 0.0;
            for &(_, _, slope) in &side.cells {
                c1 += (slope - prev).abs();
                prev = slope;
            }
            c1 += prev.abs();
            for atom in &side.atoms_direct {
                let te = atom.tau.min(tau);
                c0 += (atom.amplitude * (atom.omega * te).sin()).abs();
                c1 += atom.amplitude.abs() * atom.omega;
            }
            (c0 * boost, c1 * boost)
        };
        let (c0a, c1a) = pl_consts(&a, u);
        let (c0b, c1b) = pl_consts(&b, w);
        let khat_ref = kernel_hat(k, 1.0)?.value.abs().max(kernel_hat(k, 100.0)?.value.abs());
        if c0a + c1a + c0b + c1b > 0.0 && khat_ref > 1e-200 {
            let l2 = (u.l2_norm_sq().max(1e-300) * w.l2_norm_sq().max(1e-300)).sqrt();
            let scale0 = (0.5 * l2 * khat_ref).max(1e-300);
            let tail = |x: f64| -> Result<f64> {
                let kh = kernel_hat(k, x)?.value.abs();
                Ok((c0a * c0b / x
                    + (c0a * c1b + c1a * c0b) / (2.0 * x * x)
                    + c1a * c1b / (3.0 * x * x * x))
                    * kh
                    / std::f64::consts::PI)
            };
            let x_budget = PANEL_BUDGET as f64 * panel_w;
            while x_total < x_budget && tail(x_total)? > 3e-9 * scale0 {
                x_total *= 1.5;
            }
        }
        Ok(FreqPlan { a, b, lambda, tau, x_total, panel_w })
    }

    fn evaluate(&self, table: &KernelHatTable) -> Result<f64> {
        let n_panels = ((self.x_total / self.panel_w).ceil() as usize).min(2 * PANEL_BUDGET);
        let lambda = self.lambda;
        let tau = self.tau;
        let panel_sums: Vec<Result<f64>> = (0..n_panels)
            .into_par_iter()
            .map(|ip| {
                let lo = ip as f64 * self.panel_w;
                let hi = (lo + self.panel_w).min(self.x_total);
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                let mut acc = 0.0;
                for (&x, &gw) in GL7_X.iter().zip(&GL7_W) {
                    let xi = mid + half * x;
                    let fa = side_ft(&self.a, lambda, tau, xi);
                    let fb = side_ft(&self.b, lambda, tau, xi);
                    acc += gw * (fa.conj() * fb).re * table.eval(xi)?;
                }
                Ok(acc * half)
            })
            .collect();
        let mut direct = 0.0;
        for p in panel_sums {
            direct += p?;
        }
        // the window covers ξ ≥ 0 of an even integrand, so ∫_ℝ = 2·window
        let mut total = direct / (2.0 * std::f64::consts::PI);
        for ai in &self.a.atoms_huge {
            for bj in self.b.atoms_huge.iter().chain(&self.b.atoms_direct) {
                total += huge_pair(table, ai, bj, lambda, tau)?;
            }
        }
        for ai in &self.a.atoms_direct {
            for bj in &self.b.atoms_huge {
                total += huge_pair(table, ai, bj, lambda, tau)?;
            }
        }
        Ok(total)
    }
}

/// Window edge needed to capture an atom at carrier `ω` to ~1e-6 relative;
/// past the resonance the spectral product decays like `ω²/ξ⁴`.
fn window_cut(omega: f64, tau: f64) -> f64 {
    let x3 = 4.0 * omega * omega / (3.0 * tau * 1e-6);
    x3.cbrt().max(1.3 * omega + 100.0 / tau)
}

/// FT of `1_{[0,τ]} e^{λt} (sampled part + resolvable atoms)` at ξ, with
/// the carrier phase advanced incrementally along the uniform grid.
fn side_ft(side: &ShiftedSide, lambda: f64, tau: f64, xi: f64) -> Complex64 {
    let z = Complex64::new(lambda, -xi);
    let mut acc = Complex64::new(0.0, 0.0);
    if !side.cells.is_empty() {
        let h = side.dt;
        let step = (z * h).exp();
        let e0 = ec0(z * h) * h;
        let e1 = ec1(z * h) * (h * h);
        let mut phase = Complex64::new(1.0, 0.0);
        let mut at = u32::MAX; // force initial sync
        let mut since_sync: u32 = 0;
        for &(ic, a, b) in &side.cells {
            if ic != at || since_sync >= 4096 {
                phase = (z * (ic as f64 * h)).exp();
                since_sync = 0;
            }
            acc += phase * (e0 * a + e1 * b);
            phase *= step;
            at = ic + 1;
            since_sync += 1;
        }
    }
    if let Some((t0, a, b, hc)) = side.partial {
        acc += (z * t0).exp() * (ec0(z * hc) * (a * hc) + ec1(z * hc) * (b * hc * hc));
    }
    for atom in &side.atoms_direct {
        acc += atom_ft_shifted(atom, lambda, tau, xi);
    }
    acc
}

/// FT of `1_{[0,min(τ,τ_a)]} A e^{(λ−λ_a)t} sin(ω t)` at ξ.
fn atom_ft_shifted(atom: &AtomMeta, lambda: f64, tau: f64, xi: f64) -> Complex64 {
    let te = atom.tau.min(tau);
    let z = Complex64::new(lambda - atom.lambda, -xi);
    let zp = z + Complex64::new(0.0, atom.omega);
    let zm = z - Complex64::new(0.0, atom.omega);
    Complex64::new(0.0, -0.5) * atom.amplitude * te * (ec0(zp * te) - ec0(zm * te))
}

/// Exact `∫₀^{min(τ,·)} a_i(t) b_j(t) e^{(2λ−λ_i−λ_j)t} dt` for two carrier
/// atoms, via product-to-sum: `sin α sin β = ½[cos(α−β) − cos(α+β)]`.
fn atom_cross_shifted(ai: &AtomMeta, bj: &AtomMeta, lambda: f64, tau: f64) -> f64 {
    let te = tau.min(ai.tau).min(bj.tau);
    let rho = 2.0 * lambda - ai.lambda - bj.lambda;
    let e = |wf: f64| (ec0(Complex64::new(rho, wf) * te) * te).re;
    0.5 * ai.amplitude * bj.amplitude * (e(ai.omega - bj.omega) - e(ai.omega + bj.omega))
}

/// Resonant-pair value `K̂(ω)·½·∫ a_i b_j` for carriers the window cannot
/// resolve.
fn huge_pair(
    table: &KernelHatTable,
    ai: &AtomMeta,
    bj: &AtomMeta,
    lambda: f64,
    tau: f64,
) -> Result<f64> {
    let detune = (ai.omega.ln() - bj.omega.ln()).abs();
    if detune > 0.5 {
        return Ok(0.0);
    }
    let omega = (0.5 * (ai.omega.ln() + bj.omega.ln())).exp();
    let kh = table.eval(omega)?;
    Ok(0.5 * kh * atom_cross_shifted(ai, bj, lambda, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{build_periodic_theta, build_sparse_theta_family, plateau_center};
    use approx::assert_relative_eq;

    const GAMMA_FROZEN: [(f64, f64); 4] = [
        (0.2, 1.3361991651444939),
        (0.25, 1.1107207345395916),
        (0.4, 0.8258164997985310),
        (0.5, std::f64::consts::FRAC_PI_4),
    ];

    #[test]
    fn gamma_matches_reflection_closed_form() {
        for i in 1..19 {
            let s = i as f64 * 0.05;
            let closed = std::f64::consts::PI / (4.0 * (std::f64::consts::PI * s).sin());
            assert_relative_eq!(gamma_s(s).unwrap(), closed, max_relative = 1e-12);
        }
        for (s, v) in GAMMA_FROZEN {
            assert_relative_eq!(gamma_s(s).unwrap(), v, max_relative = 1e-12);
        }
        assert!(gamma_s(0.0).is_err());
        assert!(gamma_s(1.0).is_err());
    }

    #[test]
    fn plateau_scale_frozen_values() {
        let cases = [
            (0.2, 2.1580637815567193),
            (0.25, 1.6976378608111915),
            (0.4, 1.0963333215633153),
        ];
        for (s, want) in cases {
            let l = plateau_scale(s, 1.0 / 6.0).unwrap();
            assert_relative_eq!(l, want, epsilon = 1e-9);
            // definitional residual: mass outside [−L, L] is εγ
            let g = gamma_s(s).unwrap();
            let covered = integrate_panels(-l, l, 0.5, &mut |x| plateau_weight(s, x));
            assert_relative_eq!(g - covered, g / 6.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn g_factor_full_plateau_recovers_gamma() {
        // one block whose plateau covers the whole numerically visible window
        let wide = BlockProfile {
            l_scale: 2100.0,
            blocks: vec![(-1.5, 1)],
            kind: ProfileKind::Sparse,
            index: 0,
            horizon: 0,
        };
        for s in [0.2, 0.25, 0.4] {
            assert_relative_eq!(
                g_factor(s, &wide, 0.0).unwrap(),
                gamma_s(s).unwrap(),
                max_relative = 1e-12
            );
        }
        let empty = BlockProfile {
            l_scale: 1.0,
            blocks: vec![],
            kind: ProfileKind::Sparse,
            index: 0,
            horizon: 0,
        };
        assert_eq!(g_factor(0.25, &empty, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn g_factor_periodic_plateau_within_two_eps() {
        let eps = 1.0 / 6.0;
        for s in [0.2, 0.25, 0.4] {
            let l = plateau_scale(s, eps).unwrap();
            let theta = build_periodic_theta(l).unwrap();
            let gamma = gamma_s(s).unwrap();
            for sign in [1i8, -1] {
                let center = plateau_center(&theta, sign, 0.0).unwrap();
                let g = g_factor(s, &theta, 2.0 * center).unwrap();
                assert!(
                    (g - sign as f64 * gamma).abs() <= 2.0 * eps * gamma,
                    "s={s} sign={sign}: G={g} γ={gamma}"
                );
            }
        }
    }

    #[test]
    fn gamma_pm_frozen_values() {
        let cases = [
            (0.2, 1.2718356545047136, 1.2738078803739632),
            (0.25, 1.0566524202413899, 1.0583982344306720),
            (0.4, 0.7893852259619364, 0.7902507089262139),
        ];
        for (s, want_p, want_m) in cases {
            let l = plateau_scale(s, 1.0 / 6.0).unwrap();
            let (gp, gm) = gamma_pm(s, l).unwrap();
            assert_relative_eq!(gp, want_p, epsilon = 1e-10);
            assert_relative_eq!(gm, want_m, epsilon = 1e-10);
            let g = gamma_s(s).unwrap();
            for v in [gp, gm] {
                assert!(v <= g && v >= (1.0 - 2.0 / 6.0) * g, "s={s}: {v} vs γ={g}");
            }
        }
    }

    #[test]
    fn single_mode_kernel_closed_forms() {
        let k = KernelSpec::explicit(vec![1.0]).unwrap();
        for sigma in [-2.0, -0.3, 0.0, 0.1, 1.0, 5.0] {
            assert_relative_eq!(
                kernel_eval(&k, sigma, 0).unwrap(),
                (-sigma.abs()).exp(),
                epsilon = 1e-15
            );
        }
        // the second derivative of e^{−σ} is itself
        assert_relative_eq!(kernel_eval(&k, 1.0, 2).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        for xi in [0.0, 0.5, 3.0, 100.0] {
            assert_relative_eq!(
                kernel_hat(&k, xi).unwrap().value,
                2.0 / (1.0 + xi * xi),
                epsilon = 1e-14
            );
        }
        // a shift moves the pole to 1 − λ
        let ks = KernelSpec::explicit(vec![1.0]).unwrap().with_shift(0.3).unwrap();
        let d = 1.0 - 0.3;
        assert_relative_eq!(
            kernel_hat(&ks, 2.0).unwrap().value,
            2.0 * d / (d * d + 4.0),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            kernel_eval(&ks, 1.5, 0).unwrap(),
            (-d * 1.5f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn shift_admissibility_checked_against_first_active_mode() {
        assert!(KernelSpec::explicit(vec![1.0]).unwrap().with_shift(0.49).is_ok());
        assert!(KernelSpec::explicit(vec![1.0]).unwrap().with_shift(0.5).is_err());
        // first active mode 3 → λ < 4.5
        let k = KernelSpec::explicit(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(k.clone().with_shift(4.4).is_ok());
        assert!(k.with_shift(4.6).is_err());
        assert!(KernelSpec::explicit(vec![1.0]).unwrap().with_shift(-0.1).is_err());
    }

    fn benchmark_kernel(j_max: usize) -> KernelSpec {
        // c_j = −8π(2+(−1)^j)/j⁶
        let c = (1..=j_max)
            .map(|j| {
                let sgn = if j % 2 == 0 { 1.0 } else { -1.0 };
                -8.0 * std::f64::consts::PI * (2.0 + sgn) / (j as f64).powi(6)
            })
            .collect();
        KernelSpec::explicit(c).unwrap()
    }

    #[test]
    fn benchmark_kernel_long_sum_agreement() {
        let k = benchmark_kernel(1_000_000);
        // frozen million-term value at σ = 1
        assert_relative_eq!(
            kernel_eval(&k, 1.0, 0).unwrap(),
            -9.2674006587478338,
            max_relative = 1e-12
        );
        // independent direct summation without the early-exit logic
        let mut direct = 0.0;
        for j in (1..=1_000_000u64).rev() {
            let sgn = if j % 2 == 0 { 1.0 } else { -1.0 };
            let cj = -8.0 * std::f64::consts::PI * (2.0 + sgn) / (j as f64).powi(6);
            let e = -((j * j) as f64);
            direct += cj * if e < -745.0 { 0.0 } else { e.exp() };
        }
        assert_relative_eq!(kernel_eval(&k, 1.0, 0).unwrap(), direct, max_relative = 1e-12);
        // σ = 0 → Σ c_j; ξ = 0 → 2Σ c_j/j²
        let sum: f64 = (1..=1_000_000usize).map(|j| k.coefficient(j)).sum();
        assert_relative_eq!(kernel_eval(&k, 0.0, 0).unwrap(), sum, max_relative = 1e-13);
        let sum2: f64 =
            (1..=1_000_000usize).map(|j| 2.0 * k.coefficient(j) / ((j * j) as f64)).sum();
        assert_relative_eq!(kernel_hat(&k, 0.0).unwrap().value, sum2, max_relative = 1e-13);
    }

    #[test]
    fn divergent_derivative_is_refused() {
        // c_j = j^{−2}: Σ j⁴c_j diverges; the truncation must not pretend
        let c: Vec<f64> = (1..=1000).map(|j| (j as f64).powi(-2)).collect();
        let k = KernelSpec::explicit(c).unwrap();
        match kernel_eval(&k, 0.0, 2) {
            Err(Error::TailError(_)) => {}
            other => panic!("expected divergent-derivative refusal, got {other:?}"),
        }
        // with decay j^{−10} the same order converges
        let c: Vec<f64> = (1..=1000).map(|j| (j as f64).powi(-10)).collect();
        let k = KernelSpec::explicit(c).unwrap();
        assert!(kernel_eval(&k, 0.0, 2).is_ok());
    }

    #[test]
    fn power_law_hat_approaches_gamma_scaling() {
        let s = 0.25;
        let k = KernelSpec::power_law(1.0, s, 100_000).unwrap();
        let gamma = gamma_s(s).unwrap();
        let xi = 1.0e4_f64;
        let scaled = xi.powf(2.0 * s) * kernel_hat(&k, xi).unwrap().value / 2.0;
        assert!((scaled - gamma).abs() < 0.05 * gamma, "scaled = {scaled}, γ = {gamma}");
    }

    #[test]
    fn theta_power_hat_matches_brute_sum_and_tracks_window_factor() {
        let s = 0.35;
        let theta = build_periodic_theta(1.5).unwrap();
        let k = KernelSpec::theta_power(theta.clone(), s).unwrap();
        for xi in [0.0, 7.0, 300.0] {
            let mut brute = 0.0;
            for j in (1..=3_000_000u64).rev() {
                let t = theta.eval((j as f64).ln());
                if t != 0.0 {
                    let jf = j as f64;
                    brute += 2.0 * t * jf.powf(1.0 - 4.0 * s) * (jf * jf)
                        / ((jf * jf) * (jf * jf) + xi * xi);
                }
            }
            assert_relative_eq!(kernel_hat(&k, xi).unwrap().value, brute, max_relative = 1e-6);
        }
        // far beyond enumeration: K̂(ξ)·ξ^{2s}/2 equals the window factor at
        // ln ω = ln ξ (the continuum identity is exact there)
        let ln_omega = 4.0 * 12.0 * 1.5 + 2.0 * 3.0 * 1.5_f64;
        let xi = ln_omega.exp();
        let h = kernel_hat(&k, xi).unwrap().value;
        let scaled = (2.0 * s * ln_omega).exp() * h / 2.0;
        let g = g_factor(s, &theta, ln_omega).unwrap();
        assert_relative_eq!(scaled, g, max_relative = 1e-6);
    }

    #[test]
    fn hat_table_matches_direct_evaluation() {
        let k = benchmark_kernel(5000);
        let table = KernelHatTable::build(&k, 2.0e4).unwrap();
        assert!(table.max_check_error < 1e-9, "{}", table.max_check_error);
        for xi in [0.0, 0.37, 1.9, 55.0, 1.3e3, 1.9e4] {
            let direct = kernel_hat(&k, xi).unwrap().value;
            assert_relative_eq!(table.eval(xi).unwrap(), direct, max_relative = 1e-8);
        }
        // beyond the covered range the cache falls back to direct evaluation
        let far = table.eval(1.0e6).unwrap();
        assert_relative_eq!(far, kernel_hat(&k, 1.0e6).unwrap().value, max_relative = 1e-12);
    }

    #[test]
    fn quadratic_form_time_box_closed_form() {
        let k = KernelSpec::explicit(vec![1.0]).unwrap();
        let u = ControlSignal::from_fn(1.0, 2000, |_| 1.0).unwrap();
        // ∫₀¹∫₀^t e^{−(t−t')} dt' dt = e^{−1}
        assert_relative_eq!(
            quadratic_form_time(&k, &u, 1.0).unwrap(),
            (-1.0f64).exp(),
            max_relative = 1e-13
        );
        let zero = ControlSignal::zero(1.0, 16).unwrap();
        assert_eq!(quadratic_form_time(&k, &zero, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_form_time_matches_brute_double_integral() {
        let c: Vec<f64> = (1..=50).map(|j| (j as f64).powi(-3)).collect();
        let k = KernelSpec::explicit(c.clone()).unwrap();
        let n = 160;
        let u = ControlSignal::from_fn(1.0, n, |t| (3.1 * t).sin() + 0.4 * (11.0 * t).cos() - 0.2)
            .unwrap();
        let got = quadratic_form_time(&k, &u, 1.0).unwrap();
        let kernel = |sigma: f64| -> f64 {
            c.iter()
                .enumerate()
                .map(|(i, cj)| cj * (-(((i + 1) * (i + 1)) as f64) * sigma).exp())
                .sum()
        };
        let h = 1.0 / n as f64;
        let s = u.samples();
        let lin = |i: usize, t: f64| -> f64 {
            let t0 = i as f64 * h;
            s[i] + (s[i + 1] - s[i]) / h * (t - t0)
        };
        let mut brute = 0.0;
        for i in 0..n {
            for ip in 0..i {
                brute += gl15_panel(i as f64 * h, (i + 1) as f64 * h, &mut |t| {
                    lin(i, t)
                        * gl15_panel(ip as f64 * h, (ip + 1) as f64 * h, &mut |tp| {
                            lin(ip, tp) * kernel(t - tp)
                        })
                });
            }
            brute += gl15_panel(i as f64 * h, (i + 1) as f64 * h, &mut |t| {
                lin(i, t) * gl15_panel(i as f64 * h, t, &mut |tp| lin(i, tp) * kernel(t - tp))
            });
        }
        assert_relative_eq!(got, brute, max_relative = 1e-9);
    }

    #[test]
    fn quadratic_form_scaling_and_positivity() {
        let c: Vec<f64> = (1..=40).map(|j| (j as f64).powi(-2)).collect();
        let k = KernelSpec::explicit(c).unwrap();
        let u = ControlSignal::from_fn(0.8, 300, |t| (7.0 * t).sin() - 0.3 * t).unwrap();
        let base = quadratic_form_time(&k, &u, 0.8).unwrap();
        let scaled = quadratic_form_time(&k, &u.scaled(-1.7), 0.8).unwrap();
        assert_relative_eq!(scaled, 1.7 * 1.7 * base, max_relative = 1e-12);
        // nonnegative coefficients ⇒ K̂ ≥ 0 ⇒ the symmetric form is ≥ 0
        assert!(base >= -1e-12);
    }

    #[test]
    fn dead_zone_split_is_consistent() {
        // a coarse grid pushes almost every mode into the moment route; a
        // fine grid resolves them all through the recursion
        let c: Vec<f64> = (1..=2000).map(|j| (j as f64).powi(-3)).collect();
        let k = KernelSpec::explicit(c).unwrap();
        let f = |t: f64| (2.0 * t).sin() + 0.5;
        let coarse = ControlSignal::from_fn(1.0, 50, f).unwrap();
        let fine = ControlSignal::from_fn(1.0, 12800, f).unwrap();
        let qc = quadratic_form_time(&k, &coarse, 1.0).unwrap();
        let qf = quadratic_form_time(&k, &fine, 1.0).unwrap();
        // both are exact for their own PL representation; the representations
        // differ by O(dt²)
        assert_relative_eq!(qc, qf, max_relative = 2e-3);
        // τ off the grid exercises the clipped trailing cell
        let q_partial = quadratic_form_time(&k, &fine, 0.77713).unwrap();
        let q_grid = quadratic_form_time(&k, &fine, 0.7771875).unwrap();
        assert_relative_eq!(q_partial, q_grid, max_relative = 1e-3);
    }

    #[test]
    fn theta_power_quadratic_form_matches_explicit_enumeration() {
        let s = 0.45;
        let theta = build_periodic_theta(1.2).unwrap();
        let k = KernelSpec::theta_power(theta.clone(), s).unwrap();
        // explicit twin enumerated far past every live mode
        let c: Vec<f64> = (1..=500_000)
            .map(|j| theta.eval((j as f64).ln()) * (j as f64).powf(1.0 - 4.0 * s))
            .collect();
        let ke = KernelSpec::explicit(c).unwrap();
        let u = ControlSignal::from_fn(0.5, 400, |t| (9.0 * t).sin() * (1.0 - t)).unwrap();
        let qt = quadratic_form_time(&k, &u, 0.5).unwrap();
        let qe = quadratic_form_time(&ke, &u, 0.5).unwrap();
        assert_relative_eq!(qt, qe, max_relative = 1e-9);
    }

    #[test]
    fn time_and_frequency_domains_agree_on_resolvable_atom() {
        let k = benchmark_kernel(400);
        let omega = 50.0;
        let atom = ControlSignal::from_atom_descriptors(
            1.0,
            8,
            vec![AtomMeta { omega, tau: 1.0, lambda: 0.0, amplitude: 1.0 }],
        )
        .unwrap();
        let dense = atom.resampled(0.05 / omega).unwrap();
        let qt = quadratic_form_time(&k, &dense, 1.0).unwrap();
        let qf = quadratic_form_freq(&k, &dense, &dense, 1.0).unwrap();
        assert!(
            (qt - qf).abs() <= 1e-6 * qt.abs().max(1e-12),
            "time {qt} vs freq {qf}"
        );
        // the descriptor route (exact carrier) stays within the PL bias
        let qa = quadratic_form_freq(&k, &atom, &atom, 1.0).unwrap();
        assert_relative_eq!(qa, qt, max_relative = 2e-3);
    }

    #[test]
    fn shifted_form_agrees_with_weighted_time_evaluation() {
        let lam = 0.3;
        let k = KernelSpec::explicit(vec![0.7, 0.2, 0.05]).unwrap().with_shift(lam).unwrap();
        let u = ControlSignal::from_fn(1.0, 6000, |t| (t * (1.0 - t)) * (5.0 * t).cos()).unwrap();
        let shifted = ControlSignal::from_fn(1.0, 6000, |t| {
            (lam * t).exp() * (t * (1.0 - t)) * (5.0 * t).cos()
        })
        .unwrap();
        let qt = quadratic_form_time(&k, &shifted, 1.0).unwrap();
        let qf = quadratic_form_freq(&k, &u, &u, 1.0).unwrap();
        assert_relative_eq!(qt, qf, max_relative = 1e-6);
        // symmetry of the bilinear form
        let w = ControlSignal::from_fn(1.0, 6000, |t| (2.0 * t).sin()).unwrap();
        let quw = quadratic_form_freq(&k, &u, &w, 1.0).unwrap();
        let qwu = quadratic_form_freq(&k, &w, &u, 1.0).unwrap();
        assert_relative_eq!(quw, qwu, max_relative = 1e-10);
    }

    #[test]
    fn huge_carrier_uses_resonant_reduction() {
        // sparse family member whose support sits near e^{58}; its resonant
        // carrier ω = e^{125.6} is far beyond any time grid
        let l = 1.6976378608111915;
        let fam = build_sparse_theta_family(l, 1, 4).unwrap();
        let theta1 = fam[1].clone();
        let center = plateau_center(&theta1, 1, 0.0).unwrap();
        let ln_omega = 2.0 * center;
        let s = 0.25;
        let lam = 9.0 / 8.0;
        let k = KernelSpec::theta_power(theta1.clone(), s).unwrap().with_shift(lam).unwrap();
        let omega = ln_omega.exp();
        assert!(omega > 1e30);
        let tau = 0.25;
        let atom = ControlSignal::from_atom_descriptors(
            tau,
            8,
            vec![AtomMeta { omega, tau, lambda: 0.0, amplitude: 1.0 }],
        )
        .unwrap();
        let q = quadratic_form_freq(&k, &atom, &atom, tau).unwrap();
        // K̂(ω) = 2ω^{−2s}·G exactly in the continuum regime, so
        // Q = K̂(ω)·½·∫(sin ωt)²e^{2λt}dt
        let g = g_factor(s, &theta1, ln_omega).unwrap();
        let cross = {
            let rho = 2.0 * lam;
            let e = |wf: f64| (ec0(Complex64::new(rho, wf) * tau) * tau).re;
            0.5 * (e(0.0) - e(2.0 * omega))
        };
        let predict = (-2.0 * s * ln_omega).exp() * g * cross;
        assert_relative_eq!(q, predict, max_relative = 1e-8);
        assert!(g > (1.0 - 2.0 / 6.0) * gamma_s(s).unwrap());
    }

    #[test]
    fn benchmark_coefficient_extraction() {
        let spec = NonlinearitySpec::benchmark_affine(32).unwrap();
        let k = coefficients(&spec, 0, 2000, 1e-6).unwrap();
        assert_relative_eq!(k.coefficient(1), -8.0 * std::f64::consts::PI, max_relative = 1e-8);
        for j in 2..=10usize {
            let sgn = if j % 2 == 0 { 1.0 } else { -1.0 };
            let want = -8.0 * std::f64::consts::PI * (2.0 + sgn) / (j as f64).powi(6);
            assert_relative_eq!(k.coefficient(j), want, max_relative = 1e-6);
        }
        let a = drift_coefficient(&k, 1).unwrap();
        assert_relative_eq!(a, -std::f64::consts::PI.powi(5) / 10.0, max_relative = 1e-4);
        // a truncation beyond the stored spectral depth errors out
        assert!(coefficients(&spec, 0, 100_000, 1e-6).is_err());
    }

    #[test]
    fn closed_form_coefficient_families() {
        // bare power law at s = 1/4: c_2 = 2^{1−4s} = 1
        let k = KernelSpec::power_law(1.0, 0.25, 100).unwrap();
        assert_relative_eq!(k.coefficient(2), 1.0, epsilon = 1e-15);
        // single-profile spec: c_j = Θ(ln j)·j^{1−4s}
        let theta = build_periodic_theta(1.4).unwrap();
        let s = 0.3;
        let spec = NonlinearitySpec::magic_single(theta.clone(), s, 16).unwrap();
        let kk = coefficients(&spec, 0, 16, 1e-9).unwrap();
        for j in 1..=16usize {
            let want = theta.eval((j as f64).ln()) * (j as f64).powf(1.0 - 4.0 * s);
            assert_relative_eq!(kk.coefficient(j), want, epsilon = 1e-13);
        }
        // a linearly reachable target has a zero kernel
        let kz = coefficients(&spec, 3, 16, 1e-9).unwrap();
        assert!((1..=16).all(|j| kz.coefficient(j) == 0.0));
        // family spec: the scale carries the family prefactor and the data
        // points at the right member
        let fam = build_sparse_theta_family(1.3, 1, 4).unwrap();
        let spec2 = NonlinearitySpec::magic_infinite(fam.clone(), s, 7.5, 8).unwrap();
        let k1 = coefficients(&spec2, 3, 8, 1e-9).unwrap();
        match k1.data() {
            KernelData::ThetaPower { profile, s: ss, scale } => {
                assert_eq!(*scale, 7.5);
                assert_eq!(*ss, s);
                assert_eq!(profile.inf_supp(), fam[1].inf_supp());
                assert_eq!(profile.blocks, fam[1].blocks);
            }
            other => panic!("expected lazy family kernel, got {other:?}"),
        }
        // even targets are reachable → zero kernel; members past the family
        // horizon are refused
        let keven = coefficients(&spec2, 2, 8, 1e-9).unwrap();
        assert!((1..=8).all(|j| keven.coefficient(j) == 0.0));
        assert!(coefficients(&spec2, 5, 8, 1e-9).is_err());
    }

    #[test]
    fn spectrum_export_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spectrum.csv");
        let k = KernelSpec::explicit(vec![1.0, 0.5]).unwrap();
        export_spectrum(&k, &[0.0, 1.0, 10.0], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("xi,kernel_hat,tail_bound\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
