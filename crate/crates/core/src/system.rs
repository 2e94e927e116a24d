//! Nonlinearity specifications and their spectral action.
//!
//! Three families drive the scalar-input heat system `∂_t z − ∂_xx z = u Γ[z]`
//! on `(0, π)` with Neumann conditions, expanded in the cosine basis
//! `φ_0 = 1/√π`, `φ_k = √(2/π) cos(kx)`:
//!
//! * **affine** — `Γ[z] = μ + λ·z` with `μ, λ` given on a physical grid; the
//!   product acts through a discrete cosine transform pair;
//! * **magic single** — a closed-form spectral rule whose constant mode is fed
//!   by a sign-profile-weighted sum of all other modes and receives nothing
//!   from the control directly (one lost direction);
//! * **magic infinite** — the analogous rule in which every odd mode is lost
//!   and recovered through its own sign profile acting on the even modes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::profiles::BlockProfile;
use crate::simulate::SpectralField;

/// Spectral description of a nonlinearity `Γ` on a fixed truncation.
#[derive(Debug, Clone)]
pub struct NonlinearitySpec {
    n_modes: usize,
    /// `⟨Γ[0], φ_k⟩ = ⟨μ, φ_k⟩` for `k = 0..=N`.
    mu_coeffs: Vec<f64>,
    /// `⟨μ, φ_q⟩` to the full stored depth (affine only; `= mu_coeffs` else).
    mu_modes_deep: Vec<f64>,
    variant: Variant,
}

#[derive(Debug, Clone)]
enum Variant {
    Affine {
        /// `⟨λ, φ_q⟩` for `q = 0..=Q` (deep storage for kernel coefficients).
        lambda_modes: Vec<f64>,
        /// λ band-limited to `2N`, sampled on the simulation midpoint grid.
        sim_grid: Vec<f64>,
        /// `φ_k(x_i)` on the simulation grid, row-major `(N+1) × M`.
        cos_table: Vec<f64>,
    },
    MagicSingle {
        theta: BlockProfile,
        s: f64,
    },
    MagicInfinite {
        family: Vec<BlockProfile>,
        s: f64,
        c_theta: f64,
    },
}

/// Serializable summary (variant, parameters, leading coefficients).
#[derive(Debug, Clone, Serialize)]
pub struct SpecSummary {
    pub variant: &'static str,
    pub n_modes: usize,
    pub s: Option<f64>,
    pub c_theta: Option<f64>,
    pub mu_coeffs: Vec<f64>,
    pub deep_mode_count: usize,
}

/// Diagnostics from [`check_regularity`].
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    /// max over sampled pairs of `‖Γ[z₁] − Γ[z₂]‖_{H⁻¹} / ‖z₁ − z₂‖_{H¹}`.
    pub lipschitz_ratio_max: f64,
    /// max over sampled pairs of the affinity defect
    /// `‖Γ[z₁+z₂] − Γ[z₁] − Γ[z₂] + Γ[0]‖_{L²}` (0 for every variant here).
    pub second_difference_max: f64,
    /// `⟨Γ[0], φ_0⟩` (vanishes exactly when the constant direction is lost).
    pub gamma0_mode0: f64,
}

/// Midpoint cosine-quadrature grid on `(0, π)`: `x_i = (i + ½)π/M`.
/// Discrete orthogonality makes the rule exact for band-limited products.
pub fn midpoint_grid(m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| (i as f64 + 0.5) * std::f64::consts::PI / m as f64)
        .collect()
}

/// Basis value `φ_k(x)` (`1/√π` for `k = 0`, `√(2/π) cos(kx)` else).
pub fn basis_value(k: usize, x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    if k == 0 {
        1.0 / pi.sqrt()
    } else {
        (2.0 / pi).sqrt() * (k as f64 * x).cos()
    }
}

/// All cosine-basis coefficients `⟨f, φ_q⟩`, `q = 0..=q_max`, of a function
/// sampled on the midpoint grid, via the three-term cosine recurrence per
/// grid point (deterministic chunked accumulation).
pub fn mode_coefficients(grid: &[f64], q_max: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let m = grid.len();
    let pi = std::f64::consts::PI;
    let chunks: Vec<Vec<f64>> = grid
        .par_chunks(2048)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = vec![0.0f64; q_max + 1];
            for (ii, &f) in chunk.iter().enumerate() {
                let i = ci * 2048 + ii;
                let x = (i as f64 + 0.5) * pi / m as f64;
                let c1 = x.cos();
                let mut c_prev = 1.0; // cos(0·x)
                let mut c_cur = c1; // cos(1·x)
                acc[0] += f;
                if q_max >= 1 {
                    acc[1] += f * c_cur;
                }
                for q in 2..=q_max {
                    let c_next = 2.0 * c1 * c_cur - c_prev;
                    acc[q] += f * c_next;
                    c_prev = c_cur;
                    c_cur = c_next;
                }
            }
            acc
        })
        .collect();
    let mut raw = vec![0.0f64; q_max + 1];
    for chunk in chunks {
        for (r, v) in raw.iter_mut().zip(chunk) {
            *r += v;
        }
    }
    let w = pi / m as f64;
    raw.iter()
        .enumerate()
        .map(|(q, &v)| {
            let norm = if q == 0 { 1.0 / pi.sqrt() } else { (2.0 / pi).sqrt() };
            v * w * norm
        })
        .collect()
}

impl NonlinearitySpec {
    /// Affine specification from physical-space samples of `μ` and `λ` on the
    /// midpoint grid (both the same length `M ≥ 4N`). Deep cosine modes are
    /// stored to depth `min(M/4, 16384)` for kernel-coefficient extraction.
    pub fn make_affine(mu_grid: &[f64], lambda_grid: &[f64], n_modes: usize) -> Result<Self> {
        let m = mu_grid.len();
        if m != lambda_grid.len() {
            return Err(Error::invalid("μ and λ grids must have the same length"));
        }
        if n_modes == 0 || m < 4 * n_modes {
            return Err(Error::invalid(format!(
                "grid with {m} points under-resolves {n_modes} modes (need ≥ 4N); \
                 aliasing would corrupt the coefficients"
            )));
        }
        let q_store = (m / 4).min(16384);
        let mu_modes_deep = mode_coefficients(mu_grid, q_store);
        let lambda_modes = mode_coefficients(lambda_grid, q_store);
        Self::assemble_affine(mu_modes_deep, lambda_modes, n_modes)
    }

    /// Affine specification directly from cosine-basis coefficients
    /// `⟨μ, φ_q⟩` and `⟨λ, φ_q⟩` (index 0 = constant mode).
    pub fn make_affine_from_modes(
        mu_modes: &[f64],
        lambda_modes: &[f64],
        n_modes: usize,
    ) -> Result<Self> {
        if mu_modes.len() <= n_modes || lambda_modes.len() <= 2 * n_modes {
            return Err(Error::invalid(
                "need μ modes beyond N and λ modes beyond 2N for an exact product",
            ));
        }
        Self::assemble_affine(mu_modes.to_vec(), lambda_modes.to_vec(), n_modes)
    }

    fn assemble_affine(
        mu_modes_deep: Vec<f64>,
        lambda_modes: Vec<f64>,
        n_modes: usize,
    ) -> Result<Self> {
        let m_sim = (8 * n_modes).max(64);
        let grid_x = midpoint_grid(m_sim);
        // λ truncated to modes ≤ 2N: exact for products λ_{≤2N}·z_{≤N} → modes ≤ N
        let q_sim = (2 * n_modes).min(lambda_modes.len() - 1);
        let sim_grid: Vec<f64> = grid_x
            .iter()
            .map(|&x| {
                (0..=q_sim)
                    .map(|q| lambda_modes[q] * basis_value(q, x))
                    .sum()
            })
            .collect();
        let mut cos_table = Vec::with_capacity((n_modes + 1) * m_sim);
        for k in 0..=n_modes {
            for &x in &grid_x {
                cos_table.push(basis_value(k, x));
            }
        }
        let mu_coeffs = mu_modes_deep[..=n_modes].to_vec();
        Ok(NonlinearitySpec {
            n_modes,
            mu_coeffs,
            mu_modes_deep,
            variant: Variant::Affine { lambda_modes, sim_grid, cos_table },
        })
    }

    /// The polynomial benchmark pair: `μ = x² − π²/3` (coefficients decaying
    /// like `j⁻²`) and `λ = x⁴/4 − πx³/3 + π⁴/30` (like `j⁻⁴`), both with zero
    /// mean so the constant direction is lost. The induced drift coefficient
    /// is `Σ j² c_j = −π⁵/10`.
    pub fn benchmark_affine(n_modes: usize) -> Result<Self> {
        let pi = std::f64::consts::PI;
        let m = 16384;
        let grid = midpoint_grid(m);
        let mu: Vec<f64> = grid.iter().map(|&x| x * x - pi * pi / 3.0).collect();
        let lam: Vec<f64> = grid
            .iter()
            .map(|&x| x.powi(4) / 4.0 - pi * x.powi(3) / 3.0 + pi.powi(4) / 30.0)
            .collect();
        Self::make_affine(&mu, &lam, n_modes)
    }

    /// Single-lost-direction closed-form specification: the control feeds all
    /// modes `k ≥ 1` with strength `k^{1/2−3s}` and the constant mode only
    /// through the profile-weighted retroaction `Σ_j Θ(ln j) j^{1/2−s} z_j`.
    pub fn magic_single(theta: BlockProfile, s: f64, n_modes: usize) -> Result<Self> {
        if !(0.0 < s && s < 1.0) {
            return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
        }
        if n_modes == 0 {
            return Err(Error::invalid("need at least one non-constant mode"));
        }
        let mut mu = vec![0.0; n_modes + 1];
        for (k, muk) in mu.iter_mut().enumerate().skip(1) {
            *muk = (k as f64).powf(0.5 - 3.0 * s);
        }
        Ok(NonlinearitySpec {
            n_modes,
            mu_coeffs: mu.clone(),
            mu_modes_deep: mu,
            variant: Variant::MagicSingle { theta, s },
        })
    }

    /// All-odd-modes-lost closed-form specification: the control feeds the
    /// constant mode and the even modes `2j` with strength `j^{1/2−3s}`; each
    /// odd mode `2k+1` is reached only through its own profile `Θ_k` acting on
    /// the even modes, scaled by `C_Θ = 32/γ(s)`.
    pub fn magic_infinite(
        family: Vec<BlockProfile>,
        s: f64,
        c_theta: f64,
        n_modes: usize,
    ) -> Result<Self> {
        if !(0.0 < s && s < 1.0) {
            return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
        }
        if family.is_empty() {
            return Err(Error::invalid("need at least one profile"));
        }
        let mut mu = vec![0.0; n_modes + 1];
        mu[0] = 1.0;
        let mut j = 1;
        while 2 * j <= n_modes {
            mu[2 * j] = (j as f64).powf(0.5 - 3.0 * s);
            j += 1;
        }
        Ok(NonlinearitySpec {
            n_modes,
            mu_coeffs: mu.clone(),
            mu_modes_deep: mu,
            variant: Variant::MagicInfinite { family, s, c_theta },
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// `⟨Γ[0], φ_k⟩` on the truncation.
    pub fn mu_coeffs(&self) -> &[f64] {
        &self.mu_coeffs
    }

    /// `⟨μ, φ_j⟩` to the full stored depth.
    pub fn mu_modes_deep(&self) -> &[f64] {
        &self.mu_modes_deep
    }

    pub fn variant_name(&self) -> &'static str {
        match self.variant {
            Variant::Affine { .. } => "affine",
            Variant::MagicSingle { .. } => "magic_single",
            Variant::MagicInfinite { .. } => "magic_infinite",
        }
    }

    pub fn fractional_order(&self) -> Option<f64> {
        match &self.variant {
            Variant::Affine { .. } => None,
            Variant::MagicSingle { s, .. } | Variant::MagicInfinite { s, .. } => Some(*s),
        }
    }

    /// The profile feeding the lost constant mode (single variant).
    pub fn single_profile(&self) -> Option<&BlockProfile> {
        match &self.variant {
            Variant::MagicSingle { theta, .. } => Some(theta),
            _ => None,
        }
    }

    /// The profile family feeding the lost odd modes (infinite variant).
    pub fn profile_family(&self) -> Option<&[BlockProfile]> {
        match &self.variant {
            Variant::MagicInfinite { family, .. } => Some(family),
            _ => None,
        }
    }

    pub fn c_theta(&self) -> Option<f64> {
        match &self.variant {
            Variant::MagicInfinite { c_theta, .. } => Some(*c_theta),
            _ => None,
        }
    }

    /// Stored depth of `⟨λ, φ_q⟩` (affine) or of the closed-form coefficient
    /// rule (unbounded for the magic variants, reported as `usize::MAX`).
    pub fn coefficient_depth(&self) -> usize {
        match &self.variant {
            Variant::Affine { lambda_modes, .. } => {
                (lambda_modes.len() - 1).min(self.mu_modes_deep.len() - 1)
            }
            _ => usize::MAX,
        }
    }

    pub fn summary(&self) -> SpecSummary {
        SpecSummary {
            variant: self.variant_name(),
            n_modes: self.n_modes,
            s: self.fractional_order(),
            c_theta: self.c_theta(),
            mu_coeffs: self.mu_coeffs.clone(),
            deep_mode_count: self.mu_modes_deep.len(),
        }
    }

    /// `⟨Γ[z], φ_k⟩` for `k ≤ N`.
    pub fn gamma_apply(&self, z: &SpectralField) -> Result<SpectralField> {
        if z.coeffs.len() != self.n_modes + 1 {
            return Err(Error::invalid(format!(
                "state truncated at {} modes, spec expects {}",
                z.coeffs.len() - 1,
                self.n_modes
            )));
        }
        let mut out = self.mu_coeffs.clone();
        match &self.variant {
            Variant::Affine { sim_grid, cos_table, .. } => {
                let m = sim_grid.len();
                let pi = std::f64::consts::PI;
                // synthesize z on the grid, multiply by λ, transform back
                let mut prod = vec![0.0f64; m];
                for (k, &zk) in z.coeffs.iter().enumerate() {
                    if zk != 0.0 {
                        let row = &cos_table[k * m..(k + 1) * m];
                        for i in 0..m {
                            prod[i] += zk * row[i];
                        }
                    }
                }
                for (p, &l) in prod.iter_mut().zip(sim_grid) {
                    *p *= l;
                }
                let w = pi / m as f64;
                for (k, ok) in out.iter_mut().enumerate() {
                    let row = &cos_table[k * m..(k + 1) * m];
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += prod[i] * row[i];
                    }
                    // The constant-mode retroaction row uses the plain
                    // cosine-coefficient pairing ⟨λ, φ_j⟩ (the √π rescaling of
                    // the constant basis function is absorbed), matching the
                    // drift-coefficient normalization c_j = ⟨μ,φ_j⟩⟨λ,φ_j⟩
                    // used by the kernel side throughout.
                    let scale = if k == 0 { w * pi.sqrt() } else { w };
                    *ok += scale * acc;
                }
            }
            Variant::MagicSingle { theta, s } => {
                let mut retro = 0.0;
                for (j, &zj) in z.coeffs.iter().enumerate().skip(1) {
                    let lj = (j as f64).ln();
                    let t = theta.eval(lj);
                    if t != 0.0 {
                        retro += t * (j as f64).powf(0.5 - *s) * zj;
                    }
                }
                out[0] += retro;
            }
            Variant::MagicInfinite { family, s, c_theta } => {
                for (k, theta_k) in family.iter().enumerate() {
                    let mode = 2 * k + 1;
                    if mode > self.n_modes {
                        break;
                    }
                    let mut retro = 0.0;
                    let mut j = 1;
                    while 2 * j <= self.n_modes {
                        let t = theta_k.eval((j as f64).ln());
                        if t != 0.0 {
                            retro += t * (j as f64).powf(0.5 - *s) * z.coeffs[2 * j];
                        }
                        j += 1;
                    }
                    out[mode] += c_theta * retro;
                }
            }
        }
        Ok(SpectralField { coeffs: out })
    }

    /// `⟨Γ'[0] z, φ_k⟩ = ⟨Γ[z] − Γ[0], φ_k⟩` (every variant is affine in z).
    pub fn retroaction_apply(&self, z: &SpectralField) -> Result<SpectralField> {
        let mut g = self.gamma_apply(z)?;
        for (gk, mk) in g.coeffs.iter_mut().zip(&self.mu_coeffs) {
            *gk -= mk;
        }
        Ok(g)
    }

    /// Row `⟨Γ'[0] φ_j, φ_target⟩` for `j = 1..=j_max`, beyond the truncation
    /// (affine variant only; the closed-form variants expose their kernel
    /// coefficients directly). The constant-mode row uses the plain pairing
    /// `⟨λ, φ_j⟩`.
    pub fn retroaction_row(&self, target: usize, j_max: usize) -> Result<Vec<f64>> {
        let Variant::Affine { lambda_modes, .. } = &self.variant else {
            return Err(Error::invalid(
                "retroaction rows beyond the truncation exist only for the affine variant",
            ));
        };
        let pi = std::f64::consts::PI;
        let q_have = lambda_modes.len() - 1;
        let need = j_max + target;
        if need > q_have {
            return Err(Error::invalid(format!(
                "stored λ depth {q_have} cannot provide row entries to j+k = {need}; \
                 rebuild the spec from a finer grid"
            )));
        }
        // raw integrals I_q = ∫ λ cos(qx) dx recovered from the coefficients
        let raw = |q: usize| -> f64 {
            if q == 0 {
                pi.sqrt() * lambda_modes[0]
            } else {
                (pi / 2.0).sqrt() * lambda_modes[q]
            }
        };
        let row = (1..=j_max)
            .map(|j| {
                if target == 0 {
                    lambda_modes[j]
                } else {
                    (raw(j + target) + raw(j.abs_diff(target))) / pi
                }
            })
            .collect();
        Ok(row)
    }

    /// Mode indices `k ≤ N` that the control cannot reach at linear order
    /// (`|⟨μ, φ_k⟩| ≤ tol`).
    pub fn lost_directions(&self, tol: f64) -> Vec<usize> {
        self.mu_coeffs
            .iter()
            .enumerate()
            .filter(|(_, &m)| m.abs() <= tol)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Empirical regularity diagnostics on sampled states (a sample sweep, not a
/// certificate: the uniform bound over all of `H¹` cannot be checked on a
/// truncation).
pub fn check_regularity(
    spec: &NonlinearitySpec,
    sample_states: &[SpectralField],
) -> Result<RegularityReport> {
    let gamma0 = spec.gamma_apply(&SpectralField::zero(spec.n_modes()))?;
    let mut lip: f64 = 0.0;
    let mut second: f64 = 0.0;
    for pair in sample_states.windows(2) {
        let (z1, z2) = (&pair[0], &pair[1]);
        let g1 = spec.gamma_apply(z1)?;
        let g2 = spec.gamma_apply(z2)?;
        let mut dg = g1.clone();
        dg.axpy(-1.0, &g2);
        let mut dz = z1.clone();
        dz.axpy(-1.0, z2);
        let denom = dz.h1_norm();
        if denom > 1e-14 {
            lip = lip.max(dg.h_neg1_norm() / denom);
        }
        // affinity defect Γ[z₁+z₂] − Γ[z₁] − Γ[z₂] + Γ[0]
        let mut zsum = z1.clone();
        zsum.axpy(1.0, z2);
        let gsum = spec.gamma_apply(&zsum)?;
        let mut defect = gsum;
        defect.axpy(-1.0, &g1);
        defect.axpy(-1.0, &g2);
        defect.axpy(1.0, &gamma0);
        second = second.max(defect.l2_norm());
    }
    Ok(RegularityReport {
        lipschitz_ratio_max: lip,
        second_difference_max: second,
        gamma0_mode0: gamma0.coeffs[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rho_pair_exact(j: usize) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let sgn = if j % 2 == 0 { 1.0 } else { -1.0 };
        let mu = 2.0 * (2.0 * pi).sqrt() * sgn / (j as f64).powi(2);
        let lam = -2.0 * (2.0 * pi).sqrt() * (2.0 * sgn + 1.0) / (j as f64).powi(4);
        (mu, lam)
    }

    #[test]
    fn benchmark_modes_match_closed_forms() {
        let spec = NonlinearitySpec::benchmark_affine(32).unwrap();
        assert!(spec.mu_coeffs()[0].abs() < 1e-8, "μ must have zero mean");
        let row = spec.retroaction_row(0, 64).unwrap();
        for j in 1..=32usize {
            let (mu, lam) = rho_pair_exact(j);
            assert_relative_eq!(spec.mu_coeffs()[j], mu, epsilon = 1e-8);
            assert_relative_eq!(row[j - 1], lam, epsilon = 1e-8);
        }
    }

    #[test]
    fn unit_cosine_grid_gives_unit_vector() {
        let m = 512;
        let grid = midpoint_grid(m);
        let pi = std::f64::consts::PI;
        let mu: Vec<f64> = grid.iter().map(|&x| (2.0 / pi).sqrt() * x.cos()).collect();
        let lam = vec![0.0; m];
        let spec = NonlinearitySpec::make_affine(&mu, &lam, 16).unwrap();
        for (k, &c) in spec.mu_coeffs().iter().enumerate() {
            let want = if k == 1 { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-12, "mode {k}: {c}");
        }
        assert_eq!(spec.lost_directions(1e-10), {
            let mut v: Vec<usize> = vec![0];
            v.extend(2..=16);
            v
        });
    }

    #[test]
    fn affine_apply_is_exactly_affine_and_matches_quadrature() {
        let spec = NonlinearitySpec::benchmark_affine(24).unwrap();
        let z1 = SpectralField::basis(24, 1, 0.7);
        let z2 = SpectralField::basis(24, 5, -0.3);
        let g0 = spec.gamma_apply(&SpectralField::zero(24)).unwrap();
        let g1 = spec.gamma_apply(&z1).unwrap();
        let g2 = spec.gamma_apply(&z2).unwrap();
        let mut z12 = z1.clone();
        z12.axpy(1.0, &z2);
        let g12 = spec.gamma_apply(&z12).unwrap();
        for k in 0..=24 {
            let defect = g12.coeffs[k] - g1.coeffs[k] - g2.coeffs[k] + g0.coeffs[k];
            assert!(defect.abs() < 1e-12, "mode {k} affinity defect {defect}");
        }
        // Γ[0] = μ
        for k in 0..=24 {
            assert_relative_eq!(g0.coeffs[k], spec.mu_coeffs()[k], epsilon = 1e-14);
        }
        // constant-mode component of Γ'[0]φ_1 against fine-grid quadrature of
        // the plain pairing ⟨λ, φ_1⟩
        let retro = spec.retroaction_apply(&SpectralField::basis(24, 1, 1.0)).unwrap();
        let pi = std::f64::consts::PI;
        let m = 400_000;
        let mut acc = 0.0;
        for i in 0..m {
            let x = (i as f64 + 0.5) * pi / m as f64;
            let lam = x.powi(4) / 4.0 - pi * x.powi(3) / 3.0 + pi.powi(4) / 30.0;
            acc += lam * (2.0 / pi).sqrt() * x.cos();
        }
        acc *= pi / m as f64;
        assert_relative_eq!(retro.coeffs[0], acc, max_relative = 1e-9);
    }

    #[test]
    fn magic_single_structure() {
        let theta = crate::profiles::build_periodic_theta(1.5).unwrap();
        let s = 0.25;
        let spec = NonlinearitySpec::magic_single(theta.clone(), s, 16).unwrap();
        // lost constant direction
        assert_eq!(spec.lost_directions(1e-12), vec![0]);
        let g0 = spec.gamma_apply(&SpectralField::zero(16)).unwrap();
        assert_eq!(g0.coeffs[0], 0.0);
        // single-term retroaction for z = φ_2
        let z = SpectralField::basis(16, 2, 1.0);
        let g = spec.gamma_apply(&z).unwrap();
        let want = theta.eval(2f64.ln()) * 2f64.powf(0.5 - s);
        assert_relative_eq!(g.coeffs[0], want, epsilon = 1e-14);
        // other modes independent of z
        for k in 1..=16 {
            assert_relative_eq!(g.coeffs[k], spec.mu_coeffs()[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn magic_infinite_structure() {
        let l = 1.2;
        let family = crate::profiles::build_sparse_theta_family(l, 2, 4).unwrap();
        let s = 0.25;
        let spec = NonlinearitySpec::magic_infinite(family, s, 10.0, 32).unwrap();
        let lost = spec.lost_directions(1e-12);
        assert_eq!(lost, vec![1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29, 31]);
        // even-mode source strengths
        for j in 1..=16usize {
            assert_relative_eq!(
                spec.mu_coeffs()[2 * j],
                (j as f64).powf(0.5 - 3.0 * s),
                epsilon = 1e-14
            );
        }
        // retroaction feeds odd modes from even modes only
        let z = SpectralField::basis(32, 4, 1.0); // even mode 4 = 2·2
        let g = spec.retroaction_apply(&z).unwrap();
        let family = spec.profile_family().unwrap();
        for (k, theta_k) in family.iter().enumerate() {
            let mode = 2 * k + 1;
            let want = 10.0 * theta_k.eval(2f64.ln()) * 2f64.powf(0.5 - s);
            assert_relative_eq!(g.coeffs[mode], want, epsilon = 1e-13);
        }
        let zo = SpectralField::basis(32, 3, 1.0); // odd input feeds nothing
        let go = spec.retroaction_apply(&zo).unwrap();
        assert!(go.coeffs.iter().all(|&c| c.abs() < 1e-15));
    }

    #[test]
    fn regularity_diagnostics_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let spec = NonlinearitySpec::benchmark_affine(16).unwrap();
        let states: Vec<SpectralField> = (0..12)
            .map(|_| {
                let coeffs = (0..=16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                SpectralField { coeffs }
            })
            .collect();
        let rep = check_regularity(&spec, &states).unwrap();
        assert!(rep.second_difference_max < 1e-11, "{}", rep.second_difference_max);
        assert!(rep.lipschitz_ratio_max.is_finite() && rep.lipschitz_ratio_max > 0.0);
        assert!(rep.gamma0_mode0.abs() < 1e-8);
    }
}
