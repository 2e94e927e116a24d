//! Time-domain control signals: piecewise-linear calculus, exact Fourier
//! transforms, iterated primitives, and fractional/integer Sobolev norms.
//!
//! A [`ControlSignal`] is a uniformly sampled function on `[0, T]` interpreted
//! everywhere as its piecewise-linear interpolant. All integrals against the
//! interpolant (L² norm, Fourier transform, primitives) are closed-form exact;
//! discretization error enters only through how well the interpolant tracks
//! the continuum signal, which is `O(dt²)` for smooth inputs.
//!
//! The Fourier convention is non-unitary: `û(ξ) = ∫₀^T u(t) e^{−iξt} dt`, and
//! `‖u‖_{H^{−s}}² = (1/2π) ∫_ℝ |û(ξ)|² (1+ξ²)^{−s} dξ` after extension of `u`
//! by zero to the whole line.

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `(e^z − 1)/z`, stable for small `|z|`.
pub(crate) fn ec0(z: Complex64) -> Complex64 {
    if z.norm_sqr() < 1e-8 {
        Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// `(e^z(z−1) + 1)/z²  =  ∫₀¹ σ e^{zσ} dσ`, stable for small `|z|`.
pub(crate) fn ec1(z: Complex64) -> Complex64 {
    if z.norm_sqr() < 1e-8 {
        Complex64::new(0.5, 0.0) + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Real `(1 − e^{−x})/x`, stable for small `x ≥ 0`.
pub(crate) fn em0(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - x / 2.0 + x * x / 6.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// `sin(z)/z` for complex `z`, stable near 0.
pub(crate) fn sinc_c(z: Complex64) -> Complex64 {
    if z.norm_sqr() < 1e-12 {
        Complex64::new(1.0, 0.0) - z * z / 6.0
    } else {
        z.sin() / z
    }
}

/// Metadata describing one oscillating atom `A·sin(ωt)·e^{−λt}·1_{[0,τ]}(t)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AtomMeta {
    pub omega: f64,
    pub tau: f64,
    pub lambda: f64,
    pub amplitude: f64,
}

impl AtomMeta {
    /// Exact Fourier transform of the atom, uniformly stable near `ξ = ±ω`:
    /// `v̂(ξ) = e^{−(τ/2)(λ+iξ)} (τ/2i) [e^{iτω/2} sinc((τ/2)(ξ−ω−iλ))
    ///        − e^{−iτω/2} sinc((τ/2)(ξ+ω−iλ))]` times the amplitude.
    pub fn fourier(&self, xi: f64) -> Complex64 {
        let h = 0.5 * self.tau;
        let pref = (Complex64::new(-self.lambda, -xi) * h).exp() * Complex64::new(0.0, -h);
        let zp = Complex64::new(xi - self.omega, -self.lambda) * h;
        let zm = Complex64::new(xi + self.omega, -self.lambda) * h;
        let phase = Complex64::from_polar(1.0, h * self.omega);
        self.amplitude * pref * (phase * sinc_c(zp) - phase.conj() * sinc_c(zm))
    }

    /// Exact squared L² norm `A² ∫₀^τ sin²(ωt) e^{−2λt} dt`.
    pub fn l2_norm_sq(&self) -> f64 {
        let (w, l, tau) = (self.omega, self.lambda, self.tau);
        // ∫ sin²(ωt) e^{−2λt} = ½∫ e^{−2λt} − ½ Re ∫ e^{(2iω−2λ)t}
        let part1 = 0.5 * tau * em0(2.0 * l * tau);
        let z = Complex64::new(-2.0 * l, 2.0 * w);
        let part2 = 0.5 * (tau * ec0(z * tau)).re;
        self.amplitude * self.amplitude * (part1 - part2)
    }

    /// Decay-weighted moment `∫₀^τ v(t) e^{−r(τ_end − t)} dt` of the atom
    /// against an exponential window ending at `τ_end ≥ τ` with rate `r ≥ 0`.
    pub fn decay_moment(&self, r: f64, tau_end: f64) -> f64 {
        // ∫₀^τ A sin(ωt) e^{−λt} e^{−r(τ_end−t)} dt
        //   = A e^{−r τ_end} Im ∫₀^τ e^{(r−λ+iω)t} dt
        let z = Complex64::new(r - self.lambda, self.omega);
        if (r - self.lambda) * self.tau > 100.0 {
            // e^{zτ} would overflow long before the damping e^{−r τ_end} is
            // applied; fold the damping into the exponents (both ≤ 0 here).
            let top = Complex64::new(
                -r * (tau_end - self.tau) - self.lambda * self.tau,
                self.omega * self.tau,
            );
            let diff = top.exp() - (-r * tau_end).exp();
            return self.amplitude * (diff / z).im;
        }
        let integral = (self.tau * ec0(z * self.tau)).im;
        self.amplitude * (-r * tau_end).exp() * integral
    }

    /// Sample the atom on `[0, t_end]` (zero beyond `τ`).
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.tau {
            0.0
        } else {
            self.amplitude * (self.omega * t).sin() * (-self.lambda * t).exp()
        }
    }

    /// Exact `∫₀^τ v(t) dt = A·Im ∫₀^τ e^{(iω−λ)t} dt`.
    pub fn integral(&self) -> f64 {
        let z = Complex64::new(-self.lambda, self.omega);
        self.amplitude * (self.tau * ec0(z * self.tau)).im
    }

    /// Exact `∫ a(t) b(t) dt` for two atoms (product-to-sum in closed form).
    pub fn cross_l2(a: &AtomMeta, b: &AtomMeta) -> f64 {
        let tau = a.tau.min(b.tau);
        let l = a.lambda + b.lambda;
        // sin(ω_a t) sin(ω_b t) = ½[cos((ω_a−ω_b)t) − cos((ω_a+ω_b)t)]
        let e_of = |w: f64| -> f64 {
            let z = Complex64::new(-l, w);
            (tau * ec0(z * tau)).re
        };
        0.5 * a.amplitude * b.amplitude * (e_of(a.omega - b.omega) - e_of(a.omega + b.omega))
    }
}

/// Analytic descriptor for signals whose derivatives are available in closed
/// form (required by [`gn_ratio`], which needs derivatives up to order 3n+2).
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticSignal {
    /// `Σ c_k t^k` with coefficients in increasing degree.
    Poly(Vec<f64>),
    /// `Σ a_k sin(ω_k t + φ_k)` terms.
    Trig(Vec<TrigTerm>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigTerm {
    pub amp: f64,
    pub omega: f64,
    pub phase: f64,
}

impl AnalyticSignal {
    pub fn derivative(&self) -> AnalyticSignal {
        match self {
            AnalyticSignal::Poly(c) => AnalyticSignal::Poly(
                c.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, &ck)| k as f64 * ck)
                    .collect(),
            ),
            AnalyticSignal::Trig(terms) => AnalyticSignal::Trig(
                terms
                    .iter()
                    .map(|t| TrigTerm {
                        amp: t.amp * t.omega,
                        omega: t.omega,
                        phase: t.phase + std::f64::consts::FRAC_PI_2,
                    })
                    .collect(),
            ),
        }
    }

    pub fn derivative_n(&self, n: u32) -> AnalyticSignal {
        let mut d = self.clone();
        for _ in 0..n {
            d = d.derivative();
        }
        d
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            AnalyticSignal::Poly(c) => c.iter().rev().fold(0.0, |acc, &ck| acc * t + ck),
            AnalyticSignal::Trig(terms) => terms
                .iter()
                .map(|tt| tt.amp * (tt.omega * t + tt.phase).sin())
                .sum(),
        }
    }
}

/// A control signal: uniform samples on `[0, T]` with piecewise-linear
/// semantics, plus optional atom metadata and an optional analytic descriptor.
#[derive(Debug, Clone)]
pub struct ControlSignal {
    dt: f64,
    samples: Vec<f64>,
    pub atoms: Vec<AtomMeta>,
    pub analytic: Option<AnalyticSignal>,
}

impl ControlSignal {
    pub fn new(dt: f64, samples: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
        }
        if samples.len() < 2 {
            return Err(Error::invalid("need at least two samples (one interval)"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("samples must be finite"));
        }
        Ok(ControlSignal { dt, samples, atoms: Vec::new(), analytic: None })
    }

    /// Sample `f` at `n_intervals + 1` uniform nodes over `[0, t_end]`.
    pub fn from_fn(t_end: f64, n_intervals: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) || n_intervals == 0 {
            return Err(Error::invalid("t_end must be positive, n_intervals ≥ 1"));
        }
        let dt = t_end / n_intervals as f64;
        let samples = (0..=n_intervals).map(|i| f(i as f64 * dt)).collect();
        ControlSignal::new(dt, samples)
    }

    pub fn zero(t_end: f64, n_intervals: usize) -> Result<Self> {
        ControlSignal::from_fn(t_end, n_intervals, |_| 0.0)
    }

    /// Signal carrying only analytic atom content. The sampled part is a zero
    /// grid (`n_intervals` cells), so the atoms stay exact: all content-aware
    /// operations treat a signal as *piecewise-linear samples plus atoms*.
    /// This is the only representation that stays meaningful for carriers far
    /// beyond any feasible sampling rate.
    pub fn from_atom_descriptors(
        t_end: f64,
        n_intervals: usize,
        atoms: Vec<AtomMeta>,
    ) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("need at least one atom"));
        }
        for a in &atoms {
            if !(a.tau > 0.0 && a.tau <= t_end * (1.0 + 1e-12)) {
                return Err(Error::invalid(format!(
                    "atom duration {} outside (0, {t_end}]",
                    a.tau
                )));
            }
            if !(a.amplitude.is_finite() && a.omega.is_finite() && a.lambda.is_finite()) {
                return Err(Error::invalid("atom parameters must be finite"));
            }
        }
        let mut sig = ControlSignal::zero(t_end, n_intervals.max(1))?;
        sig.atoms = atoms;
        Ok(sig)
    }

    /// Pure piecewise-linear copy with atoms folded into the samples, on a
    /// grid of step ≤ `dt_target` fine enough for the fastest carrier.
    /// Refused when the required grid is infeasible (astronomical carriers).
    pub fn resampled(&self, dt_target: f64) -> Result<ControlSignal> {
        if !(dt_target.is_finite() && dt_target > 0.0) {
            return Err(Error::invalid("resampling step must be positive"));
        }
        let omega_max = self.atoms.iter().map(|a| a.omega.abs()).fold(0.0, f64::max);
        let mut dt = dt_target;
        if omega_max > 0.0 {
            dt = dt.min(0.2 / omega_max);
        }
        let n = (self.t_end() / dt).ceil();
        if !(n.is_finite() && n <= 6e6) {
            return Err(Error::invalid(format!(
                "resampling would need {n:.1e} cells; carriers too fast for the time domain"
            )));
        }
        let n = (n as usize).max(self.n_intervals());
        ControlSignal::from_fn(self.t_end(), n, |t| self.eval(t))
    }

    pub fn with_analytic(mut self, a: AnalyticSignal) -> Self {
        self.analytic = Some(a);
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_intervals(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.n_intervals() as f64
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    /// Pointwise evaluation: piecewise-linear samples plus atom content
    /// (0 outside `[0, T]`).
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.t_end() {
            return 0.0;
        }
        let x = t / self.dt;
        let i = (x.floor() as usize).min(self.n_intervals() - 1);
        let frac = x - i as f64;
        let pl = self.samples[i] * (1.0 - frac) + self.samples[i + 1] * frac;
        pl + self.atoms.iter().map(|a| a.eval(t)).sum::<f64>()
    }

    /// Exact `∫₀^T u(t) dt`: trapezoid on the interpolant (exact for it)
    /// plus the closed-form atom integrals.
    pub fn integral(&self) -> f64 {
        let s: f64 = self.samples.iter().sum();
        (s - 0.5 * (self.samples[0] + self.samples[self.samples.len() - 1])) * self.dt
            + self.atoms.iter().map(|a| a.integral()).sum::<f64>()
    }

    /// Exact squared L² norm: cellwise closed form for the interpolant,
    /// closed-form atom autocorrelations, and exact cross terms.
    pub fn l2_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.samples.windows(2) {
            acc += w[0] * w[0] + w[0] * w[1] + w[1] * w[1];
        }
        acc *= self.dt / 3.0;
        for (i, a) in self.atoms.iter().enumerate() {
            acc += a.l2_norm_sq();
            for b in &self.atoms[i + 1..] {
                acc += 2.0 * AtomMeta::cross_l2(a, b);
            }
            acc += 2.0 * self.cross_pl_atom(a);
        }
        acc
    }

    /// `∫ PL(t)·atom(t) dt` with the cellwise closed form
    /// `Im ∫ (a + bσ) e^{(iω−λ)t} dt`, stable for arbitrarily fast carriers.
    fn cross_pl_atom(&self, atom: &AtomMeta) -> f64 {
        let z = Complex64::new(-atom.lambda, atom.omega);
        let mut acc = Complex64::new(0.0, 0.0);
        let h = self.dt;
        let n_cells = ((atom.tau / h).ceil() as usize).min(self.n_intervals());
        for i in 0..n_cells {
            let t0 = i as f64 * h;
            let hc = (atom.tau - t0).min(h);
            if hc <= 0.0 {
                break;
            }
            let a = self.samples[i];
            let b = (self.samples[i + 1] - self.samples[i]) / h;
            // ∫₀^{hc} (a + bσ) e^{z(t0+σ)} dσ = e^{z t0} (a hc ec0(z hc) + b hc² ec1(z hc))
            let zt = z * hc;
            let cell = (z * t0).exp() * (a * hc * ec0(zt) + b * hc * hc * ec1(zt));
            acc += cell;
        }
        atom.amplitude * acc.im
    }

    /// L¹ norm: exact for the interpolant (cells split at sign changes); when
    /// atoms are present their contribution is replaced by the upper bound
    /// `|A|·τ`, so the result is then an upper bound rather than exact.
    pub fn l1_norm(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.samples.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a * b >= 0.0 {
                acc += 0.5 * (a.abs() + b.abs());
            } else {
                // linear crosses zero inside the cell
                acc += 0.5 * (a * a + b * b) / (a.abs() + b.abs());
            }
        }
        acc * self.dt + self.atoms.iter().map(|a| a.amplitude.abs() * a.tau).sum::<f64>()
    }

    /// Total variation: exact for the interpolant; atom contributions enter
    /// as the upper bound `|A|(2 + ωτ·2/π + λτ)` (an overestimate).
    pub fn total_variation(&self) -> f64 {
        let pl: f64 = self.samples.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        pl + self
            .atoms
            .iter()
            .map(|a| {
                a.amplitude.abs()
                    * (2.0
                        + a.omega.abs() * a.tau * std::f64::consts::FRAC_2_PI
                        + a.lambda.abs() * a.tau)
            })
            .sum::<f64>()
    }

    pub fn scaled(&self, a: f64) -> ControlSignal {
        let mut out = self.clone();
        for x in &mut out.samples {
            *x *= a;
        }
        for at in &mut out.atoms {
            at.amplitude *= a;
        }
        out.analytic = self.analytic.as_ref().map(|d| match d {
            AnalyticSignal::Poly(c) => {
                AnalyticSignal::Poly(c.iter().map(|&x| a * x).collect())
            }
            AnalyticSignal::Trig(terms) => AnalyticSignal::Trig(
                terms.iter().map(|t| TrigTerm { amp: a * t.amp, ..*t }).collect(),
            ),
        });
        out
    }

    /// `self + a·other`; grids must agree exactly.
    pub fn add_scaled(&self, other: &ControlSignal, a: f64) -> Result<ControlSignal> {
        if self.samples.len() != other.samples.len()
            || (self.dt - other.dt).abs() > 1e-14 * self.dt
        {
            return Err(Error::invalid("signal grids do not match"));
        }
        let mut out = self.clone();
        for (x, y) in out.samples.iter_mut().zip(&other.samples) {
            *x += a * y;
        }
        out.atoms.extend(other.atoms.iter().map(|at| AtomMeta {
            amplitude: a * at.amplitude,
            ..*at
        }));
        out.analytic = match (&self.analytic, &other.analytic) {
            (Some(AnalyticSignal::Trig(t1)), Some(AnalyticSignal::Trig(t2))) => {
                let mut merged = t1.clone();
                merged.extend(t2.iter().map(|t| TrigTerm { amp: a * t.amp, ..*t }));
                Some(AnalyticSignal::Trig(merged))
            }
            _ => None,
        };
        Ok(out)
    }

    /// Exact Fourier transform of the piecewise-linear interpolant,
    /// `û(ξ) = ∫₀^T u(t) e^{−iξt} dt`, with a stable small-`ξ` branch.
    pub fn fourier_transform(&self, xi: f64) -> Result<Complex64> {
        if !xi.is_finite() {
            return Err(Error::invalid("ξ must be finite"));
        }
        let h = self.dt;
        let z = Complex64::new(0.0, -xi * h);
        let w0 = h * ec0(z);
        let w1 = h * h * ec1(z);
        let r = Complex64::from_polar(1.0, -xi * h);
        let mut phase = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, w) in self.samples.windows(2).enumerate() {
            let a = w[0];
            let b = (w[1] - w[0]) / h;
            acc += phase * (a * w0 + b * w1);
            phase *= r;
            // refresh the recurrence phase periodically to kill rounding drift
            if i % 256 == 255 {
                phase = Complex64::from_polar(1.0, -xi * h * (i as f64 + 1.0));
            }
        }
        Ok(acc)
    }

    /// Full Fourier transform of the signal content: the exact transform of
    /// the piecewise-linear part plus the closed-form atom transforms.
    pub fn analytic_fourier(&self, xi: f64) -> Result<Complex64> {
        let mut v = if self.samples.iter().all(|&x| x == 0.0) {
            Complex64::new(0.0, 0.0)
        } else {
            self.fourier_transform(xi)?
        };
        for a in &self.atoms {
            v += a.fourier(xi);
        }
        Ok(v)
    }

    /// `n`-fold iterated primitive `u_{m+1}(t) = ∫₀^t u_m`, each step the
    /// exact integral of the current piecewise-linear interpolant (so the
    /// composition identity `P_n = P_1 ∘ P_{n−1}` holds exactly on the grid).
    /// Atom content is folded into the samples first (refused when that grid
    /// would be infeasible).
    pub fn iterated_primitive(&self, n: u32) -> Result<ControlSignal> {
        let mut cur = if self.atoms.is_empty() {
            self.clone()
        } else {
            self.resampled(self.dt)?
        };
        cur.analytic = None;
        for _ in 0..n {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(cur.samples.len());
            out.push(0.0);
            for w in cur.samples.windows(2) {
                acc += 0.5 * (w[0] + w[1]) * cur.dt;
                out.push(acc);
            }
            cur.samples = out;
        }
        Ok(cur)
    }

    /// Write samples as CSV `(t, u)` plus a JSON sidecar with grid and atoms.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut table = crate::io::CsvTable::new(&["t", "u"]);
        for (i, &u) in self.samples.iter().enumerate() {
            table.push_row(&[i as f64 * self.dt, u]);
        }
        table.write(path)?;
        let sidecar = SignalSidecar {
            t_end: self.t_end(),
            dt: self.dt,
            atoms: self.atoms.clone(),
        };
        crate::io::write_json(&path.with_extension("json"), &sidecar)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ControlSignal> {
        let text = std::fs::read_to_string(path)?;
        let mut times = Vec::new();
        let mut vals = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue; // header
            }
            let mut parts = line.split(',');
            let t: f64 = parts
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing t", i + 1)))?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            let u: f64 = parts
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing u", i + 1)))?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            times.push(t);
            vals.push(u);
        }
        if times.len() < 2 {
            return Err(Error::Parse("need at least two rows".into()));
        }
        let dt = times[1] - times[0];
        for (i, &t) in times.iter().enumerate() {
            if (t - i as f64 * dt).abs() > 1e-9 * times[times.len() - 1].max(1.0) {
                return Err(Error::Parse("time column is not a uniform grid".into()));
            }
        }
        let mut sig = ControlSignal::new(dt, vals)?;
        let sidecar_path = path.with_extension("json");
        if sidecar_path.exists() {
            let sc: SignalSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
            sig.atoms = sc.atoms;
        }
        Ok(sig)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SignalSidecar {
    t_end: f64,
    dt: f64,
    atoms: Vec<AtomMeta>,
}

// ---------------------------------------------------------------------------
// Frequency grids and norms
// ---------------------------------------------------------------------------

/// 7-point Gauss–Legendre rule on [−1, 1].
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

/// Quadrature grid on `ξ ∈ [0, Ξ_max]` (even integrands are doubled) built
/// from composite Gauss–Legendre panels sized to resolve `e^{−iξT}`
/// oscillation, with refinement near declared focus frequencies.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    pub xi_max: f64,
    nodes: Vec<(f64, f64)>,
}

impl FrequencyGrid {
    /// Build a grid for signals of duration `t_horizon`. `foci` lists
    /// frequencies (e.g. atom carriers) near which panels are refined.
    pub fn build(xi_max: f64, t_horizon: f64, foci: &[f64]) -> Result<FrequencyGrid> {
        if !(xi_max.is_finite() && xi_max > 0.0 && t_horizon > 0.0) {
            return Err(Error::invalid("xi_max and t_horizon must be positive"));
        }
        let base_w = (std::f64::consts::FRAC_PI_2 / t_horizon).min(xi_max / 8.0);
        let fine_w = base_w / 4.0;
        let in_focus = |xi: f64| {
            foci.iter()
                .any(|&f| (xi - f.abs()).abs() <= 64.0 * base_w)
        };
        let mut nodes = Vec::new();
        let mut lo = 0.0;
        while lo < xi_max {
            let w = if in_focus(lo) { fine_w } else { base_w };
            let hi = (lo + w).min(xi_max);
            let c = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            for k in 0..7 {
                nodes.push((c + half * GL7_X[k], half * GL7_W[k]));
            }
            lo = hi;
        }
        Ok(FrequencyGrid { xi_max, nodes })
    }

    /// Default grid for a signal and order `s`: `Ξ_max = max(10³, 50/dt)`
    /// enlarged until the analytic 1/ξ-decay tail bound is below
    /// `rel_tol · ‖u‖²` (when the signal is nonzero).
    pub fn for_signal(u: &ControlSignal, s: f64, rel_tol: f64) -> Result<FrequencyGrid> {
        let c1 = u.eval(0.0).abs() + u.eval(u.t_end()).abs() + u.total_variation();
        let main_sq = u.l2_norm_sq().max(1e-300);
        let mut xi_max: f64 = 1e3f64.max(50.0 / u.dt);
        if c1 > 0.0 {
            let needed = (c1 * c1
                / (std::f64::consts::PI * (1.0 + 2.0 * s) * rel_tol * main_sq))
                .powf(1.0 / (1.0 + 2.0 * s));
            xi_max = xi_max.max(needed);
        }
        let foci: Vec<f64> = u.atoms.iter().map(|a| a.omega.abs()).collect();
        if let Some(max_f) = foci.iter().cloned().fold(None::<f64>, |m, f| {
            Some(m.map_or(f, |mm| mm.max(f)))
        }) {
            if max_f > 1e7 {
                return Err(Error::invalid(format!(
                    "carrier frequency {max_f:.3e} too large for a dense grid; \
                     use window-based quadrature"
                )));
            }
            let tau_min = u
                .atoms
                .iter()
                .map(|a| a.tau)
                .fold(f64::INFINITY, f64::min)
                .max(1e-6);
            xi_max = xi_max.max(4.0 * max_f + 200.0 / tau_min);
        }
        FrequencyGrid::build(xi_max, u.t_end(), &foci)
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    /// Integrate an even function of `ξ` over the whole line: `2 ∫₀^{Ξ} f`.
    pub fn integrate_even(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        2.0 * self.nodes.iter().map(|&(x, w)| w * f(x)).sum::<f64>()
    }
}

/// A norm value together with the analytic bound on what the truncated
/// frequency tail could still contribute (to the *squared* quantity).
#[derive(Debug, Clone, Copy)]
pub struct NormEstimate {
    pub value: f64,
    pub tail_bound_sq: f64,
    pub relative_tail: f64,
}

fn tail_bound_sq(u: &ControlSignal, s: f64, xi_max: f64) -> f64 {
    // |û(ξ)| ≤ C₁/|ξ| with C₁ = |u(0)| + |u(T)| + TV(u) (integration by parts
    // of the piecewise-linear interpolant); also |û| ≤ ‖u‖_{L¹}. Tail of the
    // squared norm:  (1/π) ∫_Ξ^∞ min(C₁/ξ, ‖u‖_{L¹})² (1+ξ²)^{−s} dξ
    // bounded with (1+ξ²)^{−s} ≤ ξ^{−2s}:
    let c1 = u.eval(0.0).abs() + u.eval(u.t_end()).abs() + u.total_variation();
    let l1 = u.l1_norm();
    let c = c1.min(l1 * xi_max);
    c * c / (std::f64::consts::PI * (1.0 + 2.0 * s) * xi_max.powf(1.0 + 2.0 * s))
}

fn spectral_integral(
    u: &ControlSignal,
    grid: &FrequencyGrid,
    mut weight: impl FnMut(f64) -> f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for &(xi, w) in grid.nodes() {
        let v = u.analytic_fourier(xi)?;
        acc += w * v.norm_sqr() * weight(xi);
    }
    Ok(2.0 * acc)
}

/// `‖u‖_{H^{−s}(ℝ)}` for `0 ≤ s ≤ 1` with the default grid for `u`.
pub fn sobolev_norm_neg(u: &ControlSignal, s: f64) -> Result<NormEstimate> {
    let grid = FrequencyGrid::for_signal(u, s, 1e-4)?;
    sobolev_norm_neg_with_grid(u, s, &grid)
}

/// `‖u‖_{H^{−s}(ℝ)}` on a caller-supplied grid.
pub fn sobolev_norm_neg_with_grid(
    u: &ControlSignal,
    s: f64,
    grid: &FrequencyGrid,
) -> Result<NormEstimate> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("s must lie in [0,1], got {s}")));
    }
    if u.samples.iter().all(|&x| x == 0.0) && u.atoms.is_empty() {
        return Ok(NormEstimate { value: 0.0, tail_bound_sq: 0.0, relative_tail: 0.0 });
    }
    let main_sq =
        spectral_integral(u, grid, |xi| (1.0 + xi * xi).powf(-s))? / (2.0 * std::f64::consts::PI);
    let tail_sq = tail_bound_sq(u, s, grid.xi_max);
    let rel = tail_sq / (main_sq + tail_sq).max(1e-300);
    if rel > 0.5 {
        return Err(Error::TailError(format!(
            "frequency tail bound {tail_sq:.3e} dominates main integral {main_sq:.3e}; enlarge Ξ_max"
        )));
    }
    Ok(NormEstimate {
        value: main_sq.max(0.0).sqrt(),
        tail_bound_sq: tail_sq,
        relative_tail: rel,
    })
}

/// Integer Sobolev norm `(Σ_{k≤m} ‖u^{(k)}‖²_{L²})^{1/2}` via central finite
/// differences of the samples (one-sided at the ends) and Simpson integration.
pub fn sobolev_norm_int(u: &ControlSignal, m: u32) -> Result<f64> {
    let n = u.samples.len();
    if n < 2 * (m as usize + 1) {
        return Err(Error::invalid("too few samples for requested derivative order"));
    }
    let mut total = 0.0;
    let mut cur: Vec<f64> = u.samples.clone();
    let h = u.dt;
    for k in 0..=m {
        total += simpson_sq(&cur, h);
        if k < m {
            let mut next = vec![0.0; cur.len()];
            let nn = cur.len();
            next[0] = (cur[1] - cur[0]) / h;
            next[nn - 1] = (cur[nn - 1] - cur[nn - 2]) / h;
            for i in 1..nn - 1 {
                next[i] = (cur[i + 1] - cur[i - 1]) / (2.0 * h);
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("finite differences are not resolvable"));
            }
            cur = next;
        }
    }
    Ok(total.sqrt())
}

fn simpson_sq(v: &[f64], h: f64) -> f64 {
    // composite Simpson on v², falling back to trapezoid for the last cell
    // when the interval count is odd
    let n = v.len() - 1;
    let sq = |x: f64| x * x;
    let mut acc = 0.0;
    let pairs = n / 2;
    for p in 0..pairs {
        let i = 2 * p;
        acc += (sq(v[i]) + 4.0 * sq(v[i + 1]) + sq(v[i + 2])) * h / 3.0;
    }
    if n % 2 == 1 {
        acc += 0.5 * (sq(v[n - 1]) + sq(v[n])) * h;
    }
    acc
}

/// Weight argument for [`weighted_norm_theta`].
pub enum ThetaWeight<'a> {
    Profile(&'a crate::profiles::BlockProfile),
    Func(&'a dyn Fn(f64) -> f64),
}

/// Squared drift-weighted norm
/// `‖u‖²_Θ = (γ(s)/2π) ∫ |û(ξ)|² (1+ξ²)^{−s} Θ(|ξ|^{1/2}) dξ`.
/// The weight must be nonnegative where evaluated.
pub fn weighted_norm_theta(
    u: &ControlSignal,
    s: f64,
    theta: ThetaWeight<'_>,
) -> Result<NormEstimate> {
    let grid = FrequencyGrid::for_signal(u, s, 1e-4)?;
    weighted_norm_theta_with_grid(u, s, theta, &grid)
}

pub fn weighted_norm_theta_with_grid(
    u: &ControlSignal,
    s: f64,
    theta: ThetaWeight<'_>,
    grid: &FrequencyGrid,
) -> Result<NormEstimate> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("s must lie in [0,1], got {s}")));
    }
    let gamma = crate::kernels::gamma_s(s)?;
    let mut theta_max: f64 = 0.0;
    let mut negative = false;
    {
        let eval = |x: f64| -> f64 {
            match &theta {
                ThetaWeight::Profile(p) => p.eval(x),
                ThetaWeight::Func(f) => f(x),
            }
        };
        // probe nonnegativity/scale at the quadrature nodes only
        for &(xi, _) in grid.nodes() {
            let v = eval(xi.abs().sqrt());
            if v < -1e-12 {
                negative = true;
            }
            theta_max = theta_max.max(v.abs());
        }
        if negative {
            return Err(Error::invalid("Θ weight must be nonnegative on the evaluated range"));
        }
        if u.samples.iter().all(|&x| x == 0.0) && u.atoms.is_empty() {
            return Ok(NormEstimate { value: 0.0, tail_bound_sq: 0.0, relative_tail: 0.0 });
        }
        let main = spectral_integral(u, grid, |xi| {
            let w = eval(xi.abs().sqrt()).max(0.0);
            (1.0 + xi * xi).powf(-s) * w
        })? * gamma
            / (2.0 * std::f64::consts::PI);
        let tail = gamma * theta_max * tail_bound_sq(u, s, grid.xi_max);
        let rel = tail / (main + tail).max(1e-300);
        Ok(NormEstimate { value: main, tail_bound_sq: tail, relative_tail: rel })
    }
}

// ---------------------------------------------------------------------------
// Gagliardo–Nirenberg diagnostic
// ---------------------------------------------------------------------------

/// Smoothness-interpolation ratio
/// `‖v^{(n)}‖³_{L∞} / (‖v‖²_{L²} ‖v^{(3n+2)}‖_{L¹} + T^{−3n−3/2} ‖v‖³_{L²})`
/// on `[0, T]`. Requires an analytic descriptor on the signal; returns 0 for
/// the zero signal.
pub fn gn_ratio(v: &ControlSignal, n: u32) -> Result<f64> {
    let desc = v.analytic.as_ref().ok_or_else(|| {
        Error::invalid("gn_ratio requires an analytic descriptor (derivatives of order 3n+2)")
    })?;
    let t_end = v.t_end();
    let dn = desc.derivative_n(n);
    let dtop = desc.derivative_n(3 * n + 2);
    let sup_dn = dense_sup(&dn, t_end);
    if sup_dn == 0.0 {
        return Ok(0.0);
    }
    let l2_sq = gl_integral(t_end, 2048, |t| {
        let x = desc.eval(t);
        x * x
    });
    let l1_top = gl_integral(t_end, 4096, |t| dtop.eval(t).abs());
    let denom = l2_sq * l1_top + t_end.powf(-(3.0 * n as f64) - 1.5) * l2_sq.powf(1.5);
    Ok(sup_dn.powi(3) / denom)
}

fn dense_sup(f: &AnalyticSignal, t_end: f64) -> f64 {
    let n = 16384;
    let mut best = 0.0f64;
    let mut arg = 0.0f64;
    for i in 0..=n {
        let t = t_end * i as f64 / n as f64;
        let v = f.eval(t).abs();
        if v > best {
            best = v;
            arg = t;
        }
    }
    // local golden-section refinement around the best grid point
    let h = t_end / n as f64;
    let (mut lo, mut hi) = ((arg - h).max(0.0), (arg + h).min(t_end));
    for _ in 0..60 {
        let m1 = lo + (hi - lo) * 0.381_966;
        let m2 = hi - (hi - lo) * 0.381_966;
        if f.eval(m1).abs() < f.eval(m2).abs() {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    best.max(f.eval(0.5 * (lo + hi)).abs())
}

fn gl_integral(t_end: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let w = t_end / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let c = (p as f64 + 0.5) * w;
        for k in 0..7 {
            acc += 0.5 * w * GL7_W[k] * f(c + 0.5 * w * GL7_X[k]);
        }
    }
    acc
}
