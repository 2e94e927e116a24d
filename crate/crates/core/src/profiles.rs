//! Trapezoid block profiles: the elementary block χ, the 12L-periodic
//! two-block profile Θ, and the sparse diagonal family (Θ_k) whose members
//! have pairwise disjoint supports and polynomially growing offsets.
//!
//! Positions inside a profile are measured in *block units* of `2L`: a block
//! placed at integer position `X` occupies `x ∈ [2LX, 2L(X+3)]` with a rise,
//! a plateau of length `2L`, and a fall. A `+` block immediately followed by
//! a `−` block (at `X+3`) forms the oscillating pair used everywhere below.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Elementary trapezoid: `x` on [0,1], `1` on [1,2], `3−x` on [2,3], else 0.
pub fn chi_eval(x: f64) -> f64 {
    if x <= 0.0 || x >= 3.0 {
        0.0
    } else if x < 1.0 {
        x
    } else if x <= 2.0 {
        1.0
    } else {
        3.0 - x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    /// `Θ(x) = χ(x/2L) − χ(x/2L − 3)` extended `12L`-periodically to ℝ.
    Periodic,
    /// Member `k` of the sparse diagonal family.
    Sparse,
}

/// A piecewise-linear profile assembled from signed trapezoid blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockProfile {
    /// Plateau half-scale; slopes are ±1/(2L).
    pub l_scale: f64,
    /// Ordered disjoint blocks: (start position in 2L units, sign).
    pub blocks: Vec<(f64, i8)>,
    pub kind: ProfileKind,
    /// Family index for sparse members (0 for periodic).
    pub index: usize,
    /// Number of generation rounds materialized (sparse) or 0 (periodic).
    pub horizon: u32,
}

impl BlockProfile {
    /// Evaluate the profile at `x` (profile argument, not divided by 2L).
    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            ProfileKind::Periodic => {
                let period = 12.0 * self.l_scale;
                let y = x.rem_euclid(period) / (2.0 * self.l_scale);
                chi_eval(y) - chi_eval(y - 3.0)
            }
            ProfileKind::Sparse => {
                let y = x / (2.0 * self.l_scale);
                // binary search for the last block starting at or before y
                let idx = self.blocks.partition_point(|b| b.0 <= y);
                if idx == 0 {
                    return 0.0;
                }
                let (start, sign) = self.blocks[idx - 1];
                if y < start + 3.0 {
                    sign as f64 * chi_eval(y - start)
                } else {
                    0.0
                }
            }
        }
    }

    /// Infimum of the support in profile-argument units (`2L ×` block units).
    pub fn inf_supp(&self) -> f64 {
        match self.kind {
            ProfileKind::Periodic => 0.0,
            ProfileKind::Sparse => self
                .blocks
                .first()
                .map(|b| 2.0 * self.l_scale * b.0)
                .unwrap_or(f64::INFINITY),
        }
    }

    /// `ln ω̄ = 2·inf supp Θ` — the log of the lowest frequency whose kernel
    /// coefficient this profile can activate. Kept in log space: the value
    /// itself overflows f64 for deep family members.
    pub fn log_omega_bar(&self) -> f64 {
        2.0 * self.inf_supp()
    }

    /// Centers of all materialized plateaus with their signs, in profile
    /// units, verified by evaluation (never by index arithmetic).
    pub fn plateau_centers(&self, count: usize) -> Vec<(f64, i8)> {
        let l = self.l_scale;
        let mut out = Vec::new();
        match self.kind {
            ProfileKind::Periodic => {
                for p in 0..count {
                    for off in [3.0, 9.0] {
                        let c = (12.0 * p as f64 + off) * l;
                        let v = self.eval(c);
                        if v.abs() > 0.5 {
                            out.push((c, v.signum() as i8));
                        }
                    }
                }
            }
            ProfileKind::Sparse => {
                for &(start, _) in self.blocks.iter().take(count) {
                    let c = 2.0 * l * (start + 1.5);
                    let v = self.eval(c);
                    if v.abs() > 0.5 {
                        out.push((c, v.signum() as i8));
                    }
                }
            }
        }
        out
    }

    /// Serialize blocks as CSV plus a JSON header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut table = crate::io::CsvTable::new(&["start_block_units", "sign"]);
        match self.kind {
            ProfileKind::Periodic => {
                table.push_row(&[0.0, 1.0]);
                table.push_row(&[3.0, -1.0]);
            }
            ProfileKind::Sparse => {
                for &(s, sg) in &self.blocks {
                    table.push_row(&[s, sg as f64]);
                }
            }
        }
        table.write(path)?;
        crate::io::write_json(&path.with_extension("json"), self)?;
        Ok(())
    }
}

/// Smallest plateau center `x* ≥ min_x` such that the profile equals `sign`
/// on all of `[x* − L, x* + L]`, found and confirmed by direct evaluation.
pub fn plateau_center(p: &BlockProfile, sign: i8, min_x: f64) -> Result<f64> {
    if sign != 1 && sign != -1 {
        return Err(Error::invalid("sign must be ±1"));
    }
    let l = p.l_scale;
    let confirmed = |c: f64| -> bool {
        let target = sign as f64;
        [-l + 1e-9 * l, 0.0, l - 1e-9 * l]
            .iter()
            .all(|&off| (p.eval(c + off) - target).abs() < 1e-9)
    };
    match p.kind {
        ProfileKind::Periodic => {
            // candidate centers at odd multiples of 3L; scan forward
            let period = 12.0 * l;
            let start_cell = (min_x / period).floor().max(0.0) as u64;
            for cell in start_cell..start_cell + 4 {
                for off in [3.0 * l, 9.0 * l] {
                    let c = cell as f64 * period + off;
                    if c >= min_x && confirmed(c) {
                        return Ok(c);
                    }
                }
            }
            Err(Error::NoPlateau(format!(
                "no {sign:+} plateau found at or beyond {min_x} (periodic profile)"
            )))
        }
        ProfileKind::Sparse => {
            for &(start, _) in &p.blocks {
                let c = 2.0 * l * (start + 1.5);
                if c >= min_x && confirmed(c) {
                    return Ok(c);
                }
            }
            Err(Error::NoPlateau(format!(
                "no {sign:+} plateau at or beyond {min_x} within horizon {} of profile {}",
                p.horizon, p.index
            )))
        }
    }
}

/// The 12L-periodic two-block profile.
pub fn build_periodic_theta(l_scale: f64) -> Result<BlockProfile> {
    if !(l_scale >= 1.0 && l_scale.is_finite()) {
        return Err(Error::invalid("plateau scale L must satisfy L ≥ 1"));
    }
    Ok(BlockProfile {
        l_scale,
        blocks: vec![(0.0, 1), (3.0, -1)],
        kind: ProfileKind::Periodic,
        index: 0,
        horizon: 0,
    })
}

/// Block-unit positions `X_end(h)` reached after each generation round
/// `h = 1..=H` of the diagonal construction.
pub fn sparse_generation_rounds(h_max: u32) -> Vec<f64> {
    let mut x = 0.0f64;
    let mut out = Vec::with_capacity(h_max as usize);
    for h in 1..=h_max as u64 {
        for k in 0..h {
            x += 6.0 + (k * k + h * h) as f64;
        }
        out.push(x);
    }
    out
}

/// Diagonal construction of the sparse family `Θ_0..Θ_{k_max}` through `h_max`
/// generation rounds: at step `(h, k)` a `±` block pair is appended to `Θ_k`
/// at the running offset `X`, which then advances by `6 + k² + h²`.
pub fn build_sparse_theta_family(
    l_scale: f64,
    k_max: usize,
    h_max: u32,
) -> Result<Vec<BlockProfile>> {
    if !(l_scale >= 1.0 && l_scale.is_finite()) {
        return Err(Error::invalid("plateau scale L must satisfy L ≥ 1"));
    }
    if (h_max as usize) < k_max + 1 {
        return Err(Error::invalid(format!(
            "need h_max ≥ k_max + 1 rounds (got h_max = {h_max}, k_max = {k_max})"
        )));
    }
    let mut family: Vec<BlockProfile> = (0..=k_max)
        .map(|k| BlockProfile {
            l_scale,
            blocks: Vec::new(),
            kind: ProfileKind::Sparse,
            index: k,
            horizon: h_max,
        })
        .collect();
    let mut x = 0.0f64;
    for h in 1..=h_max as u64 {
        for k in 0..h {
            if (k as usize) <= k_max {
                family[k as usize].blocks.push((x, 1));
                family[k as usize].blocks.push((x + 3.0, -1));
            }
            x += 6.0 + (k * k + h * h) as f64;
        }
    }
    for p in &family {
        if p.blocks.is_empty() {
            return Err(Error::InsufficientHorizon(format!(
                "profile {} received no block within {h_max} rounds",
                p.index
            )));
        }
    }
    Ok(family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chi_trapezoid_values() {
        assert_eq!(chi_eval(-1.0), 0.0);
        assert_eq!(chi_eval(0.0), 0.0);
        assert_relative_eq!(chi_eval(0.5), 0.5);
        assert_eq!(chi_eval(1.0), 1.0);
        assert_eq!(chi_eval(1.7), 1.0);
        assert_eq!(chi_eval(2.0), 1.0);
        assert_relative_eq!(chi_eval(2.25), 0.75);
        assert_eq!(chi_eval(3.0), 0.0);
        assert_eq!(chi_eval(4.0), 0.0);
    }

    #[test]
    fn periodic_theta_landmark_values() {
        let l = 1.6976378608111915;
        let th = build_periodic_theta(l).unwrap();
        let cases = [
            (0.0, 0.0),
            (1.0, 0.5),
            (2.0, 1.0),
            (3.0, 1.0),
            (4.0, 1.0),
            (5.0, 0.5),
            (6.0, 0.0),
            (8.0, -1.0),
            (9.0, -1.0),
            (10.0, -1.0),
            (11.0, -0.5),
            (12.0, 0.0),
            (15.0, 1.0), // next period
        ];
        for (m, want) in cases {
            assert_relative_eq!(th.eval(m * l), want, epsilon = 1e-12);
        }
        // range invariant on a dense scan
        for i in 0..4800 {
            let v = th.eval(i as f64 * 0.01 * l);
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn periodic_plateau_centers_by_evaluation() {
        let l = 2.0;
        let th = build_periodic_theta(l).unwrap();
        assert_relative_eq!(plateau_center(&th, 1, 0.0).unwrap(), 3.0 * l);
        assert_relative_eq!(plateau_center(&th, -1, 0.0).unwrap(), 9.0 * l);
        assert_relative_eq!(plateau_center(&th, 1, 3.0 * l + 0.1).unwrap(), 15.0 * l);
        assert_relative_eq!(plateau_center(&th, -1, 10.0 * l).unwrap(), 21.0 * l);
    }

    #[test]
    fn sparse_family_first_blocks_match_construction() {
        let fam = build_sparse_theta_family(1.0, 6, 8).unwrap();
        let first: Vec<f64> = fam.iter().map(|p| p.blocks[0].0).collect();
        assert_eq!(first, vec![0.0, 17.0, 59.0, 149.0, 318.0, 605.0, 1057.0]);
        assert_eq!(fam[0].inf_supp(), 0.0);
    }

    #[test]
    fn sparse_round_ends_follow_quartic_band() {
        let ends = sparse_generation_rounds(8);
        assert_eq!(ends[0], 7.0);
        assert_eq!(ends[1], 28.0);
        for (i, &x) in ends.iter().enumerate() {
            let h = (i + 1) as f64;
            assert!(x >= 0.25 * h.powi(4) && x <= 8.0 * h.powi(4), "h={h}: X_end={x}");
        }
    }

    #[test]
    fn sparse_supports_disjoint_with_gaps() {
        let l = 1.5;
        let fam = build_sparse_theta_family(l, 4, 8).unwrap();
        // collect all (start, end) spans in block units with owner index
        let mut spans: Vec<(f64, f64, usize)> = Vec::new();
        for p in &fam {
            for &(s, _) in &p.blocks {
                spans.push((s, s + 3.0, p.index));
            }
        }
        spans.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in spans.windows(2) {
            let gap_x = 2.0 * l * (w[1].0 - w[0].1);
            if w[0].2 != w[1].2 {
                assert!(gap_x >= l, "inter-family gap too small: {:?} {:?}", w[0], w[1]);
            } else {
                assert!(gap_x >= 0.0, "overlap within a family: {:?} {:?}", w[0], w[1]);
            }
        }
        // dedicated Θ_0 / Θ_1 exhaustive check from the module contract
        let gap01 = fam[1]
            .blocks
            .iter()
            .flat_map(|b1| {
                fam[0].blocks.iter().map(move |b0| {
                    let lo = (b1.0 - (b0.0 + 3.0)).abs();
                    let hi = (b0.0 - (b1.0 + 3.0)).abs();
                    2.0 * l * lo.min(hi)
                })
            })
            .fold(f64::INFINITY, f64::min);
        assert!(gap01 >= l, "Θ0/Θ1 gap {gap01} < L");
    }

    #[test]
    fn sparse_plateau_center_is_verified_by_evaluation() {
        let l = 1.0;
        let fam = build_sparse_theta_family(l, 2, 6).unwrap();
        // Θ_1 first + plateau: block at X=17 → center 2L(17+1.5) = 37
        let c = plateau_center(&fam[1], 1, 0.0).unwrap();
        assert_relative_eq!(c, 37.0, epsilon = 1e-12);
        assert_relative_eq!(fam[1].eval(c), 1.0);
        // first − plateau of Θ_1: the paired block at X=20 → center 43
        let cm = plateau_center(&fam[1], -1, 0.0).unwrap();
        assert_relative_eq!(cm, 43.0, epsilon = 1e-12);
        assert_relative_eq!(fam[1].eval(cm), -1.0);
        // beyond horizon → error
        assert!(plateau_center(&fam[1], 1, 1e9).is_err());
    }

    #[test]
    fn horizon_validation() {
        assert!(build_sparse_theta_family(1.0, 5, 3).is_err());
        assert!(build_sparse_theta_family(0.5, 1, 4).is_err());
    }

    #[test]
    fn csv_round_trip_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.csv");
        let fam = build_sparse_theta_family(1.25, 1, 4).unwrap();
        fam[1].write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("start_block_units,sign\n"));
        let back: BlockProfile =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(back.blocks, fam[1].blocks);
    }
}
