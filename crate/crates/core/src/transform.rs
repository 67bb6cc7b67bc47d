//! Orthonormal patch transform: opponent color rotation followed by a
//! three-level 2-D Haar decomposition of each 8×8 channel.
//!
//! The 192 coefficients of a patch are split into 30 groups, stored
//! contiguously in this canonical order:
//!
//! ```text
//! group = channel * 9 + scale * 3 + orientation    (groups 0..27)
//!     scale:       0 = coarse (1 coeff), 1 = mid (4), 2 = fine (16)
//!     orientation: 0 = H (derivative along x), 1 = V (along y), 2 = D
//! group = 27 + channel                             (scaling coefficients)
//! ```
//!
//! Inside a band, coefficients are row-major. This order is part of the
//! checkpoint contract: the matcher's 30 outputs are index-aligned with it.

use crate::imgio::{CHANNELS, PATCH, PATCH_LEN};

pub const GROUPS: usize = 30;
pub const COEFFS: usize = PATCH_LEN;
pub const LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Self::Horizontal, Self::Vertical, Self::Diagonal];

    pub fn index(self) -> usize {
        match self {
            Self::Horizontal => 0,
            Self::Vertical => 1,
            Self::Diagonal => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Coarse,
    Mid,
    Fine,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Self::Coarse, Self::Mid, Self::Fine];

    pub fn index(self) -> usize {
        match self {
            Self::Coarse => 0,
            Self::Mid => 1,
            Self::Fine => 2,
        }
    }

    /// Side length of a band at this scale for 8×8 patches.
    pub fn band_side(self) -> usize {
        match self {
            Self::Coarse => 1,
            Self::Mid => 2,
            Self::Fine => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Detail { scale: Scale, orientation: Orientation },
    Scaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLabel {
    pub channel: usize,
    pub kind: GroupKind,
}

/// Label of group `g` in the canonical order.
pub fn group_label(g: usize) -> GroupLabel {
    assert!(g < GROUPS, "group index {g} out of range");
    if g >= 27 {
        return GroupLabel {
            channel: g - 27,
            kind: GroupKind::Scaling,
        };
    }
    GroupLabel {
        channel: g / 9,
        kind: GroupKind::Detail {
            scale: Scale::ALL[(g % 9) / 3],
            orientation: Orientation::ALL[g % 3],
        },
    }
}

pub fn group_size(g: usize) -> usize {
    match group_label(g).kind {
        GroupKind::Scaling => 1,
        GroupKind::Detail { scale, .. } => scale.band_side().pow(2),
    }
}

/// `GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]` is the storage range of group `g`.
pub static GROUP_OFFSETS: [usize; GROUPS + 1] = {
    let sizes = [1, 1, 1, 4, 4, 4, 16, 16, 16];
    let mut out = [0usize; GROUPS + 1];
    let mut g = 0;
    while g < GROUPS {
        let size = if g >= 27 { 1 } else { sizes[g % 9] };
        out[g + 1] = out[g] + size;
        g += 1;
    }
    out
};

/// Group index of every coefficient slot.
pub fn coefficient_groups() -> [usize; COEFFS] {
    let mut out = [0; COEFFS];
    for g in 0..GROUPS {
        for slot in &mut out[GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]] {
            *slot = g;
        }
    }
    out
}

/// The 192 transform coefficients of one patch, grouped.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandCoeffs {
    values: [f64; COEFFS],
}

impl Default for SubbandCoeffs {
    fn default() -> Self {
        Self::zeros()
    }
}

impl SubbandCoeffs {
    pub fn zeros() -> Self {
        Self {
            values: [0.0; COEFFS],
        }
    }

    pub fn from_values(values: [f64; COEFFS]) -> Self {
        Self { values }
    }

    /// Builds coefficients from per-group arrays; sizes must match the
    /// canonical group sizes.
    pub fn from_groups(groups: &[Vec<f64>]) -> crate::Result<Self> {
        if groups.len() != GROUPS {
            return Err(crate::Error::Contract(format!(
                "expected {GROUPS} coefficient groups, got {}",
                groups.len()
            )));
        }
        let mut values = [0.0; COEFFS];
        for (g, group) in groups.iter().enumerate() {
            if group.len() != group_size(g) {
                return Err(crate::Error::Contract(format!(
                    "group {g} has {} coefficients, expected {}",
                    group.len(),
                    group_size(g)
                )));
            }
            values[GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]].copy_from_slice(group);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64; COEFFS] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64; COEFFS] {
        &mut self.values
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        &mut self.values[GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]]
    }

    pub fn group_energy(&self, g: usize) -> f64 {
        self.group(g).iter().map(|v| v * v).sum()
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wavelet {
    HaarOrthonormal,
}

/// Parameters of the patch transform. Only the color matrix is free; it
/// must be orthonormal so the composed transform stays orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub color_matrix: [[f64; 3]; 3],
    pub wavelet: Wavelet,
    pub levels: usize,
    pub patch_size: usize,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            color_matrix: default_color_matrix(),
            wavelet: Wavelet::HaarOrthonormal,
            levels: LEVELS,
            patch_size: PATCH,
        }
    }
}

impl TransformSpec {
    pub fn with_color_matrix(color_matrix: [[f64; 3]; 3]) -> crate::Result<Self> {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| color_matrix[i][k] * color_matrix[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        if worst > 1e-12 {
            return Err(crate::Error::Contract(format!(
                "color matrix is not orthonormal (max deviation {worst:e})"
            )));
        }
        Ok(Self {
            color_matrix,
            ..Self::default()
        })
    }
}

/// Opponent color transform: luminance, red-blue, and green-magenta axes.
pub fn default_color_matrix() -> [[f64; 3]; 3] {
    let a = 1.0 / 3f64.sqrt();
    let b = 1.0 / 2f64.sqrt();
    let c = 1.0 / 6f64.sqrt();
    [[a, a, a], [b, 0.0, -b], [c, -2.0 * c, c]]
}

/// One analysis level on the top-left `n×n` block of an 8-wide plane.
/// Writes LL back into the top-left `n/2×n/2` block and returns H, V, D.
fn haar_forward_level(plane: &mut [f64; 64], n: usize) -> [[f64; 16]; 3] {
    let half = n / 2;
    let mut ll = [0.0; 16];
    let mut bands = [[0.0; 16]; 3];
    for r in 0..half {
        for c in 0..half {
            let a = plane[2 * r * PATCH + 2 * c];
            let b = plane[2 * r * PATCH + 2 * c + 1];
            let d0 = plane[(2 * r + 1) * PATCH + 2 * c];
            let d1 = plane[(2 * r + 1) * PATCH + 2 * c + 1];
            let i = r * half + c;
            ll[i] = (a + b + d0 + d1) / 2.0;
            bands[0][i] = (a - b + d0 - d1) / 2.0;
            bands[1][i] = (a + b - d0 - d1) / 2.0;
            bands[2][i] = (a - b - d0 + d1) / 2.0;
        }
    }
    for r in 0..half {
        for c in 0..half {
            plane[r * PATCH + c] = ll[r * half + c];
        }
    }
    bands
}

fn haar_inverse_level(plane: &mut [f64; 64], n: usize, bands: [&[f64]; 3]) {
    let half = n / 2;
    let mut ll = [0.0; 16];
    for r in 0..half {
        for c in 0..half {
            ll[r * half + c] = plane[r * PATCH + c];
        }
    }
    for r in 0..half {
        for c in 0..half {
            let i = r * half + c;
            let (s, h, v, d) = (ll[i], bands[0][i], bands[1][i], bands[2][i]);
            plane[2 * r * PATCH + 2 * c] = (s + h + v + d) / 2.0;
            plane[2 * r * PATCH + 2 * c + 1] = (s - h + v - d) / 2.0;
            plane[(2 * r + 1) * PATCH + 2 * c] = (s + h - v - d) / 2.0;
            plane[(2 * r + 1) * PATCH + 2 * c + 1] = (s - h - v + d) / 2.0;
        }
    }
}

/// Forward transform of an 8×8×3 raster (row-major, channel-interleaved).
pub fn analyze(patch: &[f64], spec: &TransformSpec) -> SubbandCoeffs {
    assert_eq!(patch.len(), PATCH_LEN, "analyze expects an 8x8x3 patch");
    let m = &spec.color_matrix;
    let mut planes = [[0.0f64; 64]; CHANNELS];
    for px in 0..64 {
        let rgb = &patch[px * CHANNELS..px * CHANNELS + CHANNELS];
        for (k, plane) in planes.iter_mut().enumerate() {
            plane[px] = m[k][0] * rgb[0] + m[k][1] * rgb[1] + m[k][2] * rgb[2];
        }
    }
    let mut out = SubbandCoeffs::zeros();
    for (ch, plane) in planes.iter_mut().enumerate() {
        let mut n = PATCH;
        for scale in [Scale::Fine, Scale::Mid, Scale::Coarse] {
            let bands = haar_forward_level(plane, n);
            let len = scale.band_side().pow(2);
            for o in 0..3 {
                let g = ch * 9 + scale.index() * 3 + o;
                out.group_mut(g).copy_from_slice(&bands[o][..len]);
            }
            n /= 2;
        }
        out.group_mut(27 + ch)[0] = plane[0];
    }
    out
}

/// Inverse of [`analyze`] (the transpose, since the transform is orthonormal).
pub fn synthesize(coeffs: &SubbandCoeffs, spec: &TransformSpec) -> [f64; PATCH_LEN] {
    let mut planes = [[0.0f64; 64]; CHANNELS];
    for (ch, plane) in planes.iter_mut().enumerate() {
        plane[0] = coeffs.group(27 + ch)[0];
        let mut n = 2;
        for scale in [Scale::Coarse, Scale::Mid, Scale::Fine] {
            let base = ch * 9 + scale.index() * 3;
            haar_inverse_level(
                plane,
                n,
                [coeffs.group(base), coeffs.group(base + 1), coeffs.group(base + 2)],
            );
            n *= 2;
        }
    }
    let m = &spec.color_matrix;
    let mut out = [0.0; PATCH_LEN];
    for px in 0..64 {
        for c in 0..CHANNELS {
            out[px * CHANNELS + c] =
                m[0][c] * planes[0][px] + m[1][c] * planes[1][px] + m[2][c] * planes[2][px];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_patch(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..PATCH_LEN).map(|_| rng.random_range(-100.0..300.0)).collect()
    }

    #[test]
    fn group_layout() {
        assert_eq!(GROUP_OFFSETS[GROUPS], COEFFS);
        let per_channel: usize = (0..9).map(group_size).sum::<usize>() + 1;
        assert_eq!(per_channel, 64);
        assert_eq!((0..GROUPS).filter(|&g| group_size(g) == 16).count(), 9);
        assert_eq!((0..GROUPS).filter(|&g| group_size(g) == 4).count(), 9);
        assert_eq!((0..GROUPS).filter(|&g| group_size(g) == 1).count(), 12);
        assert_eq!(group_label(29).kind, GroupKind::Scaling);
        assert_eq!(
            group_label(14),
            GroupLabel {
                channel: 1,
                kind: GroupKind::Detail {
                    scale: Scale::Mid,
                    orientation: Orientation::Diagonal
                }
            }
        );
    }

    #[test]
    fn color_matrix_is_orthonormal() {
        let m = default_color_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        // first column
        assert!((m[0][0] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((m[1][0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((m[2][0] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        // gray maps to luminance only
        let v = 7.0;
        let out: Vec<f64> = (0..3).map(|k| m[k].iter().sum::<f64>() * v).collect();
        assert!((out[0] - 3f64.sqrt() * v).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal_color() {
        assert!(TransformSpec::with_color_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.1]]).is_err());
        assert!(TransformSpec::with_color_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_ok());
    }

    #[test]
    fn constant_patch_goes_to_luminance_dc() {
        let spec = TransformSpec::default();
        let c = analyze(&[1.0; PATCH_LEN], &spec);
        for g in 0..27 {
            assert!(c.group(g).iter().all(|v| v.abs() < 1e-12), "group {g}");
        }
        assert!((c.group(27)[0] - 8.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!(c.group(28)[0].abs() < 1e-12);
        assert!(c.group(29)[0].abs() < 1e-12);
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = TransformSpec::default();
        assert_eq!(analyze(&[0.0; PATCH_LEN], &spec), SubbandCoeffs::zeros());
        assert_eq!(synthesize(&SubbandCoeffs::zeros(), &spec), [0.0; PATCH_LEN]);
    }

    #[test]
    fn luminance_dc_synthesizes_ones() {
        let spec = TransformSpec::default();
        let mut c = SubbandCoeffs::zeros();
        c.group_mut(27)[0] = 8.0 * 3f64.sqrt();
        let p = synthesize(&c, &spec);
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_energy() {
        let spec = TransformSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = random_patch(&mut rng);
            let c = analyze(&p, &spec);
            let back = synthesize(&c, &spec);
            let err = p.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "max abs {err}");
            let e_p: f64 = p.iter().map(|v| v * v).sum();
            let e_g: f64 = (0..GROUPS).map(|g| c.group_energy(g)).sum();
            assert!(((e_g - e_p) / e_p).abs() < 1e-12);
        }
    }

    #[test]
    fn from_groups_validates_sizes() {
        let mut groups: Vec<Vec<f64>> = (0..GROUPS).map(|g| vec![g as f64; group_size(g)]).collect();
        let c = SubbandCoeffs::from_groups(&groups).unwrap();
        assert_eq!(c.group(6), &[6.0; 16]);
        groups[3].push(0.0);
        assert!(SubbandCoeffs::from_groups(&groups).is_err());
        assert!(SubbandCoeffs::from_groups(&groups[..29]).is_err());
    }

    #[test]
    fn white_noise_stays_white() {
        let spec = TransformSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 10.0;
        let draws = 100_000;
        let mut sum = [0.0f64; COEFFS];
        let mut sq = [0.0f64; COEFFS];
        let mut p = [0.0f64; PATCH_LEN];
        for _ in 0..draws {
            for v in p.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = sigma * e;
            }
            let c = analyze(&p, &spec);
            for (i, v) in c.values().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..COEFFS {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "coeff {i}: var {var}");
        }
    }

    #[test]
    fn horizontal_step_lands_in_horizontal_bands() {
        let spec = TransformSpec::default();
        // intensity steps along x between columns 2 and 3
        let mut p = [0.0; PATCH_LEN];
        for r in 0..PATCH {
            for c in 3..PATCH {
                for ch in 0..CHANNELS {
                    p[(r * PATCH + c) * CHANNELS + ch] = 100.0 + 20.0 * ch as f64;
                }
            }
        }
        let coeffs = analyze(&p, &spec);
        let energy_of = |o: Orientation| -> f64 {
            (0..GROUPS)
                .filter(|&g| matches!(group_label(g).kind, GroupKind::Detail { orientation, .. } if orientation == o))
                .map(|g| coeffs.group_energy(g))
                .sum()
        };
        let h = energy_of(Orientation::Horizontal);
        let d = energy_of(Orientation::Diagonal);
        assert!(h > 1.0);
        assert!(h > 10.0 * d, "h={h} d={d}");
        assert!(energy_of(Orientation::Vertical) < 1e-18);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn orthonormal_for_any_patch(vals in proptest::collection::vec(-1e3f64..1e3, PATCH_LEN)) {
                let spec = TransformSpec::default();
                let c = analyze(&vals, &spec);
                let e_p: f64 = vals.iter().map(|v| v * v).sum();
                prop_assert!((c.energy() - e_p).abs() <= 1e-12 * e_p.max(1e-300));
                let back = synthesize(&c, &spec);
                for (a, b) in vals.iter().zip(back.iter()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}
