//! Physics-aware augmentation of training tiles.
//!
//! A transform is stored by its content map: a tile shows the source content
//! rotated by `angle`, magnified by `scale` and mirrored along the flagged
//! axes. The linear part of that map is `L = scale * R(angle) * F`. Tiles are
//! filled by looking up `q = L^-1 p + offset` in the source, and vector
//! fields additionally get their values multiplied by `L`, so that a flow
//! moving right in the source moves in the rotated direction in the tile.
//! In 3D the rotation acts in the x-y plane.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{curl, pad3, GridField};

type Mat3 = [[f64; 3]; 3];

/// How a field responds to a spatial transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Resampled only (density).
    Passive,
    /// Resampled and its vector values transformed (velocity).
    Directional,
    /// Recomputed from the augmented directional field (vorticity).
    Derived,
}

/// Sampling ranges for random transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub scale: (f64, f64),
    /// Rotation angle range in degrees.
    pub angle_deg: (f64, f64),
    /// Mirror each axis with probability 1/2.
    pub reflect: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            scale: (0.85, 1.15),
            angle_deg: (-90.0, 90.0),
            reflect: true,
        }
    }
}

impl AugmentRanges {
    /// No scaling, rotation or reflection; only the translation is random.
    pub fn translation_only() -> Self {
        Self {
            scale: (1.0, 1.0),
            angle_deg: (0.0, 0.0),
            reflect: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationTransform {
    dim: usize,
    scale: f64,
    angle_deg: f64,
    flips: [bool; 3],
    linear: Mat3,
    sampling: Mat3,
    offset: [f64; 3],
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

impl AugmentationTransform {
    pub fn new(
        dim: usize,
        scale: f64,
        angle_deg: f64,
        flips: [bool; 3],
        offset: [f64; 3],
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Invalid(format!("unsupported dimension {dim}")));
        }
        if !(scale.is_finite() && scale > 0.0 && angle_deg.is_finite()) {
            return Err(Error::Invalid(format!(
                "bad transform scale {scale} / angle {angle_deg}"
            )));
        }
        let (sn, cs) = angle_deg.to_radians().sin_cos();
        let rot = [[cs, -sn, 0.0], [sn, cs, 0.0], [0.0, 0.0, 1.0]];
        let mut refl = [[0.0; 3]; 3];
        for a in 0..3 {
            refl[a][a] = if flips[a] && a < dim { -1.0 } else { 1.0 };
        }
        let mut linear = matmul(&rot, &refl);
        linear.iter_mut().flatten().for_each(|v| *v *= scale);
        // (s R F)^-1 = F R^T / s
        let mut rot_t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot_t[i][j] = rot[j][i];
            }
        }
        let mut sampling = matmul(&refl, &rot_t);
        sampling.iter_mut().flatten().for_each(|v| *v /= scale);
        if dim == 2 {
            linear[2][2] = 1.0;
            sampling[2][2] = 1.0;
        } else {
            linear[2][2] = scale * refl[2][2];
            sampling[2][2] = refl[2][2] / scale;
        }
        let mut flips = flips;
        if dim == 2 {
            flips[2] = false;
        }
        let mut offset = offset;
        if dim == 2 {
            offset[2] = 0.0;
        }
        Ok(Self {
            dim,
            scale,
            angle_deg,
            flips,
            linear,
            sampling,
            offset,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, 1.0, 0.0, [false; 3], [0.0; 3]).expect("identity transform")
    }

    /// Integer or fractional shift: `out(p) = f(p + offset)`.
    pub fn translation(dim: usize, offset: &[f64]) -> Self {
        let o = [offset[0], offset[1], offset.get(2).copied().unwrap_or(0.0)];
        Self::new(dim, 1.0, 0.0, [false; 3], o).expect("translation transform")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    pub fn flips(&self) -> [bool; 3] {
        self.flips
    }

    pub fn offset(&self) -> [f64; 3] {
        self.offset
    }

    /// Linear part applied to vector values, `d x d`.
    pub fn linear(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.linear[i][..self.dim].to_vec())
            .collect()
    }

    /// Homogeneous `(d+1) x (d+1)` matrix taking tile positions to source
    /// positions.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut m = vec![vec![0.0; d + 1]; d + 1];
        for i in 0..d {
            m[i][..d].copy_from_slice(&self.sampling[i][..d]);
            m[i][d] = self.offset[i];
        }
        m[d][d] = 1.0;
        m
    }

    /// Inverse of [`Self::matrix`]: source positions to tile positions.
    pub fn inverse_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut m = vec![vec![0.0; d + 1]; d + 1];
        for i in 0..d {
            m[i][..d].copy_from_slice(&self.linear[i][..d]);
            m[i][d] = -(0..d)
                .map(|k| self.linear[i][k] * self.offset[k])
                .sum::<f64>();
        }
        m[d][d] = 1.0;
        m
    }

    /// Source position read by tile cell `p`.
    pub fn map(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for (i, qi) in q.iter_mut().enumerate().take(self.dim) {
            *qi = (0..self.dim)
                .map(|k| self.sampling[i][k] * p[k])
                .sum::<f64>()
                + self.offset[i];
        }
        q
    }

    /// The same transform expressed on a grid `factor` times finer, such
    /// that fine cells stay aligned with the coarse cells they refine.
    pub fn for_resolution(&self, factor: usize) -> Self {
        let f = factor as f64;
        let c = (f - 1.0) / 2.0;
        let mut t = self.clone();
        for i in 0..self.dim {
            let row: f64 = (0..self.dim).map(|k| self.sampling[i][k]).sum();
            t.offset[i] = f * self.offset[i] + c * (1.0 - row);
        }
        t
    }
}

fn corners(lo: [f64; 3], hi: [f64; 3], dim: usize) -> impl Iterator<Item = [f64; 3]> {
    (0..1usize << dim).map(move |k| {
        let mut p = [0.0; 3];
        for a in 0..dim {
            p[a] = if (k >> a) & 1 == 1 { hi[a] } else { lo[a] };
        }
        p
    })
}

/// Draws a random transform for a `tile` cut from a `source` grid.
///
/// `factor` is the resolution ratio of a paired finer grid that will use
/// [`AugmentationTransform::for_resolution`]; the translation is chosen so
/// the finer tile also stays inside its source. Use 1 for a single grid.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &AugmentRanges,
    tile: &[usize],
    source: &[usize],
    factor: usize,
) -> Result<AugmentationTransform> {
    let dim = source.len();
    if tile.len() != dim || factor == 0 {
        return Err(Error::Shape(format!(
            "tile {tile:?} does not match source {source:?}"
        )));
    }
    let draw = |rng: &mut R, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let scale = draw(rng, ranges.scale.0, ranges.scale.1);
    let angle = draw(rng, ranges.angle_deg.0, ranges.angle_deg.1);
    let mut flips = [false; 3];
    if ranges.reflect {
        for f in flips.iter_mut().take(dim) {
            *f = rng.random_bool(0.5);
        }
    }
    let probe = AugmentationTransform::new(dim, scale, angle, flips, [0.0; 3])?;
    let margin = (factor as f64 - 1.0) / (2.0 * factor as f64);
    let tile3 = pad3(tile, 1);
    let src3 = pad3(source, 1);
    let lo = [-margin; 3];
    let hi = [0, 1, 2].map(|a| tile3[a] as f64 - 1.0 + margin);
    let mut mn = [f64::INFINITY; 3];
    let mut mx = [f64::NEG_INFINITY; 3];
    for c in corners(lo, hi, dim) {
        let q = probe.map(c);
        for a in 0..dim {
            mn[a] = mn[a].min(q[a]);
            mx[a] = mx[a].max(q[a]);
        }
    }
    let mut offset = [0.0; 3];
    for a in 0..dim {
        let (olo, ohi) = (-mn[a], src3[a] as f64 - 1.0 - mx[a]);
        if olo > ohi + 1e-9 {
            return Err(Error::TileExceedsSource);
        }
        offset[a] = draw(rng, olo, ohi.max(olo));
    }
    AugmentationTransform::new(dim, scale, angle, flips, offset)
}

fn check_tile(f: &GridField, t: &AugmentationTransform, tile: &[usize]) -> Result<()> {
    if f.dim() != t.dim() || tile.len() != t.dim() {
        return Err(Error::Shape(format!(
            "field of dimension {} with transform of dimension {} and tile {tile:?}",
            f.dim(),
            t.dim()
        )));
    }
    Ok(())
}

fn resample(
    f: &GridField,
    t: &AugmentationTransform,
    tile: &[usize],
    mut post: impl FnMut(&mut [f32]),
) -> Result<GridField> {
    check_tile(f, t, tile)?;
    let ch = f.channels();
    let mut out = GridField::zeros(tile, ch)?;
    let ext = out.extent();
    let n = out.cells();
    let mut buf = vec![0.0f32; ch];
    let mut i = 0;
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let q = t.map([x as f64, y as f64, z as f64]);
                f.sample_linear_into(&q[..f.dim()], &mut buf);
                post(&mut buf);
                let data = out.data_mut();
                for (c, &v) in buf.iter().enumerate() {
                    data[c * n + i] = v;
                }
                i += 1;
            }
        }
    }
    Ok(out)
}

/// `out(p) = f(A p)` for every tile cell.
pub fn apply_passive(
    f: &GridField,
    t: &AugmentationTransform,
    tile: &[usize],
) -> Result<GridField> {
    resample(f, t, tile, |_| {})
}

/// `out(p) = L v(A p)` for every tile cell.
pub fn apply_directional(
    v: &GridField,
    t: &AugmentationTransform,
    tile: &[usize],
) -> Result<GridField> {
    let d = t.dim();
    if v.channels() != d {
        return Err(Error::Shape(format!(
            "directional field needs {d} channels, got {}",
            v.channels()
        )));
    }
    let l = t.linear;
    resample(v, t, tile, |val| {
        let src = [
            val[0] as f64,
            val[1] as f64,
            if d == 3 { val[2] as f64 } else { 0.0 },
        ];
        for (i, out) in val.iter_mut().enumerate() {
            *out = (0..d).map(|k| l[i][k] * src[k]).sum::<f64>() as f32;
        }
    })
}

/// Vorticity of an augmented velocity field.
pub fn recompute_derived(v: &GridField) -> Result<GridField> {
    curl(v)
}

/// Augments a bundle of fields with one transform. Derived entries are
/// recomputed from the bundle's directional entry.
pub fn augment_bundle(
    fields: &[(FieldKind, &GridField)],
    t: &AugmentationTransform,
    tile: &[usize],
) -> Result<Vec<GridField>> {
    let mut out: Vec<Option<GridField>> = Vec::with_capacity(fields.len());
    let mut velocity = None;
    for (kind, f) in fields {
        out.push(match kind {
            FieldKind::Passive => Some(apply_passive(f, t, tile)?),
            FieldKind::Directional => {
                let v = apply_directional(f, t, tile)?;
                velocity.get_or_insert_with(|| v.clone());
                Some(v)
            }
            FieldKind::Derived => None,
        });
    }
    out.into_iter()
        .map(|slot| match slot {
            Some(f) => Ok(f),
            None => velocity
                .as_ref()
                .ok_or_else(|| Error::Invalid("derived field without a directional field".into()))
                .and_then(recompute_derived),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{downsample, ScaleKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed(scale: f64, angle: f64, reflect: bool) -> AugmentRanges {
        AugmentRanges {
            scale: (scale, scale),
            angle_deg: (angle, angle),
            reflect,
        }
    }

    fn smooth(shape: &[usize], ch: usize) -> GridField {
        GridField::from_fn(shape, ch, |p, c| {
            let k = c as f64 + 1.0;
            ((0.21 * k * p[0]).sin() * (0.17 * p[1] + 0.3 * k).cos() + 0.05 * p[2]) as f32
        })
        .unwrap()
    }

    fn corners_inside(t: &AugmentationTransform, tile: &[usize], source: &[usize]) -> bool {
        let hi = [tile[0] as f64 - 1.0, tile[1] as f64 - 1.0, 0.0];
        corners([0.0; 3], hi, 2).all(|c| {
            let q = t.map(c);
            (0..2).all(|a| q[a] >= -1e-9 && q[a] <= source[a] as f64 - 1.0 + 1e-9)
        })
    }

    #[test]
    fn identity_request_on_full_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_transform(&mut rng, &fixed(1.0, 0.0, false), &[12, 9], &[12, 9], 1).unwrap();
        assert_eq!(t.offset(), [0.0; 3]);
        let f = smooth(&[12, 9], 1);
        assert_eq!(apply_passive(&f, &t, &[12, 9]).unwrap(), f);
        let v = smooth(&[12, 9], 2);
        assert_eq!(apply_directional(&v, &t, &[12, 9]).unwrap(), v);
    }

    #[test]
    fn enlarged_rotated_tile_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = sample_transform(&mut rng, &fixed(1.15, 90.0, false), &[16, 16], &[64, 64], 1)
                .unwrap();
            assert_eq!(t.angle_deg(), 90.0);
            assert!(corners_inside(&t, &[16, 16], &[64, 64]));
        }
    }

    #[test]
    fn sampled_transforms_never_leave_the_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ranges = AugmentRanges::default();
        let mut violations = 0;
        for _ in 0..10_000 {
            let t = sample_transform(&mut rng, &ranges, &[16, 16], &[64, 64], 1).unwrap();
            assert!((0.85..=1.15).contains(&t.scale()) && t.angle_deg().abs() <= 90.0);
            if !corners_inside(&t, &[16, 16], &[64, 64]) {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
        for _ in 0..2_000 {
            let t = sample_transform(&mut rng, &ranges, &[8, 8], &[16, 16], 4).unwrap();
            assert!(corners_inside(&t, &[8, 8], &[16, 16]));
            assert!(corners_inside(&t.for_resolution(4), &[32, 32], &[64, 64]));
        }
    }

    #[test]
    fn oversized_tile_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sample_transform(&mut rng, &fixed(0.85, 0.0, false), &[64, 64], &[64, 64], 1);
        assert!(matches!(r, Err(Error::TileExceedsSource)));
        let r = sample_transform(&mut rng, &AugmentRanges::default(), &[20], &[64, 64], 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn integer_translation_is_exact() {
        let f = smooth(&[10, 8], 2);
        let t = AugmentationTransform::translation(2, &[3.0, 2.0]);
        let out = apply_passive(&f, &t, &[5, 4]).unwrap();
        assert_eq!(out, f.crop(&[3, 2], &[5, 4]).unwrap());
    }

    #[test]
    fn quarter_turn_matches_array_rotation() {
        let n = 9;
        let f = smooth(&[n, n], 1);
        let t = AugmentationTransform::new(2, 1.0, 90.0, [false; 3], [0.0, (n - 1) as f64, 0.0])
            .unwrap();
        let out = apply_passive(&f, &t, &[n, n]).unwrap();
        // content at (a, b) moves to (n-1-b, a)
        for a in 0..n {
            for b in 0..n {
                let want = f.at(0, a, b, 0);
                let got = out.at(0, n - 1 - b, a, 0);
                assert!((want - got).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn directional_values_follow_the_transform() {
        let v = GridField::constant_vector(&[6, 6], &[1.0, 0.0]).unwrap();
        let t = AugmentationTransform::new(2, 1.0, 90.0, [false; 3], [0.0, 5.0, 0.0]).unwrap();
        let out = apply_directional(&v, &t, &[6, 6]).unwrap();
        assert!(out.channel(0).iter().all(|x| x.abs() < 1e-6));
        assert!(out.channel(1).iter().all(|y| (y - 1.0).abs() < 1e-6));

        let v = GridField::constant_vector(&[6, 6], &[1.0, 2.0]).unwrap();
        let t =
            AugmentationTransform::new(2, 1.0, 0.0, [true, false, false], [5.0, 0.0, 0.0]).unwrap();
        let out = apply_directional(&v, &t, &[6, 6]).unwrap();
        assert!(out.channel(0).iter().all(|x| (x + 1.0).abs() < 1e-6));
        assert!(out.channel(1).iter().all(|y| (y - 2.0).abs() < 1e-6));

        let t = AugmentationTransform::new(2, 1.1, 0.0, [false; 3], [0.0; 3]).unwrap();
        let out = apply_directional(&v, &t, &[4, 4]).unwrap();
        assert!(out.channel(1).iter().all(|y| (y - 2.2).abs() < 1e-6));
    }

    #[test]
    fn derived_fields_are_recomputed() {
        let zero = GridField::zeros(&[8, 8], 2).unwrap();
        assert_eq!(recompute_derived(&zero).unwrap().max_abs(), 0.0);
        let c = 3.5;
        let v = GridField::from_fn(&[8, 8], 2, |p, ch| {
            (if ch == 0 {
                -0.5 * (p[1] - c)
            } else {
                0.5 * (p[0] - c)
            }) as f32
        })
        .unwrap();
        let aug = apply_directional(&v, &AugmentationTransform::identity(2), &[8, 8]).unwrap();
        let w = recompute_derived(&aug).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((w.at(0, x, y, 0) - 1.0).abs() < 1e-4);
            }
        }
    }

    fn interior_max_diff(a: &GridField, b: &GridField, sign: f32) -> f32 {
        let [nx, ny, _] = a.extent();
        let mut worst = 0.0f32;
        for y in 2..ny - 2 {
            for x in 2..nx - 2 {
                worst = worst.max((a.at(0, x, y, 0) - sign * b.at(0, x, y, 0)).abs());
            }
        }
        worst
    }

    #[test]
    fn vorticity_commutes_with_rotation() {
        let n = 24;
        let v = GridField::from_fn(&[n, n], 2, |p, ch| {
            let (x, y) = (p[0] / 6.0, p[1] / 6.0);
            (if ch == 0 {
                (y).sin() * (0.5 * x).cos()
            } else {
                (0.7 * x).sin() + 0.3 * y
            }) as f32
        })
        .unwrap();
        let t = AugmentationTransform::new(2, 1.0, 90.0, [false; 3], [0.0, (n - 1) as f64, 0.0])
            .unwrap();
        let tile = [n, n];
        let direct = recompute_derived(&apply_directional(&v, &t, &tile).unwrap()).unwrap();
        let passive = apply_passive(&curl(&v).unwrap(), &t, &tile).unwrap();
        assert!(interior_max_diff(&direct, &passive, 1.0) < 1e-3);

        let t = AugmentationTransform::new(
            2,
            1.0,
            0.0,
            [true, false, false],
            [(n - 1) as f64, 0.0, 0.0],
        )
        .unwrap();
        let direct = recompute_derived(&apply_directional(&v, &t, &tile).unwrap()).unwrap();
        let passive = apply_passive(&curl(&v).unwrap(), &t, &tile).unwrap();
        assert!(interior_max_diff(&direct, &passive, -1.0) < 1e-3);
    }

    #[test]
    fn bundle_recomputes_vorticity() {
        let rho = smooth(&[12, 12], 1);
        let v = smooth(&[12, 12], 2);
        let w = curl(&v).unwrap();
        let t =
            AugmentationTransform::new(2, 1.0, 0.0, [false, true, false], [2.0, 9.0, 0.0]).unwrap();
        let out = augment_bundle(
            &[
                (FieldKind::Passive, &rho),
                (FieldKind::Directional, &v),
                (FieldKind::Derived, &w),
            ],
            &t,
            &[8, 8],
        )
        .unwrap();
        assert_eq!(out[2], curl(&out[1]).unwrap());
        assert_eq!(out[0], apply_passive(&rho, &t, &[8, 8]).unwrap());
        assert!(augment_bundle(&[(FieldKind::Derived, &w)], &t, &[8, 8]).is_err());
    }

    #[test]
    fn paired_resolutions_stay_aligned() {
        let hi = GridField::from_fn(&[64, 64], 1, |p, _| {
            let r2 = (p[0] - 30.0).powi(2) + (p[1] - 36.0).powi(2);
            (-r2 / (2.0 * 20.0f64.powi(2))).exp() as f32
        })
        .unwrap();
        let lo = downsample(&hi, 4, ScaleKind::Passive).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let max_err = |a: &GridField, b: &GridField| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max)
        };
        let (mut worst, mut worst_shifted) = (0.0f32, f32::INFINITY);
        for _ in 0..50 {
            let t = sample_transform(&mut rng, &AugmentRanges::default(), &[8, 8], &[16, 16], 4)
                .unwrap();
            let a_lo = apply_passive(&lo, &t, &[8, 8]).unwrap();
            let t_hi = t.for_resolution(4);
            let a_hi = apply_passive(&hi, &t_hi, &[32, 32]).unwrap();
            worst = worst.max(max_err(
                &a_lo,
                &downsample(&a_hi, 4, ScaleKind::Passive).unwrap(),
            ));
            // a two-cell misregistration of the fine tile must be detectable
            let o = t_hi.offset();
            let shifted = AugmentationTransform::new(
                2,
                t.scale(),
                t.angle_deg(),
                t.flips(),
                [o[0] + 2.0, o[1], 0.0],
            )
            .unwrap();
            let a_shift = apply_passive(&hi, &shifted, &[32, 32]).unwrap();
            worst_shifted = worst_shifted.min(max_err(
                &a_lo,
                &downsample(&a_shift, 4, ScaleKind::Passive).unwrap(),
            ));
        }
        assert!(worst < 1e-2, "{worst}");
        assert!(worst_shifted > worst, "{worst_shifted} vs {worst}");
    }

    #[test]
    fn three_dimensional_transform() {
        let v = GridField::constant_vector(&[5, 5, 5], &[1.0, 0.0, 0.5]).unwrap();
        let t = AugmentationTransform::new(3, 1.0, 90.0, [false, false, true], [0.0, 4.0, 4.0])
            .unwrap();
        let out = apply_directional(&v, &t, &[5, 5, 5]).unwrap();
        assert!(out.channel(0).iter().all(|x| x.abs() < 1e-6));
        assert!(out.channel(1).iter().all(|y| (y - 1.0).abs() < 1e-6));
        assert!(out.channel(2).iter().all(|z| (z + 0.5).abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = sample_transform(
            &mut rng,
            &AugmentRanges::default(),
            &[4, 4, 4],
            &[12, 12, 12],
            1,
        )
        .unwrap();
        assert_eq!(
            apply_passive(&smooth(&[12, 12, 12], 1), &t, &[4, 4, 4])
                .unwrap()
                .shape(),
            &[4, 4, 4]
        );
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_transform(&mut rng, &AugmentRanges::default(), &[16, 16], &[64, 64], 4).unwrap()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    proptest! {
        #[test]
        fn matrix_and_inverse_compose_to_identity(
            s in 0.5f64..2.0, a in -180.0f64..180.0, fx: bool, fy: bool, ox in -5.0f64..5.0, oy in -5.0f64..5.0
        ) {
            let t = AugmentationTransform::new(2, s, a, [fx, fy, false], [ox, oy, 0.0]).unwrap();
            let (m, inv) = (t.matrix(), t.inverse_matrix());
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((v - want).abs() < 1e-9);
                }
            }
            // linear part is a similarity: L^T L = s^2 I
            let l = t.linear();
            let g01: f64 = (0..2).map(|k| l[k][0] * l[k][1]).sum();
            let g00: f64 = (0..2).map(|k| l[k][0] * l[k][0]).sum();
            prop_assert!(g01.abs() < 1e-9 && (g00 - s * s).abs() < 1e-9);
        }
    }
}
