//! Rigid alignment by maximizing normalized cross-correlation.
//!
//! The pose is three Euler angles (applied x, then y, then z) about a fixed
//! rotation center plus a translation in mm. The optimizer is a
//! derivative-free coordinate descent with shrinking steps, run coarse to
//! fine over a 2x pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{self, Boundary, GridMeta, Interp, Mask, Volume};

pub type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[c][r];
        }
    }
    m
}

#[inline]
fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation `Rz(rz) * Ry(ry) * Rx(rx)`.
pub fn euler_zyx(rx: f64, ry: f64, rz: f64) -> Mat3 {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    let rxm = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let rym = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rzm = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rzm, &mat_mul(&rym, &rxm))
}

/// `T(x) = R (x - center) + center + translation`, mapping moving-image
/// coordinates onto fixed-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidTransformJson", into = "RigidTransformJson")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RigidTransformJson {
    rotation: Vec<f64>,
    translation: [f64; 3],
    center: [f64; 3],
}

impl From<RigidTransform> for RigidTransformJson {
    fn from(t: RigidTransform) -> Self {
        RigidTransformJson {
            rotation: t.rotation.iter().flatten().copied().collect(),
            translation: t.translation,
            center: t.center,
        }
    }
}

impl TryFrom<RigidTransformJson> for RigidTransform {
    type Error = String;

    fn try_from(j: RigidTransformJson) -> std::result::Result<Self, String> {
        if j.rotation.len() != 9 {
            return Err(format!("rotation needs 9 numbers, got {}", j.rotation.len()));
        }
        let r = &j.rotation;
        let t = RigidTransform {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: j.translation,
            center: j.center,
        };
        t.validate().map_err(|e| e.to_string())?;
        Ok(t)
    }
}

impl RigidTransform {
    pub fn identity(center: [f64; 3]) -> Self {
        RigidTransform {
            rotation: IDENTITY,
            translation: [0.0; 3],
            center,
        }
    }

    pub fn from_euler(angles: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        RigidTransform {
            rotation: euler_zyx(angles[0], angles[1], angles[2]),
            translation,
            center,
        }
    }

    /// Orthonormality and det = +1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let max_dev = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| (rtr[r][c] - IDENTITY[r][c]).abs())
            .fold(0.0, f64::max);
        let d = det(&self.rotation);
        if max_dev >= 1e-6 || (d - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "rotation is not a proper rotation (|R^T R - I| = {max_dev:e}, det = {d})"
            )));
        }
        if self.translation.iter().chain(&self.center).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite transform".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = mat_vec(&self.rotation, d);
        [
            r[0] + self.center[0] + self.translation[0],
            r[1] + self.center[1] + self.translation[1],
            r[2] + self.center[2] + self.translation[2],
        ]
    }

    /// `T^-1(p)`.
    #[inline]
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.center[0] - self.translation[0],
            p[1] - self.center[1] - self.translation[1],
            p[2] - self.center[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + self.center[0],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + self.center[1],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + self.center[2],
        ]
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
            center: self.center,
        }
    }

    /// `self ∘ first`: apply `first`, then `self`. The result uses `self.center`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let rotation = mat_mul(&self.rotation, &first.rotation);
        let at_center = self.apply(first.apply(self.center));
        RigidTransform {
            rotation,
            translation: [
                at_center[0] - self.center[0],
                at_center[1] - self.center[1],
                at_center[2] - self.center[2],
            ],
            center: self.center,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == IDENTITY && self.translation == [0.0; 3]
    }

    /// Total rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Euler angles `(rx, ry, rz)` such that `R = Rz Ry Rx`.
    pub fn euler_angles(&self) -> [f64; 3] {
        let r = &self.rotation;
        let ry = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let rx = r[2][1].atan2(r[2][2]);
        let rz = r[1][0].atan2(r[0][0]);
        [rx, ry, rz]
    }
}

fn slice_partials<F>(grid: &GridMeta, region: Option<&Mask>, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let sl = grid.slice_len();
    par::ordered_sum(grid.dims[2], |k| {
        let mut acc = 0.0;
        for idx in k * sl..(k + 1) * sl {
            if region.is_none_or(|m| m.at(idx)) {
                acc += f(idx);
            }
        }
        acc
    })
}

/// Pearson correlation of voxel intensities over `region` (or everything).
/// Returns 0 if either side has zero variance.
pub fn ncc(a: &Volume, b: &Volume, region: Option<&Mask>) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "ncc")?;
    if let Some(m) = region {
        a.grid().ensure_matches(m.grid(), "ncc region")?;
    }
    let n = region.map_or(a.grid().len(), |m| m.count());
    if n == 0 {
        return Err(Error::EmptyRegion("ncc region is empty".into()));
    }
    let (da, db) = (a.data(), b.data());
    let g = a.grid();
    let ma = slice_partials(g, region, |i| da[i] as f64) / n as f64;
    let mb = slice_partials(g, region, |i| db[i] as f64) / n as f64;
    let sab = slice_partials(g, region, |i| (da[i] as f64 - ma) * (db[i] as f64 - mb));
    let saa = slice_partials(g, region, |i| (da[i] as f64 - ma).powi(2));
    let sbb = slice_partials(g, region, |i| (db[i] as f64 - mb).powi(2));
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Resample `vol` on its own grid through `T^-1` (pull). Outside samples
/// take the volume minimum.
pub fn apply_rigid(vol: &Volume, t: &RigidTransform, mode: Interp) -> Volume {
    apply_rigid_with(vol, t, mode, Boundary::Minimum, vol.grid())
}

pub fn apply_rigid_with(
    vol: &Volume,
    t: &RigidTransform,
    mode: Interp,
    boundary: Boundary,
    target: &GridMeta,
) -> Volume {
    if t.is_identity() && vol.grid().matches(target) {
        return vol.clone();
    }
    let s = vol.sampler(mode, boundary);
    Volume::from_fn(*target, vol.unit(), |i, j, k| {
        s.sample(t.apply_inverse(target.world(i, j, k)))
    })
}

/// Nearest-neighbor rigid warp of a mask; outside is 0.
pub fn apply_rigid_mask(mask: &Mask, t: &RigidTransform) -> Mask {
    let v = apply_rigid_with(
        &mask.to_volume(),
        t,
        Interp::Nearest,
        Boundary::Constant(0.0),
        mask.grid(),
    );
    Mask::from_volume(&v)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RigidRegConfig {
    pub pyramid_levels: usize,
    pub max_iters_per_level: usize,
    /// Initial rotation step, radians.
    pub init_step_rot: f64,
    /// Initial translation step, mm.
    pub init_step_trans: f64,
    pub step_shrink: f64,
    /// A sweep improving NCC by less than this shrinks the steps.
    pub converge_tol: f64,
}

impl Default for RigidRegConfig {
    fn default() -> Self {
        RigidRegConfig {
            pyramid_levels: 3,
            max_iters_per_level: 100,
            init_step_rot: 0.05,
            init_step_trans: 4.0,
            step_shrink: 0.5,
            converge_tol: 1e-5,
        }
    }
}

impl RigidRegConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pyramid_levels >= 1
            && self.max_iters_per_level >= 1
            && self.init_step_rot > 0.0
            && self.init_step_trans > 0.0
            && self.step_shrink > 0.0
            && self.step_shrink < 1.0
            && self.converge_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid rigid config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidLevelReport {
    pub level: usize,
    pub spacing: [f64; 3],
    pub sweeps: usize,
    pub evaluations: usize,
    pub ncc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidResult {
    pub transform: RigidTransform,
    /// NCC at the identity pose on the finest level.
    pub initial_ncc: f64,
    pub final_ncc: f64,
    /// `(rx, ry, rz)` in radians.
    pub euler_angles: [f64; 3],
    pub levels: Vec<RigidLevelReport>,
}

/// Evaluates NCC of `fixed` against `moving` pulled through a pose, over a
/// fixed list of sample voxels.
struct PoseScorer<'a> {
    moving: volume::Sampler<'a>,
    grid: GridMeta,
    samples: Vec<(usize, f32)>,
    chunk: usize,
}

impl<'a> PoseScorer<'a> {
    fn new(moving: &'a Volume, fixed: &Volume, region: Option<&Mask>) -> Self {
        let samples: Vec<(usize, f32)> = fixed
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| region.is_none_or(|m| m.at(*i)))
            .map(|(i, &v)| (i, v))
            .collect();
        PoseScorer {
            moving: moving.sampler(Interp::Trilinear, Boundary::Minimum),
            grid: *fixed.grid(),
            chunk: 4096,
            samples,
        }
    }

    fn score(&self, t: &RigidTransform) -> f64 {
        let n = self.samples.len();
        if n == 0 {
            return f64::NAN;
        }
        let s = &self.moving;
        let n_chunks = n.div_ceil(self.chunk);
        let parts = par::map_range(n_chunks, |c| {
            let mut acc = [0.0f64; 5];
            for &(idx, f) in &self.samples[c * self.chunk..((c + 1) * self.chunk).min(n)] {
                let [i, j, k] = self.grid.coords(idx);
                let m = s.sample(t.apply_inverse(self.grid.world(i, j, k))) as f64;
                let f = f as f64;
                acc[0] += m;
                acc[1] += f;
                acc[2] += m * m;
                acc[3] += f * f;
                acc[4] += m * f;
            }
            acc
        });
        let mut tot = [0.0f64; 5];
        for p in parts {
            for q in 0..5 {
                tot[q] += p[q];
            }
        }
        let nf = n as f64;
        let cov = tot[4] - tot[0] * tot[1] / nf;
        let vm = tot[2] - tot[0] * tot[0] / nf;
        let vf = tot[3] - tot[1] * tot[1] / nf;
        if vm <= 1e-12 * nf || vf <= 1e-12 * nf {
            return 0.0;
        }
        cov / (vm * vf).sqrt()
    }
}

fn pose(params: &[f64; 6], center: [f64; 3]) -> RigidTransform {
    RigidTransform::from_euler(
        [params[0], params[1], params[2]],
        [params[3], params[4], params[5]],
        center,
    )
}

fn is_constant(v: &Volume, region: Option<&Mask>) -> bool {
    let mut first = None;
    for (i, &x) in v.data().iter().enumerate() {
        if region.is_none_or(|m| m.at(i)) {
            match first {
                None => first = Some(x),
                Some(f) if f != x => return false,
                _ => {}
            }
        }
    }
    true
}

/// Find the rigid transform that best aligns `moving` to `fixed`.
///
/// `region`, when given, restricts NCC to those fixed-grid voxels (the
/// pipeline passes the union of both lung masks).
pub fn register_rigid(
    moving: &Volume,
    fixed: &Volume,
    region: Option<&Mask>,
    cfg: &RigidRegConfig,
) -> Result<RigidResult> {
    cfg.validate()?;
    moving.grid().ensure_matches(fixed.grid(), "register_rigid")?;
    if let Some(m) = region {
        fixed.grid().ensure_matches(m.grid(), "register_rigid region")?;
        if m.is_empty() {
            return Err(Error::EmptyRegion("rigid registration region".into()));
        }
    }
    if is_constant(fixed, region) || is_constant(moving, None) {
        return Err(Error::NonFinite(
            "NCC undefined for constant input volumes".into(),
        ));
    }

    let center = fixed.grid().center();
    let mut pyramid = vec![(moving.clone(), fixed.clone(), region.cloned())];
    for _ in 1..cfg.pyramid_levels {
        let (m, f, r) = pyramid.last().unwrap();
        if f.dims().iter().any(|&n| n < 8) {
            break;
        }
        pyramid.push((
            volume::downsample2(m),
            volume::downsample2(f),
            r.as_ref().map(volume::downsample2_mask),
        ));
    }

    let mut params = [0.0f64; 6];
    let mut levels = Vec::new();
    let n_levels = pyramid.len();
    for (coarse_idx, (m, f, r)) in pyramid.iter().rev().enumerate() {
        let level = n_levels - 1 - coarse_idx;
        let region = r.as_ref().filter(|m| !m.is_empty());
        let scorer = PoseScorer::new(m, f, region);
        let scale = 0.5f64.powi(coarse_idx as i32);
        let mut steps = [
            cfg.init_step_rot * scale,
            cfg.init_step_rot * scale,
            cfg.init_step_rot * scale,
            cfg.init_step_trans * scale,
            cfg.init_step_trans * scale,
            cfg.init_step_trans * scale,
        ];
        let min_trans = 0.1 * f.grid().spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut best = scorer.score(&pose(&params, center));
        if !best.is_finite() {
            return Err(Error::NonFinite(format!("NCC at level {level} is {best}")));
        }
        let mut evals = 1;
        let mut sweeps = 0;
        while sweeps < cfg.max_iters_per_level && steps[3] >= min_trans {
            sweeps += 1;
            let start = best;
            for p in 0..6 {
                for dir in [1.0, -1.0] {
                    let mut trial = params;
                    trial[p] += dir * steps[p];
                    let s = scorer.score(&pose(&trial, center));
                    evals += 1;
                    if s > best {
                        best = s;
                        params = trial;
                        break;
                    }
                }
            }
            if best - start < cfg.converge_tol {
                for s in steps.iter_mut() {
                    *s *= cfg.step_shrink;
                }
            }
        }
        levels.push(RigidLevelReport {
            level,
            spacing: f.grid().spacing,
            sweeps,
            evaluations: evals,
            ncc: best,
        });
    }

    let finest = PoseScorer::new(moving, fixed, region);
    let identity = RigidTransform::identity(center);
    let initial_ncc = finest.score(&identity);
    let found = pose(&params, center);
    let found_ncc = finest.score(&found);
    if !found_ncc.is_finite() || !initial_ncc.is_finite() {
        return Err(Error::NonFinite("final NCC is not finite".into()));
    }
    let (transform, final_ncc) = if found_ncc >= initial_ncc {
        (found, found_ncc)
    } else {
        (identity, initial_ncc)
    };
    Ok(RigidResult {
        euler_angles: transform.euler_angles(),
        transform,
        initial_ncc,
        final_ncc,
        levels,
    })
}
