//! Volume and mask data model plus the preprocessing chain (resample,
//! centered crop/pad, intensity normalization) and world-space sampling.
//!
//! Voxel `(i, j, k)` sits at world position `origin + (i, j, k) * spacing`;
//! storage is x-fastest, z-slowest. World axes are always aligned with voxel
//! axes.

pub(crate) mod io;

use serde::{Deserialize, Serialize};

pub use io::{load_mask, load_volume, save_mask, save_volume, VolumeFormat};

use crate::error::{Error, Result};
use crate::par;

/// Default CT normalization window in HU.
pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);

const INDEX_SNAP: f64 = 1e-9;

/// Grid geometry shared by volumes, masks and displacement fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = GridMeta {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter("origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world point. Values within 1e-9 of an
    /// integer are snapped so that voxel centers map exactly.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            let x = (p[a] - self.origin[a]) / self.spacing[a];
            let r = x.round();
            c[a] = if (x - r).abs() < INDEX_SNAP { r } else { x };
        }
        c
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Geometric center of the voxel lattice in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing[a];
        }
        c
    }

    /// Equal dims, and spacing/origin equal within 1e-6 mm.
    pub fn matches(&self, other: &GridMeta) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.origin[a] - other.origin[a]).abs() < 1e-6
            })
    }

    pub fn ensure_matches(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Semantic intensity unit of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "normalized")]
    Normalized,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Hu => "HU",
            Unit::Normalized => "normalized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Trilinear,
    Nearest,
}

/// What a sampler returns for points outside the voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Boundary {
    /// The volume's minimum value.
    #[default]
    Minimum,
    Constant(f32),
    /// Clamp to the nearest edge voxel.
    Clamp,
}

/// Regular 3D scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridMeta,
    data: Vec<f32>,
    unit: Unit,
}

impl Volume {
    pub fn new(grid: GridMeta, data: Vec<f32>, unit: Unit) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, data, unit })
    }

    pub fn filled(grid: GridMeta, value: f32, unit: Unit) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
            unit,
        }
    }

    /// Build a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn<F>(grid: GridMeta, unit: Unit, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f32 + Sync + Send,
    {
        let data = fill_grid(&grid, f);
        Volume { grid, data, unit }
    }

    #[inline]
    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map<F: Fn(f32) -> f32 + Sync + Send>(&self, f: F) -> Volume {
        let data = par::map_range(self.data.len(), |i| f(self.data[i]));
        Volume {
            grid: self.grid,
            data,
            unit: self.unit,
        }
    }

    pub fn sampler(&self, interp: Interp, boundary: Boundary) -> Sampler<'_> {
        let oob = match boundary {
            Boundary::Minimum => Some(self.min_max().0),
            Boundary::Constant(v) => Some(v),
            Boundary::Clamp => None,
        };
        Sampler {
            vol: self,
            interp,
            oob,
        }
    }
}

/// Binary volume. Values are always 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: GridMeta,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(grid: GridMeta, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "mask voxel count {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Mask { grid, data })
    }

    pub fn empty(grid: GridMeta) -> Self {
        Mask {
            data: vec![0; grid.len()],
            grid,
        }
    }

    pub fn full(grid: GridMeta) -> Self {
        Mask {
            data: vec![1; grid.len()],
            grid,
        }
    }

    pub fn from_fn<F>(grid: GridMeta, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> bool + Sync + Send,
    {
        let data = fill_grid(&grid, |i, j, k| u8::from(f(i, j, k)));
        Mask { grid, data }
    }

    /// Nonzero voxels of `vol` become 1.
    pub fn from_volume(vol: &Volume) -> Self {
        Mask {
            grid: vol.grid,
            data: vol.data.iter().map(|&v| u8::from(v != 0.0)).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| v as f32).collect(),
            unit: Unit::Normalized,
        }
    }

    #[inline]
    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)] != 0
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.data[idx] = u8::from(value);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }

    fn zip_with(&self, other: &Mask, what: &str, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.grid.ensure_matches(&other.grid, what)?;
        Ok(Mask {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(f(a != 0, b != 0)))
                .collect(),
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, "mask union", |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, "mask intersection", |a, b| a && b)
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, "mask difference", |a, b| a && !b)
    }

    /// Center of mass of the set voxels in world coordinates.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (idx, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let [i, j, k] = self.grid.coords(idx);
                let w = self.grid.world(i, j, k);
                for a in 0..3 {
                    acc[a] += w[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|s| s / n as f64))
    }
}

fn fill_grid<T, F>(grid: &GridMeta, f: F) -> Vec<T>
where
    T: Send + Copy + Default,
    F: Fn(usize, usize, usize) -> T + Sync + Send,
{
    let [nx, ny, _] = grid.dims;
    let mut data = vec![T::default(); grid.len()];
    par::for_each_chunk_mut(&mut data, nx * ny, |k, slice| {
        for j in 0..ny {
            for i in 0..nx {
                slice[i + nx * j] = f(i, j, k);
            }
        }
    });
    data
}

/// Interpolating reader over a volume with a fixed out-of-bounds policy.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    vol: &'a Volume,
    interp: Interp,
    oob: Option<f32>,
}

impl<'a> Sampler<'a> {
    /// Sample at a world-space point.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> f32 {
        self.sample_index(self.vol.grid.continuous_index(p))
    }

    /// Sample at a continuous voxel index.
    #[inline]
    pub fn sample_index(&self, c: [f64; 3]) -> f32 {
        match self.interp {
            Interp::Trilinear => self.trilinear(c),
            Interp::Nearest => self.nearest(c),
        }
    }

    fn nearest(&self, c: [f64; 3]) -> f32 {
        let g = &self.vol.grid;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = (c[a] + 0.5).floor();
            let n = g.dims[a] as f64;
            if r < 0.0 || r > n - 1.0 {
                match self.oob {
                    Some(v) => return v,
                    None => idx[a] = r.clamp(0.0, n - 1.0) as usize,
                }
            } else {
                idx[a] = r as usize;
            }
        }
        self.vol.data[g.index(idx[0], idx[1], idx[2])]
    }

    fn trilinear(&self, c: [f64; 3]) -> f32 {
        let g = &self.vol.grid;
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut fr = [0.0f64; 3];
        for a in 0..3 {
            let n = g.dims[a];
            let hi = (n - 1) as f64;
            let mut x = c[a];
            if !(x >= 0.0 && x <= hi) {
                match self.oob {
                    Some(v) => return v,
                    None => x = if x.is_nan() { 0.0 } else { x.clamp(0.0, hi) },
                }
            }
            if n == 1 {
                i0[a] = 0;
                i1[a] = 0;
                fr[a] = 0.0;
            } else {
                let b = (x.floor() as usize).min(n - 2);
                i0[a] = b;
                i1[a] = b + 1;
                fr[a] = x - b as f64;
            }
        }
        let d = &self.vol.data;
        let v = |i: usize, j: usize, k: usize| d[g.index(i, j, k)] as f64;
        let [fx, fy, fz] = fr;
        let c00 = v(i0[0], i0[1], i0[2]) * (1.0 - fx) + v(i1[0], i0[1], i0[2]) * fx;
        let c10 = v(i0[0], i1[1], i0[2]) * (1.0 - fx) + v(i1[0], i1[1], i0[2]) * fx;
        let c01 = v(i0[0], i0[1], i1[2]) * (1.0 - fx) + v(i1[0], i0[1], i1[2]) * fx;
        let c11 = v(i0[0], i1[1], i1[2]) * (1.0 - fx) + v(i1[0], i1[1], i1[2]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    }
}

/// Trilinear sample at a world point; out-of-grid points return the volume minimum.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f32 {
    vol.sampler(Interp::Trilinear, Boundary::Minimum).sample(p)
}

/// Resample to a new isotropic-or-not spacing. Output dims are
/// `round(n * spacing / target)` (at least 1); the origin is kept. Samples
/// that fall past the last input voxel center clamp to the edge.
pub fn resample(vol: &Volume, target_spacing: [f64; 3], mode: Interp) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let g = vol.grid;
    if g.spacing == target_spacing {
        return Ok(vol.clone());
    }
    let mut dims = [0usize; 3];
    let mut ratio = [0.0f64; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a];
        dims[a] = ((extent / target_spacing[a]).round() as usize).max(1);
        ratio[a] = target_spacing[a] / g.spacing[a];
    }
    let out_grid = GridMeta::new(dims, target_spacing, g.origin)?;
    let s = vol.sampler(mode, Boundary::Clamp);
    Ok(Volume::from_fn(out_grid, vol.unit, |i, j, k| {
        s.sample_index([
            i as f64 * ratio[0],
            j as f64 * ratio[1],
            k as f64 * ratio[2],
        ])
    }))
}

/// Sample `vol` onto an arbitrary target grid in world space.
pub fn resample_to_grid(vol: &Volume, target: &GridMeta, mode: Interp, boundary: Boundary) -> Volume {
    if vol.grid.matches(target) {
        return vol.clone();
    }
    let s = vol.sampler(mode, boundary);
    Volume::from_fn(*target, vol.unit, |i, j, k| s.sample(target.world(i, j, k)))
}

/// Nearest-neighbor mask transfer onto `target`; outside voxels are 0.
pub fn resample_mask_to_grid(mask: &Mask, target: &GridMeta) -> Mask {
    if mask.grid.matches(target) {
        return mask.clone();
    }
    let vol = mask.to_volume();
    let s = vol.sampler(Interp::Nearest, Boundary::Constant(0.0));
    Mask::from_fn(*target, |i, j, k| s.sample(target.world(i, j, k)) != 0.0)
}

/// Per-axis index offset used by centered crop/pad: input index = output + offset.
fn crop_pad_offset(n: usize, target: usize) -> isize {
    if target >= n {
        -(((target - n) / 2) as isize)
    } else {
        ((n - target) / 2) as isize
    }
}

/// Centered crop or pad to `target_dims`. The leading side gets
/// `floor(excess / 2)`; padded voxels take `fill`; the origin moves so that
/// retained voxels keep their world coordinates.
pub fn crop_or_pad(vol: &Volume, target_dims: [usize; 3], fill: f32) -> Result<Volume> {
    if target_dims.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "target dims must be >= 1, got {target_dims:?}"
        )));
    }
    let g = vol.grid;
    let off: [isize; 3] = std::array::from_fn(|a| crop_pad_offset(g.dims[a], target_dims[a]));
    let origin = std::array::from_fn(|a| g.origin[a] + off[a] as f64 * g.spacing[a]);
    let out_grid = GridMeta::new(target_dims, g.spacing, origin)?;
    Ok(Volume::from_fn(out_grid, vol.unit, |i, j, k| {
        let src = [i as isize + off[0], j as isize + off[1], k as isize + off[2]];
        if (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < g.dims[a]) {
            vol.get(src[0] as usize, src[1] as usize, src[2] as usize)
        } else {
            fill
        }
    }))
}

/// Mask counterpart of [`crop_or_pad`]; padded voxels are 0.
pub fn crop_or_pad_mask(mask: &Mask, target_dims: [usize; 3]) -> Result<Mask> {
    let v = crop_or_pad(&mask.to_volume(), target_dims, 0.0)?;
    Ok(Mask::from_volume(&v))
}

/// Map intensities into [0, 1]. With a window `(lo, hi)` values are clamped
/// linearly; without one the volume's own min/max is used and a constant
/// volume maps to all zeros.
pub fn normalize(vol: &Volume, window: Option<(f64, f64)>) -> Result<Volume> {
    let (lo, hi) = match window {
        Some((lo, hi)) => {
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "normalization window must satisfy low < high, got ({lo}, {hi})"
                )));
            }
            (lo, hi)
        }
        None => {
            let (lo, hi) = vol.min_max();
            (lo as f64, hi as f64)
        }
    };
    let span = hi - lo;
    let out = if span > 0.0 {
        vol.map(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
    } else {
        vol.map(|_| 0.0)
    };
    Ok(out.with_unit(Unit::Normalized))
}

/// Inverse of a windowed [`normalize`] (exact only inside the window).
pub fn denormalize(vol: &Volume, window: (f64, f64)) -> Volume {
    let (lo, hi) = window;
    vol.map(|v| (lo + v as f64 * (hi - lo)) as f32).with_unit(Unit::Hu)
}

/// 3x3x3 box filter with edge clamping, applied separably.
pub fn smooth_box3(vol: &Volume) -> Volume {
    let mut cur = vol.clone();
    for axis in 0..3 {
        let g = cur.grid;
        let src = &cur;
        let n = g.dims[axis];
        let next = Volume::from_fn(g, vol.unit, |i, j, k| {
            let mut c = [i, j, k];
            let x = c[axis];
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(n - 1);
            let mut acc = 0.0f64;
            for t in [lo, x, hi] {
                c[axis] = t;
                acc += src.get(c[0], c[1], c[2]) as f64;
            }
            (acc / 3.0) as f32
        });
        cur = next;
    }
    cur
}

/// Smooth then take every second voxel; spacing doubles, origin is kept.
pub fn downsample2(vol: &Volume) -> Volume {
    let sm = smooth_box3(vol);
    let g = vol.grid;
    let dims = g.dims.map(|n| n.div_ceil(2));
    let grid = GridMeta {
        dims,
        spacing: g.spacing.map(|s| 2.0 * s),
        origin: g.origin,
    };
    Volume::from_fn(grid, vol.unit, |i, j, k| sm.get(2 * i, 2 * j, 2 * k))
}

/// Every second voxel of a mask.
pub fn downsample2_mask(mask: &Mask) -> Mask {
    let g = mask.grid;
    let grid = GridMeta {
        dims: g.dims.map(|n| n.div_ceil(2)),
        spacing: g.spacing.map(|s| 2.0 * s),
        origin: g.origin,
    };
    Mask::from_fn(grid, |i, j, k| mask.get(2 * i, 2 * j, 2 * k))
}
