//! Dense displacement fields in mm.
//!
//! A field `u` on the fixed grid means: the fixed-image point `x` corresponds
//! to the moving-image point `x + u(x)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::io::{f32s_from_le, f32s_to_le, read_file, write_file};
use crate::volume::{GridMeta, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: GridMeta,
    data: Vec<[f32; 3]>,
}

#[derive(Serialize, Deserialize)]
struct FieldSidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    units: String,
}

impl DisplacementField {
    pub fn new(grid: GridMeta, data: Vec<[f32; 3]>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "field has {} vectors, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { grid, data })
    }

    pub fn zeros(grid: GridMeta) -> Self {
        DisplacementField {
            data: vec![[0.0; 3]; grid.len()],
            grid,
        }
    }

    pub fn from_fn<F>(grid: GridMeta, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> [f64; 3] + Sync + Send,
    {
        let [nx, ny, nz] = grid.dims;
        let slices = par::map_range(nz, |k| {
            let mut s = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    s.push(f(i, j, k).map(|v| v as f32));
                }
            }
            s
        });
        DisplacementField {
            grid,
            data: slices.concat(),
        }
    }

    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        self.data[idx].map(f64::from)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.at(self.grid.index(i, j, k))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == [0.0; 3])
    }

    /// Trilinear sample at a world point, clamped to the grid.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.grid.continuous_index(p);
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut fr = [0.0f64; 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            let x = if c[a].is_nan() { 0.0 } else { c[a].clamp(0.0, (n - 1) as f64) };
            if n == 1 {
                continue;
            }
            let b = (x.floor() as usize).min(n - 2);
            i0[a] = b;
            i1[a] = b + 1;
            fr[a] = x - b as f64;
        }
        let mut out = [0.0f64; 3];
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    w *= fr[a];
                    idx[a] = i1[a];
                } else {
                    w *= 1.0 - fr[a];
                    idx[a] = i0[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let v = self.get(idx[0], idx[1], idx[2]);
            for a in 0..3 {
                out[a] += w * v[a];
            }
        }
        out
    }

    /// Voxelwise sum (first-order composition).
    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField> {
        self.grid.ensure_matches(&other.grid, "field addition")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
            .collect();
        DisplacementField::new(self.grid, data)
    }

    fn region_indices<'a>(&'a self, region: Option<&'a Mask>) -> impl Iterator<Item = usize> + 'a {
        (0..self.grid.len()).filter(move |&i| region.is_none_or(|m| m.at(i)))
    }

    /// Mean vector magnitude over `region` (or everything).
    pub fn mean_magnitude(&self, region: Option<&Mask>) -> Result<f64> {
        let n = self.region_indices(region).count();
        if n == 0 {
            return Err(Error::EmptyRegion("mean magnitude region".into()));
        }
        let s: f64 = self.region_indices(region).map(|i| norm(self.at(i))).sum();
        Ok(s / n as f64)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .iter()
            .map(|v| norm(v.map(f64::from)))
            .fold(0.0, f64::max)
    }

    /// Mean Euclidean distance to `other` over `region`.
    pub fn mean_endpoint_error(&self, other: &DisplacementField, region: Option<&Mask>) -> Result<f64> {
        self.grid.ensure_matches(&other.grid, "endpoint error")?;
        if let Some(m) = region {
            self.grid.ensure_matches(m.grid(), "endpoint error region")?;
        }
        let n = self.region_indices(region).count();
        if n == 0 {
            return Err(Error::EmptyRegion("endpoint error region".into()));
        }
        let s: f64 = self
            .region_indices(region)
            .map(|i| {
                let (a, b) = (self.at(i), other.at(i));
                norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            })
            .sum();
        Ok(s / n as f64)
    }

    /// Writes `<stem>.raw` (interleaved little-endian float32 x,y,z per
    /// voxel) and `<stem>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let side = FieldSidecar {
            dims: self.grid.dims,
            spacing: self.grid.spacing,
            origin: self.grid.origin,
            units: "mm".into(),
        };
        let flat: Vec<f32> = self.data.iter().flatten().copied().collect();
        write_file(&path.with_extension("json"), serde_json::to_string_pretty(&side)?.as_bytes())?;
        write_file(&path.with_extension("raw"), &f32s_to_le(&flat))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = path.with_extension("json");
        let side: FieldSidecar = serde_json::from_slice(&read_file(&json)?)
            .map_err(|e| Error::format(&json, e.to_string()))?;
        if side.units != "mm" {
            return Err(Error::UnitMismatch(format!(
                "displacement units must be mm, found {:?}",
                side.units
            )));
        }
        let grid = GridMeta::new(side.dims, side.spacing, side.origin)?;
        let flat = f32s_from_le(&read_file(&path.with_extension("raw"))?, grid.len() * 3)?;
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        DisplacementField::new(grid, data)
    }

    /// Raw bytes of the serialized payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let flat: Vec<f32> = self.data.iter().flatten().copied().collect();
        f32s_to_le(&flat)
    }
}

#[inline]
pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
