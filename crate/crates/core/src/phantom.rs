//! Deterministic synthetic lung CT.
//!
//! The body is a cylinder along z with two ellipsoidal lungs, random vessel
//! tubes and an optional spherical tumor. Voxel noise is keyed by voxel
//! index through splitmix64, so output never depends on evaluation order
//! or thread count:
//!
//! ```text
//! splitmix64(x):  x += 0x9E3779B97F4A7C15
//!                 z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//!                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                 return z ^ (z >> 31)
//! voxel stream:   state = splitmix64(seed) ^ (index * 0xD1B54A32D192ED03)
//! ```
//!
//! A noise sample is the sum of four uniforms on [-0.5, 0.5) scaled by
//! sqrt(3), i.e. zero mean and unit variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm, DisplacementField};
use crate::volume::{Boundary, GridMeta, Interp, Mask, Unit, Volume};
use crate::warp;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const INDEX_MIX: u64 = 0xD1B5_4A32_D192_ED03;
const VESSEL_MIX: u64 = 0x8CB9_2BA7_2F3D_8DD7;

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sequential splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.0);
        self.0 = self.0.wrapping_add(GOLDEN);
        out
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Unit-variance noise for one voxel.
#[inline]
pub fn voxel_noise(seed: u64, index: usize) -> f64 {
    let mut rng = SplitMix::new(splitmix64(seed) ^ (index as u64).wrapping_mul(INDEX_MIX));
    let s: f64 = (0..4).map(|_| rng.next_f64() - 0.5).sum();
    s * 3f64.sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TumorSpec {
    /// World center in mm; `None` puts it at the center of the first lung.
    pub center: Option<[f64; 3]>,
    pub radius: f64,
    pub hu: f64,
}

impl Default for TumorSpec {
    fn default() -> Self {
        TumorSpec {
            center: None,
            radius: 10.0,
            hu: 30.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lung_hu: f64,
    pub lung_noise: f64,
    pub body_hu: f64,
    pub body_noise: f64,
    pub exterior_hu: f64,
    pub vessels_per_lung: usize,
    /// Vessel radius range in mm.
    pub vessel_radius: (f64, f64),
    pub vessel_hu: f64,
    pub tumor: Option<TumorSpec>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 1,
            dims: [96, 96, 96],
            spacing: [1.25; 3],
            lung_hu: -800.0,
            lung_noise: 30.0,
            body_hu: 0.0,
            body_noise: 20.0,
            exterior_hu: -1000.0,
            vessels_per_lung: 24,
            vessel_radius: (1.25, 2.0),
            vessel_hu: 40.0,
            tumor: Some(TumorSpec::default()),
        }
    }
}

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        norm([p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.distance(p) <= self.radius
    }

    pub fn voxelize(&self, grid: &GridMeta) -> Mask {
        Mask::from_fn(*grid, |i, j, k| self.contains(grid.world(i, j, k)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Vessel {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    lung: usize,
}

impl Vessel {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let ab = [self.b[0] - self.a[0], self.b[1] - self.a[1], self.b[2] - self.a[2]];
        let ap = [p[0] - self.a[0], p[1] - self.a[1], p[2] - self.a[2]];
        let len2 = ab.iter().map(|x| x * x).sum::<f64>();
        let t = if len2 > 0.0 {
            ((0..3).map(|q| ab[q] * ap[q]).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        norm([ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]])
    }
}

/// Analytic layout derived from a config.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub grid: GridMeta,
    /// Cylinder axis (x, y) and radius.
    pub body_axis: [f64; 2],
    pub body_radius: f64,
    pub lungs: [Ellipsoid; 2],
    pub tumor: Option<Sphere>,
    vessels: Vec<Vessel>,
}

impl PhantomGeometry {
    pub fn new(cfg: &PhantomConfig) -> Result<Self> {
        let grid = GridMeta::new(cfg.dims, cfg.spacing, [0.0; 3])?;
        let (r0, r1) = cfg.vessel_radius;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::InvalidParameter("vessel radius range must be positive and ordered".into()));
        }
        let c = grid.center();
        let ext = [0, 1, 2].map(|a| cfg.dims[a] as f64 * cfg.spacing[a]);
        let exy = ext[0].min(ext[1]);
        let semi = [0.19 * ext[0], 0.3 * ext[1], 0.38 * ext[2]];
        let lungs = [-1.0, 1.0].map(|side| Ellipsoid {
            center: [c[0] + side * 0.22 * ext[0], c[1], c[2]],
            semi_axes: semi,
        });

        let mut vessels = Vec::new();
        for (l, lung) in lungs.iter().enumerate() {
            let mut rng = SplitMix::new(splitmix64(cfg.seed ^ VESSEL_MIX.wrapping_mul(l as u64 + 1)));
            let point = |rng: &mut SplitMix| loop {
                let u = [0, 1, 2].map(|_| 2.0 * rng.next_f64() - 1.0);
                if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    break [0, 1, 2].map(|a| lung.center[a] + 0.9 * u[a] * lung.semi_axes[a]);
                }
            };
            for _ in 0..cfg.vessels_per_lung {
                let a = point(&mut rng);
                let b = point(&mut rng);
                let radius = r0 + (r1 - r0) * rng.next_f64();
                vessels.push(Vessel { a, b, radius, lung: l });
            }
        }

        let tumor = match &cfg.tumor {
            None => None,
            Some(t) => {
                if !(t.radius > 0.0) {
                    return Err(Error::InvalidParameter("tumor radius must be > 0".into()));
                }
                Some(Sphere {
                    center: t.center.unwrap_or(lungs[0].center),
                    radius: t.radius,
                })
            }
        };
        Ok(PhantomGeometry {
            grid,
            body_axis: [c[0], c[1]],
            body_radius: 0.45 * exy,
            lungs,
            tumor,
            vessels,
        })
    }

    pub fn in_lung(&self, p: [f64; 3]) -> bool {
        self.lungs.iter().any(|l| l.contains(p))
    }

    pub fn in_body(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.body_axis[0];
        let dy = p[1] - self.body_axis[1];
        (dx * dx + dy * dy).sqrt() <= self.body_radius
    }

    fn in_vessel(&self, p: [f64; 3]) -> bool {
        self.vessels
            .iter()
            .any(|v| self.lungs[v.lung].contains(p) && v.distance(p) <= v.radius)
    }
}

pub struct Phantom {
    pub volume: Volume,
    pub lung: Mask,
    pub tumor: Option<Mask>,
    pub geometry: PhantomGeometry,
}

/// Render a phantom.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    let geo = PhantomGeometry::new(cfg)?;
    let g = geo.grid;
    let lung = Mask::from_fn(g, |i, j, k| geo.in_lung(g.world(i, j, k)));
    let tumor = geo.tumor.map(|s| s.voxelize(&g));
    if let Some(t) = &tumor {
        if t.is_empty() || t.data().iter().zip(lung.data()).any(|(&a, &b)| a > b) {
            return Err(Error::TumorOutsideLung);
        }
    }
    let tumor_hu = cfg.tumor.as_ref().map_or(0.0, |t| t.hu);
    let volume = Volume::from_fn(g, Unit::Hu, |i, j, k| {
        let p = g.world(i, j, k);
        let n = voxel_noise(cfg.seed, g.index(i, j, k));
        let v = if geo.tumor.is_some_and(|s| s.contains(p)) {
            tumor_hu + cfg.body_noise * n
        } else if geo.in_lung(p) {
            if geo.in_vessel(p) {
                cfg.vessel_hu + cfg.body_noise * n
            } else {
                cfg.lung_hu + cfg.lung_noise * n
            }
        } else if geo.in_body(p) {
            cfg.body_hu + cfg.body_noise * n
        } else {
            cfg.exterior_hu
        };
        v as f32
    });
    Ok(Phantom {
        volume,
        lung,
        tumor,
        geometry: geo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: [f64; 3],
    /// Displacement at the center, mm.
    pub peak: [f64; 3],
    pub sigma: f64,
}

/// Smooth analytic displacement: a sum of Gaussian bumps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticField {
    pub bumps: Vec<GaussianBump>,
}

impl SyntheticField {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for b in &self.bumps {
            let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            let w = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            for a in 0..3 {
                u[a] += w * b.peak[a];
            }
        }
        u
    }

    pub fn dense(&self, grid: &GridMeta) -> DisplacementField {
        DisplacementField::from_fn(*grid, |i, j, k| self.displacement(grid.world(i, j, k)))
    }

    /// Respiratory-like field: one bump per lung, mostly superior-inferior,
    /// scaled so the largest displacement on the grid is `peak_mm`.
    pub fn respiratory(geo: &PhantomGeometry, peak_mm: f64, seed: u64) -> Result<Self> {
        if !(peak_mm >= 0.0) {
            return Err(Error::InvalidParameter("peak must be >= 0".into()));
        }
        let minor = geo.lungs[0].semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        if peak_mm >= 0.4 * minor {
            return Err(Error::InvalidParameter(format!(
                "peak {peak_mm} mm exceeds 0.4 x lung minor semi-axis ({minor} mm)"
            )));
        }
        if peak_mm == 0.0 {
            return Ok(SyntheticField::default());
        }
        let mut rng = SplitMix::new(splitmix64(seed ^ 0x5EED_F1E1D));
        let bumps: Vec<GaussianBump> = geo
            .lungs
            .iter()
            .map(|l| {
                let jitter = |rng: &mut SplitMix| 0.5 * (2.0 * rng.next_f64() - 1.0);
                let dir = [0.3 * jitter(&mut rng), 0.3 * jitter(&mut rng), 1.0];
                let sigma = 0.55 * l.semi_axes[2] * (1.0 + 0.2 * jitter(&mut rng));
                let center = [0, 1, 2].map(|a| l.center[a] + 0.2 * l.semi_axes[a] * jitter(&mut rng));
                GaussianBump { center, peak: dir, sigma }
            })
            .collect();
        let mut f = SyntheticField { bumps };
        let max = f.dense(&geo.grid).max_magnitude();
        if max == 0.0 {
            return Err(Error::Degenerate("synthetic field vanishes on the grid".into()));
        }
        for b in &mut f.bumps {
            b.peak = b.peak.map(|v| v * peak_mm / max);
        }
        Ok(f)
    }
}

/// Deform `vol` by pulling through the field: `out(x) = vol(x + g(x))`,
/// clamped at the grid edge. Returns the dense ground-truth field.
pub fn apply_synthetic_field(vol: &Volume, f: &SyntheticField) -> (Volume, DisplacementField) {
    let dense = f.dense(vol.grid());
    let out = warp::apply_field(vol, &dense, Interp::Trilinear, Boundary::Clamp);
    (out, dense)
}

/// Replace a sphere around `center` with ablation HU, blended linearly over
/// `blend` mm outside the radius. Returns the volume and the analytic
/// treatment mask.
pub fn simulate_ablation(
    vol: &Volume,
    center: [f64; 3],
    zone_radius: f64,
    ablation_hu: f64,
    blend: f64,
) -> Result<(Volume, Mask)> {
    if !(zone_radius > 0.0) || !(blend >= 0.0) {
        return Err(Error::InvalidParameter("zone radius must be > 0 and blend >= 0".into()));
    }
    if vol.unit() != Unit::Hu {
        return Err(Error::UnitMismatch("ablation simulation expects HU".into()));
    }
    let zone = Sphere { center, radius: zone_radius };
    let g = *vol.grid();
    let out = Volume::from_fn(g, Unit::Hu, |i, j, k| {
        let d = zone.distance(g.world(i, j, k));
        let v = vol.get(i, j, k) as f64;
        let w = if d <= zone_radius {
            1.0
        } else if blend > 0.0 && d < zone_radius + blend {
            1.0 - (d - zone_radius) / blend
        } else {
            0.0
        };
        (w * ablation_hu + (1.0 - w) * v) as f32
    });
    Ok((out, zone.voxelize(&g)))
}

/// Default ablation center: tumor centroid plus an offset.
pub fn ablation_center(tumor: &Mask, offset: [f64; 3]) -> Result<[f64; 3]> {
    let c = tumor
        .centroid()
        .ok_or_else(|| Error::EmptyRegion("tumor mask is empty".into()))?;
    Ok([c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
}
