//! Classical lung parenchyma segmentation (air threshold, border-component
//! removal, size filter, ball closing, axial hole fill) and mask ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology;
use crate::volume::{self, GridMeta, Mask, Unit, Volume};

/// Default fill value outside the lung in masked images.
pub const DEFAULT_OUTSIDE_HU: f32 = -1000.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LungSegConfig {
    /// Voxels strictly below this HU are air candidates.
    pub air_threshold: f64,
    /// Minimum component volume kept, in mm³.
    pub min_component_volume: f64,
    /// Closing radius in mm.
    pub closing_radius: f64,
    pub fill_holes: bool,
}

impl Default for LungSegConfig {
    fn default() -> Self {
        LungSegConfig {
            air_threshold: -320.0,
            min_component_volume: 50_000.0,
            closing_radius: 3.0,
            fill_holes: true,
        }
    }
}

impl LungSegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.closing_radius >= 0.0) {
            return Err(Error::InvalidParameter("closing_radius must be >= 0".into()));
        }
        if !(self.min_component_volume > 0.0) {
            return Err(Error::InvalidParameter(
                "min_component_volume must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Internal air components that survive the border and size filters,
/// before any morphology.
pub fn candidate_lung(vol: &Volume, cfg: &LungSegConfig) -> Result<Mask> {
    cfg.validate()?;
    if vol.unit() != Unit::Hu {
        return Err(Error::UnitMismatch(
            "lung segmentation expects a HU volume".into(),
        ));
    }
    let thr = cfg.air_threshold as f32;
    let air = Mask::new(
        *vol.grid(),
        vol.data().iter().map(|&v| u8::from(v < thr)).collect(),
    )?;
    let (labels, comps) = morphology::label_components(&air);
    let min_voxels = cfg.min_component_volume / vol.grid().voxel_volume();
    let keep: Vec<bool> = std::iter::once(false)
        .chain(
            comps
                .iter()
                .map(|c| !c.touches_border && c.voxels as f64 >= min_voxels),
        )
        .collect();
    let data = labels.iter().map(|&l| u8::from(keep[l as usize])).collect();
    Mask::new(*vol.grid(), data)
}

/// Segment lung parenchyma from a HU volume.
pub fn segment_lung(vol: &Volume, cfg: &LungSegConfig) -> Result<Mask> {
    let mut mask = candidate_lung(vol, cfg)?;
    if mask.is_empty() {
        return Err(Error::NoLungFound);
    }
    if cfg.closing_radius > 0.0 {
        mask = morphology::close_ball(&mask, cfg.closing_radius);
    }
    if cfg.fill_holes {
        mask = morphology::fill_holes_axial(&mask);
    }
    Ok(mask)
}

/// Keep voxels inside `lung`, set the rest to `fill`.
pub fn apply_lung_mask(vol: &Volume, lung: &Mask, fill: f32) -> Result<Volume> {
    vol.grid().ensure_matches(lung.grid(), "apply_lung_mask")?;
    let data = vol
        .data()
        .iter()
        .zip(lung.data())
        .map(|(&v, &m)| if m != 0 { v } else { fill })
        .collect();
    Volume::new(*vol.grid(), data, vol.unit())
}

/// Load an externally produced mask, binarize it and bring it onto `grid`
/// with nearest-neighbor sampling if its geometry differs.
pub fn ingest_mask(path: impl AsRef<Path>, grid: &GridMeta) -> Result<Mask> {
    let m = volume::load_mask(path)?;
    Ok(volume::resample_mask_to_grid(&m, grid))
}
