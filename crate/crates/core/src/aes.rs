//! Ablation effectiveness scoring.
//!
//! `T` is the (registered) tumor, `B` the treatment zone and `A` the planned
//! ablation volume, i.e. `T` grown by a safety margin. Coverage ratios:
//!
//! ```text
//! CR1 = |T ∩ B| / |T|     CR2 = |B ∩ A| / |A|     ER = |B \ A| / |B|
//! ```
//!
//! and the score
//!
//! ```text
//! AES = -1 + exp(-alpha (1 - CR1) - beta ER)     if CR1 < lambda
//! AES =  1 - exp(-gamma (1 - CR2) - theta ER)    otherwise
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology;
use crate::volume::{Mask, Unit, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AesParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub lambda: f64,
    pub margin_mm: f64,
}

impl Default for AesParams {
    fn default() -> Self {
        AesParams {
            alpha: 1.0,
            beta: 2.0,
            gamma: 0.5,
            theta: 2.0,
            lambda: 0.75,
            margin_mm: 5.0,
        }
    }
}

impl AesParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma, self.theta];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("AES weights must be finite and >= 0".into()));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidParameter("lambda must lie in (0, 1)".into()));
        }
        if !(5.0..=10.0).contains(&self.margin_mm) {
            return Err(Error::InvalidParameter(format!(
                "margin {} mm outside the 5-10 mm range",
                self.margin_mm
            )));
        }
        Ok(())
    }
}

/// Grow `t` to every voxel whose center lies within `margin` mm of it.
pub fn dilate_mask(t: &Mask, margin: f64) -> Result<Mask> {
    if t.is_empty() {
        return Err(Error::EmptyRegion("tumor mask is empty".into()));
    }
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::InvalidParameter("margin must be finite and >= 0".into()));
    }
    Ok(morphology::dilate_ball(t, margin))
}

/// Voxel counts of the regions entering the coverage ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub t: u64,
    pub b: u64,
    pub a: u64,
    pub t_and_b: u64,
    pub b_and_a: u64,
    pub b_minus_a: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionVolumes {
    pub t: f64,
    pub b: f64,
    pub a: f64,
    pub t_and_b: f64,
    pub b_and_a: f64,
    pub b_minus_a: f64,
    pub voxel_volume: f64,
    pub counts: RegionCounts,
}

pub fn region_volumes(t: &Mask, b: &Mask, a: &Mask) -> Result<RegionVolumes> {
    t.grid().ensure_matches(b.grid(), "T and B")?;
    t.grid().ensure_matches(a.grid(), "T and A")?;
    if t.is_empty() {
        return Err(Error::EmptyRegion("tumor mask is empty".into()));
    }
    let mut c = RegionCounts { t: 0, b: 0, a: 0, t_and_b: 0, b_and_a: 0, b_minus_a: 0 };
    for ((&x, &y), &z) in t.data().iter().zip(b.data()).zip(a.data()) {
        let (x, y, z) = (x != 0, y != 0, z != 0);
        c.t += u64::from(x);
        c.b += u64::from(y);
        c.a += u64::from(z);
        c.t_and_b += u64::from(x && y);
        c.b_and_a += u64::from(y && z);
        c.b_minus_a += u64::from(y && !z);
    }
    let vv = t.grid().voxel_volume();
    Ok(RegionVolumes {
        t: c.t as f64 * vv,
        b: c.b as f64 * vv,
        a: c.a as f64 * vv,
        t_and_b: c.t_and_b as f64 * vv,
        b_and_a: c.b_and_a as f64 * vv,
        b_minus_a: c.b_minus_a as f64 * vv,
        voxel_volume: vv,
        counts: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub cr1: f64,
    pub cr2: f64,
    pub er: f64,
    /// `B` was empty; `ER` is set to 0.
    pub b_empty: bool,
}

pub fn coverage_ratios(rv: &RegionVolumes) -> Result<Coverage> {
    let c = rv.counts;
    if c.t == 0 {
        return Err(Error::EmptyRegion("|T| = 0".into()));
    }
    if c.a == 0 {
        return Err(Error::EmptyRegion("|A| = 0".into()));
    }
    let b_empty = c.b == 0;
    Ok(Coverage {
        cr1: c.t_and_b as f64 / c.t as f64,
        cr2: c.b_and_a as f64 / c.a as f64,
        er: if b_empty { 0.0 } else { c.b_minus_a as f64 / c.b as f64 },
        b_empty,
    })
}

pub fn aes_score(cr1: f64, cr2: f64, er: f64, p: &AesParams) -> f64 {
    if cr1 < p.lambda {
        -1.0 + (-p.alpha * (1.0 - cr1) - p.beta * er).exp()
    } else {
        1.0 - (-p.gamma * (1.0 - cr2) - p.theta * er).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AesClass {
    Under,
    Average,
    Over,
}

/// Open bands: under below `-lambda`, over above `lambda`.
pub fn classify(aes: f64, lambda: f64) -> AesClass {
    if aes < -lambda {
        AesClass::Under
    } else if aes > lambda {
        AesClass::Over
    } else {
        AesClass::Average
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AesReport {
    pub volumes_mm3: RegionVolumes,
    pub cr1: f64,
    pub cr2: f64,
    pub er: f64,
    pub aes: f64,
    pub class: AesClass,
    pub params: AesParams,
    pub flags: Vec<String>,
    pub inputs: BTreeMap<String, InputRef>,
}

/// Score a registered tumor mask against a treatment mask. `A` is the
/// tumor dilated by `params.margin_mm`. An empty treatment mask is flagged
/// `b_empty` and classified as under-ablation.
pub fn evaluate_case(tumor_reg: &Mask, treatment: &Mask, params: &AesParams) -> Result<AesReport> {
    params.validate()?;
    tumor_reg.grid().ensure_matches(treatment.grid(), "tumor and treatment masks")?;
    let a = dilate_mask(tumor_reg, params.margin_mm)?;
    let rv = region_volumes(tumor_reg, treatment, &a)?;
    let cov = coverage_ratios(&rv)?;
    let aes = aes_score(cov.cr1, cov.cr2, cov.er, params);
    let mut flags = Vec::new();
    let class = if cov.b_empty {
        flags.push("b_empty".to_string());
        AesClass::Under
    } else {
        classify(aes, params.lambda)
    };
    Ok(AesReport {
        volumes_mm3: rv,
        cr1: cov.cr1,
        cr2: cov.cr2,
        er: cov.er,
        aes,
        class,
        params: *params,
        flags,
        inputs: BTreeMap::new(),
    })
}

pub const HU_BIN_WIDTH: f64 = 25.0;
pub const HU_RANGE: (f64, f64) = (-1000.0, 400.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuDistribution {
    /// Counts per 25 HU bin over [-1000, 400).
    pub histogram: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub mean: f64,
    pub median: f64,
    pub fraction_below: f64,
    pub fraction_at_or_above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuRegionStats {
    pub voxels: usize,
    pub threshold: f64,
    pub bin_width: f64,
    pub range: (f64, f64),
    pub pre: HuDistribution,
    pub post: HuDistribution,
}

fn distribution(values: &mut [f32], threshold: f64) -> HuDistribution {
    let n_bins = ((HU_RANGE.1 - HU_RANGE.0) / HU_BIN_WIDTH) as usize;
    let mut histogram = vec![0u64; n_bins];
    let (mut underflow, mut overflow, mut below) = (0, 0, 0usize);
    let mut sum = 0.0f64;
    for &v in values.iter() {
        let v = v as f64;
        sum += v;
        below += usize::from(v < threshold);
        if v < HU_RANGE.0 {
            underflow += 1;
        } else if v >= HU_RANGE.1 {
            overflow += 1;
        } else {
            histogram[((v - HU_RANGE.0) / HU_BIN_WIDTH) as usize] += 1;
        }
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
    };
    HuDistribution {
        histogram,
        underflow,
        overflow,
        mean: sum / n as f64,
        median,
        fraction_below: below as f64 / n as f64,
        fraction_at_or_above: (n - below) as f64 / n as f64,
    }
}

/// HU distributions of registered pre-op and post-op values inside `B \ T`.
pub fn hu_region_stats(
    pre_registered: &Volume,
    post: &Volume,
    tumor_reg: &Mask,
    treatment: &Mask,
    threshold: f64,
) -> Result<HuRegionStats> {
    let g = post.grid();
    g.ensure_matches(pre_registered.grid(), "pre and post")?;
    g.ensure_matches(tumor_reg.grid(), "tumor mask")?;
    g.ensure_matches(treatment.grid(), "treatment mask")?;
    if pre_registered.unit() != Unit::Hu || post.unit() != Unit::Hu {
        return Err(Error::UnitMismatch("HU statistics need HU volumes".into()));
    }
    let region = treatment.difference(tumor_reg)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion("B \\ T is empty".into()));
    }
    let pick = |v: &Volume| -> Vec<f32> {
        v.data()
            .iter()
            .zip(region.data())
            .filter(|(_, &m)| m != 0)
            .map(|(&x, _)| x)
            .collect()
    };
    let (mut a, mut b) = (pick(pre_registered), pick(post));
    Ok(HuRegionStats {
        voxels: a.len(),
        threshold,
        bin_width: HU_BIN_WIDTH,
        range: HU_RANGE,
        pre: distribution(&mut a, threshold),
        post: distribution(&mut b, threshold),
    })
}
