//! Image similarity and agreement statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::par;
use crate::rigid;
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// `None` uses max - min of the second (fixed) image.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 7, k1: 0.01, k2: 0.03, dynamic_range: None }
    }
}

/// Sums over every valid `w`-long run along `axis`; the output is shrunk on
/// that axis by `w - 1`.
fn valid_box_sum(src: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] = dims[axis] + 1 - w;
    let stride_in = [1, dims[0], dims[0] * dims[1]];
    let n_out = od[0] * od[1] * od[2];
    let plane = od[0] * od[1];
    let mut out = vec![0.0f64; n_out];
    par::for_each_chunk_mut(&mut out, plane, |k, slice| {
        for j in 0..od[1] {
            for i in 0..od[0] {
                let base = i * stride_in[0] + j * stride_in[1] + k * stride_in[2];
                let mut s = 0.0;
                for t in 0..w {
                    s += src[base + t * stride_in[axis]];
                }
                slice[i + od[0] * j] = s;
            }
        }
    });
    (out, od)
}

fn window_sums(src: Vec<f64>, dims: [usize; 3], w: usize) -> Vec<f64> {
    let (x, d) = valid_box_sum(&src, dims, 0, w);
    let (y, d) = valid_box_sum(&x, d, 1, w);
    valid_box_sum(&y, d, 2, w).0
}

/// Mean local SSIM over all fully contained `w^3` windows (stride 1). With a
/// region, only windows whose center voxel lies in it are averaged. Local
/// statistics use population (1/N) moments.
pub fn ssim3d(a: &Volume, b: &Volume, params: &SsimParams, region: Option<&Mask>) -> Result<f64> {
    let g = *a.grid();
    g.ensure_matches(b.grid(), "SSIM inputs")?;
    if let Some(r) = region {
        g.ensure_matches(r.grid(), "SSIM region")?;
    }
    let w = params.window;
    if w == 0 || w.is_multiple_of(2) {
        return Err(Error::InvalidParameter("SSIM window must be odd and positive".into()));
    }
    if g.dims.iter().any(|&n| n < w) {
        return Err(Error::InvalidParameter(format!("volume smaller than the {w}^3 SSIM window")));
    }
    let l = match params.dynamic_range {
        Some(l) => l,
        None => {
            let (lo, hi) = b.min_max();
            (hi - lo) as f64
        }
    };
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::InvalidParameter("SSIM dynamic range must be > 0".into()));
    }
    let c1 = (params.k1 * l).powi(2);
    let c2 = (params.k2 * l).powi(2);

    let av: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let sa = window_sums(av.clone(), g.dims, w);
    let sb = window_sums(bv.clone(), g.dims, w);
    let saa = window_sums(av.iter().map(|x| x * x).collect(), g.dims, w);
    let sbb = window_sums(bv.iter().map(|x| x * x).collect(), g.dims, w);
    let sab = window_sums(av.iter().zip(&bv).map(|(x, y)| x * y).collect(), g.dims, w);

    let od = [g.dims[0] + 1 - w, g.dims[1] + 1 - w, g.dims[2] + 1 - w];
    let n = (w * w * w) as f64;
    let h = w / 2;
    let per_slice = par::map_range(od[2], |k| {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for j in 0..od[1] {
            for i in 0..od[0] {
                if let Some(r) = region {
                    if !r.get(i + h, j + h, k + h) {
                        continue;
                    }
                }
                let idx = i + od[0] * (j + od[1] * k);
                let ma = sa[idx] / n;
                let mb = sb[idx] / n;
                let va = saa[idx] / n - ma * ma;
                let vb = sbb[idx] / n - mb * mb;
                let cov = sab[idx] / n - ma * mb;
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        (sum, count)
    });
    let (sum, count) = per_slice.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    if count == 0 {
        return Err(Error::EmptyRegion("no SSIM window centered in the region".into()));
    }
    Ok(sum / count as f64)
}

pub fn rmse(a: &Volume, b: &Volume, region: Option<&Mask>) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "RMSE inputs")?;
    if let Some(r) = region {
        a.grid().ensure_matches(r.grid(), "RMSE region")?;
    }
    let (mut s, mut n) = (0.0f64, 0usize);
    for (idx, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_none_or(|r| r.at(idx)) {
            let d = x as f64 - y as f64;
            s += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("RMSE region is empty".into()));
    }
    Ok((s / n as f64).sqrt())
}

/// Dice overlap; 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "Dice inputs")?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += u64::from(x != 0);
        nb += u64::from(y != 0);
        both += u64::from(x != 0 && y != 0);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn rank(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut s = 0;
    while s < order.len() {
        let mut e = s;
        while e + 1 < order.len() && x[order[e + 1]] == x[order[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &o in &order[s..=e] {
            r[o] = avg;
        }
        s = e + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p from the Student-t approximation with n - 2 dof.
    pub p_value: f64,
    /// Exact two-sided permutation p, computed for n <= 10.
    pub p_exact: Option<f64>,
}

pub const EXACT_PERMUTATION_MAX_N: usize = 10;

pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidParameter("spearman needs at least 3 pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (rx, ry) = (rank(x), rank(y));
    let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    if constant(&rx) || constant(&ry) {
        return Err(Error::Degenerate("zero rank variance".into()));
    }
    let rho = pearson(&rx, &ry);
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let dof = (n - 2) as f64;
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    let p_exact = (n <= EXACT_PERMUTATION_MAX_N).then(|| permutation_p(&rx, &ry, rho));
    Ok(SpearmanResult { rho, p_value, p_exact })
}

/// Share of all n! reorderings of `ry` whose |rho| reaches the observed one.
fn permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let n = rx.len();
    let mut perm = ry.to_vec();
    let target = rho.abs() - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut c = vec![0usize; n];
    let mut visit = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).abs() >= target {
            hits += 1;
        }
    };
    // Heap's algorithm
    visit(&perm);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Unweighted Cohen's kappa, evaluated from integer counts.
pub fn cohen_kappa<T: Ord>(r1: &[T], r2: &[T]) -> Result<f64> {
    if r1.len() != r2.len() {
        return Err(Error::InvalidParameter(format!("length mismatch {} vs {}", r1.len(), r2.len())));
    }
    if r1.is_empty() {
        return Err(Error::InvalidParameter("no ratings".into()));
    }
    let n = r1.len() as u128;
    let mut m1: BTreeMap<&T, u128> = BTreeMap::new();
    let mut m2: BTreeMap<&T, u128> = BTreeMap::new();
    let mut agree = 0u128;
    for (a, b) in r1.iter().zip(r2) {
        *m1.entry(a).or_default() += 1;
        *m2.entry(b).or_default() += 1;
        agree += u128::from(a == b);
    }
    let chance: u128 = m1.iter().map(|(k, c)| c * m2.get(k).copied().unwrap_or(0)).sum();
    if chance == n * n {
        return Ok(1.0);
    }
    let num = (n * agree) as f64 - chance as f64;
    Ok(num / (n * n - chance) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ncc: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// `None` when no lung masks were supplied.
    pub dice: Option<f64>,
    pub region: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "label,region,ncc,ssim,rmse,dice";

    pub fn csv_row(&self, label: &str) -> String {
        let dice = self.dice.map(|d| d.to_string()).unwrap_or_default();
        format!("{label},{},{},{},{},{dice}", self.region, self.ncc, self.ssim, self.rmse)
    }
}

/// Metrics of a registered image `a` against the fixed image `b`, over the
/// whole volume or inside `region` (named `region_name`).
pub fn metric_report(
    a: &Volume,
    b: &Volume,
    masks: Option<(&Mask, &Mask)>,
    region: Option<(&Mask, &str)>,
    ssim: &SsimParams,
) -> Result<MetricReport> {
    let r = region.map(|(m, _)| m);
    let mut ssim = *ssim;
    if ssim.dynamic_range.is_none() {
        let (lo, hi) = b.min_max();
        ssim.dynamic_range = Some((hi - lo) as f64);
    }
    Ok(MetricReport {
        ncc: rigid::ncc(a, b, r)?,
        ssim: ssim3d(a, b, &ssim, r)?,
        rmse: rmse(a, b, r)?,
        dice: masks.map(|(x, y)| dice(x, y)).transpose()?,
        region: region.map_or("whole".to_string(), |(_, name)| name.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub whole: MetricReport,
    pub lung: Option<MetricReport>,
}
