//! Respiratory differencing `post - registered_pre` and HSV slice rendering.
//!
//! Color map, per pixel with `d = clamp(diff / diff_window, -1, 1)`:
//! hue `= 120 - 120 d` degrees (blue at -1, cyan, green at 0, yellow, red at
//! +1), saturation `= |d|`, value = fixed image gray level in `gray_window`.
//! Conversion uses f64 arithmetic only (no transcendental calls) and rounds
//! with `round()` before the cast to u8, so output bytes do not depend on the
//! platform's libm. PNGs are 8-bit RGB, no filter, zlib level 6.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Mask, Unit, Volume, DEFAULT_WINDOW};

/// Signed `post - registered_pre`, on the postoperative grid.
pub type DiffVolume = Volume;

pub fn difference(post: &Volume, registered_pre: &Volume) -> Result<DiffVolume> {
    post.grid().ensure_matches(registered_pre.grid(), "difference inputs")?;
    if post.unit() != registered_pre.unit() {
        return Err(Error::UnitMismatch(format!(
            "post is {}, registered pre is {}",
            post.unit().as_str(),
            registered_pre.unit().as_str()
        )));
    }
    let data = post.data().iter().zip(registered_pre.data()).map(|(a, b)| a - b).collect();
    Volume::new(*post.grid(), data, post.unit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    #[default]
    Axial,
    Coronal,
    Sagittal,
}

impl SliceAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SliceAxis::Axial => "axial",
            SliceAxis::Coronal => "coronal",
            SliceAxis::Sagittal => "sagittal",
        }
    }

    /// Index of the volume axis held fixed.
    fn normal(&self) -> usize {
        match self {
            SliceAxis::Axial => 2,
            SliceAxis::Coronal => 1,
            SliceAxis::Sagittal => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub slice_axis: SliceAxis,
    /// Difference magnitude reaching full saturation.
    pub diff_window: f64,
    /// Window of the fixed image mapped to value 0..1; `None` picks the HU
    /// window for HU volumes and [0, 1] otherwise.
    pub gray_window: Option<(f64, f64)>,
    pub tumor_color: [u8; 3],
    pub treatment_color: [u8; 3],
    /// Explicit slice indices; `None` renders every slice touching the masks.
    pub slices: Option<Vec<usize>>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            slice_axis: SliceAxis::Axial,
            diff_window: 400.0,
            gray_window: None,
            tumor_color: [255, 255, 0],
            treatment_color: [0, 0, 255],
            slices: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diff_window > 0.0) || !self.diff_window.is_finite() {
            return Err(Error::InvalidParameter("diff_window must be > 0".into()));
        }
        if let Some((lo, hi)) = self.gray_window {
            if !(lo < hi) {
                return Err(Error::InvalidParameter("gray_window must satisfy low < high".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSlice {
    pub axis: SliceAxis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl RenderedSlice {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (x + self.width * y);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }
}

/// HSV to RGB, hue in degrees, all channels in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color of one difference value over a gray level.
pub fn diff_color(diff: f64, gray: f64, diff_window: f64) -> [u8; 3] {
    let d = (diff / diff_window).clamp(-1.0, 1.0);
    let rgb = hsv_to_rgb(120.0 - 120.0 * d, d.abs(), gray.clamp(0.0, 1.0));
    rgb.map(|c| (c * 255.0).round() as u8)
}

/// Slice-plane geometry: `(width, height, volume index of pixel (x, y))`.
/// Coronal and sagittal images put superior (high z) at the top.
fn plane(dims: [usize; 3], axis: SliceAxis, s: usize) -> (usize, usize, impl Fn(usize, usize) -> [usize; 3]) {
    let (w, h) = match axis {
        SliceAxis::Axial => (dims[0], dims[1]),
        SliceAxis::Coronal => (dims[0], dims[2]),
        SliceAxis::Sagittal => (dims[1], dims[2]),
    };
    let nz = dims[2];
    let f = move |x: usize, y: usize| match axis {
        SliceAxis::Axial => [x, y, s],
        SliceAxis::Coronal => [x, s, nz - 1 - y],
        SliceAxis::Sagittal => [s, x, nz - 1 - y],
    };
    (w, h, f)
}

/// In-plane boundary: set pixel with a 4-neighbor that is unset or off-image.
pub fn boundary_pixels(mask: &Mask, axis: SliceAxis, s: usize) -> Vec<bool> {
    let (w, h, at) = plane(mask.grid().dims, axis, s);
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && {
            let [i, j, k] = at(x as usize, y as usize);
            mask.get(i, j, k)
        }
    };
    let mut out = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !inside(x + dx, y + dy)) {
                out[x as usize + w * y as usize] = true;
            }
        }
    }
    out
}

/// Slices along `axis` containing any voxel of `mask`.
fn touched_slices(mask: &Mask, axis: SliceAxis) -> Vec<usize> {
    let g = mask.grid();
    let n = axis.normal();
    let mut hit = vec![false; g.dims[n]];
    for (idx, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            hit[g.coords(idx)[n]] = true;
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

/// Render HSV difference slices with tumor (yellow) and treatment (blue)
/// contours. Without an explicit slice list every slice intersecting
/// `tumor ∪ treatment` is drawn; if both are empty the central slice is.
pub fn render_slices(
    diff: &DiffVolume,
    fixed: &Volume,
    tumor_reg: &Mask,
    treatment: &Mask,
    cfg: &RenderConfig,
) -> Result<Vec<RenderedSlice>> {
    cfg.validate()?;
    let g = diff.grid();
    g.ensure_matches(fixed.grid(), "fixed image")?;
    g.ensure_matches(tumor_reg.grid(), "tumor mask")?;
    g.ensure_matches(treatment.grid(), "treatment mask")?;
    let axis = cfg.slice_axis;
    let n_slices = g.dims[axis.normal()];
    let slices = match &cfg.slices {
        Some(s) => {
            if let Some(bad) = s.iter().find(|&&i| i >= n_slices) {
                return Err(Error::InvalidParameter(format!("slice {bad} out of range 0..{n_slices}")));
            }
            s.clone()
        }
        None => {
            let s = touched_slices(&tumor_reg.union(treatment)?, axis);
            if s.is_empty() {
                vec![n_slices / 2]
            } else {
                s
            }
        }
    };
    let (glo, ghi) = cfg.gray_window.unwrap_or(match fixed.unit() {
        Unit::Hu => DEFAULT_WINDOW,
        Unit::Normalized => (0.0, 1.0),
    });
    Ok(par::map_range(slices.len(), |n| {
        let s = slices[n];
        let (w, h, at) = plane(g.dims, axis, s);
        let tumor_edge = boundary_pixels(tumor_reg, axis, s);
        let treat_edge = boundary_pixels(treatment, axis, s);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let p = x + w * y;
                let c = if tumor_edge[p] {
                    cfg.tumor_color
                } else if treat_edge[p] {
                    cfg.treatment_color
                } else {
                    let [i, j, k] = at(x, y);
                    let gray = (fixed.get(i, j, k) as f64 - glo) / (ghi - glo);
                    diff_color(diff.get(i, j, k) as f64, gray, cfg.diff_window)
                };
                rgb.extend_from_slice(&c);
            }
        }
        RenderedSlice { axis, index: s, width: w, height: h, rgb }
    }))
}

pub fn encode_png(slice: &RenderedSlice) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, slice.width as u32, slice.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_filter(png::Filter::NoFilter);
        enc.set_deflate_compression(png::DeflateCompression::Level(6));
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&slice.rgb).map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub index: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderIndex {
    pub case: String,
    pub axis: SliceAxis,
    pub diff_window: f64,
    pub gray_window: Option<(f64, f64)>,
    pub color_map: String,
    pub slices: Vec<SliceEntry>,
}

/// Write `<case>_<axis>_<index>.png` per slice plus `<case>_index.json`.
pub fn write_slices(slices: &[RenderedSlice], dir: impl AsRef<Path>, case: &str, cfg: &RenderConfig) -> Result<RenderIndex> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for s in slices {
        let file = format!("{case}_{}_{:03}.png", s.axis.as_str(), s.index);
        let path = dir.join(&file);
        fs::write(&path, encode_png(s)?).map_err(|e| Error::io(&path, e))?;
        entries.push(SliceEntry { index: s.index, file });
    }
    let index = RenderIndex {
        case: case.to_string(),
        axis: cfg.slice_axis,
        diff_window: cfg.diff_window,
        gray_window: cfg.gray_window,
        color_map: "hue=120-120*clamp(diff/window,-1,1) deg, sat=|clamp(diff/window)|, value=fixed gray".into(),
        slices: entries,
    };
    let path = dir.join(format!("{case}_index.json"));
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridMeta;

    fn g() -> GridMeta {
        GridMeta::new([12, 10, 6], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn ramp(offset: f32) -> Volume {
        Volume::from_fn(g(), Unit::Hu, |i, j, k| (i * 10 + j * 3 + k) as f32 - 700.0 + offset)
    }

    #[test]
    fn difference_cases() {
        let a = ramp(0.0);
        assert!(difference(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let b = ramp(100.0);
        assert!(difference(&b, &a).unwrap().data().iter().all(|&v| v == 100.0));
        let ab = difference(&a, &b).unwrap();
        let ba = difference(&b, &a).unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(x, y)| *x == -*y));
        for ((d, x), y) in ab.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!((d + y).to_bits(), x.to_bits());
        }
        assert!(difference(&a, &a.clone().with_unit(Unit::Normalized)).is_err());
    }

    #[test]
    fn hue_anchors() {
        assert_eq!(diff_color(400.0, 1.0, 400.0), [255, 0, 0]);
        assert_eq!(diff_color(-400.0, 1.0, 400.0), [0, 0, 255]);
        assert_eq!(diff_color(0.0, 0.5, 400.0), [128, 128, 128]);
        assert_eq!(diff_color(-200.0, 1.0, 400.0), [128, 255, 255]);
        assert_eq!(diff_color(9000.0, 1.0, 400.0), [255, 0, 0]);
    }

    #[test]
    fn zero_diff_is_grayscale() {
        let fixed = ramp(0.0);
        let zero = Volume::filled(g(), 0.0, Unit::Hu);
        let cfg = RenderConfig { slices: Some(vec![0, 3, 5]), ..Default::default() };
        let out = render_slices(&zero, &fixed, &Mask::empty(g()), &Mask::empty(g()), &cfg).unwrap();
        assert_eq!(out.len(), 3);
        for s in &out {
            assert!(s.rgb.chunks(3).all(|c| c[0] == c[1] && c[1] == c[2]));
        }
    }

    #[test]
    fn contours_on_boundary_only() {
        let fixed = ramp(0.0);
        let diff = Volume::filled(g(), 300.0, Unit::Hu);
        let tumor = Mask::from_fn(g(), |i, j, k| (3..7).contains(&i) && (2..6).contains(&j) && k == 2);
        let treat = Mask::from_fn(g(), |i, j, k| (2..9).contains(&i) && (1..8).contains(&j) && (1..4).contains(&k));
        let out = render_slices(&diff, &fixed, &tumor, &treat, &RenderConfig::default()).unwrap();
        assert_eq!(out.iter().map(|s| s.index).collect::<Vec<_>>(), vec![1, 2, 3]);
        let s = &out[1];
        for y in 0..s.height {
            for x in 0..s.width {
                let t = tumor.get(x, y, 2);
                let t_edge = t && (x == 3 || x == 6 || y == 2 || y == 5);
                let b = treat.get(x, y, 2);
                let b_edge = b && (x == 2 || x == 8 || y == 1 || y == 7);
                let px = s.pixel(x, y);
                if t_edge {
                    assert_eq!(px, [255, 255, 0]);
                } else if b_edge {
                    assert_eq!(px, [0, 0, 255]);
                } else {
                    let gray = (fixed.get(x, y, 2) as f64 + 1000.0) / 1400.0;
                    assert_eq!(px, diff_color(300.0, gray, 400.0));
                    assert_ne!(px, [255, 255, 0]);
                }
            }
        }
    }

    #[test]
    fn coronal_orientation_and_png_roundtrip() {
        let fixed = ramp(0.0);
        let diff = Volume::from_fn(g(), Unit::Hu, |_, _, k| if k == 5 { 400.0 } else { 0.0 });
        let cfg = RenderConfig { slice_axis: SliceAxis::Coronal, slices: Some(vec![4]), gray_window: Some((-1000.0, -1000.0 + 1e-3)), ..Default::default() };
        let out = render_slices(&diff, &fixed, &Mask::empty(g()), &Mask::empty(g()), &cfg).unwrap();
        let s = &out[0];
        assert_eq!((s.width, s.height), (12, 6));
        // superior row on top
        assert_eq!(s.pixel(0, 0), [255, 0, 0]);
        assert_eq!(s.pixel(0, 5), [255, 255, 255]);
        let bytes = encode_png(s).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(bytes.clone()));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        r.next_frame(&mut buf).unwrap();
        assert_eq!(buf, s.rgb);
        assert_eq!(encode_png(s).unwrap(), bytes);
    }

    #[test]
    fn writes_files_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let fixed = ramp(0.0);
        let cfg = RenderConfig { slices: Some(vec![1, 4]), ..Default::default() };
        let out = render_slices(&fixed, &fixed, &Mask::empty(g()), &Mask::empty(g()), &cfg).unwrap();
        let idx = write_slices(&out, dir.path(), "case", &cfg).unwrap();
        assert_eq!(idx.slices[1].file, "case_axial_004.png");
        assert!(dir.path().join("case_axial_001.png").exists());
        let back: RenderIndex = serde_json::from_slice(&fs::read(dir.path().join("case_index.json")).unwrap()).unwrap();
        assert_eq!(back, idx);
        assert!(render_slices(&fixed, &fixed, &Mask::empty(g()), &Mask::empty(g()), &RenderConfig { slices: Some(vec![6]), ..cfg }).is_err());
    }
}
