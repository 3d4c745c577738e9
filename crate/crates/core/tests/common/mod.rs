//! Golden PNG scene for the difference renderer. It uses only exactly rounded
//! arithmetic so the expected bytes hold on every platform.

use std::path::PathBuf;

use ablate_core::differencing::{encode_png, render_slices, RenderConfig};
use ablate_core::phantom::Sphere;
use ablate_core::volume::{GridMeta, Unit, Volume};

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/diff_axial_004.png")
}

pub fn render_golden_scene() -> Vec<u8> {
    let g = GridMeta::new([64, 64, 9], [1.25; 3], [0.0; 3]).unwrap();
    let c = [40.0, 38.75, 5.0];
    let fixed = Volume::from_fn(g, Unit::Hu, |i, j, k| {
        let (x, y) = (i as f64 - 31.5, j as f64 - 31.5);
        let texture = ((i * 7 + j * 13 + k * 3) % 17) as f64 * 5.0;
        let hu = if x * x + y * y > 30.0 * 30.0 {
            -1000.0
        } else if (x.abs() - 13.0) * (x.abs() - 13.0) / 100.0 + y * y / 400.0 <= 1.0 {
            -820.0 + texture
        } else {
            -20.0 + texture
        };
        hu as f32
    });
    let diff = Volume::from_fn(g, Unit::Hu, |i, j, k| {
        let w = g.world(i, j, k);
        let r2 = (0..3).map(|a| (w[a] - c[a]) * (w[a] - c[a])).sum::<f64>() / (14.0 * 14.0);
        if r2 < 1.0 {
            (650.0 * (1.0 - r2) * (1.0 - r2)) as f32
        } else {
            (((i + 2 * j) % 9) as f64 * -10.0) as f32
        }
    });
    let tumor = Sphere { center: c, radius: 6.0 }.voxelize(&g);
    let treatment = Sphere { center: c, radius: 11.0 }.voxelize(&g);
    let cfg = RenderConfig { slices: Some(vec![4]), ..Default::default() };
    let slices = render_slices(&diff, &fixed, &tumor, &treatment, &cfg).unwrap();
    encode_png(&slices[0]).unwrap()
}
