//! 12-channel self-similarity context descriptor.
//!
//! For every unordered pair of orthogonal face-neighbor offsets `(a, b)` the
//! channel distance is
//!
//! ```text
//! d(x) = mean over o in [-r, r]^3 of (I(y + a) - I(y + b))^2,  y = clamp(x + o)
//! ```
//!
//! with every image read clamped to the grid. Channel value is
//! `exp(-d / s2)` where `s2` is the mean of the 12 distances (floor 1e-6),
//! then each voxel is divided by its largest channel.

use crate::par;
use crate::volume::{GridMeta, Volume};

pub const CHANNELS: usize = 12;

const NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// The 12 orthogonal neighbor pairs, in channel order.
pub fn channel_pairs() -> [([i64; 3], [i64; 3]); CHANNELS] {
    let mut out = [([0; 3], [0; 3]); CHANNELS];
    let mut c = 0;
    for a in 0..6 {
        for b in a + 1..6 {
            let dot: i64 = (0..3).map(|t| NEIGHBORS[a][t] * NEIGHBORS[b][t]).sum();
            if dot == 0 {
                out[c] = (NEIGHBORS[a], NEIGHBORS[b]);
                c += 1;
            }
        }
    }
    debug_assert_eq!(c, CHANNELS);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    grid: GridMeta,
    data: Vec<[f32; CHANNELS]>,
}

impl Descriptor {
    pub fn grid(&self) -> &GridMeta {
        &self.grid
    }

    pub fn data(&self) -> &[[f32; CHANNELS]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &[f32; CHANNELS] {
        &self.data[self.grid.index(i, j, k)]
    }
}

#[inline]
pub(crate) fn clamp_index(x: i64, n: usize) -> usize {
    x.clamp(0, n as i64 - 1) as usize
}

/// Box mean of radius `r` along one axis with clamped reads.
fn box_axis(src: &[f32], dims: [usize; 3], axis: usize, r: usize) -> Vec<f32> {
    let [nx, ny, _] = dims;
    let n = dims[axis];
    let stride = [1, nx, nx * ny][axis];
    let inv = 1.0 / (2 * r + 1) as f64;
    let mut out = vec![0.0f32; src.len()];
    par::for_each_chunk_mut(&mut out, nx * ny, |k, slice| {
        let base = k * nx * ny;
        for local in 0..nx * ny {
            let idx = base + local;
            let pos = [local % nx, local / nx, k][axis];
            let line0 = idx - pos * stride;
            let mut acc = 0.0f64;
            for o in -(r as i64)..=(r as i64) {
                acc += src[line0 + clamp_index(pos as i64 + o, n) * stride] as f64;
            }
            slice[local] = (acc * inv) as f32;
        }
    });
    out
}

/// Compute the descriptor of a volume (ideally normalized intensities).
pub fn compute_ssc(vol: &Volume, patch_radius: usize) -> Descriptor {
    let g = *vol.grid();
    let dims = g.dims;
    let data = vol.data();
    let at = |i: i64, j: i64, k: i64| {
        data[g.index(clamp_index(i, dims[0]), clamp_index(j, dims[1]), clamp_index(k, dims[2]))] as f64
    };
    let pairs = channel_pairs();
    let dists: Vec<Vec<f32>> = pairs
        .iter()
        .map(|&(a, b)| {
            let mut sq = vec![0.0f32; g.len()];
            par::for_each_chunk_mut(&mut sq, dims[0] * dims[1], |k, slice| {
                let k = k as i64;
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let (i, j2) = (i as i64, j as i64);
                        let d = at(i + a[0], j2 + a[1], k + a[2]) - at(i + b[0], j2 + b[1], k + b[2]);
                        slice[i as usize + dims[0] * j] = (d * d) as f32;
                    }
                }
            });
            if patch_radius == 0 {
                return sq;
            }
            let x = box_axis(&sq, dims, 0, patch_radius);
            let y = box_axis(&x, dims, 1, patch_radius);
            box_axis(&y, dims, 2, patch_radius)
        })
        .collect();

    let mut out = vec![[0.0f32; CHANNELS]; g.len()];
    par::for_each_chunk_mut(&mut out, dims[0] * dims[1], |k, slice| {
        let base = k * dims[0] * dims[1];
        for (local, v) in slice.iter_mut().enumerate() {
            let idx = base + local;
            let mut d = [0.0f64; CHANNELS];
            for c in 0..CHANNELS {
                d[c] = dists[c][idx] as f64;
            }
            let s2 = (d.iter().sum::<f64>() / CHANNELS as f64).max(1e-6);
            let mut e = [0.0f64; CHANNELS];
            for c in 0..CHANNELS {
                e[c] = (-d[c] / s2).exp();
            }
            let m = e.iter().cloned().fold(0.0, f64::max);
            for c in 0..CHANNELS {
                v[c] = (e[c] / m) as f32;
            }
        }
    });
    Descriptor { grid: g, data: out }
}
