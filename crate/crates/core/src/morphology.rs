//! Binary morphology on masks: exact Euclidean distance transform in
//! physical units, ball dilation/erosion/closing, 6-connected component
//! labeling and per-slice hole filling.

use std::collections::VecDeque;

use crate::par;
use crate::volume::{GridMeta, Mask};

/// Lower envelope of parabolas `f[p] + (s * (q - p))^2`, evaluated at every `q`.
/// Infinite entries of `f` do not take part.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |p: usize| p as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + pos(q) * pos(q);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + pos(p) * pos(p);
                    let x = (fq - fp) / (2.0 * (pos(q) - pos(p)));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = f[v[k]] + d * d;
    }
}

/// Squared distance in mm² from every voxel center to the nearest set voxel
/// center (0 on the set, infinity if the mask is empty).
pub fn squared_distance_to(mask: &Mask) -> Vec<f64> {
    let g = *mask.grid();
    let seed: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    squared_edt(&g, seed)
}

fn squared_edt(g: &GridMeta, mut d: Vec<f64>) -> Vec<f64> {
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing;

    // x then y: both stay inside a z-slice
    par::for_each_chunk_mut(&mut d, nx * ny, |_, slice| {
        let (mut v, mut z) = (Vec::new(), Vec::new());
        let mut line = vec![0.0; nx.max(ny)];
        let mut out = vec![0.0; nx.max(ny)];
        for j in 0..ny {
            let row = &mut slice[j * nx..(j + 1) * nx];
            line[..nx].copy_from_slice(row);
            edt_line(&line[..nx], sx, &mut out[..nx], &mut v, &mut z);
            row.copy_from_slice(&out[..nx]);
        }
        for i in 0..nx {
            for j in 0..ny {
                line[j] = slice[i + nx * j];
            }
            edt_line(&line[..ny], sy, &mut out[..ny], &mut v, &mut z);
            for j in 0..ny {
                slice[i + nx * j] = out[j];
            }
        }
    });

    if nz > 1 {
        let cols = par::map_range(nx * ny, |ij| {
            let (mut v, mut z) = (Vec::new(), Vec::new());
            let line: Vec<f64> = (0..nz).map(|k| d[ij + nx * ny * k]).collect();
            let mut out = vec![0.0; nz];
            edt_line(&line, sz, &mut out, &mut v, &mut z);
            out
        });
        for (ij, col) in cols.into_iter().enumerate() {
            for (k, x) in col.into_iter().enumerate() {
                d[ij + nx * ny * k] = x;
            }
        }
    }
    d
}

#[inline]
fn within(d2: f64, radius: f64) -> bool {
    d2 <= radius * radius * (1.0 + 1e-12) + 1e-12
}

/// Voxels whose center lies within `radius` mm of a set voxel center.
pub fn dilate_ball(mask: &Mask, radius: f64) -> Mask {
    if radius <= 0.0 {
        return mask.clone();
    }
    let d = squared_distance_to(mask);
    let data = d.iter().map(|&x| u8::from(within(x, radius))).collect();
    Mask::new(*mask.grid(), data).expect("same grid")
}

/// Set voxels with no unset voxel within `radius` mm. Space outside the grid
/// counts as set.
pub fn erode_ball(mask: &Mask, radius: f64) -> Mask {
    if radius <= 0.0 {
        return mask.clone();
    }
    let complement: Vec<u8> = mask.data().iter().map(|&m| u8::from(m == 0)).collect();
    let comp = Mask::new(*mask.grid(), complement).expect("same grid");
    let d = squared_distance_to(&comp);
    let data = d.iter().map(|&x| u8::from(!within(x, radius))).collect();
    Mask::new(*mask.grid(), data).expect("same grid")
}

/// Ball closing (dilate then erode); always a superset of the input.
pub fn close_ball(mask: &Mask, radius: f64) -> Mask {
    erode_ball(&dilate_ball(mask, radius), radius)
}

/// One 6-connected component.
#[derive(Debug, Clone)]
pub struct Component {
    pub label: u32,
    pub voxels: usize,
    pub touches_border: bool,
}

/// Label 6-connected components of the set voxels. Label 0 is background;
/// components are numbered from 1 in scan order.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<Component>) {
    let g = *mask.grid();
    let [nx, ny, nz] = g.dims;
    let mut labels = vec![0u32; g.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !mask.at(start) || labels[start] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        let mut comp = Component {
            label,
            voxels: 0,
            touches_border: false,
        };
        labels[start] = label;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            comp.voxels += 1;
            let [i, j, k] = g.coords(idx);
            if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                comp.touches_border = true;
            }
            let mut visit = |n: usize| {
                if mask.at(n) && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < nx {
                visit(idx + 1);
            }
            if j > 0 {
                visit(idx - nx);
            }
            if j + 1 < ny {
                visit(idx + nx);
            }
            if k > 0 {
                visit(idx - nx * ny);
            }
            if k + 1 < nz {
                visit(idx + nx * ny);
            }
        }
        comps.push(comp);
    }
    (labels, comps)
}

/// Fill enclosed background in every axial (z) slice using 4-connectivity.
pub fn fill_holes_axial(mask: &Mask) -> Mask {
    let g = *mask.grid();
    let [nx, ny, _] = g.dims;
    let mut data = mask.data().to_vec();
    par::for_each_chunk_mut(&mut data, nx * ny, |_, slice| {
        // 0 = unset & unreached, 1 = set, 2 = reached background
        let mut stack = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if (i == 0 || j == 0 || i + 1 == nx || j + 1 == ny) && slice[i + nx * j] == 0 {
                    slice[i + nx * j] = 2;
                    stack.push((i, j));
                }
            }
        }
        while let Some((i, j)) = stack.pop() {
            let mut push = |a: usize, b: usize| {
                let p = a + nx * b;
                if slice[p] == 0 {
                    slice[p] = 2;
                    stack.push((a, b));
                }
            };
            if i > 0 {
                push(i - 1, j);
            }
            if i + 1 < nx {
                push(i + 1, j);
            }
            if j > 0 {
                push(i, j - 1);
            }
            if j + 1 < ny {
                push(i, j + 1);
            }
        }
        for v in slice.iter_mut() {
            *v = u8::from(*v != 2);
        }
    });
    Mask::new(g, data).expect("same grid")
}
