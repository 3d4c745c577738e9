//! Discrete deformable registration.
//!
//! Each level places a uniform lattice of control nodes over the fixed
//! image, assigns every node an integer voxel displacement from a cubic
//! label set, and minimizes
//!
//! ```text
//! E(f) = sum_p D(f_p) + alpha * sum_(p,q) |u_p - u_q|^2 / |x_p - x_q|
//! ```
//!
//! where `D` compares SSC descriptors of the fixed image around `x_p` with
//! those of the (already warped) moving image around `x_p + f_p`, and
//! `u = prior + f` is the total node displacement in mm. The energy is
//! minimized exactly on a minimum spanning tree of the 6-connected lattice,
//! then the tree solution is polished with greedy node moves against the
//! full lattice energy. Levels run coarse to fine; each level's increments are interpolated to
//! a dense field and added to the running field.

pub mod ssc;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm, DisplacementField};
use crate::par;
use crate::volume::{Boundary, GridMeta, Interp, Mask, Volume};
use crate::warp::{self, CompositeTransform};
use crate::rigid::RigidTransform;

pub use ssc::{compute_ssc, Descriptor, CHANNELS};
pub use tree::{minimum_spanning_tree, solve_tree, EdgeModel, LabelGrid, MessageKernel, Tree};

use ssc::clamp_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Node spacing in voxels.
    pub node_spacing: usize,
    pub l_max: usize,
    /// Label step in voxels.
    pub q: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SscSigma {
    /// Mean of the 12 patch distances at each voxel.
    #[default]
    MeanPatchDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub levels: Vec<LevelConfig>,
    pub alpha: f64,
    pub patch_radius: usize,
    pub ssc_sigma: SscSigma,
    pub kernel: MessageKernel,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            levels: vec![
                LevelConfig { node_spacing: 8, l_max: 6, q: 2 },
                LevelConfig { node_spacing: 6, l_max: 4, q: 1 },
                LevelConfig { node_spacing: 4, l_max: 2, q: 1 },
            ],
            alpha: 0.03,
            patch_radius: 1,
            ssc_sigma: SscSigma::MeanPatchDistance,
            kernel: MessageKernel::Auto,
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("at least one level is required".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter("alpha must be finite and >= 0".into()));
        }
        for l in &self.levels {
            if l.node_spacing < 1 || l.q < 1 {
                return Err(Error::InvalidParameter(format!("invalid level {l:?}")));
            }
        }
        Ok(())
    }
}

/// `{-l_max*q, ..., 0, ..., l_max*q}^3` voxel displacements.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    pub l_max: usize,
    pub q: usize,
    grid: LabelGrid,
}

impl LabelSpace {
    pub fn new(l_max: usize, q: usize) -> Result<Self> {
        if q < 1 {
            return Err(Error::InvalidParameter("label step must be >= 1".into()));
        }
        let side = 2 * l_max + 1;
        let mut grid = LabelGrid { side, priority: Vec::new() };
        let mut priority: Vec<usize> = (0..grid.len()).collect();
        priority.sort_by_key(|&l| {
            let k = grid.coords(l).map(|x| x as i64 - l_max as i64);
            (k.iter().map(|x| x * x).sum::<i64>(), k)
        });
        grid.priority = priority;
        Ok(LabelSpace { l_max, q, grid })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn solver_grid(&self) -> &LabelGrid {
        &self.grid
    }

    /// Displacement of a label in voxels.
    #[inline]
    pub fn offset(&self, label: usize) -> [i64; 3] {
        self.grid
            .coords(label)
            .map(|x| (x as i64 - self.l_max as i64) * self.q as i64)
    }

    pub fn zero(&self) -> usize {
        let c = self.l_max;
        c + self.grid.side * (c + self.grid.side * c)
    }

    /// Index of a voxel displacement, if it is in the set.
    pub fn label_of(&self, offset: [i64; 3]) -> Option<usize> {
        let side = self.grid.side as i64;
        let mut k = [0i64; 3];
        for a in 0..3 {
            if offset[a] % self.q as i64 != 0 {
                return None;
            }
            k[a] = offset[a] / self.q as i64 + self.l_max as i64;
            if k[a] < 0 || k[a] >= side {
                return None;
            }
        }
        Some((k[0] + side * (k[1] + side * k[2])) as usize)
    }
}

/// Uniform control lattice with `ceil((n - 1) / s) + 1` nodes per axis; the
/// last node on each axis sits on the last voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlGrid {
    pub node_spacing: usize,
    pub dims: [usize; 3],
    pub image: GridMeta,
}

impl ControlGrid {
    pub fn new(image: &GridMeta, node_spacing: usize) -> Result<Self> {
        if node_spacing < 1 {
            return Err(Error::InvalidParameter("node spacing must be >= 1".into()));
        }
        let dims = image.dims.map(|n| (n - 1).div_ceil(node_spacing) + 1);
        Ok(ControlGrid {
            node_spacing,
            dims,
            image: *image,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node_coords(&self, p: usize) -> [usize; 3] {
        let [mx, my, _] = self.dims;
        [p % mx, (p / mx) % my, p / (mx * my)]
    }

    pub fn node_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    fn axis_pos(&self, a: usize, c: usize) -> usize {
        (c * self.node_spacing).min(self.image.dims[a] - 1)
    }

    /// Voxel under a node.
    pub fn voxel(&self, p: usize) -> [usize; 3] {
        let c = self.node_coords(p);
        [0, 1, 2].map(|a| self.axis_pos(a, c[a]))
    }

    pub fn position_mm(&self, p: usize) -> [f64; 3] {
        let v = self.voxel(p);
        self.image.world(v[0], v[1], v[2])
    }

    /// 6-neighbor lattice edges `(p, q)` with `p < q`, in node order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in 0..self.len() {
            let c = self.node_coords(p);
            for a in 0..3 {
                if c[a] + 1 < self.dims[a] {
                    let mut d = c;
                    d[a] += 1;
                    out.push((p, self.node_index(d)));
                }
            }
        }
        out
    }

    /// Segment and fraction for trilinear node interpolation along an axis.
    fn bracket(&self, a: usize, i: usize) -> (usize, usize, f64) {
        let m = self.dims[a];
        if m == 1 {
            return (0, 0, 0.0);
        }
        let c0 = (i / self.node_spacing).min(m - 2);
        let (p0, p1) = (self.axis_pos(a, c0), self.axis_pos(a, c0 + 1));
        (c0, c0 + 1, (i - p0) as f64 / (p1 - p0) as f64)
    }
}

/// `|u_p - u_q|^2 / |x_p - x_q|`.
pub fn reg_cost(u_p: [f64; 3], u_q: [f64; 3], x_p: [f64; 3], x_q: [f64; 3]) -> Result<f64> {
    let dist = norm([x_p[0] - x_q[0], x_p[1] - x_q[1], x_p[2] - x_q[2]]);
    if dist == 0.0 {
        return Err(Error::InvalidParameter("coincident nodes".into()));
    }
    let d = [u_p[0] - u_q[0], u_p[1] - u_q[1], u_p[2] - u_q[2]];
    Ok((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / dist)
}

/// Trilinear interpolation of node displacements (mm) to every voxel of `target`.
pub fn scale_field(nodes: &[[f64; 3]], grid: &ControlGrid, target: &GridMeta) -> Result<DisplacementField> {
    if nodes.len() != grid.len() {
        return Err(Error::InvalidParameter(format!(
            "{} node vectors for {} nodes",
            nodes.len(),
            grid.len()
        )));
    }
    grid.image.ensure_matches(target, "scale_field")?;
    let bx: Vec<_> = (0..target.dims[0]).map(|i| grid.bracket(0, i)).collect();
    let by: Vec<_> = (0..target.dims[1]).map(|j| grid.bracket(1, j)).collect();
    let bz: Vec<_> = (0..target.dims[2]).map(|k| grid.bracket(2, k)).collect();
    Ok(DisplacementField::from_fn(*target, |i, j, k| {
        let (x0, x1, fx) = bx[i];
        let (y0, y1, fy) = by[j];
        let (z0, z1, fz) = bz[k];
        let mut out = [0.0; 3];
        for (cz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (cy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (cx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wx * wy * wz;
                    if w == 0.0 {
                        continue;
                    }
                    let v = nodes[grid.node_index([cx, cy, cz])];
                    for a in 0..3 {
                        out[a] += w * v[a];
                    }
                }
            }
        }
        out
    }))
}

/// One level of the discrete problem.
pub struct LevelProblem<'a> {
    pub fixed: &'a Descriptor,
    /// Moving descriptor, already warped by the prior field.
    pub moving: &'a Descriptor,
    pub grid: ControlGrid,
    pub labels: LabelSpace,
    pub alpha: f64,
    /// Prior displacement at every node, mm.
    pub prior: Vec<[f64; 3]>,
    pub exclude_fixed: Option<&'a Mask>,
    /// Moving exclusion, in the warped-moving frame.
    pub exclude_moving: Option<&'a Mask>,
    patch: Vec<[i64; 3]>,
}

/// Patch sample offsets for a node spacing: half-width `s / 2`, stride
/// `max(1, ceil(half / 2))`.
pub fn patch_offsets(node_spacing: usize) -> Vec<[i64; 3]> {
    let h = (node_spacing / 2) as i64;
    let stride = ((h + 1) / 2).max(1);
    let mut axis = Vec::new();
    let mut o = -h;
    while o <= h {
        axis.push(o);
        o += stride;
    }
    let mut out = Vec::new();
    for &z in &axis {
        for &y in &axis {
            for &x in &axis {
                out.push([x, y, z]);
            }
        }
    }
    out
}

impl<'a> LevelProblem<'a> {
    pub fn new(
        fixed: &'a Descriptor,
        moving: &'a Descriptor,
        grid: ControlGrid,
        labels: LabelSpace,
        alpha: f64,
        prior: Vec<[f64; 3]>,
    ) -> Result<Self> {
        fixed.grid().ensure_matches(moving.grid(), "descriptors")?;
        fixed.grid().ensure_matches(&grid.image, "control grid")?;
        if prior.len() != grid.len() {
            return Err(Error::InvalidParameter("prior must cover every node".into()));
        }
        Ok(LevelProblem {
            fixed,
            moving,
            patch: patch_offsets(grid.node_spacing),
            grid,
            labels,
            alpha,
            prior,
            exclude_fixed: None,
            exclude_moving: None,
        })
    }

    pub fn with_exclusions(mut self, fixed: Option<&'a Mask>, moving: Option<&'a Mask>) -> Result<Self> {
        for m in fixed.iter().chain(moving.iter()) {
            self.fixed.grid().ensure_matches(m.grid(), "exclusion mask")?;
        }
        self.exclude_fixed = fixed;
        self.exclude_moving = moving;
        Ok(self)
    }

    pub fn patch(&self) -> &[[i64; 3]] {
        &self.patch
    }

    /// Mean absolute channel difference over the node patch; excluded
    /// samples are dropped, and a fully excluded patch costs 0.
    pub fn data_cost(&self, p: usize, label: usize) -> f64 {
        let g = self.fixed.grid();
        let dims = g.dims;
        let x = self.grid.voxel(p).map(|v| v as i64);
        let f = self.labels.offset(label);
        let fd = self.fixed.data();
        let md = self.moving.data();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for o in &self.patch {
            let a = g.index(
                clamp_index(x[0] + o[0], dims[0]),
                clamp_index(x[1] + o[1], dims[1]),
                clamp_index(x[2] + o[2], dims[2]),
            );
            let b = g.index(
                clamp_index(x[0] + o[0] + f[0], dims[0]),
                clamp_index(x[1] + o[1] + f[1], dims[1]),
                clamp_index(x[2] + o[2] + f[2], dims[2]),
            );
            if self.exclude_fixed.is_some_and(|m| m.at(a)) || self.exclude_moving.is_some_and(|m| m.at(b)) {
                continue;
            }
            let (fa, mb) = (&fd[a], &md[b]);
            for c in 0..CHANNELS {
                sum += (fa[c] as f64 - mb[c] as f64).abs();
            }
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / (n * CHANNELS) as f64
        }
    }

    /// All data costs, node-major.
    pub fn cost_table(&self) -> Vec<f64> {
        let l = self.labels.len();
        par::map_range(self.grid.len(), |p| (0..l).map(|lab| self.data_cost(p, lab)).collect::<Vec<f64>>()).concat()
    }

    /// Total displacement of node `p` under `label`, mm.
    pub fn displacement(&self, p: usize, label: usize) -> [f64; 3] {
        let o = self.labels.offset(label);
        let s = self.grid.image.spacing;
        [0, 1, 2].map(|a| self.prior[p][a] + o[a] as f64 * s[a])
    }

    /// Descriptor dissimilarity between the fixed patches of two nodes.
    pub fn edge_weight(&self, p: usize, q: usize) -> f64 {
        let g = self.fixed.grid();
        let dims = g.dims;
        let (xp, xq) = (self.grid.voxel(p).map(|v| v as i64), self.grid.voxel(q).map(|v| v as i64));
        let fd = self.fixed.data();
        let mut sum = 0.0;
        for o in &self.patch {
            let at = |x: [i64; 3]| {
                g.index(
                    clamp_index(x[0] + o[0], dims[0]),
                    clamp_index(x[1] + o[1], dims[1]),
                    clamp_index(x[2] + o[2], dims[2]),
                )
            };
            let (a, b) = (&fd[at(xp)], &fd[at(xq)]);
            for c in 0..CHANNELS {
                sum += (a[c] as f64 - b[c] as f64).abs();
            }
        }
        sum / (self.patch.len() * CHANNELS) as f64
    }

    pub fn spanning_tree(&self) -> Result<Tree> {
        let edges = self.grid.edges();
        let weights = par::map_range(edges.len(), |e| self.edge_weight(edges[e].0, edges[e].1));
        minimum_spanning_tree(self.grid.len(), &edges, &weights)
    }

    /// Pairwise model for an edge in label-index units.
    pub fn edge_model(&self, p: usize, q: usize) -> EdgeModel {
        let xp = self.grid.position_mm(p);
        let xq = self.grid.position_mm(q);
        let dist = norm([xp[0] - xq[0], xp[1] - xq[1], xp[2] - xq[2]]);
        let s = self.grid.image.spacing;
        let step = [0, 1, 2].map(|a| self.labels.q as f64 * s[a]);
        EdgeModel {
            w: [0, 1, 2].map(|a| self.alpha * step[a] * step[a] / dist),
            shift: [0, 1, 2].map(|a| (self.prior[p][a] - self.prior[q][a]) / step[a]),
        }
    }

    /// Energy over the full 6-connected lattice.
    pub fn total_energy(&self, assignment: &[usize]) -> Result<f64> {
        if assignment.len() != self.grid.len() {
            return Err(Error::InvalidParameter("assignment must cover every node".into()));
        }
        let data = par::ordered_sum(self.grid.len(), |p| self.data_cost(p, assignment[p]));
        if self.alpha == 0.0 {
            return Ok(data);
        }
        let mut reg = 0.0;
        for (p, q) in self.grid.edges() {
            reg += reg_cost(
                self.displacement(p, assignment[p]),
                self.displacement(q, assignment[q]),
                self.grid.position_mm(p),
                self.grid.position_mm(q),
            )?;
        }
        Ok(data + self.alpha * reg)
    }
}

/// Where the returned assignment of a level came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelStart {
    /// Tree DP solution, polished on the full lattice.
    Tree,
    /// Zero increment, polished on the full lattice; used when the tree
    /// start ends above the zero-assignment energy.
    Zero,
}

/// Result of one level.
#[derive(Debug, Clone)]
pub struct LevelSolution {
    pub labels: Vec<usize>,
    pub energy: f64,
    pub zero_energy: f64,
    /// Full-lattice energy of the raw tree solution, before polishing.
    pub tree_energy: f64,
    pub start: LevelStart,
    pub polish_sweeps: usize,
}

/// Per-node argmin of a cost table under the label priority order.
pub fn independent_argmin(table: &[f64], labels: &LabelSpace) -> Vec<usize> {
    let l = labels.len();
    table.chunks_exact(l).map(|c| labels.solver_grid().argmin(c)).collect()
}

const MAX_POLISH_SWEEPS: usize = 10;

/// Iterated conditional modes on the full lattice: visit nodes in index
/// order and move each to its best label given its neighbors; a node only
/// moves on a strict improvement, so the energy never increases.
fn polish(problem: &LevelProblem, table: &[f64], labels: &mut [usize]) -> usize {
    let n_labels = problem.labels.len();
    let n = problem.grid.len();
    let mut nbrs = vec![Vec::new(); n];
    for (p, q) in problem.grid.edges() {
        let d = norm({
            let (a, b) = (problem.grid.position_mm(p), problem.grid.position_mm(q));
            [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
        });
        nbrs[p].push((q, d));
        nbrs[q].push((p, d));
    }
    let disp: Vec<[f64; 3]> = (0..n_labels).map(|l| {
        let o = problem.labels.offset(l);
        let s = problem.grid.image.spacing;
        [0, 1, 2].map(|a| o[a] as f64 * s[a])
    }).collect();
    let local = |p: usize, l: usize, labels: &[usize]| {
        let mut e = table[p * n_labels + l];
        let up = [0, 1, 2].map(|a| problem.prior[p][a] + disp[l][a]);
        for &(q, d) in &nbrs[p] {
            let lq = labels[q];
            let uq = [0, 1, 2].map(|a| problem.prior[q][a] + disp[lq][a]);
            let diff = [up[0] - uq[0], up[1] - uq[1], up[2] - uq[2]];
            e += problem.alpha * (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]) / d;
        }
        e
    };
    let mut sweeps = 0;
    while sweeps < MAX_POLISH_SWEEPS {
        sweeps += 1;
        let mut changed = false;
        for p in 0..n {
            let cur = labels[p];
            let mut best = cur;
            let mut bv = local(p, cur, labels);
            for &l in &problem.labels.solver_grid().priority {
                let v = local(p, l, labels);
                if v < bv {
                    bv = v;
                    best = l;
                }
            }
            if best != cur {
                labels[p] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    sweeps
}

/// Solve one level: MST + exact tree DP (per-node argmin when alpha = 0),
/// then a full-lattice polish. The result never has higher full-lattice
/// energy than the zero assignment.
pub fn optimize_level(problem: &LevelProblem, kernel: MessageKernel) -> Result<LevelSolution> {
    let table = problem.cost_table();
    let tree_labels = if problem.alpha == 0.0 {
        independent_argmin(&table, &problem.labels)
    } else {
        let tree = problem.spanning_tree()?;
        solve_tree(&tree, &table, problem.labels.solver_grid(), |p, q| problem.edge_model(p, q), kernel)
    };
    let zero = vec![problem.labels.zero(); problem.grid.len()];
    let zero_energy = problem.total_energy(&zero)?;
    let tree_energy = problem.total_energy(&tree_labels)?;
    let mut labels = tree_labels;
    let mut sweeps = 0;
    if problem.alpha > 0.0 {
        sweeps = polish(problem, &table, &mut labels);
    }
    let mut energy = problem.total_energy(&labels)?;
    let mut start = LevelStart::Tree;
    if energy > zero_energy {
        labels = zero;
        sweeps = polish(problem, &table, &mut labels);
        energy = problem.total_energy(&labels)?;
        start = LevelStart::Zero;
    }
    if !energy.is_finite() || !zero_energy.is_finite() {
        return Err(Error::NonFinite("level energy".into()));
    }
    Ok(LevelSolution {
        labels,
        energy,
        zero_energy,
        tree_energy,
        start,
        polish_sweeps: sweeps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeformLevelReport {
    pub level: usize,
    pub node_spacing: usize,
    pub l_max: usize,
    pub q: usize,
    pub nodes: [usize; 3],
    pub labels: usize,
    /// Energy of the zero increment (prior field kept).
    pub energy_before: f64,
    /// Full-lattice energy of the raw tree solution.
    pub energy_tree: f64,
    pub energy_after: f64,
    pub start: LevelStart,
    pub polish_sweeps: usize,
    pub mean_increment_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeformReport {
    pub descriptor: String,
    pub optimizer: String,
    pub adjacency: String,
    pub alpha: f64,
    pub levels: Vec<DeformLevelReport>,
}

#[derive(Debug, Clone)]
pub struct DeformResult {
    pub field: DisplacementField,
    pub report: DeformReport,
}

fn is_constant(v: &Volume) -> bool {
    v.data().iter().all(|&x| x == v.data()[0])
}

/// Register `moving` (already rigidly aligned, on the fixed grid) to `fixed`.
///
/// The returned field `u` maps fixed point `x` to moving point `x + u(x)`.
/// Excluded voxels are dropped from the data term.
pub fn register_deformable(
    moving: &Volume,
    fixed: &Volume,
    exclude_moving: Option<&Mask>,
    exclude_fixed: Option<&Mask>,
    cfg: &DeformConfig,
) -> Result<DeformResult> {
    cfg.validate()?;
    let g = *fixed.grid();
    g.ensure_matches(moving.grid(), "register_deformable")?;
    for m in exclude_moving.iter().chain(exclude_fixed.iter()) {
        g.ensure_matches(m.grid(), "exclusion mask")?;
    }
    if is_constant(fixed) || is_constant(moving) {
        return Err(Error::Degenerate("deformable registration needs non-constant volumes".into()));
    }
    let desc_fixed = compute_ssc(fixed, cfg.patch_radius);
    let mut field = DisplacementField::zeros(g);
    let mut levels = Vec::new();
    for (li, lc) in cfg.levels.iter().enumerate() {
        let (warped, excl_m) = if field.is_zero() {
            (moving.clone(), exclude_moving.cloned())
        } else {
            let t = CompositeTransform {
                rigid: RigidTransform::identity(g.center()),
                field: field.clone(),
            };
            (
                warp::apply_composite_with(moving, &t, Interp::Trilinear, Boundary::Clamp),
                exclude_moving.map(|m| warp::warp_mask(m, &t)),
            )
        };
        let desc_moving = compute_ssc(&warped, cfg.patch_radius);
        let grid = ControlGrid::new(&g, lc.node_spacing)?;
        let prior: Vec<[f64; 3]> = (0..grid.len())
            .map(|p| {
                let v = grid.voxel(p);
                field.get(v[0], v[1], v[2])
            })
            .collect();
        let problem = LevelProblem::new(&desc_fixed, &desc_moving, grid, LabelSpace::new(lc.l_max, lc.q)?, cfg.alpha, prior)?
            .with_exclusions(exclude_fixed, excl_m.as_ref())?;
        let sol = optimize_level(&problem, cfg.kernel)?;
        let inc: Vec<[f64; 3]> = sol
            .labels
            .iter()
            .map(|&l| {
                let o = problem.labels.offset(l);
                [0, 1, 2].map(|a| o[a] as f64 * g.spacing[a])
            })
            .collect();
        let mean_inc = inc.iter().map(|v| norm(*v)).sum::<f64>() / inc.len() as f64;
        if inc.iter().any(|v| *v != [0.0; 3]) {
            field = field.add(&scale_field(&inc, &grid, &g)?)?;
        }
        levels.push(DeformLevelReport {
            level: li,
            node_spacing: lc.node_spacing,
            l_max: lc.l_max,
            q: lc.q,
            nodes: grid.dims,
            labels: problem.labels.len(),
            energy_before: sol.zero_energy,
            energy_tree: sol.tree_energy,
            energy_after: sol.energy,
            start: sol.start,
            polish_sweeps: sol.polish_sweeps,
            mean_increment_mm: mean_inc,
        });
    }
    Ok(DeformResult {
        field,
        report: DeformReport {
            descriptor: "ssc-12ch-6nbr".into(),
            optimizer: "mst-tree-dp+icm".into(),
            adjacency: "6-connected".into(),
            alpha: cfg.alpha,
            levels,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn textured(g: GridMeta, seed: u64) -> Volume {
        Volume::from_fn(g, Unit::Normalized, |i, j, k| {
            let h = crate::phantom::splitmix64(seed ^ (g.index(i, j, k) as u64));
            let n = (h >> 40) as f32 / (1u64 << 24) as f32;
            let p = g.world(i, j, k);
            (0.5 + 0.3 * (p[0] * 0.7).sin() * (p[1] * 0.5).cos() + 0.2 * (p[2] * 0.9).sin()) as f32 + 0.1 * n
        })
    }

    #[test]
    fn reg_cost_examples() {
        let x = [0.0; 3];
        assert_eq!(reg_cost([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], x, [4.5, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(reg_cost([3.0, 0.0, 0.0], [0.0; 3], x, [4.5, 0.0, 0.0]).unwrap(), 2.0);
        let a = reg_cost([1.0, -2.0, 0.5], [0.0, 1.0, 2.0], x, [0.0, 3.0, 4.0]).unwrap();
        let b = reg_cost([0.0, 1.0, 2.0], [1.0, -2.0, 0.5], x, [0.0, 3.0, 4.0]).unwrap();
        assert_eq!(a, b);
        assert!(reg_cost([1.0; 3], [0.0; 3], x, x).is_err());
    }

    #[test]
    fn label_space_layout() {
        let l = LabelSpace::new(2, 3).unwrap();
        assert_eq!(l.len(), 125);
        assert_eq!(l.offset(l.zero()), [0, 0, 0]);
        assert_eq!(l.solver_grid().priority[0], l.zero());
        assert_eq!(l.label_of([3, -6, 0]).map(|x| l.offset(x)), Some([3, -6, 0]));
        assert_eq!(l.label_of([1, 0, 0]), None);
        assert_eq!(l.label_of([9, 0, 0]), None);
    }

    #[test]
    fn control_grid_covers_volume() {
        let g = GridMeta::new([17, 10, 1], [1.0; 3], [0.0; 3]).unwrap();
        let c = ControlGrid::new(&g, 4).unwrap();
        assert_eq!(c.dims, [5, 4, 1]);
        assert_eq!(c.voxel(c.node_index([4, 3, 0])), [16, 9, 0]);
        assert_eq!(c.edges().len(), 4 * 4 + 5 * 3);
    }

    #[test]
    fn scale_field_cases() {
        let g = GridMeta::new([9, 9, 5], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let c = ControlGrid::new(&g, 4).unwrap();
        assert!(scale_field(&vec![[0.0; 3]; c.len()], &c, &g).unwrap().is_zero());
        let k = scale_field(&vec![[1.5, -2.0, 0.25]; c.len()], &c, &g).unwrap();
        assert!(k.data().iter().all(|v| *v == [1.5, -2.0, 0.25]));
        let mut nodes = vec![[0.0; 3]; c.len()];
        nodes[c.node_index([1, 1, 1])] = [8.0, 0.0, 0.0];
        let f = scale_field(&nodes, &c, &g).unwrap();
        // voxel (5, 3, 2): weights (1 - 1/4) * (3/4) * (2/4)
        let expect = 8.0 * 0.75 * 0.75 * 0.5;
        assert!((f.get(5, 3, 2)[0] - expect).abs() < 1e-6);
        assert_eq!(f.get(4, 4, 4)[0], 8.0);
        assert_eq!(f.get(0, 4, 4)[0], 0.0);
    }

    fn naive_cost(fixed: &Descriptor, moving: &Descriptor, grid: &ControlGrid, labels: &LabelSpace, p: usize, l: usize, ex: Option<&Mask>) -> f64 {
        let g = fixed.grid();
        let x = grid.voxel(p);
        let f = labels.offset(l);
        let mut total = 0.0;
        let mut count = 0;
        for o in patch_offsets(grid.node_spacing) {
            let cl = |v: i64, a: usize| v.clamp(0, g.dims[a] as i64 - 1) as usize;
            let a = [0, 1, 2].map(|t| cl(x[t] as i64 + o[t], t));
            let b = [0, 1, 2].map(|t| cl(x[t] as i64 + o[t] + f[t], t));
            if ex.is_some_and(|m| m.get(a[0], a[1], a[2])) {
                continue;
            }
            for c in 0..12 {
                total += (fixed.get(a[0], a[1], a[2])[c] as f64 - moving.get(b[0], b[1], b[2])[c] as f64).abs();
            }
            count += 1;
        }
        if count == 0 { 0.0 } else { total / (count * 12) as f64 }
    }

    #[test]
    fn data_cost_matches_naive_loop_and_shift() {
        let g = GridMeta::new([20, 18, 16], [1.0; 3], [0.0; 3]).unwrap();
        let fixed = textured(g, 1);
        // moving(x) = fixed(x - 2 e_x): fixed point x matches moving x + 2 e_x
        let moving = Volume::from_fn(g, Unit::Normalized, |i, j, k| fixed.get(i.saturating_sub(2), j, k));
        let (df, dm) = (compute_ssc(&fixed, 1), compute_ssc(&moving, 1));
        let grid = ControlGrid::new(&g, 4).unwrap();
        let labels = LabelSpace::new(1, 2).unwrap();
        let ex = Mask::from_fn(g, |i, _, k| i < 6 && k < 6);
        let prob = LevelProblem::new(&df, &dm, grid, labels.clone(), 1.0, vec![[0.0; 3]; grid.len()]).unwrap();
        let prob_ex = LevelProblem::new(&df, &dm, grid, labels.clone(), 1.0, vec![[0.0; 3]; grid.len()])
            .unwrap()
            .with_exclusions(Some(&ex), None)
            .unwrap();
        let shift = labels.label_of([2, 0, 0]).unwrap();
        let mut strictly = 0;
        let mut interior = 0;
        for p in 0..grid.len() {
            for l in 0..labels.len() {
                assert!((prob.data_cost(p, l) - naive_cost(&df, &dm, &grid, &labels, p, l, None)).abs() < 1e-12);
                assert!((prob_ex.data_cost(p, l) - naive_cost(&df, &dm, &grid, &labels, p, l, Some(&ex))).abs() < 1e-12);
            }
            let v = grid.voxel(p);
            if (4..14).contains(&v[0]) && (2..16).contains(&v[1]) && (2..14).contains(&v[2]) {
                interior += 1;
                let (at_shift, at_zero) = (prob.data_cost(p, shift), prob.data_cost(p, labels.zero()));
                assert!(at_shift <= at_zero);
                strictly += usize::from(at_shift < at_zero);
                assert!(at_shift < 1e-6);
            }
        }
        assert!(interior > 0 && strictly == interior);
        let same = LevelProblem::new(&df, &df, grid, labels.clone(), 1.0, vec![[0.0; 3]; grid.len()]).unwrap();
        assert_eq!(same.data_cost(3, labels.zero()), 0.0);
    }

    #[test]
    fn identical_images_give_zero_labels() {
        let g = GridMeta::new([17, 17, 13], [1.25; 3], [0.0; 3]).unwrap();
        let v = textured(g, 4);
        let d = compute_ssc(&v, 1);
        let grid = ControlGrid::new(&g, 4).unwrap();
        let labels = LabelSpace::new(1, 1).unwrap();
        let prob = LevelProblem::new(&d, &d, grid, labels, 1.6, vec![[0.0; 3]; grid.len()]).unwrap();
        for kernel in [MessageKernel::Exhaustive, MessageKernel::DistanceTransform] {
            let sol = optimize_level(&prob, kernel).unwrap();
            assert!(sol.labels.iter().all(|&l| l == prob.labels.zero()));
            assert_eq!(sol.energy, 0.0);
        }
    }

    #[test]
    fn global_shift_is_found() {
        let g = GridMeta::new([33, 33, 25], [1.0; 3], [0.0; 3]).unwrap();
        let fixed = textured(g, 9);
        let moving = Volume::from_fn(g, Unit::Normalized, |i, j, k| fixed.get(i, j, k.saturating_sub(1)));
        let (df, dm) = (compute_ssc(&fixed, 1), compute_ssc(&moving, 1));
        let grid = ControlGrid::new(&g, 4).unwrap();
        let labels = LabelSpace::new(2, 1).unwrap();
        let target = labels.label_of([0, 0, 1]).unwrap();
        let prob = LevelProblem::new(&df, &dm, grid, labels, 1.6, vec![[0.0; 3]; grid.len()]).unwrap();
        let sol = optimize_level(&prob, MessageKernel::Auto).unwrap();
        let interior: Vec<usize> = (0..grid.len())
            .filter(|&p| grid.node_coords(p).iter().zip(grid.dims).all(|(&c, m)| c > 0 && c + 1 < m))
            .collect();
        let hits = interior.iter().filter(|&&p| sol.labels[p] == target).count();
        assert!(hits as f64 >= 0.95 * interior.len() as f64, "{hits}/{}", interior.len());
        assert!(sol.energy <= sol.zero_energy);
    }

    #[test]
    fn alpha_zero_is_independent_argmin() {
        let g = GridMeta::new([17, 13, 9], [1.0; 3], [0.0; 3]).unwrap();
        let (df, dm) = (compute_ssc(&textured(g, 1), 1), compute_ssc(&textured(g, 2), 1));
        let grid = ControlGrid::new(&g, 4).unwrap();
        let labels = LabelSpace::new(1, 1).unwrap();
        let prob = LevelProblem::new(&df, &dm, grid, labels.clone(), 0.0, vec![[0.0; 3]; grid.len()]).unwrap();
        let sol = optimize_level(&prob, MessageKernel::Auto).unwrap();
        let mut sum = 0.0;
        for p in 0..grid.len() {
            let costs: Vec<f64> = (0..labels.len()).map(|l| prob.data_cost(p, l)).collect();
            let m = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(costs[sol.labels[p]], m);
            sum += m;
        }
        assert!((prob.total_energy(&sol.labels).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_near_identity_and_constant_rejected() {
        let g = GridMeta::new([24, 24, 20], [1.25; 3], [0.0; 3]).unwrap();
        let v = textured(g, 11);
        let r = register_deformable(&v, &v, None, None, &DeformConfig::default()).unwrap();
        assert!(r.field.mean_magnitude(None).unwrap() < 0.1);
        assert_eq!(r.report.levels.len(), 3);
        let c = Volume::filled(g, 0.5, Unit::Normalized);
        assert!(matches!(
            register_deformable(&c, &v, None, None, &DeformConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
