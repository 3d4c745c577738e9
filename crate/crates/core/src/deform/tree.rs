//! Minimum spanning tree and exact min-sum dynamic programming over it.
//!
//! Pairwise terms have the separable quadratic form
//! `sum_a w[a] * (kp[a] - kq[a] + shift[a])^2` where `kp`, `kq` are the
//! per-axis label indices of child and parent. Messages are computed either
//! exhaustively or with a separable lower-envelope distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise model on one tree edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeModel {
    pub w: [f64; 3],
    pub shift: [f64; 3],
}

impl EdgeModel {
    #[inline]
    pub fn cost(&self, kp: [usize; 3], kq: [usize; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = kp[a] as f64 - kq[a] as f64 + self.shift[a];
            s += self.w[a] * d * d;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MessageKernel {
    /// O(L^2) scan for label spaces up to 125 labels, distance transform above.
    #[default]
    Auto,
    Exhaustive,
    DistanceTransform,
}

/// Rooted spanning tree. `order` is a breadth-first order from the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub order: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Tree {
    /// Root an undirected edge list at node 0; errors unless it is a spanning tree.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Tree> {
        if n_nodes == 0 || edges.len() + 1 != n_nodes {
            return Err(Error::InvalidParameter(format!(
                "{} edges cannot span {} nodes as a tree",
                edges.len(),
                n_nodes
            )));
        }
        let mut adj = vec![Vec::new(); n_nodes];
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes || a == b {
                return Err(Error::InvalidParameter(format!("bad edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut parent = vec![None; n_nodes];
        let mut seen = vec![false; n_nodes];
        let mut order = vec![0];
        seen[0] = true;
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            for &q in &adj[p] {
                if !seen[q] {
                    seen[q] = true;
                    parent[q] = Some(p);
                    order.push(q);
                }
            }
        }
        if order.len() != n_nodes {
            return Err(Error::InvalidParameter("edge list is not connected".into()));
        }
        Ok(Tree {
            root: 0,
            parent,
            order,
            edges: edges.to_vec(),
        })
    }
}

fn find(uf: &mut [usize], mut x: usize) -> usize {
    while uf[x] != x {
        uf[x] = uf[uf[x]];
        x = uf[x];
    }
    x
}

/// Kruskal MST; ties broken by edge index.
pub fn minimum_spanning_tree(n_nodes: usize, edges: &[(usize, usize)], weights: &[f64]) -> Result<Tree> {
    let mut idx: Vec<usize> = (0..edges.len()).collect();
    idx.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(a.cmp(&b)));
    let mut uf: Vec<usize> = (0..n_nodes).collect();
    let mut chosen = Vec::with_capacity(n_nodes.saturating_sub(1));
    for e in idx {
        let (a, b) = edges[e];
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra != rb {
            uf[ra] = rb;
            chosen.push((a, b));
        }
    }
    Tree::from_edges(n_nodes, &chosen)
}

/// Label geometry for the solver: `side^3` labels, index `x + side*(y + side*z)`.
#[derive(Debug, Clone)]
pub struct LabelGrid {
    pub side: usize,
    /// All labels sorted by tie-break priority (smaller displacement first).
    pub priority: Vec<usize>,
}

impl LabelGrid {
    #[inline]
    pub fn len(&self) -> usize {
        self.side * self.side * self.side
    }

    #[inline]
    pub fn coords(&self, l: usize) -> [usize; 3] {
        [l % self.side, (l / self.side) % self.side, l / (self.side * self.side)]
    }

    /// Best label of a cost vector under the priority order.
    pub fn argmin(&self, costs: &[f64]) -> usize {
        let mut best = self.priority[0];
        for &l in &self.priority[1..] {
            if costs[l] < costs[best] {
                best = l;
            }
        }
        best
    }
}

/// `out[j] = min_i h[i] + w * (i - y_j)^2` with `y_j = j - shift`, plus argmins.
fn dt_1d(h: &[f64], w: f64, shift: f64, out: &mut [f64], arg: &mut [usize], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = h.len();
    v.clear();
    z.clear();
    for q in 0..n {
        let fq = h[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = h[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for j in 0..n {
        let y = j as f64 - shift;
        while k + 1 < v.len() && z[k + 1] < y {
            k += 1;
        }
        let i = v[k];
        let d = i as f64 - y;
        out[j] = h[i] + w * d * d;
        arg[j] = i;
    }
}

/// Message from a child with belief `h` to its parent: value and best child
/// label for every parent label.
fn message(h: &[f64], e: &EdgeModel, labels: &LabelGrid, kernel: MessageKernel) -> (Vec<f64>, Vec<u32>) {
    let n = labels.len();
    let use_dt = match kernel {
        MessageKernel::Exhaustive => false,
        MessageKernel::DistanceTransform => true,
        MessageKernel::Auto => n > 125,
    } && e.w.iter().all(|&w| w > 0.0);
    let mut val = vec![0.0; n];
    let mut arg = vec![0u32; n];
    if !use_dt {
        let coords: Vec<[usize; 3]> = (0..n).map(|l| labels.coords(l)).collect();
        for lq in 0..n {
            let mut best = labels.priority[0];
            let mut bv = h[best] + e.cost(coords[best], coords[lq]);
            for &lp in &labels.priority[1..] {
                let c = h[lp] + e.cost(coords[lp], coords[lq]);
                if c < bv {
                    bv = c;
                    best = lp;
                }
            }
            val[lq] = bv;
            arg[lq] = best as u32;
        }
        return (val, arg);
    }

    let s = labels.side;
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = vec![0.0; s];
    let mut lout = vec![0.0; s];
    let mut larg = vec![0usize; s];
    // pass x: index [qx, py, pz]
    let mut p1 = vec![0.0; n];
    let mut a1 = vec![0usize; n];
    for zz in 0..s {
        for yy in 0..s {
            let base = s * (yy + s * zz);
            dt_1d(&h[base..base + s], e.w[0], e.shift[0], &mut lout, &mut larg, &mut v, &mut z);
            p1[base..base + s].copy_from_slice(&lout);
            a1[base..base + s].copy_from_slice(&larg);
        }
    }
    // pass y: index [qx, qy, pz]
    let mut p2 = vec![0.0; n];
    let mut a2 = vec![0usize; n];
    for zz in 0..s {
        for xx in 0..s {
            for yy in 0..s {
                line[yy] = p1[xx + s * (yy + s * zz)];
            }
            dt_1d(&line, e.w[1], e.shift[1], &mut lout, &mut larg, &mut v, &mut z);
            for yy in 0..s {
                p2[xx + s * (yy + s * zz)] = lout[yy];
                a2[xx + s * (yy + s * zz)] = larg[yy];
            }
        }
    }
    // pass z: index [qx, qy, qz]
    for yy in 0..s {
        for xx in 0..s {
            for zz in 0..s {
                line[zz] = p2[xx + s * (yy + s * zz)];
            }
            dt_1d(&line, e.w[2], e.shift[2], &mut lout, &mut larg, &mut v, &mut z);
            for zz in 0..s {
                let lq = xx + s * (yy + s * zz);
                let pz = larg[zz];
                let py = a2[xx + s * (yy + s * pz)];
                let px = a1[xx + s * (py + s * pz)];
                val[lq] = lout[zz];
                arg[lq] = (px + s * (py + s * pz)) as u32;
            }
        }
    }
    (val, arg)
}

/// Exact minimizer of `sum_p unary[p][f_p] + sum_edges pair(f_child, f_parent)`
/// on a tree. `unary` is node-major with `labels.len()` entries per node.
pub fn solve_tree<F>(tree: &Tree, unary: &[f64], labels: &LabelGrid, edge: F, kernel: MessageKernel) -> Vec<usize>
where
    F: Fn(usize, usize) -> EdgeModel,
{
    let n_labels = labels.len();
    let n_nodes = tree.parent.len();
    let mut belief = unary.to_vec();
    let mut back: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
    for &p in tree.order.iter().rev() {
        if let Some(q) = tree.parent[p] {
            let h = &belief[p * n_labels..(p + 1) * n_labels];
            let (m, a) = message(h, &edge(p, q), labels, kernel);
            for (b, x) in belief[q * n_labels..(q + 1) * n_labels].iter_mut().zip(&m) {
                *b += x;
            }
            back[p] = a;
        }
    }
    let mut out = vec![0usize; n_nodes];
    let r = tree.root;
    out[r] = labels.argmin(&belief[r * n_labels..(r + 1) * n_labels]);
    for &p in &tree.order {
        if let Some(q) = tree.parent[p] {
            out[p] = back[p][out[q]] as usize;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(side: usize) -> LabelGrid {
        let c = (side / 2) as i64;
        let mut priority: Vec<usize> = (0..side * side * side).collect();
        let g = LabelGrid { side, priority: vec![] };
        priority.sort_by_key(|&l| {
            let k = g.coords(l).map(|x| x as i64 - c);
            (k.iter().map(|x| x * x).sum::<i64>(), k)
        });
        LabelGrid { side, priority }
    }

    fn tree_energy(tree: &Tree, unary: &[f64], labels: &LabelGrid, edge: &dyn Fn(usize, usize) -> EdgeModel, f: &[usize]) -> f64 {
        let n = labels.len();
        let mut e: f64 = f.iter().enumerate().map(|(p, &l)| unary[p * n + l]).sum();
        for (p, par) in tree.parent.iter().enumerate() {
            if let Some(q) = *par {
                e += edge(p, q).cost(labels.coords(f[p]), labels.coords(f[q]));
            }
        }
        e
    }

    fn brute(tree: &Tree, unary: &[f64], labels: &LabelGrid, edge: &dyn Fn(usize, usize) -> EdgeModel) -> (f64, Vec<usize>) {
        let n_nodes = tree.parent.len();
        let l = labels.len();
        let mut f = vec![0usize; n_nodes];
        let mut best = (f64::INFINITY, f.clone());
        loop {
            let e = tree_energy(tree, unary, labels, edge, &f);
            if e < best.0 {
                best = (e, f.clone());
            }
            let mut p = 0;
            loop {
                if p == n_nodes {
                    return best;
                }
                f[p] += 1;
                if f[p] < l {
                    break;
                }
                f[p] = 0;
                p += 1;
            }
        }
    }

    #[test]
    fn mst_picks_light_edges() {
        let edges = [(0, 1), (1, 2), (0, 2), (2, 3)];
        let t = minimum_spanning_tree(4, &edges, &[1.0, 1.0, 0.5, 3.0]).unwrap();
        let mut e = t.edges.clone();
        e.sort();
        assert_eq!(e, vec![(0, 1), (0, 2), (2, 3)]);
        assert!(Tree::from_edges(3, &[(0, 1)]).is_err());
    }

    #[test]
    fn dt_matches_direct_minimum() {
        let h = [3.0, 0.5, 2.0, 7.0, 0.0];
        for shift in [-1.3, 0.0, 0.4, 2.0] {
            let mut out = [0.0; 5];
            let mut arg = [0; 5];
            dt_1d(&h, 0.7, shift, &mut out, &mut arg, &mut Vec::new(), &mut Vec::new());
            for j in 0..5 {
                let y = j as f64 - shift;
                let direct = (0..5).map(|i| h[i] + 0.7 * (i as f64 - y).powi(2)).fold(f64::INFINITY, f64::min);
                assert!((out[j] - direct).abs() < 1e-12);
                assert!((h[arg[j]] + 0.7 * (arg[j] as f64 - y).powi(2) - direct).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn dp_equals_brute_force(
            unary in proptest::collection::vec(0.0f64..4.0, 4 * 8),
            w in proptest::array::uniform3(0.05f64..2.0),
            shift in proptest::array::uniform3(-1.0f64..1.0),
            shape in 0usize..3,
        ) {
            // side 2 keeps 8^4 brute force cheap; shapes: chain, star, fork
            let edges = [[(0, 1), (1, 2), (2, 3)], [(0, 1), (0, 2), (0, 3)], [(0, 1), (1, 2), (1, 3)]][shape];
            let tree = Tree::from_edges(4, &edges).unwrap();
            let labels = grid(2);
            let edge = |p: usize, q: usize| EdgeModel { w, shift: shift.map(|s| s * (1.0 + (p + q) as f64 * 0.1)) };
            let (be, bf) = brute(&tree, &unary, &labels, &edge);
            for kernel in [MessageKernel::Exhaustive, MessageKernel::DistanceTransform] {
                let f = solve_tree(&tree, &unary, &labels, edge, kernel);
                let e = tree_energy(&tree, &unary, &labels, &edge, &f);
                prop_assert!((e - be).abs() < 1e-9, "{:?}: {} vs {}", kernel, e, be);
                prop_assert_eq!(&f, &bf);
            }
        }
    }

    #[test]
    fn dp_exact_with_27_labels_integer_costs() {
        let tree = Tree::from_edges(4, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        let labels = grid(3);
        let mut s = 12345u64;
        let unary: Vec<f64> = (0..4 * 27)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((s >> 40) % 9) as f64
            })
            .collect();
        let edge = |_: usize, _: usize| EdgeModel { w: [1.0, 2.0, 1.0], shift: [0.0, 1.0, 0.0] };
        let (be, _) = brute(&tree, &unary, &labels, &edge);
        for kernel in [MessageKernel::Exhaustive, MessageKernel::DistanceTransform] {
            let f = solve_tree(&tree, &unary, &labels, edge, kernel);
            assert_eq!(tree_energy(&tree, &unary, &labels, &edge, &f), be);
        }
    }
}
