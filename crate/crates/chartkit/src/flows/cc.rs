//! Control-metric estimators: an ε-net graph for distance upper bounds and a
//! Monte Carlo sampler for reachable-set volume.
//!
//! Distance semantics: an edge between nearby nodes carries the minimal
//! constant-control norm that flows one node exactly onto the other in unit
//! time. A path of edges with efforts w_1..w_k can be reparameterized so each
//! leg runs in time w_i / sum(w), making the concatenated control's sup-norm
//! equal sum(w). The Dijkstra sum is therefore a genuine upper bound on the
//! control distance, and edge weights are additive.

use std::collections::{BinaryHeap, HashMap};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fieldspec::{Ball, FieldSet};
use crate::flows::{flow_controls_with, FlowError};

/// Control pieces per Monte Carlo sample.
pub const DEFAULT_CONTROL_PIECES: usize = 8;

/// Relative width at which dyadic bisection of the reported bound stops.
pub const DYADIC_REL_GAP: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct CcNetCfg {
    /// Net spacing.
    pub cell: f64,
    /// Neighbor radius in cells.
    pub shell: usize,
    /// Integrator tolerance for edge flows.
    pub flow_tol: f64,
    /// Absolute endpoint miss accepted by the shooting solver.
    pub shoot_tol: f64,
    pub max_shoot_iters: usize,
}

impl Default for CcNetCfg {
    fn default() -> Self {
        CcNetCfg {
            cell: 0.05,
            shell: 4,
            flow_tol: 1e-10,
            shoot_tol: 1e-9,
            max_shoot_iters: 30,
        }
    }
}

/// Precomputed node/edge graph over the field domain, reusable across
/// distance queries.
pub struct CcNet<'a> {
    fields: &'a FieldSet,
    pub cfg: CcNetCfg,
    nodes: Vec<Vec<f64>>,
    adj: Vec<Vec<(usize, f64)>>,
    /// Ball the edge flows are allowed to roam in; slightly larger than the
    /// domain so boundary hops do not exit spuriously.
    slack: Ball,
    pub edge_count: usize,
    pub failed_edges: usize,
}

#[derive(Debug, Clone)]
pub struct DistanceReport {
    /// Dyadic-rational upper bound (the returned distance).
    pub value: f64,
    /// Graph-optimal bound the dyadic value brackets.
    pub graph_bound: f64,
    pub dyadic_gap: f64,
    pub connected: bool,
    pub nodes: usize,
    pub edges: usize,
    pub failed_edges: usize,
}

/// Minimal-norm constant control flowing `from` onto `to` in unit time.
/// Quasi-Newton with a frozen midpoint preconditioner; `None` when the
/// iteration does not converge.
fn shoot(fields: &FieldSet, from: &[f64], to: &[f64], slack: &Ball, cfg: &CcNetCfg) -> Option<f64> {
    let n = fields.n();
    let mid: Vec<f64> = from.iter().zip(to).map(|(a, b)| 0.5 * (a + b)).collect();
    let m_mid = fields.field_matrix(&mid);
    let svd = m_mid.svd(true, true);
    let sv_max = svd.singular_values.max();
    if sv_max == 0.0 {
        return None;
    }
    let eps = sv_max * 1e-12;
    let rhs = DVector::from_fn(n, |i, _| to[i] - from[i]);
    let mut a = svd.solve(&rhs, eps).ok()?;

    let mut initial_miss = f64::INFINITY;
    for _ in 0..cfg.max_shoot_iters {
        let tr = flow_controls_with(fields, a.as_slice(), from, 1.0, slack, cfg.flow_tol, 1).ok()?;
        let end = tr.end();
        let miss = DVector::from_fn(n, |i, _| to[i] - end[i]);
        let miss_norm = miss.norm();
        if miss_norm <= cfg.shoot_tol {
            return Some(a.norm());
        }
        if tr.exited {
            return None;
        }
        if initial_miss.is_infinite() {
            initial_miss = miss_norm;
        } else if miss_norm > 10.0 * initial_miss {
            return None;
        }
        a += svd.solve(&miss, eps).ok()?;
    }
    None
}

/// Lattice offsets o with 0 < |o| <= shell, one per unordered direction
/// (first nonzero component positive).
fn half_shell_offsets(n: usize, shell: usize) -> Vec<Vec<i64>> {
    let s = shell as i64;
    let mut out = Vec::new();
    let mut o = vec![-s; n];
    loop {
        let norm2: i64 = o.iter().map(|v| v * v).sum();
        if norm2 > 0 && norm2 <= s * s {
            if o.iter().find(|&&v| v != 0).copied().unwrap_or(0) > 0 {
                out.push(o.clone());
            }
        }
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == n {
                return out;
            }
            o[k] += 1;
            if o[k] <= s {
                break;
            }
            o[k] = -s;
            k += 1;
        }
    }
}

impl<'a> CcNet<'a> {
    pub fn build(fields: &'a FieldSet, cfg: CcNetCfg) -> Self {
        let n = fields.n();
        let domain = &fields.domain;
        let r_cells = (domain.radius / cfg.cell).floor() as i64;

        // Nodes on the lattice center + cell*g, kept when inside the domain.
        let mut nodes = Vec::new();
        let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut g = vec![-r_cells; n];
        'outer: loop {
            let p: Vec<f64> = g
                .iter()
                .zip(&domain.center)
                .map(|(gi, c)| c + *gi as f64 * cfg.cell)
                .collect();
            if domain.contains(&p) {
                index.insert(g.clone(), nodes.len());
                nodes.push(p);
            }
            let mut k = 0;
            loop {
                if k == n {
                    break 'outer;
                }
                g[k] += 1;
                if g[k] <= r_cells {
                    break;
                }
                g[k] = -r_cells;
                k += 1;
            }
        }

        let slack = Ball::new(
            domain.center.clone(),
            domain.radius + cfg.shell as f64 * cfg.cell + cfg.cell,
        );

        // Unordered node pairs within the shell, in deterministic order.
        let offsets = half_shell_offsets(n, cfg.shell);
        let mut pairs = Vec::new();
        for (g, &u) in index.iter() {
            for o in &offsets {
                let h: Vec<i64> = g.iter().zip(o).map(|(a, b)| a + b).collect();
                if let Some(&v) = index.get(&h) {
                    pairs.push((u.min(v), u.max(v)));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let shots: Vec<Option<f64>> = pairs
            .par_iter()
            .map(|&(u, v)| shoot(fields, &nodes[u], &nodes[v], &slack, &cfg))
            .collect();

        let mut adj = vec![Vec::new(); nodes.len()];
        let mut edge_count = 0;
        let mut failed_edges = 0;
        for (&(u, v), w) in pairs.iter().zip(&shots) {
            match w {
                Some(w) => {
                    adj[u].push((v, *w));
                    adj[v].push((u, *w));
                    edge_count += 1;
                }
                None => failed_edges += 1,
            }
        }

        CcNet {
            fields,
            cfg,
            nodes,
            adj,
            slack,
            edge_count,
            failed_edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn endpoint_edges(&self, p: &[f64]) -> Vec<(usize, f64)> {
        let reach = self.cfg.cell * (self.cfg.shell as f64 + 0.5);
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let d2: f64 = p.iter().zip(node).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= reach * reach {
                if let Some(w) = shoot(self.fields, p, node, &self.slack, &self.cfg) {
                    out.push((i, w));
                }
            }
        }
        out
    }

    /// Graph distances from a free point to every node (not only net nodes).
    fn dijkstra(&self, start_edges: &[(usize, f64)]) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        for &(v, w) in start_edges {
            if w < dist[v] {
                dist[v] = w;
                heap.push(HeapEntry { d: w, node: v });
            }
        }
        while let Some(HeapEntry { d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(next, w) in &self.adj[node] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(HeapEntry { d: nd, node: next });
                }
            }
        }
        dist
    }

    /// Upper bound on the control distance between two points of the domain.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> DistanceReport {
        // Direct hop, attempted from the lexicographically smaller endpoint
        // so the report is exactly symmetric in (x, y).
        let (a, b) = if x.iter().lt(y.iter()) { (x, y) } else { (y, x) };
        let direct = shoot(self.fields, a, b, &self.slack, &self.cfg);

        let from_x = self.endpoint_edges(x);
        let to_y: HashMap<usize, f64> = self.endpoint_edges(y).into_iter().collect();
        let dist = self.dijkstra(&from_x);
        let mut best = direct.unwrap_or(f64::INFINITY);
        for (node, wy) in &to_y {
            let total = dist[*node] + wy;
            if total < best {
                best = total;
            }
        }

        let connected = best.is_finite();
        let value = if connected {
            dyadic_upper(best, DYADIC_REL_GAP)
        } else {
            f64::INFINITY
        };
        DistanceReport {
            value,
            graph_bound: best,
            dyadic_gap: if connected { value - best } else { f64::INFINITY },
            connected,
            nodes: self.nodes.len(),
            edges: self.edge_count,
            failed_edges: self.failed_edges,
        }
    }

    /// Ball volume by counting net cells whose node lies within graph
    /// distance `delta` of `x0`.
    pub fn ball_volume(&self, x0: &[f64], delta: f64) -> BallEstimate {
        let dist = self.dijkstra(&self.endpoint_edges(x0));
        let hit: Vec<usize> = dist
            .iter()
            .enumerate()
            .filter(|(_, d)| **d <= delta)
            .map(|(i, _)| i)
            .collect();
        let n = self.fields.n();
        let cellvol = self.cfg.cell.powi(n as i32);
        BallEstimate {
            center: x0.to_vec(),
            delta,
            grid_res: 0,
            box_half: self.fields.domain.radius,
            hit_cells: hit.clone(),
            volume: hit.len() as f64 * cellvol,
            samples: 0,
            pieces: 0,
            seed: 0,
            completed: hit.len(),
            wilson_low: 1.0,
            wilson_high: 1.0,
            degenerate: hit.is_empty(),
            method: BallMethod::DijkstraNet,
        }
    }

    /// Weighted variant of [`CcNet::ball_volume`]: each hit cell
    /// contributes the weight at its node times the cell volume.
    pub fn ball_mass(
        &self,
        x0: &[f64],
        delta: f64,
        weight: &dyn Fn(&[f64]) -> f64,
    ) -> (BallEstimate, f64) {
        let est = self.ball_volume(x0, delta);
        let cellvol = self.cfg.cell.powi(self.fields.n() as i32);
        let mass = est
            .hit_cells
            .iter()
            .map(|&i| weight(&self.nodes[i]))
            .sum::<f64>()
            * cellvol;
        (est, mass)
    }
}

#[derive(Debug, PartialEq)]
struct HeapEntry {
    d: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed comparisons make the std max-heap behave as a min-heap,
        // with node index as a deterministic tiebreak.
        other
            .d
            .total_cmp(&self.d)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Smallest end of a dyadic bisection bracket that still bounds `d` from
/// above, narrowed to relative width `rel`.
fn dyadic_upper(d: f64, rel: f64) -> f64 {
    if d <= 0.0 || !d.is_finite() {
        return d.max(0.0);
    }
    let mut hi = 2f64.powi(d.log2().ceil() as i32);
    if hi < d {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    if d <= lo {
        // d was itself a power of two.
        lo = d / 2.0;
        hi = d;
    }
    while (hi - lo) / hi > rel {
        let mid = 0.5 * (lo + hi);
        if d <= mid {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// One-shot convenience wrapper over [`CcNet`].
pub fn cc_distance(fields: &FieldSet, x: &[f64], y: &[f64], cfg: CcNetCfg) -> DistanceReport {
    CcNet::build(fields, cfg).distance(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallMethod {
    ControlMc,
    DijkstraNet,
}

/// Reachable-volume estimate; every counted cell contains a constructively
/// reached point, so `volume` under-approximates up to cell quantization.
#[derive(Debug, Clone)]
pub struct BallEstimate {
    pub center: Vec<f64>,
    pub delta: f64,
    pub grid_res: usize,
    pub box_half: f64,
    /// Sorted linear indices of hit cells; decode with [`BallEstimate::cell_coords`].
    pub hit_cells: Vec<usize>,
    pub volume: f64,
    pub samples: usize,
    pub pieces: usize,
    pub seed: u64,
    /// Samples whose full trajectory stayed inside the domain.
    pub completed: usize,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub degenerate: bool,
    pub method: BallMethod,
}

impl BallEstimate {
    pub fn cell_coords(&self, linear: usize) -> Vec<usize> {
        let mut rest = linear;
        let mut out = Vec::with_capacity(self.center.len());
        for _ in 0..self.center.len() {
            out.push(rest % self.grid_res);
            rest /= self.grid_res;
        }
        out
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = (1.0 - rng.random::<f64>()).max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw from the open unit ball of R^q.
fn ball_point(rng: &mut ChaCha8Rng, q: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..q).map(|_| gauss(rng)).collect();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let r = rng.random::<f64>().powf(1.0 / q as f64) * 0.999_999;
            return g.iter().map(|v| v / norm * r).collect();
        }
    }
}

/// Largest field-matrix singular value over a coarse sample of the domain;
/// bounds the speed of any admissible unit-control curve.
fn sup_field_norm(fields: &FieldSet) -> f64 {
    let n = fields.n();
    let dom = &fields.domain;
    let fractions = [-0.9, -0.45, 0.0, 0.45, 0.9];
    let mut sup: f64 = 0.0;
    let mut idx = vec![0usize; n];
    loop {
        let p: Vec<f64> = (0..n)
            .map(|k| dom.center[k] + fractions[idx[k]] * dom.radius / (n as f64).sqrt())
            .collect();
        let sv = fields.field_matrix(&p).svd(false, false).singular_values.max();
        sup = sup.max(sv);
        let mut k = 0;
        loop {
            if k == n {
                return sup;
            }
            idx[k] += 1;
            if idx[k] < fractions.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn wilson_interval(successes: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 0.0);
    }
    let z = 1.959_963_984_540_054; // 95% two-sided normal quantile
    let nf = total as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Monte Carlo reachable-volume estimate for the ball of radius `delta`
/// around `x0` (curves x' = sum_j a_j(t) delta X_j with piecewise-constant
/// a, sup-in-time Euclidean norm < 1).
///
/// Every checkpoint of every trajectory piece is binned, not only endpoints:
/// a curve truncated at time t and rescaled to unit time keeps its control
/// norm below 1, so interior points belong to the ball too. Samples
/// alternate between a straight profile (one direction, shared by all
/// pieces) for radial coverage and fully independent pieces for wiggly
/// reachability. Identical seed, grid, and box give bitwise-identical
/// estimates regardless of thread count.
pub fn cc_ball_volume(
    fields: &FieldSet,
    x0: &[f64],
    delta: f64,
    grid_res: usize,
    samples: usize,
    seed: u64,
    box_half: Option<f64>,
) -> Result<BallEstimate, FlowError> {
    assert!(delta > 0.0, "ball radius must be positive");
    let n = fields.n();
    let q = fields.q();
    let m = DEFAULT_CONTROL_PIECES;
    let half = box_half.unwrap_or_else(|| delta * 1.05 * sup_field_norm(fields) + 1e-12);
    let size = grid_res.pow(n as u32);
    assert!(size <= 1 << 26, "cell grid too large");
    let cell = 2.0 * half / grid_res as f64;

    let bin = |p: &[f64], cells: &mut [bool]| {
        let mut linear = 0usize;
        let mut stride = 1usize;
        for k in 0..n {
            let rel = p[k] - (x0[k] - half);
            if rel < 0.0 {
                return;
            }
            let idx = (rel / cell) as usize;
            if idx >= grid_res {
                return;
            }
            linear += idx * stride;
            stride *= grid_res;
        }
        cells[linear] = true;
    };

    let run_sample = |idx: usize, cells: &mut [bool], completed: &mut usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64 + 1);
        let pieces: Vec<Vec<f64>> = if idx % 2 == 0 {
            let dir = ball_point(&mut rng, q);
            vec![dir; m]
        } else {
            (0..m).map(|_| ball_point(&mut rng, q)).collect()
        };
        let mut y = x0.to_vec();
        let mut ok = true;
        for a in &pieces {
            // Piece of duration 1/m under controls delta*a, folded into a
            // unit-time flow of controls delta*a/m.
            let scaled: Vec<f64> = a.iter().map(|v| v * delta / m as f64).collect();
            match flow_controls_with(fields, &scaled, &y, 1.0, &fields.domain, 1e-9, 8) {
                Ok(tr) => {
                    let keep = if tr.exited {
                        tr.points.len().saturating_sub(1)
                    } else {
                        tr.points.len()
                    };
                    for p in &tr.points[..keep] {
                        bin(p, cells);
                    }
                    if tr.exited {
                        ok = false;
                        break;
                    }
                    y = tr.end().to_vec();
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            *completed += 1;
        }
    };

    let (cells, completed) = (0..samples)
        .into_par_iter()
        .fold(
            || (vec![false; size], 0usize),
            |mut acc, idx| {
                run_sample(idx, &mut acc.0, &mut acc.1);
                acc
            },
        )
        .reduce(
            || (vec![false; size], 0usize),
            |mut a, b| {
                for (c, v) in a.0.iter_mut().zip(b.0) {
                    *c |= v;
                }
                (a.0, a.1 + b.1)
            },
        );

    let hit_cells: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, h)| **h)
        .map(|(i, _)| i)
        .collect();
    let (wilson_low, wilson_high) = wilson_interval(completed, samples);
    Ok(BallEstimate {
        center: x0.to_vec(),
        delta,
        grid_res,
        box_half: half,
        volume: hit_cells.len() as f64 * cell.powi(n as i32),
        hit_cells,
        samples,
        pieces: m,
        seed,
        completed,
        wilson_low,
        wilson_high,
        degenerate: completed == 0,
        method: BallMethod::ControlMc,
    })
}
