#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use floodhmt::infer::{max_sum, sum_product, Evidence};
use floodhmt::model::ModelParams;
use floodhmt::raster::{Grid, DEFAULT_NODATA};
use floodhmt::synth::SceneRng;
use floodhmt::tree::{build_flow_tree, validate_partial_order, Connectivity, FlowTree};

pub fn rng(seed: u64) -> SceneRng {
    SceneRng::new(seed, 99)
}

/// Integer-valued DEM (so ties are common) with occasional nodata holes.
pub fn random_dem(
    r: &mut SceneRng,
    nrows: usize,
    ncols: usize,
    levels: usize,
    hole_prob: f64,
) -> Grid {
    let values = (0..nrows * ncols)
        .map(|_| {
            if r.uniform() < hole_prob {
                DEFAULT_NODATA
            } else {
                r.below(levels) as f64
            }
        })
        .collect();
    Grid::from_values(nrows, ncols, values).unwrap()
}

/// Random forest in which every node has at most one child: nodes are added
/// one at a time, each adopting up to three of the current childless nodes.
pub fn random_polytree(r: &mut SceneRng, n: usize) -> FlowTree {
    let mut parents = vec![Vec::new(); n];
    let mut open: Vec<usize> = Vec::new();
    for (node, ps) in parents.iter_mut().enumerate() {
        let k = r.below(4).min(open.len());
        for _ in 0..k {
            let j = r.below(open.len());
            ps.push(open.swap_remove(j));
        }
        ps.sort_unstable();
        open.push(node);
    }
    FlowTree::from_parents(&parents).unwrap()
}

pub fn random_params(r: &mut SceneRng) -> ModelParams {
    let pi = 0.02 + 0.96 * r.uniform();
    let rho = 0.5 + 0.4999 * r.uniform();
    ModelParams::isotropic(pi, rho, [vec![0.0], vec![1.0]], [1.0, 1.0])
}

pub fn random_evidence(r: &mut SceneRng, n: usize, scale: f64) -> Evidence {
    Evidence {
        log_lik: (0..n)
            .map(|_| [scale * r.normal(), scale * r.normal()])
            .collect(),
    }
}

/// Exhaustive summary computed in linear probability space directly from the
/// factor tables.
pub struct Enumerated {
    pub gamma: Vec<f64>,
    pub stats: Vec<[[f64; 2]; 2]>,
    pub loglik: f64,
    pub max_log_joint: f64,
}

/// Joint probability of one labeling relative to `exp(shift)` per node.
fn joint(tree: &FlowTree, ev: &Evidence, p: &ModelParams, y: &[u8], shift: &[f64]) -> f64 {
    let mut prob = 1.0;
    for n in 0..tree.node_count() {
        let label = y[n] as usize;
        prob *= (ev.log_lik[n][label] - shift[n]).exp();
        let parents = tree.parents(n);
        let p1 = if parents.is_empty() {
            p.pi
        } else if parents.iter().all(|&k| y[k] == 1) {
            p.rho
        } else {
            0.0
        };
        prob *= if label == 1 { p1 } else { 1.0 - p1 };
    }
    prob
}

pub fn enumerate(tree: &FlowTree, ev: &Evidence, p: &ModelParams) -> Enumerated {
    let n = tree.node_count();
    assert!(n <= 20);
    let shift: Vec<f64> = ev.log_lik.iter().map(|e| e[0].max(e[1])).collect();
    let offset: f64 = shift.iter().sum();
    let mut total = 0.0;
    let mut gamma = vec![0.0; n];
    let mut stats = vec![[[0.0; 2]; 2]; n];
    let mut best = 0.0f64;
    let mut y = vec![0u8; n];
    for mask in 0u32..1 << n {
        for (i, v) in y.iter_mut().enumerate() {
            *v = ((mask >> i) & 1) as u8;
        }
        let w = joint(tree, ev, p, &y, &shift);
        if w == 0.0 {
            continue;
        }
        total += w;
        best = best.max(w);
        for node in 0..n {
            gamma[node] += w * f64::from(y[node]);
            let ps = tree.parents(node);
            if !ps.is_empty() {
                let a = usize::from(ps.iter().all(|&k| y[k] == 1));
                stats[node][y[node] as usize][a] += w;
            }
        }
    }
    for g in &mut gamma {
        *g /= total;
    }
    for s in &mut stats {
        for row in s.iter_mut() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    Enumerated {
        gamma,
        stats,
        loglik: offset + total.ln(),
        max_log_joint: offset + best.ln(),
    }
}

/// Log joint of a labeling computed from the factor tables.
pub fn log_joint(tree: &FlowTree, ev: &Evidence, p: &ModelParams, y: &[u8]) -> f64 {
    let mut total = 0.0;
    for n in 0..tree.node_count() {
        let label = y[n] as usize;
        total += ev.log_lik[n][label];
        let parents = tree.parents(n);
        let p1 = if parents.is_empty() {
            p.pi
        } else if parents.iter().all(|&k| y[k] == 1) {
            p.rho
        } else {
            0.0
        };
        total += if label == 1 { p1.ln() } else { (1.0 - p1).ln() };
    }
    total
}

/// Worst absolute deviation of the inference engine from enumeration on one
/// instance, plus the partial-order violations of its MAP labeling.
pub struct OracleCheck {
    pub max_error: f64,
    pub violations: usize,
}

pub fn check_instance(tree: &FlowTree, ev: &Evidence, p: &ModelParams) -> OracleCheck {
    let truth = enumerate(tree, ev, p);
    let post = sum_product(tree, ev, p).unwrap();
    let mut err = (post.loglik - truth.loglik).abs();
    for n in 0..tree.node_count() {
        err = err.max((post.gamma[n] - truth.gamma[n]).abs());
        for a in 0..2 {
            for b in 0..2 {
                err = err.max((post.factor_stats[n][a][b] - truth.stats[n][a][b]).abs());
            }
        }
    }
    let map = max_sum(tree, ev, p).unwrap();
    err = err.max((log_joint(tree, ev, p, &map) - truth.max_log_joint).abs());
    OracleCheck {
        max_error: err,
        violations: validate_partial_order(tree, &map),
    }
}

/// The instance family used by the oracle suite: half flow trees of random
/// DEMs (ties, holes, both connectivities), half random polytrees.
pub fn oracle_instance(seed: u64) -> (FlowTree, Evidence, ModelParams) {
    let mut r = rng(seed);
    let tree = if seed.is_multiple_of(2) {
        loop {
            let nrows = 1 + r.below(4);
            let ncols = 1 + r.below(5);
            let dem = random_dem(&mut r, nrows, ncols, 4, 0.15);
            let conn = if r.below(2) == 0 {
                Connectivity::Four
            } else {
                Connectivity::Eight
            };
            if let Ok(t) = build_flow_tree(&dem, conn) {
                if t.node_count() <= 15 {
                    break t;
                }
            }
        }
    } else {
        let n = 1 + r.below(15);
        random_polytree(&mut r, n)
    };
    let n = tree.node_count();
    let scale = [0.5, 2.0, 8.0][r.below(3)];
    let ev = random_evidence(&mut r, n, scale);
    let p = random_params(&mut r);
    (tree, ev, p)
}

/// Pixels reachable from `start` through valid pixels not above it in the
/// (elevation, index) order.
pub fn lower_set(dem: &Grid, start: usize, conn: Connectivity) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        for q in conn.neighbors(dem.nrows, dem.ncols, p / dem.ncols, p % dem.ncols) {
            if dem.is_valid_at(q) && !seen.contains(&q) && !above(dem, start, q) {
                seen.insert(q);
                queue.push_back(q);
            }
        }
    }
    seen
}

/// Whether pixel `q` comes after pixel `p` in the (elevation, index) order.
pub fn above(dem: &Grid, p: usize, q: usize) -> bool {
    (dem.values[q], q) > (dem.values[p], p)
}
