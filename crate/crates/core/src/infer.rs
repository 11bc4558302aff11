//! Exact inference on the hidden Markov tree.
//!
//! The model factorizes as
//!
//! ```text
//! P(X, Y) = prod_n P(x_n | y_n) * prod_n P(y_n | A_n),   A_n = prod_{k in parents(n)} y_k
//! ```
//!
//! with `P(y_n = 1) = pi` at sources and, elsewhere, `P(1 | A=1) = rho`,
//! `P(1 | A=0) = 0`. Because every node has at most one child, the factor
//! graph is a forest and two sweeps over the topological order give exact
//! marginals.
//!
//! Messages are kept as log-probability pairs normalized to log-sum-exp zero
//! with a separate accumulated log scale. The noisy-AND factor only depends
//! on its parents through `T = prod_k P(y_k = 1)`, so each factor is handled
//! in time linear in its number of parents; `1 - T` is evaluated with
//! `expm1` so no precision is lost when every parent is almost surely
//! flooded, and leave-one-out products use prefix and suffix sums.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Emission, ModelError, ModelParams};
use crate::raster::SceneBundle;
use crate::tree::FlowTree;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("brute-force enumeration supports at most {max} nodes, got {got}")]
    TooManyNodes { got: usize, max: usize },
    #[error("evidence covers {got} nodes, tree has {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

/// Feature vectors of the tree's nodes, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    dims: usize,
    data: Vec<f64>,
}

impl NodeFeatures {
    pub fn from_scene(scene: &SceneBundle, tree: &FlowTree) -> Self {
        let dims = scene.band_count();
        let mut data = Vec::with_capacity(tree.node_count() * dims);
        for node in 0..tree.node_count() {
            let p = tree.pixel_index(node);
            data.extend(scene.bands.iter().map(|b| b.values[p]));
        }
        Self { dims, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dims = rows.first().map_or(0, Vec::len);
        Self {
            dims,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dims).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows reordered so that row `i` is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.dims);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dims: self.dims,
            data,
        }
    }

    #[inline]
    pub fn row(&self, node: usize) -> &[f64] {
        &self.data[node * self.dims..(node + 1) * self.dims]
    }
}

/// Per-node class log-likelihoods `(log p(x|dry), log p(x|flood))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub log_lik: Vec<[f64; 2]>,
}

impl Evidence {
    pub fn len(&self) -> usize {
        self.log_lik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_lik.is_empty()
    }

    /// Evaluate the Gaussian emissions at every node. Work is split over
    /// `workers` threads; the result does not depend on the split.
    pub fn from_features(
        features: &NodeFeatures,
        params: &ModelParams,
        workers: usize,
    ) -> Result<Self, ModelError> {
        if features.dims() != params.dims() {
            return Err(ModelError::Invalid(format!(
                "features have {} bands, model has {}",
                features.dims(),
                params.dims()
            )));
        }
        let emission = Emission::new(params)?;
        let n = features.len();
        let mut log_lik = vec![[0.0; 2]; n];
        if workers <= 1 {
            for (node, out) in log_lik.iter_mut().enumerate() {
                *out = emission.log_pair(features.row(node));
            }
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| ModelError::Invalid(format!("thread pool: {e}")))?;
            const CHUNK: usize = 4096;
            pool.install(|| {
                log_lik
                    .par_chunks_mut(CHUNK)
                    .enumerate()
                    .for_each(|(chunk, out)| {
                        for (i, slot) in out.iter_mut().enumerate() {
                            *slot = emission.log_pair(features.row(chunk * CHUNK + i));
                        }
                    });
            });
        }
        Ok(Self { log_lik })
    }
}

pub fn compute_evidence(
    scene: &SceneBundle,
    tree: &FlowTree,
    params: &ModelParams,
) -> Result<Evidence, ModelError> {
    Evidence::from_features(&NodeFeatures::from_scene(scene, tree), params, 1)
}

/// Posterior quantities from one sum-product pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `P(y_n = 1 | X)`.
    pub gamma: Vec<f64>,
    /// `P(y_n = a, A_n = b | X)` indexed `[a][b]`; all zero at sources.
    pub factor_stats: Vec<[[f64; 2]; 2]>,
    /// `log P(X)`.
    pub loglik: f64,
}

// ---------------------------------------------------------------------------
// Log-space helpers
// ---------------------------------------------------------------------------

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

/// `ln(1 - e^x)` for `x <= 0`.
#[inline]
fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Normalize a log pair to log-sum-exp zero, returning the removed scale.
#[inline]
fn normalize(pair: [f64; 2]) -> ([f64; 2], f64) {
    let m = pair[0].max(pair[1]);
    let l = (-(pair[0] - pair[1]).abs()).exp().ln_1p();
    ([pair[0] - m - l, pair[1] - m - l], m + l)
}

struct LogParams {
    prior: [f64; 2],
    rho: f64,
    not_rho: f64,
}

impl LogParams {
    fn new(params: &ModelParams) -> Self {
        Self {
            prior: [(-params.pi).ln_1p(), params.pi.ln()],
            rho: params.rho.ln(),
            not_rho: (-params.rho).ln_1p(),
        }
    }
}

fn check_sizes(tree: &FlowTree, evidence: &Evidence) -> Result<(), InferError> {
    if evidence.len() != tree.node_count() {
        return Err(InferError::SizeMismatch {
            got: evidence.len(),
            expected: tree.node_count(),
        });
    }
    Ok(())
}

/// Exact marginals, factor statistics and log-likelihood.
pub fn sum_product(
    tree: &FlowTree,
    evidence: &Evidence,
    params: &ModelParams,
) -> Result<Posteriors, InferError> {
    check_sizes(tree, evidence)?;
    let n = tree.node_count();
    let lp = LogParams::new(params);
    let order = tree.topo_order();
    let ev = |pos: usize| evidence.log_lik[order[pos]];

    // Indexed by topological position. up[n](y) ∝ P(x over n and its
    // ancestors, y_n = y). Each node's normalizer enters the root of its
    // component exactly once, so their sum is the log-likelihood.
    let mut up = vec![[0.0f64; 2]; n];
    let mut loglik = 0.0;
    // log P(A_n = 1) and log P(A_n = 0) under the incoming messages.
    let mut log_all = vec![0.0f64; n];
    let mut log_some_dry = vec![f64::NEG_INFINITY; n];

    for pos in 0..n {
        let parents = tree.parent_positions(pos);
        let e = ev(pos);
        let raw = if parents.is_empty() {
            [e[0] + lp.prior[0], e[1] + lp.prior[1]]
        } else {
            let log_t: f64 = parents.iter().map(|&k| up[k as usize][1]).sum();
            let log_q = log1m_exp(log_t);
            log_all[pos] = log_t;
            log_some_dry[pos] = log_q;
            [
                e[0] + log_add(log_q, log_t + lp.not_rho),
                e[1] + log_t + lp.rho,
            ]
        };
        let (normed, l) = normalize(raw);
        up[pos] = normed;
        loglik += l;
    }

    // Root-ward to source-ward: down[n](y) ∝ P(x outside n's ancestor set | y_n = y).
    let mut down = vec![[0.0f64; 2]; n];
    let mut gamma = vec![0.0f64; n];
    let mut factor_stats = vec![[[0.0f64; 2]; 2]; n];
    let mut prefix: Vec<f64> = Vec::new();

    for pos in (0..n).rev() {
        let node = order[pos];
        let (belief, _) = normalize([up[pos][0] + down[pos][0], up[pos][1] + down[pos][1]]);
        gamma[node] = belief[1].exp();

        let parents = tree.parent_positions(pos);
        if parents.is_empty() {
            continue;
        }
        let e = ev(pos);
        let w = [down[pos][0] + e[0], down[pos][1] + e[1]];

        let log_t = log_all[pos];
        let e00 = w[0] + log_some_dry[pos];
        let e01 = w[0] + lp.not_rho + log_t;
        let e11 = w[1] + lp.rho + log_t;
        let z = log_add(log_add(e00, e01), e11);
        factor_stats[node] = [[(e00 - z).exp(), (e01 - z).exp()], [0.0, (e11 - z).exp()]];

        // Messages to each parent with that parent excluded from T.
        let m = parents.len();
        prefix.clear();
        prefix.push(0.0);
        for &k in parents {
            let last = *prefix.last().unwrap();
            prefix.push(last + up[k as usize][1]);
        }
        let child_if_all = log_add(w[0] + lp.not_rho, w[1] + lp.rho);
        let mut suffix = 0.0;
        for i in (0..m).rev() {
            let k = parents[i] as usize;
            let log_t_others = prefix[i] + suffix;
            let log_q_others = log1m_exp(log_t_others);
            let msg = [
                w[0],
                log_add(log_t_others + child_if_all, log_q_others + w[0]),
            ];
            down[k] = normalize(msg).0;
            suffix += up[k][1];
        }
    }

    Ok(Posteriors {
        gamma,
        factor_stats,
        loglik,
    })
}

const FREE: u32 = u32::MAX;
const ALL_FLOOD: u32 = u32::MAX - 1;

/// Most probable joint labeling. Ties are resolved toward dry.
pub fn max_sum(
    tree: &FlowTree,
    evidence: &Evidence,
    params: &ModelParams,
) -> Result<Vec<u8>, InferError> {
    check_sizes(tree, evidence)?;
    let n = tree.node_count();
    let lp = LogParams::new(params);

    let order = tree.topo_order();
    let ev: Vec<[f64; 2]> = order.iter().map(|&v| evidence.log_lik[v]).collect();

    // By topological position. best[n](y): max log joint over n's ancestor
    // set with y_n = y.
    let mut best = vec![[0.0f64; 2]; n];
    // How the parents are set when y_n = 0: FREE (each at its own argmax),
    // ALL_FLOOD, or the position of the one parent forced dry.
    let mut choice = vec![FREE; n];

    for pos in 0..n {
        let parents = tree.parent_positions(pos);
        if parents.is_empty() {
            best[pos] = [ev[pos][0] + lp.prior[0], ev[pos][1] + lp.prior[1]];
            continue;
        }
        let mut all_flood = 0.0;
        let mut free = 0.0;
        let mut some_dry_free = false;
        let mut cheapest = (f64::INFINITY, 0usize);
        for (i, &k) in parents.iter().enumerate() {
            let [b0, b1] = best[k as usize];
            all_flood += b1;
            if b0 >= b1 {
                free += b0;
                some_dry_free = true;
            } else {
                free += b1;
                if b1 - b0 < cheapest.0 {
                    cheapest = (b1 - b0, i);
                }
            }
        }
        let (dry_parent_best, dry_choice) = if some_dry_free {
            (free, FREE)
        } else {
            (free - cheapest.0, cheapest.1 as u32)
        };
        let via_flood = all_flood + lp.not_rho;
        let (b0, c) = if via_flood > dry_parent_best {
            (via_flood, ALL_FLOOD)
        } else {
            (dry_parent_best, dry_choice)
        };
        best[pos] = [ev[pos][0] + b0, ev[pos][1] + all_flood + lp.rho];
        choice[pos] = c;
    }

    let mut by_pos = vec![0u8; n];
    for pos in (0..n).rev() {
        if tree.child(order[pos]).is_none() {
            by_pos[pos] = u8::from(best[pos][1] > best[pos][0]);
        }
        let parents = tree.parent_positions(pos);
        if parents.is_empty() {
            continue;
        }
        if by_pos[pos] == 1 || choice[pos] == ALL_FLOOD {
            for &k in parents {
                by_pos[k as usize] = 1;
            }
        } else if choice[pos] == FREE {
            for &k in parents {
                let k = k as usize;
                by_pos[k] = u8::from(best[k][1] > best[k][0]);
            }
        } else {
            let forced = choice[pos] as usize;
            for (i, &k) in parents.iter().enumerate() {
                by_pos[k as usize] = u8::from(i != forced);
            }
        }
    }
    let mut labels = vec![0u8; n];
    for (pos, &node) in order.iter().enumerate() {
        labels[node] = by_pos[pos];
    }
    Ok(labels)
}

/// `log P(X, Y)` for a full labeling; `-inf` when the labeling floods a node
/// with a dry parent.
pub fn joint_log_prob(
    tree: &FlowTree,
    evidence: &Evidence,
    params: &ModelParams,
    labels: &[u8],
) -> f64 {
    let lp = LogParams::new(params);
    let mut total = 0.0;
    for node in 0..tree.node_count() {
        let y = labels[node] as usize;
        total += evidence.log_lik[node][y];
        let parents = tree.parents(node);
        if parents.is_empty() {
            total += lp.prior[y];
        } else if parents.iter().all(|&k| labels[k] == 1) {
            total += if y == 1 { lp.rho } else { lp.not_rho };
        } else if y == 1 {
            return f64::NEG_INFINITY;
        }
    }
    total
}

pub const BRUTE_FORCE_MAX_NODES: usize = 20;

fn check_brute(tree: &FlowTree, evidence: &Evidence) -> Result<(), InferError> {
    check_sizes(tree, evidence)?;
    if tree.node_count() > BRUTE_FORCE_MAX_NODES {
        return Err(InferError::TooManyNodes {
            got: tree.node_count(),
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    Ok(())
}

fn labeling(mask: u32, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((mask >> i) & 1) as u8).collect()
}

/// Posteriors by summing the joint over all `2^N` labelings.
pub fn brute_force_posterior(
    tree: &FlowTree,
    evidence: &Evidence,
    params: &ModelParams,
) -> Result<Posteriors, InferError> {
    check_brute(tree, evidence)?;
    let n = tree.node_count();
    let scores: Vec<f64> = (0..1u32 << n)
        .map(|mask| joint_log_prob(tree, evidence, params, &labeling(mask, n)))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut gamma = vec![0.0; n];
    let mut factor_stats = vec![[[0.0; 2]; 2]; n];
    for (mask, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = w / total;
        let y = labeling(mask as u32, n);
        for node in 0..n {
            gamma[node] += p * f64::from(y[node]);
            let parents = tree.parents(node);
            if !parents.is_empty() {
                let a = usize::from(parents.iter().all(|&k| y[k] == 1));
                factor_stats[node][y[node] as usize][a] += p;
            }
        }
    }
    Ok(Posteriors {
        gamma,
        factor_stats,
        loglik: max + total.ln(),
    })
}

/// Most probable labeling by enumeration; among equal scores the labeling
/// with fewer flooded nodes wins.
pub fn brute_force_map(
    tree: &FlowTree,
    evidence: &Evidence,
    params: &ModelParams,
) -> Result<Vec<u8>, InferError> {
    check_brute(tree, evidence)?;
    let n = tree.node_count();
    let mut best = (f64::NEG_INFINITY, u32::MAX, 0u32);
    for mask in 0..1u32 << n {
        let score = joint_log_prob(tree, evidence, params, &labeling(mask, n));
        let floods = mask.count_ones();
        if score > best.0 || (score == best.0 && floods < best.1) {
            best = (score, floods, mask);
        }
    }
    Ok(labeling(best.2, n))
}
