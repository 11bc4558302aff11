//! EM parameter learning driven by sum-product posteriors.
//!
//! Initial parameters come from labeled training pixels; EM then adapts
//! them without labels on the full scene the tree was built from.

use std::fmt::Write as _;

use thiserror::Error;

use crate::infer::{sum_product, Evidence, InferError, NodeFeatures, Posteriors};
use crate::model::{add_ridge, Emission, ModelError, ModelParams, PI_MAX, PI_MIN, RHO_MIN};
use crate::raster::SceneBundle;
use crate::tree::FlowTree;

/// Weights below this are treated as empty.
const MIN_WEIGHT: f64 = 1e-12;
/// Absolute slack on log-likelihood decreases between iterations.
pub const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error("log-likelihood decreased at iteration {iteration}: {previous} -> {current}")]
    NonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood gain falls below this.
    pub tol: f64,
    /// Keep the initial Gaussians and learn only `pi` and `rho`.
    pub fix_gaussians: bool,
    pub rho_floor: f64,
    pub rho_ceiling: f64,
    pub pi_min: f64,
    pub pi_max: f64,
    /// Threads used for evidence evaluation.
    pub workers: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            fix_gaussians: false,
            rho_floor: RHO_MIN,
            rho_ceiling: 1.0 - 1e-6,
            pi_min: PI_MIN,
            pi_max: PI_MAX,
            workers: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.max_iters < 1 {
            return Err(LearnError::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(LearnError::Config("tol must be positive".into()));
        }
        if !(RHO_MIN <= self.rho_floor
            && self.rho_floor <= self.rho_ceiling
            && self.rho_ceiling < 1.0)
        {
            return Err(LearnError::Config(
                "rho clamp must satisfy 0.5 <= floor <= ceiling < 1".into(),
            ));
        }
        if !(0.0 < self.pi_min && self.pi_min <= self.pi_max && self.pi_max < 1.0) {
            return Err(LearnError::Config("pi clamp must lie inside (0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameters the M-step could not re-estimate and left at their previous
/// values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MStepFlags {
    pub rho_kept: bool,
    pub class_kept: [bool; 2],
}

impl MStepFlags {
    pub fn any(&self) -> bool {
        self.rho_kept || self.class_kept.iter().any(|&k| k)
    }
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
pub fn m_step(
    posteriors: &Posteriors,
    features: &NodeFeatures,
    tree: &FlowTree,
    previous: &ModelParams,
    config: &EmConfig,
) -> Result<(ModelParams, MStepFlags), LearnError> {
    let mut next = previous.clone();
    let mut flags = MStepFlags::default();

    let sources = tree.sources();
    let pi = sources.iter().map(|&s| posteriors.gamma[s]).sum::<f64>() / sources.len() as f64;
    next.pi = pi.clamp(config.pi_min, config.pi_max);

    let mut flood_given_all = 0.0;
    let mut all_flooded = 0.0;
    for node in 0..tree.node_count() {
        if tree.is_source(node) {
            continue;
        }
        let s = posteriors.factor_stats[node];
        flood_given_all += s[1][1];
        all_flooded += s[0][1] + s[1][1];
    }
    if all_flooded < MIN_WEIGHT {
        flags.rho_kept = true;
    } else {
        next.rho = (flood_given_all / all_flooded).clamp(config.rho_floor, config.rho_ceiling);
    }

    if !config.fix_gaussians {
        let d = features.dims();
        // One pass accumulating moments about the previous means, which are
        // close enough to the new ones that the shift costs no precision.
        let shift = &previous.mu;
        let mut total = [0.0f64; 2];
        let mut first = [vec![0.0; d], vec![0.0; d]];
        let mut second = [vec![0.0; d * d], vec![0.0; d * d]];
        let mut centered = [vec![0.0; d], vec![0.0; d]];
        for node in 0..features.len() {
            let g = posteriors.gamma[node];
            let x = features.row(node);
            for (class, w) in [(0, 1.0 - g), (1, g)] {
                total[class] += w;
                let c = &mut centered[class];
                for i in 0..d {
                    c[i] = x[i] - shift[class][i];
                    first[class][i] += w * c[i];
                }
                let s2 = &mut second[class];
                for i in 0..d {
                    let wi = w * c[i];
                    for j in 0..=i {
                        s2[i * d + j] += wi * c[j];
                    }
                }
            }
        }
        for class in 0..2 {
            let w = total[class];
            if w < MIN_WEIGHT {
                flags.class_kept[class] = true;
                continue;
            }
            let offset: Vec<f64> = first[class].iter().map(|v| v / w).collect();
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..=i {
                    let v = second[class][i * d + j] / w - offset[i] * offset[j];
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
            add_ridge(&mut cov, d, previous.reg_epsilon);
            next.mu[class] = shift[class]
                .iter()
                .zip(&offset)
                .map(|(m, o)| m + o)
                .collect();
            next.sigma[class] = cov;
        }
        Emission::new(&next)?;
    }
    Ok((next, flags))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub loglik: f64,
    pub d_rho: f64,
    pub d_pi: f64,
    pub flags: MStepFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub iterations: Vec<IterationRecord>,
    pub params: ModelParams,
    pub converged: bool,
}

impl EmTrace {
    pub fn logliks(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loglik).collect()
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations.len()
    }

    /// One `iter loglik d_rho d_pi` line per iteration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.iterations.iter().enumerate() {
            let _ = writeln!(out, "{} {} {} {}", i + 1, r.loglik, r.d_rho, r.d_pi);
        }
        out
    }
}

pub fn em_fit(
    scene: &SceneBundle,
    tree: &FlowTree,
    init: &ModelParams,
    config: &EmConfig,
) -> Result<EmTrace, LearnError> {
    em_fit_features(&NodeFeatures::from_scene(scene, tree), tree, init, config)
}

/// EM on pre-gathered node features.
pub fn em_fit_features(
    features: &NodeFeatures,
    tree: &FlowTree,
    init: &ModelParams,
    config: &EmConfig,
) -> Result<EmTrace, LearnError> {
    config.validate()?;
    init.validate()?;
    if features.len() != tree.node_count() {
        return Err(InferError::SizeMismatch {
            got: features.len(),
            expected: tree.node_count(),
        }
        .into());
    }
    // Sweep in topological numbering.
    let local = tree.topo_relabeled();
    let features = &features.permuted(tree.topo_order());
    let tree = &local;
    let mut params = init.clone();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut converged = false;

    for iteration in 0..config.max_iters {
        let evidence = Evidence::from_features(features, &params, config.workers)?;
        let posteriors = sum_product(tree, &evidence, &params)?;
        let loglik = posteriors.loglik;

        if let Some(prev) = iterations.last().map(|r| r.loglik) {
            if loglik < prev - MONOTONE_SLACK - 1e-12 * prev.abs() {
                return Err(LearnError::NonMonotone {
                    iteration: iteration + 1,
                    previous: prev,
                    current: loglik,
                });
            }
            if (loglik - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.tol {
                iterations.push(IterationRecord {
                    loglik,
                    d_rho: 0.0,
                    d_pi: 0.0,
                    flags: MStepFlags::default(),
                });
                converged = true;
                break;
            }
        }

        let (next, flags) = m_step(&posteriors, features, tree, &params, config)?;
        iterations.push(IterationRecord {
            loglik,
            d_rho: next.rho - params.rho,
            d_pi: next.pi - params.pi,
            flags,
        });
        params = next;
    }

    Ok(EmTrace {
        iterations,
        params,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_tree(n: usize) -> FlowTree {
        let parents: Vec<Vec<usize>> = (0..n)
            .map(|i| if i == 0 { vec![] } else { vec![i - 1] })
            .collect();
        FlowTree::from_parents(&parents).unwrap()
    }

    #[test]
    fn full_flood_weights_give_plain_mean() {
        let tree = chain_tree(4);
        let feats = NodeFeatures::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 2.0],
            vec![5.0, 1.0],
            vec![7.0, 5.0],
        ]);
        let post = Posteriors {
            gamma: vec![1.0; 4],
            factor_stats: vec![[[0.0, 0.0], [0.0, 1.0]]; 4],
            loglik: 0.0,
        };
        let prev = ModelParams::isotropic(0.5, 0.9, [vec![0.0, 0.0], vec![0.0, 0.0]], [1.0, 1.0]);
        let (p, flags) = m_step(&post, &feats, &tree, &prev, &EmConfig::default()).unwrap();
        assert_eq!(p.mu[1], vec![4.0, 2.0]);
        // dry weight vanishes: previous dry Gaussian retained
        assert!(flags.class_kept[0]);
        assert_eq!(p.mu[0], prev.mu[0]);
        assert_eq!(p.rho, 1.0 - 1e-6);
        assert_eq!(p.pi, PI_MAX);
    }

    #[test]
    fn rho_is_ratio_of_factor_stats() {
        let tree = chain_tree(5);
        let feats = NodeFeatures::from_rows(&vec![vec![0.0]; 5]);
        let post = Posteriors {
            gamma: vec![0.5; 5],
            factor_stats: vec![[[0.5, 0.1], [0.0, 0.4]]; 5],
            loglik: 0.0,
        };
        let prev = ModelParams::isotropic(0.3, 0.9, [vec![0.0], vec![1.0]], [1.0, 1.0]);
        let cfg = EmConfig {
            fix_gaussians: true,
            ..EmConfig::default()
        };
        let (p, _) = m_step(&post, &feats, &tree, &prev, &cfg).unwrap();
        assert!((p.rho - 0.8).abs() < 1e-15);
        assert_eq!(p.pi, 0.5);
        assert_eq!(p.mu, prev.mu);
        assert_eq!(p.sigma, prev.sigma);
    }

    #[test]
    fn rho_kept_without_flooded_parents() {
        let tree = chain_tree(3);
        let feats = NodeFeatures::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let post = Posteriors {
            gamma: vec![0.0; 3],
            factor_stats: vec![[[1.0, 0.0], [0.0, 0.0]]; 3],
            loglik: 0.0,
        };
        let prev = ModelParams::isotropic(0.3, 0.77, [vec![0.0], vec![1.0]], [1.0, 1.0]);
        let (p, flags) = m_step(&post, &feats, &tree, &prev, &EmConfig::default()).unwrap();
        assert!(flags.rho_kept);
        assert!(flags.class_kept[1]);
        assert_eq!(p.rho, 0.77);
        assert_eq!(p.pi, PI_MIN);
    }

    #[test]
    fn config_validation() {
        let bad = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EmConfig {
            tol: 0.0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EmConfig::default().validate().is_ok());
    }

    #[test]
    fn single_iteration_trace() {
        let tree = chain_tree(6);
        let feats = NodeFeatures::from_rows(&[
            vec![0.1],
            vec![-0.2],
            vec![0.9],
            vec![1.2],
            vec![3.1],
            vec![2.8],
        ]);
        let init = ModelParams::isotropic(0.5, 0.9, [vec![3.0], vec![0.0]], [1.0, 1.0]);
        let cfg = EmConfig {
            max_iters: 1,
            ..EmConfig::default()
        };
        let trace = em_fit_features(&feats, &tree, &init, &cfg).unwrap();
        assert_eq!(trace.iterations_run(), 1);
        assert!(!trace.converged);
        assert_ne!(trace.params, init);
        let text = trace.to_text();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("1 "));
    }
}
