//! HMT parameters and the per-class Gaussian emission model.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::raster::SceneBundle;

pub const DRY: usize = 0;
pub const FLOOD: usize = 1;

pub const PI_MIN: f64 = 0.01;
pub const PI_MAX: f64 = 0.99;
pub const RHO_MIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("covariance of class {class} is not positive definite")]
    NotPositiveDefinite { class: usize },
    #[error("class {class} has {found} labeled pixels, need at least {needed}")]
    TooFewSamples {
        class: usize,
        found: usize,
        needed: usize,
    },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("parameter file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Full parameter set of the hidden Markov tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Probability that a source node is flooded.
    pub pi: f64,
    /// Probability that a node is flooded given every parent is flooded.
    pub rho: f64,
    /// Per-class band means.
    pub mu: [Vec<f64>; 2],
    /// Per-class covariance, row-major `D x D`, already regularized.
    pub sigma: [Vec<f64>; 2],
    /// Ridge added to covariance diagonals whenever they are estimated.
    pub reg_epsilon: f64,
}

impl ModelParams {
    pub fn dims(&self) -> usize {
        self.mu[0].len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dims();
        if d == 0 {
            return Err(ModelError::Invalid("zero feature dimensions".into()));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(ModelError::Invalid(format!(
                "pi = {} outside (0, 1)",
                self.pi
            )));
        }
        if !(self.rho >= RHO_MIN && self.rho < 1.0) {
            return Err(ModelError::Invalid(format!(
                "rho = {} outside [0.5, 1)",
                self.rho
            )));
        }
        if !(self.reg_epsilon >= 0.0) {
            return Err(ModelError::Invalid(
                "reg_epsilon must be non-negative".into(),
            ));
        }
        for c in 0..2 {
            if self.mu[c].len() != d || self.sigma[c].len() != d * d {
                return Err(ModelError::Invalid(format!(
                    "class {c} mean/covariance do not match {d} dimensions"
                )));
            }
        }
        Emission::new(self).map(|_| ())
    }

    /// Isotropic Gaussians with the given means, handy for synthetic setups.
    pub fn isotropic(pi: f64, rho: f64, mu: [Vec<f64>; 2], variance: [f64; 2]) -> Self {
        let d = mu[0].len();
        let diag = |v: f64| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = v;
            }
            m
        };
        Self {
            pi,
            rho,
            sigma: [diag(variance[0]), diag(variance[1])],
            mu,
            reg_epsilon: 0.0,
        }
    }

    /// Line-oriented `key = value(s)` representation.
    pub fn to_text(&self) -> String {
        let d = self.dims();
        let mut out = String::new();
        let _ = writeln!(out, "bands = {d}");
        let _ = writeln!(out, "pi = {}", self.pi);
        let _ = writeln!(out, "rho = {}", self.rho);
        let _ = writeln!(out, "epsilon = {}", self.reg_epsilon);
        for c in 0..2 {
            let _ = writeln!(out, "mu{c} = {}", join(&self.mu[c]));
        }
        for c in 0..2 {
            for r in 0..d {
                let _ = writeln!(
                    out,
                    "sigma{c}[{r}] = {}",
                    join(&self.sigma[c][r * d..(r + 1) * d])
                );
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut dims = None;
        let mut pi = None;
        let mut rho = None;
        let mut eps = None;
        let mut mu: [Option<Vec<f64>>; 2] = [None, None];
        let mut rows: [Vec<Option<Vec<f64>>>; 2] = [Vec::new(), Vec::new()];
        let mut last = 0;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            last = lineno;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ModelError::Format {
                line: lineno,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let numbers = || {
                value
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(format!("bad number {t:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            };
            let scalar = || {
                let v = numbers()?;
                match v.as_slice() {
                    [x] => Ok(*x),
                    _ => Err(err(format!("{key} takes one value"))),
                }
            };
            match key {
                "bands" => {
                    let d = value
                        .parse::<usize>()
                        .map_err(|_| err(format!("bad band count {value:?}")))?;
                    dims = Some(d);
                    rows = [vec![None; d], vec![None; d]];
                }
                "pi" => pi = Some(scalar()?),
                "rho" => rho = Some(scalar()?),
                "epsilon" => eps = Some(scalar()?),
                "mu0" => mu[0] = Some(numbers()?),
                "mu1" => mu[1] = Some(numbers()?),
                _ => {
                    let (class, row) =
                        parse_sigma_key(key).ok_or_else(|| err(format!("unknown key {key:?}")))?;
                    let slot = rows[class].get_mut(row).ok_or_else(|| {
                        err(format!("{key} out of range (bands must come first)"))
                    })?;
                    *slot = Some(numbers()?);
                }
            }
        }
        let missing = |what: &str| ModelError::Format {
            line: last,
            message: format!("missing {what}"),
        };
        let d = dims.ok_or_else(|| missing("bands"))?;
        let mut sigma: [Vec<f64>; 2] = [Vec::with_capacity(d * d), Vec::with_capacity(d * d)];
        for c in 0..2 {
            for (r, slot) in rows[c].iter_mut().enumerate().take(d) {
                let row = slot
                    .take()
                    .ok_or_else(|| missing(&format!("sigma{c}[{r}]")))?;
                if row.len() != d {
                    return Err(missing(&format!("{d} entries in sigma{c}[{r}]")));
                }
                sigma[c].extend(row);
            }
        }
        let [mu0, mu1] = mu;
        let params = Self {
            pi: pi.ok_or_else(|| missing("pi"))?,
            rho: rho.ok_or_else(|| missing("rho"))?,
            mu: [
                mu0.ok_or_else(|| missing("mu0"))?,
                mu1.ok_or_else(|| missing("mu1"))?,
            ],
            sigma,
            reg_epsilon: eps.ok_or_else(|| missing("epsilon"))?,
        };
        params.validate()?;
        Ok(params)
    }
}

fn parse_sigma_key(key: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix("sigma")?;
    let (class, rest) = rest.split_at(1);
    let class = match class {
        "0" => 0,
        "1" => 1,
        _ => return None,
    };
    let row = rest.strip_prefix('[')?.strip_suffix(']')?.parse().ok()?;
    Some((class, row))
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// Gaussian log-densities for both classes with the Cholesky factors
/// precomputed, for evaluating many pixels against one parameter set.
#[derive(Debug, Clone)]
pub struct Emission {
    dims: usize,
    mu: [Vec<f64>; 2],
    /// Lower Cholesky factor, row-major.
    chol: [Vec<f64>; 2],
    /// `-0.5 * (D ln 2π + ln det Σ)`.
    log_norm: [f64; 2],
}

impl Emission {
    pub fn new(params: &ModelParams) -> Result<Self, ModelError> {
        let d = params.dims();
        let mut chol = [Vec::new(), Vec::new()];
        let mut log_norm = [0.0; 2];
        for c in 0..2 {
            let m = DMatrix::from_row_slice(d, d, &params.sigma[c]);
            if (0..d).any(|i| (0..i).any(|j| m[(i, j)] != m[(j, i)])) {
                return Err(ModelError::NotPositiveDefinite { class: c });
            }
            let factor = m
                .cholesky()
                .ok_or(ModelError::NotPositiveDefinite { class: c })?;
            let l = factor.l();
            let log_det: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
            if !log_det.is_finite() {
                return Err(ModelError::NotPositiveDefinite { class: c });
            }
            log_norm[c] = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
            chol[c] = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| l[(i, j)])
                .collect();
        }
        Ok(Self {
            dims: d,
            mu: params.mu.clone(),
            chol,
            log_norm,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// `log N(x; mu_c, Sigma_c)` via forward substitution on the Cholesky
    /// factor.
    pub fn log_density(&self, x: &[f64], class: usize) -> f64 {
        let d = self.dims;
        let l = &self.chol[class];
        let mu = &self.mu[class];
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = x[i] - mu[i];
            for j in 0..i {
                s -= l[i * d + j] * z[j];
            }
            z[i] = s / l[i * d + i];
            quad += z[i] * z[i];
        }
        self.log_norm[class] - 0.5 * quad
    }

    pub fn log_pair(&self, x: &[f64]) -> [f64; 2] {
        [self.log_density(x, DRY), self.log_density(x, FLOOD)]
    }
}

/// `log N(x; mu_c, Sigma_c)` for a single feature vector.
pub fn local_log_density(x: &[f64], class: usize, params: &ModelParams) -> Result<f64, ModelError> {
    if x.len() != params.dims() {
        return Err(ModelError::Invalid(format!(
            "feature has {} dimensions, model has {}",
            x.len(),
            params.dims()
        )));
    }
    Ok(Emission::new(params)?.log_density(x, class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Initial flood-given-flooded-parents probability.
    pub rho: f64,
    /// Overrides the covariance ridge; default is 1e-6 times the mean
    /// diagonal of the unregularized class covariances.
    pub reg_epsilon: Option<f64>,
    /// Overrides the flood prior estimated from label counts.
    pub pi: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            rho: 0.99,
            reg_epsilon: None,
            pi: None,
        }
    }
}

const EPSILON_SCALE: f64 = 1e-6;
const EPSILON_FLOOR: f64 = 1e-12;

/// Sample mean and maximum-likelihood covariance of a set of rows.
pub(crate) fn moments<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    d: usize,
) -> (usize, Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for k in 0..d {
            mean[k] += r[k];
        }
    }
    for m in &mut mean {
        *m /= n.max(1) as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in &rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for v in &mut cov {
        *v /= n.max(1) as f64;
    }
    (n, mean, cov)
}

pub(crate) fn mean_diagonal(covs: &[&[f64]], d: usize) -> f64 {
    let total: f64 = covs
        .iter()
        .map(|c| (0..d).map(|i| c[i * d + i]).sum::<f64>())
        .sum();
    total / (covs.len() * d) as f64
}

pub(crate) fn add_ridge(cov: &mut [f64], d: usize, eps: f64) {
    for i in 0..d {
        cov[i * d + i] += eps;
    }
}

/// Fit initial parameters from labeled feature vectors (label 0 = dry,
/// 1 = flood).
pub fn fit_initial_params(
    features: &[Vec<f64>],
    labels: &[u8],
    config: &InitConfig,
) -> Result<ModelParams, ModelError> {
    if features.len() != labels.len() {
        return Err(ModelError::Invalid(
            "features and labels differ in length".into(),
        ));
    }
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(ModelError::Invalid(
            "features must share a positive dimension".into(),
        ));
    }
    let mut fitted = Vec::with_capacity(2);
    for class in 0..2u8 {
        let rows = features
            .iter()
            .zip(labels)
            .filter(|&(_, &l)| l == class)
            .map(|(f, _)| f.as_slice());
        let (n, mean, cov) = moments(rows, d);
        if n < d + 1 {
            return Err(ModelError::TooFewSamples {
                class: class as usize,
                found: n,
                needed: d + 1,
            });
        }
        fitted.push((n, mean, cov));
    }
    let (n1, mu1, mut cov1) = fitted.pop().unwrap();
    let (n0, mu0, mut cov0) = fitted.pop().unwrap();
    let eps = config
        .reg_epsilon
        .unwrap_or_else(|| (EPSILON_SCALE * mean_diagonal(&[&cov0, &cov1], d)).max(EPSILON_FLOOR));
    add_ridge(&mut cov0, d, eps);
    add_ridge(&mut cov1, d, eps);
    let pi = config
        .pi
        .unwrap_or(n1 as f64 / (n0 + n1) as f64)
        .clamp(PI_MIN, PI_MAX);
    let params = ModelParams {
        pi,
        rho: config.rho,
        mu: [mu0, mu1],
        sigma: [cov0, cov1],
        reg_epsilon: eps,
    };
    params.validate()?;
    Ok(params)
}

/// Labeled training pixels of a scene: features of valid pixels whose label
/// is not nodata.
pub fn labeled_samples(scene: &SceneBundle) -> (Vec<Vec<f64>>, Vec<u8>) {
    let Some(labels) = &scene.labels else {
        return (Vec::new(), Vec::new());
    };
    let mut features = Vec::new();
    let mut classes = Vec::new();
    for i in 0..labels.len() {
        if scene.is_valid(i) && labels.is_valid_at(i) {
            features.push(scene.feature(i));
            classes.push(u8::from(labels.values[i] == 1.0));
        }
    }
    (features, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, m0: f64, m1: f64) -> ModelParams {
        ModelParams::isotropic(0.5, 0.99, [vec![m0; d], vec![m1; d]], [1.0, 1.0])
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = unit(1, 0.0, 0.0);
        let v = local_log_density(&[0.0], 0, &p).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);

        let p = unit(2, 3.0, 3.0);
        let v = local_log_density(&[3.0, 3.0], 1, &p).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn wide_normal_matches_closed_form() {
        let p = ModelParams::isotropic(0.5, 0.9, [vec![0.0], vec![0.0]], [4.0, 4.0]);
        let v = local_log_density(&[2.0], 0, &p).unwrap();
        // Independent evaluation of ln( exp(-x²/2σ²) / sqrt(2πσ²) ).
        let closed = (f64::exp(-(2.0f64 * 2.0) / (2.0 * 4.0)) / (2.0 * PI * 4.0).sqrt()).ln();
        assert!((v - closed).abs() < 1e-12);
        assert!((v - (-0.5 * (8.0 * PI).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let p = ModelParams::isotropic(0.5, 0.9, [vec![0.3], vec![-1.0]], [0.7, 2.5]);
        let e = Emission::new(&p).unwrap();
        for c in 0..2 {
            // Composite Simpson over ±12 sd.
            let (a, b, n) = (-20.0, 20.0, 40_000);
            let h = (b - a) / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let x = a + i as f64 * h;
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * e.log_density(&[x], c).exp();
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn correlated_density_matches_nalgebra_inverse() {
        let p = ModelParams {
            pi: 0.4,
            rho: 0.9,
            mu: [vec![1.0, -2.0, 0.5], vec![0.0; 3]],
            sigma: [
                vec![2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ],
            reg_epsilon: 0.0,
        };
        let x = [0.2, -1.0, 1.5];
        let s = DMatrix::from_row_slice(3, 3, &p.sigma[0]);
        let inv = s.clone().try_inverse().unwrap();
        let diff = nalgebra::DVector::from_iterator(3, x.iter().zip(&p.mu[0]).map(|(a, b)| a - b));
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        let expect = -0.5 * (3.0 * (2.0 * PI).ln() + s.determinant().ln() + quad);
        assert!((local_log_density(&x, 0, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_spd() {
        let mut p = unit(2, 0.0, 1.0);
        p.sigma[1] = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            local_log_density(&[0.0, 0.0], 0, &p),
            Err(ModelError::NotPositiveDefinite { class: 1 })
        ));
    }

    #[test]
    fn two_point_moments() {
        let feats = vec![
            vec![0.0, 0.0],
            vec![2.0, 2.0],
            vec![5.0, 1.0],
            vec![4.0, 0.0],
            vec![6.0, 3.0],
        ];
        let labels = vec![1, 1, 0, 0, 0];
        let eps = 1e-3;
        // Class 1 has only two points; D+1 = 3 are required.
        assert!(matches!(
            fit_initial_params(&feats, &labels, &InitConfig::default()),
            Err(ModelError::TooFewSamples {
                class: 1,
                found: 2,
                needed: 3
            })
        ));
        let feats = [feats, vec![vec![0.0, 0.0], vec![2.0, 2.0]]].concat();
        let labels = vec![1, 1, 0, 0, 0, 1, 1];
        let cfg = InitConfig {
            reg_epsilon: Some(eps),
            ..InitConfig::default()
        };
        let p = fit_initial_params(&feats, &labels, &cfg).unwrap();
        assert_eq!(p.mu[1], vec![1.0, 1.0]);
        assert_eq!(p.sigma[1], vec![1.0 + eps, 1.0, 1.0, 1.0 + eps]);
        assert_eq!(p.rho, 0.99);
        assert!((p.pi - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn identical_points_get_ridge_only() {
        let mut feats = vec![vec![3.0, 3.0]; 4];
        feats.extend([
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ]);
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let p = fit_initial_params(&feats, &labels, &InitConfig::default()).unwrap();
        let eps = p.reg_epsilon;
        // Class 0 has variance 0.25 per band; class 1 none.
        assert!((eps - 1e-6 * 0.125).abs() < 1e-20);
        assert_eq!(p.sigma[1], vec![eps, 0.0, 0.0, eps]);
        assert!(Emission::new(&p).is_ok());
    }

    #[test]
    fn balanced_training_counts_give_even_prior() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10_000 {
            let class = u8::from(i >= 5_000);
            let t = (i % 97) as f64 / 97.0;
            feats.push(vec![f64::from(class) * 5.0 + t, t * t]);
            labels.push(class);
        }
        let p = fit_initial_params(&feats, &labels, &InitConfig::default()).unwrap();
        assert_eq!(p.pi, 0.5);
    }

    #[test]
    fn prior_is_clamped() {
        let mut feats = vec![vec![0.0], vec![1.0]];
        let mut labels = vec![1, 1];
        for i in 0..500 {
            feats.push(vec![10.0 + (i % 7) as f64]);
            labels.push(0);
        }
        let p = fit_initial_params(&feats, &labels, &InitConfig::default()).unwrap();
        assert_eq!(p.pi, PI_MIN);
    }

    #[test]
    fn text_round_trip() {
        let p = ModelParams {
            pi: 0.123456789,
            rho: 0.987654321,
            mu: [vec![1.5, -2.25], vec![1e-9, 3.0]],
            sigma: [vec![2.0, 0.1, 0.1, 1.0 / 3.0], vec![1.0, 0.0, 0.0, 1.0]],
            reg_epsilon: 1.25e-7,
        };
        let text = p.to_text();
        assert_eq!(ModelParams::from_text(&text).unwrap(), p);
        assert!(text.contains("sigma0[1] = 0.1 0.3333333333333333"));
        assert!(ModelParams::from_text("pi = 0.5\n").is_err());
        assert!(ModelParams::from_text(&text.replace("rho = 0.987654321", "rho = 0.2")).is_err());
    }
}
