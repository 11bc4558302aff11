//! Seeded synthetic scenes with a known flood extent.
//!
//! Randomness comes from ChaCha8 seeded with `seed` through
//! `seed_from_u64`; each product draws from its own stream via
//! `set_stream`:
//!
//! | stream | use                               |
//! |--------|-----------------------------------|
//! | 0      | terrain (bump placement, roughness) |
//! | 1      | pixel features                    |
//! | 2      | canopy selection                  |
//! | 3      | strip offset assignment           |
//! | 4      | training label selection          |
//!
//! Uniform reals are the top 53 bits of `next_u64` scaled to `[0, 1)`.
//! Normals use the Box–Muller transform, consuming two uniforms per pair and
//! returning the cosine branch first. Shuffles are Fisher–Yates from the last
//! index down, drawing `j = (next_u64 * (i + 1)) >> 64`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::infer::NodeFeatures;
use crate::model::{ModelError, ModelParams};
use crate::raster::{write_grid_file, Grid, RasterError, SceneBundle, DEFAULT_NODATA};
use crate::tree::{Connectivity, FlowTree};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const STREAM_TERRAIN: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_CANOPY: u64 = 2;
const STREAM_STRIPS: u64 = 3;
const STREAM_LABELS: u64 = 4;

/// Seeded generator with the sampling conventions documented above.
pub struct SceneRng {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl SceneRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((u128::from(self.rng.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Terrain {
    /// `elevation = col + 0 * row`: a west-to-east ramp in whole units.
    Ramp,
    /// West-to-east ramp rising from 0 to 10 plus `count` Gaussian bumps of
    /// height uniform in `[-amplitude, amplitude]` and standard width
    /// `width` pixels.
    Bumps {
        count: usize,
        amplitude: f64,
        width: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub nrows: usize,
    pub ncols: usize,
    pub seed: u64,
    pub terrain: Terrain,
    /// Standard deviation of white noise added to the DEM.
    pub roughness: f64,
    pub water_level: f64,
    pub dry_mean: Vec<f64>,
    pub flood_mean: Vec<f64>,
    /// Per-band standard deviation of each class.
    pub class_sd: [f64; 2],
    /// Share of flooded pixels whose features are drawn from the dry class.
    pub canopy_fraction: f64,
    /// Number of horizontal strips, each with its own brightness offset.
    pub strips: usize,
    /// Largest strip offset magnitude; see [`strip_offsets`].
    pub strip_amplitude: f64,
    /// Share of valid pixels whose label is withheld (nodata).
    pub withheld_fraction: f64,
    pub connectivity: Connectivity,
    pub cellsize: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nrows: 64,
            ncols: 64,
            seed: 1,
            terrain: Terrain::Bumps {
                count: 12,
                amplitude: 3.0,
                width: 6.0,
            },
            roughness: 0.02,
            water_level: 5.0,
            dry_mean: vec![5.0, 5.0, 5.0],
            flood_mean: vec![2.0, 2.0, 2.0],
            class_sd: [1.0, 1.0],
            canopy_fraction: 0.0,
            strips: 0,
            strip_amplitude: 0.0,
            withheld_fraction: 0.99,
            connectivity: Connectivity::Four,
            cellsize: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn bands(&self) -> usize {
        self.dry_mean.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.nrows == 0 || self.ncols == 0 {
            return fail("grid dimensions must be positive");
        }
        if self.dry_mean.is_empty() || self.dry_mean.len() != self.flood_mean.len() {
            return fail("class means must share a positive band count");
        }
        if !(0.0..=1.0).contains(&self.canopy_fraction) {
            return fail("canopy_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.withheld_fraction) {
            return fail("withheld_fraction must lie in [0, 1]");
        }
        if self.water_level.is_nan() {
            return fail("water_level must be a number");
        }
        if !(self.class_sd[0] >= 0.0 && self.class_sd[1] >= 0.0) {
            return fail("class standard deviations must be non-negative");
        }
        if !(self.roughness >= 0.0 && self.strip_amplitude >= 0.0) {
            return fail("roughness and strip amplitude must be non-negative");
        }
        if !(self.cellsize > 0.0) {
            return fail("cellsize must be positive");
        }
        if let Terrain::Bumps { width, .. } = self.terrain {
            if !(width > 0.0) {
                return fail("bump width must be positive");
            }
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "nrows = {}", self.nrows);
        let _ = writeln!(out, "ncols = {}", self.ncols);
        let _ = writeln!(out, "seed = {}", self.seed);
        match &self.terrain {
            Terrain::Ramp => {
                let _ = writeln!(out, "terrain = ramp");
            }
            Terrain::Bumps {
                count,
                amplitude,
                width,
            } => {
                let _ = writeln!(out, "terrain = bumps {count} {amplitude} {width}");
            }
        }
        let _ = writeln!(out, "roughness = {}", self.roughness);
        let _ = writeln!(out, "water_level = {}", self.water_level);
        let _ = writeln!(out, "dry_mean = {}", list(&self.dry_mean));
        let _ = writeln!(out, "flood_mean = {}", list(&self.flood_mean));
        let _ = writeln!(out, "class_sd = {} {}", self.class_sd[0], self.class_sd[1]);
        let _ = writeln!(out, "canopy_fraction = {}", self.canopy_fraction);
        let _ = writeln!(out, "strips = {}", self.strips);
        let _ = writeln!(out, "strip_amplitude = {}", self.strip_amplitude);
        let _ = writeln!(out, "withheld_fraction = {}", self.withheld_fraction);
        let _ = writeln!(out, "connectivity = {}", self.connectivity.count());
        let _ = writeln!(out, "cellsize = {}", self.cellsize);
        out
    }

    /// Read a configuration from manifest text. Keys not describing the
    /// configuration (such as output paths) are ignored; absent keys keep
    /// their defaults.
    pub fn from_manifest(text: &str) -> Result<Self, SynthError> {
        let mut cfg = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SynthError::Manifest {
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let reals = || {
                value
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(format!("bad number {t:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            };
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad number {value:?} for {key}")))
            };
            let int = || {
                value
                    .parse::<u64>()
                    .map_err(|_| err(format!("bad integer {value:?} for {key}")))
            };
            match key {
                "nrows" => cfg.nrows = int()? as usize,
                "ncols" => cfg.ncols = int()? as usize,
                "seed" => cfg.seed = int()?,
                "terrain" => {
                    let tokens: Vec<&str> = value.split_whitespace().collect();
                    cfg.terrain = match tokens.as_slice() {
                        ["ramp"] => Terrain::Ramp,
                        ["bumps", count, amplitude, width] => Terrain::Bumps {
                            count: count.parse().map_err(|_| err("bad bump count".into()))?,
                            amplitude: amplitude
                                .parse()
                                .map_err(|_| err("bad amplitude".into()))?,
                            width: width.parse().map_err(|_| err("bad width".into()))?,
                        },
                        _ => return Err(err(format!("unknown terrain {value:?}"))),
                    };
                }
                "roughness" => cfg.roughness = real()?,
                "water_level" => cfg.water_level = real()?,
                "dry_mean" => cfg.dry_mean = reals()?,
                "flood_mean" => cfg.flood_mean = reals()?,
                "class_sd" => match reals()?.as_slice() {
                    [a, b] => cfg.class_sd = [*a, *b],
                    _ => return Err(err("class_sd takes two values".into())),
                },
                "canopy_fraction" => cfg.canopy_fraction = real()?,
                "strips" => cfg.strips = int()? as usize,
                "strip_amplitude" => cfg.strip_amplitude = real()?,
                "withheld_fraction" => cfg.withheld_fraction = real()?,
                "connectivity" => {
                    cfg.connectivity = Connectivity::from_count(int()? as u32)
                        .ok_or_else(|| err("connectivity must be 4 or 8".into()))?
                }
                "cellsize" => cfg.cellsize = real()?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// DEM, bands and training labels.
    pub scene: SceneBundle,
    pub truth: Grid,
    /// 1 where a flooded pixel carries dry-looking features, 0 elsewhere.
    pub canopy: Grid,
    pub warnings: Vec<String>,
}

fn blank(cfg: &SynthConfig) -> Grid {
    Grid {
        ncols: cfg.ncols,
        nrows: cfg.nrows,
        xllcorner: 0.0,
        yllcorner: 0.0,
        cellsize: cfg.cellsize,
        nodata_value: DEFAULT_NODATA,
        values: vec![0.0; cfg.nrows * cfg.ncols],
    }
}

pub fn generate_dem(cfg: &SynthConfig) -> Grid {
    let mut dem = blank(cfg);
    let mut rng = SceneRng::new(cfg.seed, STREAM_TERRAIN);
    let (nrows, ncols) = (cfg.nrows, cfg.ncols);
    match cfg.terrain {
        Terrain::Ramp => {
            for r in 0..nrows {
                for c in 0..ncols {
                    dem.values[r * ncols + c] = c as f64;
                }
            }
        }
        Terrain::Bumps {
            count,
            amplitude,
            width,
        } => {
            let span = (ncols.max(2) - 1) as f64;
            for r in 0..nrows {
                for c in 0..ncols {
                    dem.values[r * ncols + c] = 10.0 * c as f64 / span;
                }
            }
            let bumps: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    let br = rng.uniform() * nrows as f64;
                    let bc = rng.uniform() * ncols as f64;
                    let h = (2.0 * rng.uniform() - 1.0) * amplitude;
                    (br, bc, h)
                })
                .collect();
            let inv = 1.0 / (2.0 * width * width);
            for r in 0..nrows {
                for c in 0..ncols {
                    let mut z = 0.0;
                    for &(br, bc, h) in &bumps {
                        let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                        z += h * (-d2 * inv).exp();
                    }
                    dem.values[r * ncols + c] += z;
                }
            }
        }
    }
    if cfg.roughness > 0.0 {
        for v in &mut dem.values {
            *v += cfg.roughness * rng.normal();
        }
    }
    dem
}

/// Flood extent under a flat water surface: in every connected component of
/// valid pixels, the connected region at or below `water_level` containing
/// the component's lowest pixel. 1 = flood, 0 = dry, nodata preserved.
pub fn flat_flood_oracle(dem: &Grid, water_level: f64, connectivity: Connectivity) -> Grid {
    let (nrows, ncols) = (dem.nrows, dem.ncols);
    let mut out = dem.filled_like(dem.nodata_value);
    for i in 0..dem.len() {
        if dem.is_valid_at(i) {
            out.values[i] = 0.0;
        }
    }
    let mut seen = vec![false; dem.len()];
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..dem.len() {
        if seen[start] || !dem.is_valid_at(start) {
            continue;
        }
        // Component sweep to find its minimum.
        members.clear();
        seen[start] = true;
        queue.push_back(start);
        let mut lowest = start;
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let lower = dem.values[p]
                .total_cmp(&dem.values[lowest])
                .then(p.cmp(&lowest))
                .is_lt();
            if lower {
                lowest = p;
            }
            for q in connectivity.neighbors(nrows, ncols, p / ncols, p % ncols) {
                if !seen[q] && dem.is_valid_at(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if !(dem.values[lowest] <= water_level) {
            continue;
        }
        out.values[lowest] = 1.0;
        queue.push_back(lowest);
        while let Some(p) = queue.pop_front() {
            for q in connectivity.neighbors(nrows, ncols, p / ncols, p % ncols) {
                if out.values[q] == 0.0 && dem.is_valid_at(q) && dem.values[q] <= water_level {
                    out.values[q] = 1.0;
                    queue.push_back(q);
                }
            }
        }
    }
    out
}

/// Offsets of the horizontal illumination strips, top to bottom. The values
/// are spaced evenly over `[-strip_amplitude, strip_amplitude]` (a single
/// strip gets `+strip_amplitude`) and assigned to strips by seeded shuffle.
pub fn strip_offsets(cfg: &SynthConfig) -> Vec<f64> {
    let s = cfg.strips;
    let a = cfg.strip_amplitude;
    let mut offsets: Vec<f64> = match s {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..s)
            .map(|k| a * (2.0 * k as f64 / (s - 1) as f64 - 1.0))
            .collect(),
    };
    SceneRng::new(cfg.seed, STREAM_STRIPS).shuffle(&mut offsets);
    offsets
}

pub fn generate_scene(cfg: &SynthConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let dem = generate_dem(cfg);
    let truth = flat_flood_oracle(&dem, cfg.water_level, cfg.connectivity);
    let n = dem.len();
    let (nrows, ncols) = (cfg.nrows, cfg.ncols);

    let min = dem.values.iter().copied().fold(f64::INFINITY, f64::min);
    if cfg.water_level < min {
        warnings.push(format!(
            "water level {} is below the lowest elevation {min}; nothing floods",
            cfg.water_level
        ));
    }

    let mut flooded: Vec<usize> = (0..n).filter(|&i| truth.values[i] == 1.0).collect();
    let canopy_count = (cfg.canopy_fraction * flooded.len() as f64).round() as usize;
    SceneRng::new(cfg.seed, STREAM_CANOPY).shuffle(&mut flooded);
    let mut canopy = blank(cfg);
    for &p in &flooded[..canopy_count] {
        canopy.values[p] = 1.0;
    }

    let offsets = strip_offsets(cfg);
    let strip_offset = |row: usize| {
        if offsets.is_empty() {
            0.0
        } else {
            offsets[row * offsets.len() / nrows]
        }
    };

    let d = cfg.bands();
    let mut bands: Vec<Grid> = (0..d).map(|_| blank(cfg)).collect();
    let mut rng = SceneRng::new(cfg.seed, STREAM_FEATURES);
    for r in 0..nrows {
        for c in 0..ncols {
            let i = r * ncols + c;
            let looks_flooded = truth.values[i] == 1.0 && canopy.values[i] == 0.0;
            let (mean, sd) = if looks_flooded {
                (&cfg.flood_mean, cfg.class_sd[1])
            } else {
                (&cfg.dry_mean, cfg.class_sd[0])
            };
            let offset = strip_offset(r);
            for b in 0..d {
                bands[b].values[i] = mean[b] + sd * rng.normal() + offset;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    SceneRng::new(cfg.seed, STREAM_LABELS).shuffle(&mut order);
    let labeled = ((1.0 - cfg.withheld_fraction) * n as f64).round() as usize;
    let mut labels = blank(cfg).filled_like(DEFAULT_NODATA);
    for &p in &order[..labeled] {
        labels.values[p] = truth.values[p];
    }

    let scene = SceneBundle::new(dem, bands, Some(labels))?;
    Ok(SyntheticScene {
        scene,
        truth,
        canopy,
        warnings,
    })
}

/// File names used inside a scene directory.
pub fn band_file_name(b: usize) -> String {
    format!("band_{b}.asc")
}

/// Write DEM, bands, labels, truth and canopy grids plus `manifest.txt`.
pub fn write_scene_dir(
    dir: &Path,
    cfg: &SynthConfig,
    synthetic: &SyntheticScene,
) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: String, grid: &Grid| -> Result<(), SynthError> {
        let path = dir.join(&name);
        write_grid_file(&path, grid)?;
        written.push(path);
        Ok(())
    };
    put("dem.asc".into(), &synthetic.scene.dem)?;
    for (b, band) in synthetic.scene.bands.iter().enumerate() {
        put(band_file_name(b), band)?;
    }
    if let Some(labels) = &synthetic.scene.labels {
        put("labels.asc".into(), labels)?;
    }
    put("truth.asc".into(), &synthetic.truth)?;
    put("canopy.asc".into(), &synthetic.canopy)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "dem_path = dem.asc");
    for b in 0..synthetic.scene.band_count() {
        let _ = writeln!(manifest, "band_path = {}", band_file_name(b));
    }
    let _ = writeln!(manifest, "labels_path = labels.asc");
    let _ = writeln!(manifest, "truth_path = truth.asc");
    let _ = writeln!(manifest, "canopy_path = canopy.asc");
    manifest.push_str(&cfg.to_manifest());
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    written.push(path);
    Ok(written)
}

/// Draw labels and features from the hidden Markov tree itself: sources
/// flood with probability `pi`, other nodes with probability `rho` when every
/// parent is flooded and never otherwise; features are Gaussian per class.
pub fn sample_hmt(
    tree: &FlowTree,
    params: &ModelParams,
    seed: u64,
) -> Result<(Vec<u8>, NodeFeatures), SynthError> {
    params.validate()?;
    let d = params.dims();
    let mut rng = SceneRng::new(seed, STREAM_LABELS);
    let mut labels = vec![0u8; tree.node_count()];
    for &node in tree.topo_order() {
        let parents = tree.parents(node);
        let p = if parents.is_empty() {
            params.pi
        } else if parents.iter().all(|&k| labels[k] == 1) {
            params.rho
        } else {
            0.0
        };
        labels[node] = u8::from(rng.uniform() < p);
    }
    let factors: Vec<DMatrix<f64>> = (0..2)
        .map(|c| {
            DMatrix::from_row_slice(d, d, &params.sigma[c])
                .cholesky()
                .map(|ch| ch.l())
                .ok_or(ModelError::NotPositiveDefinite { class: c })
        })
        .collect::<Result<_, _>>()?;
    let mut rng = SceneRng::new(seed, STREAM_FEATURES);
    let mut rows = Vec::with_capacity(tree.node_count());
    let mut z = vec![0.0; d];
    for &label in &labels {
        let c = label as usize;
        for v in &mut z {
            *v = rng.normal();
        }
        let l = &factors[c];
        rows.push(
            (0..d)
                .map(|i| params.mu[c][i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                .collect(),
        );
    }
    Ok((labels, NodeFeatures::from_rows(&rows)))
}
