//! Non-spatial reference classifier and neighbourhood smoothing.

use crate::model::{Emission, ModelError, ModelParams};
use crate::raster::{Grid, SceneBundle};

/// Per-pixel maximum a posteriori class under the prior `pi` and the class
/// Gaussians, ignoring topography. Invalid pixels stay nodata; ties go to dry.
pub fn pixelwise_classify(scene: &SceneBundle, params: &ModelParams) -> Result<Grid, ModelError> {
    let emission = Emission::new(params)?;
    let log_prior = [(-params.pi).ln_1p(), params.pi.ln()];
    let mut out = scene.dem.filled_like(scene.dem.nodata_value);
    let mut x = vec![0.0; scene.band_count()];
    for i in 0..out.len() {
        if !scene.is_valid(i) {
            continue;
        }
        for (slot, band) in x.iter_mut().zip(&scene.bands) {
            *slot = band.values[i];
        }
        let [d0, d1] = emission.log_pair(&x);
        out.values[i] = if d1 + log_prior[1] > d0 + log_prior[0] {
            1.0
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Synchronous 4-neighbourhood majority voting. Each valid cell takes the
/// majority label among itself and its valid 4-neighbours, keeping its own
/// label on a tie. Stops after `iterations` sweeps or when nothing changes.
pub fn label_propagation_smooth(class_map: &Grid, iterations: usize) -> Grid {
    let (nrows, ncols) = (class_map.nrows, class_map.ncols);
    let mut current = class_map.clone();
    let mut next = class_map.clone();
    for _ in 0..iterations {
        let mut changed = false;
        for r in 0..nrows {
            for c in 0..ncols {
                let i = r * ncols + c;
                let v = current.values[i];
                if current.is_nodata(v) {
                    continue;
                }
                let mut votes = 1usize;
                let mut flood = usize::from(v == 1.0);
                let mut vote = |j: usize| {
                    let u = current.values[j];
                    if !current.is_nodata(u) {
                        votes += 1;
                        flood += usize::from(u == 1.0);
                    }
                };
                if r > 0 {
                    vote(i - ncols);
                }
                if c > 0 {
                    vote(i - 1);
                }
                if c + 1 < ncols {
                    vote(i + 1);
                }
                if r + 1 < nrows {
                    vote(i + ncols);
                }
                let updated = match (2 * flood).cmp(&votes) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => v,
                };
                changed |= updated != v;
                next.values[i] = updated;
            }
        }
        std::mem::swap(&mut current, &mut next);
        if !changed {
            break;
        }
    }
    current
}
