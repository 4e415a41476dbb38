use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{RasterError, RasterGrid};
use crate::seed::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Parameters of one procedural region. Heights are meters; densities are
/// objects per square kilometer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Side of the square region.
    pub extent_m: f64,
    pub cell_size_m: f64,
    pub base_elevation_m: f64,
    pub roughness_amplitude_m: f64,
    pub roughness_correlation_m: f64,
    pub building_density_per_km2: f64,
    pub building_height_m: (f64, f64),
    pub building_footprint_m: (f64, f64),
    pub tree_density_per_km2: f64,
    pub tree_height_m: (f64, f64),
    pub tree_radius_m: (f64, f64),
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent_m: 1600.0,
            cell_size_m: 4.0,
            base_elevation_m: 50.0,
            roughness_amplitude_m: 15.0,
            roughness_correlation_m: 400.0,
            building_density_per_km2: 120.0,
            building_height_m: (6.0, 24.0),
            building_footprint_m: (10.0, 30.0),
            tree_density_per_km2: 150.0,
            tree_height_m: (5.0, 14.0),
            tree_radius_m: (2.0, 5.0),
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn cells(&self) -> usize {
        (self.extent_m / self.cell_size_m).round() as usize
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Params(m.to_string()));
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return bad("cell_size_m must be > 0");
        }
        if !self.extent_m.is_finite() || self.cells() < 64 {
            return bad("extent_m / cell_size_m must give at least 64x64 cells");
        }
        if self.cells() > 20_000 {
            return bad("scene larger than 20000x20000 cells");
        }
        if !(self.base_elevation_m >= 0.0 && self.roughness_amplitude_m >= 0.0) {
            return bad("elevations and roughness must be >= 0");
        }
        if self.roughness_amplitude_m > 0.0 && !(self.roughness_correlation_m > 0.0) {
            return bad("roughness_correlation_m must be > 0");
        }
        if !(self.building_density_per_km2 >= 0.0 && self.tree_density_per_km2 >= 0.0) {
            return bad("densities must be >= 0");
        }
        for (name, (lo, hi)) in [
            ("building_height_m", self.building_height_m),
            ("building_footprint_m", self.building_footprint_m),
            ("tree_height_m", self.tree_height_m),
            ("tree_radius_m", self.tree_radius_m),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(SceneError::Params(format!("{name} must satisfy 0 <= min <= max")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub dtm: RasterGrid,
    pub dsm: RasterGrid,
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Bare-earth value noise on a lattice with spacing `correlation`.
fn terrain(params: &SceneParams, rng: &mut impl Rng) -> Vec<f64> {
    let n = params.cells();
    let base = params.base_elevation_m;
    if params.roughness_amplitude_m == 0.0 {
        return vec![base; n * n];
    }
    let spacing = params.roughness_correlation_m / params.cell_size_m;
    let lattice = (n as f64 / spacing).ceil() as usize + 2;
    let knots: Vec<f64> = (0..lattice * lattice).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        let fy = row as f64 / spacing;
        let (ky, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for col in 0..n {
            let fx = col as f64 / spacing;
            let (kx, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let k = |x: usize, y: usize| knots[y * lattice + x];
            let top = k(kx, ky) + (k(kx + 1, ky) - k(kx, ky)) * tx;
            let bottom = k(kx, ky + 1) + (k(kx + 1, ky + 1) - k(kx, ky + 1)) * tx;
            let v = base + params.roughness_amplitude_m * (top + (bottom - top) * ty);
            out.push(v.max(0.0));
        }
    }
    out
}

/// Builds the bare-earth DTM and the DSM (DTM plus flat-roofed buildings and
/// round tree canopies). Pure function of `params`.
pub fn generate_scene(id: &str, params: &SceneParams) -> Result<Scene, SceneError> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    let n = params.cells();
    let cs = params.cell_size_m;
    let ground = terrain(params, &mut rng);
    let mut surface = ground.clone();
    let area_km2 = (n as f64 * cs / 1000.0).powi(2);

    let cell_range = |lo: f64, hi: f64| -> std::ops::Range<usize> {
        let a = (lo / cs - 0.5).ceil().max(0.0) as usize;
        let b = ((hi / cs - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        a.min(b)..b
    };

    let buildings = (params.building_density_per_km2 * area_km2).round() as usize;
    for _ in 0..buildings {
        let (cx, cy) = (rng.gen_range(0.0..n as f64 * cs), rng.gen_range(0.0..n as f64 * cs));
        let w = uniform(&mut rng, params.building_footprint_m);
        let d = uniform(&mut rng, params.building_footprint_m);
        let h = uniform(&mut rng, params.building_height_m);
        for row_b in cell_range(cy - d / 2.0, cy + d / 2.0) {
            for col in cell_range(cx - w / 2.0, cx + w / 2.0) {
                let idx = (n - 1 - row_b) * n + col;
                surface[idx] = surface[idx].max(ground[idx] + h);
            }
        }
    }

    let trees = (params.tree_density_per_km2 * area_km2).round() as usize;
    for _ in 0..trees {
        let (cx, cy) = (rng.gen_range(0.0..n as f64 * cs), rng.gen_range(0.0..n as f64 * cs));
        let r = uniform(&mut rng, params.tree_radius_m);
        let h = uniform(&mut rng, params.tree_height_m);
        for row_b in cell_range(cy - r, cy + r) {
            for col in cell_range(cx - r, cx + r) {
                let (x, y) = ((col as f64 + 0.5) * cs, (row_b as f64 + 0.5) * cs);
                if (x - cx).hypot(y - cy) <= r {
                    let idx = (n - 1 - row_b) * n + col;
                    surface[idx] = surface[idx].max(ground[idx] + h);
                }
            }
        }
    }

    Ok(Scene {
        id: id.to_string(),
        dtm: RasterGrid::new(n, n, 0.0, 0.0, cs, None, ground)?,
        dsm: RasterGrid::new(n, n, 0.0, 0.0, cs, None, surface)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> SceneParams {
        SceneParams {
            extent_m: 400.0,
            cell_size_m: 4.0,
            seed,
            building_density_per_km2: 400.0,
            tree_density_per_km2: 400.0,
            roughness_correlation_m: 100.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn degenerate_params_give_flat_equal_rasters() {
        let p = SceneParams {
            extent_m: 256.0,
            cell_size_m: 4.0,
            roughness_amplitude_m: 0.0,
            building_density_per_km2: 0.0,
            tree_density_per_km2: 0.0,
            ..SceneParams::default()
        };
        let s = generate_scene("flat", &p).unwrap();
        assert_eq!(s.dsm, s.dtm);
        assert!(s.dtm.heights().iter().all(|&h| h == p.base_elevation_m));
        assert_eq!(s.dtm.n_cols(), 64);
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene("a", &small(3)).unwrap();
        let b = generate_scene("a", &small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene("a", &small(4)).unwrap();
        assert_ne!(a.dsm, c.dsm);
    }

    #[test]
    fn clutter_is_present() {
        let s = generate_scene("a", &small(1)).unwrap();
        let raised = s
            .dsm
            .heights()
            .iter()
            .zip(s.dtm.heights())
            .filter(|(a, b)| *a > *b)
            .count();
        assert!(raised > 100, "{raised}");
    }

    #[test]
    fn too_small_scene_is_rejected() {
        let p = SceneParams {
            extent_m: 100.0,
            cell_size_m: 4.0,
            ..SceneParams::default()
        };
        assert!(generate_scene("a", &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn surface_never_below_terrain(seed in any::<u64>(), amp in 0.0f64..40.0, dens in 0.0f64..800.0) {
            let p = SceneParams { roughness_amplitude_m: amp, building_density_per_km2: dens, ..small(seed) };
            let s = generate_scene("p", &p).unwrap();
            for (a, b) in s.dsm.heights().iter().zip(s.dtm.heights()) {
                prop_assert!(a >= b && *b >= 0.0);
            }
        }
    }
}
