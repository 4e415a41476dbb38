use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::oracle::{oracle_path_loss, OracleError};
use super::scene::Scene;
use crate::links::LinkRecord;
use crate::raster::sample_bilinear;
use crate::seed::{derive_seed, label_hash, rng_from_seed, SeedPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "BS-to-UE")]
    BsToUe,
    #[serde(rename = "UE-to-BS")]
    UeToBs,
    #[serde(rename = "BS-to-BS")]
    BsToBs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub scenario: ScenarioKind,
    pub tx_height_agl: f64,
    pub rx_height_agl: f64,
    /// MHz.
    pub bands: Vec<f64>,
    pub links_per_region: usize,
    pub min_length_m: f64,
    pub max_length_m: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self::downlink(2000)
    }
}

impl ScenarioParams {
    /// Drive-test style downlink: 17 m base station, 1.5 m vehicle antenna,
    /// the six UK bands.
    pub fn downlink(links_per_region: usize) -> Self {
        Self {
            scenario: ScenarioKind::BsToUe,
            tx_height_agl: 17.0,
            rx_height_agl: 1.5,
            bands: vec![449.0, 915.0, 1802.0, 2659.0, 3602.0, 5850.0],
            links_per_region,
            min_length_m: 50.0,
            max_length_m: 1000.0,
        }
    }

    /// Fixed-to-fixed backhaul at 11 m on both ends, 3455 MHz.
    pub fn backhaul(links_per_region: usize) -> Self {
        Self {
            scenario: ScenarioKind::BsToBs,
            tx_height_agl: 11.0,
            rx_height_agl: 11.0,
            bands: vec![3455.0],
            links_per_region,
            min_length_m: 50.0,
            max_length_m: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Params(m.to_string()));
        if !(self.tx_height_agl > 0.0 && self.rx_height_agl > 0.0) {
            return bad("antenna heights must be > 0");
        }
        if self.bands.is_empty() || self.bands.iter().any(|&f| !(f > 0.0)) {
            return bad("bands must be a non-empty list of positive frequencies");
        }
        if !(self.min_length_m > 0.0 && self.min_length_m < self.max_length_m) {
            return bad("need 0 < min_length_m < max_length_m");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationOptions {
    /// Samples along each link used by the oracle's edge search.
    pub oracle_samples: usize,
    /// Gaussian measurement noise, dB, drawn once per link.
    pub noise_sd_db: f64,
    /// Clearance kept between any profiled point and the raster border.
    pub margin_m: f64,
    /// Antenna points must sit on open ground: DSM - DTM below this.
    pub max_endpoint_clutter_m: f64,
    /// When set, the Rx must have clutter (DSM - DTM of at least
    /// [`STREET_CLUTTER_M`]) within this many meters, like a vehicle on a
    /// street between buildings.
    pub rx_clutter_radius_m: Option<f64>,
    pub seed: u64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            oracle_samples: 256,
            noise_sd_db: 3.0,
            margin_m: 140.0,
            max_endpoint_clutter_m: 0.5,
            rx_clutter_radius_m: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("invalid scenario: {0}")]
    Params(String),
    #[error("could only place {placed} of {requested} links in region `{region}`")]
    Placement {
        region: String,
        placed: usize,
        requested: usize,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub const STREET_CLUTTER_M: f64 = 2.0;

fn band_label(f: f64) -> String {
    format!("{f}")
}

/// Places `links_per_region` links in every scene and labels them with the
/// oracle plus measurement noise. The Tx always sits at the start of the
/// link, so downlink sets carry the tall antenna at profile row 0.
pub fn generate_dataset(
    scenes: &[Scene],
    scenario: &ScenarioParams,
    options: &GenerationOptions,
) -> Result<Vec<LinkRecord>, DatasetError> {
    scenario.validate()?;
    if !(options.noise_sd_db >= 0.0) {
        return Err(DatasetError::Params("noise_sd_db must be >= 0".into()));
    }
    let noise = Normal::new(0.0, options.noise_sd_db).map_err(|e| DatasetError::Params(e.to_string()))?;
    let mut out = Vec::with_capacity(scenes.len() * scenario.links_per_region);
    for scene in scenes {
        let region = label_hash(&scene.id);
        let mut place_rng = rng_from_seed(derive_seed(options.seed, SeedPurpose::Links, &[region]));
        let mut noise_rng = rng_from_seed(derive_seed(options.seed, SeedPurpose::Noise, &[region]));
        let (x0, y0, x1, y1) = scene.dsm.sampling_extent();
        let m = options.margin_m;
        let (lo_x, hi_x, lo_y, hi_y) = (x0 + m, x1 - m, y0 + m, y1 - m);
        if !(lo_x < hi_x && lo_y < hi_y) {
            return Err(DatasetError::Placement {
                region: scene.id.clone(),
                placed: 0,
                requested: scenario.links_per_region,
            });
        }
        let open_ground = |x: f64, y: f64| -> bool {
            match (sample_bilinear(&scene.dsm, x, y), sample_bilinear(&scene.dtm, x, y)) {
                (Ok(s), Ok(t)) => s - t <= options.max_endpoint_clutter_m,
                _ => false,
            }
        };

        let cs = scene.dsm.cell_size();
        let near_clutter = |x: f64, y: f64, radius: f64| -> bool {
            let k = (radius / cs).floor() as i64;
            (-k..=k).any(|i| {
                (-k..=k).any(|j| {
                    let (dx, dy) = (i as f64 * cs, j as f64 * cs);
                    dx.hypot(dy) <= radius
                        && matches!(
                            (sample_bilinear(&scene.dsm, x + dx, y + dy), sample_bilinear(&scene.dtm, x + dx, y + dy)),
                            (Ok(s), Ok(t)) if s - t >= STREET_CLUTTER_M
                        )
                })
            })
        };

        let max_attempts = 1000 * scenario.links_per_region.max(1);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < scenario.links_per_region {
            if attempts == max_attempts {
                return Err(DatasetError::Placement {
                    region: scene.id.clone(),
                    placed,
                    requested: scenario.links_per_region,
                });
            }
            attempts += 1;
            let tx = (place_rng.gen_range(lo_x..hi_x), place_rng.gen_range(lo_y..hi_y));
            let bearing = place_rng.gen_range(0.0..std::f64::consts::TAU);
            let length = place_rng.gen_range(scenario.min_length_m..=scenario.max_length_m);
            let rx = (tx.0 + length * bearing.cos(), tx.1 + length * bearing.sin());
            if !(rx.0 >= lo_x && rx.0 <= hi_x && rx.1 >= lo_y && rx.1 <= hi_y) {
                continue;
            }
            if !open_ground(tx.0, tx.1) || !open_ground(rx.0, rx.1) {
                continue;
            }
            if let Some(r) = options.rx_clutter_radius_m {
                if !near_clutter(rx.0, rx.1, r) {
                    continue;
                }
            }
            let length = (rx.0 - tx.0).hypot(rx.1 - tx.1);
            if length < scenario.min_length_m || length > scenario.max_length_m {
                continue;
            }
            let band = scenario.bands[place_rng.gen_range(0..scenario.bands.len())];
            let mut link = LinkRecord {
                tx_x: tx.0,
                tx_y: tx.1,
                rx_x: rx.0,
                rx_y: rx.1,
                tx_height_agl: scenario.tx_height_agl,
                rx_height_agl: scenario.rx_height_agl,
                frequency: band,
                path_loss: 0.0,
                region_id: scene.id.clone(),
                band_id: band_label(band),
            };
            let clean = oracle_path_loss(&scene.dsm, &scene.dtm, &link, options.oracle_samples)?;
            let eps = if options.noise_sd_db > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            link.path_loss = clean + eps;
            out.push(link);
            placed += 1;
        }
    }
    Ok(out)
}
