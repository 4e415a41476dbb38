//! `gen`, `extract` and `augment`, plus profile directory helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use pathloss_core::links::{parse_link_csv, write_link_csv, LinkRecord};
use pathloss_core::profile::{profile_link, read_profile, write_profile, PathProfileTensor, ProfileConfig};
use pathloss_core::raster::{parse_ascii_grid, write_ascii_grid, RasterGrid};
use pathloss_core::seed::{derive_seed, label_hash, SeedPurpose};
use pathloss_core::synthetic::{generate_dataset, generate_scene, GenerationOptions, ScenarioParams, SceneParams};
use pathloss_core::transforms::{reflect, select_for_augmentation, AugmentationPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub regions: Vec<String>,
    /// Base seed; scene and link seeds are derived from it per region.
    pub seed: u64,
    /// Shared by all regions; `scene.seed` is replaced per region.
    pub scene: SceneParams,
    pub scenario: ScenarioParams,
    /// `generation.seed` is replaced by `seed`.
    pub generation: GenerationOptions,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            regions: (0..6).map(|k| format!("region{k}")).collect(),
            seed: 0,
            scene: SceneParams::default(),
            scenario: ScenarioParams::downlink(2000),
            generation: GenerationOptions::default(),
        }
    }
}

pub const GEN_DOCS: &[(&str, &str)] = &[
    ("regions", "region ids, one scene each"),
    ("seed", "base seed for scenes, link placement and noise"),
    ("scene.extent_m", "side of each square region, m"),
    ("scene.cell_size_m", "raster cell size, m"),
    ("scene.base_elevation_m", "mean ground height, m"),
    ("scene.roughness_amplitude_m", "terrain relief amplitude, m"),
    ("scene.roughness_correlation_m", "terrain feature spacing, m"),
    ("scene.building_density_per_km2", "buildings per km2"),
    ("scene.building_height_m", "[min, max] building height, m"),
    ("scene.building_footprint_m", "[min, max] building side, m"),
    ("scene.tree_density_per_km2", "trees per km2"),
    ("scene.tree_height_m", "[min, max] canopy height, m"),
    ("scene.tree_radius_m", "[min, max] canopy radius, m"),
    ("scene.seed", "ignored; derived from `seed` per region"),
    ("scenario.scenario", "BS-to-UE, UE-to-BS or BS-to-BS"),
    ("scenario.tx_height_agl", "Tx antenna height above ground, m"),
    ("scenario.rx_height_agl", "Rx antenna height above ground, m"),
    ("scenario.bands", "carrier frequencies, MHz; one drawn per link"),
    ("scenario.links_per_region", "links placed in every region"),
    ("scenario.min_length_m", "shortest link, m"),
    ("scenario.max_length_m", "longest link, m"),
    ("generation.oracle_samples", "points along each link searched for edges"),
    ("generation.noise_sd_db", "Gaussian label noise, dB"),
    ("generation.margin_m", "clearance kept from the raster border, m"),
    (
        "generation.max_endpoint_clutter_m",
        "antennas only where DSM - DTM is below this, m",
    ),
    ("generation.seed", "ignored; replaced by `seed`"),
];

#[derive(Debug, Serialize, Deserialize)]
struct GenRegion {
    id: String,
    scene_seed: u64,
    dsm: String,
    dtm: String,
    links: String,
    link_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenManifest {
    config: GenConfig,
    link_seed: u64,
    regions: Vec<GenRegion>,
}

pub fn gen(cfg: &GenConfig, out: &Path) -> Result<()> {
    if cfg.regions.is_empty() {
        bail!("`regions` is empty");
    }
    fs::create_dir_all(out.join("rasters"))?;
    fs::create_dir_all(out.join("links"))?;
    let options = GenerationOptions {
        seed: cfg.seed,
        ..cfg.generation.clone()
    };
    let mut scenes = Vec::new();
    let mut regions = Vec::new();
    for id in &cfg.regions {
        let scene_seed = derive_seed(cfg.seed, SeedPurpose::Scene, &[label_hash(id)]);
        let params = SceneParams {
            seed: scene_seed,
            ..cfg.scene.clone()
        };
        let scene = generate_scene(id, &params).with_context(|| format!("region {id}"))?;
        let dsm = format!("rasters/{id}_dsm.asc");
        let dtm = format!("rasters/{id}_dtm.asc");
        fs::write(out.join(&dsm), write_ascii_grid(&scene.dsm))?;
        fs::write(out.join(&dtm), write_ascii_grid(&scene.dtm))?;
        regions.push(GenRegion {
            id: id.clone(),
            scene_seed,
            dsm,
            dtm,
            links: format!("links/{id}.csv"),
            link_count: 0,
        });
        scenes.push(scene);
    }
    let links = generate_dataset(&scenes, &cfg.scenario, &options)?;
    for r in &mut regions {
        let mine: Vec<LinkRecord> = links.iter().filter(|l| l.region_id == r.id).cloned().collect();
        r.link_count = mine.len();
        let f = fs::File::create(out.join(&r.links))?;
        write_link_csv(f, &mine)?;
    }
    let manifest = GenManifest {
        config: cfg.clone(),
        link_seed: derive_seed(cfg.seed, SeedPurpose::Links, &[]),
        regions,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    log::info!(
        "wrote {} regions, {} links to {}",
        cfg.regions.len(),
        links.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub profile: ProfileConfig,
}

pub const PROFILE_DOCS: &[(&str, &str)] = &[
    ("profile.length_samples", "L, samples along the link"),
    ("profile.transverse_samples", "W, samples across the link"),
    (
        "profile.transverse_halfwidth",
        "m either side of the axis; null means W/2 cells",
    ),
    ("profile.h_max", "height normalization ceiling, m"),
    ("profile.d_max", "distance normalization ceiling, m"),
    ("profile.f_min", "lowest accepted frequency, MHz"),
    ("profile.f_max", "highest accepted frequency, MHz"),
];

#[derive(Debug, Serialize)]
pub struct ExtractFailure {
    pub file: String,
    pub line: Option<u64>,
    pub reason: String,
}

fn load_raster(path: &Path) -> Result<RasterGrid> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_ascii_grid(std::io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Profiles every link in `links`; rasters are looked up as
/// `<rasters>/<region>_dsm.asc` and `_dtm.asc`. Returns the failures.
pub fn extract(cfg: &ExtractConfig, rasters: &Path, links: &[PathBuf], out: &Path) -> Result<Vec<ExtractFailure>> {
    cfg.profile.validate()?;
    let mut failures = Vec::new();
    let mut grids: BTreeMap<String, Option<(RasterGrid, RasterGrid)>> = BTreeMap::new();
    let mut written = 0usize;
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    for file in links {
        let name = file.display().to_string();
        let f = fs::File::open(file).with_context(|| format!("opening {name}"))?;
        let table = parse_link_csv(f).with_context(|| format!("reading {name}"))?;
        for e in table.errors {
            failures.push(ExtractFailure {
                file: name.clone(),
                line: Some(e.line),
                reason: e.message,
            });
        }
        for (k, link) in table.records.iter().enumerate() {
            let grids = grids.entry(link.region_id.clone()).or_insert_with(|| {
                let dsm = load_raster(&rasters.join(format!("{}_dsm.asc", link.region_id)));
                let dtm = load_raster(&rasters.join(format!("{}_dtm.asc", link.region_id)));
                match (dsm, dtm) {
                    (Ok(a), Ok(b)) => Some((a, b)),
                    (Err(e), _) | (_, Err(e)) => {
                        log::error!("region {}: {e:#}", link.region_id);
                        None
                    }
                }
            });
            let Some((dsm, dtm)) = grids else {
                failures.push(ExtractFailure {
                    file: name.clone(),
                    line: Some(k as u64 + 2),
                    reason: format!("rasters for region {} are missing or unreadable", link.region_id),
                });
                continue;
            };
            match profile_link(dsm, dtm, link, &cfg.profile) {
                Ok(p) => {
                    let idx = counters.entry(link.region_id.clone()).or_default();
                    let dir = out.join(&link.region_id);
                    fs::create_dir_all(&dir)?;
                    let f = fs::File::create(dir.join(format!("{:06}.rppl", *idx)))?;
                    write_profile(std::io::BufWriter::new(f), &p)?;
                    *idx += 1;
                    written += 1;
                }
                Err(e) => failures.push(ExtractFailure {
                    file: name.clone(),
                    line: Some(k as u64 + 2),
                    reason: e.to_string(),
                }),
            }
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("failures.json"), serde_json::to_vec_pretty(&failures)?)?;
    log::info!("extracted {written} profiles, {} failures", failures.len());
    Ok(failures)
}

/// Every `.rppl` file under `dir`, in path order.
pub fn profile_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("profile directory {} does not exist", dir.display());
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "rppl") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

pub fn load_profiles(dir: &Path) -> Result<Vec<PathProfileTensor>> {
    profile_files(dir)?
        .iter()
        .map(|p| {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_profile(std::io::BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

pub const AUGMENT_DOCS: &[(&str, &str)] = &[
    ("n_per_region", "reflected copies added per region"),
    ("selection_seed", "seed for choosing which samples to reflect"),
    ("selection_scope", "uniform-random or per-band-stratified"),
];

/// Writes a reflected copy of every selected profile under `out`, keeping
/// the relative path with a `.reflected.rppl` suffix.
pub fn augment(plan: &AugmentationPlan, profiles: &Path, out: &Path) -> Result<usize> {
    let files = profile_files(profiles)?;
    let tensors = load_profiles(profiles)?;
    let picked = select_for_augmentation(&tensors, plan)?;
    for &i in &picked {
        let rel = files[i].strip_prefix(profiles).unwrap_or(&files[i]);
        let target = out.join(rel).with_extension("reflected.rppl");
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let f = fs::File::create(&target)?;
        write_profile(std::io::BufWriter::new(f), &reflect(&tensors[i]))?;
    }
    Ok(picked.len())
}
