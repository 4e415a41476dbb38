//! A desktop-sized synthetic stand-in for the drive test campaign.

use pathloss_core::experiment::{Datasets, ExperimentConfig, TrainingConfig};
use pathloss_core::links::LinkRecord;
use pathloss_core::nn::{ConvBlockConfig, ModelConfig};
use pathloss_core::profile::{profile_link, PathProfileTensor, ProfileConfig};
use pathloss_core::seed::{derive_seed, SeedPurpose};
use pathloss_core::synthetic::{
    generate_dataset, generate_scene, GenerationOptions, ScenarioParams, Scene, SceneParams,
};

pub const REGIONS: usize = 6;
pub const BASE_SEED: u64 = 11;

pub fn region_ids() -> Vec<String> {
    (0..REGIONS).map(|k| format!("region{k}")).collect()
}

pub fn scenes(base_seed: u64) -> Vec<Scene> {
    region_ids()
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let params = SceneParams {
                // denser and sparser towns so regions differ
                building_density_per_km2: 60.0 + 30.0 * k as f64,
                tree_density_per_km2: 200.0 - 20.0 * k as f64,
                seed: derive_seed(base_seed, SeedPurpose::Scene, &[k as u64]),
                ..SceneParams::default()
            };
            generate_scene(id, &params).unwrap()
        })
        .collect()
}

pub fn profile_config() -> ProfileConfig {
    ProfileConfig {
        length_samples: 64,
        transverse_samples: 16,
        ..ProfileConfig::default()
    }
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        input_shape: [4, 64, 16],
        conv_blocks: [8, 16, 32].into_iter().map(ConvBlockConfig::same3x3).collect(),
        dense: vec![32],
        output_range_db: [40.0, 180.0],
    }
}

fn profiles(scenes: &[Scene], links: &[LinkRecord]) -> Vec<PathProfileTensor> {
    let cfg = profile_config();
    links
        .iter()
        .map(|l| {
            let s = scenes.iter().find(|s| s.id == l.region_id).unwrap();
            profile_link(&s.dsm, &s.dtm, l, &cfg).unwrap()
        })
        .collect()
}

/// `per_region` downlink links in every region, receivers on streets, and
/// `backhaul_links` mast-to-mast links in a separate seventh region.
pub fn datasets(base_seed: u64, per_region: usize, backhaul_links: usize) -> Datasets {
    let scenes = scenes(base_seed);
    let street = GenerationOptions {
        rx_clutter_radius_m: Some(10.0),
        seed: base_seed,
        ..GenerationOptions::default()
    };
    let mut downlink = Vec::new();
    for (k, scene) in scenes.iter().enumerate() {
        let mut scenario = ScenarioParams::downlink(per_region);
        // one drive test used a 25 m mast
        if k == REGIONS - 1 {
            scenario.tx_height_agl = 25.0;
        }
        downlink.extend(generate_dataset(std::slice::from_ref(scene), &scenario, &street).unwrap());
    }
    let mut backhaul = Vec::new();
    if backhaul_links > 0 {
        let params = SceneParams {
            seed: derive_seed(base_seed, SeedPurpose::Scene, &[REGIONS as u64]),
            ..SceneParams::default()
        };
        let scene = generate_scene("backhaul", &params).unwrap();
        let options = GenerationOptions {
            seed: base_seed,
            ..GenerationOptions::default()
        };
        let links = generate_dataset(
            std::slice::from_ref(&scene),
            &ScenarioParams::backhaul(backhaul_links),
            &options,
        )
        .unwrap();
        backhaul = profiles(&[scene], &links);
    }
    Datasets {
        downlink: profiles(&scenes, &downlink),
        backhaul,
    }
}

pub fn experiment_config(base_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        regions: region_ids(),
        holdouts: vec!["region0".into()],
        train_fraction: 0.8,
        samples_per_band_per_region: None,
        augmentation_n: vec![0, 80, 500],
        repeats: 3,
        base_seed,
        training: TrainingConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 2e-3,
            patience: 10,
        },
        profile: profile_config(),
        model: model_config(),
        ..ExperimentConfig::default()
    }
}
