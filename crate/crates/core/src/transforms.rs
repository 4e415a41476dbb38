//! Identity/reflection transforms and reflection-based dataset augmentation.
//!
//! Reflecting a profile rotates the strip by 180 degrees, which is the same
//! as exchanging Tx and Rx while keeping the environment in place. The
//! distance channel is rebuilt for the new Tx rather than rotated, so it
//! keeps meaning "distance from the Tx".

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::links::LinkRecord;
use crate::profile::{
    build_distance_channel, PathProfileTensor, ProfileError, RawPatch, CH_DIRECT_PATH, CH_DISTANCE, CH_FREQUENCY,
    CH_SURFACE,
};
use crate::seed::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("region `{region}` has {available} samples, cannot reflect {requested}")]
    NotEnoughSamples {
        region: String,
        available: usize,
        requested: usize,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

fn rotate_into(dst: &mut [f32], src: &[f32], length: usize, width: usize) {
    for i in 0..length {
        for j in 0..width {
            dst[i * width + j] = src[(length - 1 - i) * width + (width - 1 - j)];
        }
    }
}

/// Tx/Rx swap of a profile (180-degree rotation of the strip).
pub fn reflect(profile: &PathProfileTensor) -> PathProfileTensor {
    let (l, w) = (profile.length(), profile.width());
    let n = l * w;
    let link = profile.link.swapped();
    let mut channels = vec![0f32; profile.values().len()];
    for k in [CH_DIRECT_PATH, CH_SURFACE] {
        rotate_into(&mut channels[k * n..(k + 1) * n], profile.channel(k), l, w);
    }
    // the tensor config always carries a resolved halfwidth
    let distance =
        build_distance_channel(&link, &profile.config).expect("profile tensors always carry a resolved config");
    let d_max = profile.config.d_max;
    for (dst, d) in channels[CH_DISTANCE * n..(CH_DISTANCE + 1) * n]
        .iter_mut()
        .zip(distance)
    {
        *dst = crate::profile::normalize_distance(d, d_max) as f32;
    }
    channels[CH_FREQUENCY * n..].copy_from_slice(profile.channel(CH_FREQUENCY));
    PathProfileTensor::from_parts(channels, link, profile.orientation.toggled(), profile.config.clone())
        .expect("reflection preserves tensor shape")
}

/// Reflection applied before normalization: rotated surface, reversed
/// terrain, swapped link.
pub fn reflect_raw(patch: &RawPatch, link: &LinkRecord) -> (RawPatch, LinkRecord) {
    let (l, w) = (patch.length, patch.width);
    let mut surface = vec![0.0; l * w];
    for i in 0..l {
        for j in 0..w {
            surface[i * w + j] = patch.surface[(l - 1 - i) * w + (w - 1 - j)];
        }
    }
    let terrain = patch.terrain.iter().rev().copied().collect();
    (
        RawPatch {
            length: l,
            width: w,
            surface,
            terrain,
        },
        link.swapped(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    #[default]
    UniformRandom,
    PerBandStratified,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    /// Reflected copies added per region.
    pub n_per_region: usize,
    pub selection_seed: u64,
    #[serde(default)]
    pub selection_scope: SelectionScope,
}

/// Regions in order of first appearance, each with the indices of its samples.
pub fn group_by_region<P: Borrow<PathProfileTensor>>(samples: &[P]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (idx, s) in samples.iter().enumerate() {
        let s = s.borrow();
        match groups.iter_mut().find(|(r, _)| *r == s.link.region_id) {
            Some((_, v)) => v.push(idx),
            None => groups.push((s.link.region_id.clone(), vec![idx])),
        }
    }
    groups
}

/// Indices (into `samples`) chosen for reflection, region by region.
pub fn select_for_augmentation<P: Borrow<PathProfileTensor>>(
    samples: &[P],
    plan: &AugmentationPlan,
) -> Result<Vec<usize>, AugmentError> {
    let mut rng = rng_from_seed(plan.selection_seed);
    let mut picked = Vec::new();
    if plan.n_per_region == 0 {
        return Ok(picked);
    }
    for (region, idx) in group_by_region(samples) {
        if idx.len() < plan.n_per_region {
            return Err(AugmentError::NotEnoughSamples {
                region,
                available: idx.len(),
                requested: plan.n_per_region,
            });
        }
        match plan.selection_scope {
            SelectionScope::UniformRandom => {
                picked.extend(idx.choose_multiple(&mut rng, plan.n_per_region).copied());
            }
            SelectionScope::PerBandStratified => {
                let mut bands: Vec<(String, Vec<usize>)> = Vec::new();
                for &i in &idx {
                    let band = &samples[i].borrow().link.band_id;
                    match bands.iter_mut().find(|(b, _)| b == band) {
                        Some((_, v)) => v.push(i),
                        None => bands.push((band.clone(), vec![i])),
                    }
                }
                bands.sort_by(|a, b| a.0.cmp(&b.0));
                let quota = stratified_quota(
                    &bands.iter().map(|(_, v)| v.len()).collect::<Vec<_>>(),
                    plan.n_per_region,
                );
                for ((_, members), q) in bands.iter().zip(quota) {
                    picked.extend(members.choose_multiple(&mut rng, q).copied());
                }
            }
        }
    }
    Ok(picked)
}

/// Splits `n` as evenly as possible over bands of the given sizes, passing
/// any share a small band cannot fill on to the others.
fn stratified_quota(sizes: &[usize], n: usize) -> Vec<usize> {
    let mut quota = vec![0usize; sizes.len()];
    let mut left = n;
    while left > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&b| quota[b] < sizes[b]).collect();
        if open.is_empty() {
            break;
        }
        let share = (left / open.len()).max(1);
        for b in open {
            let add = share.min(sizes[b] - quota[b]).min(left);
            quota[b] += add;
            left -= add;
            if left == 0 {
                break;
            }
        }
    }
    quota
}

/// Originals (order preserved) followed by `n_per_region` reflected copies
/// per region. The input is never modified.
pub fn augment_dataset(
    samples: &[PathProfileTensor],
    plan: &AugmentationPlan,
) -> Result<Vec<PathProfileTensor>, AugmentError> {
    let picked = select_for_augmentation(samples, plan)?;
    let mut out = Vec::with_capacity(samples.len() + picked.len());
    out.extend_from_slice(samples);
    out.extend(picked.iter().map(|&i| reflect(&samples[i])));
    Ok(out)
}
