//! Free-space loss plus Epstein-Peterson multiple knife-edge diffraction.
//!
//! The loss is a function of the unordered pair of antenna positions: the
//! link is always evaluated in a canonical direction, so swapping Tx and Rx
//! reproduces the same floating-point result bit for bit.

use std::cmp::Ordering;

use thiserror::Error;

use crate::links::LinkRecord;
use crate::raster::{sample_bilinear, RasterError, RasterGrid};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("link has zero length")]
    ZeroLength,
    #[error("oracle needs at least 3 samples along the link")]
    TooFewSamples,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// `32.44 + 20 log10(d_km) + 20 log10(f_MHz)`.
pub fn free_space_loss_db(distance_m: f64, frequency_mhz: f64) -> f64 {
    32.44 + 20.0 * (distance_m / 1000.0).log10() + 20.0 * frequency_mhz.log10()
}

/// Single knife-edge loss `J(v)`, zero for `v <= -0.78`.
pub fn knife_edge_loss_db(v: f64) -> f64 {
    if v <= -0.78 {
        return 0.0;
    }
    let a = v - 0.1;
    6.9 + 20.0 * ((a * a + 1.0).sqrt() + a).log10()
}

/// Diffraction loss over a sampled path.
///
/// `distances` and `heights` describe the obstacle profile (the first and
/// last entries are the antenna ground points and are never edges);
/// `tip_a`/`tip_b` are the absolute antenna heights at either end.
///
/// Edges are the interior local maxima of the clearance deficit
/// `height - LOS` that touch or cross the line of sight. Each edge is
/// evaluated against the chord joining its neighbouring edges (or antenna
/// tips), `v = h * sqrt(2 (d1 + d2) / (lambda d1 d2))`.
pub fn diffraction_loss_db(distances: &[f64], heights: &[f64], tip_a: f64, tip_b: f64, wavelength: f64) -> f64 {
    let n = distances.len();
    if n < 3 {
        return 0.0;
    }
    let total = distances[n - 1] - distances[0];
    if total <= 0.0 {
        return 0.0;
    }
    let excess: Vec<f64> = distances
        .iter()
        .zip(heights)
        .map(|(&d, &h)| h - (tip_a + (tip_b - tip_a) * (d - distances[0]) / total))
        .collect();

    let mut nodes: Vec<(f64, f64)> = vec![(distances[0], tip_a)];
    for i in 1..n - 1 {
        let e = excess[i];
        let left = if i == 1 { f64::NEG_INFINITY } else { excess[i - 1] };
        let right = if i == n - 2 { f64::NEG_INFINITY } else { excess[i + 1] };
        if e >= 0.0 && e >= left && e > right {
            nodes.push((distances[i], heights[i]));
        }
    }
    nodes.push((distances[n - 1], tip_b));

    let mut loss = 0.0;
    for w in nodes.windows(3) {
        let [(x0, z0), (x1, z1), (x2, z2)] = [w[0], w[1], w[2]];
        let d1 = x1 - x0;
        let d2 = x2 - x1;
        if d1 <= 0.0 || d2 <= 0.0 {
            continue;
        }
        let chord = z0 + (z2 - z0) * d1 / (d1 + d2);
        let h = z1 - chord;
        let v = h * (2.0 * (d1 + d2) / (wavelength * d1 * d2)).sqrt();
        loss += knife_edge_loss_db(v);
    }
    loss
}

fn endpoint_order(link: &LinkRecord) -> Ordering {
    link.tx_x
        .total_cmp(&link.rx_x)
        .then(link.tx_y.total_cmp(&link.rx_y))
        .then(link.tx_height_agl.total_cmp(&link.rx_height_agl))
}

/// Synthetic path loss of `link`, dB, sampling the DSM at `samples` evenly
/// spaced points on the link axis.
pub fn oracle_path_loss(
    dsm: &RasterGrid,
    dtm: &RasterGrid,
    link: &LinkRecord,
    samples: usize,
) -> Result<f64, OracleError> {
    if samples < 3 {
        return Err(OracleError::TooFewSamples);
    }
    let canonical;
    let link = if endpoint_order(link) == Ordering::Greater {
        canonical = link.swapped();
        &canonical
    } else {
        link
    };

    let ground_a = sample_bilinear(dtm, link.tx_x, link.tx_y)?;
    let ground_b = sample_bilinear(dtm, link.rx_x, link.rx_y)?;
    let tip_a = ground_a + link.tx_height_agl;
    let tip_b = ground_b + link.rx_height_agl;
    let d2 = link.ground_distance();
    let d3 = d2.hypot(tip_b - tip_a);
    if !(d3 > 0.0) {
        return Err(OracleError::ZeroLength);
    }
    let fspl = free_space_loss_db(d3, link.frequency);
    if d2 == 0.0 {
        return Ok(fspl);
    }

    let (dx, dy) = (link.rx_x - link.tx_x, link.rx_y - link.tx_y);
    let mut distances = Vec::with_capacity(samples);
    let mut heights = Vec::with_capacity(samples);
    for i in 0..samples {
        let a = i as f64 / (samples - 1) as f64;
        heights.push(sample_bilinear(dsm, link.tx_x + dx * a, link.tx_y + dy * a)?);
        distances.push(a * d2);
    }
    let wavelength = SPEED_OF_LIGHT / (link.frequency * 1e6);
    Ok(fspl + diffraction_loss_db(&distances, &heights, tip_a, tip_b, wavelength))
}
