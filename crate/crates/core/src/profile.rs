//! Path profile tensors: the four normalized input channels built along a link.
//!
//! A profile is an `L x W` strip aligned with the link. Row `i` lies at the
//! along-path fraction `i / (L - 1)` from the Tx, column `j` at the transverse
//! offset
//!
//! ```text
//! t_j = (2j - (W - 1)) / (W - 1) * halfwidth        (t_j = 0 when W = 1)
//! ```
//!
//! measured along the left-hand normal of the Tx->Rx direction. For odd `W`
//! the center column `(W - 1) / 2` lies exactly on the link axis; for even `W`
//! the two middle columns straddle it at `+-halfwidth / (W - 1)`.
//!
//! Channel order is fixed: direct path, distance from Tx, surface, frequency.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::links::LinkRecord;
use crate::raster::{sample_bilinear, RasterError, RasterGrid};

pub const N_CHANNELS: usize = 4;
pub const CH_DIRECT_PATH: usize = 0;
pub const CH_DISTANCE: usize = 1;
pub const CH_SURFACE: usize = 2;
pub const CH_FREQUENCY: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("invalid profile config: {0}")]
    Config(String),
    #[error("link has zero ground length")]
    ZeroLength,
    #[error("frequency {frequency} MHz outside [{f_min}, {f_max}] MHz")]
    FrequencyOutOfBand { frequency: f64, f_min: f64, f_max: f64 },
    #[error("sampling failed at profile pixel ({i}, {j}): {source}")]
    Sampling {
        i: usize,
        j: usize,
        #[source]
        source: RasterError,
    },
    #[error("profile file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProfileError {
    fn from(e: std::io::Error) -> Self {
        ProfileError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// `L`: samples along the link, Tx at row 0.
    pub length_samples: usize,
    /// `W`: samples across the link.
    pub transverse_samples: usize,
    /// Meters either side of the axis. `None` means `W / 2` DSM cells.
    pub transverse_halfwidth: Option<f64>,
    /// Height normalization ceiling, meters above the minimum terrain height.
    pub h_max: f64,
    /// Distance normalization ceiling, meters.
    pub d_max: f64,
    /// MHz.
    pub f_min: f64,
    /// MHz.
    pub f_max: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            length_samples: 256,
            transverse_samples: 64,
            transverse_halfwidth: None,
            h_max: 200.0,
            d_max: 2000.0,
            f_min: 449.0,
            f_max: 5850.0,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Config(m.to_string()));
        if self.length_samples < 2 {
            return bad("length_samples must be >= 2");
        }
        if self.transverse_samples < 1 {
            return bad("transverse_samples must be >= 1");
        }
        if let Some(hw) = self.transverse_halfwidth {
            if !(hw.is_finite() && hw >= 0.0) {
                return bad("transverse_halfwidth must be finite and >= 0");
            }
        }
        if !(self.h_max.is_finite() && self.h_max > 0.0) {
            return bad("h_max must be > 0");
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return bad("d_max must be > 0");
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max.is_finite()) {
            return bad("need 0 < f_min < f_max");
        }
        Ok(())
    }

    /// Copy with the transverse halfwidth fixed, defaulting to `W / 2` cells.
    pub fn resolved(&self, cell_size: f64) -> ProfileConfig {
        ProfileConfig {
            transverse_halfwidth: Some(
                self.transverse_halfwidth
                    .unwrap_or(self.transverse_samples as f64 / 2.0 * cell_size),
            ),
            ..self.clone()
        }
    }

    fn halfwidth(&self) -> Result<f64, ProfileError> {
        self.transverse_halfwidth
            .ok_or_else(|| ProfileError::Config("transverse_halfwidth must be resolved before use".into()))
    }

    pub fn pixels(&self) -> usize {
        self.length_samples * self.transverse_samples
    }

    /// Transverse offset of column `j`, meters.
    pub fn transverse_offset(&self, j: usize, halfwidth: f64) -> f64 {
        let w = self.transverse_samples;
        if w == 1 {
            return 0.0;
        }
        let num = 2.0 * j as f64 - (w - 1) as f64;
        num / (w - 1) as f64 * halfwidth
    }

    /// Along-path fraction of row `i`.
    pub fn along_fraction(&self, i: usize) -> f64 {
        i as f64 / (self.length_samples - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Identity,
    Reflected,
}

impl Orientation {
    pub fn toggled(self) -> Self {
        match self {
            Orientation::Identity => Orientation::Reflected,
            Orientation::Reflected => Orientation::Identity,
        }
    }
}

/// Un-normalized samples along a link: `surface` is `L x W` DSM heights,
/// `terrain` the `L` DTM heights on the axis, both meters above sea level.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatch {
    pub length: usize,
    pub width: usize,
    pub surface: Vec<f64>,
    pub terrain: Vec<f64>,
}

impl RawPatch {
    pub fn surface_at(&self, i: usize, j: usize) -> f64 {
        self.surface[i * self.width + j]
    }
}

/// Ground point of profile pixel `(i, j)`.
fn pixel_position(link: &LinkRecord, cfg: &ProfileConfig, hw: f64, i: usize, j: usize) -> (f64, f64) {
    let (dx, dy) = (link.rx_x - link.tx_x, link.rx_y - link.tx_y);
    let d = dx.hypot(dy);
    let (nx, ny) = (-dy / d, dx / d);
    let a = cfg.along_fraction(i);
    let t = cfg.transverse_offset(j, hw);
    (link.tx_x + dx * a + nx * t, link.tx_y + dy * a + ny * t)
}

pub fn extract_patch(
    dsm: &RasterGrid,
    dtm: &RasterGrid,
    link: &LinkRecord,
    cfg: &ProfileConfig,
) -> Result<RawPatch, ProfileError> {
    cfg.validate()?;
    if link.ground_distance() <= 0.0 {
        return Err(ProfileError::ZeroLength);
    }
    let cfg = cfg.resolved(dsm.cell_size());
    let hw = cfg.halfwidth()?;
    let (l, w) = (cfg.length_samples, cfg.transverse_samples);
    let mut surface = Vec::with_capacity(l * w);
    let mut terrain = Vec::with_capacity(l);
    for i in 0..l {
        for j in 0..w {
            let (x, y) = pixel_position(link, &cfg, hw, i, j);
            let h = sample_bilinear(dsm, x, y).map_err(|source| ProfileError::Sampling { i, j, source })?;
            surface.push(h);
        }
        let (dx, dy) = (link.rx_x - link.tx_x, link.rx_y - link.tx_y);
        let a = cfg.along_fraction(i);
        let (x, y) = (link.tx_x + dx * a, link.tx_y + dy * a);
        let h = sample_bilinear(dtm, x, y).map_err(|source| ProfileError::Sampling {
            i,
            j: usize::MAX,
            source,
        })?;
        terrain.push(h);
    }
    Ok(RawPatch {
        length: l,
        width: w,
        surface,
        terrain,
    })
}

/// Straight line between the two antenna tips, repeated across every column.
pub fn build_direct_path(terrain: &[f64], link: &LinkRecord, cfg: &ProfileConfig) -> Vec<f64> {
    let (l, w) = (cfg.length_samples, cfg.transverse_samples);
    debug_assert_eq!(terrain.len(), l);
    let a = terrain[0] + link.tx_height_agl;
    let b = terrain[l - 1] + link.rx_height_agl;
    let mut out = Vec::with_capacity(l * w);
    for i in 0..l {
        let v = a + (b - a) * cfg.along_fraction(i);
        out.extend(std::iter::repeat_n(v, w));
    }
    out
}

/// Horizontal distance from the Tx ground point to every pixel, meters.
pub fn build_distance_channel(link: &LinkRecord, cfg: &ProfileConfig) -> Result<Vec<f64>, ProfileError> {
    let hw = cfg.halfwidth()?;
    let (l, w) = (cfg.length_samples, cfg.transverse_samples);
    let d = link.ground_distance();
    let step = d / (l - 1) as f64;
    let mut out = Vec::with_capacity(l * w);
    for i in 0..l {
        let along = i as f64 * step;
        for j in 0..w {
            out.push(along.hypot(cfg.transverse_offset(j, hw)));
        }
    }
    Ok(out)
}

/// Log-frequency position inside `[f_min, f_max]`, constant over the strip.
pub fn build_frequency_channel(link: &LinkRecord, cfg: &ProfileConfig) -> Result<Vec<f64>, ProfileError> {
    let v = normalized_frequency(link.frequency, cfg)?;
    Ok(vec![v; cfg.pixels()])
}

pub fn normalized_frequency(frequency: f64, cfg: &ProfileConfig) -> Result<f64, ProfileError> {
    if !(frequency >= cfg.f_min && frequency <= cfg.f_max) {
        return Err(ProfileError::FrequencyOutOfBand {
            frequency,
            f_min: cfg.f_min,
            f_max: cfg.f_max,
        });
    }
    Ok((frequency.log10() - cfg.f_min.log10()) / (cfg.f_max.log10() - cfg.f_min.log10()))
}

/// `clamp(h_rel / h_max, 0, 1)`.
pub fn normalize_height(relative: f64, h_max: f64) -> f64 {
    (relative / h_max).clamp(0.0, 1.0)
}

pub fn denormalize_height(value: f64, h_max: f64) -> f64 {
    value * h_max
}

pub fn normalize_distance(d: f64, d_max: f64) -> f64 {
    (d / d_max).clamp(0.0, 1.0)
}

pub fn denormalize_distance(value: f64, d_max: f64) -> f64 {
    value * d_max
}

/// The four-channel network input plus the link it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfileTensor {
    length: usize,
    width: usize,
    /// `4 x L x W`, row-major.
    channels: Vec<f32>,
    pub link: LinkRecord,
    pub orientation: Orientation,
    /// Config the tensor was built with; the halfwidth is always resolved.
    pub config: ProfileConfig,
}

impl PathProfileTensor {
    pub fn from_parts(
        channels: Vec<f32>,
        link: LinkRecord,
        orientation: Orientation,
        config: ProfileConfig,
    ) -> Result<Self, ProfileError> {
        config.validate()?;
        config.halfwidth()?;
        let (length, width) = (config.length_samples, config.transverse_samples);
        if channels.len() != N_CHANNELS * length * width {
            return Err(ProfileError::Format(format!(
                "expected {} channel values, got {}",
                N_CHANNELS * length * width,
                channels.len()
            )));
        }
        Ok(Self {
            length,
            width,
            channels,
            link,
            orientation,
            config,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.channels
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.length * self.width;
        &self.channels[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f32 {
        self.channels[(k * self.length + i) * self.width + j]
    }
}

/// Normalizes the channels of a raw patch into a network input.
///
/// Heights are taken relative to the lowest terrain sample of the patch and
/// divided by `h_max`; distances by `d_max`. Out-of-range values are clamped
/// and counted in a warning.
pub fn assemble_profile(
    patch: &RawPatch,
    link: &LinkRecord,
    cfg: &ProfileConfig,
) -> Result<PathProfileTensor, ProfileError> {
    cfg.validate()?;
    if patch.length != cfg.length_samples || patch.width != cfg.transverse_samples {
        return Err(ProfileError::Config(format!(
            "patch is {}x{}, config expects {}x{}",
            patch.length, patch.width, cfg.length_samples, cfg.transverse_samples
        )));
    }
    let n = cfg.pixels();
    let base = patch.terrain.iter().copied().fold(f64::INFINITY, f64::min);
    let direct = build_direct_path(&patch.terrain, link, cfg);
    let distance = build_distance_channel(link, cfg)?;
    let frequency = normalized_frequency(link.frequency, cfg)?;

    let mut clamped = 0usize;
    let mut count = |raw: f64, scaled: f64| {
        if !(0.0..=1.0).contains(&raw) {
            clamped += 1;
        }
        scaled as f32
    };
    let mut channels = Vec::with_capacity(N_CHANNELS * n);
    for &h in &direct {
        let rel = (h - base) / cfg.h_max;
        channels.push(count(rel, normalize_height(h - base, cfg.h_max)));
    }
    for &d in &distance {
        channels.push(count(d / cfg.d_max, normalize_distance(d, cfg.d_max)));
    }
    for &h in &patch.surface {
        let rel = (h - base) / cfg.h_max;
        channels.push(count(rel, normalize_height(h - base, cfg.h_max)));
    }
    channels.extend(std::iter::repeat_n(frequency as f32, n));
    if clamped > 0 {
        log::warn!(
            "clamped {clamped} out-of-range values in profile for region {} band {}",
            link.region_id,
            link.band_id
        );
    }
    PathProfileTensor::from_parts(channels, link.clone(), Orientation::Identity, cfg.clone())
}

/// Extracts and assembles in one step.
pub fn profile_link(
    dsm: &RasterGrid,
    dtm: &RasterGrid,
    link: &LinkRecord,
    cfg: &ProfileConfig,
) -> Result<PathProfileTensor, ProfileError> {
    let patch = extract_patch(dsm, dtm, link, cfg)?;
    assemble_profile(&patch, link, &cfg.resolved(dsm.cell_size()))
}

pub const PROFILE_MAGIC: &[u8; 4] = b"RPPL";
pub const PROFILE_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ProfileMetadata {
    link: LinkRecord,
    orientation_tag: Orientation,
    profile_config: ProfileConfig,
}

/// Writes the `RPPL` file layout (all little-endian):
///
/// ```text
/// b"RPPL" | u16 version | u32 4 | u32 L | u32 W | f32 x 4*L*W | u32 n | n bytes JSON
/// ```
///
/// The JSON object holds `link`, `orientation_tag` and `profile_config`.
pub fn write_profile<W: Write>(mut w: W, p: &PathProfileTensor) -> Result<(), ProfileError> {
    let mut buf = Vec::with_capacity(18 + 4 * p.channels.len() + 512);
    buf.extend_from_slice(PROFILE_MAGIC);
    buf.extend_from_slice(&PROFILE_VERSION.to_le_bytes());
    for d in [N_CHANNELS, p.length, p.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &p.channels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let meta = serde_json::to_vec(&ProfileMetadata {
        link: p.link.clone(),
        orientation_tag: p.orientation,
        profile_config: p.config.clone(),
    })
    .map_err(|e| ProfileError::Format(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_profile<R: Read>(mut r: R) -> Result<PathProfileTensor, ProfileError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = crate::bytes::Cursor::new(&bytes);
    let fmt = |m: String| ProfileError::Format(m);
    if cur.take(4).map_err(fmt)? != PROFILE_MAGIC {
        return Err(ProfileError::Format("bad magic, expected RPPL".into()));
    }
    let version = cur.u16().map_err(fmt)?;
    if version != PROFILE_VERSION {
        return Err(ProfileError::Format(format!("unsupported version {version}")));
    }
    let c = cur.u32().map_err(fmt)? as usize;
    let l = cur.u32().map_err(fmt)? as usize;
    let w = cur.u32().map_err(fmt)? as usize;
    if c != N_CHANNELS {
        return Err(ProfileError::Format(format!("expected 4 channels, got {c}")));
    }
    let count = c
        .checked_mul(l)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| ProfileError::Format("dimensions overflow".into()))?;
    let channels = cur.f32s(count).map_err(fmt)?;
    let n = cur.u32().map_err(fmt)? as usize;
    let meta: ProfileMetadata = serde_json::from_slice(cur.take(n).map_err(fmt)?)
        .map_err(|e| ProfileError::Format(format!("metadata: {e}")))?;
    if !cur.is_empty() {
        return Err(ProfileError::Format("trailing bytes".into()));
    }
    if meta.profile_config.length_samples != l || meta.profile_config.transverse_samples != w {
        return Err(ProfileError::Format("metadata dimensions disagree with header".into()));
    }
    PathProfileTensor::from_parts(channels, meta.link, meta.orientation_tag, meta.profile_config)
}
