use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::conv_output_size;
use super::graph::{Graph, Var};
use super::{NnError, Tensor};
use crate::profile::PathProfileTensor;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    /// `[height, width]`.
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
}

impl ConvBlockConfig {
    pub fn same3x3(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: [3, 3],
            stride: 1,
            padding: 1,
        }
    }
}

/// Conv blocks (conv -> ReLU -> 2x2 max pool), global average pooling, then
/// dense layers with ReLU between them and a single output unit. The output
/// unit is mapped affinely onto `output_range_db`, so a raw value of 0 means
/// the middle of the range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[channels, length, width]`.
    pub input_shape: [usize; 3],
    pub conv_blocks: Vec<ConvBlockConfig>,
    /// Hidden dense widths after pooling; the scalar output layer is implied.
    pub dense: Vec<usize>,
    pub output_range_db: [f32; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [4, 256, 64],
            conv_blocks: [16, 32, 64, 64].into_iter().map(ConvBlockConfig::same3x3).collect(),
            dense: vec![64],
            output_range_db: [40.0, 180.0],
        }
    }
}

impl ModelConfig {
    pub fn with_input(mut self, length: usize, width: usize) -> Self {
        self.input_shape = [4, length, width];
        self
    }

    /// Parameter names and shapes in registration order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::Config("input dimensions must be positive".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(NnError::Config("at least one conv block is required".into()));
        }
        let [lo, hi] = self.output_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(NnError::Config(
                "output_range_db must be [low, high] with low < high".into(),
            ));
        }
        let mut shapes = Vec::new();
        for (k, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(NnError::Config(format!("conv block {k} has no output channels")));
            }
            let oh = conv_output_size(h, b.kernel[0], b.stride, b.padding);
            let ow = conv_output_size(w, b.kernel[1], b.stride, b.padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(NnError::Config(format!(
                    "conv block {k}: kernel {:?} does not fit a {h}x{w} input",
                    b.kernel
                )));
            };
            if oh < 2 || ow < 2 {
                return Err(NnError::Config(format!(
                    "conv block {k}: {oh}x{ow} output is too small to pool"
                )));
            }
            shapes.push((
                format!("conv{k}.weight"),
                vec![b.out_channels, c, b.kernel[0], b.kernel[1]],
            ));
            shapes.push((format!("conv{k}.bias"), vec![b.out_channels]));
            c = b.out_channels;
            h = oh / 2;
            w = ow / 2;
        }
        let mut features = c;
        for (k, &width) in self.dense.iter().enumerate() {
            if width == 0 {
                return Err(NnError::Config(format!("dense layer {k} has zero width")));
            }
            shapes.push((format!("dense{k}.weight"), vec![features, width]));
            shapes.push((format!("dense{k}.bias"), vec![width]));
            features = width;
        }
        shapes.push(("out.weight".into(), vec![features, 1]));
        shapes.push(("out.bias".into(), vec![1]));
        Ok(shapes)
    }

    /// Output mapping `db = shift + scale * raw`.
    pub fn output_affine(&self) -> (f32, f32) {
        let [lo, hi] = self.output_range_db;
        ((hi - lo) / 2.0, (hi + lo) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub init: InitRecord,
}

impl ModelParams {
    /// Fan-in scaled uniform weights: `U(-sqrt(6/fan_in), sqrt(6/fan_in))` for
    /// layers feeding a ReLU, `U(-sqrt(3/fan_in), ..)` for the output unit.
    /// Biases start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        let shapes = config.parameter_shapes()?;
        let mut rng = rng_from_seed(seed);
        let tensors = shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let gain = if name.starts_with("out.") { 3.0 } else { 6.0 };
                    let bound = (gain / fan_in as f64).sqrt() as f32;
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape product")
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
            init: InitRecord {
                scheme: "fan-in-uniform".into(),
                seed,
            },
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<(), NnError> {
        let shapes = self.config.parameter_shapes()?;
        if shapes.len() != self.tensors.len() {
            return Err(NnError::Config(format!(
                "config needs {} tensors, params hold {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (pn, pt)) in shapes.iter().zip(&self.tensors) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(NnError::Config(format!(
                    "expected {name} {shape:?}, found {pn} {:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass for a `[N, C, L, W]` batch; returns the
    /// per-sample predictions in dB (`[N]`).
    pub fn forward_graph(&self, g: &mut Graph, input: Tensor) -> Result<Var, NnError> {
        let raw = self.forward_raw(g, input)?;
        let (scale, shift) = self.config.output_affine();
        g.affine(raw, scale, shift)
    }

    /// Like [`forward_graph`](Self::forward_graph) but stops before the
    /// output scaling, returning the `[N, 1]` network output.
    pub fn forward_raw(&self, g: &mut Graph, input: Tensor) -> Result<Var, NnError> {
        let [c, l, w] = self.config.input_shape;
        let s = input.shape();
        if s.len() != 4 || s[1..] != [c, l, w] {
            return Err(NnError::Shape(format!("model expects [N, {c}, {l}, {w}], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(NnError::EmptyBatch);
        }
        let mut params = self.tensors.iter();
        let mut next = |g: &mut Graph| -> Result<Var, NnError> {
            let (_, t) = params
                .next()
                .ok_or_else(|| NnError::Config("ran out of parameters".into()))?;
            g.param(t.clone())
        };
        let mut x = g.input(input)?;
        for b in &self.config.conv_blocks {
            let wv = next(g)?;
            let bv = next(g)?;
            x = g.conv2d(x, wv, bv, b.stride, b.padding)?;
            x = g.relu(x)?;
            x = g.max_pool2(x)?;
        }
        x = g.global_avg_pool(x)?;
        for _ in &self.config.dense {
            let wv = next(g)?;
            let bv = next(g)?;
            x = g.linear(x, wv, bv)?;
            x = g.relu(x)?;
        }
        let wv = next(g)?;
        let bv = next(g)?;
        g.linear(x, wv, bv)
    }

    /// Predicted path loss (dB) for each profile, evaluated in chunks.
    pub fn predict(&self, profiles: &[&PathProfileTensor]) -> Result<Vec<f64>, NnError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(profiles.len());
        for chunk in profiles.chunks(CHUNK) {
            let mut g = Graph::new();
            let y = self.forward_graph(&mut g, stack_profiles(chunk, &self.config)?)?;
            out.extend(g.value(y).data().iter().map(|&v| f64::from(v)));
        }
        Ok(out)
    }

    pub fn forward(&self, profile: &PathProfileTensor) -> Result<f64, NnError> {
        Ok(self.predict(&[profile])?[0])
    }
}

/// Packs profiles into one `[N, 4, L, W]` batch.
pub fn stack_profiles(profiles: &[&PathProfileTensor], config: &ModelConfig) -> Result<Tensor, NnError> {
    let [c, l, w] = config.input_shape;
    let mut data = Vec::with_capacity(profiles.len() * c * l * w);
    for p in profiles {
        if p.length() != l || p.width() != w || c != crate::profile::N_CHANNELS {
            return Err(NnError::Shape(format!(
                "profile is 4x{}x{}, model expects {c}x{l}x{w}",
                p.length(),
                p.width()
            )));
        }
        data.extend_from_slice(p.values());
    }
    Tensor::new(vec![profiles.len(), c, l, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_shape: [4, 16, 8],
            conv_blocks: vec![ConvBlockConfig::same3x3(4), ConvBlockConfig::same3x3(6)],
            dense: vec![5],
            output_range_db: [40.0, 180.0],
        }
    }

    #[test]
    fn default_shapes_chain() {
        let shapes = ModelConfig::default().parameter_shapes().unwrap();
        assert_eq!(shapes[0], ("conv0.weight".to_string(), vec![16, 4, 3, 3]));
        assert_eq!(shapes[6], ("conv3.weight".to_string(), vec![64, 64, 3, 3]));
        assert_eq!(shapes[8], ("dense0.weight".to_string(), vec![64, 64]));
        assert_eq!(shapes.last().unwrap().1, vec![1]);
        let cfg = ModelConfig::default().with_input(64, 16);
        assert!(cfg.parameter_shapes().is_ok());
    }

    #[test]
    fn rejects_inputs_too_small_to_pool() {
        let cfg = ModelConfig::default().with_input(64, 8);
        assert!(matches!(cfg.parameter_shapes(), Err(NnError::Config(_))));
    }

    #[test]
    fn zero_head_predicts_the_range_midpoint() {
        let mut p = ModelParams::init(&tiny(), 1).unwrap();
        p.get_mut("out.weight").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = Tensor::new(
            vec![3, 4, 16, 8],
            (0..3 * 512).map(|k| (k % 13) as f32 / 13.0).collect(),
        )
        .unwrap();
        let y = p.forward_graph(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[110.0, 110.0, 110.0]);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&tiny(), 5).unwrap();
        assert_eq!(a, ModelParams::init(&tiny(), 5).unwrap());
        assert_ne!(a, ModelParams::init(&tiny(), 6).unwrap());
        a.validate().unwrap();
        assert_eq!(a.init.seed, 5);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            p.forward_graph(&mut g, Tensor::zeros(&[1, 4, 8, 8])),
            Err(NnError::Shape(_))
        ));
    }
}
