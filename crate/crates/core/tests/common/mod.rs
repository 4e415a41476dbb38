#![allow(dead_code)]

pub mod desk;

use pathloss_core::nn::{Graph, ModelParams, Tensor};

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f32; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + dy) * kw + dx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

pub fn raw_gradients(params: &ModelParams, input: &Tensor, target: &[f32]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let y = params.forward_raw(&mut g, input.clone()).unwrap();
    let l = g.mse_loss(y, target).unwrap();
    g.backward(l).unwrap().tensors
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = analytic.abs().max(numeric.abs()).max(floor);
    if d == 0.0 {
        return 0.0;
    }
    (analytic - numeric).abs() / d
}

/// One-sample activation map, `[C, H, W]`.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

struct RefConv {
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl RefConv {
    fn out_size(&self, m: &Map) -> (usize, usize) {
        (
            (m.h + 2 * self.pad - self.kh) / self.stride + 1,
            (m.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn input_at(&self, m: &Map, c: usize, y: usize, x: usize, dy: usize, dx: usize) -> f64 {
        let iy = (y * self.stride + dy) as isize - self.pad as isize;
        let ix = (x * self.stride + dx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= m.h as isize || ix >= m.w as isize {
            0.0
        } else {
            m.v[(c * m.h + iy as usize) * m.w + ix as usize]
        }
    }

    fn apply(&self, m: &Map) -> Map {
        let (oh, ow) = self.out_size(m);
        let mut v = vec![0.0; self.o * oh * ow];
        for o in 0..self.o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = self.b[o];
                    for c in 0..m.c {
                        for dy in 0..self.kh {
                            for dx in 0..self.kw {
                                acc += self.input_at(m, c, y, x, dy, dx)
                                    * self.w[((o * m.c + c) * self.kh + dy) * self.kw + dx];
                            }
                        }
                    }
                    v[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        Map {
            c: self.o,
            h: oh,
            w: ow,
            v,
        }
    }
}

/// ReLU then 2x2 max pooling. The pattern records, per window, which
/// element won (0..3) or 4 when the whole window is clipped to zero.
fn relu_pool(z: &Map) -> (Map, Vec<u8>) {
    let (h, w) = (z.h / 2, z.w / 2);
    let mut v = Vec::with_capacity(z.c * h * w);
    let mut pattern = Vec::with_capacity(z.c * h * w);
    for c in 0..z.c {
        for y in 0..h {
            for x in 0..w {
                let at = |k: usize| z.v[(c * z.h + 2 * y + k / 2) * z.w + 2 * x + k % 2];
                let mut best = 0;
                for k in 1..4 {
                    if at(k) > at(best) {
                        best = k;
                    }
                }
                if at(best) > 0.0 {
                    v.push(at(best));
                    pattern.push(best as u8);
                } else {
                    v.push(0.0);
                    pattern.push(4);
                }
            }
        }
    }
    (Map { c: z.c, h, w, v }, pattern)
}

/// The default network architecture re-coded in `f64` with direct loops.
pub struct RefNet {
    convs: Vec<RefConv>,
    dense: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl RefNet {
    pub fn new(p: &ModelParams) -> Self {
        let f = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        let mut it = p.tensors.iter();
        let convs = p
            .config
            .conv_blocks
            .iter()
            .map(|b| {
                let w = &it.next().unwrap().1;
                let bias = &it.next().unwrap().1;
                RefConv {
                    o: b.out_channels,
                    kh: b.kernel[0],
                    kw: b.kernel[1],
                    stride: b.stride,
                    pad: b.padding,
                    w: f(w),
                    b: f(bias),
                }
            })
            .collect();
        let mut dense = Vec::new();
        while let Some((_, w)) = it.next() {
            let b = &it.next().unwrap().1;
            dense.push((w.shape()[0], w.shape()[1], f(w), f(b)));
        }
        Self { convs, dense }
    }

    /// Global average pool and dense layers; also returns the hidden ReLU mask.
    fn head(&self, m: &Map) -> (f64, Vec<bool>) {
        let area = (m.h * m.w) as f64;
        let mut x: Vec<f64> = m.v.chunks(m.h * m.w).map(|c| c.iter().sum::<f64>() / area).collect();
        let mut mask = Vec::new();
        let last = self.dense.len() - 1;
        for (k, (i, o, w, b)) in self.dense.iter().enumerate() {
            let mut y = b.clone();
            for (r, &xv) in x.iter().enumerate().take(*i) {
                for (c, yv) in y.iter_mut().enumerate() {
                    *yv += xv * w[r * o + c];
                }
            }
            if k != last {
                for v in y.iter_mut() {
                    mask.push(*v > 0.0);
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        (x[0], mask)
    }

    pub fn forward(&self, x: &[f32], shape: [usize; 3]) -> f64 {
        let mut m = Map {
            c: shape[0],
            h: shape[1],
            w: shape[2],
            v: x.iter().map(|&v| f64::from(v)).collect(),
        };
        for conv in &self.convs {
            m = relu_pool(&conv.apply(&m)).0;
        }
        self.head(&m).0
    }
}

/// Forward state of one sample through [`RefNet`].
struct Trace {
    inputs: Vec<Map>,
    pre: Vec<Map>,
    pooled: Vec<Map>,
    patterns: Vec<Vec<u8>>,
    features: Map,
    head_mask: Vec<bool>,
}

impl Trace {
    fn new(net: &RefNet, m: Map) -> Self {
        let mut t = Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
            pooled: Vec::new(),
            patterns: Vec::new(),
            features: m.clone(),
            head_mask: Vec::new(),
        };
        let mut m = m;
        for conv in &net.convs {
            let z = conv.apply(&m);
            let (p, pat) = relu_pool(&z);
            t.inputs.push(m);
            t.pre.push(z);
            t.pooled.push(p.clone());
            t.patterns.push(pat);
            m = p;
        }
        t.head_mask = net.head(&m).1;
        t.features = m;
        t
    }

    /// Output when the pre-activation of block `k` is replaced by `z`; the
    /// flag is set if any ReLU/max-pool decision differs from the base pass.
    fn tail(&self, net: &RefNet, k: usize, z: &Map) -> (f64, bool) {
        let (mut m, pat) = relu_pool(z);
        let mut kinked = pat != self.patterns[k];
        for (j, conv) in net.convs.iter().enumerate().skip(k + 1) {
            let (p, pat) = relu_pool(&conv.apply(&m));
            kinked |= pat != self.patterns[j];
            m = p;
        }
        let (out, mask) = net.head(&m);
        (out, kinked || mask != self.head_mask)
    }

    /// Output when channel `o` of block `k`'s pre-activation is shifted by
    /// `dz` (an `h x w` plane). The change is pushed through the next
    /// convolution incrementally.
    fn tail_channel(&self, net: &RefNet, k: usize, o: usize, dz: &[f64]) -> (f64, bool) {
        let z = &self.pre[k];
        let plane = z.h * z.w;
        let mut zc = Map {
            c: 1,
            h: z.h,
            w: z.w,
            v: z.v[o * plane..(o + 1) * plane].to_vec(),
        };
        zc.v.iter_mut().zip(dz).for_each(|(a, d)| *a += d);
        let (pc, pat) = relu_pool(&zc);
        let pp = pc.h * pc.w;
        let mut kinked = pat[..] != self.patterns[k][o * pp..(o + 1) * pp];
        if k + 1 == net.convs.len() {
            let mut m = self.pooled[k].clone();
            m.v[o * pp..(o + 1) * pp].copy_from_slice(&pc.v);
            let (out, mask) = net.head(&m);
            return (out, kinked || mask != self.head_mask);
        }
        let base = &self.pooled[k];
        let delta = Map {
            c: 1,
            h: pc.h,
            w: pc.w,
            v: pc
                .v
                .iter()
                .zip(&base.v[o * pp..(o + 1) * pp])
                .map(|(a, b)| a - b)
                .collect(),
        };
        let next = &net.convs[k + 1];
        let mut z1 = self.pre[k + 1].clone();
        let cin = base.c;
        for o2 in 0..next.o {
            for y in 0..z1.h {
                for x in 0..z1.w {
                    let mut acc = 0.0;
                    for dy in 0..next.kh {
                        for dx in 0..next.kw {
                            acc += next.input_at(&delta, 0, y, x, dy, dx)
                                * next.w[((o2 * cin + o) * next.kh + dy) * next.kw + dx];
                        }
                    }
                    z1.v[(o2 * z1.h + y) * z1.w + x] += acc;
                }
            }
        }
        let (out, k2) = self.tail(net, k + 1, &z1);
        kinked |= k2;
        (out, kinked)
    }
}

pub struct GradCheck {
    pub errors: Vec<f64>,
    /// Parameters whose +-eps step crosses a ReLU or max-pool switch.
    pub kinked: Vec<bool>,
}

impl GradCheck {
    fn stats(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        let max = v.last().copied().unwrap_or(0.0);
        let median = if v.is_empty() { 0.0 } else { v[v.len() / 2] };
        (max, median, v.len())
    }

    /// (max, median, count) over every parameter.
    pub fn all(&self) -> (f64, f64, usize) {
        Self::stats(self.errors.iter().copied())
    }

    /// (max, median, count) over parameters whose step stays on one linear
    /// piece of the network.
    pub fn smooth(&self) -> (f64, f64, usize) {
        Self::stats(
            self.errors
                .iter()
                .zip(&self.kinked)
                .filter(|(_, &k)| !k)
                .map(|(&e, _)| e),
        )
    }
}

/// Analytic `f32` gradients of `(raw - target)^2` against central differences
/// with step `eps` on each `f32` parameter, the differenced function evaluated
/// by [`RefNet`] in `f64`.
pub fn gradient_check(params: &ModelParams, input: &Tensor, target: f32, eps: f64) -> GradCheck {
    let s = input.shape();
    assert_eq!(s[0], 1, "gradient check runs on a single sample");
    let analytic = raw_gradients(params, input, &[target]);
    let net = RefNet::new(params);
    let t = f64::from(target);
    let loss = |raw: f64| (raw - t) * (raw - t);
    let trace = Trace::new(
        &net,
        Map {
            c: s[1],
            h: s[2],
            w: s[3],
            v: input.data().iter().map(|&v| f64::from(v)).collect(),
        },
    );

    let mut numeric = Vec::new();
    let mut kinked = Vec::new();
    let mut record = |eval: &mut dyn FnMut(f64) -> (f64, bool)| {
        let (a, ka) = eval(eps);
        let (b, kb) = eval(-eps);
        numeric.push((loss(a) - loss(b)) / (2.0 * eps));
        kinked.push(ka || kb);
    };

    for (k, conv) in net.convs.iter().enumerate() {
        let (z, x) = (&trace.pre[k], &trace.inputs[k]);
        let per_out = x.c * conv.kh * conv.kw;
        let weights = params.tensors[2 * k].1.data();
        for idx in 0..weights.len() {
            let o = idx / per_out;
            let r = idx % per_out;
            let (c, dy, dx) = (r / (conv.kh * conv.kw), (r / conv.kw) % conv.kh, r % conv.kw);
            let shifted: Vec<f64> = (0..z.h)
                .flat_map(|y| (0..z.w).map(move |xo| (y, xo)))
                .map(|(y, xo)| conv.input_at(x, c, y, xo, dy, dx))
                .collect();
            record(&mut |d| {
                let dz: Vec<f64> = shifted.iter().map(|v| v * d).collect();
                trace.tail_channel(&net, k, o, &dz)
            });
        }
        for o in 0..params.tensors[2 * k + 1].1.data().len() {
            record(&mut |d| trace.tail_channel(&net, k, o, &vec![d; z.h * z.w]));
        }
    }

    let mut head = RefNet {
        convs: Vec::new(),
        dense: net.dense.clone(),
    };
    for k in 0..net.dense.len() {
        for part in 0..2 {
            let values = params.tensors[2 * net.convs.len() + 2 * k + part].1.data();
            for idx in 0..values.len() {
                record(&mut |d| {
                    let slot = if part == 0 {
                        &mut head.dense[k].2[idx]
                    } else {
                        &mut head.dense[k].3[idx]
                    };
                    let keep = *slot;
                    *slot += d;
                    let (out, mask) = head.head(&trace.features);
                    let slot = if part == 0 {
                        &mut head.dense[k].2[idx]
                    } else {
                        &mut head.dense[k].3[idx]
                    };
                    *slot = keep;
                    (out, mask != trace.head_mask)
                });
            }
        }
    }

    let errors: Vec<f64> = analytic
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| f64::from(v)))
        .zip(&numeric)
        .map(|(a, &n)| relative_error(a, n, 0.0))
        .collect();
    assert_eq!(errors.len(), params.parameter_count());
    GradCheck { errors, kinked }
}
