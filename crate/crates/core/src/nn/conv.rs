//! 2-D cross-correlation through im2col and `sgemm`.

use super::{NnError, Tensor};

/// `(in + 2 * pad - kernel) / stride + 1`, or `None` when the kernel does
/// not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self, NnError> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(NnError::Shape(format!(
                "conv2d expects 4-D input and weights, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(NnError::Shape(format!(
                "conv2d input has {} channels, weights expect {}",
                xs[1], ws[1]
            )));
        }
        let oh = conv_output_size(xs[2], ws[2], stride, pad);
        let ow = conv_output_size(xs[3], ws[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(NnError::Shape(format!(
                "kernel {:?} with stride {stride} and padding {pad} does not fit input {xs:?}",
                &ws[2..]
            )));
        };
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `x * stride + dx - pad`
    /// is inside the image.
    fn valid_range(&self, offset: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = offset as isize - self.pad as isize;
        // smallest x with x*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest x with x*s + off <= size - 1
        let last = size as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        let lo = lo.min(out as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// `cols[(c*kh + dy)*kw + dx][off + y*ow + x] = img[c][y*s + dy - p][x*s + dx - p]`,
/// zero outside the image; rows of `cols` are `ld` long.
fn im2col(img: &[f32], g: &Geometry, cols: &mut [f32], ld: usize, off: usize) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (ylo, yhi) = g.valid_range(dy, g.oh, g.h);
            for dx in 0..g.kw {
                let row = &mut cols[((c * g.kh + dy) * g.kw + dx) * ld + off..][..p];
                row.fill(0.0);
                let (xlo, xhi) = g.valid_range(dx, g.ow, g.w);
                if xlo == xhi {
                    continue;
                }
                for y in ylo..yhi {
                    let iy = y * g.stride + dy - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[y * g.ow..(y + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = xlo + dx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for x in xlo..xhi {
                            dst[x] = src[x * g.stride + dx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, summing.
fn col2im(cols: &[f32], g: &Geometry, img: &mut [f32], ld: usize, off: usize) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (ylo, yhi) = g.valid_range(dy, g.oh, g.h);
            for dx in 0..g.kw {
                let row = &cols[((c * g.kh + dy) * g.kw + dx) * ld + off..][..p];
                let (xlo, xhi) = g.valid_range(dx, g.ow, g.w);
                for y in ylo..yhi {
                    let iy = y * g.stride + dy - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[y * g.ow..(y + 1) * g.ow];
                    for x in xlo..xhi {
                        dst[x * g.stride + dx - g.pad] += src[x];
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[n, o, y, x] = bias[o] + sum_{c,dy,dx} in[n, c, y*s+dy-p, x*s+dx-p] * w[o, c, dy, dx]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor, NnError> {
    let g = Geometry::new(x, w, stride, pad)?;
    if bias.shape() != [g.o] {
        return Err(NnError::Shape(format!(
            "conv2d bias must be [{}], got {:?}",
            g.o,
            bias.shape()
        )));
    }
    let (ck, p) = (g.ck(), g.p());
    let np = g.n * p;
    let (chw, o) = (g.c * g.h * g.w, g.o);
    let mut cols = vec![0f32; ck * np];
    for (n, img) in x.data().chunks(chw).enumerate() {
        im2col(img, &g, &mut cols, np, n * p);
    }
    // [O x N*P], one GEMM for the whole batch
    let mut prod = vec![0f32; o * np];
    gemm(o, ck, np, w.data(), false, &cols, false, 0.0, &mut prod);
    let mut out = vec![0f32; g.n * o * p];
    for (oc, row) in prod.chunks(np).enumerate() {
        let b = bias.data()[oc];
        for (n, src) in row.chunks(p).enumerate() {
            for (d, &v) in out[(n * o + oc) * p..][..p].iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    Tensor::new(vec![g.n, o, g.oh, g.ow], out)
}

/// Gradients `(d input, d weights, d bias)` given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (dx, dw, db) = conv2d_backward_inner(x, w, stride, pad, grad_out, true)?;
    Ok((dx.expect("requested"), dw, db))
}

/// As [`conv2d_backward`]; the input gradient is skipped unless `need_dx`.
pub(crate) fn conv2d_backward_inner(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let g = Geometry::new(x, w, stride, pad)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(NnError::Shape("conv2d output gradient shape".into()));
    }
    let (ck, p) = (g.ck(), g.p());
    let np = g.n * p;
    let (chw, o) = (g.c * g.h * g.w, g.o);

    // grad_out as [O x N*P]
    let mut go = vec![0f32; o * np];
    let mut db = vec![0f64; o];
    for (k, plane) in grad_out.data().chunks(p).enumerate() {
        let (n, oc) = (k / o, k % o);
        go[oc * np + n * p..][..p].copy_from_slice(plane);
        db[oc] += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
    }
    let mut cols = vec![0f32; ck * np];
    for (n, img) in x.data().chunks(chw).enumerate() {
        im2col(img, &g, &mut cols, np, n * p);
    }
    // dW = gout [O x NP] * cols^T [NP x CK]
    let mut dw = vec![0f32; w.len()];
    gemm(o, np, ck, &go, false, &cols, true, 0.0, &mut dw);

    let dx = if need_dx {
        // dcols = W^T [CK x O] * gout [O x NP]
        let mut dcols = cols;
        gemm(ck, o, np, w.data(), true, &go, false, 0.0, &mut dcols);
        let mut dx = vec![0f32; x.len()];
        for (n, img) in dx.chunks_mut(chw).enumerate() {
            col2im(&dcols, &g, img, np, n * p);
        }
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![o], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn kernel_wider_than_the_padded_image() {
        // 1x5 kernel over a 2x1 image with padding 2: only the centre tap
        // ever lands inside the image
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 5], vec![1.0; 5]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 6, 1]);
        assert_eq!(y.data(), [0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        let (dx, dw, _) = conv2d_backward(&x, &w, 1, 2, &y).unwrap();
        assert_eq!(dx.data(), [1.0, 2.0]);
        assert_eq!(dw.data(), [0.0, 0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(vec![1, 1, 3, 4], lcg(1, 12)).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 3, 5, 5]);
        let w = Tensor::new(vec![4, 3, 3, 3], lcg(2, 108)).unwrap();
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        for (k, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(k / 25) % 4]);
        }
    }

    #[test]
    fn output_size_and_mismatch() {
        assert_eq!(conv_output_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_size(8, 3, 2, 0), Some(3));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_err());
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (3, 2)] {
            let x = Tensor::new(vec![1, 2, 7, 6], lcg(3, 84)).unwrap();
            let w = Tensor::zeros(&[1, 2, 3, 2]);
            let g = Geometry::new(&x, &w, stride, pad).unwrap();
            let mut cols = vec![0f32; g.ck() * g.p()];
            im2col(x.data(), &g, &mut cols, g.p(), 0);
            let c = lcg(4, cols.len());
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| f64::from(a * b)).sum();
            let mut back = vec![0f32; 84];
            col2im(&c, &g, &mut back, g.p(), 0);
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| f64::from(a * b)).sum();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} {rhs}");
        }
    }
}
