//! Cross-correlation convolution and its transpose in 2D and 3D.
//!
//! Both operations are built from three primitives on a single convolution
//! geometry: the forward map, its input adjoint and its kernel adjoint. A
//! transpose convolution runs the input adjoint forward and the forward map
//! backward. Each primitive has a direct loop implementation and an
//! im2col + GEMM implementation; they agree to rounding.

use std::sync::atomic::{AtomicU8, Ordering};

use rayon::prelude::*;

use super::tape::{Backward, Tape, Var};
use super::{field_rank, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Nested loops, one output element at a time.
    Direct,
    /// Patch unfolding followed by a matrix product.
    Im2col,
}

static DEFAULT_ALGO: AtomicU8 = AtomicU8::new(1);

pub fn set_default_conv_algo(algo: ConvAlgo) {
    DEFAULT_ALGO.store(algo as u8, Ordering::Relaxed);
}

pub fn default_conv_algo() -> ConvAlgo {
    match DEFAULT_ALGO.load(Ordering::Relaxed) {
        0 => ConvAlgo::Direct,
        _ => ConvAlgo::Im2col,
    }
}

/// Geometry of a forward convolution `x -> y` with kernel `[cout, cin, k..]`.
/// Two-dimensional problems use a unit leading spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub rank: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

fn lift3(rank: usize, v: &[usize], fill: usize) -> [usize; 3] {
    match rank {
        2 => [fill, v[0], v[1]],
        _ => [v[0], v[1], v[2]],
    }
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

impl ConvGeom {
    /// Geometry for `conv(input, kernel)` where kernel is `[cout, cin, k..]`.
    pub fn conv(
        op: &'static str,
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let rank = field_rank(op, input)?;
        if kernel.len() != input.len() {
            return Err(Error::shape(op, "kernel rank", input.len(), kernel.len()));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if kernel[1] != input[1] {
            return Err(Error::shape(op, "channels", kernel[1], input[1]));
        }
        let first_axis = 3 - rank;
        for (i, &k) in kernel[2..].iter().enumerate() {
            if k % 2 == 0 {
                return Err(Error::invalid(
                    op,
                    format!("kernel extent along {} must be odd, found {k}", AXIS_NAMES[first_axis + i]),
                ));
            }
        }
        let in3 = lift3(rank, &input[2..], 1);
        let k3 = lift3(rank, &kernel[2..], 1);
        let s3 = lift3(rank, &[stride; 3], 1);
        let p3 = lift3(rank, &[padding; 3], 0);
        let mut out3 = [1; 3];
        for a in 0..3 {
            if in3[a] + 2 * p3[a] < k3[a] {
                return Err(Error::shape(op, AXIS_NAMES[a], k3[a], in3[a] + 2 * p3[a]));
            }
            out3[a] = (in3[a] + 2 * p3[a] - k3[a]) / s3[a] + 1;
        }
        Ok(ConvGeom {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            rank,
            input: in3,
            kernel: k3,
            stride: s3,
            pad: p3,
            output: out3,
        })
    }

    /// Geometry of the convolution whose input adjoint is
    /// `conv_transpose(input, kernel)` with kernel `[cin_t, cout_t, k..]`.
    ///
    /// The transpose output along each strided axis is
    /// `(in - 1) * stride - 2 * padding + k + (stride - 1)`, which makes a
    /// stride-2 transpose the exact adjoint of a stride-2 convolution on even
    /// extents.
    pub fn transpose(
        op: &'static str,
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let rank = field_rank(op, input)?;
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(op, format!("stride must be 1 or 2, found {stride}")));
        }
        if kernel.len() != input.len() {
            return Err(Error::shape(op, "kernel rank", input.len(), kernel.len()));
        }
        if kernel[0] != input[1] {
            return Err(Error::shape(op, "channels", kernel[0], input[1]));
        }
        let mut full = vec![input[0], kernel[1]];
        for (i, (&n, &k)) in input[2..].iter().zip(&kernel[2..]).enumerate() {
            if k % 2 == 0 {
                return Err(Error::invalid(
                    op,
                    format!("kernel extent along {} must be odd, found {k}", AXIS_NAMES[3 - rank + i]),
                ));
            }
            let out = ((n - 1) * stride + k + stride - 1)
                .checked_sub(2 * padding)
                .filter(|&o| o > 0)
                .ok_or_else(|| Error::invalid(op, "padding too large for input extent"))?;
            full.push(out);
        }
        // Conv kernel is [cout=cin_t, cin=cout_t, k..], which is exactly the stored layout.
        let geom = ConvGeom::conv(op, &full, kernel, stride, padding)?;
        debug_assert_eq!(&geom.output[3 - rank..], &input[2..]);
        Ok(geom)
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cin];
        s.extend_from_slice(&self.input[3 - self.rank..]);
        s
    }

    fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend_from_slice(&self.output[3 - self.rank..]);
        s
    }

    /// Input offset read by output position `o` through kernel tap `k` on `axis`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }
}

/// Raw primitives on flat buffers, exposed for oracles and benchmarks.
pub mod raw {
    use super::*;

    /// `y = conv(x, w)` without bias.
    pub fn forward(algo: ConvAlgo, g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        match algo {
            ConvAlgo::Direct => forward_direct(g, x, w),
            ConvAlgo::Im2col => forward_gemm(g, x, w),
        }
    }

    /// `dx = conv_x^T(dy)`.
    pub fn backward_input(algo: ConvAlgo, g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
        match algo {
            ConvAlgo::Direct => backward_input_direct(g, dy, w),
            ConvAlgo::Im2col => backward_input_gemm(g, dy, w),
        }
    }

    /// `dw = conv_w^T(dy)` given the forward input `x`.
    pub fn backward_kernel(algo: ConvAlgo, g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
        match algo {
            ConvAlgo::Direct => backward_kernel_direct(g, x, dy),
            ConvAlgo::Im2col => backward_kernel_gemm(g, x, dy),
        }
    }

    pub fn forward_direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [_, ih, iw] = g.input;
        let mut y = vec![0.0; g.batch * g.cout * ov];
        for n in 0..g.batch {
            for co in 0..g.cout {
                let yb = &mut y[(n * g.cout + co) * ov..][..ov];
                for z in 0..od {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.cin {
                                let xb = &x[(n * g.cin + ci) * iv..][..iv];
                                let wb = &w[(co * g.cin + ci) * kv..][..kv];
                                for a in 0..kd {
                                    let Some(iz) = g.src(0, z, a) else { continue };
                                    for b in 0..kh {
                                        let Some(ir) = g.src(1, r, b) else { continue };
                                        for e in 0..kw {
                                            let Some(ic) = g.src(2, c, e) else { continue };
                                            acc += xb[(iz * ih + ir) * iw + ic]
                                                * wb[(a * kh + b) * kw + e];
                                        }
                                    }
                                }
                            }
                            yb[(z * oh + r) * ow + c] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward_input_direct(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
        let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [_, ih, iw] = g.input;
        let mut dx = vec![0.0; g.batch * g.cin * iv];
        for n in 0..g.batch {
            for co in 0..g.cout {
                let dyb = &dy[(n * g.cout + co) * ov..][..ov];
                for ci in 0..g.cin {
                    let dxb = &mut dx[(n * g.cin + ci) * iv..][..iv];
                    let wb = &w[(co * g.cin + ci) * kv..][..kv];
                    for z in 0..od {
                        for r in 0..oh {
                            for c in 0..ow {
                                let d = dyb[(z * oh + r) * ow + c];
                                for a in 0..kd {
                                    let Some(iz) = g.src(0, z, a) else { continue };
                                    for b in 0..kh {
                                        let Some(ir) = g.src(1, r, b) else { continue };
                                        for e in 0..kw {
                                            let Some(ic) = g.src(2, c, e) else { continue };
                                            dxb[(iz * ih + ir) * iw + ic] +=
                                                d * wb[(a * kh + b) * kw + e];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn backward_kernel_direct(g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [_, ih, iw] = g.input;
        let mut dw = vec![0.0; g.cout * g.cin * kv];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for a in 0..kd {
                    for b in 0..kh {
                        for e in 0..kw {
                            let mut acc = 0.0;
                            for n in 0..g.batch {
                                let xb = &x[(n * g.cin + ci) * iv..][..iv];
                                let dyb = &dy[(n * g.cout + co) * ov..][..ov];
                                for z in 0..od {
                                    let Some(iz) = g.src(0, z, a) else { continue };
                                    for r in 0..oh {
                                        let Some(ir) = g.src(1, r, b) else { continue };
                                        for c in 0..ow {
                                            let Some(ic) = g.src(2, c, e) else { continue };
                                            acc += xb[(iz * ih + ir) * iw + ic]
                                                * dyb[(z * oh + r) * ow + c];
                                        }
                                    }
                                }
                            }
                            dw[(co * g.cin + ci) * kv + (a * kh + b) * kw + e] = acc;
                        }
                    }
                }
            }
        }
        dw
    }

    fn is_pointwise(g: &ConvGeom) -> bool {
        g.kernel == [1, 1, 1] && g.stride == [1, 1, 1] && g.pad == [0, 0, 0]
    }

    /// Unfold one sample `[cin, in_vol]` into `[cin * k_vol, out_vol]`.
    fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
        let (iv, ov) = (g.in_vol(), g.out_vol());
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [_, ih, iw] = g.input;
        let mut row = 0;
        for ci in 0..g.cin {
            let xb = &x[ci * iv..][..iv];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * ov..][..ov];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = g.src(0, z, a);
                            for r in 0..oh {
                                let ir = g.src(1, r, b);
                                match (iz, ir) {
                                    (Some(iz), Some(ir)) => {
                                        let base = (iz * ih + ir) * iw;
                                        for c in 0..ow {
                                            dst[o] = match g.src(2, c, e) {
                                                Some(ic) => xb[base + ic],
                                                None => 0.0,
                                            };
                                            o += 1;
                                        }
                                    }
                                    _ => {
                                        dst[o..o + ow].fill(0.0);
                                        o += ow;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add `[cin * k_vol, out_vol]` columns back into one sample.
    fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
        let (iv, ov) = (g.in_vol(), g.out_vol());
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let [_, ih, iw] = g.input;
        let mut row = 0;
        for ci in 0..g.cin {
            let dxb = &mut dx[ci * iv..][..iv];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * ov..][..ov];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = g.src(0, z, a);
                            for r in 0..oh {
                                let ir = g.src(1, r, b);
                                if let (Some(iz), Some(ir)) = (iz, ir) {
                                    let base = (iz * ih + ir) * iw;
                                    for c in 0..ow {
                                        if let Some(ic) = g.src(2, c, e) {
                                            dxb[base + ic] += src[o + c];
                                        }
                                    }
                                }
                                o += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
        assert!(c.len() >= m * n);
        // SAFETY: the asserts above bound every index the kernel touches.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn forward_gemm(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (iv, ov, kk) = (g.in_vol(), g.out_vol(), g.cin * g.k_vol());
        let mut y = vec![0.0; g.batch * g.cout * ov];
        let pointwise = is_pointwise(g);
        y.par_chunks_mut(g.cout * ov)
            .enumerate()
            .for_each_init(Vec::new, |cols, (n, yb)| {
                let xb = &x[n * g.cin * iv..][..g.cin * iv];
                let cols: &[f64] = if pointwise {
                    xb
                } else {
                    cols.resize(kk * ov, 0.0);
                    im2col(g, xb, cols);
                    cols
                };
                gemm(g.cout, kk, ov, w, (kk, 1), cols, (ov, 1), 0.0, yb);
            });
        y
    }

    pub fn backward_input_gemm(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
        let (iv, ov, kk) = (g.in_vol(), g.out_vol(), g.cin * g.k_vol());
        let mut dx = vec![0.0; g.batch * g.cin * iv];
        let pointwise = is_pointwise(g);
        dx.par_chunks_mut(g.cin * iv)
            .enumerate()
            .for_each_init(Vec::new, |cols, (n, dxb)| {
                let dyb = &dy[n * g.cout * ov..][..g.cout * ov];
                if pointwise {
                    gemm(g.cin, g.cout, ov, w, (1, kk), dyb, (ov, 1), 0.0, dxb);
                } else {
                    cols.resize(kk * ov, 0.0);
                    gemm(kk, g.cout, ov, w, (1, kk), dyb, (ov, 1), 0.0, cols);
                    col2im(g, cols, dxb);
                }
            });
        dx
    }

    pub fn backward_kernel_gemm(g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let (iv, ov, kk) = (g.in_vol(), g.out_vol(), g.cin * g.k_vol());
        let mut dw = vec![0.0; g.cout * kk];
        let mut cols = Vec::new();
        let pointwise = is_pointwise(g);
        // Samples are accumulated in batch order so the result is reproducible.
        for n in 0..g.batch {
            let xb = &x[n * g.cin * iv..][..g.cin * iv];
            let dyb = &dy[n * g.cout * ov..][..g.cout * ov];
            let cols: &[f64] = if pointwise {
                xb
            } else {
                cols.resize(kk * ov, 0.0);
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.cout, ov, kk, dyb, (ov, 1), cols, (1, ov), 1.0, &mut dw);
        }
        dw
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], batch: usize, vol: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ch, &b) in bias.iter().enumerate() {
            for v in &mut y[(n * c + ch) * vol..][..vol] {
                *v += b;
            }
        }
    }
}

fn bias_grad(dy: &[f64], channels: usize, batch: usize, vol: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for n in 0..batch {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += dy[(n * channels + ch) * vol..][..vol].iter().sum::<f64>();
        }
    }
    db
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(Error::shape(op, "bias", channels, bias.len()));
    }
    Ok(())
}

struct ConvOp {
    geom: ConvGeom,
    algo: ConvAlgo,
}

impl Backward for ConvOp {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let dx = needs[0]
            .then(|| {
                Tensor::new(
                    x.shape().to_vec(),
                    raw::backward_input(self.algo, g, grad.data(), w.data()),
                )
            })
            .transpose()?;
        let dw = needs[1]
            .then(|| {
                Tensor::new(
                    w.shape().to_vec(),
                    raw::backward_kernel(self.algo, g, x.data(), grad.data()),
                )
            })
            .transpose()?;
        let db = needs[2]
            .then(|| Tensor::new(vec![g.cout], bias_grad(grad.data(), g.cout, g.batch, g.out_vol())))
            .transpose()?;
        Ok(vec![dx, dw, db])
    }
}

struct ConvTransposeOp {
    geom: ConvGeom,
    algo: ConvAlgo,
}

impl Backward for ConvTransposeOp {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (y, w) = (inputs[0], inputs[1]);
        // The transpose output is the geometry's input side.
        let dy = needs[0]
            .then(|| Tensor::new(y.shape().to_vec(), raw::forward(self.algo, g, grad.data(), w.data())))
            .transpose()?;
        let dw = needs[1]
            .then(|| {
                Tensor::new(
                    w.shape().to_vec(),
                    raw::backward_kernel(self.algo, g, grad.data(), y.data()),
                )
            })
            .transpose()?;
        let db = needs[2]
            .then(|| Tensor::new(vec![g.cin], bias_grad(grad.data(), g.cin, g.batch, g.in_vol())))
            .transpose()?;
        Ok(vec![dy, dw, db])
    }
}

/// Cross-correlation of `input` `[N, Cin, ..]` with `kernel` `[Cout, Cin, k..]`
/// plus a per-output-channel `bias`.
pub fn conv(
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    conv_with(default_conv_algo(), tape, input, kernel, bias, stride, padding)
}

pub fn conv_with(
    algo: ConvAlgo,
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (x, w, b) = (tape.value(input), tape.value(kernel), tape.value(bias));
    let geom = ConvGeom::conv("conv", x.shape(), w.shape(), stride, padding)?;
    check_bias("conv", b, geom.cout)?;
    let mut y = raw::forward(algo, &geom, x.data(), w.data());
    add_bias(&mut y, b.data(), geom.batch, geom.out_vol());
    let out = Tensor::new(geom.output_shape(), y)?;
    Ok(tape.push(out, &[input, kernel, bias], Box::new(ConvOp { geom, algo })))
}

/// Transpose convolution of `input` `[N, Cin, ..]` with `kernel`
/// `[Cin, Cout, k..]`; the adjoint of [`conv`] with the same stride and padding.
pub fn conv_transpose(
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    conv_transpose_with(default_conv_algo(), tape, input, kernel, bias, stride, padding)
}

pub fn conv_transpose_with(
    algo: ConvAlgo,
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (y, w, b) = (tape.value(input), tape.value(kernel), tape.value(bias));
    let geom = ConvGeom::transpose("conv_transpose", y.shape(), w.shape(), stride, padding)?;
    check_bias("conv_transpose", b, geom.cin)?;
    let mut x = raw::backward_input(algo, &geom, y.data(), w.data());
    add_bias(&mut x, b.data(), geom.batch, geom.in_vol());
    let out = Tensor::new(geom.input_shape(), x)?;
    Ok(tape.push(out, &[input, kernel, bias], Box::new(ConvTransposeOp { geom, algo })))
}
