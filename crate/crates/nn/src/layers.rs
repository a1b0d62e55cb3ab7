//! Layers with hand-written backward passes.
//!
//! Every layer is stateless between calls: `forward` returns the output and
//! the caller keeps whatever inputs the matching `backward` needs. Parameter
//! gradients accumulate into [`Param::grad`].

use rand::Rng;

use crate::param::{Module, Param};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// 2-D convolution over `[N, C, H, W]` inputs with square kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::normal(&[out_ch, in_ch, kernel, kernel], std, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|w| *w = T::zero());
        if let Some(b) = &mut self.bias {
            b.value.iter_mut().for_each(|w| *w = T::zero());
        }
        self
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn dims(&self, x: &Tensor<T>) -> (usize, usize, usize, usize, usize) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects [N, C, H, W]");
        assert_eq!(s[1], self.in_ch, "conv2d channel mismatch");
        let (ho, wo) = self.out_hw(s[2], s[3]);
        (s[0], s[2], s[3], ho, wo)
    }

    /// Columns laid out `[C*k*k, N*Ho*Wo]`.
    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let (n, h, w, ho, wo) = self.dims(x);
        let k = self.kernel;
        let plane = ho * wo;
        let ncols = n * plane;
        let mut cols = vec![T::zero(); self.in_ch * k * k * ncols];
        let xd = x.data();
        for b in 0..n {
            for c in 0..self.in_ch {
                let xbase = (b * self.in_ch + c) * h * w;
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let out = &mut cols[row * ncols + b * plane..row * ncols + (b + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    out[oy * wo + ox] = xd[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: &[usize], ho: usize, wo: usize) -> Tensor<T> {
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let k = self.kernel;
        let plane = ho * wo;
        let ncols = n * plane;
        let mut dx = Tensor::zeros(shape);
        let dd = dx.data_mut();
        for b in 0..n {
            for c in 0..self.in_ch {
                let xbase = (b * self.in_ch + c) * h * w;
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let src = &cols[row * ncols + b * plane..row * ncols + (b + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dd[xrow + ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, _, _, ho, wo) = self.dims(x);
        let cols = self.im2col(x);
        let plane = ho * wo;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut y2 = vec![T::zero(); self.out_ch * n * plane];
        gemm(self.out_ch, n * plane, ckk, T::one(), &self.weight.value, false, &cols, false, T::zero(), &mut y2);
        let mut y = Tensor::zeros(&[n, self.out_ch, ho, wo]);
        let yd = y.data_mut();
        for o in 0..self.out_ch {
            let bias = self.bias.as_ref().map_or(T::zero(), |b| b.value[o]);
            for b in 0..n {
                let src = &y2[o * n * plane + b * plane..o * n * plane + (b + 1) * plane];
                let dst = &mut yd[(b * self.out_ch + o) * plane..(b * self.out_ch + o + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        y
    }

    fn flat_dy(&self, dy: &Tensor<T>, n: usize, plane: usize) -> Vec<T> {
        assert_eq!(dy.shape(), &[n, self.out_ch, dy.shape()[2], dy.shape()[3]]);
        let mut out = vec![T::zero(); self.out_ch * n * plane];
        let dd = dy.data();
        for o in 0..self.out_ch {
            for b in 0..n {
                out[o * n * plane + b * plane..o * n * plane + (b + 1) * plane]
                    .copy_from_slice(&dd[(b * self.out_ch + o) * plane..(b * self.out_ch + o + 1) * plane]);
            }
        }
        out
    }

    fn backward_impl(&mut self, x: &Tensor<T>, dy: &Tensor<T>, param_grads: bool, want_dx: bool) -> Option<Tensor<T>> {
        let (n, _, _, ho, wo) = self.dims(x);
        let plane = ho * wo;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let dy2 = self.flat_dy(dy, n, plane);
        let cols = if param_grads || want_dx { self.im2col(x) } else { Vec::new() };
        if param_grads {
            gemm(self.out_ch, ckk, n * plane, T::one(), &dy2, false, &cols, true, T::one(), &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for o in 0..self.out_ch {
                    b.grad[o] += dy2[o * n * plane..(o + 1) * n * plane].iter().copied().sum();
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dcols = cols;
        gemm(ckk, n * plane, self.out_ch, T::one(), &self.weight.value, true, &dy2, false, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, x.shape(), ho, wo))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.backward_impl(x, dy, true, true).expect("dx requested")
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        self.backward_impl(x, dy, true, false);
    }

    /// Input gradient without touching parameter gradients.
    pub fn backward_input(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, _, _, ho, wo) = self.dims(x);
        let plane = ho * wo;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let dy2 = self.flat_dy(dy, n, plane);
        let mut dcols = vec![T::zero(); ckk * n * plane];
        gemm(ckk, n * plane, self.out_ch, T::one(), &self.weight.value, true, &dy2, false, T::zero(), &mut dcols);
        self.col2im(&dcols, x.shape(), ho, wo)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Fully connected layer over `[N, in]` inputs; weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self { weight: Param::normal(&[out_dim, in_dim], std, rng), bias: Param::zeros(&[out_dim]), in_dim, out_dim }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|w| *w = T::zero());
        self
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 2, "linear expects [N, in]");
        assert_eq!(x.shape()[1], self.in_dim, "linear input width mismatch");
        let n = x.shape()[0];
        let mut y = vec![T::zero(); n * self.out_dim];
        for row in y.chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.out_dim, self.in_dim, T::one(), x.data(), false, &self.weight.value, true, T::one(), &mut y);
        Tensor::from_vec(&[n, self.out_dim], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.backward_params(x, dy);
        self.backward_input(dy)
    }

    pub fn backward_params(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        let n = x.shape()[0];
        assert_eq!(dy.shape(), &[n, self.out_dim]);
        gemm(self.out_dim, self.in_dim, n, T::one(), dy.data(), true, x.data(), false, T::one(), &mut self.weight.grad);
        for row in dy.data().chunks(self.out_dim) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    pub fn backward_input(&self, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.shape()[0];
        let mut dx = vec![T::zero(); n * self.in_dim];
        gemm(n, self.in_dim, self.out_dim, T::one(), dy.data(), false, &self.weight.value, false, T::zero(), &mut dx);
        Tensor::from_vec(&[n, self.in_dim], dx)
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast(), in_dim: self.in_dim, out_dim: self.out_dim }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".to_string(), &self.weight), ("bias".to_string(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, d| if v > T::zero() { d } else { T::zero() })
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, d| {
        let s = sigmoid(v);
        d * s * (T::one() + v * (T::one() - s))
    })
}

/// `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let inv = T::one() / T::of(plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &d) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = d * inv);
    }
    dx
}

/// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut y = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
    let yd = y.data_mut();
    for (p, src) in x.data().chunks(h * w).enumerate() {
        let dst = &mut yd[p * 4 * h * w..(p + 1) * 4 * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let (h, w) = (s[2] / 2, s[3] / 2);
    let mut dx = Tensor::zeros(&[s[0], s[1], h, w]);
    let dd = dx.data_mut();
    for (p, src) in dy.data().chunks(4 * h * w).enumerate() {
        let dst = &mut dd[p * h * w..(p + 1) * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
            }
        }
    }
    dx
}

/// Adds a per-(sample, channel) offset `[N, C]` to `[N, C, H, W]`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(bias.shape(), &[s[0], s[1]]);
    let plane = s[2] * s[3];
    let mut y = x.clone();
    for (chunk, &b) in y.data_mut().chunks_mut(plane).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    y
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sum<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let plane = s[2] * s[3];
    let data = dy.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_vec(&[s[0], s[1]], data)
}
