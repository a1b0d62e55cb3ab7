//! Convolutional feature extractor Ψ and its reconstruction pretraining.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use vispromo_nn::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, upsample2, upsample2_backward,
};
use vispromo_nn::{prefixed, Adam, Conv2d, Linear, Module, Param, Real, Tensor};

use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::rng::stream;

/// Channel widths of the four stride-2 blocks.
pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];
const EXTRACT_CHUNK: usize = 64;

/// Ψ: four bias-free 3×3 stride-2 convolutions with ReLU, global average
/// pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    convs: Vec<Conv2d<T>>,
    head: Linear<T>,
    side: usize,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ExtractorCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    pooled: Tensor<T>,
}

impl<T> ExtractorCache<T> {
    /// Pooled activations feeding the head (the penultimate features).
    pub fn pooled(&self) -> &Tensor<T> {
        &self.pooled
    }
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new<R: Rng + ?Sized>(side: usize, feature_dim: usize, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut c_in = 3;
        for &w in &WIDTHS {
            convs.push(Conv2d::new(c_in, w, 3, 2, 1, false, rng));
            c_in = w;
        }
        Self { convs, head: Linear::new(c_in, feature_dim, rng), side }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn feature_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.head.in_dim()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.side || s[3] != self.side {
            return Err(Error::Shape(format!("extractor expects [N, 3, {0}, {0}], got {s:?}", self.side)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ExtractorCache<T>)> {
        self.check(x)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let z = conv.forward(&h);
            inputs.push(h);
            h = relu(&z);
            pre.push(z);
        }
        let pooled = global_avg_pool(&h);
        let out = self.head.forward(&pooled);
        Ok((out, ExtractorCache { inputs, pre, pooled }))
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    fn backward_to_convs(&self, cache: &ExtractorCache<T>, dpooled: &Tensor<T>) -> Tensor<T> {
        let last = cache.pre.last().expect("at least one block");
        global_avg_pool_backward(last.shape(), dpooled)
    }

    /// Accumulates parameter gradients for upstream gradient `dfeat`.
    pub fn backward(&mut self, cache: &ExtractorCache<T>, dfeat: &Tensor<T>) {
        self.backward_impl(cache, dfeat, false);
    }

    /// Like [`Self::backward`] but also returns the gradient w.r.t. the input.
    pub fn backward_with_input(&mut self, cache: &ExtractorCache<T>, dfeat: &Tensor<T>) -> Tensor<T> {
        self.backward_impl(cache, dfeat, true).expect("input gradient requested")
    }

    fn backward_impl(&mut self, cache: &ExtractorCache<T>, dfeat: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        let dpooled = self.head.backward(&cache.pooled, dfeat);
        let mut dh = self.backward_to_convs(cache, &dpooled);
        for l in (0..self.convs.len()).rev() {
            let dz = relu_backward(&cache.pre[l], &dh);
            if l == 0 && !want_dx {
                self.convs[l].backward_params(&cache.inputs[l], &dz);
                return None;
            }
            dh = self.convs[l].backward(&cache.inputs[l], &dz);
        }
        Some(dh)
    }

    /// Gradient of `dfeat · Ψ(x)` w.r.t. `x`, leaving parameters untouched.
    pub fn input_grad(&self, cache: &ExtractorCache<T>, dfeat: &Tensor<T>) -> Tensor<T> {
        let dpooled = self.head.backward_input(dfeat);
        let mut dh = self.backward_to_convs(cache, &dpooled);
        for l in (0..self.convs.len()).rev() {
            let dz = relu_backward(&cache.pre[l], &dh);
            dh = self.convs[l].backward_input(&cache.inputs[l], &dz);
        }
        dh
    }

    fn extract_with(&self, images: &[&Image], penultimate: bool) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = images.iter().find(|i| i.side() != self.side) {
            return Err(Error::Shape(format!("image side {} but extractor expects {}", bad.side(), self.side)));
        }
        let chunks: Vec<Result<Vec<Vec<f64>>>> = images
            .par_chunks(EXTRACT_CHUNK)
            .map(|chunk| {
                let x = batch_tensor::<T>(chunk)?;
                let (out, cache) = self.forward(&x)?;
                let t = if penultimate { cache.pooled } else { out };
                Ok(t.data().chunks(t.item_len()).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
            })
            .collect();
        let mut rows = Vec::with_capacity(images.len());
        for c in chunks {
            rows.extend(c?);
        }
        Ok(rows)
    }

    /// Row `i` is Ψ(images\[i\]).
    pub fn extract(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.extract_with(images, false)
    }

    /// Pooled activations before the head, used for distribution distances.
    pub fn extract_penultimate(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.extract_with(images, true)
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { convs: self.convs.iter().map(Conv2d::cast).collect(), head: self.head.cast(), side: self.side }
    }
}

impl<T: Real> Module<T> for FeatureExtractor<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.named_params()));
        }
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Minimal differentiable interface the attacks need from Ψ.
pub trait DifferentiableFeatures<T: Real>: Sync {
    fn feature_dim(&self) -> usize;

    fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns `Ψ(x)` and the gradient of `upstream(Ψ(x)) · Ψ(x)` w.r.t. `x`,
    /// where `upstream` maps the features to `∂L/∂Ψ`.
    fn embed_with_grad(
        &self,
        x: &Tensor<T>,
        upstream: &dyn Fn(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)>;
}

impl<T: Real> DifferentiableFeatures<T> for FeatureExtractor<T> {
    fn feature_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.features(x)
    }

    fn embed_with_grad(
        &self,
        x: &Tensor<T>,
        upstream: &dyn Fn(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (f, cache) = self.forward(x)?;
        let g = upstream(&f);
        let dx = self.input_grad(&cache, &g);
        Ok((f, dx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 2e-3, batch_size: 32, seed: 0 }
    }
}

/// Upsampling decoder used only as a reconstruction target for pretraining.
struct Decoder<T> {
    fc: Linear<T>,
    convs: Vec<Conv2d<T>>,
    base: usize,
    start: usize,
}

const DECODER_WIDTHS: [usize; 4] = [32, 16, 8, 3];

impl<T: Real> Decoder<T> {
    fn new<R: Rng + ?Sized>(feature_dim: usize, side: usize, rng: &mut R) -> Self {
        let start = side / 8;
        let base = DECODER_WIDTHS[0];
        let convs = DECODER_WIDTHS.windows(2).map(|w| Conv2d::new(w[0], w[1], 3, 1, 1, true, rng)).collect();
        Self { fc: Linear::new(feature_dim, base * start * start, rng), convs, base, start }
    }

    /// Returns the reconstruction and the per-stage inputs.
    fn forward(&self, z: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        let n = z.shape()[0];
        let mut saved = Vec::new();
        let h = self.fc.forward(z).reshape(&[n, self.base, self.start, self.start]);
        saved.push(h.clone());
        let mut h = upsample2(&relu(&h));
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(&h);
            saved.push(h);
            if i + 1 == self.convs.len() {
                return (y, saved);
            }
            saved.push(y.clone());
            h = upsample2(&relu(&y));
        }
        unreachable!("decoder has at least one conv")
    }

    fn backward(&mut self, z: &Tensor<T>, saved: &[Tensor<T>], dy: &Tensor<T>) -> Tensor<T> {
        let k = self.convs.len();
        // saved layout: fc_out, (conv_in, conv_out)*, last conv_in
        let mut d = dy.clone();
        for i in (0..k).rev() {
            let input = &saved[1 + 2 * i];
            d = self.convs[i].backward(input, &d);
            let pre = &saved[2 * i];
            d = relu_backward(pre, &upsample2_backward(&d));
        }
        let n = z.shape()[0];
        let d = d.reshape(&[n, self.base * self.start * self.start]);
        self.fc.backward(z, &d)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.fc.params_mut();
        for c in &mut self.convs {
            out.extend(c.params_mut());
        }
        out
    }
}

/// Trains Ψ as the encoder of an autoencoder on the item images. Returns the
/// mean reconstruction loss per epoch.
pub fn pretrain_autoencoder<T: Real>(
    extractor: &mut FeatureExtractor<T>,
    images: &[&Image],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("pretraining needs images, epochs and a batch size"));
    }
    if !extractor.side.is_multiple_of(8) {
        return Err(Error::Shape(format!("pretraining needs a side divisible by 8, got {}", extractor.side)));
    }
    let mut rng = stream(cfg.seed, "extractor-pretrain");
    let mut decoder = Decoder::<T>::new(extractor.feature_dim(), extractor.side, &mut rng);
    let mut opt = Adam::<T>::new(cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let x = batch_tensor::<T>(&batch)?;
            let (z, cache) = extractor.forward(&x)?;
            let (recon, saved) = decoder.forward(&z);
            let diff = recon.sub(&x);
            let loss = diff.sq_norm().as_f64() / diff.numel() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "extractor pretraining", step, detail: format!("epoch {epoch}") });
            }
            total += loss * idx.len() as f64;
            let dy = diff.scale(T::of(2.0 / diff.numel() as f64));
            extractor.zero_grad();
            for p in decoder.params_mut() {
                p.zero_grad();
            }
            let dz = decoder.backward(&z, &saved, &dy);
            extractor.backward(&cache, &dz);
            let mut params = extractor.params_mut();
            params.extend(decoder.params_mut());
            opt.step(&mut params);
        }
        let mean = total / images.len() as f64;
        info!("extractor pretraining epoch {epoch}: reconstruction mse {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = stream(seed, "img");
        Image::new(side, (0..3 * side * side).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn batch_equals_single_and_duplicates_match() {
        let psi = FeatureExtractor::<f32>::new(16, 8, &mut stream(1, "psi"));
        let a = random_image(16, 1);
        let b = random_image(16, 2);
        let rows = psi.extract(&[&a, &b, &a]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], rows[2]);
        assert_eq!(psi.extract(&[&b]).unwrap()[0], rows[1]);
        assert!(rows.iter().all(|r| r.len() == 8));
        assert_eq!(psi.extract_penultimate(&[&a]).unwrap()[0].len(), 64);
    }

    #[test]
    fn zero_image_maps_to_zero_with_zero_bias() {
        let psi = FeatureExtractor::<f64>::new(16, 8, &mut stream(1, "psi"));
        let f = psi.extract(&[&Image::filled(16, 0.0)]).unwrap();
        assert!(f[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_side_is_rejected() {
        let psi = FeatureExtractor::<f32>::new(16, 8, &mut stream(1, "psi"));
        assert!(matches!(psi.extract(&[&Image::filled(8, 0.1)]), Err(Error::Shape(_))));
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn input_and_param_gradients_match_finite_differences() {
        let mut psi = FeatureExtractor::<f64>::new(16, 5, &mut stream(2, "psi"));
        let x = random_image(16, 3).to_tensor::<f64>();
        let w = Tensor::from_vec(&[1, 5], vec![0.3, -1.0, 0.7, 0.2, -0.4]);
        let loss = |p: &FeatureExtractor<f64>, x: &Tensor<f64>| dot(&p.features(x).unwrap(), &w);
        let (_, cache) = psi.forward(&x).unwrap();
        let dx = psi.input_grad(&cache, &w);
        psi.zero_grad();
        let dx2 = psi.backward_with_input(&cache, &w);
        assert_eq!(dx.data(), dx2.data());
        let h = 1e-6;
        for idx in [0usize, 100, 400, 700] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&psi, &xp) - loss(&psi, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{idx}] {fd} vs {}", dx.data()[idx]);
        }
        for (pi, idx) in [(0usize, 5usize), (2, 40), (4, 7)] {
            let analytic = psi.params_mut()[pi].grad[idx];
            let mut plus = psi.clone();
            plus.params_mut()[pi].value[idx] += h;
            let mut minus = psi.clone();
            minus.params_mut()[pi].value[idx] -= h;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{idx}] {fd} vs {analytic}");
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut rng = stream(4, "dec");
        let mut dec = Decoder::<f64>::new(6, 16, &mut rng);
        let z = Tensor::from_vec(&[2, 6], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let (y, saved) = dec.forward(&z);
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        let w = y.map(|v| v.cos());
        let dz = dec.backward(&z, &saved, &w);
        let h = 1e-6;
        for idx in [0usize, 5, 11] {
            let mut zp = z.clone();
            zp.data_mut()[idx] += h;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= h;
            let fd = (dot(&dec.forward(&zp).0, &w) - dot(&dec.forward(&zm).0, &w)) / (2.0 * h);
            assert!((fd - dz.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let imgs: Vec<Image> = (0..16)
            .map(|i| {
                let mut img = Image::filled(16, 0.1);
                let c = i % 3;
                for y in 0..8 {
                    for x in 0..8 {
                        img.set(c, y + (i / 3) % 8, x, 0.9);
                    }
                }
                img
            })
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut psi = FeatureExtractor::<f32>::new(16, 16, &mut stream(5, "psi"));
        let hist = pretrain_autoencoder(&mut psi, &refs, &PretrainConfig { epochs: 40, lr: 3e-3, batch_size: 8, seed: 1 }).unwrap();
        assert!(hist.last().unwrap() < &(hist[0] * 0.7), "{hist:?}");
    }
}
