//! DDPM noise schedule, forward noising, ancestral reverse steps and the
//! similarity-guided reverse step.

pub mod denoiser;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vispromo_nn::{Real, Tensor};

use crate::error::{Error, Result};

pub use denoiser::{evaluate_loss, train_denoiser, Denoiser, DenoiserConfig, DiffusionTrainConfig};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_T_MAX: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step β, α = 1 − β and ᾱ = ∏ α, stored for t = 1..=T_max at index
/// `t - 1`. The reverse variance is β.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max() {
            return Err(Error::invalid(format!("step {t} outside [1, {}]", self.t_max())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// Reverse-step variance σ_t².
    pub fn sigma2(&self, t: usize) -> Result<f64> {
        self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linear β from [`BETA_START`] to [`BETA_END`].
pub fn build_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::invalid("T_max must be at least 1"));
    }
    match kind {
        ScheduleKind::Linear => {
            let betas = if t_max == 1 {
                vec![BETA_START]
            } else {
                (0..t_max).map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t_max - 1) as f64).collect()
            };
            NoiseSchedule::from_betas(betas)
        }
    }
}

pub fn gaussian_like<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect())
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · noise`.
pub fn forward_sample<T: Real>(x0: &Tensor<T>, t: usize, noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(x0.zip_map(noise, |x, z| a * x + b * z))
}

/// Predicts the noise that was mixed into `x_t`.
pub trait NoisePredictor<T: Real>: Sync {
    /// `x_t` is `[N, C, H, W]`; `t` holds one step per sample.
    fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>>;
}

/// Posterior mean `(x_t − β_t/√(1 − ᾱ_t) · ẑ) / √α_t` for a shared step `t`.
pub fn reverse_mean<T: Real, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (beta, alpha, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
    let steps = vec![t; x_t.batch()];
    let z = net.predict_noise(x_t, &steps)?;
    if z.shape() != x_t.shape() {
        return Err(Error::Shape(format!("noise prediction {:?} vs input {:?}", z.shape(), x_t.shape())));
    }
    let c = T::of(beta / (1.0 - ab).sqrt());
    let inv = T::of(1.0 / alpha.sqrt());
    Ok(x_t.zip_map(&z, |x, e| (x - c * e) * inv))
}

fn add_noise<T: Real, R: Rng + ?Sized>(mut mean: Tensor<T>, t: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<Tensor<T>> {
    if t > 1 {
        let sigma = T::of(sched.sigma2(t)?.sqrt());
        for v in mean.data_mut() {
            *v += sigma * T::of(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(mean)
}

/// One ancestral step `x_t → x_{t−1}`; no noise is added at `t = 1`.
pub fn reverse_step<T: Real, N: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    net: &N,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mean = reverse_mean(net, x_t, t, sched)?;
    add_noise(mean, t, sched, rng)
}

/// Gradient of `−‖x0 − x‖²` w.r.t. `x`, pointing toward `x0`.
pub fn similarity_gradient<T: Real>(x0: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != x.shape() {
        return Err(Error::Shape(format!("guide {:?} vs sample {:?}", x0.shape(), x.shape())));
    }
    let two = T::of(2.0);
    Ok(x0.zip_map(x, |a, b| two * (a - b)))
}

/// Reverse step whose mean is shifted by `ξ σ_t² g` with `g` the
/// similarity gradient toward `x0`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<T: Real, N: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    net: &N,
    x_t: &Tensor<T>,
    t: usize,
    x0: &Tensor<T>,
    scale: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if scale < 0.0 {
        return Err(Error::invalid("guidance scale must be non-negative"));
    }
    let g = similarity_gradient(x0, x_t)?;
    let mut mean = reverse_mean(net, x_t, t, sched)?;
    let k = T::of(scale * sched.sigma2(t)?);
    for (m, gv) in mean.data_mut().iter_mut().zip(g.data()) {
        *m += k * *gv;
    }
    add_noise(mean, t, sched, rng)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Always predicts zero noise.
    pub struct ZeroNoise;

    impl<T: Real> NoisePredictor<T> for ZeroNoise {
        fn predict_noise(&self, x_t: &Tensor<T>, _t: &[usize]) -> Result<Tensor<T>> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    /// Returns a fixed tensor regardless of input.
    pub struct Fixed<T>(pub Tensor<T>);

    impl<T: Real> NoisePredictor<T> for Fixed<T> {
        fn predict_noise(&self, _x_t: &Tensor<T>, _t: &[usize]) -> Result<Tensor<T>> {
            Ok(self.0.clone())
        }
    }

    /// Ideal predictor for a point-mass data distribution at `x0`.
    pub struct PointMass<T> {
        pub x0: Tensor<T>,
        pub sched: NoiseSchedule,
    }

    impl<T: Real> NoisePredictor<T> for PointMass<T> {
        fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
            let ab = self.sched.alpha_bar(t[0])?;
            let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
            Ok(x_t.zip_map(&self.x0, |x, m| (x - a * m) / b))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::rng::stream;

    #[test]
    fn schedule_single_and_constant() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.3);
        let b = 0.05;
        let s = NoiseSchedule::from_betas(vec![b; 20]).unwrap();
        for t in 1..=20 {
            assert!((s.alpha_bar(t).unwrap() - (1.0 - b).powi(t as i32)).abs() < 1e-14);
        }
        assert!(build_schedule(0, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
    }

    #[test]
    fn linear_schedule_exact_and_monotone() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1).unwrap(), BETA_START);
        assert!((s.beta(1000).unwrap() - BETA_END).abs() < 1e-15);
        let mut acc = 1.0;
        for t in 1..=1000 {
            assert_eq!(s.alpha(t).unwrap(), 1.0 - s.beta(t).unwrap());
            acc *= s.alpha(t).unwrap();
            assert_eq!(s.alpha_bar(t).unwrap().to_bits(), acc.to_bits());
            assert!(s.alpha_bar(t).unwrap() > 0.0 && s.alpha_bar(t).unwrap() < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn forward_sample_reductions() {
        let s = build_schedule(100, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![0.2, 0.5, 0.9]);
        let z = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![1.0, -1.0, 0.3]);
        let ab = s.alpha_bar(40).unwrap();
        let a = forward_sample(&x0, 40, &Tensor::zeros(&[1, 3, 1, 1]), &s).unwrap();
        assert_eq!(a.data(), x0.scale(ab.sqrt()).data());
        let b = forward_sample(&Tensor::zeros(&[1, 3, 1, 1]), 40, &z, &s).unwrap();
        assert_eq!(b.data(), z.scale((1.0 - ab).sqrt()).data());
        assert!(forward_sample(&x0, 0, &z, &s).is_err());
    }

    #[test]
    fn zero_predictor_reverse_step_reduces_to_formula() {
        let s = build_schedule(10, ScheduleKind::Linear).unwrap();
        let x = Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut r1 = stream(3, "rev");
        let mut r2 = stream(3, "rev");
        let got = reverse_step(&ZeroNoise, &x, 2, &s, &mut r1).unwrap();
        let z: Tensor<f64> = gaussian_like(&[1, 3, 1, 2], &mut r2);
        let sig = s.beta(2).unwrap().sqrt();
        let a = s.alpha(2).unwrap().sqrt();
        for ((g, xv), zv) in got.data().iter().zip(x.data()).zip(z.data()) {
            assert!((g - (xv / a + sig * zv)).abs() < 1e-15);
        }
        let last = reverse_step(&ZeroNoise, &x, 1, &s, &mut r1).unwrap();
        let a1 = s.alpha(1).unwrap().sqrt();
        assert!(last.data().iter().zip(x.data()).all(|(l, xv)| (l - xv / a1).abs() < 1e-15));
    }

    #[test]
    fn true_noise_inverts_one_forward_step() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = stream(1, "inv");
        let x0 = gaussian_like::<f64, _>(&[2, 3, 4, 4], &mut rng).map(|v| v.abs().min(1.0));
        let z: Tensor<f64> = gaussian_like(&[2, 3, 4, 4], &mut rng);
        // at t = 1 the posterior mean from the true noise is exactly x0
        let x1 = forward_sample(&x0, 1, &z, &s).unwrap();
        let back = reverse_mean(&Fixed(z.clone()), &x1, 1, &s).unwrap();
        for (b, x) in back.data().iter().zip(x0.data()) {
            assert!((b - x).abs() <= 1e-5 * x.abs().max(1e-3), "{b} vs {x}");
        }
        // at t > 1 it inverts a single step from x_{t-1}
        let xt1 = x0.clone();
        let zt: Tensor<f64> = gaussian_like(&[2, 3, 4, 4], &mut rng);
        let t = 7;
        let a = s.alpha(t).unwrap();
        let xt = xt1.zip_map(&zt, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e);
        let eps_equiv = zt.scale((1.0 - a).sqrt() * (1.0 - s.alpha_bar(t).unwrap()).sqrt() / s.beta(t).unwrap());
        let back = reverse_mean(&Fixed(eps_equiv), &xt, t, &s).unwrap();
        for (b, x) in back.data().iter().zip(xt1.data()) {
            assert!((b - x).abs() <= 1e-5 * x.abs().max(1e-3));
        }
    }

    #[test]
    fn guidance_vanishes_at_zero_scale_and_at_x0() {
        let s = build_schedule(50, ScheduleKind::Linear).unwrap();
        let mut rng = stream(2, "g");
        let x: Tensor<f64> = gaussian_like(&[1, 3, 2, 2], &mut rng);
        let x0: Tensor<f64> = gaussian_like(&[1, 3, 2, 2], &mut rng);
        let a = guided_reverse_step::<f64, _, _>(&ZeroNoise, &x, 9, &x0, 0.0, &s, &mut stream(5, "r")).unwrap();
        let b = reverse_step::<f64, _, _>(&ZeroNoise, &x, 9, &s, &mut stream(5, "r")).unwrap();
        assert_eq!(a.data(), b.data());
        let c = guided_reverse_step::<f64, _, _>(&ZeroNoise, &x, 9, &x, 50.0, &s, &mut stream(5, "r")).unwrap();
        let d = reverse_step::<f64, _, _>(&ZeroNoise, &x, 9, &s, &mut stream(5, "r")).unwrap();
        assert_eq!(c.data(), d.data());
        assert!(guided_reverse_step(&ZeroNoise, &x, 9, &Tensor::zeros(&[1, 3, 1, 1]), 1.0, &s, &mut rng).is_err());
    }

    #[test]
    fn reverse_is_deterministic_for_seeded_stream() {
        let s = build_schedule(20, ScheduleKind::Linear).unwrap();
        let x = Tensor::<f32>::full(&[1, 3, 2, 2], 0.4);
        let a = reverse_step(&ZeroNoise, &x, 5, &s, &mut stream(8, "d")).unwrap();
        let b = reverse_step(&ZeroNoise, &x, 5, &s, &mut stream(8, "d")).unwrap();
        assert_eq!(a, b);
    }

    /// Full truncated guided trajectory, returning the final MSE to x0.
    fn trajectory_mse(scale: f64, seed: u64) -> f64 {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = stream(seed, "traj");
        let x0 = gaussian_like::<f64, _>(&[1, 3, 8, 8], &mut rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        // toy denoiser: ideal for a point mass at a different image
        let other = x0.map(|v| 1.0 - v);
        let net = PointMass { x0: other, sched: s.clone() };
        let z: Tensor<f64> = gaussian_like(x0.shape(), &mut rng);
        let mut x = forward_sample(&x0, 15, &z, &s).unwrap();
        for t in (1..=15).rev() {
            x = guided_reverse_step(&net, &x, t, &x0, scale, &s, &mut rng).unwrap();
        }
        let d = x.sub(&x0);
        d.sq_norm() / d.numel() as f64
    }

    #[test]
    fn stronger_guidance_lands_closer_to_x0() {
        let mut means = Vec::new();
        for scale in [0.0, 5.0, 15.0, 50.0] {
            let m: f64 = (0..20).map(|seed| trajectory_mse(scale, seed)).sum::<f64>() / 20.0;
            means.push(m);
        }
        for w in means.windows(2) {
            assert!(w[1] <= w[0], "{means:?}");
        }
        assert!(means[3] < means[0]);
    }

    #[test]
    fn forward_moments_match_monte_carlo() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.9]);
        let draws = 10_000;
        let mut rng = stream(4, "moments");
        for t in [10, 100, 500] {
            let ab = s.alpha_bar(t).unwrap();
            let mut sum = vec![0.0; 6];
            let mut sq = vec![0.0; 6];
            for _ in 0..draws {
                let z: Tensor<f64> = gaussian_like(&[1, 3, 1, 2], &mut rng);
                let xt = forward_sample(&x0, t, &z, &s).unwrap();
                for (p, v) in xt.data().iter().enumerate() {
                    sum[p] += v;
                    sq[p] += v * v;
                }
            }
            for p in 0..6 {
                let n = draws as f64;
                let mean = sum[p] / n;
                let var = (sq[p] - n * mean * mean) / (n - 1.0);
                let want_var = 1.0 - ab;
                assert!((mean - ab.sqrt() * x0.data()[p]).abs() < 3.0 * (want_var / n).sqrt());
                // standard error of the sample variance of a Gaussian
                assert!((var - want_var).abs() < 3.0 * want_var * (2.0 / (n - 1.0)).sqrt());
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn alpha_bar_decreasing_for_any_length(t_max in 1usize..1500) {
            let s = build_schedule(t_max, ScheduleKind::Linear).unwrap();
            let ab = s.alpha_bars();
            proptest::prop_assert_eq!(ab.len(), t_max);
            proptest::prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
            proptest::prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn guidance_shift_is_linear_in_scale(
            xs in proptest::collection::vec(0.0f64..1.0, 6),
            guide in proptest::collection::vec(0.0f64..1.0, 6),
            t in 1usize..50,
            scale in 0.0f64..100.0,
            seed in 0u64..1000,
        ) {
            let s = build_schedule(50, ScheduleKind::Linear).unwrap();
            let x = Tensor::<f64>::from_vec(&[1, 3, 1, 2], xs);
            let x0 = Tensor::<f64>::from_vec(&[1, 3, 1, 2], guide);
            let plain = reverse_step(&ZeroNoise, &x, t, &s, &mut stream(seed, "g")).unwrap();
            let zero = guided_reverse_step(&ZeroNoise, &x, t, &x0, 0.0, &s, &mut stream(seed, "g")).unwrap();
            proptest::prop_assert_eq!(plain.data(), zero.data());
            let got = guided_reverse_step(&ZeroNoise, &x, t, &x0, scale, &s, &mut stream(seed, "g")).unwrap();
            let k = scale * s.beta(t).unwrap();
            for i in 0..6 {
                let want = plain.data()[i] + k * 2.0 * (x0.data()[i] - x.data()[i]);
                proptest::prop_assert!((got.data()[i] - want).abs() < 1e-9);
            }
        }
    }
}
