//! Small residual encoder–decoder z_θ(x_t, t) and its training loop.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vispromo_nn::layers::{add_channel_bias, channel_sum, silu, silu_backward, upsample2, upsample2_backward};
use vispromo_nn::{prefixed, Adam, Conv2d, Linear, Module, Param, Real, Tensor};

use super::{forward_sample, gaussian_like, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::rng::stream;

const TIME_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub side: usize,
    pub base_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { side: 32, base_channels: 32 }
    }
}

/// Two-level residual network with an additive skip connection and a
/// sinusoidal time embedding injected as per-channel offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    cfg: DenoiserConfig,
    t1: Linear<T>,
    t2: Linear<T>,
    conv_in: Conv2d<T>,
    res_a: Conv2d<T>,
    res_b: Conv2d<T>,
    down: Conv2d<T>,
    mid: Conv2d<T>,
    up: Conv2d<T>,
    conv_out: Conv2d<T>,
}

struct Cache<T> {
    x: Tensor<T>,
    te: Tensor<T>,
    e1: Tensor<T>,
    a: Tensor<T>,
    h0b: Tensor<T>,
    a0: Tensor<T>,
    p1: Tensor<T>,
    q1: Tensor<T>,
    r1: Tensor<T>,
    dnb: Tensor<T>,
    d: Tensor<T>,
    pm: Tensor<T>,
    upx: Tensor<T>,
    pu: Tensor<T>,
    s: Tensor<T>,
}

pub fn time_embedding<T: Real>(t: &[usize]) -> Tensor<T> {
    let half = TIME_DIM / 2;
    let mut data = Vec::with_capacity(t.len() * TIME_DIM);
    for &step in t {
        let step = step as f64;
        for j in 0..half {
            data.push(T::of((step / 10_000f64.powf(j as f64 / half as f64)).sin()));
        }
        for j in 0..half {
            data.push(T::of((step / 10_000f64.powf(j as f64 / half as f64)).cos()));
        }
    }
    Tensor::from_vec(&[t.len(), TIME_DIM], data)
}

fn split_cols<T: Real>(x: &Tensor<T>, at: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, w) = (x.shape()[0], x.shape()[1]);
    let mut a = Vec::with_capacity(n * at);
    let mut b = Vec::with_capacity(n * (w - at));
    for row in x.data().chunks(w) {
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    (Tensor::from_vec(&[n, at], a), Tensor::from_vec(&[n, w - at], b))
}

fn join_cols<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = a.shape()[0];
    let (wa, wb) = (a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(n * (wa + wb));
    for (ra, rb) in a.data().chunks(wa).zip(b.data().chunks(wb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::from_vec(&[n, wa + wb], out)
}

impl<T: Real> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Result<Self> {
        if cfg.side < 2 || !cfg.side.is_multiple_of(2) || cfg.base_channels == 0 {
            return Err(Error::invalid("denoiser needs an even side and at least one channel"));
        }
        let c = cfg.base_channels;
        let hidden = 4 * c;
        Ok(Self {
            cfg,
            t1: Linear::new(TIME_DIM, hidden, rng),
            t2: Linear::new(hidden, 3 * c, rng),
            conv_in: Conv2d::new(3, c, 3, 1, 1, true, rng),
            res_a: Conv2d::new(c, c, 3, 1, 1, true, rng),
            res_b: Conv2d::new(c, c, 3, 1, 1, true, rng),
            down: Conv2d::new(c, 2 * c, 3, 2, 1, true, rng),
            mid: Conv2d::new(2 * c, 2 * c, 3, 1, 1, true, rng),
            up: Conv2d::new(2 * c, c, 3, 1, 1, true, rng),
            conv_out: Conv2d::new(c, 3, 3, 1, 1, true, rng).zero_init(),
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    fn check(&self, x: &Tensor<T>, t: &[usize]) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.side || s[3] != self.cfg.side {
            return Err(Error::Shape(format!("denoiser expects [N, 3, {0}, {0}], got {s:?}", self.cfg.side)));
        }
        if t.len() != s[0] {
            return Err(Error::Shape(format!("{} steps for a batch of {}", t.len(), s[0])));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Tensor<T>, t: &[usize]) -> Result<(Tensor<T>, Cache<T>)> {
        self.check(x, t)?;
        let c = self.cfg.base_channels;
        let te = time_embedding::<T>(t);
        let e1 = self.t1.forward(&te);
        let a = silu(&e1);
        let e2 = self.t2.forward(&a);
        let (b1, b2) = split_cols(&e2, c);
        let h0b = add_channel_bias(&self.conv_in.forward(x), &b1);
        let a0 = silu(&h0b);
        let p1 = self.res_a.forward(&a0);
        let q1 = silu(&p1);
        let r1 = self.res_b.forward(&q1).add(&a0);
        let dnb = add_channel_bias(&self.down.forward(&r1), &b2);
        let d = silu(&dnb);
        let pm = self.mid.forward(&d);
        let m = silu(&pm).add(&d);
        let upx = upsample2(&m);
        let pu = self.up.forward(&upx);
        let s = silu(&pu).add(&r1);
        let out = self.conv_out.forward(&s);
        Ok((out, Cache { x: x.clone(), te, e1, a, h0b, a0, p1, q1, r1, dnb, d, pm, upx, pu, s }))
    }

    pub fn forward(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, t)?.0)
    }

    fn backward(&mut self, cache: &Cache<T>, dout: &Tensor<T>) {
        let ds = self.conv_out.backward(&cache.s, dout);
        let mut dr1 = ds.clone();
        let dpu = silu_backward(&cache.pu, &ds);
        let dm = upsample2_backward(&self.up.backward(&cache.upx, &dpu));
        let dpm = silu_backward(&cache.pm, &dm);
        let dd = dm.add(&self.mid.backward(&cache.d, &dpm));
        let ddnb = silu_backward(&cache.dnb, &dd);
        let db2 = channel_sum(&ddnb);
        dr1.add_assign(&self.down.backward(&cache.r1, &ddnb));
        let dq1 = self.res_b.backward(&cache.q1, &dr1);
        let dp1 = silu_backward(&cache.p1, &dq1);
        let da0 = dr1.add(&self.res_a.backward(&cache.a0, &dp1));
        let dh0b = silu_backward(&cache.h0b, &da0);
        let db1 = channel_sum(&dh0b);
        self.conv_in.backward_params(&cache.x, &dh0b);
        let de2 = join_cols(&db1, &db2);
        let da = self.t2.backward(&cache.a, &de2);
        let de1 = silu_backward(&cache.e1, &da);
        self.t1.backward_params(&cache.te, &de1);
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg,
            t1: self.t1.cast(),
            t2: self.t2.cast(),
            conv_in: self.conv_in.cast(),
            res_a: self.res_a.cast(),
            res_b: self.res_b.cast(),
            down: self.down.cast(),
            mid: self.mid.cast(),
            up: self.up.cast(),
            conv_out: self.conv_out.cast(),
        }
    }
}

impl<T: Real> Module<T> for Denoiser<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = prefixed("time1", self.t1.named_params());
        out.extend(prefixed("time2", self.t2.named_params()));
        out.extend(prefixed("conv_in", self.conv_in.named_params()));
        out.extend(prefixed("res_a", self.res_a.named_params()));
        out.extend(prefixed("res_b", self.res_b.named_params()));
        out.extend(prefixed("down", self.down.named_params()));
        out.extend(prefixed("mid", self.mid.named_params()));
        out.extend(prefixed("up", self.up.named_params()));
        out.extend(prefixed("conv_out", self.conv_out.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.t1.params_mut();
        out.extend(self.t2.params_mut());
        out.extend(self.conv_in.params_mut());
        out.extend(self.res_a.params_mut());
        out.extend(self.res_b.params_mut());
        out.extend(self.down.params_mut());
        out.extend(self.mid.params_mut());
        out.extend(self.up.params_mut());
        out.extend(self.conv_out.params_mut());
        out
    }
}

impl<T: Real> NoisePredictor<T> for Denoiser<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        self.forward(x_t, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub net: DenoiserConfig,
    /// Samples in the fixed evaluation set used to report L_simple.
    pub eval_samples: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 2e-3, batch_size: 32, seed: 0, net: DenoiserConfig::default(), eval_samples: 256 }
    }
}

/// Mean squared error between `noise` and the prediction, with the
/// gradient of that loss w.r.t. the prediction.
fn simple_loss<T: Real>(pred: &Tensor<T>, noise: &Tensor<T>) -> (f64, Tensor<T>) {
    let diff = pred.sub(noise);
    let n = diff.numel() as f64;
    (diff.sq_norm().as_f64() / n, diff.scale(T::of(2.0 / n)))
}

struct EvalSet<T> {
    x_t: Vec<Tensor<T>>,
    t: Vec<Vec<usize>>,
    noise: Vec<Tensor<T>>,
}

fn eval_set<T: Real>(images: &[&Image], sched: &NoiseSchedule, samples: usize, seed: u64) -> Result<EvalSet<T>> {
    let mut rng = stream(seed, "denoiser-eval");
    let mut set = EvalSet { x_t: Vec::new(), t: Vec::new(), noise: Vec::new() };
    let idx: Vec<usize> = (0..samples).map(|_| rng.random_range(0..images.len())).collect();
    for chunk in idx.chunks(32) {
        let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
        let x0 = batch_tensor::<T>(&batch)?;
        let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=sched.t_max())).collect();
        let z: Tensor<T> = gaussian_like(x0.shape(), &mut rng);
        let mut xt = Tensor::zeros(x0.shape());
        for (b, &tb) in t.iter().enumerate() {
            let one = forward_sample(
                &Tensor::from_vec(&[1, 3, x0.shape()[2], x0.shape()[3]], x0.item(b).to_vec()),
                tb,
                &Tensor::from_vec(&[1, 3, x0.shape()[2], x0.shape()[3]], z.item(b).to_vec()),
                sched,
            )?;
            xt.item_mut(b).copy_from_slice(one.data());
        }
        set.x_t.push(xt);
        set.t.push(t);
        set.noise.push(z);
    }
    Ok(set)
}

fn eval_loss_on<T: Real>(net: &Denoiser<T>, set: &EvalSet<T>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((x, t), z) in set.x_t.iter().zip(&set.t).zip(&set.noise) {
        let pred = net.forward(x, t)?;
        total += simple_loss(&pred, z).0 * z.numel() as f64;
        count += z.numel();
    }
    Ok(total / count as f64)
}

/// L_simple of `net` on a fixed evaluation set drawn with `seed`.
pub fn evaluate_loss<T: Real>(net: &Denoiser<T>, images: &[&Image], sched: &NoiseSchedule, samples: usize, seed: u64) -> Result<f64> {
    eval_loss_on(net, &eval_set(images, sched, samples, seed)?)
}

/// Trained network plus L_simple on the fixed evaluation set before
/// training and after each epoch.
pub struct TrainedDenoiser<T> {
    pub net: Denoiser<T>,
    pub eval_history: Vec<f64>,
}

/// Minimizes `E‖z − z_θ(x_t, t)‖²` with uniformly sampled `t`.
pub fn train_denoiser<T: Real>(
    images: &[&Image],
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<TrainedDenoiser<T>> {
    if images.is_empty() {
        return Err(Error::invalid("denoiser training needs at least one image"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("denoiser training needs epochs, a batch size and a positive learning rate"));
    }
    let mut rng = stream(cfg.seed, "denoiser-train");
    let mut net = Denoiser::<T>::new(cfg.net, &mut rng)?;
    let set = eval_set::<T>(images, sched, cfg.eval_samples.max(1), cfg.seed)?;
    let mut history = vec![eval_loss_on(&net, &set)?];
    info!("denoiser initial L_simple {:.4}", history[0]);
    let mut opt = Adam::<T>::new(cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let x0 = batch_tensor::<T>(&batch)?;
            let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=sched.t_max())).collect();
            let z: Tensor<T> = gaussian_like(x0.shape(), &mut rng);
            let mut xt = x0.clone();
            for (b, &tb) in t.iter().enumerate() {
                let ab = sched.alpha_bar(tb)?;
                let (sa, sb) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
                let zb = z.item(b).to_vec();
                for (v, e) in xt.item_mut(b).iter_mut().zip(zb) {
                    *v = sa * *v + sb * e;
                }
            }
            let (pred, cache) = net.forward_cached(&xt, &t)?;
            let (loss, dpred) = simple_loss(&pred, &z);
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "denoiser training", step, detail: format!("epoch {epoch}") });
            }
            net.zero_grad();
            net.backward(&cache, &dpred);
            opt.step(&mut net.params_mut());
            step += 1;
        }
        let l = eval_loss_on(&net, &set)?;
        info!("denoiser epoch {epoch}: eval L_simple {l:.4}");
        history.push(l);
    }
    Ok(TrainedDenoiser { net, eval_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn output_shape_and_zero_init() {
        let net = Denoiser::<f32>::new(DenoiserConfig { side: 8, base_channels: 4 }, &mut stream(0, "n")).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.3);
        for t in [1, 500, 1000] {
            let y = net.forward(&x, &[t, t]).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
        assert!(net.forward(&Tensor::full(&[1, 3, 6, 6], 0.0), &[1]).is_err());
        assert!(net.forward(&x, &[1]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(1, "fd");
        let mut net = Denoiser::<f64>::new(DenoiserConfig { side: 4, base_channels: 3 }, &mut rng).unwrap();
        // give the output layer weights so every path carries gradient
        for p in net.conv_out.params_mut() {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
            }
        }
        let x: Tensor<f64> = gaussian_like(&[2, 3, 4, 4], &mut rng);
        let t = [3usize, 700];
        let w: Tensor<f64> = gaussian_like(&[2, 3, 4, 4], &mut rng);
        let (_, cache) = net.forward_cached(&x, &t).unwrap();
        net.zero_grad();
        net.backward(&cache, &w);
        let h = 1e-6;
        let count = net.params_mut().len();
        for pi in 0..count {
            let len = net.params_mut()[pi].len();
            for idx in [0, len / 2, len - 1] {
                let analytic = net.params_mut()[pi].grad[idx];
                let mut plus = net.clone();
                plus.params_mut()[pi].value[idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[idx] -= h;
                let fd = (dot(&plus.forward(&x, &t).unwrap(), &w) - dot(&minus.forward(&x, &t).unwrap(), &w)) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "param {pi}[{idx}]: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let mut rng = stream(2, "l");
        let p: Tensor<f64> = gaussian_like(&[3, 3, 2, 2], &mut rng);
        let z: Tensor<f64> = gaussian_like(&[3, 3, 2, 2], &mut rng);
        let whole = simple_loss(&p, &z).0;
        let parts: f64 = (0..3)
            .map(|b| {
                let pb = Tensor::from_vec(&[1, 3, 2, 2], p.item(b).to_vec());
                let zb = Tensor::from_vec(&[1, 3, 2, 2], z.item(b).to_vec());
                simple_loss(&pb, &zb).0
            })
            .sum::<f64>()
            / 3.0;
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn untrained_loss_is_unit_and_training_reduces_it() {
        let imgs: Vec<Image> = (0..24)
            .map(|i| {
                let mut img = Image::filled(8, 0.1 * (i % 5) as f32);
                for y in 2..6 {
                    img.set(i % 3, y, y, 0.9);
                }
                img
            })
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let sched = build_schedule(100, ScheduleKind::Linear).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            seed: 3,
            net: DenoiserConfig { side: 8, base_channels: 8 },
            eval_samples: 128,
        };
        let out = train_denoiser::<f32>(&refs, &sched, &cfg).unwrap();
        let h = &out.eval_history;
        assert!((h[0] - 1.0).abs() < 0.1, "initial {}", h[0]);
        assert!(h.last().unwrap() < &(0.5 * h[0]), "{h:?}");
        let again = evaluate_loss(&out.net, &refs, &sched, 128, 3).unwrap();
        assert!((again - h.last().unwrap()).abs() < 1e-9);
    }
}
