//! Item-promotion attacks: feature-aligned perturbations hidden inside a
//! truncated, similarity-guided diffusion pass (IPDGI), and the direct
//! pixel-space baseline (AIP).

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vispromo_nn::{Adam, Param, Real, Tensor};

use crate::dataset::Catalog;
use crate::diffusion::{forward_sample, gaussian_like, guided_reverse_step, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{stream, StreamRng};
use crate::visual::{global_reference, select_reference, ClusterModel, DifferentiableFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Aip,
    Ipdgi,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Aip => "aip",
            AttackKind::Ipdgi => "ipdgi",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationInit {
    Gaussian,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in 1/255 pixel units.
    pub eps_max: f64,
    /// Perturbation optimization epochs `e`.
    pub epochs: usize,
    /// Truncated diffusion steps `T`.
    pub steps: usize,
    /// Guidance scale ξ.
    pub guidance: f64,
    pub lr: f64,
    pub seed: u64,
    pub no_clustering: bool,
    pub no_perturbation: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps_max: 16.0,
            epochs: 30,
            steps: 15,
            guidance: 15.0,
            lr: 0.01,
            seed: 0,
            no_clustering: false,
            no_perturbation: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.eps_max > 0.0 && self.eps_max <= 255.0) {
            return Err(Error::invalid("eps_max must lie in (0, 255]"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("perturbation epochs must be at least 1"));
        }
        if self.steps == 0 || self.steps > t_max {
            return Err(Error::invalid(format!("attack steps must lie in [1, {t_max}]")));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("perturbation learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipConfig {
    pub eps_max: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AipConfig {
    fn default() -> Self {
        Self { eps_max: 32.0, epochs: 500, lr: 0.001, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub target: usize,
    pub reference: usize,
    pub kind: AttackKind,
    #[serde(skip)]
    pub image: Option<Image>,
    /// Feature distance to the reference at the start of each epoch.
    pub trace: Vec<f64>,
    /// `‖Ψ(x0) − Ψ(x_ref)‖` before the attack.
    pub initial_distance: f64,
    /// `‖Ψ(x_adv) − Ψ(x_ref)‖` of the delivered image.
    pub final_distance: f64,
}

#[derive(Debug, Clone)]
pub struct Perturbation<T> {
    pub epsilon: Tensor<T>,
    pub trace: Vec<f64>,
    pub final_distance: f64,
}

fn l2_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt()
}

fn check_image_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Minimizes `‖Ψ(x_ref) − Ψ(x0 + ε)‖₂` over ε with Adam, projecting ε onto
/// the L∞ ball of radius `eps_max / 255` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn generate_perturbation<T: Real, P: DifferentiableFeatures<T> + ?Sized>(
    x0: &Tensor<T>,
    x_ref: &Tensor<T>,
    psi: &P,
    eps_max: f64,
    epochs: usize,
    lr: f64,
    init: PerturbationInit,
    rng: &mut StreamRng,
) -> Result<Perturbation<T>> {
    check_image_shape(x0, x_ref)?;
    if epochs == 0 {
        return Err(Error::invalid("perturbation epochs must be at least 1"));
    }
    let radius = eps_max / 255.0;
    let target = psi.embed(x_ref)?;
    let start = match init {
        PerturbationInit::Gaussian => gaussian_like::<T, _>(x0.shape(), rng),
        PerturbationInit::Zero => Tensor::zeros(x0.shape()),
    };
    let mut eps = Param::from_vec(x0.shape(), start.into_vec());
    let mut opt = Adam::<T>::new(lr, 0.0);
    let mut trace = Vec::with_capacity(epochs);
    let upstream = |f: &Tensor<T>| {
        let d = l2_distance(f, &target);
        if d == 0.0 {
            Tensor::zeros(f.shape())
        } else {
            let inv = T::of(1.0 / d);
            f.zip_map(&target, |a, b| (a - b) * inv)
        }
    };
    let (lo, hi) = (T::of(-radius), T::of(radius));
    for _ in 0..epochs {
        let x = Tensor::from_vec(x0.shape(), x0.data().iter().zip(&eps.value).map(|(a, b)| *a + *b).collect());
        let (f, grad) = psi.embed_with_grad(&x, &upstream)?;
        let d = l2_distance(&f, &target);
        if !d.is_finite() {
            return Err(Error::Diverged { stage: "perturbation", step: trace.len(), detail: "non-finite feature distance".into() });
        }
        trace.push(d);
        eps.grad.copy_from_slice(grad.data());
        opt.step(&mut [&mut eps]);
        for v in &mut eps.value {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }
    let x = Tensor::from_vec(x0.shape(), x0.data().iter().zip(&eps.value).map(|(a, b)| *a + *b).collect());
    let final_distance = l2_distance(&psi.embed(&x)?, &target);
    Ok(Perturbation { epsilon: Tensor::from_vec(x0.shape(), eps.value), trace, final_distance })
}

/// ζ = ε + δ.
pub fn fuse_noise<T: Real>(eps: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    check_image_shape(eps, delta)?;
    Ok(eps.add(delta))
}

fn deliver<T: Real>(x: &Tensor<T>) -> Result<Image> {
    Ok(Image::from_tensor(x)?.clamped().quantized())
}

fn feature_distance<T: Real, P: DifferentiableFeatures<T> + ?Sized>(psi: &P, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(l2_distance(&psi.embed(a)?, &psi.embed(b)?))
}

fn attack_stream(seed: u64, kind: AttackKind, target: usize) -> StreamRng {
    stream(seed, &format!("{kind}-{target}"))
}

/// Shared, read-only components of an IPDGI run.
pub struct IpdgiContext<'a, T, P: ?Sized, N: ?Sized> {
    pub catalog: &'a Catalog,
    pub clusters: &'a ClusterModel,
    pub psi: &'a P,
    pub net: &'a N,
    pub sched: &'a NoiseSchedule,
    pub _real: std::marker::PhantomData<T>,
}

impl<'a, T, P: ?Sized, N: ?Sized> IpdgiContext<'a, T, P, N> {
    pub fn new(catalog: &'a Catalog, clusters: &'a ClusterModel, psi: &'a P, net: &'a N, sched: &'a NoiseSchedule) -> Self {
        Self { catalog, clusters, psi, net, sched, _real: std::marker::PhantomData }
    }
}

/// Reference choice, perturbation, fusion with Gaussian noise, truncated
/// forward diffusion to step `T`, guided reverse steps back to 0, clipping
/// and 8-bit quantization.
pub fn ipdgi_attack<T, P, N>(target: usize, ctx: &IpdgiContext<'_, T, P, N>, cfg: &AttackConfig) -> Result<AdversarialResult>
where
    T: Real,
    P: DifferentiableFeatures<T> + ?Sized,
    N: NoisePredictor<T> + ?Sized,
{
    cfg.validate(ctx.sched.t_max())?;
    if target >= ctx.catalog.num_items() {
        return Err(Error::UnknownItem(target.to_string()));
    }
    let reference = if cfg.no_clustering {
        global_reference(target, ctx.catalog)?
    } else {
        select_reference(target, ctx.clusters, ctx.catalog)?
    };
    let mut rng = attack_stream(cfg.seed, AttackKind::Ipdgi, target);
    let x0 = ctx.catalog.image(target).to_tensor::<T>();
    let x_ref = ctx.catalog.image(reference).to_tensor::<T>();
    let (eps, trace) = if cfg.no_perturbation {
        (Tensor::zeros(x0.shape()), Vec::new())
    } else {
        let p = generate_perturbation(&x0, &x_ref, ctx.psi, cfg.eps_max, cfg.epochs, cfg.lr, PerturbationInit::Gaussian, &mut rng)?;
        (p.epsilon, p.trace)
    };
    let delta = gaussian_like::<T, _>(x0.shape(), &mut rng);
    let zeta = fuse_noise(&eps, &delta)?;
    let mut x = forward_sample(&x0, cfg.steps, &zeta, ctx.sched)?;
    for t in (1..=cfg.steps).rev() {
        x = guided_reverse_step(ctx.net, &x, t, &x0, cfg.guidance, ctx.sched, &mut rng)?;
    }
    let image = deliver(&x)?;
    let initial_distance = feature_distance(ctx.psi, &x0, &x_ref)?;
    let final_distance = feature_distance(ctx.psi, &image.to_tensor(), &x_ref)?;
    if trace.len() > 1 && trace[trace.len() - 1] > trace[0] {
        warn!("perturbation for item {target} did not reduce the feature distance");
    }
    Ok(AdversarialResult { target, reference, kind: AttackKind::Ipdgi, image: Some(image), trace, initial_distance, final_distance })
}

/// Optimizes a zero-initialized ε directly on the image toward the globally
/// most popular item, then delivers `clip(x0 + ε)`.
pub fn aip_attack<T, P>(target: usize, catalog: &Catalog, psi: &P, cfg: &AipConfig) -> Result<AdversarialResult>
where
    T: Real,
    P: DifferentiableFeatures<T> + ?Sized,
{
    if !(cfg.eps_max > 0.0 && cfg.eps_max <= 255.0) || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("AIP needs eps_max in (0, 255], epochs >= 1 and a positive learning rate"));
    }
    if target >= catalog.num_items() {
        return Err(Error::UnknownItem(target.to_string()));
    }
    let reference = global_reference(target, catalog)?;
    let mut rng = attack_stream(cfg.seed, AttackKind::Aip, target);
    let x0 = catalog.image(target).to_tensor::<T>();
    let x_ref = catalog.image(reference).to_tensor::<T>();
    let p = generate_perturbation(&x0, &x_ref, psi, cfg.eps_max, cfg.epochs, cfg.lr, PerturbationInit::Zero, &mut rng)?;
    let image = deliver(&x0.add(&p.epsilon))?;
    let initial_distance = feature_distance(psi, &x0, &x_ref)?;
    let final_distance = feature_distance(psi, &image.to_tensor(), &x_ref)?;
    Ok(AdversarialResult { target, reference, kind: AttackKind::Aip, image: Some(image), trace: p.trace, initial_distance, final_distance })
}

/// Runs IPDGI on every target in parallel; results follow `targets` order.
pub fn ipdgi_all<T, P, N>(targets: &[usize], ctx: &IpdgiContext<'_, T, P, N>, cfg: &AttackConfig) -> Result<Vec<AdversarialResult>>
where
    T: Real,
    P: DifferentiableFeatures<T> + ?Sized + Sync,
    N: NoisePredictor<T> + ?Sized + Sync,
{
    targets.par_iter().map(|&t| ipdgi_attack(t, ctx, cfg)).collect()
}

pub fn aip_all<T, P>(targets: &[usize], catalog: &Catalog, psi: &P, cfg: &AipConfig) -> Result<Vec<AdversarialResult>>
where
    T: Real,
    P: DifferentiableFeatures<T> + ?Sized + Sync,
{
    targets.par_iter().map(|&t| aip_attack(t, catalog, psi, cfg)).collect()
}
