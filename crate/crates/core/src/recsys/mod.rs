//! Visually-aware recommenders (VBPR, DVBPR, AMR), BPR training with
//! best-validation model selection, and full-catalog ranking.

pub mod dvbpr;
pub mod vbpr;

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vispromo_nn::{blob, Adam, Module};

use crate::dataset::{sample_triplets, validation_triplets, Catalog, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::RankingTable;
use crate::rng::stream;
use crate::visual::FeatureExtractor;

pub use dvbpr::Dvbpr;
pub use vbpr::{AdversaryConfig, Amr, Vbpr, VbprDims};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(s)`, stable for large `|s|`.
pub fn log_sigmoid_neg(s: f64) -> f64 {
    if s > 0.0 {
        (-s).exp().ln_1p()
    } else {
        -s + s.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vbpr,
    Dvbpr,
    Amr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vbpr, ModelKind::Dvbpr, ModelKind::Amr];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vbpr => "vbpr",
            ModelKind::Dvbpr => "dvbpr",
            ModelKind::Amr => "amr",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vbpr" => Ok(ModelKind::Vbpr),
            "dvbpr" => Ok(ModelKind::Dvbpr),
            "amr" => Ok(ModelKind::Amr),
            other => Err(Error::invalid(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Coupled L2 decay inside the optimizer.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        let epochs = match kind {
            ModelKind::Vbpr | ModelKind::Amr => 200,
            ModelKind::Dvbpr => 20,
        };
        Self { epochs, lr: 1e-3, weight_decay: 1e-3, batch_size: 512, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub visual_dim: usize,
    /// τ in `τ‖Θ‖²`, shared by every model.
    pub l2_reg: f64,
    pub adversary: AdversaryConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { latent_dim: 100, visual_dim: 100, l2_reg: 1e-4, adversary: AdversaryConfig::default() }
    }
}

/// Dense `[users, items]` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    users: usize,
    items: usize,
    data: Vec<f64>,
}

impl Scores {
    pub fn new(users: usize, items: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), users * items, "score matrix size");
        Self { users, items, data }
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.data[u * self.items + i]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.items..(u + 1) * self.items]
    }
}

/// Items by descending score with `exclude[i]` removed; ties go to the
/// lower index.
pub fn rank_items(scores: &[f64], exclude: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !exclude.get(i).copied().unwrap_or(false)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Per-user top-`depth` lists excluding each user's training and
/// validation items.
pub fn ranking_table(scores: &Scores, split: &Split, depth: usize) -> Result<RankingTable> {
    if scores.users() != split.num_users() {
        return Err(Error::Shape(format!("{} score rows for {} users", scores.users(), split.num_users())));
    }
    let lists = (0..scores.users())
        .into_par_iter()
        .map(|u| {
            let mask = split.known_mask(u, scores.items());
            let mut r = rank_items(scores.row(u), &mask);
            r.truncate(depth);
            r
        })
        .collect();
    Ok(RankingTable::new(lists))
}

/// Everything needed to rebuild a model from its parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub feature_dim: usize,
    pub image_side: usize,
    pub l2_reg: f64,
    pub adversary: AdversaryConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vbpr(Vbpr),
    Amr(Amr),
    Dvbpr(Dvbpr<f32>),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Vbpr(_) => ModelKind::Vbpr,
            Model::Amr(_) => ModelKind::Amr,
            Model::Dvbpr(_) => ModelKind::Dvbpr,
        }
    }

    pub fn shape(&self) -> ModelShape {
        match self {
            Model::Vbpr(m) | Model::Amr(Amr { base: m, .. }) => {
                let d = m.dims();
                ModelShape {
                    kind: self.kind(),
                    users: d.users,
                    items: d.items,
                    latent_dim: d.latent,
                    visual_dim: d.visual,
                    feature_dim: d.feature,
                    image_side: 0,
                    l2_reg: m.l2_reg(),
                    adversary: match self {
                        Model::Amr(a) => a.adversary,
                        _ => AdversaryConfig::default(),
                    },
                }
            }
            Model::Dvbpr(m) => ModelShape {
                kind: ModelKind::Dvbpr,
                users: m.num_users(),
                items: 0,
                latent_dim: 0,
                visual_dim: m.psi.feature_dim(),
                feature_dim: m.psi.feature_dim(),
                image_side: m.psi.side(),
                l2_reg: m.l2_reg(),
                adversary: AdversaryConfig::default(),
            },
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        match self {
            Model::Vbpr(m) => blob::save_module(m),
            Model::Amr(m) => blob::save_module(m),
            Model::Dvbpr(m) => blob::save_module(m),
        }
    }

    /// Rebuilds a model; VBPR and AMR also need the frozen item features.
    pub fn from_blob(shape: &ModelShape, features: Option<&[Vec<f64>]>, bytes: &[u8]) -> Result<Self> {
        let mut rng = stream(0, "model-skeleton");
        let vbpr = |rng: &mut crate::rng::StreamRng| -> Result<Vbpr> {
            let f = features.ok_or_else(|| Error::invalid("VBPR-family models need item features"))?;
            let dims = VbprDims {
                users: shape.users,
                items: shape.items,
                latent: shape.latent_dim,
                visual: shape.visual_dim,
                feature: shape.feature_dim,
            };
            Vbpr::new(dims, f, shape.l2_reg, rng)
        };
        let model = match shape.kind {
            ModelKind::Vbpr => {
                let mut m = vbpr(&mut rng)?;
                blob::load_module(&mut m, bytes)?;
                Model::Vbpr(m)
            }
            ModelKind::Amr => {
                let mut m = Amr::new(vbpr(&mut rng)?, shape.adversary);
                blob::load_module(&mut m, bytes)?;
                Model::Amr(m)
            }
            ModelKind::Dvbpr => {
                let psi = FeatureExtractor::<f32>::new(shape.image_side, shape.feature_dim, &mut rng);
                let mut m = Dvbpr::new(shape.users, psi, shape.l2_reg, &mut rng);
                blob::load_module(&mut m, bytes)?;
                Model::Dvbpr(m)
            }
        };
        Ok(model)
    }

    /// Copy that sees new images for `items`: VBPR and AMR refresh those
    /// rows of their feature cache through the frozen `extractor`; DVBPR
    /// needs nothing since it runs Ψ on whatever images it is scored with.
    pub fn with_replaced_items(&self, items: &[(usize, &Image)], extractor: &FeatureExtractor<f32>) -> Result<Model> {
        let mut out = self.clone();
        let base = match &mut out {
            Model::Vbpr(m) | Model::Amr(Amr { base: m, .. }) => m,
            Model::Dvbpr(_) => return Ok(out),
        };
        let imgs: Vec<&Image> = items.iter().map(|(_, img)| *img).collect();
        let feats = extractor.extract(&imgs)?;
        for ((item, _), f) in items.iter().zip(feats) {
            base.set_item_features(*item, &f)?;
        }
        Ok(out)
    }

    pub fn score_matrix(&self, images: &[Image]) -> Result<Scores> {
        match self {
            Model::Vbpr(m) => Ok(m.score_matrix()),
            Model::Amr(m) => Ok(m.score_matrix()),
            Model::Dvbpr(m) => m.score_matrix(images),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Model::Vbpr(m) => m.zero_grad(),
            Model::Amr(m) => m.zero_grad(),
            Model::Dvbpr(m) => m.zero_grad(),
        }
    }

    pub fn validation_loss(&self, triples: &[(usize, usize, usize)], images: &[Image]) -> Result<f64> {
        match self {
            Model::Vbpr(m) => Ok(m.validation_loss(triples)),
            Model::Amr(m) => Ok(m.validation_loss(triples)),
            Model::Dvbpr(m) => m.validation_loss(triples, images),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

/// Runs `cfg.epochs` epochs of BPR (with AMR's adversary step before every
/// model step) and returns the epoch with the lowest validation loss.
///
/// VBPR and AMR consume `features` (the frozen Ψ outputs per item); DVBPR
/// starts from a copy of `extractor` and trains it end to end.
pub fn train(
    kind: ModelKind,
    split: &Split,
    catalog: &Catalog,
    features: &[Vec<f64>],
    extractor: &FeatureExtractor<f32>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.num_users() != catalog.num_users() {
        return Err(Error::Shape("split and catalog disagree on users".into()));
    }
    let mut init = stream(cfg.seed, &format!("init-{kind}"));
    let dims = VbprDims {
        users: catalog.num_users(),
        items: catalog.num_items(),
        latent: model_cfg.latent_dim,
        visual: model_cfg.visual_dim,
        feature: features.first().map_or(extractor.feature_dim(), Vec::len),
    };
    let model = match kind {
        ModelKind::Vbpr => Model::Vbpr(Vbpr::new(dims, features, model_cfg.l2_reg, &mut init)?),
        ModelKind::Amr => Model::Amr(Amr::new(Vbpr::new(dims, features, model_cfg.l2_reg, &mut init)?, model_cfg.adversary)),
        ModelKind::Dvbpr => Model::Dvbpr(Dvbpr::new(catalog.num_users(), extractor.clone(), model_cfg.l2_reg, &mut init)),
    };
    fit(model, split, catalog, cfg)
}

fn fit(mut model: Model, split: &Split, catalog: &Catalog, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let kind = model.kind();
    let images = catalog.images();
    let val = validation_triplets(split, catalog, &mut stream(cfg.seed, "validation")).triples;
    let mut sampler = stream(cfg.seed, "triplets");
    let mut opt64 = Adam::<f64>::new(cfg.lr, cfg.weight_decay);
    let mut opt32 = Adam::<f32>::new(cfg.lr, cfg.weight_decay);
    let mut best: Option<(f64, usize, Model)> = None;
    let (mut train_hist, mut val_hist) = (Vec::new(), Vec::new());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batch = sample_triplets(split, catalog, &mut sampler);
        if batch.is_empty() {
            return Err(Error::invalid("no training triples could be sampled"));
        }
        let mut total = 0.0;
        for chunk in batch.triples.chunks(cfg.batch_size) {
            let loss = match &mut model {
                Model::Vbpr(m) => {
                    let l = m.loss_and_grad(chunk)?;
                    opt64.step(&mut m.params_mut());
                    l
                }
                Model::Amr(m) => {
                    m.adversary_step(chunk)?;
                    let l = m.loss_and_grad(chunk)?;
                    opt64.step(&mut m.base.params_mut());
                    l
                }
                Model::Dvbpr(m) => {
                    let l = m.loss_and_grad(chunk, images)?;
                    opt32.step(&mut m.params_mut());
                    l
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "recommender training", step, detail: format!("{kind} epoch {epoch}") });
            }
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = total / batch.len() as f64;
        let v = model.validation_loss(&val, images)?;
        if !v.is_finite() {
            return Err(Error::Diverged { stage: "recommender validation", step, detail: format!("{kind} epoch {epoch}") });
        }
        info!("{kind} epoch {epoch}: train {train_loss:.5} validation {v:.5}");
        train_hist.push(train_loss);
        val_hist.push(v);
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            let mut snapshot = model.clone();
            snapshot.zero_grad();
            best = Some((v, epoch, snapshot));
        }
    }
    let (best_validation_loss, best_epoch, model) = best.expect("at least one epoch");
    if best_epoch + 1 == cfg.epochs && cfg.epochs > 1 {
        warn!("{kind}: validation loss was still improving at the final epoch");
    }
    Ok(TrainOutcome { model, best_epoch, best_validation_loss, train_loss: train_hist, validation_loss: val_hist })
}
