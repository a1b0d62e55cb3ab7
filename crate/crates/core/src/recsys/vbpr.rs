//! VBPR and its adversarially trained variant AMR, both over a frozen
//! feature cache.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vispromo_nn::{gemm, Module, Param};

use super::{log_sigmoid_neg, sigmoid, Scores};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VbprDims {
    pub users: usize,
    pub items: usize,
    pub latent: usize,
    pub visual: usize,
    pub feature: usize,
}

/// `y = χ + η_u + η_i + λ_uᵀλ_i + φ_uᵀ(E f_i) + η_vᵀ f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vbpr {
    pub chi: Param<f64>,
    pub user_bias: Param<f64>,
    pub item_bias: Param<f64>,
    pub user_latent: Param<f64>,
    pub item_latent: Param<f64>,
    /// E, stored `[visual, feature]`.
    pub embed: Param<f64>,
    pub user_visual: Param<f64>,
    pub visual_bias: Param<f64>,
    dims: VbprDims,
    l2_reg: f64,
    features: Vec<f64>,
}

const INIT_STD: f64 = 0.01;

fn row(data: &[f64], r: usize, width: usize) -> &[f64] {
    &data[r * width..(r + 1) * width]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn flatten_features(features: &[Vec<f64>], items: usize, width: usize) -> Result<Vec<f64>> {
    if features.len() != items || features.iter().any(|f| f.len() != width) {
        return Err(Error::Shape(format!("expected {items} feature rows of width {width}")));
    }
    Ok(features.iter().flatten().copied().collect())
}

impl Vbpr {
    pub fn new<R: Rng + ?Sized>(dims: VbprDims, features: &[Vec<f64>], l2_reg: f64, rng: &mut R) -> Result<Self> {
        let features = flatten_features(features, dims.items, dims.feature)?;
        Ok(Self {
            chi: Param::zeros(&[1]),
            user_bias: Param::zeros(&[dims.users]),
            item_bias: Param::zeros(&[dims.items]),
            user_latent: Param::normal(&[dims.users, dims.latent], INIT_STD, rng),
            item_latent: Param::normal(&[dims.items, dims.latent], INIT_STD, rng),
            embed: Param::normal(&[dims.visual, dims.feature], INIT_STD, rng),
            user_visual: Param::normal(&[dims.users, dims.visual], INIT_STD, rng),
            visual_bias: Param::zeros(&[dims.feature]),
            dims,
            l2_reg,
            features,
        })
    }

    pub fn dims(&self) -> VbprDims {
        self.dims
    }

    pub fn l2_reg(&self) -> f64 {
        self.l2_reg
    }

    pub fn item_features(&self, item: usize) -> &[f64] {
        row(&self.features, item, self.dims.feature)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Replaces the cached Ψ output of one item, e.g. after its image is
    /// swapped.
    pub fn set_item_features(&mut self, item: usize, f: &[f64]) -> Result<()> {
        if item >= self.dims.items {
            return Err(Error::UnknownItem(item.to_string()));
        }
        if f.len() != self.dims.feature {
            return Err(Error::Shape(format!("feature width {} != {}", f.len(), self.dims.feature)));
        }
        let w = self.dims.feature;
        self.features[item * w..(item + 1) * w].copy_from_slice(f);
        Ok(())
    }

    fn check_ids(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.dims.users {
            return Err(Error::UnknownUser(u.to_string()));
        }
        if i >= self.dims.items {
            return Err(Error::UnknownItem(i.to_string()));
        }
        Ok(())
    }

    /// Score of user `u` for item `i` whose visual features are `f_i`.
    pub fn score(&self, u: usize, f_i: &[f64], i: usize) -> Result<f64> {
        self.check_ids(u, i)?;
        if f_i.len() != self.dims.feature {
            return Err(Error::Shape(format!("feature width {} != {}", f_i.len(), self.dims.feature)));
        }
        let d = self.dims;
        let mut phi_i = vec![0.0; d.visual];
        gemm(d.visual, 1, d.feature, 1.0, &self.embed.value, false, f_i, false, 0.0, &mut phi_i);
        Ok(self.chi.value[0]
            + self.user_bias.value[u]
            + self.item_bias.value[i]
            + dot(row(&self.user_latent.value, u, d.latent), row(&self.item_latent.value, i, d.latent))
            + dot(row(&self.user_visual.value, u, d.visual), &phi_i)
            + dot(&self.visual_bias.value, f_i))
    }

    /// `E f_i` for every row of `feats`, as `[items, visual]`.
    fn project(&self, feats: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let mut out = vec![0.0; d.items * d.visual];
        gemm(d.items, d.visual, d.feature, 1.0, feats, false, &self.embed.value, true, 0.0, &mut out);
        out
    }

    fn triple_diff(&self, feats: &[f64], proj: &[f64], (u, i, j): (usize, usize, usize)) -> f64 {
        let d = self.dims;
        let lu = row(&self.user_latent.value, u, d.latent);
        let pu = row(&self.user_visual.value, u, d.visual);
        let item = |k: usize| {
            self.item_bias.value[k]
                + dot(lu, row(&self.item_latent.value, k, d.latent))
                + dot(pu, row(proj, k, d.visual))
                + dot(&self.visual_bias.value, row(feats, k, d.feature))
        };
        item(i) - item(j)
    }

    fn check_batch(&self, triples: &[(usize, usize, usize)]) -> Result<()> {
        for &(u, i, j) in triples {
            self.check_ids(u, i)?;
            self.check_ids(u, j)?;
        }
        Ok(())
    }

    /// Mean BPR loss of `triples` scored with features `feats`.
    pub(crate) fn bpr_loss_with(&self, feats: &[f64], triples: &[(usize, usize, usize)]) -> f64 {
        if triples.is_empty() {
            return 0.0;
        }
        let proj = self.project(feats);
        triples.iter().map(|&t| log_sigmoid_neg(self.triple_diff(feats, &proj, t))).sum::<f64>() / triples.len() as f64
    }

    /// Adds `weight ×` the gradient of the mean BPR loss under `feats`.
    pub(crate) fn accumulate_bpr(&mut self, feats: &[f64], triples: &[(usize, usize, usize)], weight: f64) -> f64 {
        if triples.is_empty() {
            return 0.0;
        }
        let d = self.dims;
        let proj = self.project(feats);
        let mut d_proj = vec![0.0; d.items * d.visual];
        let mut loss = 0.0;
        let inv = weight / triples.len() as f64;
        for &(u, i, j) in triples {
            let s = self.triple_diff(feats, &proj, (u, i, j));
            loss += log_sigmoid_neg(s);
            let c = -sigmoid(-s) * inv;
            self.item_bias.grad[i] += c;
            self.item_bias.grad[j] -= c;
            let lu = row(&self.user_latent.value, u, d.latent).to_vec();
            let (li, lj) = (
                row(&self.item_latent.value, i, d.latent).to_vec(),
                row(&self.item_latent.value, j, d.latent).to_vec(),
            );
            let gu = &mut self.user_latent.grad[u * d.latent..(u + 1) * d.latent];
            axpy(gu, c, &li);
            axpy(gu, -c, &lj);
            axpy(&mut self.item_latent.grad[i * d.latent..(i + 1) * d.latent], c, &lu);
            axpy(&mut self.item_latent.grad[j * d.latent..(j + 1) * d.latent], -c, &lu);
            let pu = row(&self.user_visual.value, u, d.visual).to_vec();
            let gpu = &mut self.user_visual.grad[u * d.visual..(u + 1) * d.visual];
            axpy(gpu, c, row(&proj, i, d.visual));
            axpy(gpu, -c, row(&proj, j, d.visual));
            axpy(&mut d_proj[i * d.visual..(i + 1) * d.visual], c, &pu);
            axpy(&mut d_proj[j * d.visual..(j + 1) * d.visual], -c, &pu);
            axpy(&mut self.visual_bias.grad, c, row(feats, i, d.feature));
            axpy(&mut self.visual_bias.grad, -c, row(feats, j, d.feature));
        }
        // dE = Σ_k dΦ_k f_kᵀ
        gemm(d.visual, d.feature, d.items, 1.0, &d_proj, true, feats, false, 1.0, &mut self.embed.grad);
        weight * loss / triples.len() as f64
    }

    /// Adds `τ‖Θ‖²` and its gradient; returns the penalty.
    pub(crate) fn accumulate_l2(&mut self) -> f64 {
        let tau = self.l2_reg;
        if tau == 0.0 {
            return 0.0;
        }
        let mut penalty = 0.0;
        for p in self.params_mut() {
            for (g, v) in p.grad.iter_mut().zip(&p.value) {
                penalty += v * v;
                *g += 2.0 * tau * v;
            }
        }
        tau * penalty
    }

    pub(crate) fn l2_penalty(&self) -> f64 {
        self.l2_reg * self.named_params().iter().flat_map(|(_, p)| p.value.iter()).map(|v| v * v).sum::<f64>()
    }

    /// Training objective (BPR + L2) without touching gradients.
    pub fn objective(&self, triples: &[(usize, usize, usize)]) -> f64 {
        self.bpr_loss_with(&self.features, triples) + self.l2_penalty()
    }

    /// Clean mean BPR loss, used for model selection.
    pub fn validation_loss(&self, triples: &[(usize, usize, usize)]) -> f64 {
        self.bpr_loss_with(&self.features, triples)
    }

    /// Zeroes gradients and fills them with ∂objective/∂Θ.
    pub fn loss_and_grad(&mut self, triples: &[(usize, usize, usize)]) -> Result<f64> {
        self.check_batch(triples)?;
        self.zero_grad();
        let feats = std::mem::take(&mut self.features);
        let loss = self.accumulate_bpr(&feats, triples, 1.0);
        self.features = feats;
        Ok(loss + self.accumulate_l2())
    }

    pub fn score_matrix(&self) -> Scores {
        self.score_matrix_with(&self.features)
    }

    pub(crate) fn score_matrix_with(&self, feats: &[f64]) -> Scores {
        let d = self.dims;
        let proj = self.project(feats);
        let width = d.latent + d.visual;
        let mut users = vec![0.0; d.users * width];
        for u in 0..d.users {
            users[u * width..u * width + d.latent].copy_from_slice(row(&self.user_latent.value, u, d.latent));
            users[u * width + d.latent..(u + 1) * width].copy_from_slice(row(&self.user_visual.value, u, d.visual));
        }
        let mut items = vec![0.0; d.items * width];
        let mut item_const = vec![0.0; d.items];
        for i in 0..d.items {
            items[i * width..i * width + d.latent].copy_from_slice(row(&self.item_latent.value, i, d.latent));
            items[i * width + d.latent..(i + 1) * width].copy_from_slice(row(&proj, i, d.visual));
            item_const[i] = self.item_bias.value[i] + dot(&self.visual_bias.value, row(feats, i, d.feature));
        }
        let mut data = vec![0.0; d.users * d.items];
        gemm(d.users, d.items, width, 1.0, &users, false, &items, true, 0.0, &mut data);
        for u in 0..d.users {
            let base = self.chi.value[0] + self.user_bias.value[u];
            for (v, c) in data[u * d.items..(u + 1) * d.items].iter_mut().zip(&item_const) {
                *v += base + c;
            }
        }
        Scores::new(d.users, d.items, data)
    }
}

impl Module<f64> for Vbpr {
    fn named_params(&self) -> Vec<(String, &Param<f64>)> {
        vec![
            ("chi".into(), &self.chi),
            ("user_bias".into(), &self.user_bias),
            ("item_bias".into(), &self.item_bias),
            ("user_latent".into(), &self.user_latent),
            ("item_latent".into(), &self.item_latent),
            ("embed".into(), &self.embed),
            ("user_visual".into(), &self.user_visual),
            ("visual_bias".into(), &self.visual_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        vec![
            &mut self.chi,
            &mut self.user_bias,
            &mut self.item_bias,
            &mut self.user_latent,
            &mut self.item_latent,
            &mut self.embed,
            &mut self.user_visual,
            &mut self.visual_bias,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    /// υ: L2 radius of each item's feature perturbation.
    pub eps: f64,
    /// φ_adv: weight of the perturbed BPR loss.
    pub weight: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { eps: 1.0, weight: 1.0 }
    }
}

/// VBPR trained against per-item feature perturbations Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct Amr {
    pub base: Vbpr,
    pub delta: Param<f64>,
    pub adversary: AdversaryConfig,
}

impl Amr {
    pub fn new(base: Vbpr, adversary: AdversaryConfig) -> Self {
        let d = base.dims();
        Self { base, delta: Param::zeros(&[d.items, d.feature]), adversary }
    }

    fn perturbed_features(&self) -> Vec<f64> {
        self.base.features.iter().zip(&self.delta.value).map(|(f, d)| f + d).collect()
    }

    pub fn score(&self, u: usize, f_i: &[f64], i: usize, use_delta: bool) -> Result<f64> {
        if !use_delta {
            return self.base.score(u, f_i, i);
        }
        self.base.check_ids(u, i)?;
        let w = self.base.dims.feature;
        let shifted: Vec<f64> = f_i.iter().zip(row(&self.delta.value, i, w)).map(|(f, d)| f + d).collect();
        self.base.score(u, &shifted, i)
    }

    /// Gradient of the mean BPR loss under `f + Δ` w.r.t. Δ, per item.
    pub fn delta_gradient(&self, triples: &[(usize, usize, usize)]) -> Vec<f64> {
        let d = self.base.dims;
        let feats = self.perturbed_features();
        let proj = self.base.project(&feats);
        let mut g_proj = vec![0.0; d.items * d.visual];
        let mut g_bias = vec![0.0; d.items];
        let inv = 1.0 / triples.len().max(1) as f64;
        for &(u, i, j) in triples {
            let s = self.base.triple_diff(&feats, &proj, (u, i, j));
            let c = -sigmoid(-s) * inv;
            let pu = row(&self.base.user_visual.value, u, d.visual);
            axpy(&mut g_proj[i * d.visual..(i + 1) * d.visual], c, pu);
            axpy(&mut g_proj[j * d.visual..(j + 1) * d.visual], -c, pu);
            g_bias[i] += c;
            g_bias[j] -= c;
        }
        // ∂ℓ/∂f_k = Eᵀ G_k + s_k η_v
        let mut out = vec![0.0; d.items * d.feature];
        gemm(d.items, d.feature, d.visual, 1.0, &g_proj, false, &self.base.embed.value, false, 0.0, &mut out);
        for k in 0..d.items {
            axpy(&mut out[k * d.feature..(k + 1) * d.feature], g_bias[k], &self.base.visual_bias.value);
        }
        out
    }

    /// One normalized ascent step on Δ for the items in `triples`, then
    /// projection of each row onto the ball of radius υ.
    pub fn adversary_step(&mut self, triples: &[(usize, usize, usize)]) -> Result<()> {
        self.base.check_batch(triples)?;
        let d = self.base.dims;
        let g = self.delta_gradient(triples);
        let eps = self.adversary.eps;
        let mut touched = vec![false; d.items];
        for &(_, i, j) in triples {
            touched[i] = true;
            touched[j] = true;
        }
        for k in (0..d.items).filter(|&k| touched[k]) {
            let gk = row(&g, k, d.feature);
            let norm = dot(gk, gk).sqrt();
            let dk = &mut self.delta.value[k * d.feature..(k + 1) * d.feature];
            if norm > 0.0 {
                axpy(dk, eps / norm, gk);
            }
            let dn = dot(dk, dk).sqrt();
            if dn > eps {
                let s = if dn > 0.0 { eps / dn } else { 0.0 };
                dk.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(())
    }

    /// `L_BPR + φ_adv · L_BPR(f + Δ) + τ‖Θ‖²` without touching gradients.
    pub fn objective(&self, triples: &[(usize, usize, usize)]) -> f64 {
        let mut loss = self.base.objective(triples);
        if self.adversary.weight != 0.0 {
            loss += self.adversary.weight * self.base.bpr_loss_with(&self.perturbed_features(), triples);
        }
        loss
    }

    pub fn loss_and_grad(&mut self, triples: &[(usize, usize, usize)]) -> Result<f64> {
        self.base.check_batch(triples)?;
        self.base.zero_grad();
        let feats = std::mem::take(&mut self.base.features);
        let mut loss = self.base.accumulate_bpr(&feats, triples, 1.0);
        self.base.features = feats;
        if self.adversary.weight != 0.0 {
            let adv = self.perturbed_features();
            loss += self.base.accumulate_bpr(&adv, triples, self.adversary.weight);
        }
        Ok(loss + self.base.accumulate_l2())
    }

    pub fn validation_loss(&self, triples: &[(usize, usize, usize)]) -> f64 {
        self.base.validation_loss(triples)
    }

    /// Clean scores; Δ only exists during training.
    pub fn score_matrix(&self) -> Scores {
        self.base.score_matrix()
    }
}

impl Module<f64> for Amr {
    fn named_params(&self) -> Vec<(String, &Param<f64>)> {
        let mut out = self.base.named_params();
        out.push(("delta".into(), &self.delta));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out = self.base.params_mut();
        out.push(&mut self.delta);
        out
    }
}
