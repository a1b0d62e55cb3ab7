//! DVBPR: `y = φ_uᵀ Ψ(X_i)` with Ψ trained end to end.

use std::collections::BTreeMap;

use rand::Rng;
use vispromo_nn::{gemm, prefixed, Module, Param, Real, Tensor};

use super::{log_sigmoid_neg, sigmoid, Scores};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::visual::FeatureExtractor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dvbpr<T> {
    pub user_visual: Param<T>,
    pub psi: FeatureExtractor<T>,
    users: usize,
    l2_reg: f64,
}

impl<T: Real> Dvbpr<T> {
    /// Starts from a given Ψ (typically the pretrained extractor).
    pub fn new<R: Rng + ?Sized>(users: usize, psi: FeatureExtractor<T>, l2_reg: f64, rng: &mut R) -> Self {
        let dim = psi.feature_dim();
        Self { user_visual: Param::normal(&[users, dim], 0.01, rng), psi, users, l2_reg }
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn l2_reg(&self) -> f64 {
        self.l2_reg
    }

    fn user_row(&self, u: usize) -> &[T] {
        let d = self.psi.feature_dim();
        &self.user_visual.value[u * d..(u + 1) * d]
    }

    pub fn score(&self, u: usize, image: &Image) -> Result<f64> {
        if u >= self.users {
            return Err(Error::UnknownUser(u.to_string()));
        }
        let f = self.psi.features(&image.to_tensor::<T>())?;
        Ok(self.user_row(u).iter().zip(f.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    /// Unique items of the batch in id order, with their row in the
    /// feature batch.
    fn batch_items(triples: &[(usize, usize, usize)]) -> BTreeMap<usize, usize> {
        let mut items: Vec<usize> = triples.iter().flat_map(|&(_, i, j)| [i, j]).collect();
        items.sort_unstable();
        items.dedup();
        items.into_iter().enumerate().map(|(r, i)| (i, r)).collect()
    }

    fn check(&self, triples: &[(usize, usize, usize)], images: &[Image]) -> Result<()> {
        for &(u, i, j) in triples {
            if u >= self.users {
                return Err(Error::UnknownUser(u.to_string()));
            }
            if i >= images.len() || j >= images.len() {
                return Err(Error::UnknownItem(i.max(j).to_string()));
            }
        }
        Ok(())
    }

    fn penalty(&self) -> f64 {
        self.l2_reg
            * self.named_params().iter().flat_map(|(_, p)| p.value.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>()
    }

    fn diffs(&self, feats: &Tensor<T>, rows: &BTreeMap<usize, usize>, triples: &[(usize, usize, usize)]) -> Vec<f64> {
        triples
            .iter()
            .map(|&(u, i, j)| {
                let (fi, fj) = (feats.item(rows[&i]), feats.item(rows[&j]));
                self.user_row(u).iter().zip(fi.iter().zip(fj)).map(|(p, (a, b))| p.as_f64() * (a.as_f64() - b.as_f64())).sum::<f64>()
            })
            .collect()
    }

    /// Mean BPR loss plus `τ‖Θ‖²`, without gradients.
    pub fn objective(&self, triples: &[(usize, usize, usize)], images: &[Image]) -> Result<f64> {
        Ok(self.validation_loss(triples, images)? + self.penalty())
    }

    pub fn validation_loss(&self, triples: &[(usize, usize, usize)], images: &[Image]) -> Result<f64> {
        self.check(triples, images)?;
        if triples.is_empty() {
            return Ok(0.0);
        }
        let rows = Self::batch_items(triples);
        let refs: Vec<&Image> = rows.keys().map(|&i| &images[i]).collect();
        let feats = self.psi.features(&batch_tensor::<T>(&refs)?)?;
        let s = self.diffs(&feats, &rows, triples);
        Ok(s.iter().map(|&v| log_sigmoid_neg(v)).sum::<f64>() / triples.len() as f64)
    }

    /// Zeroes gradients and fills them with ∂objective/∂Θ, running Ψ only on
    /// the items present in the batch.
    pub fn loss_and_grad(&mut self, triples: &[(usize, usize, usize)], images: &[Image]) -> Result<f64> {
        self.check(triples, images)?;
        self.zero_grad();
        if triples.is_empty() {
            return Ok(0.0);
        }
        let d = self.psi.feature_dim();
        let rows = Self::batch_items(triples);
        let refs: Vec<&Image> = rows.keys().map(|&i| &images[i]).collect();
        let (feats, cache) = self.psi.forward(&batch_tensor::<T>(&refs)?)?;
        let s = self.diffs(&feats, &rows, triples);
        let mut dfeat = Tensor::<T>::zeros(feats.shape());
        let inv = 1.0 / triples.len() as f64;
        let mut loss = 0.0;
        for (&(u, i, j), &sv) in triples.iter().zip(&s) {
            loss += log_sigmoid_neg(sv);
            let c = T::of(-sigmoid(-sv) * inv);
            let (ri, rj) = (rows[&i], rows[&j]);
            for k in 0..d {
                let pu = self.user_visual.value[u * d + k];
                self.user_visual.grad[u * d + k] += c * (feats.item(ri)[k] - feats.item(rj)[k]);
                dfeat.item_mut(ri)[k] += c * pu;
                dfeat.item_mut(rj)[k] -= c * pu;
            }
        }
        self.psi.backward(&cache, &dfeat);
        let tau = T::of(2.0 * self.l2_reg);
        if self.l2_reg != 0.0 {
            for p in self.params_mut() {
                for (g, &v) in p.grad.iter_mut().zip(&p.value) {
                    *g += tau * v;
                }
            }
        }
        Ok(loss * inv + self.penalty())
    }

    /// Scores every user against Ψ of the given images.
    pub fn score_matrix(&self, images: &[Image]) -> Result<Scores> {
        let refs: Vec<&Image> = images.iter().collect();
        let feats = self.psi.extract(&refs)?;
        let d = self.psi.feature_dim();
        let items = images.len();
        let flat: Vec<f64> = feats.into_iter().flatten().collect();
        let users: Vec<f64> = self.user_visual.value.iter().map(|v| v.as_f64()).collect();
        let mut data = vec![0.0; self.users * items];
        gemm(self.users, items, d, 1.0, &users, false, &flat, true, 0.0, &mut data);
        Ok(Scores::new(self.users, items, data))
    }

    pub fn cast<U: Real>(&self) -> Dvbpr<U> {
        Dvbpr { user_visual: self.user_visual.cast(), psi: self.psi.cast(), users: self.users, l2_reg: self.l2_reg }
    }
}

impl<T: Real> Module<T> for Dvbpr<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![("user_visual".to_string(), &self.user_visual)];
        out.extend(prefixed("psi", self.psi.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.user_visual];
        out.extend(self.psi.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recsys::vbpr::{Vbpr, VbprDims};
    use crate::rng::stream;

    fn images(n: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut rng = stream(seed, "imgs");
        (0..n).map(|_| Image::new(side, (0..3 * side * side).map(|_| rng.random::<f32>()).collect()).unwrap()).collect()
    }

    fn model(seed: u64) -> Dvbpr<f64> {
        let psi = FeatureExtractor::<f64>::new(16, 6, &mut stream(seed, "psi"));
        Dvbpr::new(3, psi, 1e-3, &mut stream(seed, "users"))
    }

    #[test]
    fn zero_user_and_orthogonal_scores() {
        let imgs = images(2, 16, 0);
        let mut m = model(1);
        m.user_visual.value.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(m.score(0, &imgs[0]).unwrap(), 0.0);
        let f = m.psi.features(&imgs[1].to_tensor()).unwrap();
        // φ_u orthogonal to Ψ(X): rotate the first two components
        let d = 6;
        let mut phi = vec![0.0; d];
        phi[0] = f.data()[1];
        phi[1] = -f.data()[0];
        m.user_visual.value[d..2 * d].copy_from_slice(&phi);
        assert!(m.score(1, &imgs[1]).unwrap().abs() < 1e-12);
        assert!(m.score(3, &imgs[0]).is_err());
    }

    #[test]
    fn frozen_psi_matches_reduced_vbpr() {
        let imgs = images(4, 16, 2);
        let m = model(3);
        let refs: Vec<&Image> = imgs.iter().collect();
        let feats = m.psi.extract(&refs).unwrap();
        let dims = VbprDims { users: 3, items: 4, latent: 1, visual: 6, feature: 6 };
        let mut v = Vbpr::new(dims, &feats, 0.0, &mut stream(0, "v")).unwrap();
        for p in [&mut v.user_latent, &mut v.item_latent] {
            p.value.iter_mut().for_each(|x| *x = 0.0);
        }
        v.embed.value = (0..36).map(|k| if k % 7 == 0 { 1.0 } else { 0.0 }).collect();
        v.user_visual.value = m.user_visual.value.clone();
        let s = m.score_matrix(&imgs).unwrap();
        for u in 0..3 {
            for i in 0..4 {
                let want = v.score(u, &feats[i], i).unwrap();
                assert!((m.score(u, &imgs[i]).unwrap() - want).abs() < 1e-12);
                assert!((s.get(u, i) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let imgs = images(4, 16, 4);
        let mut m = model(5);
        m.user_visual.value.iter_mut().enumerate().for_each(|(k, v)| *v = ((k * 13 % 7) as f64 - 3.0) * 0.3);
        let triples = [(0, 1, 2), (1, 3, 0), (2, 0, 3), (0, 3, 1)];
        let loss = m.loss_and_grad(&triples, &imgs).unwrap();
        assert!((loss - m.objective(&triples, &imgs).unwrap()).abs() < 1e-12);
        let mut rng = stream(6, "probe");
        let sizes: Vec<usize> = m.named_params().iter().map(|(_, p)| p.len()).collect();
        let grads: Vec<Vec<f64>> = m.named_params().iter().map(|(_, p)| p.grad.clone()).collect();
        let h = 1e-6;
        for _ in 0..10 {
            let pi = rng.random_range(0..sizes.len());
            let idx = rng.random_range(0..sizes[pi]);
            let mut plus = m.clone();
            plus.params_mut()[pi].value[idx] += h;
            let mut minus = m.clone();
            minus.params_mut()[pi].value[idx] -= h;
            let fd = (plus.objective(&triples, &imgs).unwrap() - minus.objective(&triples, &imgs).unwrap()) / (2.0 * h);
            let an = grads[pi][idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "param {pi}[{idx}] {fd} vs {an}");
        }
    }

    #[test]
    fn swapping_one_image_only_moves_that_column() {
        let mut imgs = images(4, 16, 7);
        let m = model(8);
        let before = m.score_matrix(&imgs).unwrap();
        imgs[1] = Image::filled(16, 0.3);
        let after = m.score_matrix(&imgs).unwrap();
        for u in 0..3 {
            for i in [0, 2, 3] {
                assert_eq!(before.get(u, i), after.get(u, i));
            }
        }
    }
}
