//! Procedural corpus: items are colored shapes, one shape/color pair per
//! concept, and users favor one concept with a configurable strength.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vispromo_core::dataset::{Catalog, RawInteraction};
use vispromo_core::image::{Image, CHANNELS};
use vispromo_core::rng::{stream, StreamRng};
use vispromo_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub users: usize,
    pub items: usize,
    pub side: usize,
    pub concepts: usize,
    /// Probability that an interaction follows the user's favorite concept;
    /// also the share of item popularity explained by the rendered shape size.
    pub coupling: f64,
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Spread of item popularity weights, `w = exp(skew · z)` with `z ∈ [0, 1]`.
    pub popularity_skew: f64,
    /// Every user and item ends up with at least this many interactions.
    pub core: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            side: 32,
            concepts: 8,
            coupling: 0.8,
            min_per_user: 12,
            max_per_user: 20,
            popularity_skew: 3.0,
            core: 10,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::invalid("coupling must lie in [0, 1]"));
        }
        if self.concepts < 2 {
            return Err(Error::invalid("need at least two concepts"));
        }
        if self.side < 8 || !self.side.is_multiple_of(8) {
            return Err(Error::invalid("image side must be a positive multiple of 8"));
        }
        if self.min_per_user == 0 || self.min_per_user > self.max_per_user {
            return Err(Error::invalid("per-user interaction range is empty"));
        }
        if self.min_per_user < self.core.max(3) {
            return Err(Error::invalid(format!(
                "min_per_user {} cannot survive a {}-core filter",
                self.min_per_user, self.core
            )));
        }
        if self.items < self.concepts || self.max_per_user >= self.items {
            return Err(Error::invalid("too few items for the requested per-user interactions"));
        }
        if self.users < self.core {
            return Err(Error::invalid("too few users for any item to reach the core size"));
        }
        if !(self.popularity_skew >= 0.0) {
            return Err(Error::invalid("popularity_skew must be non-negative"));
        }
        if self.coupling == 1.0 && self.items / self.concepts < self.max_per_user {
            return Err(Error::invalid("with full coupling every concept needs max_per_user items"));
        }
        Ok(())
    }
}

/// Latent attributes behind each generated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTraits {
    pub concept: usize,
    /// Rendered as shape size.
    pub appeal: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub catalog: Catalog,
    pub traits: Vec<ItemTraits>,
    /// Favorite concept per user, in catalog user order.
    pub favorites: Vec<usize>,
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.75, 0.10],
    [0.65, 0.20, 0.80],
    [0.10, 0.75, 0.80],
    [0.95, 0.45, 0.10],
    [0.35, 0.35, 0.35],
];

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

fn concept_look(concept: usize) -> (Shape, [f32; 3]) {
    let color = PALETTE[concept % PALETTE.len()];
    // shapes cycle at a different period than colors so pairs stay distinct
    let shape = SHAPES[(concept + concept / PALETTE.len()) % SHAPES.len()];
    (shape, color)
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        Shape::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// Renders one item image: tinted background, a concept-specific shape whose
/// radius grows with `appeal`, and faint pixel noise.
pub fn render_item(concept: usize, appeal: f64, side: usize, rng: &mut StreamRng) -> Image {
    let (shape, color) = concept_look(concept);
    let s = side as f32;
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.75..0.95));
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
    let r = s * (0.16 + 0.18 * appeal as f32);
    let jitter = s / 10.0;
    let cx = s / 2.0 + rng.random_range(-jitter..jitter);
    let cy = s / 2.0 + rng.random_range(-jitter..jitter);
    let mut data = vec![0f32; CHANNELS * side * side];
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let hit = inside(shape, dx, dy, r);
            for c in 0..CHANNELS {
                let base = if hit { color[c] + tint[c] } else { bg[c] };
                let v = base + rng.random_range(-0.03..0.03);
                data[(c * side + y) * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(side, data).expect("rendered buffer matches side").quantized()
}

fn weighted_pick(pool: &[usize], weights: &[f64], rng: &mut StreamRng) -> usize {
    let total: f64 = pool.iter().map(|&i| weights[i]).sum();
    let mut x = rng.random_range(0.0..total);
    for &i in pool {
        x -= weights[i];
        if x < 0.0 {
            return i;
        }
    }
    *pool.last().expect("non-empty pool")
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "synthetic-corpus");
    let mut concept_of: Vec<usize> = (0..spec.items).map(|i| i % spec.concepts).collect();
    concept_of.shuffle(&mut rng);
    let traits: Vec<ItemTraits> = concept_of
        .iter()
        .map(|&concept| ItemTraits { concept, appeal: rng.random_range(0.0..1.0) })
        .collect();
    let weights: Vec<f64> = traits
        .iter()
        .map(|t| {
            let z = spec.coupling * t.appeal + (1.0 - spec.coupling) * rng.random_range(0.0..1.0);
            (spec.popularity_skew * z).exp()
        })
        .collect();
    let by_concept: Vec<Vec<usize>> =
        (0..spec.concepts).map(|c| (0..spec.items).filter(|&i| traits[i].concept == c).collect()).collect();
    let all: Vec<usize> = (0..spec.items).collect();
    let favorites: Vec<usize> = (0..spec.users).map(|_| rng.random_range(0..spec.concepts)).collect();
    let fans: Vec<Vec<usize>> =
        (0..spec.concepts).map(|c| (0..spec.users).filter(|&u| favorites[u] == c).collect()).collect();
    if spec.coupling == 1.0 {
        if let Some(c) = fans.iter().position(|f| f.len() < spec.core) {
            return Err(Error::invalid(format!("concept {c} has fewer than {} fans; raise users", spec.core)));
        }
    }

    let mut owned: Vec<HashSet<usize>> = vec![HashSet::new(); spec.users];
    for u in 0..spec.users {
        let n = rng.random_range(spec.min_per_user..=spec.max_per_user);
        let mut guard = 0;
        while owned[u].len() < n {
            let pool = if rng.random_bool(spec.coupling) { &by_concept[favorites[u]] } else { &all };
            owned[u].insert(weighted_pick(pool, &weights, &mut rng));
            guard += 1;
            if guard > 100 * spec.items {
                return Err(Error::invalid("could not draw enough distinct items per user"));
            }
        }
    }
    // top up rare items with fans of their concept (or anyone, off-coupling)
    for i in 0..spec.items {
        let mut count = owned.iter().filter(|s| s.contains(&i)).count();
        let mut guard = 0;
        while count < spec.core {
            let pool = if rng.random_bool(spec.coupling) { &fans[traits[i].concept] } else { &(0..spec.users).collect() };
            if pool.is_empty() {
                return Err(Error::invalid(format!("no candidate users for item {i}")));
            }
            let u = pool[rng.random_range(0..pool.len())];
            if owned[u].insert(i) {
                count += 1;
            }
            guard += 1;
            if guard > 1000 * spec.users {
                return Err(Error::invalid(format!("item {i} cannot reach {} interactions", spec.core)));
            }
        }
    }

    let uid = |u: usize| format!("u{u:05}");
    let iid = |i: usize| format!("i{i:05}");
    let mut raw = Vec::new();
    for (u, items) in owned.iter().enumerate() {
        let mut items: Vec<usize> = items.iter().copied().collect();
        items.sort_unstable();
        items.shuffle(&mut rng);
        for (ts, i) in items.into_iter().enumerate() {
            raw.push(RawInteraction { user: uid(u), item: iid(i), rating: 5.0, timestamp: ts as i64 });
        }
    }
    let mut images = HashMap::new();
    let mut img_rng = stream(spec.seed, "synthetic-images");
    for (i, t) in traits.iter().enumerate() {
        images.insert(iid(i), render_item(t.concept, t.appeal, spec.side, &mut img_rng));
    }
    let catalog = Catalog::build(raw, images)?;
    // ids are zero padded, so catalog order equals generation order
    Ok(SyntheticCorpus { catalog, traits, favorites })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vispromo_core::dataset::{k_core_filter, select_targets};

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { users: 120, items: 48, side: 16, concepts: 4, ..SyntheticCorpusSpec::default() }
    }

    #[test]
    fn survives_core_filter_unchanged() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        let f = k_core_filter(&c.catalog, 10).unwrap();
        assert_eq!(f.num_users(), c.catalog.num_users());
        assert_eq!(f.num_items(), c.catalog.num_items());
        assert!(c.catalog.popularity().iter().all(|&p| p >= 10));
    }

    #[test]
    fn full_coupling_keeps_users_inside_their_concept() {
        let spec = SyntheticCorpusSpec { coupling: 1.0, users: 200, items: 96, ..small() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        for it in c.catalog.interactions() {
            assert_eq!(c.traits[it.item].concept, c.favorites[it.user]);
        }
    }

    #[test]
    fn deterministic_and_has_long_tail() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a.catalog.interactions(), b.catalog.interactions());
        assert_eq!(a.catalog.images(), b.catalog.images());
        assert!(!select_targets(&a.catalog, 20).unwrap().is_empty());
    }

    #[test]
    fn images_differ_by_concept() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        let mean = |concept: usize| -> Vec<f64> {
            let members: Vec<usize> = (0..c.traits.len()).filter(|&i| c.traits[i].concept == concept).collect();
            let n = members.len() as f64;
            let len = c.catalog.image(0).data().len();
            (0..len).map(|p| members.iter().map(|&i| c.catalog.image(i).data()[p] as f64).sum::<f64>() / n).collect()
        };
        let (a, b) = (mean(0), mean(1));
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 1.0, "concept means too close: {d}");
    }

    #[test]
    fn rejects_infeasible_specs() {
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { coupling: 1.5, ..small() }).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { concepts: 1, ..small() }).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { min_per_user: 5, ..small() }).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { users: 5, ..small() }).is_err());
    }
}
