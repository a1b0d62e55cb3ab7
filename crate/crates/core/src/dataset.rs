//! Interaction logs, item images, k-core filtering, leave-one-out splits and
//! BPR triplet sampling.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::StreamRng;

/// Negatives drawn per observed positive.
pub const NEGATIVES_PER_POSITIVE: usize = 4;

pub const TIE_RULE: &str = "timestamp-then-item-id-ascending";

/// One row of the interaction file, before indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// An implicit-feedback interaction between indexed users and items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    /// Always 1 after binarization.
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    interactions: Vec<Interaction>,
    images: Vec<Image>,
    popularity: Vec<usize>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

fn valid_item_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && !id.contains(['/', '\\', '\0'])
        && id.chars().all(|c| !c.is_control())
}

/// Parses `user,item,rating,timestamp` rows after a one-line header.
pub fn parse_interactions<R: Read>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let expected = ["user", "item", "rating", "timestamp"];
    if header.len() != 4 || header.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `user,item,rating,timestamp`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let user = rec[0].to_string();
        let item = rec[1].to_string();
        if user.is_empty() {
            return Err(bad("empty user id".into()));
        }
        if !valid_item_id(&item) {
            return Err(bad(format!("item id `{item}` is not usable as a file name")));
        }
        let rating: f64 = rec[2].parse().map_err(|_| bad(format!("rating `{}` is not a number", &rec[2])))?;
        if !rating.is_finite() {
            return Err(bad("rating is not finite".into()));
        }
        let timestamp: i64 = rec[3].parse().map_err(|_| bad(format!("timestamp `{}` is not an integer", &rec[3])))?;
        out.push(RawInteraction { user, item, rating, timestamp });
    }
    Ok(out)
}

pub fn write_interactions<W: std::io::Write>(catalog: &Catalog, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["user", "item", "rating", "timestamp"]).map_err(io)?;
    for it in &catalog.interactions {
        w.write_record([
            catalog.users[it.user].as_str(),
            catalog.items[it.item].as_str(),
            "1",
            &it.timestamp.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"];

/// Reads the interaction file and one image per referenced item from
/// `image_dir` (`<item_id>.<ext>`), resized to `side`.
pub fn load_catalog(interaction_file: &Path, image_dir: &Path, side: usize) -> Result<Catalog> {
    let file = std::fs::File::open(interaction_file).map_err(|e| Error::io(interaction_file, e))?;
    let raw = parse_interactions(std::io::BufReader::new(file))?;
    let mut images = HashMap::new();
    let mut needed: Vec<&str> = raw.iter().map(|r| r.item.as_str()).collect();
    needed.sort_unstable();
    needed.dedup();
    for item in needed {
        let path = IMAGE_EXTENSIONS
            .iter()
            .map(|ext| image_dir.join(format!("{item}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingImage(item.to_string()))?;
        images.insert(item.to_string(), Image::load(&path, side)?);
    }
    Catalog::build(raw, images)
}

impl Catalog {
    /// Deduplicates (keeping the latest timestamp per user–item pair),
    /// binarizes and indexes the interactions.
    pub fn build(raw: Vec<RawInteraction>, mut images: HashMap<String, Image>) -> Result<Self> {
        let mut latest: HashMap<(String, String), i64> = HashMap::new();
        for r in raw {
            let e = latest.entry((r.user, r.item)).or_insert(r.timestamp);
            if r.timestamp > *e {
                *e = r.timestamp;
            }
        }
        let mut users: Vec<String> = latest.keys().map(|(u, _)| u.clone()).collect();
        let mut items: Vec<String> = latest.keys().map(|(_, i)| i.clone()).collect();
        users.sort();
        users.dedup();
        items.sort();
        items.dedup();
        let user_index: HashMap<String, usize> = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let item_index: HashMap<String, usize> = items.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let mut item_images = Vec::with_capacity(items.len());
        for id in &items {
            let img = images.remove(id).ok_or_else(|| Error::MissingImage(id.clone()))?;
            if let Some(first) = item_images.first() {
                let first: &Image = first;
                if first.side() != img.side() {
                    return Err(Error::Shape(format!("image for `{id}` has side {}, expected {}", img.side(), first.side())));
                }
            }
            item_images.push(img);
        }
        let mut interactions: Vec<Interaction> = latest
            .into_iter()
            .map(|((u, i), ts)| Interaction { user: user_index[&u], item: item_index[&i], timestamp: ts, label: 1 })
            .collect();
        interactions.sort_by_key(|it| (it.user, it.timestamp, it.item));
        let mut popularity = vec![0; items.len()];
        for it in &interactions {
            popularity[it.item] += 1;
        }
        Ok(Self { users, items, interactions, images: item_images, popularity, user_index, item_index })
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, item: usize) -> &Image {
        &self.images[item]
    }

    pub fn image_side(&self) -> usize {
        self.images.first().map_or(0, Image::side)
    }

    pub fn popularity(&self) -> &[usize] {
        &self.popularity
    }

    pub fn user_index(&self, id: &str) -> Result<usize> {
        self.user_index.get(id).copied().ok_or_else(|| Error::UnknownUser(id.to_string()))
    }

    pub fn item_index(&self, id: &str) -> Result<usize> {
        self.item_index.get(id).copied().ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    /// Copy with some item images swapped out.
    pub fn with_images(&self, replacements: &[(usize, Image)]) -> Result<Self> {
        let mut out = self.clone();
        for (item, img) in replacements {
            let slot = out.images.get_mut(*item).ok_or_else(|| Error::UnknownItem(item.to_string()))?;
            if img.side() != slot.side() {
                return Err(Error::Shape(format!("replacement image side {} != {}", img.side(), slot.side())));
            }
            *slot = img.clone();
        }
        Ok(out)
    }

    /// Interactions grouped per user, ordered by (timestamp, item id).
    pub fn user_histories(&self) -> Vec<Vec<Interaction>> {
        let mut out = vec![Vec::new(); self.users.len()];
        for it in &self.interactions {
            out[it.user].push(*it);
        }
        for h in &mut out {
            h.sort_by_key(|it| (it.timestamp, it.item));
        }
        out
    }

    fn restrict(&self, keep: &[Interaction]) -> Result<Self> {
        let raw = keep
            .iter()
            .map(|it| RawInteraction {
                user: self.users[it.user].clone(),
                item: self.items[it.item].clone(),
                rating: 1.0,
                timestamp: it.timestamp,
            })
            .collect();
        let images = keep.iter().map(|it| (self.items[it.item].clone(), self.images[it.item].clone())).collect();
        Self::build(raw, images)
    }
}

/// Repeatedly drops users and items with fewer than `core` interactions
/// until every survivor has at least `core`.
pub fn k_core_filter(catalog: &Catalog, core: usize) -> Result<Catalog> {
    if core == 0 {
        return Err(Error::invalid("core must be at least 1"));
    }
    let mut alive = catalog.interactions.clone();
    loop {
        let mut ucount = vec![0usize; catalog.num_users()];
        let mut icount = vec![0usize; catalog.num_items()];
        for it in &alive {
            ucount[it.user] += 1;
            icount[it.item] += 1;
        }
        let before = alive.len();
        alive.retain(|it| ucount[it.user] >= core && icount[it.item] >= core);
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        return Err(Error::EmptyAfterFilter(core));
    }
    catalog.restrict(&alive)
}

/// Leave-one-out partition: per user, the last item is test, the one before
/// it validation, the rest training.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitDoc {
    seed: u64,
    tie_rule: String,
    train: BTreeMap<String, Vec<String>>,
    valid: BTreeMap<String, String>,
    test: BTreeMap<String, String>,
}

pub fn make_split(catalog: &Catalog, seed: u64) -> Result<Split> {
    let mut train = Vec::with_capacity(catalog.num_users());
    let mut valid = Vec::with_capacity(catalog.num_users());
    let mut test = Vec::with_capacity(catalog.num_users());
    for (u, hist) in catalog.user_histories().into_iter().enumerate() {
        if hist.len() < 3 {
            return Err(Error::invalid(format!(
                "user `{}` has {} interactions; leave-one-out needs at least 3",
                catalog.users[u],
                hist.len()
            )));
        }
        let n = hist.len();
        test.push(hist[n - 1].item);
        valid.push(hist[n - 2].item);
        train.push(hist[..n - 2].iter().map(|it| it.item).collect());
    }
    Ok(Split { train, valid, test, seed })
}

impl Split {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// Marks `train[u] ∪ {valid[u]}`.
    pub fn known_mask(&self, user: usize, num_items: usize) -> Vec<bool> {
        let mut mask = vec![false; num_items];
        for &i in &self.train[user] {
            mask[i] = true;
        }
        mask[self.valid[user]] = true;
        mask
    }

    pub fn to_json(&self, catalog: &Catalog) -> Result<String> {
        let name = |i: usize| catalog.items[i].clone();
        let doc = SplitDoc {
            seed: self.seed,
            tie_rule: TIE_RULE.to_string(),
            train: self
                .train
                .iter()
                .enumerate()
                .map(|(u, items)| (catalog.users[u].clone(), items.iter().map(|&i| name(i)).collect()))
                .collect(),
            valid: self.valid.iter().enumerate().map(|(u, &i)| (catalog.users[u].clone(), name(i))).collect(),
            test: self.test.iter().enumerate().map(|(u, &i)| (catalog.users[u].clone(), name(i))).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a persisted split and checks it against `catalog`.
    pub fn from_json(text: &str, catalog: &Catalog) -> Result<Self> {
        let doc: SplitDoc = serde_json::from_str(text)?;
        if doc.tie_rule != TIE_RULE {
            return Err(Error::Format(format!("unsupported tie rule `{}`", doc.tie_rule)));
        }
        let n = catalog.num_users();
        if doc.train.len() != n || doc.valid.len() != n || doc.test.len() != n {
            return Err(Error::Format("split does not cover exactly the catalog users".into()));
        }
        let mut train = vec![Vec::new(); n];
        let mut valid = vec![0; n];
        let mut test = vec![0; n];
        for (user, items) in &doc.train {
            let u = catalog.user_index(user)?;
            train[u] = items.iter().map(|i| catalog.item_index(i)).collect::<Result<_>>()?;
        }
        for (user, item) in &doc.valid {
            valid[catalog.user_index(user)?] = catalog.item_index(item)?;
        }
        for (user, item) in &doc.test {
            test[catalog.user_index(user)?] = catalog.item_index(item)?;
        }
        for u in 0..n {
            if train[u].contains(&valid[u]) || train[u].contains(&test[u]) || valid[u] == test[u] {
                return Err(Error::Format(format!("split partitions overlap for user `{}`", catalog.users[u])));
            }
        }
        Ok(Split { train, valid, test, seed: doc.seed })
    }
}

/// `(user, positive, negative)` training triples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

fn draw_negatives(
    user: usize,
    positives: &[usize],
    split: &Split,
    num_items: usize,
    rng: &mut StreamRng,
    out: &mut Vec<(usize, usize, usize)>,
) {
    let mask = split.known_mask(user, num_items);
    let candidates: Vec<usize> = (0..num_items).filter(|&i| !mask[i]).collect();
    if candidates.is_empty() {
        warn!("user {user} has interacted with every item; no negatives to sample");
        return;
    }
    for &i in positives {
        for _ in 0..NEGATIVES_PER_POSITIVE {
            out.push((user, i, candidates[rng.random_range(0..candidates.len())]));
        }
    }
}

/// One epoch of triples: every `(u, i)` in training appears with
/// [`NEGATIVES_PER_POSITIVE`] uniformly drawn negatives, shuffled.
pub fn sample_triplets(split: &Split, catalog: &Catalog, rng: &mut StreamRng) -> TripletBatch {
    let mut triples = Vec::new();
    for u in 0..split.num_users() {
        draw_negatives(u, &split.train[u], split, catalog.num_items(), rng, &mut triples);
    }
    triples.shuffle(rng);
    TripletBatch { triples }
}

/// `(u, valid[u], j)` triples used for model selection.
pub fn validation_triplets(split: &Split, catalog: &Catalog, rng: &mut StreamRng) -> TripletBatch {
    let mut triples = Vec::new();
    for u in 0..split.num_users() {
        draw_negatives(u, &[split.valid[u]], split, catalog.num_items(), rng, &mut triples);
    }
    TripletBatch { triples }
}

/// Items with popularity below `threshold`, in id order.
pub fn select_targets(catalog: &Catalog, threshold: usize) -> Result<Vec<usize>> {
    if threshold == 0 {
        return Err(Error::invalid("threshold must be at least 1"));
    }
    let targets: Vec<usize> = (0..catalog.num_items()).filter(|&i| catalog.popularity[i] < threshold).collect();
    if targets.is_empty() {
        return Err(Error::NoTargets(threshold));
    }
    Ok(targets)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn write_fixture(dir: &Path, csv: &str, items: &[&str]) {
        std::fs::write(dir.join("interactions.csv"), csv).unwrap();
        let imgs = dir.join("images");
        std::fs::create_dir_all(&imgs).unwrap();
        for i in items {
            Image::filled(8, 0.2).save_png(&imgs.join(format!("{i}.png"))).unwrap();
        }
    }

    #[test]
    fn loads_tiny_catalog() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "user,item,rating,timestamp\nu1,a,5,1\nu1,b,3,2\nu2,a,4,3\nu2,b,1,4\n", &["a", "b"]);
        let c = load_catalog(&dir.path().join("interactions.csv"), &dir.path().join("images"), 4).unwrap();
        assert_eq!(c.num_users(), 2);
        assert_eq!(c.num_items(), 2);
        assert_eq!(c.interactions().len(), 4);
        assert_eq!(c.image_side(), 4);
        assert!(c.interactions().iter().all(|it| it.label == 1));
        assert_eq!(c.popularity(), &[2, 2]);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "user,item,rating,timestamp\nu1,a,5,1\nu1,zz,3,2\n", &["a"]);
        let err = load_catalog(&dir.path().join("interactions.csv"), &dir.path().join("images"), 4).unwrap_err();
        assert!(err.to_string().contains("missing image"), "{err}");
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let err = parse_interactions("user,item,rating,timestamp\nu,a,1,1\nu,b,x,2\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        assert!(parse_interactions("u,i,r\n".as_bytes()).is_err());
        assert!(parse_interactions("user,item,rating,timestamp\nu,../x,1,1\n".as_bytes()).is_err());
        assert!(parse_interactions("user,item,rating,timestamp\nu,a,1\n".as_bytes()).is_err());
    }

    #[test]
    fn duplicates_keep_latest_timestamp() {
        let c = catalog_from(&[("u".into(), "a".into(), 5), ("u".into(), "a".into(), 9), ("u".into(), "a".into(), 2)]);
        assert_eq!(c.interactions().len(), 1);
        assert_eq!(c.interactions()[0].timestamp, 9);
    }

    fn grid(users: usize, items: usize) -> Vec<(String, String, i64)> {
        let mut rows = Vec::new();
        for u in 0..users {
            for i in 0..items {
                rows.push((format!("u{u:02}"), format!("i{i:02}"), (u * items + i) as i64));
            }
        }
        rows
    }

    #[test]
    fn k_core_fixpoint_is_unchanged() {
        let c = catalog_from(&grid(10, 10));
        let f = k_core_filter(&c, 10).unwrap();
        assert_eq!(f.interactions(), c.interactions());
        assert_eq!(f.users(), c.users());
    }

    #[test]
    fn star_graph_is_eliminated() {
        let rows: Vec<_> = (0..12).map(|i| ("u".to_string(), format!("i{i}"), i as i64)).collect();
        let err = k_core_filter(&catalog_from(&rows), 10).unwrap_err();
        assert!(err.to_string().contains("dataset eliminated by filtering"));
    }

    /// Naive oracle: rescans user-by-user then item-by-item, deleting one
    /// entity at a time, until nothing changes.
    fn naive_core(rows: &[(String, String, i64)], core: usize) -> HashSet<(String, String)> {
        let mut alive: HashSet<(String, String)> = rows.iter().map(|(u, i, _)| (u.clone(), i.clone())).collect();
        loop {
            let mut changed = false;
            let users: HashSet<String> = alive.iter().map(|(u, _)| u.clone()).collect();
            let mut users: Vec<_> = users.into_iter().collect();
            users.sort_by(|a, b| b.cmp(a));
            for u in users {
                if alive.iter().filter(|(x, _)| *x == u).count() < core {
                    alive.retain(|(x, _)| *x != u);
                    changed = true;
                }
            }
            let items: HashSet<String> = alive.iter().map(|(_, i)| i.clone()).collect();
            for i in items {
                if alive.iter().filter(|(_, x)| *x == i).count() < core {
                    alive.retain(|(_, x)| *x != i);
                    changed = true;
                }
            }
            if !changed {
                return alive;
            }
        }
    }

    #[test]
    fn k_core_matches_naive_oracle_on_planted_core() {
        use rand::Rng;
        let mut rng = stream(11, "kcore");
        // dense planted core of 30 users x 15 items plus a sparse fringe
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for u in 0..50 {
            for i in 0..40 {
                let p = if u < 30 && i < 15 { 0.8 } else { 0.12 };
                if rng.random_bool(p) && seen.insert((u, i)) {
                    rows.push((format!("u{u:02}"), format!("i{i:02}"), rng.random_range(0..1000)));
                }
            }
        }
        let c = catalog_from(&rows);
        let got = k_core_filter(&c, 10).unwrap();
        let want = naive_core(&rows, 10);
        let got_pairs: HashSet<(String, String)> = got
            .interactions()
            .iter()
            .map(|it| (got.users()[it.user].clone(), got.items()[it.item].clone()))
            .collect();
        assert_eq!(got_pairs, want);
        for (u, hist) in got.user_histories().iter().enumerate() {
            assert!(hist.len() >= 10, "user {u} below core");
        }
        assert!(got.popularity().iter().all(|&p| p >= 10));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn k_core_is_order_independent(edges in proptest::collection::vec((0u8..12, 0u8..10), 20..160), core in 1usize..5) {
            let rows: Vec<_> = edges.iter().enumerate()
                .map(|(t, (u, i))| (format!("u{u:02}"), format!("i{i:02}"), t as i64)).collect();
            let c = catalog_from(&rows);
            let want = naive_core(&rows, core);
            match k_core_filter(&c, core) {
                Ok(f) => {
                    let got: HashSet<(String, String)> = f.interactions().iter()
                        .map(|it| (f.users()[it.user].clone(), f.items()[it.item].clone())).collect();
                    prop_assert_eq!(got, want);
                }
                Err(_) => prop_assert!(want.is_empty()),
            }
        }
    }

    #[test]
    fn split_takes_last_items() {
        let c = catalog_from(&[("u".into(), "a".into(), 1), ("u".into(), "b".into(), 2), ("u".into(), "c".into(), 3)]);
        let s = make_split(&c, 0).unwrap();
        assert_eq!(s.train[0], vec![c.item_index("a").unwrap()]);
        assert_eq!(s.valid[0], c.item_index("b").unwrap());
        assert_eq!(s.test[0], c.item_index("c").unwrap());
    }

    #[test]
    fn split_ties_put_larger_id_last() {
        let c = catalog_from(&[
            ("u".into(), "a".into(), 1),
            ("u".into(), "q".into(), 5),
            ("u".into(), "m".into(), 5),
            ("u".into(), "b".into(), 2),
        ]);
        let s = make_split(&c, 0).unwrap();
        // by hand: order a(1), b(2), m(5), q(5) -> test q, valid m
        assert_eq!(c.items()[s.test[0]], "q");
        assert_eq!(c.items()[s.valid[0]], "m");
        assert_eq!(s.train[0].len() + 2, 4);
    }

    #[test]
    fn split_is_deterministic_and_roundtrips() {
        let c = catalog_from(&grid(6, 5));
        let a = make_split(&c, 3).unwrap();
        let b = make_split(&c, 3).unwrap();
        assert_eq!(a.to_json(&c).unwrap(), b.to_json(&c).unwrap());
        let back = Split::from_json(&a.to_json(&c).unwrap(), &c).unwrap();
        assert_eq!(back, a);
        for u in 0..c.num_users() {
            assert_eq!(a.train[u].len() + 2, c.user_histories()[u].len());
        }
    }

    #[test]
    fn split_json_rejects_overlap() {
        let c = catalog_from(&grid(2, 4));
        let s = make_split(&c, 0).unwrap();
        let mut bad = s.clone();
        bad.valid[0] = bad.train[0][0];
        assert!(Split::from_json(&bad.to_json(&c).unwrap(), &c).is_err());
        assert!(Split::from_json("{}", &c).is_err());
    }

    #[test]
    fn triplet_ratio_and_exclusion() {
        // 1 user, 10 items, 2 training positives (+ valid + test)
        let rows: Vec<_> = ["a", "b", "c", "d"].iter().enumerate().map(|(t, i)| ("u".to_string(), i.to_string(), t as i64)).collect();
        let mut rows = rows;
        for extra in 0..6 {
            rows.push((format!("v{extra}"), format!("z{extra}"), 0));
            rows.push((format!("v{extra}"), "a".into(), 1));
            rows.push((format!("v{extra}"), "b".into(), 2));
        }
        let c = catalog_from(&rows);
        assert_eq!(c.num_items(), 10);
        let s = make_split(&c, 0).unwrap();
        let u = c.user_index("u").unwrap();
        let t = sample_triplets(&s, &c, &mut stream(1, "t"));
        let mine: Vec<_> = t.triples.iter().filter(|x| x.0 == u).collect();
        assert_eq!(mine.len(), 2 * NEGATIVES_PER_POSITIVE);
        let mask = s.known_mask(u, c.num_items());
        for &&(_, i, j) in &mine {
            assert!(s.train[u].contains(&i));
            assert!(!mask[j]);
        }
    }

    #[test]
    fn user_with_no_negatives_is_skipped() {
        let c = catalog_from(&grid(1, 3));
        let s = make_split(&c, 0).unwrap();
        // training item + valid item leave only the test item as a negative
        let t = sample_triplets(&s, &c, &mut stream(0, "t"));
        assert!(t.triples.iter().all(|&(_, _, j)| j == s.test[0]));
        let full = catalog_from(&[("u".into(), "a".into(), 1), ("u".into(), "b".into(), 2), ("u".into(), "c".into(), 3)]);
        let mut s2 = make_split(&full, 0).unwrap();
        s2.train[0].push(s2.test[0]);
        assert!(sample_triplets(&s2, &full, &mut stream(0, "t")).is_empty());
    }

    #[test]
    fn negatives_are_uniform_chi_squared() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rows = Vec::new();
        for i in 0..3 {
            rows.push(("u".to_string(), format!("p{i}"), i as i64));
        }
        for n in 0..12 {
            rows.push(("w".to_string(), format!("n{n:02}"), n as i64));
        }
        let c = catalog_from(&rows);
        let s = make_split(&c, 0).unwrap();
        let u = c.user_index("u").unwrap();
        let mask = s.known_mask(u, c.num_items());
        let free: Vec<usize> = (0..c.num_items()).filter(|&i| !mask[i]).collect();
        let mut counts = vec![0usize; c.num_items()];
        let mut rng = stream(5, "chi");
        let mut draws = 0;
        while draws < 100_000 {
            for (uu, _, j) in sample_triplets(&s, &c, &mut rng).triples {
                if uu == u {
                    counts[j] += 1;
                    draws += 1;
                }
            }
        }
        let expected = draws as f64 / free.len() as f64;
        let chi2: f64 = free.iter().map(|&j| (counts[j] as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((free.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p}");
        assert!(counts.iter().enumerate().all(|(j, &n)| !mask[j] || n == 0));
    }

    #[test]
    fn targets_below_threshold() {
        let mut rows = grid(3, 2);
        rows.push(("u00".into(), "rare".into(), 99));
        let c = catalog_from(&rows);
        let t = select_targets(&c, 2).unwrap();
        assert_eq!(t, vec![c.item_index("rare").unwrap()]);
        // brute-force recount
        let brute: Vec<usize> = (0..c.num_items())
            .filter(|&i| c.interactions().iter().filter(|it| it.item == i).count() < 3)
            .collect();
        assert_eq!(select_targets(&c, 3).unwrap(), brute);
        assert!(matches!(select_targets(&c, 1), Err(Error::NoTargets(1))));
    }
}
