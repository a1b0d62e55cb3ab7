//! The pipeline stages. Each one runs its prerequisites first (they are
//! skipped when fresh), fingerprints its inputs, and records its outputs in
//! the run manifest.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use vispromo_core::attack::{aip_all, ipdgi_all, AdversarialResult, AttackConfig, IpdgiContext};
use vispromo_core::dataset::{self, k_core_filter, make_split, select_targets, write_interactions, Catalog, Split};
use vispromo_core::diffusion::{build_schedule, train_denoiser, Denoiser, NoiseSchedule, ScheduleKind, BETA_END, BETA_START};
use vispromo_core::image::Image;
use vispromo_core::metrics::{catalog_sparsity, exposure_rate, exposure_rate_eligible, fid, ndcg_at_k, MetricCell, MetricReport};
use vispromo_core::recsys::{self, ranking_table, Model, ModelKind, ModelShape};
use vispromo_core::rng::stream;
use vispromo_core::visual::{fit_clusters, pretrain_autoencoder, ClusterModel, FeatureExtractor};
use vispromo_nn::blob;

use crate::config::{digest, sha256_hex, DatasetConfig, ExposureDenominator, RunConfig};
use crate::rundir::{Outputs, RunDir};
use crate::synthetic::generate_synthetic_corpus;

pub const DATA_CSV: &str = "data/interactions.csv";
pub const IMAGE_DIR: &str = "data/images";
pub const SPLIT_JSON: &str = "data/split.json";
pub const TARGETS_JSON: &str = "data/targets.json";
pub const DATASET_JSON: &str = "data/dataset.json";
pub const PSI_BLOB: &str = "models/psi.blob";
pub const PSI_JSON: &str = "models/psi.json";
pub const DENOISER_BLOB: &str = "diffusion/denoiser.blob";
pub const DENOISER_JSON: &str = "diffusion/denoiser.json";
pub const CLUSTERS_JSON: &str = "clusters/clusters.json";
pub const CENTROIDS_BLOB: &str = "clusters/centroids.blob";
pub const METRICS_JSON: &str = "report/metrics.json";

pub const REPORT_SCHEMA: u32 = 1;
pub const NO_ATTACK: &str = "none";
pub const AIP: &str = "aip";
pub const IPDGI: &str = "ipdgi";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub ran: bool,
}

fn model_paths(kind: ModelKind) -> (String, String) {
    (format!("models/{kind}.blob"), format!("models/{kind}.json"))
}

pub fn adv_dir(attack: &str) -> String {
    format!("adv/{attack}")
}

pub(crate) fn fingerprint_of(run: &RunDir, stage: &str) -> Result<String> {
    Ok(run.record(stage).with_context(|| format!("stage `{stage}` has not completed"))?.fingerprint.clone())
}

pub(crate) fn run_stage(
    run: &mut RunDir,
    stage: &'static str,
    fingerprint: String,
    body: impl FnOnce(&RunDir, &mut Outputs) -> Result<serde_json::Value>,
) -> Result<StageOutcome> {
    if run.is_fresh(stage, &fingerprint) {
        info!("{stage}: up to date");
        return Ok(StageOutcome { stage, ran: false });
    }
    run.clear_stage(stage)?;
    info!("{stage}: running");
    let mut out = Outputs::default();
    // partial outputs stay on disk for inspection when the body fails
    let summary = body(run, &mut out).with_context(|| format!("stage `{stage}` failed"))?;
    run.complete(stage, fingerprint, out, summary)?;
    Ok(StageOutcome { stage, ran: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
    pub targets: usize,
}

// ---- loaders -------------------------------------------------------------

pub fn load_catalog(run: &RunDir) -> Result<Catalog> {
    Ok(dataset::load_catalog(&run.path(DATA_CSV), &run.path(IMAGE_DIR), run.cfg.image_side())?)
}

pub fn load_split(run: &RunDir, catalog: &Catalog) -> Result<Split> {
    Ok(Split::from_json(&run.read_string(SPLIT_JSON)?, catalog)?)
}

pub fn load_targets(run: &RunDir, catalog: &Catalog) -> Result<Vec<usize>> {
    let ids: Vec<String> = serde_json::from_str(&run.read_string(TARGETS_JSON)?)?;
    ids.iter().map(|id| Ok(catalog.item_index(id)?)).collect()
}

pub fn load_extractor(run: &RunDir) -> Result<FeatureExtractor<f32>> {
    let mut psi = FeatureExtractor::<f32>::new(run.cfg.image_side(), run.cfg.extractor.feature_dim, &mut stream(0, "skeleton"));
    blob::load_module(&mut psi, &run.read(PSI_BLOB)?).context("extractor checkpoint")?;
    Ok(psi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub shape: ModelShape,
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

pub fn load_models(run: &RunDir, features: &[Vec<f64>]) -> Result<Vec<Model>> {
    run.cfg
        .models
        .iter()
        .map(|&kind| {
            let (blob_path, json_path) = model_paths(kind);
            let m: ModelManifest = serde_json::from_str(&run.read_string(&json_path)?)?;
            if m.shape.kind != kind {
                bail!("{json_path} describes a {} model", m.shape.kind);
            }
            Model::from_blob(&m.shape, Some(features), &run.read(&blob_path)?).with_context(|| format!("loading {blob_path}"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserManifest {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_shape: [usize; 3],
    pub base_channels: usize,
    pub seed: u64,
    pub eval_history: Vec<f64>,
    pub final_loss: f64,
}

pub fn load_schedule(run: &RunDir) -> Result<NoiseSchedule> {
    Ok(build_schedule(run.cfg.diffusion.t_max, ScheduleKind::Linear)?)
}

pub fn load_denoiser(run: &RunDir) -> Result<Denoiser<f32>> {
    let cfg = run.cfg.diffusion_config(run.cfg.image_side());
    let mut net = Denoiser::<f32>::new(cfg.net, &mut stream(0, "skeleton"))?;
    blob::load_module(&mut net, &run.read(DENOISER_BLOB)?).context("denoiser checkpoint")?;
    Ok(net)
}

pub fn load_clusters(run: &RunDir, catalog: &Catalog) -> Result<ClusterModel> {
    Ok(ClusterModel::from_files(&run.read_string(CLUSTERS_JSON)?, &run.read(CENTROIDS_BLOB)?, catalog.items())?)
}

pub fn load_adversarial(run: &RunDir, attack: &str, catalog: &Catalog, targets: &[usize]) -> Result<Vec<(usize, Image)>> {
    targets
        .iter()
        .map(|&t| {
            let p = run.path(&format!("{}/{}.png", adv_dir(attack), catalog.items()[t]));
            Ok((t, Image::load(&p, catalog.image_side())?))
        })
        .collect()
}

// ---- stages --------------------------------------------------------------

fn prepare_fingerprint(cfg: &RunConfig) -> Result<String> {
    let input_digest = match &cfg.dataset {
        DatasetConfig::Synthetic(_) => String::new(),
        DatasetConfig::Files { interactions, .. } => {
            sha256_hex(&std::fs::read(interactions).with_context(|| format!("reading {}", interactions.display()))?)
        }
    };
    Ok(digest(&("prepare", &cfg.dataset, input_digest, cfg.core, cfg.target_threshold, cfg.split_seed())))
}

pub fn prepare(run: &mut RunDir) -> Result<StageOutcome> {
    let fp = prepare_fingerprint(&run.cfg)?;
    run_stage(run, "prepare", fp, |run, out| {
        let cfg = &run.cfg;
        let raw = match &cfg.dataset {
            DatasetConfig::Synthetic(spec) => generate_synthetic_corpus(spec)?.catalog,
            DatasetConfig::Files { interactions, images, side } => dataset::load_catalog(interactions, images, *side)?,
        };
        let catalog = k_core_filter(&raw, cfg.core)?;
        if catalog.num_users() < raw.num_users() {
            info!("k-core kept {} of {} users", catalog.num_users(), raw.num_users());
        }
        let split = make_split(&catalog, cfg.split_seed())?;
        let targets = select_targets(&catalog, cfg.target_threshold)?;
        let mut csv = Vec::new();
        write_interactions(&catalog, &mut csv)?;
        run.write(out, DATA_CSV, &csv)?;
        for (i, id) in catalog.items().iter().enumerate() {
            let rel = format!("{IMAGE_DIR}/{id}.png");
            let path = run.path(&rel);
            std::fs::create_dir_all(path.parent().expect("image dir"))?;
            catalog.image(i).save_png(&path)?;
            out.push(rel);
        }
        run.write(out, SPLIT_JSON, split.to_json(&catalog)?.as_bytes())?;
        let target_ids: Vec<&String> = targets.iter().map(|&t| &catalog.items()[t]).collect();
        run.write(out, TARGETS_JSON, serde_json::to_string_pretty(&target_ids)?.as_bytes())?;
        let stats = DatasetStats {
            users: catalog.num_users(),
            items: catalog.num_items(),
            interactions: catalog.interactions().len(),
            sparsity: catalog_sparsity(&catalog)?,
            targets: targets.len(),
        };
        run.write(out, DATASET_JSON, serde_json::to_string_pretty(&stats)?.as_bytes())?;
        Ok(serde_json::to_value(stats)?)
    })
}

pub fn train_rec(run: &mut RunDir) -> Result<StageOutcome> {
    prepare(run)?;
    let cfg = run.cfg.clone();
    let fp = digest(&(
        "train-rec",
        fingerprint_of(run, "prepare")?,
        &cfg.extractor,
        cfg.pretrain_config().seed,
        cfg.extractor_init_seed(),
        &cfg.recommender,
        &cfg.models,
        cfg.models.iter().map(|&k| cfg.train_config(k).seed).collect::<Vec<_>>(),
    ));
    run_stage(run, "train-rec", fp, |run, out| {
        let catalog = load_catalog(run)?;
        let split = load_split(run, &catalog)?;
        let mut psi = FeatureExtractor::<f32>::new(cfg.image_side(), cfg.extractor.feature_dim, &mut stream(cfg.extractor_init_seed(), "psi"));
        let imgs: Vec<&Image> = catalog.images().iter().collect();
        let history = pretrain_autoencoder(&mut psi, &imgs, &cfg.pretrain_config())?;
        run.write(out, PSI_BLOB, &blob::save_module(&psi))?;
        run.write(out, PSI_JSON, serde_json::to_string_pretty(&serde_json::json!({ "reconstruction_loss": history }))?.as_bytes())?;
        let features = psi.extract(&imgs)?;
        let mut summary = BTreeMap::new();
        for &kind in &cfg.models {
            let tc = cfg.train_config(kind);
            let outcome = recsys::train(kind, &split, &catalog, &features, &psi, &cfg.model_config(), &tc)?;
            info!("{kind}: best validation loss {:.4} at epoch {}", outcome.best_validation_loss, outcome.best_epoch);
            let (blob_path, json_path) = model_paths(kind);
            run.write(out, &blob_path, &outcome.model.to_blob())?;
            let manifest = ModelManifest {
                shape: outcome.model.shape(),
                seed: tc.seed,
                config_hash: cfg.hash(),
                best_epoch: outcome.best_epoch,
                best_validation_loss: outcome.best_validation_loss,
                train_loss: outcome.train_loss,
                validation_loss: outcome.validation_loss,
            };
            run.write(out, &json_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
            summary.insert(kind.to_string(), outcome.best_validation_loss);
        }
        Ok(serde_json::to_value(summary)?)
    })
}

pub fn train_diffusion(run: &mut RunDir) -> Result<StageOutcome> {
    prepare(run)?;
    let cfg = run.cfg.clone();
    let dcfg = cfg.diffusion_config(cfg.image_side());
    let fp = digest(&("train-diffusion", fingerprint_of(run, "prepare")?, &cfg.diffusion, dcfg.seed));
    run_stage(run, "train-diffusion", fp, |run, out| {
        let catalog = load_catalog(run)?;
        let sched = load_schedule(run)?;
        let imgs: Vec<&Image> = catalog.images().iter().collect();
        let trained = train_denoiser::<f32>(&imgs, &sched, &dcfg)?;
        run.write(out, DENOISER_BLOB, &blob::save_module(&trained.net))?;
        let final_loss = *trained.eval_history.last().expect("history has the initial loss");
        let manifest = DenoiserManifest {
            t_max: sched.t_max(),
            beta_start: BETA_START,
            beta_end: BETA_END,
            image_shape: [3, cfg.image_side(), cfg.image_side()],
            base_channels: dcfg.net.base_channels,
            seed: dcfg.seed,
            eval_history: trained.eval_history.clone(),
            final_loss,
        };
        run.write(out, DENOISER_JSON, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(serde_json::json!({ "initial_loss": trained.eval_history[0], "final_loss": final_loss }))
    })
}

pub fn cluster(run: &mut RunDir) -> Result<StageOutcome> {
    train_rec(run)?;
    let cfg = run.cfg.clone();
    let fp = digest(&("cluster", fingerprint_of(run, "train-rec")?, &cfg.cluster, cfg.cluster_seed()));
    run_stage(run, "cluster", fp, |run, out| {
        let catalog = load_catalog(run)?;
        let psi = load_extractor(run)?;
        let feats = psi.extract(&catalog.images().iter().collect::<Vec<_>>())?;
        let model = fit_clusters(&feats, cfg.cluster.k.min(catalog.num_items()), cfg.cluster_seed())?;
        let (json, centroids) = model.to_files(catalog.items())?;
        run.write(out, CLUSTERS_JSON, json.as_bytes())?;
        run.write(out, CENTROIDS_BLOB, &centroids)?;
        Ok(serde_json::json!({ "k": model.k, "inertia": model.inertia() }))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub target: String,
    pub reference: String,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub attack: String,
    pub config: serde_json::Value,
    pub items: Vec<AttackRecord>,
}

/// Everything an attack needs, loaded once.
pub struct AttackInputs {
    pub catalog: Catalog,
    pub targets: Vec<usize>,
    pub psi: FeatureExtractor<f32>,
    pub clusters: ClusterModel,
    pub denoiser: Denoiser<f32>,
    pub sched: NoiseSchedule,
}

impl AttackInputs {
    pub fn load(run: &RunDir) -> Result<Self> {
        let catalog = load_catalog(run)?;
        Ok(Self {
            targets: load_targets(run, &catalog)?,
            psi: load_extractor(run)?,
            clusters: load_clusters(run, &catalog)?,
            denoiser: load_denoiser(run)?,
            sched: load_schedule(run)?,
            catalog,
        })
    }

    pub fn ipdgi(&self, cfg: &AttackConfig) -> Result<Vec<AdversarialResult>> {
        let ctx = IpdgiContext::new(&self.catalog, &self.clusters, &self.psi, &self.denoiser, &self.sched);
        Ok(ipdgi_all(&self.targets, &ctx, cfg)?)
    }
}

/// Writes adversarial PNGs and the per-attack manifest.
pub fn write_attack(
    run: &RunDir,
    out: &mut Outputs,
    label: &str,
    config: serde_json::Value,
    results: &[AdversarialResult],
    catalog: &Catalog,
) -> Result<()> {
    let dir = adv_dir(label);
    let mut items = Vec::with_capacity(results.len());
    for r in results {
        let id = &catalog.items()[r.target];
        let rel = format!("{dir}/{id}.png");
        let path = run.path(&rel);
        std::fs::create_dir_all(path.parent().expect("adv dir"))?;
        r.image.as_ref().context("attack result lacks an image")?.save_png(&path)?;
        out.push(rel);
        items.push(AttackRecord {
            target: id.clone(),
            reference: catalog.items()[r.reference].clone(),
            initial_distance: r.initial_distance,
            final_distance: r.final_distance,
            trace: r.trace.clone(),
        });
    }
    let manifest = AttackManifest { attack: label.to_string(), config, items };
    run.write(out, &format!("{dir}/attack_manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn attack(run: &mut RunDir) -> Result<StageOutcome> {
    cluster(run)?;
    train_diffusion(run)?;
    let cfg = run.cfg.clone();
    let (acfg, aip) = (cfg.attack_config(), cfg.aip_config());
    let fp = digest(&(
        "attack",
        fingerprint_of(run, "cluster")?,
        fingerprint_of(run, "train-diffusion")?,
        &acfg,
        &aip,
    ));
    run_stage(run, "attack", fp, |run, out| {
        let inputs = AttackInputs::load(run)?;
        let aip_results = aip_all(&inputs.targets, &inputs.catalog, &inputs.psi, &aip)?;
        write_attack(run, out, AIP, serde_json::to_value(&aip)?, &aip_results, &inputs.catalog)?;
        let ipdgi_results = inputs.ipdgi(&acfg)?;
        write_attack(run, out, IPDGI, serde_json::to_value(&acfg)?, &ipdgi_results, &inputs.catalog)?;
        let mean = |rs: &[AdversarialResult], f: fn(&AdversarialResult) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
        Ok(serde_json::json!({
            "targets": inputs.targets.len(),
            "ipdgi_initial_distance": mean(&ipdgi_results, |r| r.initial_distance),
            "ipdgi_final_distance": mean(&ipdgi_results, |r| r.final_distance),
            "aip_final_distance": mean(&aip_results, |r| r.final_distance),
        }))
    })
}

// ---- evaluation ----------------------------------------------------------

pub struct EvalInputs {
    pub catalog: Catalog,
    pub split: Split,
    pub targets: Vec<usize>,
    pub psi: FeatureExtractor<f32>,
    pub models: Vec<Model>,
    pub ks: Vec<usize>,
    pub exposure: ExposureDenominator,
}

impl EvalInputs {
    pub fn load(run: &RunDir) -> Result<Self> {
        let catalog = load_catalog(run)?;
        let psi = load_extractor(run)?;
        let features = psi.extract(&catalog.images().iter().collect::<Vec<_>>())?;
        Ok(Self {
            split: load_split(run, &catalog)?,
            targets: load_targets(run, &catalog)?,
            models: load_models(run, &features)?,
            ks: run.cfg.evaluate.ks.clone(),
            exposure: run.cfg.evaluate.exposure,
            psi,
            catalog,
        })
    }

    /// ER@K and NDCG@K for each K when `replacements` stand in for the
    /// original target images.
    pub fn score_condition(&self, model: &Model, replacements: &[(usize, Image)], ks: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
        let catalog = self.catalog.with_images(replacements)?;
        let refs: Vec<(usize, &Image)> = replacements.iter().map(|(i, img)| (*i, img)).collect();
        let model = model.with_replaced_items(&refs, &self.psi)?;
        let scores = model.score_matrix(catalog.images())?;
        let depth = ks.iter().copied().max().unwrap_or(1);
        let table = ranking_table(&scores, &self.split, depth)?;
        ks.iter()
            .map(|&k| {
                let er = match self.exposure {
                    ExposureDenominator::AllUsers => exposure_rate(&table, &self.targets, k)?,
                    ExposureDenominator::Eligible => exposure_rate_eligible(&table, &self.targets, k, &self.split)?,
                };
                Ok((k, er, ndcg_at_k(&table, &self.split.test, k)?))
            })
            .collect()
    }

    /// FID between Ψ penultimate features of the adversarial target images
    /// and of the original target images.
    pub fn fid_against_originals(&self, replacements: &[(usize, Image)]) -> Result<f64> {
        let adv: Vec<&Image> = replacements.iter().map(|(_, img)| img).collect();
        let orig: Vec<&Image> = replacements.iter().map(|(i, _)| self.catalog.image(*i)).collect();
        Ok(fid(&self.psi.extract_penultimate(&adv)?, &self.psi.extract_penultimate(&orig)?)?)
    }

    /// Full grid: every model × condition × K, plus FID per attacked condition.
    pub fn report(&self, conditions: &[(&str, Vec<(usize, Image)>)], ks: &[usize]) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        for model in &self.models {
            for (label, repl) in conditions {
                for (k, er, ndcg) in self.score_condition(model, repl, ks)? {
                    report.cells.push(MetricCell { model: model.kind().to_string(), attack: label.to_string(), k, er, ndcg });
                }
            }
        }
        for (label, repl) in conditions {
            if !repl.is_empty() {
                report.fid.insert(label.to_string(), self.fid_against_originals(repl)?);
            }
        }
        report.validate()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub model: String,
    pub k: usize,
    pub metric: String,
    pub attack: String,
    pub baseline: String,
    /// `None` when the baseline value is zero.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub dataset: DatasetStats,
    pub metrics: MetricReport,
    pub improvements: Vec<Improvement>,
    pub fid_improvement: Option<f64>,
}

/// Distinct (model, K) pairs in first-seen order.
pub fn model_ranks(metrics: &MetricReport) -> Vec<(String, usize)> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for c in &metrics.cells {
        if !keys.iter().any(|(m, k)| *m == c.model && *k == c.k) {
            keys.push((c.model.clone(), c.k));
        }
    }
    keys
}

pub fn improvements(metrics: &MetricReport) -> Vec<Improvement> {
    use vispromo_core::metrics::improvement;
    let pairs = [(IPDGI, NO_ATTACK), (AIP, NO_ATTACK), (IPDGI, AIP)];
    let mut out = Vec::new();
    for (model, k) in model_ranks(metrics) {
        for (attack, baseline) in pairs {
            let (Some(a), Some(b)) = (metrics.cell(&model, attack, k), metrics.cell(&model, baseline, k)) else { continue };
            for (metric, va, vb) in [("er", a.er, b.er), ("ndcg", a.ndcg, b.ndcg)] {
                out.push(Improvement {
                    model: model.clone(),
                    k,
                    metric: metric.into(),
                    attack: attack.into(),
                    baseline: baseline.into(),
                    percent: improvement(vb, va, false).ok(),
                });
            }
        }
    }
    out
}

pub fn evaluate(run: &mut RunDir) -> Result<StageOutcome> {
    attack(run)?;
    let cfg = run.cfg.clone();
    let fp = digest(&("evaluate", fingerprint_of(run, "attack")?, fingerprint_of(run, "train-rec")?, &cfg.evaluate));
    run_stage(run, "evaluate", fp, |run, out| {
        let inputs = EvalInputs::load(run)?;
        let conditions = vec![
            (NO_ATTACK, Vec::new()),
            (AIP, load_adversarial(run, AIP, &inputs.catalog, &inputs.targets)?),
            (IPDGI, load_adversarial(run, IPDGI, &inputs.catalog, &inputs.targets)?),
        ];
        let metrics = inputs.report(&conditions, &inputs.ks)?;
        let fid_improvement = match (metrics.fid.get(AIP), metrics.fid.get(IPDGI)) {
            (Some(&a), Some(&i)) => vispromo_core::metrics::improvement(a, i, true).ok(),
            _ => None,
        };
        let report = EvaluationReport {
            schema_version: REPORT_SCHEMA,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            dataset: serde_json::from_str(&run.read_string(DATASET_JSON)?)?,
            improvements: improvements(&metrics),
            metrics,
            fid_improvement,
        };
        run.write(out, METRICS_JSON, serde_json::to_string_pretty(&report)?.as_bytes())?;
        Ok(serde_json::to_value(&report.metrics.fid)?)
    })
}

pub fn load_report(run: &RunDir) -> Result<EvaluationReport> {
    let r: EvaluationReport = serde_json::from_str(&run.read_string(METRICS_JSON)?)?;
    if r.schema_version != REPORT_SCHEMA {
        bail!("report schema {} is not supported", r.schema_version);
    }
    Ok(r)
}
