mod common;

use std::collections::BTreeMap;
use std::path::Path;

use vispromo::experiments::{ablate, sweep, SweepParam, NO_CLUSTERING, NO_PERTURBATION};
use vispromo::report::{write_report, REPORT_MD};
use vispromo::rundir::MANIFEST_FILE;
use vispromo::stages::{self, load_report, AttackManifest, AIP, IPDGI, NO_ATTACK};
use vispromo::synthetic::SyntheticCorpusSpec;
use vispromo::RunDir;
use vispromo_core::dataset::k_core_filter;

use common::{tiny_config, tiny_run};

fn output_hashes(run: &RunDir) -> BTreeMap<String, BTreeMap<String, String>> {
    run.manifest().stages.iter().map(|(k, v)| (k.clone(), v.outputs.clone())).collect()
}

fn attack_manifest(root: &Path, attack: &str) -> AttackManifest {
    let text = std::fs::read_to_string(root.join(format!("adv/{attack}/attack_manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn rerun_is_a_no_op_and_reloads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 1);
    let first = stages::evaluate(&mut run).unwrap();
    assert!(first.ran);
    let before = output_hashes(&run);
    let manifest_before = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();

    let mut again = RunDir::open(dir.path()).unwrap();
    for outcome in [
        stages::prepare(&mut again).unwrap(),
        stages::train_rec(&mut again).unwrap(),
        stages::train_diffusion(&mut again).unwrap(),
        stages::cluster(&mut again).unwrap(),
        stages::attack(&mut again).unwrap(),
        stages::evaluate(&mut again).unwrap(),
    ] {
        assert!(!outcome.ran, "{} reran", outcome.stage);
    }
    assert_eq!(output_hashes(&again), before);
    assert_eq!(std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), manifest_before);
}

#[test]
fn changing_the_attack_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 2);
    stages::evaluate(&mut run).unwrap();
    let mut cfg = tiny_config(2);
    cfg.attack.guidance = 40.0;
    let mut run = RunDir::create(dir.path(), cfg).unwrap();
    assert!(!stages::train_rec(&mut run).unwrap().ran);
    assert!(!stages::train_diffusion(&mut run).unwrap().ran);
    assert!(stages::attack(&mut run).unwrap().ran);
    assert!(stages::evaluate(&mut run).unwrap().ran);
}

#[test]
fn a_tampered_output_makes_its_stage_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 3);
    stages::cluster(&mut run).unwrap();
    std::fs::write(dir.path().join(stages::CLUSTERS_JSON), b"{}").unwrap();
    let mut run = RunDir::open(dir.path()).unwrap();
    assert!(stages::cluster(&mut run).unwrap().ran);
    assert!(!stages::train_rec(&mut run).unwrap().ran);
}

#[test]
fn report_covers_every_model_rank_and_condition() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 4);
    stages::evaluate(&mut run).unwrap();
    let report = load_report(&run).unwrap();
    assert_eq!(report.seed, 4);
    assert_eq!(report.metrics.cells.len(), 3 * 3 * 3);
    for model in ["vbpr", "dvbpr", "amr"] {
        for k in [5, 10, 20] {
            for attack in [NO_ATTACK, AIP, IPDGI] {
                let c = report.metrics.cell(model, attack, k).unwrap_or_else(|| panic!("{model} {attack} {k}"));
                assert!((0.0..=1.0).contains(&c.er) && (0.0..=1.0).contains(&c.ndcg));
            }
        }
    }
    assert!(report.metrics.fid.contains_key(AIP) && report.metrics.fid.contains_key(IPDGI));
    assert!(!report.metrics.fid.contains_key(NO_ATTACK));

    // stable field names for downstream consumers
    let json: serde_json::Value = serde_json::from_str(&run.read_string(stages::METRICS_JSON).unwrap()).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["config_hash", "dataset", "fid_improvement", "improvements", "metrics", "schema_version", "seed"]);
    let cell = &json["metrics"]["cells"][0];
    for key in ["model", "attack", "k", "er", "ndcg"] {
        assert!(cell.get(key).is_some(), "cell lacks {key}");
    }
    assert_eq!(report.improvements.iter().filter(|i| i.metric == "er").count(), 3 * 3 * 3);
}

#[test]
fn attack_outputs_match_the_targets() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 5);
    stages::attack(&mut run).unwrap();
    let catalog = stages::load_catalog(&run).unwrap();
    let targets = stages::load_targets(&run, &catalog).unwrap();
    assert!(!targets.is_empty());
    let eps = run.cfg.aip.eps_max / 255.0;
    let aip = stages::load_adversarial(&run, AIP, &catalog, &targets).unwrap();
    for (item, img) in &aip {
        let worst = img.linf(catalog.image(*item)) as f64;
        assert!(worst <= eps + 1e-6, "AIP moved a pixel by {worst}");
    }
    for attack in [AIP, IPDGI] {
        let m = attack_manifest(dir.path(), attack);
        assert_eq!(m.items.len(), targets.len());
    }
    let m = attack_manifest(dir.path(), IPDGI);
    assert!(m.items.iter().all(|r| r.trace.len() == run.cfg.attack.epochs));
}

#[test]
fn single_value_sweep_reproduces_the_attack_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 6);
    stages::evaluate(&mut run).unwrap();
    let report = load_report(&run).unwrap();
    let steps = run.cfg.attack.steps as f64;
    let sw = sweep(&mut run, SweepParam::Steps, &[steps]).unwrap();
    assert_eq!(sw.points.len(), 1);
    for (model, er) in &sw.points[0].er {
        let cell = report.metrics.cell(model, IPDGI, 5).unwrap();
        assert_eq!(*er, cell.er, "{model}");
        assert_eq!(sw.baseline_er[model], report.metrics.cell(model, NO_ATTACK, 5).unwrap().er);
    }
    assert!((sw.points[0].fid - report.metrics.fid[IPDGI]).abs() < 1e-9);
    assert!(sweep(&mut run, SweepParam::Steps, &[0.0]).is_err());
    assert!(sweep(&mut run, SweepParam::Steps, &[]).is_err());
}

#[test]
fn ablation_and_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path(), 7);
    let ab = ablate(&mut run).unwrap();
    let settings: Vec<&str> = ab.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, [IPDGI, NO_CLUSTERING, NO_PERTURBATION]);

    let without_eps = attack_manifest(dir.path(), NO_PERTURBATION);
    assert!(without_eps.items.iter().all(|r| r.trace.is_empty()));
    let global = attack_manifest(dir.path(), NO_CLUSTERING);
    let refs: std::collections::HashSet<&str> = global.items.iter().map(|r| r.reference.as_str()).collect();
    assert_eq!(refs.len(), 1, "without clustering every target shares the global reference");

    let written = write_report(&mut run).unwrap();
    assert!(written.iter().any(|p| p == REPORT_MD));
    let md = run.read_string(REPORT_MD).unwrap();
    assert!(md.contains("## Exposure rate") && md.contains("Ablation"));
    let er_section = md.split("## Exposure rate").nth(1).unwrap().split("##").next().unwrap();
    let rows = er_section.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Model")).count();
    assert_eq!(rows, 3 * 3, "one row per model and rank");
    assert!(!write_report(&mut run).unwrap().is_empty());
}

#[test]
fn default_corpus_survives_the_core_filter() {
    let corpus = vispromo::synthetic::generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
    let before = corpus.catalog.users().len();
    let filtered = k_core_filter(&corpus.catalog, 10).unwrap();
    assert!(filtered.users().len() as f64 >= 0.9 * before as f64);
}
