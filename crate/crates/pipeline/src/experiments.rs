//! Hyper-parameter sweeps and ablations over a trained run. Both reuse the
//! trained recommenders, denoiser and clusters and only redo the attack and
//! its evaluation.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use vispromo_core::attack::AttackConfig;
use vispromo_core::image::Image;

use crate::config::digest;
use crate::plot;
use crate::rundir::RunDir;
use crate::stages::{self, fingerprint_of, load_adversarial, run_stage, write_attack, AttackInputs, EvalInputs, IPDGI};

/// Rank cut-off used by sweeps and ablations.
pub const FOCUS_K: usize = 5;
pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Perturbation budget ε_max (1/255 units).
    Eps,
    /// Perturbation epochs e.
    Epochs,
    /// Attack diffusion steps T.
    Steps,
    /// Guidance scale ξ.
    Guidance,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Eps => "eps_max",
            SweepParam::Epochs => "epochs",
            SweepParam::Steps => "steps",
            SweepParam::Guidance => "guidance",
        }
    }

    pub fn apply(self, cfg: &mut AttackConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value < 1.0 || value.fract() != 0.0 {
                bail!("{} takes positive integers, got {value}", self.key());
            }
            Ok(value as usize)
        };
        match self {
            SweepParam::Eps => cfg.eps_max = value,
            SweepParam::Epochs => cfg.epochs = count()?,
            SweepParam::Steps => cfg.steps = count()?,
            SweepParam::Guidance => cfg.guidance = value,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// ER@5 per model with the attacked images.
    pub er: BTreeMap<String, f64>,
    pub mean_er: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub param: SweepParam,
    pub k: usize,
    /// ER@5 per model without any attack.
    pub baseline_er: BTreeMap<String, f64>,
    pub points: Vec<SweepPoint>,
}

pub fn sweep_paths(param: SweepParam) -> (String, String) {
    (format!("sweeps/{}.json", param.key()), format!("sweeps/{}.svg", param.key()))
}

fn er_by_model(eval: &EvalInputs, repl: &[(usize, Image)]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for m in &eval.models {
        let (_, er, _) = eval.score_condition(m, repl, &[FOCUS_K])?[0];
        out.insert(m.kind().to_string(), er);
    }
    Ok(out)
}

fn mean(values: &BTreeMap<String, f64>) -> f64 {
    values.values().sum::<f64>() / values.len().max(1) as f64
}

fn images_of(results: &[vispromo_core::attack::AdversarialResult]) -> Vec<(usize, Image)> {
    results.iter().map(|r| (r.target, r.image.clone().expect("attack returns an image"))).collect()
}

pub fn sweep(run: &mut RunDir, param: SweepParam, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        bail!("a sweep needs at least one value");
    }
    let mut probe = run.cfg.attack_config();
    for &v in values {
        param.apply(&mut probe, v)?;
        probe.validate(run.cfg.diffusion.t_max)?;
    }
    stages::cluster(run)?;
    stages::train_diffusion(run)?;
    let cfg = run.cfg.clone();
    let fp = digest(&(
        "sweep",
        param,
        values,
        fingerprint_of(run, "cluster")?,
        fingerprint_of(run, "train-diffusion")?,
        cfg.attack_config(),
        &cfg.evaluate,
    ));
    let (json_path, svg_path) = sweep_paths(param);
    let stage: &'static str = match param {
        SweepParam::Eps => "sweep-eps_max",
        SweepParam::Epochs => "sweep-epochs",
        SweepParam::Steps => "sweep-steps",
        SweepParam::Guidance => "sweep-guidance",
    };
    run_stage(run, stage, fp, |run, out| {
        let attack = AttackInputs::load(run)?;
        let eval = EvalInputs::load(run)?;
        let mut points = Vec::with_capacity(values.len());
        for &v in values {
            let mut acfg = cfg.attack_config();
            param.apply(&mut acfg, v)?;
            log::info!("sweep {} = {v}", param.key());
            let repl = images_of(&attack.ipdgi(&acfg)?);
            let er = er_by_model(&eval, &repl)?;
            points.push(SweepPoint { value: v, mean_er: mean(&er), er, fid: eval.fid_against_originals(&repl)? });
        }
        let report = SweepReport { schema_version: SCHEMA, param, k: FOCUS_K, baseline_er: er_by_model(&eval, &[])?, points };
        run.write(out, &json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        run.write(out, &svg_path, sweep_svg(&report).as_bytes())?;
        Ok(serde_json::json!({ "values": values.len() }))
    })?;
    Ok(serde_json::from_str(&run.read_string(&json_path)?)?)
}

pub fn sweep_svg(report: &SweepReport) -> String {
    let xs: Vec<f64> = report.points.iter().map(|p| p.value).collect();
    plot::dual_axis_lines(
        &format!("IPDGI sensitivity to {}", report.param.key()),
        report.param.key(),
        &xs,
        (&format!("mean ER@{}", report.k), &report.points.iter().map(|p| p.mean_er).collect::<Vec<_>>()),
        ("FID", &report.points.iter().map(|p| p.fid).collect::<Vec<_>>()),
    )
}

pub const NO_CLUSTERING: &str = "ipdgi-no-clustering";
pub const NO_PERTURBATION: &str = "ipdgi-no-perturbation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub er: BTreeMap<String, f64>,
    pub mean_er: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub k: usize,
    pub baseline_er: BTreeMap<String, f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}

pub const ABLATION_JSON: &str = "ablation/ablation.json";
pub const ABLATION_SVG: &str = "ablation/ablation.svg";

/// Full IPDGI (taken from the attack stage) against IPDGI with the global
/// most-popular reference and IPDGI without ε.
pub fn ablate(run: &mut RunDir) -> Result<AblationReport> {
    stages::attack(run)?;
    let cfg = run.cfg.clone();
    let fp = digest(&("ablate", fingerprint_of(run, "attack")?, fingerprint_of(run, "train-rec")?, &cfg.evaluate));
    run_stage(run, "ablate", fp, |run, out| {
        let attack = AttackInputs::load(run)?;
        let eval = EvalInputs::load(run)?;
        let base = cfg.attack_config();
        let full = load_adversarial(run, IPDGI, &eval.catalog, &eval.targets)?;
        let mut rows = Vec::new();
        let er = er_by_model(&eval, &full)?;
        rows.push(AblationRow { setting: IPDGI.into(), mean_er: mean(&er), er });
        for (label, acfg) in [
            (NO_CLUSTERING, AttackConfig { no_clustering: true, ..base.clone() }),
            (NO_PERTURBATION, AttackConfig { no_perturbation: true, ..base.clone() }),
        ] {
            let results = attack.ipdgi(&acfg)?;
            write_attack(run, out, label, serde_json::to_value(&acfg)?, &results, &attack.catalog)?;
            let er = er_by_model(&eval, &images_of(&results))?;
            rows.push(AblationRow { setting: label.into(), mean_er: mean(&er), er });
        }
        let report = AblationReport { schema_version: SCHEMA, k: FOCUS_K, baseline_er: er_by_model(&eval, &[])?, rows };
        run.write(out, ABLATION_JSON, serde_json::to_string_pretty(&report)?.as_bytes())?;
        run.write(out, ABLATION_SVG, ablation_svg(&report).as_bytes())?;
        Ok(serde_json::json!({ "settings": report.rows.len() }))
    })?;
    Ok(serde_json::from_str(&run.read_string(ABLATION_JSON)?)?)
}

pub fn ablation_svg(report: &AblationReport) -> String {
    let models: Vec<String> = report.baseline_er.keys().cloned().collect();
    let series: Vec<(String, Vec<f64>)> = report
        .rows
        .iter()
        .map(|r| (r.setting.clone(), models.iter().map(|m| r.er.get(m).copied().unwrap_or(0.0)).collect()))
        .collect();
    plot::grouped_bars(&format!("Ablation: ER@{}", report.k), &models, &series, &format!("ER@{}", report.k))
}
