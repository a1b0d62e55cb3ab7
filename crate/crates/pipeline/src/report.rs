//! Markdown tables and figures assembled from finished stages.

use std::fmt::Write;

use anyhow::Result;

use crate::config::digest;
use crate::experiments::{ablation_svg, sweep_svg, AblationReport, SweepParam, SweepReport, ABLATION_JSON};
use crate::rundir::RunDir;
use crate::stages::{self, fingerprint_of, load_report, run_stage, EvaluationReport, AIP, IPDGI, NO_ATTACK};

pub const REPORT_MD: &str = "report/report.md";

const SWEEPS: [SweepParam; 4] = [SweepParam::Eps, SweepParam::Epochs, SweepParam::Steps, SweepParam::Guidance];

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |p| format!("{p:+.2}%"))
}

fn change(before: f64, after: f64) -> Option<f64> {
    vispromo_core::metrics::improvement(before, after, false).ok()
}

/// Markdown for one metric: rows are (model, K), columns the three
/// conditions followed by pairwise changes.
pub fn metric_table(report: &EvaluationReport, metric: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Model | K | No Attack | AIP | IPDGI | AIP vs none | IPDGI vs none | IPDGI vs AIP |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for (model, k) in stages::model_ranks(&report.metrics) {
        let get = |attack: &str| {
            report.metrics.cell(&model, attack, k).map(|c| if metric == "er" { c.er } else { c.ndcg })
        };
        let (Some(n), Some(a), Some(i)) = (get(NO_ATTACK), get(AIP), get(IPDGI)) else { continue };
        let _ = writeln!(
            s,
            "| {model} | {k} | {n:.4} | {a:.4} | {i:.4} | {} | {} | {} |",
            pct(change(n, a)),
            pct(change(n, i)),
            pct(change(a, i))
        );
    }
    s
}

pub fn render_markdown(report: &EvaluationReport, sweeps: &[SweepReport], ablation: Option<&AblationReport>) -> String {
    let mut s = String::new();
    let d = &report.dataset;
    let _ = writeln!(s, "# Attack evaluation\n");
    let _ = writeln!(s, "Seed {}, config `{}`.\n", report.seed, &report.config_hash[..12.min(report.config_hash.len())]);
    let _ = writeln!(
        s,
        "Dataset: {} users, {} items, {} interactions, sparsity {:.2}%, {} target items.\n",
        d.users, d.items, d.interactions, d.sparsity, d.targets
    );
    let _ = writeln!(s, "## Exposure rate (ER@K)\n\n{}", metric_table(report, "er"));
    let _ = writeln!(s, "## Ranking quality (NDCG@K)\n\n{}", metric_table(report, "ndcg"));
    let _ = writeln!(s, "## Image quality (FID against originals)\n");
    let _ = writeln!(s, "| AIP | IPDGI | Reduction |\n|---|---|---|");
    let fid = |k: &str| report.metrics.fid.get(k).map_or("n/a".into(), |v| format!("{v:.4}"));
    let _ = writeln!(s, "| {} | {} | {} |\n", fid(AIP), fid(IPDGI), pct(report.fid_improvement));
    for sw in sweeps {
        let _ = writeln!(s, "## Sweep over {}\n", sw.param.key());
        let _ = writeln!(s, "![](sweep-{}.svg)\n", sw.param.key());
        let models: Vec<&String> = sw.baseline_er.keys().collect();
        let head: Vec<String> = models.iter().map(|m| format!("ER@{} {m}", sw.k)).collect();
        let _ = writeln!(s, "| {} | {} | mean | FID |", sw.param.key(), head.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(models.len() + 3));
        for p in &sw.points {
            let cells: Vec<String> = models.iter().map(|m| format!("{:.4}", p.er[*m])).collect();
            let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", p.value, cells.join(" | "), p.mean_er, p.fid);
        }
        s.push('\n');
    }
    if let Some(ab) = ablation {
        let _ = writeln!(s, "## Ablation (ER@{})\n\n![](ablation.svg)\n", ab.k);
        let models: Vec<&String> = ab.baseline_er.keys().collect();
        let _ = writeln!(s, "| Setting | {} | mean |", models.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(models.len() + 2));
        let base_mean = ab.baseline_er.values().sum::<f64>() / models.len().max(1) as f64;
        let base: Vec<String> = models.iter().map(|m| format!("{:.4}", ab.baseline_er[*m])).collect();
        let _ = writeln!(s, "| no attack | {} | {base_mean:.4} |", base.join(" | "));
        for row in &ab.rows {
            let cells: Vec<String> = models.iter().map(|m| format!("{:.4}", row.er[*m])).collect();
            let _ = writeln!(s, "| {} | {} | {:.4} |", row.setting, cells.join(" | "), row.mean_er);
        }
    }
    s
}

/// Writes `report/report.md` plus a figure for every finished sweep and the
/// ablation. Returns the written paths.
pub fn write_report(run: &mut RunDir) -> Result<Vec<String>> {
    stages::evaluate(run)?;
    let sweep_stages: Vec<(SweepParam, String)> = SWEEPS
        .iter()
        .filter_map(|&p| run.record(&format!("sweep-{}", p.key())).map(|r| (p, r.fingerprint.clone())))
        .collect();
    let ablate_fp = run.record("ablate").map(|r| r.fingerprint.clone());
    let fp = digest(&("report", fingerprint_of(run, "evaluate")?, &sweep_stages, &ablate_fp));
    let mut written = Vec::new();
    run_stage(run, "report", fp, |run, out| {
        let report = load_report(run)?;
        let mut sweeps = Vec::new();
        for (p, _) in &sweep_stages {
            let sw: SweepReport = serde_json::from_str(&run.read_string(&crate::experiments::sweep_paths(*p).0)?)?;
            run.write(out, &format!("report/sweep-{}.svg", p.key()), sweep_svg(&sw).as_bytes())?;
            sweeps.push(sw);
        }
        let ablation: Option<AblationReport> = match ablate_fp {
            Some(_) => Some(serde_json::from_str(&run.read_string(ABLATION_JSON)?)?),
            None => None,
        };
        if let Some(ab) = &ablation {
            run.write(out, "report/ablation.svg", ablation_svg(ab).as_bytes())?;
        }
        run.write(out, REPORT_MD, render_markdown(&report, &sweeps, ablation.as_ref()).as_bytes())?;
        Ok(serde_json::Value::Null)
    })?;
    written.extend(run.record("report").map(|r| r.outputs.keys().cloned().collect::<Vec<_>>()).unwrap_or_default());
    Ok(written)
}
