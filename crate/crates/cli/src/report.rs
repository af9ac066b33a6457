//! Report assembly from whatever artifacts exist. Sections always appear in
//! the same order; missing ones are listed as absent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use true_core::executor::format_percent;
use true_core::failure::{Impact, ShapleyMode};

use crate::pipeline::{
    CoverageArtifact, DagArtifact, E3Artifact, E3Row, FailuresArtifact, PredictArtifact, ShapleyArtifact, Stage, StabilityArtifact,
};
use crate::store::{ArtifactStore, StoreError};

pub const REPORT_SCHEMA: &str = "true.report/v1";
const DASH: &str = "\u{2014}";

/// Section name and the stage whose artifact feeds it, in report order.
pub const SECTIONS: [(&str, Stage); 6] = [
    ("e3", Stage::E3),
    ("dag", Stage::Dag),
    ("coverage", Stage::Coverage),
    ("prediction", Stage::Predict),
    ("failure_modes", Stage::Shapley),
    ("stability", Stage::Stability),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagSummary {
    pub anchor_id: String,
    pub instances: u64,
    pub nodes: usize,
    pub edges: usize,
    pub pert_sr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub anchor_id: String,
    pub pret_match: Option<f64>,
    pub gt_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub rows: Vec<CoverageRow>,
    pub pret_match: Option<f64>,
    pub gt_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub anchor_id: String,
    pub ce_dag: Option<f64>,
    pub ce_baseline: Option<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub rows: Vec<PredictionRow>,
    pub mean_ce_dag: Option<f64>,
    pub mean_ce_baseline: Option<f64>,
    pub delta_ce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub id: String,
    pub name: String,
    pub error_type: String,
    pub complexity: String,
    pub phi: f64,
    pub impact: Impact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTable {
    pub cluster_id: String,
    pub mode: ShapleyMode,
    pub rows: Vec<ModeRow>,
    pub total: f64,
    pub variants: Option<usize>,
    pub dropped_variants: Option<usize>,
    pub approximated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub size: usize,
    pub jaccard: f64,
    pub kendall_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub cluster_id: String,
    pub full_top_k: Vec<String>,
    pub rows: Vec<StabilityRow>,
    /// Columns size, jaccard, kendall_tau.
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub absent: Vec<String>,
    pub e3: Option<Vec<E3Row>>,
    pub dag: Option<Vec<DagSummary>>,
    pub coverage: Option<CoverageSummary>,
    pub prediction: Option<PredictionSummary>,
    pub failure_modes: Option<Vec<FailureTable>>,
    pub stability: Option<Vec<StabilitySummary>>,
}

fn load<T: serde::de::DeserializeOwned>(store: &ArtifactStore, stage: Stage) -> Result<Option<T>, StoreError> {
    let rel = stage.artifact();
    if !store.exists(&rel) {
        return Ok(None);
    }
    store.read_json(&rel).map(Some)
}

pub fn build_report(store: &ArtifactStore) -> Result<Report, StoreError> {
    let e3 = load::<E3Artifact>(store, Stage::E3)?.map(|a| a.rows);
    let dag = load::<DagArtifact>(store, Stage::Dag)?.map(|a| {
        a.entries
            .iter()
            .map(|e| DagSummary {
                anchor_id: e.anchor_id.clone(),
                instances: e.assessment.neighborhood_size,
                nodes: e.dag.nodes.len(),
                edges: e.dag.edges.len(),
                pert_sr: e.assessment.pert_sr(),
            })
            .collect()
    });
    let coverage = load::<CoverageArtifact>(store, Stage::Coverage)?.map(|a| CoverageSummary {
        rows: a
            .entries
            .iter()
            .map(|e| CoverageRow { anchor_id: e.anchor_id.clone(), pret_match: e.report.pret_match, gt_match: e.report.gt_match })
            .collect(),
        pret_match: a.pret_match,
        gt_match: a.gt_match,
    });
    let prediction = load::<PredictArtifact>(store, Stage::Predict)?.map(|a| PredictionSummary {
        rows: a
            .entries
            .iter()
            .map(|e| PredictionRow {
                anchor_id: e.anchor_id.clone(),
                ce_dag: e.dag.mean_ce,
                ce_baseline: e.baseline.mean_ce,
                excluded: e.dag.excluded.len() + e.baseline.excluded.len(),
            })
            .collect(),
        mean_ce_dag: a.mean_ce_dag,
        mean_ce_baseline: a.mean_ce_baseline,
        delta_ce: a.delta_ce,
    });
    let failures = load::<FailuresArtifact>(store, Stage::Failures)?;
    let failure_modes = load::<ShapleyArtifact>(store, Stage::Shapley)?.map(|a| {
        a.entries
            .iter()
            .map(|s| {
                let f = failures.as_ref().and_then(|f| f.entries.iter().find(|e| e.cluster_id == s.cluster_id));
                let mut rows: Vec<ModeRow> = s
                    .result
                    .attributions
                    .iter()
                    .map(|m| ModeRow {
                        id: m.id.clone(),
                        name: m.name.clone(),
                        error_type: m.error_type.clone(),
                        complexity: m.complexity.clone(),
                        phi: m.phi,
                        impact: m.impact,
                    })
                    .collect();
                rows.sort_by(|x, y| y.phi.total_cmp(&x.phi).then_with(|| x.id.cmp(&y.id)));
                FailureTable {
                    cluster_id: s.cluster_id.clone(),
                    mode: s.result.mode,
                    rows,
                    total: s.result.total,
                    variants: f.map(|f| f.analysis.augmented.items.iter().filter(|i| i.variant).count()),
                    dropped_variants: f.map(|f| f.analysis.augmented.warnings.len()),
                    approximated: s.result.approximated.clone(),
                }
            })
            .collect()
    });
    let stability = load::<StabilityArtifact>(store, Stage::Stability)?.map(|a| {
        a.entries
            .iter()
            .map(|e| StabilitySummary {
                cluster_id: e.cluster_id.clone(),
                full_top_k: e.report.full_top_k.clone(),
                rows: e
                    .report
                    .sizes
                    .iter()
                    .map(|s| StabilityRow { size: s.size, jaccard: s.mean_jaccard, kendall_tau: s.mean_kendall_tau })
                    .collect(),
                csv: e.report.to_csv(),
            })
            .collect()
    });
    let present = [e3.is_some(), dag.is_some(), coverage.is_some(), prediction.is_some(), failure_modes.is_some(), stability.is_some()];
    let absent = SECTIONS.iter().zip(present).filter(|(_, p)| !p).map(|((n, _), _)| n.to_string()).collect();
    Ok(Report { schema: REPORT_SCHEMA.into(), absent, e3, dag, coverage, prediction, failure_modes, stability })
}

fn pct(x: Option<f64>) -> String {
    format_percent(&x)
}

fn num(x: Option<f64>, places: usize) -> String {
    x.map_or_else(|| DASH.to_string(), |v| format!("{v:.places$}"))
}

fn heading(out: &mut String, title: &str) {
    let _ = writeln!(out, "== {title} ==");
}

pub fn render_text(r: &Report) -> String {
    let mut out = String::new();
    let absent = |out: &mut String, name: &str| {
        let stage = SECTIONS.iter().find(|(n, _)| *n == name).map(|(_, s)| s.as_str()).unwrap_or(name);
        let _ = writeln!(out, "(absent: run the `{stage}` stage)\n");
    };

    heading(&mut out, "Executable explanation evaluation");
    match &r.e3 {
        Some(rows) => {
            let _ = writeln!(out, "{:<16} {:>4} {:>6} {:>6} {:>6} {:>6}", "Strategy", "N", "EA", "OA", "EC", "ERR");
            for row in rows {
                let [ea, oa, ec, err] = &row.percents;
                let _ = writeln!(out, "{:<16} {:>4} {ea:>6} {oa:>6} {ec:>6} {err:>6}", row.strategy, row.counts.n);
            }
            out.push('\n');
        }
        None => absent(&mut out, "e3"),
    }

    heading(&mut out, "Feasible-region DAGs");
    match &r.dag {
        Some(rows) => {
            let _ = writeln!(out, "{:<12} {:>9} {:>6} {:>6} {:>8}", "Anchor", "Instances", "Nodes", "Edges", "Pert SR");
            for d in rows {
                let _ = writeln!(out, "{:<12} {:>9} {:>6} {:>6} {:>8}", d.anchor_id, d.instances, d.nodes, d.edges, pct(d.pert_sr));
            }
            out.push('\n');
        }
        None => absent(&mut out, "dag"),
    }

    heading(&mut out, "Trajectory coverage");
    match &r.coverage {
        Some(c) => {
            let _ = writeln!(out, "{:<12} {:>11} {:>9}", "Anchor", "Pret Match", "GT Match");
            for row in &c.rows {
                let _ = writeln!(out, "{:<12} {:>11} {:>9}", row.anchor_id, pct(row.pret_match), pct(row.gt_match));
            }
            let _ = writeln!(out, "{:<12} {:>11} {:>9}\n", "mean", pct(c.pret_match), pct(c.gt_match));
        }
        None => absent(&mut out, "coverage"),
    }

    heading(&mut out, "Success-rate prediction (cross-entropy)");
    match &r.prediction {
        Some(p) => {
            let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>9}", "Anchor", "DAG", "Baseline", "Excluded");
            for row in &p.rows {
                let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>9}", row.anchor_id, num(row.ce_dag, 3), num(row.ce_baseline, 3), row.excluded);
            }
            let _ = writeln!(out, "{:<12} {:>8} {:>9}", "mean", num(p.mean_ce_dag, 3), num(p.mean_ce_baseline, 3));
            let _ = writeln!(out, "delta CE (baseline - DAG): {}\n", num(p.delta_ce, 3));
        }
        None => absent(&mut out, "prediction"),
    }

    heading(&mut out, "Failure modes");
    match &r.failure_modes {
        Some(tables) => {
            for t in tables {
                let mode = match t.mode {
                    ShapleyMode::Exact => "exact",
                    ShapleyMode::Sampled => "sampled",
                };
                let _ = writeln!(out, "Cluster {} ({mode})", t.cluster_id);
                let _ = writeln!(out, "{:<4} {:<28} {:<20} {:<10} {:>9} {:<6}", "Id", "Failure Mode", "Error Type", "Complexity", "Shapley", "Impact");
                for m in &t.rows {
                    let _ = writeln!(
                        out,
                        "{:<4} {:<28} {:<20} {:<10} {:>9.2} {:<6}",
                        m.id,
                        m.name,
                        m.error_type,
                        m.complexity,
                        m.phi,
                        m.impact.as_str()
                    );
                }
                if t.rows.is_empty() {
                    let _ = writeln!(out, "(no failure modes)");
                }
                let _ = writeln!(out, "u(F) - u(empty) = {:.4}", t.total);
                if let (Some(v), Some(d)) = (t.variants, t.dropped_variants) {
                    let _ = writeln!(out, "variants: {v} kept, {d} dropped");
                }
                if !t.approximated.is_empty() {
                    let _ = writeln!(out, "approximated coalitions: {}", t.approximated.join(" "));
                }
                out.push('\n');
            }
        }
        None => absent(&mut out, "failure_modes"),
    }

    heading(&mut out, "Subsampling stability");
    match &r.stability {
        Some(rows) => {
            for s in rows {
                let _ = writeln!(out, "Cluster {} (full top-k: {})", s.cluster_id, s.full_top_k.join(", "));
                let _ = writeln!(out, "{:>5} {:>8} {:>12}", "size", "Jaccard", "Kendall tau");
                for row in &s.rows {
                    let _ = writeln!(out, "{:>5} {:>8.3} {:>12}", row.size, row.jaccard, num(row.kendall_tau, 3));
                }
                out.push('\n');
            }
        }
        None => absent(&mut out, "stability"),
    }
    out.lines().map(|l| format!("{}\n", l.trim_end())).collect()
}
