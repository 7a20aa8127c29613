//! Ablation driver: component swaps, modality subsets with and without
//! explanations, and depth sweeps, each averaged over seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{AlignMode, FusionVariant, ModalitySet, RunConfig, TemporalVariant};
use crate::data::{FeatureRecord, LabelScale};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    WithExplanations,
    WithoutExplanations,
    Component,
    Sweep,
}

impl RowGroup {
    pub fn label(self) -> &'static str {
        match self {
            RowGroup::WithExplanations => "w explanations",
            RowGroup::WithoutExplanations => "w/o explanations",
            RowGroup::Component => "Component Ablation",
            RowGroup::Sweep => "Sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub group: RowGroup,
    pub method: String,
    pub config: RunConfig,
}

/// Modality rows in table order; the first is the full model.
const SUBSETS: [(&str, ModalitySet); 7] = [
    ("TEXT", ModalitySet::ALL),
    ("A & V", ModalitySet { text: false, audio: true, video: true }),
    ("T & A", ModalitySet { text: true, audio: true, video: false }),
    ("T & V", ModalitySet { text: true, audio: false, video: true }),
    ("T", ModalitySet { text: true, audio: false, video: false }),
    ("A", ModalitySet { text: false, audio: true, video: false }),
    ("V", ModalitySet { text: false, audio: false, video: true }),
];

/// The 20 table rows derived from `base`.
pub fn variants(base: &RunConfig) -> Vec<Variant> {
    let mut full = base.clone();
    full.model.modalities = ModalitySet::ALL;
    full.model.explanations = true;
    let mut rows = Vec::with_capacity(20);
    for (group, explanations) in [(RowGroup::WithExplanations, true), (RowGroup::WithoutExplanations, false)] {
        for (method, set) in SUBSETS {
            let mut c = full.clone();
            c.model.modalities = set;
            c.model.explanations = explanations;
            rows.push(Variant {
                group,
                method: method.to_string(),
                config: c,
            });
        }
    }
    let component = |method: &str, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        edit(&mut c);
        Variant {
            group: RowGroup::Component,
            method: method.to_string(),
            config: c,
        }
    };
    rows.push(component("EA <- Linear", &|c| c.model.align = AlignMode::Linear));
    rows.push(component("TA <- Concat", &|c| c.model.temporal = TemporalVariant::Concat));
    rows.push(component("TA <- Mamba", &|c| c.model.temporal = TemporalVariant::Mamba));
    rows.push(component("TA <- TCA", &|c| c.model.temporal = TemporalVariant::Tca));
    rows.push(component("SMoE <- Trans", &|c| c.model.fusion = FusionVariant::Transformer));
    rows.push(component("TEXT w/o Gating", &|c| c.model.gating = false));
    rows
}

/// One row per SMoE depth.
pub fn depth_variants(base: &RunConfig, depths: &[usize]) -> Vec<Variant> {
    depths
        .iter()
        .map(|&l| {
            let mut c = base.clone();
            c.model.smoe.layers = l;
            Variant {
                group: RowGroup::Sweep,
                method: format!("SMoE layers = {l}"),
                config: c,
            }
        })
        .collect()
}

/// One row per expert count.
pub fn expert_variants(base: &RunConfig, counts: &[usize]) -> Vec<Variant> {
    counts
        .iter()
        .map(|&e| {
            let mut c = base.clone();
            c.model.smoe.num_experts = e;
            c.model.smoe.top_k = c.model.smoe.top_k.min(e);
            Variant {
                group: RowGroup::Sweep,
                method: format!("experts = {e}"),
                config: c,
            }
        })
        .collect()
}

/// Splits shared by every run of an ablation.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'a> {
    pub train: &'a [FeatureRecord],
    /// Logged each epoch and used by `keep_best_val`.
    pub val: &'a [FeatureRecord],
    /// Split the reported metrics are computed on.
    pub eval: &'a [FeatureRecord],
    pub scale: LabelScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: RowGroup,
    pub method: String,
    pub runs: Vec<SeedRun>,
    /// Field-wise mean over the successful runs.
    pub mean: Option<MetricReport>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub scale: LabelScale,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Field-wise mean; optional fields stay `None` unless every report has them.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let n = reports.len();
    if n == 0 {
        return None;
    }
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let avg_opt = |f: fn(&MetricReport) -> Option<f64>| mean_opt(reports.iter().map(f));
    Some(MetricReport {
        mae: avg(|r| r.mae),
        corr: avg(|r| r.corr),
        acc2_nonneg: avg(|r| r.acc2_nonneg),
        acc2_pos: avg_opt(|r| r.acc2_pos),
        acc3: avg_opt(|r| r.acc3),
        acc5: avg_opt(|r| r.acc5),
        acc7: avg_opt(|r| r.acc7),
        f1_nonneg: avg(|r| r.f1_nonneg),
        f1_pos: avg_opt(|r| r.f1_pos),
        n_samples: reports[0].n_samples,
        corr_degenerate: reports.iter().any(|r| r.corr_degenerate),
    })
}

fn run_once(config: &RunConfig, data: &AblationData<'_>) -> Result<MetricReport> {
    let out = train(config, data.train, data.val)?;
    Ok(evaluate(&out.model, &out.params, data.eval, data.scale)?.0)
}

/// Trains every variant once per seed. Failures are recorded on their row and the run continues.
pub fn run_variants(variants: &[Variant], seeds: &[u64], data: &AblationData<'_>) -> AblationTable {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = RunConfig {
                seed,
                ..v.config.clone()
            };
            let run = match run_once(&config, data) {
                Ok(report) => {
                    log::info!("{} / {} seed {seed}: mae {:.4}", v.group.label(), v.method, report.mae);
                    SeedRun {
                        seed,
                        report: Some(report),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("{} / {} seed {seed} failed: {e}", v.group.label(), v.method);
                    SeedRun {
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(run);
        }
        let ok: Vec<MetricReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
        rows.push(AblationRow {
            group: v.group,
            method: v.method.clone(),
            mean: mean_report(&ok),
            runs,
        });
    }
    AblationTable {
        scale: data.scale,
        seeds: seeds.to_vec(),
        rows,
    }
}

pub fn ablate(base: &RunConfig, seeds: &[u64], data: &AblationData<'_>) -> AblationTable {
    run_variants(&variants(base), seeds, data)
}

impl AblationTable {
    pub fn row(&self, group: RowGroup, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group == group && r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: settings, method, then Acc-2, Acc-k, F1 (percent), MAE, Corr.
    pub fn to_text(&self) -> String {
        let (k_lo, k_hi) = match self.scale {
            LabelScale::Three => ("Acc-5", "Acc-7"),
            LabelScale::One => ("Acc-3", "Acc-5"),
        };
        let header = ["Settings", "Method", "Acc-2", k_lo, k_hi, "F1", "MAE", "Corr"];
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let pair = |a: f64, b: Option<f64>| format!("{}/{}", pct(Some(a)), pct(b));
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        let mut last_group = None;
        for row in &self.rows {
            let settings = if last_group == Some(row.group) {
                String::new()
            } else {
                row.group.label().to_string()
            };
            last_group = Some(row.group);
            let mut cells = vec![settings, row.method.clone()];
            match &row.mean {
                Some(m) => {
                    let (lo, hi) = match self.scale {
                        LabelScale::Three => (m.acc5, m.acc7),
                        LabelScale::One => (m.acc3, m.acc5),
                    };
                    cells.extend([
                        pair(m.acc2_nonneg, m.acc2_pos),
                        pct(lo),
                        pct(hi),
                        pair(m.f1_nonneg, m.f1_pos),
                        format!("{:.3}", m.mae),
                        format!("{:.3}", m.corr),
                    ]);
                }
                None => cells.push("failed".to_string()),
            }
            if row.failed() {
                let n = row.runs.iter().filter(|r| r.error.is_some()).count();
                let note = format!("({n}/{} runs failed)", row.runs.len());
                cells.push(note);
            }
            lines.push(cells);
        }
        let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}
