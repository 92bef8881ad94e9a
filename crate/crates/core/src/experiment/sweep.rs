use std::fmt;

use serde::{Deserialize, Serialize};

use super::report::{write_csv, SUMMARY_HEADER};
use super::{emit_report, run_experiment, ExperimentConfig, RunSummary, SummaryRow};
use crate::adapters::FusionKind;
use crate::error::Result;

/// Bottleneck sizes of the rank sweep.
pub const RANKS: [usize; 3] = [8, 64, 128];
/// Translation qualities of the quality sweep.
pub const QUALITIES: [f64; 4] = [1.0, 0.95, 0.9, 0.8];
/// Training-set size of the low-resource cell.
pub const LOW_RESOURCE_K: usize = 100;
/// Epochs used by the low-resource cell.
pub const LOW_RESOURCE_EPOCHS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    FusionFn,
    Rank,
    MtQuality,
    MixLayer,
    LowResource,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [
        SweepKind::FusionFn,
        SweepKind::Rank,
        SweepKind::MtQuality,
        SweepKind::MixLayer,
        SweepKind::LowResource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::FusionFn => "fusion_fn",
            SweepKind::Rank => "rank",
            SweepKind::MtQuality => "mt_quality",
            SweepKind::MixLayer => "mix_layer",
            SweepKind::LowResource => "low_resource",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One config per value of the swept axis, each named `axis=value`.
pub fn expand_sweep(kind: SweepKind, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let cell = |value: String, edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.name = format!("{kind}={value}");
        edit(&mut c);
        c
    };
    match kind {
        SweepKind::FusionFn => FusionKind::ALL
            .iter()
            .map(|&f| cell(f.name().into(), &|c| c.adapter.fusion = f))
            .collect(),
        SweepKind::Rank => RANKS
            .iter()
            .map(|&r| cell(r.to_string(), &|c| c.adapter.rank = r))
            .collect(),
        SweepKind::MtQuality => QUALITIES
            .iter()
            .map(|&q| cell(q.to_string(), &|c| c.mt_quality = q))
            .collect(),
        SweepKind::MixLayer => (0..base.model.num_layers)
            .map(|k| cell(k.to_string(), &|c| c.adapter.mix_layer = Some(k)))
            .collect(),
        SweepKind::LowResource => vec![
            cell("full".into(), &|c| c.low_resource_k = None),
            cell(LOW_RESOURCE_K.to_string(), &|c| {
                c.low_resource_k = Some(LOW_RESOURCE_K);
                c.xlt_schedule.epochs = LOW_RESOURCE_EPOCHS;
            }),
        ],
    }
}

pub struct SweepOutcome {
    pub kind: SweepKind,
    pub cells: Vec<RunSummary>,
    /// Summary rows of the swept cells, in expansion order.
    pub table: Vec<SummaryRow>,
}

/// Runs every cell of the sweep, regenerates the report of the shared
/// output directory and writes `report/sweep_<kind>.csv`.
pub fn sweep(kind: SweepKind, base: &ExperimentConfig) -> Result<SweepOutcome> {
    base.validate()?;
    let configs = expand_sweep(kind, base);
    let mut cells = Vec::with_capacity(configs.len());
    for cfg in &configs {
        cells.push(run_experiment(cfg)?);
    }
    let report = emit_report(&base.output_dir)?;
    let mut table = Vec::new();
    for cfg in &configs {
        table.extend(report.summary.iter().filter(|s| s.name == cfg.name).cloned());
    }
    let path = base.output_dir.join("report").join(format!("sweep_{kind}.csv"));
    write_csv(&path, &SUMMARY_HEADER, &table)?;
    Ok(SweepOutcome { kind, cells, table })
}
