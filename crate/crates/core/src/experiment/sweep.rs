use serde::{Deserialize, Serialize};

use super::config::{Datasets, ExperimentConfig, Scenario};
use super::record::RunRecord;
use super::run::run_experiment;
use crate::annotation::OracleAnnotator;
use crate::error::{Error, Result};
use crate::metrics::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub iteration: usize,
    pub budget_fraction: MeanStd,
    pub accuracy: MeanStd,
    pub mean_dice: MeanStd,
    pub human_annotation_fraction: MeanStd,
}

/// Mean and sample standard deviation over the runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub name: String,
    pub scenario: Scenario,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub curve: Vec<AggregatePoint>,
    pub aulc_acc: Option<MeanStd>,
    pub aulc_interp: Option<MeanStd>,
    pub final_accuracy: MeanStd,
    pub final_dice: MeanStd,
}

/// Aggregates runs of the same configuration. Curves are truncated to the
/// shortest run.
pub fn aggregate(records: &[RunRecord]) -> Result<AggregateReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Argument("nothing to aggregate".into()))?;
    if let Some(other) = records.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::Argument(format!(
            "runs {} and {} come from different configurations",
            first.run_id, other.run_id
        )));
    }
    let len = records.iter().map(|r| r.points.len()).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::Argument("a run has no curve points".into()));
    }
    let column = |i: usize, f: fn(&crate::metrics::CurvePoint) -> f64| -> MeanStd {
        MeanStd::of(&records.iter().map(|r| f(&r.points[i])).collect::<Vec<_>>())
    };
    let curve = (0..len)
        .map(|i| AggregatePoint {
            iteration: first.points[i].iteration,
            budget_fraction: column(i, |p| p.budget_fraction),
            accuracy: column(i, |p| p.accuracy),
            mean_dice: column(i, |p| p.mean_dice),
            human_annotation_fraction: column(i, |p| p.human_annotation_fraction),
        })
        .collect();
    let optional = |f: fn(&RunRecord) -> Option<f64>| -> Option<MeanStd> {
        records.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| MeanStd::of(&v))
    };
    Ok(AggregateReport {
        name: first.config.name.clone(),
        scenario: first.config.scenario,
        config_hash: first.config_hash.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        curve,
        aulc_acc: optional(|r| r.aulc_acc),
        aulc_interp: optional(|r| r.aulc_interp),
        final_accuracy: column(len - 1, |p| p.accuracy),
        final_dice: column(len - 1, |p| p.mean_dice),
    })
}

/// Runs every seed of every configuration with the oracle annotator and
/// aggregates per configuration.
pub fn sweep(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<Vec<(AggregateReport, Vec<RunRecord>)>> {
    let mut out = Vec::with_capacity(configs.len());
    for config in configs {
        let data = config.dataset.load()?;
        out.push(sweep_one(config, seeds, &data)?);
    }
    Ok(out)
}

pub fn sweep_one(config: &ExperimentConfig, seeds: &[u64], data: &Datasets) -> Result<(AggregateReport, Vec<RunRecord>)> {
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        log::info!("{} seed {seed}", config.name);
        records.push(run_experiment(config, seed, data, &mut OracleAnnotator)?);
    }
    Ok((aggregate(&records)?, records))
}

pub fn aggregate_csv(report: &AggregateReport) -> String {
    let mut out = String::from(
        "iteration,budget_fraction,accuracy_mean,accuracy_std,mean_dice_mean,mean_dice_std,human_annotation_fraction\n",
    );
    for p in &report.curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.iteration,
            p.budget_fraction.mean,
            p.accuracy.mean,
            p.accuracy.std,
            p.mean_dice.mean,
            p.mean_dice.std,
            p.human_annotation_fraction.mean
        ));
    }
    out
}

/// One row per configuration: AULC and final-iteration means with their
/// standard deviations.
pub fn summary_csv(reports: &[AggregateReport]) -> String {
    let mut out = String::from(
        "name,scenario,runs,aulc_acc_mean,aulc_acc_std,aulc_interp_mean,aulc_interp_std,final_accuracy_mean,final_dice_mean\n",
    );
    let fmt = |m: Option<MeanStd>| match m {
        Some(m) => format!("{},{}", m.mean, m.std),
        None => ",".to_string(),
    };
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.scenario,
            r.seeds.len(),
            fmt(r.aulc_acc),
            fmt(r.aulc_interp),
            r.final_accuracy.mean,
            r.final_dice.mean
        ));
    }
    out
}
