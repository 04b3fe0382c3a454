use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario};
use crate::data::{query_size, AnnotationSource};
use crate::error::{Error, Result};
use crate::metrics::CurvePoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub iteration: usize,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub source: AnnotationSource,
}

/// One call to the annotator, kept to audit when masks were requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorCall {
    pub iteration: usize,
    pub count: usize,
    pub want_mask: bool,
    /// Labeled-set size before the batch was added.
    pub labeled_before: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTallies {
    pub human_masks: usize,
    pub ai_masks: usize,
    pub label_only: usize,
    /// AI masks with no foreground pixel.
    pub degenerate_ai_masks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub iteration: usize,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub git_revision: Option<String>,
    pub train_size: usize,
    pub points: Vec<CurvePoint>,
    pub queries: Vec<QueryRecord>,
    pub annotator_calls: Vec<AnnotatorCall>,
    pub tallies: AnnotationTallies,
    pub aulc_acc: Option<f64>,
    pub aulc_interp: Option<f64>,
    /// Query iterations actually run.
    pub iterations_completed: usize,
    /// The pool ran out before the configured number of iterations.
    pub finished_early: bool,
    pub timings: Vec<StageTiming>,
}

impl RunRecord {
    /// Copy with wall-clock fields cleared, for reproducibility checks.
    pub fn without_timings(&self) -> RunRecord {
        RunRecord {
            timings: Vec::new(),
            ..self.clone()
        }
    }

    pub fn final_point(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    pub fn labeled_count(&self) -> usize {
        self.annotator_calls.iter().map(|c| c.count).sum()
    }

    /// Mask-accounting rules every finished run must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("{}: {msg}", self.run_id)));
        let t = &self.tallies;
        let labeled = self.labeled_count();
        if t.human_masks + t.ai_masks + t.label_only != labeled {
            return fail(format!("tallies cover {} of {labeled} labeled samples", t.human_masks + t.ai_masks + t.label_only));
        }
        match self.config.scenario {
            Scenario::B1 => {
                if t.human_masks + t.ai_masks > 0 || self.annotator_calls.iter().any(|c| c.want_mask) {
                    return fail("label-only baseline used masks".into());
                }
            }
            Scenario::B2 => {
                if t.human_masks != labeled {
                    return fail(format!("{} human masks for {labeled} labeled samples", t.human_masks));
                }
            }
            _ => {
                let cap = self.config.human_mask_cap(self.train_size);
                if let Some(c) = self.annotator_calls.iter().find(|c| c.want_mask && c.labeled_before >= cap) {
                    return fail(format!(
                        "human masks requested at iteration {} with {} of {} labeled",
                        c.iteration, c.labeled_before, self.train_size
                    ));
                }
                let granularity = query_size(self.config.query_fraction, self.train_size);
                if t.human_masks > cap + granularity {
                    return fail(format!("{} human masks exceed the cap {cap} plus one query", t.human_masks));
                }
                if self.config.scenario == Scenario::NoAiSaliency && t.ai_masks > 0 {
                    return fail("AI masks generated in the no-AI-saliency ablation".into());
                }
            }
        }
        let mut last = 0.0;
        for p in &self.points {
            if p.budget_fraction < last {
                return fail("budget decreased between iterations".into());
            }
            last = p.budget_fraction;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,budget_fraction,accuracy,mean_dice,human_annotation_fraction\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.iteration, p.budget_fraction, p.accuracy, p.mean_dice, p.human_annotation_fraction
        ));
    }
    out
}
