use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Datasets, ExperimentConfig, Scenario};
use super::record::{curve_csv, AnnotationTallies, AnnotatorCall, QueryRecord, RunRecord, StageTiming};
use crate::annotation::{rle, validate_response, Annotator, BatchRequest};
use crate::data::{init_pool, query_size, AnnotationSource, Dataset, Image, Mask, PoolState, Provenance, Sample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, aulc, interpretability_score, CurveField, CurvePoint};
use crate::nn::{ModelBundle, Network};
use crate::probe::{binarize_threshold, probe, ProbeMethod};
use crate::strategy::{select, SelectionInput};
use crate::trainer::{argmax, predict_and_embed, predict_probs, train_model, EpochLog, TrainConfig};
use crate::Scalar;

/// Mixes a run seed with a purpose tag and an index into an independent
/// stream seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An AI-generated mask and whether it came out empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AiMask {
    pub mask: Mask,
    pub degenerate: bool,
}

/// Saliency of `model` for each `(image, label)` pair, upsampled to image
/// resolution and thresholded (strictly greater than `threshold`).
pub fn generate_ai_saliency<T: Scalar, M: ModelBundle<T> + ?Sized>(
    model: &M,
    samples: &[(&Image, usize)],
    method: ProbeMethod,
    threshold: f64,
) -> Result<Vec<AiMask>> {
    samples
        .iter()
        .map(|&(image, label)| {
            let map = probe(model, image, label, method)?;
            let mask = binarize_threshold(map.upsampled().view(), T::lit(threshold));
            let degenerate = !mask.iter().any(|&b| b);
            Ok(AiMask { mask, degenerate })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Accuracy,
    Interpretability,
    Teacher,
}

impl ModelRole {
    fn as_str(self) -> &'static str {
        match self {
            ModelRole::Accuracy => "acc",
            ModelRole::Interpretability => "interp",
            ModelRole::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredAnnotation {
    label: usize,
    provenance: Provenance,
    /// Run-length encoded mask at image resolution.
    mask: Option<String>,
}

/// Everything needed to continue a run from the start of an iteration.
/// Models are not stored: retraining from the same labeled set and seed
/// reproduces them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub git_revision: Option<String>,
    pool: PoolState,
    initial_annotated: bool,
    annotations: BTreeMap<String, StoredAnnotation>,
    points: Vec<CurvePoint>,
    queries: Vec<QueryRecord>,
    annotator_calls: Vec<AnnotatorCall>,
    tallies: AnnotationTallies,
    timings: Vec<StageTiming>,
    /// Mask model frozen at the change point (teacher scenario only).
    teacher: Option<Network<f32>>,
}

impl RunState {
    pub fn new(config: &ExperimentConfig, seed: u64, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let pool = init_pool(train, config.start_fraction, derive_seed(seed, "pool", 0))?;
        Ok(RunState {
            run_id: format!("{}-{}-s{seed}", config.name, config.scenario),
            seed,
            config: config.clone(),
            git_revision: None,
            pool,
            initial_annotated: false,
            annotations: BTreeMap::new(),
            points: Vec::new(),
            queries: Vec::new(),
            annotator_calls: Vec::new(),
            tallies: AnnotationTallies::default(),
            timings: Vec::new(),
            teacher: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.pool.iteration
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs one seed of an experiment to completion.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed: u64,
    data: &Datasets,
    annotator: &mut dyn Annotator,
) -> Result<RunRecord> {
    let state = RunState::new(config, seed, &data.train)?;
    continue_run(state, data, annotator)
}

/// Continues a run from a state (fresh or loaded from a checkpoint).
/// If the annotator suspends, the state at the start of the interrupted
/// iteration is written to the output directory and
/// [`Error::Suspended`] names the file.
pub fn continue_run(mut state: RunState, data: &Datasets, annotator: &mut dyn Annotator) -> Result<RunRecord> {
    let config = state.config.clone();
    let mut runner = Runner::new(&config, data)?;
    loop {
        let snapshot = state.clone();
        match runner.step(&mut state, annotator) {
            Ok(true) => continue,
            Ok(false) => break,
            Err(Error::Suspended { .. }) => {
                let path = runner.checkpoint_path(&snapshot)?;
                snapshot.save(&path)?;
                log::warn!("{}: annotation timed out, state saved to {}", snapshot.run_id, path.display());
                return Err(Error::Suspended { checkpoint: Some(path) });
            }
            Err(e) => return Err(e),
        }
    }
    annotator.progress(&state.run_id, state.pool.iteration, state.pool.budget_fraction(), true);
    let record = runner.finish(state)?;
    record.check_invariants()?;
    if let Some(dir) = &runner.config.output {
        record.write_json(&dir.join(format!("{}.json", record.run_id)))?;
        let csv = dir.join(format!("{}-curve.csv", record.run_id));
        fs::write(&csv, curve_csv(&record.points)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(record)
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    data: &'a Datasets,
    config_hash: String,
    last_model: Option<Network<f32>>,
}

impl<'a> Runner<'a> {
    fn new(config: &'a ExperimentConfig, data: &'a Datasets) -> Result<Self> {
        if let Some(dir) = &config.output {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Runner {
            config,
            data,
            config_hash: config.hash(),
            last_model: None,
        })
    }

    fn checkpoint_path(&self, state: &RunState) -> Result<PathBuf> {
        let dir = self.config.output.clone().unwrap_or_else(std::env::temp_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir.join(format!("{}-checkpoint.json", state.run_id)))
    }

    fn train_config(&self, state: &RunState, alpha: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            seed: derive_seed(state.seed, "model", 0),
            ..self.config.train.clone()
        }
    }

    fn labeled_samples(&self, state: &RunState) -> Result<Vec<Sample>> {
        state
            .annotations
            .iter()
            .map(|(id, ann)| {
                let source = self
                    .data
                    .train
                    .get(id)
                    .ok_or_else(|| Error::Invariant(format!("labeled id {id} missing from the train set")))?;
                let mut sample = Sample::new(id.clone(), source.image.clone(), ann.label);
                if let Some(text) = &ann.mask {
                    let mask = rle::decode(text, source.height(), source.width())?;
                    match ann.provenance {
                        Provenance::Human => sample.set_human_mask(mask)?,
                        Provenance::Ai => sample.set_ai_mask(mask)?,
                        Provenance::None => {}
                    }
                }
                Ok(sample)
            })
            .collect()
    }

    fn train(
        &self,
        state: &mut RunState,
        samples: &[Sample],
        alpha: f64,
        role: ModelRole,
    ) -> Result<Network<f32>> {
        let started = Instant::now();
        let cfg = self.train_config(state, alpha);
        let outcome = train_model::<f32>(samples, self.data.val.samples(), self.data.train.num_classes, &cfg)
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("{} iteration {} ({}): {msg}", state.run_id, state.pool.iteration, role.as_str())),
                other => other,
            })?;
        self.log_epochs(state, role, &outcome.log)?;
        if self.config.save_checkpoints {
            if let Some(dir) = &self.config.output {
                let path = dir.join(format!(
                    "{}-iter{:02}-{}-{}.json",
                    state.run_id,
                    state.pool.iteration,
                    role.as_str(),
                    &self.config_hash[..12]
                ));
                let text = serde_json::to_string(&outcome.model)?;
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        timing(state, &format!("train_{}", role.as_str()), started);
        Ok(outcome.model)
    }

    fn log_epochs(&self, state: &RunState, role: ModelRole, log: &[EpochLog]) -> Result<()> {
        let Some(dir) = &self.config.output else { return Ok(()) };
        #[derive(Serialize)]
        struct Line<'a> {
            run_id: &'a str,
            iteration: usize,
            role: ModelRole,
            #[serde(flatten)]
            epoch: &'a EpochLog,
        }
        let path = dir.join(format!("{}-train.jsonl", state.run_id));
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for epoch in log {
            let line = serde_json::to_string(&Line {
                run_id: &state.run_id,
                iteration: state.pool.iteration,
                role,
                epoch,
            })?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Asks the annotator for `ids` and stores the validated answers.
    /// Masks are requested only while the labeled set is below the cap.
    fn annotate(
        &self,
        state: &mut RunState,
        annotator: &mut dyn Annotator,
        ids: &[String],
        mask_model: Option<&Network<f32>>,
    ) -> Result<AnnotationSource> {
        let scenario = self.config.scenario;
        let labeled_before = if state.initial_annotated { state.pool.labeled().len() } else { 0 };
        let want_mask = scenario != Scenario::B1
            && labeled_before < self.config.human_mask_cap(self.data.train.len());
        let batch = BatchRequest {
            run_id: state.run_id.clone(),
            iteration: state.pool.iteration,
            ids: ids.to_vec(),
            want_mask,
        };
        let started = Instant::now();
        let responses = if ids.is_empty() {
            Vec::new()
        } else {
            annotator.annotate(&self.data.train, &batch)?
        };
        timing(state, "annotate", started);

        let mut answers = BTreeMap::new();
        for response in responses {
            let sample = self.data.train.get(&response.sample_id).ok_or_else(|| {
                Error::Annotation(format!("response for unknown sample {}", response.sample_id))
            })?;
            if !ids.contains(&response.sample_id) {
                return Err(Error::Annotation(format!("response for unrequested sample {}", response.sample_id)));
            }
            let ann = validate_response(&response, (sample.height(), sample.width()), self.data.train.num_classes, want_mask)?;
            answers.insert(response.sample_id.clone(), ann);
        }
        if let Some(missing) = ids.iter().find(|id| !answers.contains_key(*id)) {
            return Err(Error::Annotation(format!("batch is incomplete: no answer for {missing}")));
        }
        state.annotator_calls.push(AnnotatorCall {
            iteration: state.pool.iteration,
            count: ids.len(),
            want_mask,
            labeled_before,
        });

        let source = if want_mask {
            AnnotationSource::HumanMask
        } else if mask_model.is_some() {
            AnnotationSource::AiMask
        } else {
            AnnotationSource::LabelOnly
        };
        let ai = match (source, mask_model) {
            (AnnotationSource::AiMask, Some(model)) => {
                let inputs: Vec<(&Image, usize)> = ids
                    .iter()
                    .map(|id| (&self.data.train.get(id).expect("validated above").image, answers[id].label))
                    .collect();
                Some(generate_ai_saliency(model, &inputs, self.config.probe_method, self.config.ai_mask_threshold)?)
            }
            _ => None,
        };
        for (i, id) in ids.iter().enumerate() {
            let ann = answers.remove(id).expect("completeness checked");
            let stored = match source {
                AnnotationSource::HumanMask => {
                    state.tallies.human_masks += 1;
                    StoredAnnotation {
                        label: ann.label,
                        provenance: Provenance::Human,
                        mask: ann.mask.as_ref().map(rle::encode),
                    }
                }
                AnnotationSource::AiMask => {
                    let generated = &ai.as_ref().expect("generated above")[i];
                    state.tallies.ai_masks += 1;
                    state.tallies.degenerate_ai_masks += generated.degenerate as usize;
                    StoredAnnotation {
                        label: ann.label,
                        provenance: Provenance::Ai,
                        mask: Some(rle::encode(&generated.mask)),
                    }
                }
                AnnotationSource::LabelOnly => {
                    state.tallies.label_only += 1;
                    StoredAnnotation {
                        label: ann.label,
                        provenance: Provenance::None,
                        mask: None,
                    }
                }
            };
            state.annotations.insert(id.clone(), stored);
        }
        Ok(source)
    }

    fn regenerate_ai_masks(&self, state: &mut RunState, model: &Network<f32>) -> Result<()> {
        let ids: Vec<String> = state
            .annotations
            .iter()
            .filter(|(_, a)| a.provenance == Provenance::Ai)
            .map(|(id, _)| id.clone())
            .collect();
        let inputs: Vec<(&Image, usize)> = ids
            .iter()
            .map(|id| (&self.data.train.get(id).expect("labeled ids exist").image, state.annotations[id].label))
            .collect();
        let masks = generate_ai_saliency(model, &inputs, self.config.probe_method, self.config.ai_mask_threshold)?;
        for (id, m) in ids.iter().zip(masks) {
            state.annotations.get_mut(id).expect("present").mask = Some(rle::encode(&m.mask));
        }
        Ok(())
    }

    fn evaluate(&self, state: &mut RunState, model: &Network<f32>) -> Result<()> {
        let started = Instant::now();
        let test = &self.data.test;
        let refs: Vec<&Sample> = test.samples().iter().collect();
        let probs = predict_probs(model, &refs);
        let predictions: Vec<usize> = probs.rows().into_iter().map(|r| argmax(&r.to_owned())).collect();
        let labels: Vec<usize> = test.samples().iter().map(|s| s.label).collect();
        let acc = accuracy(&predictions, &labels)?;
        let interp = interpretability_score(model, test, self.config.probe_method)?;
        let total = self.data.train.len() as f64;
        state.points.push(CurvePoint {
            iteration: state.pool.iteration,
            budget_fraction: state.pool.budget_fraction(),
            accuracy: acc,
            mean_dice: interp.mean_dice,
            human_annotation_fraction: state.tallies.human_masks as f64 / total,
        });
        timing(state, "evaluate", started);
        Ok(())
    }

    /// One iteration: train, evaluate and, unless the run is over, query.
    /// Returns whether another iteration follows.
    fn step(&mut self, state: &mut RunState, annotator: &mut dyn Annotator) -> Result<bool> {
        let cfg = self.config;
        let total = self.data.train.len();
        if !state.initial_annotated {
            let ids: Vec<String> = state.pool.labeled().iter().cloned().collect();
            let source = self.annotate(state, annotator, &ids, None)?;
            state.pool.record_initial(source);
            state.initial_annotated = true;
        }
        let iteration = state.pool.iteration;
        annotator.progress(&state.run_id, iteration, state.pool.budget_fraction(), false);

        let labeled = self.labeled_samples(state)?;
        let acc_model = match cfg.scenario {
            Scenario::B1 => {
                let plain: Vec<Sample> = labeled.iter().map(Sample::without_masks).collect();
                self.train(state, &plain, 1.0, ModelRole::Accuracy)?
            }
            _ => self.train(state, &labeled, cfg.alpha_acc, ModelRole::Accuracy)?,
        };
        let interp_model = match cfg.scenario {
            Scenario::Sal => Some(self.train(state, &labeled, cfg.alpha_interp, ModelRole::Interpretability)?),
            _ => None,
        };
        self.evaluate(state, &acc_model)?;

        let limit_reached = cfg.num_iterations > 0 && iteration >= cfg.num_iterations;
        if limit_reached || state.pool.unlabeled().is_empty() {
            self.last_model = Some(acc_model);
            return Ok(false);
        }

        // Query with the accuracy model.
        let started = Instant::now();
        let pool_ids: Vec<String> = state.pool.unlabeled().iter().cloned().collect();
        let pool_refs: Vec<&Sample> = pool_ids
            .iter()
            .map(|id| self.data.train.get(id).expect("pool ids exist"))
            .collect();
        let (probs, emb) = predict_and_embed(&acc_model, &pool_refs);
        let labeled_emb = if cfg.strategy == crate::strategy::Strategy::Coreset {
            let refs: Vec<&Sample> = labeled.iter().collect();
            predict_and_embed(&acc_model, &refs).1
        } else {
            ndarray::Array2::zeros((0, emb.ncols()))
        };
        let k = query_size(cfg.query_fraction, total).min(pool_ids.len());
        let query = select(
            cfg.strategy,
            SelectionInput {
                ids: &pool_ids,
                probs: probs.view(),
                embeddings: emb.view(),
                labeled_embeddings: labeled_emb.view(),
                seed: derive_seed(state.seed, "query", iteration as u64),
            },
            k,
        )?;
        timing(state, "select", started);

        // The model that would supply masks if this batch is past the cap.
        let human_phase = state.pool.labeled().len() < cfg.human_mask_cap(total);
        if cfg.scenario == Scenario::Tait && !human_phase && state.teacher.is_none() {
            let teacher = self.train(state, &labeled, cfg.alpha_teacher, ModelRole::Teacher)?;
            state.teacher = Some(teacher);
        }
        let teacher = state.teacher.clone();
        let mask_model = match cfg.scenario {
            Scenario::Sal => interp_model.as_ref(),
            Scenario::SalSingle => Some(&acc_model),
            Scenario::Tait => teacher.as_ref(),
            _ => None,
        };
        if cfg.regenerate_ai_masks {
            if let Some(model) = mask_model {
                self.regenerate_ai_masks(state, model)?;
            }
        }
        let source = self.annotate(state, annotator, &query.ids, mask_model)?;
        state.pool.add_query(&query.ids, source)?;
        state.pool.check_partition()?;
        state.queries.push(QueryRecord {
            iteration,
            ids: query.ids,
            scores: query.scores,
            source,
        });
        Ok(true)
    }

    fn finish(&self, state: RunState) -> Result<RunRecord> {
        if let (Some(dir), Some(model)) = (&self.config.output, &self.last_model) {
            let path = dir.join(format!("{}-model.json", state.run_id));
            fs::write(&path, serde_json::to_string(model)?).map_err(|e| Error::io(&path, e))?;
        }
        let area = |field| {
            if state.points.len() >= 2 {
                aulc(&state.points, field).ok()
            } else {
                None
            }
        };
        let iterations_completed = state.pool.iteration;
        Ok(RunRecord {
            aulc_acc: area(CurveField::Accuracy),
            aulc_interp: area(CurveField::MeanDice),
            run_id: state.run_id,
            seed: state.seed,
            config_hash: self.config_hash.clone(),
            config: state.config,
            git_revision: state.git_revision,
            train_size: self.data.train.len(),
            points: state.points,
            queries: state.queries,
            annotator_calls: state.annotator_calls,
            tallies: state.tallies,
            iterations_completed,
            finished_early: self.config.num_iterations > 0 && iterations_completed < self.config.num_iterations,
            timings: state.timings,
        })
    }
}

fn timing(state: &mut RunState, stage: &str, started: Instant) {
    state.timings.push(StageTiming {
        iteration: state.pool.iteration,
        stage: stage.to_string(),
        seconds: started.elapsed().as_secs_f64(),
    });
}
