use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_dataset, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::probe::ProbeMethod;
use crate::strategy::Strategy;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Labels only, plain cross-entropy.
    B1,
    /// Human masks for every labeled sample.
    B2,
    /// Human masks until the change point, then masks from the
    /// interpretability model retrained every iteration.
    Sal,
    /// As `Sal`, but the mask model is trained once at the change point and
    /// then frozen.
    Tait,
    /// As `Sal`, but masks come from the accuracy model.
    SalSingle,
    /// Human masks until the change point, no masks afterwards.
    NoAiSaliency,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::B1,
        Scenario::B2,
        Scenario::Sal,
        Scenario::Tait,
        Scenario::SalSingle,
        Scenario::NoAiSaliency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::B1 => "b1",
            Scenario::B2 => "b2",
            Scenario::Sal => "sal",
            Scenario::Tait => "tait",
            Scenario::SalSingle => "sal_single",
            Scenario::NoAiSaliency => "no_ai_saliency",
        }
    }

    /// Whether human masks stop at the change point.
    pub fn has_change_point(self) -> bool {
        !matches!(self, Scenario::B1 | Scenario::B2)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '(', ')', ' '], "_");
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == norm.trim_end_matches('_'))
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorMode {
    #[default]
    Oracle,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_eval_per_class")]
        val_per_class: usize,
        #[serde(default = "default_eval_per_class")]
        test_per_class: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_correlation")]
        spurious_correlation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `root/{train,val,test}` each in the folder layout read by
    /// [`load_dataset`].
    Folder { root: PathBuf },
}

fn default_classes() -> usize {
    4
}
fn default_train_per_class() -> usize {
    75
}
fn default_eval_per_class() -> usize {
    25
}
fn default_image_size() -> usize {
    32
}
fn default_correlation() -> f64 {
    0.95
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: default_classes(),
            train_per_class: default_train_per_class(),
            val_per_class: default_eval_per_class(),
            test_per_class: default_eval_per_class(),
            image_size: default_image_size(),
            spurious_correlation: default_correlation(),
            seed: 0,
        }
    }
}

/// Train, validation and test splits of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Datasets> {
        let sets = match self {
            DatasetConfig::Synthetic {
                num_classes,
                train_per_class,
                val_per_class,
                test_per_class,
                image_size,
                spurious_correlation,
                seed,
            } => {
                let spec = |per_class| SyntheticSpec {
                    num_classes: *num_classes,
                    samples_per_class: per_class,
                    image_size: *image_size,
                    spurious_correlation: *spurious_correlation,
                };
                Datasets {
                    train: generate_synthetic(&spec(*train_per_class), Split::Train, *seed)?,
                    val: generate_synthetic(&spec(*val_per_class), Split::Val, *seed)?,
                    test: generate_synthetic(&spec(*test_per_class), Split::Test, *seed)?,
                }
            }
            DatasetConfig::Folder { root } => Datasets {
                train: load_dataset(&root.join("train"), Split::Train)?,
                val: load_dataset(&root.join("val"), Split::Val)?,
                test: load_dataset(&root.join("test"), Split::Test)?,
            },
        };
        if sets.train.class_names != sets.test.class_names || sets.train.class_names != sets.val.class_names {
            return Err(Error::Config("train, val and test splits disagree on class names".into()));
        }
        Ok(sets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub probe_method: ProbeMethod,
    pub start_fraction: f64,
    pub query_fraction: f64,
    /// Budget fraction at which human masks stop.
    pub change_fraction: f64,
    /// Query iterations after the initial round; 0 runs until the pool is
    /// exhausted.
    pub num_iterations: usize,
    pub alpha_acc: f64,
    pub alpha_interp: f64,
    pub alpha_teacher: f64,
    /// Saliency values strictly above this become AI mask foreground.
    pub ai_mask_threshold: f64,
    /// Regenerate stored AI masks with each new mask model.
    pub regenerate_ai_masks: bool,
    pub seeds: Vec<u64>,
    pub annotator: AnnotatorMode,
    pub annotation_timeout_secs: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Directory for records, logs and checkpoints.
    pub output: Option<PathBuf>,
    /// Also write every trained model, not just the final one.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            scenario: Scenario::Sal,
            strategy: Strategy::Margin,
            probe_method: ProbeMethod::Cam,
            start_fraction: 0.05,
            query_fraction: 0.05,
            change_fraction: 0.20,
            num_iterations: 20,
            alpha_acc: 0.9,
            alpha_interp: 0.1,
            alpha_teacher: 0.5,
            ai_mask_threshold: 0.5,
            regenerate_ai_masks: false,
            seeds: vec![0],
            annotator: AnnotatorMode::Oracle,
            annotation_timeout_secs: 3600,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            output: None,
            save_checkpoints: false,
        }
    }
}

fn check_fraction(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { (0.0..=1.0).contains(&v) } else { v > 0.0 && v <= 1.0 };
    if !ok {
        return Err(Error::Config(format!("{name} must lie in {}, 1], got {v}", if allow_zero { "[0" } else { "(0" })));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        // Relative dataset and output paths are taken from the config's
        // directory.
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetConfig::Folder { root } = &mut config.dataset {
            if root.is_relative() {
                *root = base.join(&*root);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("start_fraction", self.start_fraction, false)?;
        check_fraction("query_fraction", self.query_fraction, false)?;
        check_fraction("change_fraction", self.change_fraction, true)?;
        for (name, a) in [
            ("alpha_acc", self.alpha_acc),
            ("alpha_interp", self.alpha_interp),
            ("alpha_teacher", self.alpha_teacher),
        ] {
            check_fraction(name, a, true)?;
        }
        if self.scenario.has_change_point() && self.change_fraction < self.start_fraction {
            return Err(Error::Config(format!(
                "change_fraction {} is below start_fraction {}: the initial set is always human-annotated",
                self.change_fraction, self.start_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.ai_mask_threshold) {
            return Err(Error::Config("ai_mask_threshold must lie in [0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.annotator == AnnotatorMode::Service && self.annotation_timeout_secs == 0 {
            return Err(Error::Config("annotation_timeout_secs must be positive in service mode".into()));
        }
        self.train.validate()
    }

    /// Hex SHA-256 of everything that affects results: seeds, output
    /// location and annotator transport are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.output = None;
        canonical.save_checkpoints = false;
        canonical.annotator = AnnotatorMode::Oracle;
        canonical.annotation_timeout_secs = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Human masks are requested for a batch while fewer samples than this
    /// are labeled.
    pub fn human_mask_cap(&self, total: usize) -> usize {
        match self.scenario {
            Scenario::B1 => 0,
            Scenario::B2 => total,
            _ => (self.change_fraction * total as f64 - 1e-9).ceil().max(0.0) as usize,
        }
    }
}
