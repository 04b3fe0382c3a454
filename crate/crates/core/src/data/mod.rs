//! Samples, datasets, ingestion and active-learning pool bookkeeping.

mod folder;
mod pool;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folder::load_dataset;
pub use pool::{init_pool, query_size, AnnotationSource, PoolState, QueryEvent};
pub use synthetic::{generate_synthetic, generate_synthetic_with_meta, SyntheticMeta, SyntheticSpec};

/// `H × W × C` image with values in `[0, 1]`.
pub type Image = Array3<f32>;

/// Binary saliency mask, `H × W`.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Where a sample's saliency mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    None,
    Human,
    Ai,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    human_mask: Option<Mask>,
    ai_mask: Option<Mask>,
    provenance: Provenance,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, label: usize) -> Self {
        Sample {
            id: id.into(),
            image,
            label,
            human_mask: None,
            ai_mask: None,
            provenance: Provenance::None,
        }
    }

    pub fn with_human_mask(mut self, mask: Mask) -> Result<Self> {
        self.set_human_mask(mask)?;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn channels(&self) -> usize {
        self.image.dim().2
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        let want = [self.height(), self.width()];
        if mask.shape() != want {
            return Err(Error::shape(&want, mask.shape()));
        }
        Ok(())
    }

    pub fn set_human_mask(&mut self, mask: Mask) -> Result<()> {
        self.check_mask(&mask)?;
        self.human_mask = Some(mask);
        self.provenance = Provenance::Human;
        Ok(())
    }

    /// Attaches a model-generated mask. Human masks are never overwritten.
    pub fn set_ai_mask(&mut self, mask: Mask) -> Result<()> {
        if self.provenance == Provenance::Human {
            return Err(Error::Invariant(format!(
                "sample {} already carries a human mask",
                self.id
            )));
        }
        self.check_mask(&mask)?;
        self.ai_mask = Some(mask);
        self.provenance = Provenance::Ai;
        Ok(())
    }

    pub fn human_mask(&self) -> Option<&Mask> {
        self.human_mask.as_ref()
    }

    pub fn ai_mask(&self) -> Option<&Mask> {
        self.ai_mask.as_ref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// The mask used for saliency supervision, chosen by provenance.
    pub fn training_mask(&self) -> Option<&Mask> {
        match self.provenance {
            Provenance::Human => self.human_mask.as_ref(),
            Provenance::Ai => self.ai_mask.as_ref(),
            Provenance::None => None,
        }
    }

    /// Copy without any mask, for label-only training sets.
    pub fn without_masks(&self) -> Sample {
        Sample::new(self.id.clone(), self.image.clone(), self.label)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        class_names: Vec<String>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let num_classes = class_names.len();
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::Config(format!(
                    "sample {} has label {} but only {num_classes} classes",
                    s.id, s.label
                )));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            split,
            num_classes,
            class_names,
            samples,
            index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// `(height, width, channels)` of the first sample.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.image.dim())
    }

    /// Number of samples carrying a ground-truth mask.
    pub fn masked_count(&self) -> usize {
        self.samples.iter().filter(|s| s.human_mask().is_some()).count()
    }
}

/// Writes a split manifest: a JSON list of sample ids.
pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let text = serde_json::to_string_pretty(ids)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(id: &str, label: usize) -> Sample {
        Sample::new(id, Image::zeros((4, 4, 3)), label)
    }

    #[test]
    fn human_mask_never_downgraded() {
        let mut s = blank("a", 0).with_human_mask(Mask::from_elem((4, 4), true)).unwrap();
        assert!(matches!(s.set_ai_mask(Mask::from_elem((4, 4), false)), Err(Error::Invariant(_))));
        assert_eq!(s.provenance(), Provenance::Human);
    }

    #[test]
    fn mask_shape_must_match_image() {
        let mut s = blank("a", 0);
        assert!(s.set_ai_mask(Mask::from_elem((2, 4), true)).is_err());
        s.set_ai_mask(Mask::from_elem((4, 4), true)).unwrap();
        assert_eq!(s.provenance(), Provenance::Ai);
        assert!(s.training_mask().is_some());
    }

    #[test]
    fn dataset_rejects_duplicates_and_bad_labels() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Dataset::new("d", Split::Train, names.clone(), vec![blank("x", 0), blank("x", 1)]).is_err());
        assert!(Dataset::new("d", Split::Train, names.clone(), vec![blank("x", 2)]).is_err());
        let ds = Dataset::new("d", Split::Train, names, vec![blank("x", 0), blank("y", 1)]).unwrap();
        assert_eq!(ds.get("y").unwrap().label, 1);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ids = vec!["b".to_string(), "a".to_string()];
        write_manifest(&path, &ids).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), ids);
    }
}
