use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{Dataset, Image, Mask, Sample, Split};
use crate::error::{Error, Result};

/// Grayscale mask pixels above this value are foreground.
const MASK_THRESHOLD: u8 = 127;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD
    }))
}

/// Loads `root/images/<class>/<id>.png` with optional
/// `root/masks/<class>/<id>.png`.
///
/// Classes are the sorted image subdirectory names. Samples whose mask or
/// image size disagrees with the rest are skipped with a warning.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory {} has no images/ subdirectory",
            root.display()
        )));
    }
    let masks_dir = root.join("masks");
    let class_dirs: Vec<PathBuf> = sorted_entries(&images_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!("no class directories under {}", images_dir.display())));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();

    let mut samples = Vec::new();
    let mut expected_dims: Option<(usize, usize)> = None;
    for (label, (class_dir, class_name)) in class_dirs.iter().zip(&class_names).enumerate() {
        for path in sorted_entries(class_dir)? {
            let is_png = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let image = read_image(&path)?;
            let dims = (image.dim().0, image.dim().1);
            match expected_dims {
                None => expected_dims = Some(dims),
                Some(d) if d != dims => {
                    warn!("rejecting {id}: image is {dims:?}, dataset uses {d:?}");
                    continue;
                }
                Some(_) => {}
            }
            let mut sample = Sample::new(id.clone(), image, label);
            let mask_path = masks_dir.join(class_name).join(format!("{id}.png"));
            if mask_path.is_file() {
                let mask = read_mask(&mask_path)?;
                if let Err(e) = sample.set_human_mask(mask) {
                    warn!("rejecting {id}: {e}");
                    continue;
                }
            }
            samples.push(sample);
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, split, class_names, samples)
}
