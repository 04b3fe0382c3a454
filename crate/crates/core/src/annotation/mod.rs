//! The annotator boundary: wire types, mask payloads, the simulated oracle
//! and a queue that hands batches to remote annotators.

mod queue;
pub mod rle;

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Mask};
use crate::error::{Error, Result};

pub use queue::{AnnotationQueue, Phase, QueueAnnotator, StatusReport, SubmitAck, SubmitError};

/// What the loop asks an annotator for in one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub run_id: String,
    pub iteration: usize,
    pub ids: Vec<String>,
    pub want_mask: bool,
}

/// One sample as presented to a remote annotator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnnotationRequest {
    pub run_id: String,
    pub iteration: usize,
    pub sample_id: String,
    pub width: usize,
    pub height: usize,
    /// Base64-encoded PNG of the image.
    pub image_png: String,
    pub want_mask: bool,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnnotationResponse {
    pub sample_id: String,
    pub label: usize,
    /// Run-length encoded mask, see [`rle`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Base64-encoded PNG mask, accepted instead of `mask`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<String>,
    #[serde(default)]
    pub annotator_id: String,
    #[serde(default)]
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

/// A validated response.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: usize,
    pub mask: Option<Mask>,
}

/// Checks a response against the sample it answers and decodes its mask.
/// A mask sent when none was asked for is dropped.
pub fn validate_response(
    response: &AnnotationResponse,
    (height, width): (usize, usize),
    num_classes: usize,
    want_mask: bool,
) -> Result<Annotation> {
    if response.label >= num_classes {
        return Err(Error::Annotation(format!(
            "label {} for {} is outside 0..{num_classes}",
            response.label, response.sample_id
        )));
    }
    if !want_mask {
        return Ok(Annotation {
            label: response.label,
            mask: None,
        });
    }
    let mask = match (&response.mask, &response.mask_png) {
        (Some(text), _) => rle::decode(text, height, width)?,
        (None, Some(png)) => decode_mask_png(png, height, width)?,
        (None, None) => {
            return Err(Error::Annotation(format!(
                "a mask was requested for {} but none was sent",
                response.sample_id
            )))
        }
    };
    Ok(Annotation {
        label: response.label,
        mask: Some(mask),
    })
}

/// Base64 PNG of an image with values in `[0, 1]`.
pub fn encode_image_png(image: &Image) -> Result<String> {
    let (h, w, c) = image.dim();
    let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([px(image[[y as usize, x as usize, 0]])])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([px(image[[y, x, 0]]), px(image[[y, x, 1]]), px(image[[y, x, 2]])])
        })),
        _ => return Err(Error::Unsupported(format!("cannot encode a {c}-channel image as PNG"))),
    };
    let mut bytes = Vec::new();
    dynamic
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Annotation(format!("PNG encoding failed: {e}")))?;
    Ok(STANDARD.encode(bytes))
}

pub fn encode_mask_png(mask: &Mask) -> Result<String> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Annotation(format!("PNG encoding failed: {e}")))?;
    Ok(STANDARD.encode(bytes))
}

/// Decodes a base64 PNG mask; pixels brighter than mid-grey are foreground.
pub fn decode_mask_png(data: &str, height: usize, width: usize) -> Result<Mask> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| Error::Annotation(format!("mask is not valid base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Annotation(format!("mask is not a PNG: {e}")))?
        .to_luma8();
    if (img.height() as usize, img.width() as usize) != (height, width) {
        return Err(Error::shape(&[height, width], &[img.height() as usize, img.width() as usize]));
    }
    Ok(Mask::from_shape_fn((height, width), |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 127))
}

/// Builds the requests for a batch from the training images.
pub fn build_requests(train: &Dataset, batch: &BatchRequest) -> Result<Vec<AnnotationRequest>> {
    batch
        .ids
        .iter()
        .map(|id| {
            let sample = train
                .get(id)
                .ok_or_else(|| Error::Annotation(format!("unknown sample {id}")))?;
            Ok(AnnotationRequest {
                run_id: batch.run_id.clone(),
                iteration: batch.iteration,
                sample_id: id.clone(),
                width: sample.width(),
                height: sample.height(),
                image_png: encode_image_png(&sample.image)?,
                want_mask: batch.want_mask,
                class_names: train.class_names.clone(),
            })
        })
        .collect()
}

/// Anything that can label a batch: the simulated oracle, or humans behind
/// the annotation service.
pub trait Annotator {
    /// Returns one response per requested id, in any order.
    fn annotate(&mut self, train: &Dataset, batch: &BatchRequest) -> Result<Vec<AnnotationResponse>>;

    /// Progress notification between batches.
    fn progress(&mut self, _run_id: &str, _iteration: usize, _budget_fraction: f64, _finished: bool) {}
}

/// Answers from ground truth: the true label and, on request, the stored
/// mask.
pub fn oracle_annotate(train: &Dataset, ids: &[String], want_mask: bool) -> Result<Vec<AnnotationResponse>> {
    ids.iter()
        .map(|id| {
            let sample = train
                .get(id)
                .ok_or_else(|| Error::Annotation(format!("unknown sample {id}")))?;
            let mask = if want_mask {
                let m = sample.human_mask().ok_or_else(|| {
                    Error::Annotation(format!("oracle has no ground-truth mask for {id}"))
                })?;
                Some(rle::encode(m))
            } else {
                None
            };
            Ok(AnnotationResponse {
                sample_id: id.clone(),
                label: sample.label,
                mask,
                mask_png: None,
                annotator_id: "oracle".into(),
                elapsed_ms: 0,
                run_id: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAnnotator;

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, train: &Dataset, batch: &BatchRequest) -> Result<Vec<AnnotationResponse>> {
        oracle_annotate(train, &batch.ids, batch.want_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Split};

    fn train() -> Dataset {
        let mask = Mask::from_shape_fn((4, 4), |(y, _)| y >= 2);
        let a = Sample::new("a", Image::from_elem((4, 4, 3), 0.5), 1).with_human_mask(mask).unwrap();
        let b = Sample::new("b", Image::zeros((4, 4, 3)), 0);
        Dataset::new("t", Split::Train, vec!["x".into(), "y".into()], vec![a, b]).unwrap()
    }

    #[test]
    fn oracle_returns_truth() {
        let ds = train();
        let r = oracle_annotate(&ds, &["a".into()], true).unwrap();
        assert_eq!(r[0].label, 1);
        assert_eq!(r[0].mask.as_deref(), Some("0:8,1:8"));
        let ann = validate_response(&r[0], (4, 4), 2, true).unwrap();
        assert_eq!(ann.mask.as_ref(), ds.get("a").unwrap().human_mask());
        assert!(oracle_annotate(&ds, &["b".into()], true).is_err());
        assert!(oracle_annotate(&ds, &["b".into()], false).unwrap()[0].mask.is_none());
    }

    #[test]
    fn validation_rejects_bad_answers() {
        let mut r = oracle_annotate(&train(), &["a".into()], true).unwrap().remove(0);
        assert!(validate_response(&r, (4, 4), 1, true).is_err());
        assert!(validate_response(&r, (4, 5), 2, true).is_err());
        assert!(validate_response(&r, (4, 5), 2, false).unwrap().mask.is_none());
        r.mask = None;
        assert!(validate_response(&r, (4, 4), 2, true).is_err());
    }

    #[test]
    fn png_mask_payload() {
        let m = Mask::from_shape_fn((3, 5), |(y, x)| (x + y) % 2 == 0);
        let resp = AnnotationResponse {
            sample_id: "a".into(),
            label: 0,
            mask: None,
            mask_png: Some(encode_mask_png(&m).unwrap()),
            annotator_id: "u".into(),
            elapsed_ms: 5,
            run_id: None,
        };
        assert_eq!(validate_response(&resp, (3, 5), 1, true).unwrap().mask, Some(m));
        assert!(decode_mask_png("not base64!", 3, 5).is_err());
    }

    #[test]
    fn requests_carry_decodable_images() {
        let ds = train();
        let batch = BatchRequest {
            run_id: "r".into(),
            iteration: 2,
            ids: vec!["a".into()],
            want_mask: true,
        };
        let req = build_requests(&ds, &batch).unwrap();
        let bytes = STANDARD.decode(&req[0].image_png).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0)[0], 128);
        assert_eq!((req[0].width, req[0].height), (4, 4));
    }
}
