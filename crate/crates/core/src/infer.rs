//! Single-image inference: mask, box and class probabilities in the
//! image's own coordinates.

use serde::{Deserialize, Serialize};

use crate::annotate::rle_encode;
use crate::autograd::Tape;
use crate::cascade::predict_masks;
use crate::data::{extract_roi, image_batch, resize_nn, BBox, Image, ROI_MARGIN};
use crate::error::{Error, Result};
use crate::metrics::{class_names, MASK_THRESHOLD};
use crate::net::DermoNet;
use crate::nn::Ctx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub classes: Vec<ClassProb>,
    pub bbox: BBox,
    /// Binary mask at the input's resolution.
    pub mask: Image,
    pub degenerate_mask: bool,
}

/// Wire form of a [`Prediction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub classes: Vec<ClassProb>,
    pub bbox: BBox,
    pub mask: RleMask,
    pub degenerate_mask: bool,
    pub model_version: String,
}

impl Prediction {
    pub fn response(&self, model_version: &str) -> PredictResponse {
        PredictResponse {
            classes: self.classes.clone(),
            bbox: self.bbox,
            mask: RleMask {
                height: self.mask.height(),
                width: self.mask.width(),
                runs: rle_encode(&self.mask),
            },
            degenerate_mask: self.degenerate_mask,
            model_version: model_version.to_string(),
        }
    }

    /// Most probable class; ties go to the earlier class.
    pub fn top(&self) -> &ClassProb {
        self.classes
            .iter()
            .fold(&self.classes[0], |best, c| if c.probability > best.probability { c } else { best })
    }

    /// Text drawn on annotated images, e.g. `MEL 94.7%`.
    pub fn label_text(&self) -> String {
        let top = self.top();
        format!("{} {:.1}%", top.label.to_uppercase(), 100.0 * top.probability)
    }
}

/// Class probabilities for lesion crops already at recognition resolution.
pub fn classify(cls: &DermoNet, crops: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let x = tape.constant(image_batch(crops)?);
    let probs = cls.forward_recognition(&ctx, x)?.probs.value();
    Ok(probs.data().chunks(cls.config.num_classes).map(<[f64]>::to_vec).collect())
}

/// Runs detection then recognition on one image of any size.
pub fn predict(seg: &DermoNet, cls: &DermoNet, img: &Image) -> Result<Prediction> {
    let img = img.to_rgb();
    let probs = predict_masks(seg, &[&img])?.remove(0);
    let roi = extract_roi(&probs, &img, MASK_THRESHOLD, ROI_MARGIN)?;
    let (rh, rw) = cls.config.input_hw_recognition;
    let crop = resize_nn(&roi.crop, rh, rw)?;
    let p = classify(cls, &[&crop])?.remove(0);
    if p.iter().chain(&probs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction"));
    }
    let names = class_names(p.len())?;
    Ok(Prediction {
        classes: names
            .iter()
            .zip(&p)
            .map(|(n, &probability)| ClassProb {
                label: n.to_string(),
                probability,
            })
            .collect(),
        bbox: roi.bbox,
        mask: Image::mask_from_probs(img.height(), img.width(), &probs, MASK_THRESHOLD)?,
        degenerate_mask: roi.degenerate,
    })
}
