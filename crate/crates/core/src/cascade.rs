//! Detection-to-recognition cascade: predicted (or ground-truth) masks are
//! turned into lesion crops that the recognition network classifies.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{extract_roi, image_batch, rebalance, resize_nn, AugmentationSpec, Image, Sample, ROI_MARGIN};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MASK_THRESHOLD};
use crate::net::{DermoNet, Outputs};
use crate::nn::Ctx;
use crate::trainer::{evaluate, train, TrainConfig, TrainData, TrainMode, TrainState};

/// Where lesion masks come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    Network(&'a DermoNet),
    /// Each sample's own ground-truth mask.
    Oracle,
}

/// Preprocessing protocol for recognition training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    /// Crops as they are.
    P1,
    /// Crops rebalanced to the largest class with augmented copies.
    P2(AugmentationSpec),
}

/// Lesion crops at recognition resolution, plus the ids whose mask was
/// empty and fell back to the whole image.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub samples: Vec<Sample>,
    pub degenerate: Vec<String>,
}

/// Values of a `src_h x src_w` map sampled at `out_h x out_w` by nearest
/// neighbour, with the same index rule as image resizing.
pub fn resize_map(values: &[f64], src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let sy = i * src_h / out_h;
        for j in 0..out_w {
            out.push(values[sy * src_w + j * src_w / out_w]);
        }
    }
    out
}

/// Lesion probability of every pixel of each image, at the image's own
/// resolution.
pub fn predict_masks(seg: &DermoNet, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let (dh, dw) = seg.config.input_hw_detection;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(4) {
        let resized = chunk
            .iter()
            .map(|img| {
                let img = img.to_rgb();
                if (img.height(), img.width()) == (dh, dw) {
                    Ok(img)
                } else {
                    resize_nn(&img, dh, dw)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = resized.iter().collect();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let x = tape.constant(image_batch(&refs)?);
        let probs = seg.forward(&ctx, x, Outputs::Mask)?.mask_probs.expect("mask requested").value();
        for (img, p) in chunk.iter().zip(probs.data().chunks(dh * dw)) {
            out.push(resize_map(p, dh, dw, img.height(), img.width()));
        }
    }
    Ok(out)
}

pub fn roi_samples(samples: &[Sample], source: MaskSource<'_>, recognition_hw: (usize, usize)) -> Result<RoiSet> {
    let probs: Vec<Vec<f64>> = match source {
        MaskSource::Oracle => samples
            .iter()
            .map(|s| {
                s.mask
                    .as_ref()
                    .map(Image::mask_values)
                    .ok_or_else(|| Error::Invalid(format!("{}: oracle masks need a mask", s.id)))
            })
            .collect::<Result<_>>()?,
        MaskSource::Network(seg) => predict_masks(seg, &samples.iter().map(|s| &s.image).collect::<Vec<_>>())?,
    };
    let mut out = RoiSet {
        samples: Vec::with_capacity(samples.len()),
        degenerate: Vec::new(),
    };
    for (s, p) in samples.iter().zip(&probs) {
        let roi = extract_roi(p, &s.image, MASK_THRESHOLD, ROI_MARGIN)?;
        if roi.degenerate {
            out.degenerate.push(s.id.clone());
        }
        out.samples.push(Sample {
            id: s.id.clone(),
            image: resize_nn(&roi.crop, recognition_hw.0, recognition_hw.1)?,
            mask: None,
            label: s.label,
        });
    }
    Ok(out)
}

/// Applies a protocol to recognition training crops.
pub fn apply_protocol(rois: &[Sample], protocol: &Protocol, classes: usize) -> Result<Vec<Sample>> {
    match protocol {
        Protocol::P1 => Ok(rois.to_vec()),
        Protocol::P2(spec) => {
            let mut counts = vec![0; classes];
            for s in rois {
                counts[s.label.ok_or_else(|| Error::Invalid(format!("{} has no label", s.id)))?] += 1;
            }
            let target = counts.iter().copied().max().unwrap_or(0);
            rebalance(rois, &vec![target; classes], spec)
        }
    }
}

/// Trains the recognition network on lesion crops. The protocol applies to
/// the training split only.
pub fn train_recognition(
    cls: &mut DermoNet,
    source: MaskSource<'_>,
    data: &TrainData,
    protocol: &Protocol,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let hw = cls.config.input_hw_recognition;
    let train_rois = roi_samples(&data.train, source, hw)?;
    let val_rois = roi_samples(&data.val, source, hw)?;
    let crops = TrainData {
        train: apply_protocol(&train_rois.samples, protocol, cls.config.num_classes)?,
        val: val_rois.samples,
    };
    let cfg = TrainConfig {
        mode: TrainMode::Recognition,
        ..cfg.clone()
    };
    train(cls, &crops, &cfg)
}

/// Mask, crop and classify every sample; degenerate crops are listed in
/// the report.
pub fn cascade_pipeline(source: MaskSource<'_>, cls: &DermoNet, samples: &[Sample]) -> Result<EvalReport> {
    let rois = roi_samples(samples, source, cls.config.input_hw_recognition)?;
    let mut report = evaluate(cls, &rois.samples, TrainMode::Recognition)?;
    report.degenerate_masks = rois.degenerate;
    Ok(report)
}
