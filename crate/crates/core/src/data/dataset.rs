//! On-disk dataset layout:
//!
//! ```text
//! DIR/images/<id>.ppm   colour image
//! DIR/masks/<id>.pgm    255 = lesion, 0 = background (optional per sample)
//! DIR/labels.csv        "id,label" header, one row per labelled sample
//! DIR/meta.json         DatasetMeta
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_pnm, write_pnm, Sample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub seed: u64,
    pub generator_version: u32,
}

pub fn write_dataset(dir: &Path, samples: &[Sample], meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    labels.write_record(["id", "label"]).map_err(csv_err)?;
    for s in samples {
        s.validate(meta.num_classes)?;
        write_pnm(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            write_pnm(&dir.join("masks").join(format!("{}.pgm", s.id)), m)?;
        }
        if let Some(l) = s.label {
            labels.write_record([s.id.as_str(), &l.to_string()]).map_err(csv_err)?;
        }
    }
    labels.flush()?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("labels.csv: {e}"))
}

/// Samples sorted by id.
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<Sample>)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mut reader = csv::Reader::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    if reader.headers().map_err(csv_err)? != vec!["id", "label"] {
        return Err(Error::Format("labels.csv must start with an id,label header".into()));
    }
    let mut labels = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let label = rec[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("labels.csv: bad label {:?}", &rec[1])))?;
        labels.insert(rec[0].to_string(), label);
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = read_pnm(&dir.join("images").join(format!("{id}.ppm")))?;
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        let mask = if mask_path.exists() { Some(read_pnm(&mask_path)?) } else { None };
        let s = Sample {
            label: labels.get(&id).copied(),
            id,
            image,
            mask,
        };
        s.validate(meta.num_classes)?;
        samples.push(s);
    }
    Ok((meta, samples))
}

/// SHA-256 over every sample's id, label, image and mask, in order.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        h.update(s.label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
        for img in std::iter::once(&s.image).chain(s.mask.as_ref()) {
            h.update([img.height() as u32, img.width() as u32, img.channels() as u32].map(u32::to_le_bytes).concat());
            h.update(img.data());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic split by a hash of each id: about `val_fraction` of the
/// samples go to validation. Returns `(train, val)` indices.
pub fn split_by_id(samples: &[Sample], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    split_by_id_salted(samples, val_fraction, 0)
}

/// [`split_by_id`] with the hash salted, so that splits with different
/// salts are independent of each other.
pub fn split_by_id_salted(samples: &[Sample], val_fraction: f64, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let cut = (val_fraction.clamp(0.0, 1.0) * 1000.0).round() as u64;
    (0..samples.len()).partition(|&i| rng::mix64(rng::hash_str(&samples[i].id) ^ salt) % 1000 >= cut)
}
