//! Loading a preprocessed data directory into patients and training samples.

use std::path::Path;

use ctp4d_core::networks::assemble_slice;
use ctp4d_core::pipeline::io::{read_json, read_mask, read_study, DataIndex, IndexEntry, SPLIT_FILE};
use ctp4d_core::{CtpStudy, Group, LabelImage, MaskVolume, Scalar, SliceSample, Split, Tensor, WeightMap};
use rayon::prelude::*;

use crate::failure::Failure;

pub struct Patient {
    pub entry: IndexEntry,
    pub study: CtpStudy,
    /// Labels with 255 outside the brain.
    pub truth: MaskVolume,
}

pub fn load_index(dir: &Path) -> Result<DataIndex, Failure> {
    DataIndex::load(dir).map_err(|e| Failure::usage(format!("cannot read the index of {}: {e}", dir.display())))
}

pub fn load_split(dir: &Path) -> Result<Split, Failure> {
    let path = dir.join(SPLIT_FILE);
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "split manifest {} is missing; run `ctp4d preprocess` to create it",
            path.display()
        )));
    }
    read_json(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn load_patient(dir: &Path, entry: &IndexEntry) -> Result<Patient, Failure> {
    let study =
        read_study(&dir.join(&entry.study), &entry.id, entry.group).map_err(|e| Failure::from(e).context(&entry.id))?;
    let mask_name = entry
        .mask
        .as_ref()
        .ok_or_else(|| Failure::usage(format!("{} has no ground-truth mask", entry.id)))?;
    let (truth, _) = read_mask(&dir.join(mask_name)).map_err(|e| Failure::from(e).context(&entry.id))?;
    let d = study.raw.dims();
    if truth.dims() != [d[0], d[1], d[2]] {
        return Err(Failure::partial(format!(
            "{}: mask extents {:?} do not match study {:?}",
            entry.id,
            truth.dims(),
            d
        )));
    }
    Ok(Patient {
        entry: entry.clone(),
        study,
        truth,
    })
}

/// Loads the patients named in `ids`, in that order.
pub fn load_patients(dir: &Path, index: &DataIndex, ids: &[String]) -> Result<Vec<Patient>, Failure> {
    ids.par_iter()
        .map(|id| {
            let entry = index
                .get(id)
                .ok_or_else(|| Failure::usage(format!("split names {id}, which is not in the index")))?;
            load_patient(dir, entry)
        })
        .collect()
}

pub fn slice_labels(truth: &MaskVolume, z: usize) -> LabelImage {
    let [x, y, _] = truth.dims();
    LabelImage::new(x, y, truth.slice(z)).expect("mask labels are valid")
}

/// One sample per slice. With `class_weights` each pixel is weighted by its
/// class; Non-LVO samples have their loss scaled by `non_lvo_multiplier`.
pub fn samples<T: Scalar>(
    patients: &[Patient],
    class_weights: Option<[f64; 3]>,
    non_lvo_multiplier: f64,
) -> Result<Vec<SliceSample<T>>, Failure> {
    let mut out = Vec::new();
    for p in patients {
        let volume: Tensor<T> = p.study.raw.cast();
        let multiplier = if p.study.group == Group::NonLvo {
            non_lvo_multiplier
        } else {
            1.0
        };
        for z in 0..p.truth.depth() {
            let target = slice_labels(&p.truth, z);
            let weights = class_weights.map(|w| WeightMap::from_class_weights(target.labels.len(), w, 1.0));
            out.push(SliceSample {
                input: assemble_slice(&volume, z)?,
                target,
                weights,
                multiplier,
            });
        }
    }
    Ok(out)
}
