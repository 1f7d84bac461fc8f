use ctp4d_core::mask::OUTSIDE;
use ctp4d_core::pipeline::io::{
    read_mask, read_study, write_json, write_mask, write_study, DataIndex, IndexEntry, INDEX_FILE, SPLIT_FILE,
};
use ctp4d_core::{preprocess, split_dataset, CtpStudy, MaskVolume, PreprocessConfig, VolumeMeta};
use rayon::prelude::*;
use serde_json::json;

use crate::data::load_index;
use crate::failure::{create_dir, require_dir, Failure};
use crate::manifest::ManifestBuilder;
use crate::PreprocessArgs;

pub fn config_from_flags(args: &PreprocessArgs) -> PreprocessConfig {
    PreprocessConfig {
        equalize: !args.no_he,
        gamma: !args.no_gamma,
        zscore: !args.no_zscore,
        resample: !args.no_resample,
    }
}

/// Ground truth restricted to the extracted brain: 255 outside, labels inside.
fn merge_labels(truth: Option<&MaskVolume>, brain: &[bool], dims: [usize; 3]) -> ctp4d_core::Result<MaskVolume> {
    let labels = brain
        .iter()
        .enumerate()
        .map(|(i, &b)| match (b, truth) {
            (false, _) => OUTSIDE,
            (true, Some(t)) if t.labels()[i] != OUTSIDE => t.labels()[i],
            (true, _) => 0,
        })
        .collect();
    MaskVolume::new(dims, labels)
}

fn process_one(args: &PreprocessArgs, cfg: &PreprocessConfig, entry: &IndexEntry) -> Result<IndexEntry, Failure> {
    let study = read_study(&args.input.join(&entry.study), &entry.id, entry.group)?;
    let truth = match &entry.mask {
        Some(name) => Some(read_mask(&args.input.join(name))?.0),
        None => None,
    };
    let d = study.raw.dims();
    let dims = [d[0], d[1], d[2]];
    if let Some(t) = &truth {
        if t.dims() != dims {
            return Err(Failure::partial(format!(
                "mask extents {:?} do not match study {:?}",
                t.dims(),
                d
            )));
        }
    }
    let out = preprocess(&study.raw, &study.meta, cfg)?;
    let merged = merge_labels(truth.as_ref(), &out.brain, dims)?;
    if out.enhance.constant {
        log::warn!("{}: brain intensities are constant; enhancement skipped", entry.id);
    }
    // Stored values are final intensities, so the rescale is the identity.
    let meta = VolumeMeta {
        rescale_slope: 1.0,
        rescale_intercept: 0.0,
        ..out.meta
    };
    let processed = CtpStudy {
        raw: out.volume,
        meta,
        patient_id: entry.id.clone(),
        group: entry.group,
        storage: args.storage.map_or(study.storage, Into::into),
    };
    let result = IndexEntry {
        id: entry.id.clone(),
        group: entry.group,
        study: format!("{}.ctp4", entry.id),
        mask: Some(format!("{}_mask.ctp4", entry.id)),
    };
    write_study(&args.out.join(&result.study), &processed)?;
    write_mask(
        &args.out.join(result.mask.as_ref().expect("set above")),
        &merged,
        &processed.meta,
    )?;
    Ok(result)
}

pub fn run(args: &PreprocessArgs) -> Result<(), Failure> {
    let mut m = ManifestBuilder::start("preprocess");
    require_dir(&args.input, "input directory")?;
    let index = load_index(&args.input)?;
    if args.input.canonicalize().ok() == args.out.canonicalize().ok() {
        return Err(Failure::usage("output directory must differ from the input"));
    }
    create_dir(&args.out)?;
    let cfg = config_from_flags(args);
    m.seed = Some(args.split_seed);
    m.settings(json!({
        "input": args.input,
        "he": cfg.equalize,
        "gamma": cfg.gamma,
        "zscore": cfg.zscore,
        "resample": cfg.resample,
        "storage": args.storage.map(|s| format!("{s:?}").to_lowercase()),
    }));

    let results: Vec<_> = index
        .patients
        .par_iter()
        .map(|e| process_one(args, &cfg, e).map_err(|f| f.context(&e.id)))
        .collect();
    let mut done = DataIndex::default();
    for r in results {
        match r {
            Ok(e) => {
                m.outputs.push(args.out.join(&e.study));
                m.outputs.push(args.out.join(e.mask.as_ref().expect("set above")));
                done.upsert(e);
            }
            Err(f) => {
                log::error!("{}", f.message);
                m.failures.push(f.message);
            }
        }
    }
    done.save(&args.out)?;
    let patients: Vec<_> = done.patients.iter().map(|p| (p.id.clone(), p.group)).collect();
    let split = split_dataset(&patients, args.split_seed);
    write_json(&args.out.join(SPLIT_FILE), &split)?;
    m.outputs.push(args.out.join(INDEX_FILE));
    m.outputs.push(args.out.join(SPLIT_FILE));
    log::info!(
        "preprocessed {} of {} studies; split {}/{}/{}",
        done.patients.len(),
        index.patients.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    m.finish(&args.out.join("manifest.json"))
}
