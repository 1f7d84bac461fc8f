use std::path::PathBuf;

use ctp4d_core::pipeline::io::{read_mask, read_volume, write_mask, write_volume, RawVolume};
use ctp4d_core::{AxisRole, Tensor};
use serde_json::json;

use crate::failure::{create_dir, require_file, Failure};
use crate::manifest::{beside, ManifestBuilder};
use crate::{model, overlay, PredictArgs};

fn variance_path(out: &std::path::Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_variance.ctp4"))
}

pub fn run(args: &PredictArgs) -> Result<(), Failure> {
    let mut m = ManifestBuilder::start("predict");
    if args.mc_samples == 0 {
        return Err(Failure::usage("--mc-samples must be at least 1"));
    }
    let model = model::load(&args.model)?;
    require_file(&args.study, "study")?;
    let raw = read_volume(&args.study).map_err(|e| Failure::usage(format!("{}: {e}", args.study.display())))?;
    let [x, y, z, t, c] = raw.dims;
    if c != 1 {
        return Err(Failure::usage(format!(
            "{}: expected one channel, found {c}",
            args.study.display()
        )));
    }
    let volume = Tensor::new(
        vec![x, y, z, t],
        vec![AxisRole::Width, AxisRole::Height, AxisRole::Depth, AxisRole::Time],
        raw.data,
    )?;
    let brain: Vec<bool> = match &args.brain_mask {
        Some(p) => {
            let (mask, _) = read_mask(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            if mask.dims() != [x, y, z] {
                return Err(Failure::usage(format!(
                    "brain mask extents {:?} differ from the study's",
                    mask.dims()
                )));
            }
            mask.brain_mask()
        }
        // Preprocessed studies are exactly zero outside the brain.
        None => volume
            .data()
            .chunks(t)
            .map(|curve| curve.iter().any(|&v| v != 0.0))
            .collect(),
    };
    m.seed = Some(args.seed);
    m.settings(json!({
        "model": args.model,
        "study": args.study,
        "mc_samples": args.mc_samples,
        "brain_mask": args.brain_mask,
        "overlay": args.overlay,
    }));

    let pred = model.predict(&volume, Some(&brain), args.mc_samples, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_mask(&args.out, &pred.mask, &raw.meta)?;
    m.outputs.push(args.out.clone());
    if let Some(var) = &pred.variance {
        let path = variance_path(&args.out);
        write_volume(
            &path,
            &RawVolume {
                dims: [x, y, z, 1, var.dims()[3]],
                dtype: model.dtype(),
                meta: ctp4d_core::VolumeMeta {
                    time_schedule: Vec::new(),
                    ..raw.meta.clone()
                },
                data: var.data().to_vec(),
            },
        )?;
        m.outputs.push(path);
    }
    if let Some(dir) = &args.overlay {
        create_dir(dir)?;
        for (zi, png) in overlay::render(&volume, &brain, &pred.mask)?.into_iter().enumerate() {
            let path = dir.join(format!("slice_{zi:03}.png"));
            png.save(&path)
                .map_err(|e| Failure::partial(format!("{}: {e}", path.display())))?;
            m.outputs.push(path);
        }
    }
    log::info!(
        "{}: penumbra {} voxels, core {} voxels",
        args.study.display(),
        pred.mask.count(ctp4d_core::Class::Penumbra),
        pred.mask.count(ctp4d_core::Class::Core)
    );
    m.finish(&beside(&args.out))
}
