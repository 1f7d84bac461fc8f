use ctp4d_core::pipeline::io::{read_json, write_mask, write_study, DataIndex, IndexEntry, INDEX_FILE};
use ctp4d_core::{make_phantom, PhantomSpec};
use rayon::prelude::*;
use serde_json::json;

use crate::failure::{create_dir, Failure};
use crate::manifest::ManifestBuilder;
use crate::SynthArgs;

pub fn run(args: &SynthArgs) -> Result<(), Failure> {
    let mut m = ManifestBuilder::start("synth");
    let mut spec = match &args.spec {
        Some(p) => {
            m.config_paths.push(p.clone());
            read_json::<PhantomSpec>(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(g) = args.group {
        spec.group = g;
    }
    spec.validate()?;
    create_dir(&args.out)?;

    let plan: Vec<_> = match &args.mix {
        Some(mix) => mix.0.iter().flat_map(|&(g, n)| std::iter::repeat_n(g, n)).collect(),
        None => vec![spec.group; args.count],
    };
    let specs: Vec<PhantomSpec> = plan
        .iter()
        .enumerate()
        .map(|(i, &group)| PhantomSpec {
            seed: spec.seed + i as u64,
            group,
            ..spec.clone()
        })
        .collect();
    m.seed = Some(spec.seed);
    m.settings(json!({ "spec": spec, "count": specs.len() }));

    let results: Vec<_> = specs
        .par_iter()
        .map(|s| -> Result<IndexEntry, Failure> {
            let (study, truth) = make_phantom(s)?;
            let entry = IndexEntry {
                id: study.patient_id.clone(),
                group: study.group,
                study: format!("{}.ctp4", study.patient_id),
                mask: Some(format!("{}_mask.ctp4", study.patient_id)),
            };
            write_study(&args.out.join(&entry.study), &study)?;
            write_mask(
                &args.out.join(entry.mask.as_ref().expect("set above")),
                &truth,
                &study.meta,
            )?;
            Ok(entry)
        })
        .collect();

    let mut index = if args.out.join(INDEX_FILE).is_file() {
        DataIndex::load(&args.out)?
    } else {
        DataIndex::default()
    };
    for r in results {
        match r {
            Ok(e) => {
                m.outputs.push(args.out.join(&e.study));
                m.outputs.push(args.out.join(e.mask.as_ref().expect("set above")));
                index.upsert(e);
            }
            Err(f) => m.failures.push(f.message),
        }
    }
    if !specs.is_empty() {
        index.save(&args.out)?;
        m.outputs.push(args.out.join(INDEX_FILE));
    }
    log::info!(
        "wrote {} phantom(s) to {}",
        specs.len() - m.failures.len(),
        args.out.display()
    );
    m.finish(&args.out.join("manifest.json"))
}
