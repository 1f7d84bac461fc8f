use std::path::Path;

use ctp4d_core::metrics::{delta_v_ml, dice_coeff, hausdorff_mm, HausdorffMode};
use ctp4d_core::{Class, Group};
use rayon::prelude::*;
use serde_json::json;

use crate::data::{load_index, load_patient, load_split, Patient};
use crate::failure::{require_dir, Failure};
use crate::manifest::{beside, ManifestBuilder};
use crate::model::{self, Model};
use crate::{EvalArgs, SubsetArg};

/// Classes scored in the report; healthy tissue is the background.
pub const SCORED: [Class; 2] = [Class::Penumbra, Class::Core];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub patient_id: String,
    pub group: Group,
    pub class: Class,
    pub dc: f64,
    pub hd_mm: f64,
    pub delta_v_ml: f64,
    pub note: String,
}

/// Per-class scores of one predicted label volume against the truth.
pub fn score(patient: &Patient, pred: &ctp4d_core::MaskVolume, mode: HausdorffMode) -> Result<Vec<Row>, Failure> {
    let meta = &patient.study.meta;
    SCORED
        .iter()
        .map(|&class| {
            let (p, g) = (pred.class_mask(class), patient.truth.class_mask(class));
            let hd = hausdorff_mm(&p, &g, patient.truth.dims(), meta, mode)?;
            let note = if hd.empty {
                "hd_empty".to_string()
            } else if hd.skipped > 0 {
                format!("hd_skipped={}", hd.skipped)
            } else {
                String::new()
            };
            Ok(Row {
                patient_id: patient.entry.id.clone(),
                group: patient.entry.group,
                class,
                dc: dice_coeff(&p, &g)?,
                hd_mm: hd.mm,
                delta_v_ml: delta_v_ml(&p, &g, meta)?,
                note,
            })
        })
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// `mean` and `sd` rows (sample standard deviation) per (group, class).
pub fn aggregates(rows: &[Row]) -> Vec<Row> {
    let mut out = Vec::new();
    for group in Group::ALL {
        for class in SCORED {
            let sel: Vec<&Row> = rows.iter().filter(|r| r.group == group && r.class == class).collect();
            if sel.is_empty() {
                continue;
            }
            let stat = |f: fn(&Row) -> f64| mean_sd(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (dc, hd, dv) = (stat(|r| r.dc), stat(|r| r.hd_mm), stat(|r| r.delta_v_ml));
            let row = |label: &str, pick: fn((f64, f64)) -> f64| Row {
                patient_id: label.to_string(),
                group,
                class,
                dc: pick(dc),
                hd_mm: pick(hd),
                delta_v_ml: pick(dv),
                note: format!("n={}", sel.len()),
            };
            out.push(row("mean", |s| s.0));
            out.push(row("sd", |s| s.1));
        }
    }
    out
}

fn write_report(path: &Path, rows: &[Row], errors: &[(String, Group, String)]) -> Result<(), Failure> {
    let io = |e: csv::Error| Failure::partial(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["patient_id", "group", "class", "DC", "HD_mm", "DeltaV_ml", "note"])
        .map_err(io)?;
    let f = |v: f64| format!("{v:.6}");
    for r in rows {
        w.write_record([
            r.patient_id.as_str(),
            r.group.as_str(),
            r.class.name(),
            &f(r.dc),
            &f(r.hd_mm),
            &f(r.delta_v_ml),
            &r.note,
        ])
        .map_err(io)?;
    }
    for (id, group, msg) in errors {
        w.write_record([id.as_str(), group.as_str(), "error", "", "", "", msg])
            .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Failure::partial(format!("{}: {e}", path.display())))
}

fn evaluate(
    args: &EvalArgs,
    model: Option<&Model>,
    dir: &Path,
    entry: &ctp4d_core::pipeline::io::IndexEntry,
) -> Result<Vec<Row>, Failure> {
    let patient = load_patient(dir, entry)?;
    let pred = match model {
        None => patient.truth.clone(),
        Some(m) => {
            let brain = patient.truth.brain_mask();
            m.predict(&patient.study.raw, Some(&brain), args.mc_samples, args.seed)?
                .mask
        }
    };
    score(&patient, &pred, args.hd.into())
}

pub fn run(args: &EvalArgs) -> Result<(), Failure> {
    let mut m = ManifestBuilder::start("eval");
    require_dir(&args.data, "data directory")?;
    let index = load_index(&args.data)?;
    let model = if args.use_ground_truth {
        None
    } else {
        Some(model::load(&args.model)?)
    };
    let ids: Vec<String> = match args.subset {
        SubsetArg::All => index.patients.iter().map(|p| p.id.clone()).collect(),
        s => {
            let split = load_split(&args.data)?;
            match s {
                SubsetArg::Train => split.train,
                SubsetArg::Validation => split.validation,
                _ => split.test,
            }
        }
    };
    m.seed = Some(args.seed);
    m.settings(json!({
        "model": args.model,
        "data": args.data,
        "subset": args.subset,
        "hd": format!("{:?}", HausdorffMode::from(args.hd)),
        "mc_samples": args.mc_samples,
        "use_ground_truth": args.use_ground_truth,
    }));

    let entries = ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .ok_or_else(|| Failure::usage(format!("split names {id}, which is not in the index")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<_> = entries
        .par_iter()
        .map(|e| evaluate(args, model.as_ref(), &args.data, e))
        .collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(f) => {
                log::error!("{}: {}", e.id, f.message);
                m.failures.push(format!("{}: {}", e.id, f.message));
                errors.push((e.id.clone(), e.group, f.message));
            }
        }
    }
    let mut all = rows.clone();
    all.extend(aggregates(&rows));
    write_report(&args.report, &all, &errors)?;
    m.outputs.push(args.report.clone());
    for r in aggregates(&rows).iter().filter(|r| r.patient_id == "mean") {
        log::info!(
            "{:<8} {:<9} DC {:.3}  HD {:.3} mm  dV {:.4} ml  ({})",
            r.group.as_str(),
            r.class.name(),
            r.dc,
            r.hd_mm,
            r.delta_v_ml,
            r.note
        );
    }
    m.finish(&beside(&args.report))
}
