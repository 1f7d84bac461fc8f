use std::path::PathBuf;

use ctp4d_core::pipeline::io::write_model;
use ctp4d_core::train::{history_csv, inverse_frequency_weights, train};
use ctp4d_core::{build_network, Dataset, LossKind, NetworkConfig, Precision, Scalar, TrainConfig};
use serde::Deserialize;
use serde_json::json;

use crate::data::{load_index, load_patients, load_split, samples, slice_labels, Patient};
use crate::failure::{create_dir, require_dir, Failure};
use crate::manifest::ManifestBuilder;
use crate::TrainArgs;

pub const MODEL_FILE: &str = "model.ctp4m";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    network: serde_json::Value,
    train: TrainConfig,
}

/// Parses the config; input extents not given explicitly follow the data.
fn network_config(raw: serde_json::Value, data_extents: [usize; 4]) -> Result<NetworkConfig, Failure> {
    let explicit = raw.get("input_extents").is_some();
    let mut cfg: NetworkConfig = if raw.is_null() {
        NetworkConfig::default()
    } else {
        serde_json::from_value(raw).map_err(|e| Failure::usage(format!("network config: {e}")))?
    };
    if !explicit {
        cfg.input_extents = data_extents;
    } else if cfg.input_extents != data_extents {
        return Err(Failure::usage(format!(
            "network expects inputs {:?} but the data provides {:?}",
            cfg.input_extents, data_extents
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fit<T: Scalar>(
    args: &TrainArgs,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    init_seed: u64,
    train_p: &[Patient],
    val_p: &[Patient],
) -> Result<(String, PathBuf), Failure> {
    let weights = match cfg.loss {
        LossKind::WeightedCce => {
            let labels: Vec<_> = train_p
                .iter()
                .flat_map(|p| (0..p.truth.depth()).map(|z| slice_labels(&p.truth, z)))
                .collect();
            Some(inverse_frequency_weights(&labels))
        }
        _ => None,
    };
    let data = Dataset {
        train: samples::<T>(train_p, weights, cfg.non_lvo_multiplier)?,
        validation: samples::<T>(val_p, weights, cfg.non_lvo_multiplier)?,
    };
    let net = build_network(net_cfg.clone())?;
    let params = net.init_params::<T>(init_seed);
    log::info!(
        "training {} parameters on {} slices ({} validation)",
        params.count(),
        data.train.len(),
        data.validation.len()
    );
    let outcome = train(&net, params, &data, cfg, |r| {
        log::info!(
            "epoch {:>4}  lr {:.3e}  train {:.6}  val {:.6}{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            if r.stopped { "  (early stop)" } else { "" }
        )
    })
    .map_err(|e| Failure::partial(format!("training failed: {e}")))?;
    log::info!("kept epoch {}", outcome.best_epoch);
    let model = args.out.join(MODEL_FILE);
    write_model(&model, net_cfg, &outcome.params)?;
    Ok((history_csv(&outcome.history), model))
}

pub fn run(args: &TrainArgs) -> Result<(), Failure> {
    let mut m = ManifestBuilder::start("train");
    require_dir(&args.data, "data directory")?;
    let split = load_split(&args.data)?;
    let index = load_index(&args.data)?;
    let run_cfg: RunConfig = match &args.config {
        Some(p) => {
            m.config_paths.push(p.clone());
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = run_cfg.train;
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = p.into();
    }
    cfg.validate()?;
    let init_seed = args.init_seed.unwrap_or(cfg.seed);

    let train_p = load_patients(&args.data, &index, &split.train)?;
    let val_p = load_patients(&args.data, &index, &split.validation)?;
    let first = train_p
        .first()
        .ok_or_else(|| Failure::usage("the training split is empty"))?;
    let d = first.study.raw.dims();
    let net_cfg = network_config(run_cfg.network, [d[0], d[1], 3, d[3]])?;
    if let Some(p) = train_p
        .iter()
        .chain(&val_p)
        .find(|p| p.study.raw.dims()[..2] != d[..2] || p.study.raw.dims()[3] != d[3])
    {
        return Err(Failure::usage(format!(
            "{} has extents {:?}, expected {:?}",
            p.entry.id,
            p.study.raw.dims(),
            d
        )));
    }

    create_dir(&args.out)?;
    m.seed = Some(cfg.seed);
    m.settings(json!({ "data": args.data, "network": net_cfg, "train": cfg, "init_seed": init_seed }));
    let (history, model) = match cfg.precision {
        Precision::F32 => fit::<f32>(args, &net_cfg, &cfg, init_seed, &train_p, &val_p)?,
        Precision::F64 => fit::<f64>(args, &net_cfg, &cfg, init_seed, &train_p, &val_p)?,
    };
    let hist_path = args.out.join(HISTORY_FILE);
    std::fs::write(&hist_path, history).map_err(|e| Failure::partial(format!("{}: {e}", hist_path.display())))?;
    m.outputs.push(model);
    m.outputs.push(hist_path);
    m.finish(&args.out.join("manifest.json"))
}
