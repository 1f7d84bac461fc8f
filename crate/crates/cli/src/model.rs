use std::path::Path;

use ctp4d_core::pipeline::io::{decode_model, model_dtype};
use ctp4d_core::{build_network, DType, MaskVolume, Network, ParamStore, Tensor};

use crate::failure::{require_file, Failure};

/// A checkpoint loaded in the precision it was trained in.
pub enum Model {
    F32(Network, ParamStore<f32>),
    F64(Network, ParamStore<f64>),
}

pub fn load(path: &Path) -> Result<Model, Failure> {
    require_file(path, "model")?;
    let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let ctx = |e: ctp4d_core::Error| Failure::usage(format!("{}: {e}", path.display()));
    Ok(match model_dtype(&bytes).map_err(ctx)? {
        DType::F64 => {
            let (cfg, params) = decode_model::<f64>(&bytes).map_err(ctx)?;
            let net = build_network(cfg)?;
            net.check_params(&params)?;
            Model::F64(net, params)
        }
        _ => {
            let (cfg, params) = decode_model::<f32>(&bytes).map_err(ctx)?;
            let net = build_network(cfg)?;
            net.check_params(&params)?;
            Model::F32(net, params)
        }
    })
}

impl Model {
    pub fn dtype(&self) -> DType {
        match self {
            Model::F32(..) => DType::F32,
            Model::F64(..) => DType::F64,
        }
    }
}

pub struct Prediction {
    pub mask: MaskVolume,
    /// `(X, Y, Z, 3)` Monte Carlo variance.
    pub variance: Option<Tensor<f64>>,
}

impl Model {
    /// Segments an `(X, Y, Z, T)` volume in the model's own precision.
    pub fn predict(
        &self,
        volume: &Tensor<f64>,
        brain: Option<&[bool]>,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Prediction, Failure> {
        let (mask, variance) = match self {
            Model::F32(net, p) => {
                let out = net.predict_volume(p, &volume.cast::<f32>(), brain, mc_samples, seed)?;
                (out.mask, out.variance.map(|v| v.cast()))
            }
            Model::F64(net, p) => {
                let out = net.predict_volume(p, volume, brain, mc_samples, seed)?;
                (out.mask, out.variance)
            }
        };
        Ok(Prediction { mask, variance })
    }
}
