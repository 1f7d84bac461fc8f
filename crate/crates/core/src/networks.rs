//! The two segmentation networks and the slice-stacking prediction contract.
//!
//! Both take a centre slice with its two neighbours as an `(X, Y, 3, T)`
//! tensor and produce per-pixel class probabilities `(X, Y, 3)`.
//!
//! * `mjnet_4d`: grouped 4D blocks pool the time axis away, a depth-3 valid
//!   convolution folds the three slices into one, then a 2D U-Net decodes.
//! * `mjnet_3dtime`: one (x, y, t) encoder per slice, concatenated along
//!   channels, then a 2D U-Net whose skip connections pass attention gates.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, Tape, Var};
use crate::conv::{Conv4dMode, GroupSharing, Padding};
use crate::error::{Error, Result};
use crate::losses::{LabelImage, WeightMap};
use crate::mask::{MaskVolume, NUM_CLASSES, OUTSIDE};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{AxisRole, Tensor};

use AxisRole::{Channel, Depth, Filter, Height, Time, Width};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "mjnet_4d")]
    Mjnet4d,
    #[serde(rename = "mjnet_3dtime")]
    Mjnet3dTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    /// (X, Y, Z, T) of one network input; Z is always 3.
    pub input_extents: [usize; 4],
    /// Time pooling after each temporal block; the product must equal T.
    pub time_pool_schedule: Vec<usize>,
    /// Output channels of each temporal block.
    pub temporal_widths: Vec<usize>,
    /// Channels of each 2D U-Net level, shallowest first.
    pub spatial_widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub leaky_alpha: f64,
    pub kernel_size: usize,
    pub group_sharing: GroupSharing,
    pub conv4d_mode: Conv4dMode,
    /// `mjnet_3dtime` only: one encoder shared by the three slices.
    pub tied_encoders: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            architecture: Architecture::Mjnet4d,
            input_extents: [32, 32, 3, 8],
            time_pool_schedule: vec![2, 2, 2],
            temporal_widths: vec![8, 8, 8],
            spatial_widths: vec![16, 32, 64],
            num_classes: NUM_CLASSES,
            dropout_rate: 0.5,
            leaky_alpha: 1.0 / 3.0,
            kernel_size: 3,
            group_sharing: GroupSharing::PerGroup,
            conv4d_mode: Conv4dMode::Decomposed,
            tied_encoders: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let [x, y, z, t] = self.input_extents;
        if z != 3 {
            return Err(Error::config(format!(
                "input depth must be 3 (centre plus neighbours), got {z}"
            )));
        }
        if self.time_pool_schedule.is_empty() || self.time_pool_schedule.contains(&0) {
            return Err(Error::config("time pool schedule needs positive entries"));
        }
        let prod: usize = self.time_pool_schedule.iter().product();
        if prod != t {
            return Err(Error::config(format!(
                "time pool schedule {:?} collapses {prod} frames, input has {t}",
                self.time_pool_schedule
            )));
        }
        if self.temporal_widths.len() != self.time_pool_schedule.len() {
            return Err(Error::config(format!(
                "{} temporal widths for {} temporal blocks",
                self.temporal_widths.len(),
                self.time_pool_schedule.len()
            )));
        }
        if self.spatial_widths.is_empty() {
            return Err(Error::config("at least one spatial level is needed"));
        }
        if self.temporal_widths.contains(&0) || self.spatial_widths.contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        let factor = 1usize << (self.spatial_widths.len() - 1);
        if x % factor != 0 || y % factor != 0 || x == 0 || y == 0 {
            return Err(Error::config(format!(
                "{x}x{y} input cannot be halved {} times",
                self.spatial_widths.len() - 1
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(format!("num_classes must be {NUM_CLASSES}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.leaky_alpha >= 0.0) {
            return Err(Error::config("leaky ReLU slope must be nonnegative"));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }

    /// Parameter shapes in registration order: (name, kind, extents, roles).
    fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.kernel_size;
        let mut specs = Vec::new();
        let temporal = |specs: &mut Vec<ParamSpec>, prefix: &str, grouped: bool| {
            let mut cin = 1;
            for (i, &w) in self.temporal_widths.iter().enumerate() {
                if grouped {
                    for j in 0..3 {
                        specs.push(ParamSpec::kernel(
                            format!("{prefix}enc{i}.k{j}"),
                            vec![k, k, k, cin, w],
                            &[Width, Height, Time],
                            3,
                        ));
                    }
                } else {
                    specs.push(ParamSpec::kernel(
                        format!("{prefix}enc{i}.w"),
                        vec![k, k, k, cin, w],
                        &[Width, Height, Time],
                        1,
                    ));
                }
                specs.push(ParamSpec::bias(format!("{prefix}enc{i}.b"), w));
                cin = w;
            }
        };
        let last_t = *self.temporal_widths.last().expect("validated");
        let unet_in = match self.architecture {
            Architecture::Mjnet4d => {
                temporal(&mut specs, "", true);
                let s0 = self.spatial_widths[0];
                specs.push(ParamSpec::kernel(
                    "depth.w".into(),
                    vec![k, k, 3, last_t, s0],
                    &[Width, Height, Depth],
                    1,
                ));
                specs.push(ParamSpec::bias("depth.b".into(), s0));
                s0
            }
            Architecture::Mjnet3dTime => {
                let paths = if self.tied_encoders { 1 } else { 3 };
                for p in 0..paths {
                    temporal(&mut specs, &format!("path{p}."), false);
                }
                3 * last_t
            }
        };
        let sw = &self.spatial_widths;
        let mut cin = unet_in;
        for (l, &w) in sw.iter().enumerate() {
            specs.push(ParamSpec::kernel(
                format!("down{l}.w"),
                vec![k, k, cin, w],
                &[Width, Height],
                1,
            ));
            specs.push(ParamSpec::bias(format!("down{l}.b"), w));
            cin = w;
        }
        for l in (0..sw.len().saturating_sub(1)).rev() {
            if self.architecture == Architecture::Mjnet3dTime {
                let a = (sw[l] / 2).max(1);
                specs.push(ParamSpec::kernel(
                    format!("att{l}.wg"),
                    vec![k, k, sw[l + 1], a],
                    &[Width, Height],
                    1,
                ));
                specs.push(ParamSpec::kernel(
                    format!("att{l}.wx"),
                    vec![k, k, sw[l], a],
                    &[Width, Height],
                    1,
                ));
                specs.push(ParamSpec::bias(format!("att{l}.b"), a));
                specs.push(ParamSpec::kernel(
                    format!("att{l}.psi"),
                    vec![1, 1, a, 1],
                    &[Width, Height],
                    1,
                ));
                specs.push(ParamSpec::bias(format!("att{l}.psi_b"), 1));
            }
            specs.push(ParamSpec::kernel(
                format!("up{l}.w"),
                vec![k, k, sw[l + 1] + sw[l], sw[l]],
                &[Width, Height],
                1,
            ));
            specs.push(ParamSpec::bias(format!("up{l}.b"), sw[l]));
        }
        specs.push(ParamSpec::kernel(
            "head.w".into(),
            vec![1, 1, sw[0], NUM_CLASSES],
            &[Width, Height],
            1,
        ));
        specs.push(ParamSpec::bias("head.b".into(), NUM_CLASSES));
        specs
    }
}

struct ParamSpec {
    name: String,
    kind: ParamKind,
    dims: Vec<usize>,
    roles: Vec<AxisRole>,
    fan_in: usize,
}

impl ParamSpec {
    /// `dims` ends with (Cin, Cout); `spatial` names the roles of the leading axes.
    fn kernel(name: String, dims: Vec<usize>, spatial: &[AxisRole], fan_mult: usize) -> Self {
        let mut roles = spatial.to_vec();
        roles.extend([Channel, Filter]);
        let fan_in = dims[..dims.len() - 1].iter().product::<usize>() * fan_mult;
        ParamSpec {
            name,
            kind: ParamKind::Kernel,
            dims,
            roles,
            fan_in,
        }
    }

    fn bias(name: String, n: usize) -> Self {
        ParamSpec {
            name,
            kind: ParamKind::Bias,
            dims: vec![n],
            roles: vec![Channel],
            fan_in: 0,
        }
    }
}

/// One training or evaluation example: a centre slice with its neighbours.
#[derive(Clone, Debug)]
pub struct SliceSample<T> {
    /// `(X, Y, 3, T)`.
    pub input: Tensor<T>,
    pub target: LabelImage,
    pub weights: Option<WeightMap>,
    /// Per-sample loss multiplier.
    pub multiplier: f64,
}

/// Extracts slices `z − 1, z, z + 1` of an `(X, Y, Z, T)` volume; a missing
/// neighbour at either end is replaced by the centre slice.
pub fn assemble_slice<T: Scalar>(volume: &Tensor<T>, z: usize) -> Result<Tensor<T>> {
    if volume.rank() != 4 {
        return Err(Error::shape(format!(
            "expected an (X, Y, Z, T) volume, got {:?}",
            volume.dims()
        )));
    }
    let d = volume.dims();
    let (nx, ny, nz, nt) = (d[0], d[1], d[2], d[3]);
    if z >= nz {
        return Err(Error::Bounds {
            axis: 2,
            index: z,
            extent: nz,
        });
    }
    let src = [if z == 0 { z } else { z - 1 }, z, if z + 1 == nz { z } else { z + 1 }];
    let mut data = Vec::with_capacity(nx * ny * 3 * nt);
    let v = volume.data();
    for p in 0..nx * ny {
        for &s in &src {
            let off = (p * nz + s) * nt;
            data.extend_from_slice(&v[off..off + nt]);
        }
    }
    Tensor::new(vec![nx, ny, 3, nt], vec![Width, Height, Depth, Time], data)
}

/// Inverted dropout on a plain tensor. Identity when disabled or at rate 0.
pub fn mc_dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    enabled: bool,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !enabled || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask: Vec<T> = dropout_mask(input.len(), rate, rng);
    let mut out = input.clone();
    for (d, m) in out.data_mut().iter_mut().zip(mask) {
        *d *= m;
    }
    Ok(out)
}

/// Weights of one additive attention gate. `wg` and `wx` are `(k, k, C, A)`
/// kernels, `psi` a `(1, 1, A, 1)` projection.
#[derive(Clone, Debug)]
pub struct GateWeights<T> {
    pub wg: Tensor<T>,
    pub wx: Tensor<T>,
    pub b: Tensor<T>,
    pub psi: Tensor<T>,
    pub psi_b: Tensor<T>,
}

struct GateVars {
    wg: Var,
    wx: Var,
    b: Var,
    psi: Var,
    psi_b: Var,
}

fn gate_on_tape<T: Scalar>(tape: &mut Tape<T>, g: Var, x: Var, w: &GateVars, alpha: f64) -> Result<(Var, Var)> {
    let same = [Padding::Same; 2];
    let gg = tape.conv(g, w.wg, &same)?;
    let xx = tape.conv(x, w.wx, &same)?;
    let s = tape.add(gg, xx)?;
    let s = tape.add_bias(s, w.b)?;
    let s = tape.leaky_relu(s, alpha)?;
    let s = tape.conv(s, w.psi, &same)?;
    let s = tape.add_bias(s, w.psi_b)?;
    let a = tape.sigmoid(s)?;
    Ok((tape.gate(a, x)?, a))
}

/// Additive attention: `a = σ(ψ(lrelu(Wg g + Wx x + b)))`, output `a ⊙ x`.
/// Returns the gated skip features and the coefficients `a`.
pub fn attention_gate<T: Scalar>(
    gating: &Tensor<T>,
    skip: &Tensor<T>,
    weights: &GateWeights<T>,
    alpha: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if gating.rank() != 3 || skip.rank() != 3 || gating.dims()[..2] != skip.dims()[..2] {
        return Err(Error::shape(format!(
            "gating {:?} and skip {:?} must share (X, Y)",
            gating.dims(),
            skip.dims()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(gating.clone());
    let x = tape.leaf(skip.clone());
    let vars = GateVars {
        wg: tape.leaf(weights.wg.clone()),
        wx: tape.leaf(weights.wx.clone()),
        b: tape.leaf(weights.b.clone()),
        psi: tape.leaf(weights.psi.clone()),
        psi_b: tape.leaf(weights.psi_b.clone()),
    };
    let (out, a) = gate_on_tape(&mut tape, g, x, &vars, alpha)?;
    Ok((tape.value(out).clone(), tape.value(a).clone()))
}

/// A recorded forward pass.
pub struct Forward {
    /// `(X, Y, 3)` softmax probabilities.
    pub probs: Var,
    /// One variable per parameter, in store order.
    pub params: Vec<Var>,
    /// Per-slice encoder features (`mjnet_3dtime`) or the folded 4D features (`mjnet_4d`).
    pub encoder_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SlicePrediction<T> {
    pub probs: Tensor<T>,
    /// Argmax class per pixel, lowest class on ties.
    pub classes: Vec<u8>,
    /// Per-pixel, per-class variance over Monte Carlo samples.
    pub variance: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct VolumePrediction<T> {
    pub mask: MaskVolume,
    /// `(X, Y, Z, 3)` Monte Carlo variance when more than one sample was drawn.
    pub variance: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
}

pub fn build_network(cfg: NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    Ok(Network { cfg })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Fresh parameters: He-normal kernels, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.cfg.param_specs() {
            let n: usize = spec.dims.iter().product();
            let data: Vec<T> = match spec.kind {
                ParamKind::Bias => vec![T::zero(); n],
                ParamKind::Kernel => {
                    let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                }
            };
            let t = Tensor::new(spec.dims, spec.roles, data).expect("consistent spec");
            store.insert(spec.name, spec.kind, t).expect("unique names");
        }
        store
    }

    pub fn param_count(&self) -> usize {
        self.cfg
            .param_specs()
            .iter()
            .map(|s| s.dims.iter().product::<usize>())
            .sum()
    }

    /// Checks that `params` has exactly this network's names and extents.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let specs = self.cfg.param_specs();
        if specs.len() != params.len() {
            return Err(Error::config(format!(
                "network needs {} parameters, store has {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(params.params()) {
            if s.name != p.name || s.dims != p.value.dims() || s.roles != p.value.roles() || s.kind != p.kind {
                return Err(Error::config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.dims(),
                    s.name,
                    s.dims
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass. Dropout is active only when `rng` is given.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mut rng: Option<&mut R>,
    ) -> Result<Forward> {
        let [x, y, z, t] = self.cfg.input_extents;
        if input.dims() != [x, y, z, t] {
            return Err(Error::shape(format!(
                "network expects input {:?}, got {:?}",
                self.cfg.input_extents,
                input.dims()
            )));
        }
        self.check_params(params)?;
        let vars: Vec<Var> = params.params().iter().map(|p| tape.leaf(p.value.clone())).collect();
        let by_name: HashMap<&str, Var> = params
            .params()
            .iter()
            .zip(&vars)
            .map(|(p, &v)| (p.name.as_str(), v))
            .collect();
        let p = |name: &str| by_name[name];
        let alpha = self.cfg.leaky_alpha;
        let rate = self.cfg.dropout_rate;
        let same2 = [Padding::Same; 2];

        let mut encoder_outputs = Vec::new();
        let features = match self.cfg.architecture {
            Architecture::Mjnet4d => {
                let mut h = tape.leaf(
                    input
                        .clone()
                        .reshape(vec![x, y, 3, t, 1], vec![Width, Height, Depth, Time, Channel])?,
                );
                for (i, &pool) in self.cfg.time_pool_schedule.iter().enumerate() {
                    let k = [
                        p(&format!("enc{i}.k0")),
                        p(&format!("enc{i}.k1")),
                        p(&format!("enc{i}.k2")),
                    ];
                    h = tape.grouped4d(h, k, self.cfg.group_sharing, self.cfg.conv4d_mode, Padding::Same)?;
                    h = tape.add_bias(h, p(&format!("enc{i}.b")))?;
                    h = tape.leaky_relu(h, alpha)?;
                    h = tape.maxpool(h, &[1, 1, 1, pool, 1])?;
                }
                let c = *tape.value(h).dims().last().expect("rank 5");
                h = tape.reshape(h, vec![x, y, 3, c], vec![Width, Height, Depth, Channel])?;
                encoder_outputs.push(h);
                h = tape.dropout(h, rate, rng.as_deref_mut())?;
                h = tape.conv(h, p("depth.w"), &[Padding::Same, Padding::Same, Padding::Valid])?;
                h = tape.add_bias(h, p("depth.b"))?;
                h = tape.leaky_relu(h, alpha)?;
                let c = *tape.value(h).dims().last().expect("rank 4");
                tape.reshape(h, vec![x, y, c], vec![Width, Height, Channel])?
            }
            Architecture::Mjnet3dTime => {
                let mut paths = Vec::with_capacity(3);
                for s in 0..3 {
                    let prefix = if self.cfg.tied_encoders {
                        "path0.".to_string()
                    } else {
                        format!("path{s}.")
                    };
                    let slice = input
                        .slice_axis(2, s)?
                        .reshape(vec![x, y, t, 1], vec![Width, Height, Time, Channel])?;
                    let mut h = tape.leaf(slice);
                    for (i, &pool) in self.cfg.time_pool_schedule.iter().enumerate() {
                        h = tape.conv(h, p(&format!("{prefix}enc{i}.w")), &[Padding::Same; 3])?;
                        h = tape.add_bias(h, p(&format!("{prefix}enc{i}.b")))?;
                        h = tape.leaky_relu(h, alpha)?;
                        h = tape.maxpool(h, &[1, 1, pool, 1])?;
                    }
                    let c = *tape.value(h).dims().last().expect("rank 4");
                    h = tape.reshape(h, vec![x, y, c], vec![Width, Height, Channel])?;
                    encoder_outputs.push(h);
                    paths.push(h);
                }
                tape.concat(&paths, 2)?
            }
        };

        // 2D U-Net.
        let levels = self.cfg.spatial_widths.len();
        let mut skips = Vec::with_capacity(levels);
        let mut h = features;
        for l in 0..levels {
            if l > 0 {
                h = tape.maxpool(h, &[2, 2, 1])?;
            }
            h = tape.conv(h, p(&format!("down{l}.w")), &same2)?;
            h = tape.add_bias(h, p(&format!("down{l}.b")))?;
            h = tape.leaky_relu(h, alpha)?;
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let up = tape.upsample(h, 2)?;
            let skip = if self.cfg.architecture == Architecture::Mjnet3dTime {
                let gv = GateVars {
                    wg: p(&format!("att{l}.wg")),
                    wx: p(&format!("att{l}.wx")),
                    b: p(&format!("att{l}.b")),
                    psi: p(&format!("att{l}.psi")),
                    psi_b: p(&format!("att{l}.psi_b")),
                };
                gate_on_tape(tape, up, skips[l], &gv, alpha)?.0
            } else {
                skips[l]
            };
            h = tape.concat(&[up, skip], 2)?;
            h = tape.conv(h, p(&format!("up{l}.w")), &same2)?;
            h = tape.add_bias(h, p(&format!("up{l}.b")))?;
            h = tape.leaky_relu(h, alpha)?;
        }
        if self.cfg.architecture == Architecture::Mjnet4d {
            h = tape.dropout(h, rate, rng)?;
        }
        h = tape.conv(h, p("head.w"), &same2)?;
        h = tape.add_bias(h, p("head.b"))?;
        let probs = tape.softmax(h)?;
        Ok(Forward {
            probs,
            params: vars,
            encoder_outputs,
        })
    }

    /// Class probabilities for one `(X, Y, 3, T)` input. With `mc_samples > 1`
    /// dropout stays active and the passes are averaged; each pass draws from
    /// its own stream derived from `(seed, slice, sample)`.
    pub fn predict_slice<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mc_samples: usize,
        seed: u64,
        slice: usize,
    ) -> Result<SlicePrediction<T>> {
        if mc_samples == 0 {
            return Err(Error::config("at least one prediction sample is needed"));
        }
        let mut sum: Option<Vec<f64>> = None;
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut dims = Vec::new();
        let mut roles = Vec::new();
        for sample in 0..mc_samples {
            let mut tape = Tape::new();
            let fwd = if mc_samples > 1 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((slice as u64) << 32) | sample as u64);
                self.forward(&mut tape, params, input, Some(&mut rng))?
            } else {
                self.forward::<T, ChaCha8Rng>(&mut tape, params, input, None)?
            };
            let p = tape.value(fwd.probs);
            if mc_samples == 1 {
                let classes = argmax_classes(p.data());
                return Ok(SlicePrediction {
                    probs: p.clone(),
                    classes,
                    variance: None,
                });
            }
            dims = p.dims().to_vec();
            roles = p.roles().to_vec();
            let vals: Vec<f64> = p.data().iter().map(|&v| Scalar::to_f64(v)).collect();
            match &mut sum {
                None => {
                    sum_sq = vals.iter().map(|v| v * v).collect();
                    sum = Some(vals);
                }
                Some(s) => {
                    for ((a, b), v) in s.iter_mut().zip(sum_sq.iter_mut()).zip(vals) {
                        *a += v;
                        *b += v * v;
                    }
                }
            }
        }
        let n = mc_samples as f64;
        let sum = sum.expect("at least two samples");
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<T> = mean
            .iter()
            .zip(&sum_sq)
            .map(|(m, sq)| T::from_f64((sq / n - m * m).max(0.0)))
            .collect();
        let probs = Tensor::new(
            dims.clone(),
            roles.clone(),
            mean.iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        Ok(SlicePrediction {
            classes: argmax_classes(probs.data()),
            probs,
            variance: Some(Tensor::new(dims, roles, var)?),
        })
    }

    /// Predicts every slice of an `(X, Y, Z, T)` volume and stacks the class maps.
    /// Voxels outside `brain` (an (X, Y, Z) mask) are labelled [`OUTSIDE`].
    pub fn predict_volume<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        volume: &Tensor<T>,
        brain: Option<&[bool]>,
        mc_samples: usize,
        seed: u64,
    ) -> Result<VolumePrediction<T>> {
        if volume.rank() != 4 {
            return Err(Error::shape(format!(
                "expected an (X, Y, Z, T) volume, got {:?}",
                volume.dims()
            )));
        }
        let (nx, ny, nz) = (volume.dims()[0], volume.dims()[1], volume.dims()[2]);
        if let Some(b) = brain {
            if b.len() != nx * ny * nz {
                return Err(Error::shape("brain mask does not match the volume"));
            }
        }
        let mut slices = Vec::with_capacity(nz);
        let mut variance: Option<Vec<T>> = None;
        for zi in 0..nz {
            let input = assemble_slice(volume, zi)?;
            let pred = self.predict_slice(params, &input, mc_samples, seed, zi)?;
            let mut labels = pred.classes;
            if let Some(b) = brain {
                for (i, l) in labels.iter_mut().enumerate() {
                    if !b[i * nz + zi] {
                        *l = OUTSIDE;
                    }
                }
            }
            if let Some(v) = pred.variance {
                let out = variance.get_or_insert_with(|| vec![T::zero(); nx * ny * nz * NUM_CLASSES]);
                for (i, c) in v.data().chunks(NUM_CLASSES).enumerate() {
                    let off = (i * nz + zi) * NUM_CLASSES;
                    out[off..off + NUM_CLASSES].copy_from_slice(c);
                }
            }
            slices.push(labels);
        }
        let variance = variance
            .map(|v| Tensor::new(vec![nx, ny, nz, NUM_CLASSES], vec![Width, Height, Depth, Channel], v))
            .transpose()?;
        Ok(VolumePrediction {
            mask: MaskVolume::from_slices(nx, ny, &slices)?,
            variance,
        })
    }
}

fn argmax_classes<T: Scalar>(probs: &[T]) -> Vec<u8> {
    probs
        .chunks(NUM_CLASSES)
        .map(|p| {
            let mut best = 0;
            for c in 1..p.len() {
                if p[c] > p[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
