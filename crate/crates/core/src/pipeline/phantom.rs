//! Synthetic CTP studies with known lesion geometry.
//!
//! Every brain voxel follows `baseline + amplitude · g(t − onset)` with the
//! gamma-variate `g(τ) = (τ / αβ)^α · exp(α − τ / β)`, which peaks at 1 when
//! `τ = αβ`. Penumbra arrives late and low, core arrives late and barely rises.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CtpStudy, Group};
use crate::error::{Error, Result};
use crate::mask::{Class, MaskVolume, OUTSIDE};
use crate::scalar::DType;
use crate::tensor::{AxisRole, Tensor, VolumeMeta};

pub const AIR_HU: f64 = -1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveParams {
    /// Pre-contrast density in HU.
    pub baseline: f64,
    /// Peak enhancement above baseline in HU.
    pub amplitude: f64,
    /// Contrast arrival in seconds.
    pub onset: f64,
    pub alpha: f64,
    /// Width parameter in seconds.
    pub beta: f64,
}

impl CurveParams {
    pub fn peak_time(&self) -> f64 {
        self.onset + self.alpha * self.beta
    }

    pub fn eval(&self, t: f64) -> f64 {
        let tau = t - self.onset;
        if tau <= 0.0 {
            return self.baseline;
        }
        let g = (tau / (self.alpha * self.beta)).powf(self.alpha) * (self.alpha - tau / self.beta).exp();
        self.baseline + self.amplitude * g
    }

    fn validate(&self, name: &str) -> Result<()> {
        let finite = [self.baseline, self.amplitude, self.onset, self.alpha, self.beta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.alpha <= 0.0 || self.beta <= 0.0 || self.amplitude < 0.0 {
            return Err(Error::config(format!(
                "{name} curve needs finite values, α, β > 0 and amplitude ≥ 0"
            )));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn shifted(&self, dx: f64, dy: f64) -> Ellipsoid {
        Ellipsoid {
            center: [self.center[0] + dx, self.center[1] + dy, self.center[2]],
            radii: self.radii,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub penumbra: Ellipsoid,
    pub core: Option<Ellipsoid>,
    /// Maximum in-plane displacement of the whole lesion, drawn per seed, in voxels.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// (X, Y, Z).
    pub extents: [usize; 3],
    pub time_schedule: Vec<f64>,
    pub pixel_spacing_mm: f64,
    pub slice_thickness_mm: f64,
    /// In-plane semi-axes of the elliptic brain as fractions of X and Y.
    pub brain_radii: [f64; 2],
    pub healthy: CurveParams,
    pub penumbra: CurveParams,
    pub core: CurveParams,
    /// Ignored for WIS phantoms, which never carry a lesion.
    pub lesion: Option<LesionSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub group: Group,
    pub storage: DType,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let curve = |amplitude, onset| CurveParams {
            baseline: 35.0,
            amplitude,
            onset,
            alpha: 3.0,
            beta: 1.5,
        };
        PhantomSpec {
            extents: [32, 32, 3],
            time_schedule: (0..8).map(|k| 2.0 * f64::from(k)).collect(),
            pixel_spacing_mm: 0.4258,
            slice_thickness_mm: 5.0,
            brain_radii: [0.42, 0.45],
            healthy: curve(40.0, 2.0),
            penumbra: curve(28.0, 5.0),
            core: curve(10.0, 5.0),
            lesion: Some(LesionSpec {
                penumbra: Ellipsoid {
                    center: [16.0, 16.0, 1.0],
                    radii: [5.0, 5.0, 1.5],
                },
                core: Some(Ellipsoid {
                    center: [16.0, 16.0, 1.0],
                    radii: [3.0, 3.0, 1.2],
                }),
                jitter: 5.0,
            }),
            noise_sigma: 2.0,
            seed: 0,
            group: Group::Lvo,
            storage: DType::F32,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::config("phantom extents must be positive"));
        }
        self.meta().validate()?;
        if self.time_schedule.is_empty() {
            return Err(Error::config("phantom needs at least one time point"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and ≥ 0"));
        }
        if self.brain_radii.iter().any(|&r| !(r > 0.0 && r <= 0.5)) {
            return Err(Error::config("brain radii must lie in (0, 0.5]"));
        }
        if self.storage == DType::U8 {
            return Err(Error::config("studies are stored as f32 or f64"));
        }
        self.healthy.validate("healthy")?;
        self.penumbra.validate("penumbra")?;
        self.core.validate("core")?;
        if !(self.healthy.amplitude > self.penumbra.amplitude && self.penumbra.amplitude > self.core.amplitude) {
            return Err(Error::config("amplitudes must be ordered healthy > penumbra > core"));
        }
        if let Some(l) = &self.lesion {
            if l.penumbra
                .radii
                .iter()
                .chain(l.core.iter().flat_map(|c| c.radii.iter()))
                .any(|&r| !(r > 0.0))
            {
                return Err(Error::config("lesion radii must be positive"));
            }
            if !(l.jitter >= 0.0 && l.jitter.is_finite()) {
                return Err(Error::config("lesion jitter must be finite and ≥ 0"));
            }
            if let Some(core) = &l.core {
                // Both ellipsoids move together, so containment of the core's
                // surface (both are convex) is enough for every shift.
                let (nu, nv) = (72, 36);
                for i in 0..nu {
                    let phi = 2.0 * std::f64::consts::PI * i as f64 / nu as f64;
                    for j in 0..=nv {
                        let theta = std::f64::consts::PI * j as f64 / nv as f64;
                        let dir = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                        let p: [f64; 3] = std::array::from_fn(|a| core.center[a] + core.radii[a] * dir[a]);
                        let r: f64 = (0..3)
                            .map(|a| ((p[a] - l.penumbra.center[a]) / l.penumbra.radii[a]).powi(2))
                            .sum();
                        if r > 1.0 + 1e-9 {
                            return Err(Error::config(
                                "core ellipsoid is not enclosed by the penumbra ellipsoid",
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta {
            pixel_spacing_mm: self.pixel_spacing_mm,
            slice_thickness_mm: self.slice_thickness_mm,
            time_schedule: self.time_schedule.clone(),
            ..VolumeMeta::default()
        }
    }

    /// Identifier written into the study header sidecar.
    pub fn patient_id(&self) -> String {
        format!("phantom-{:05}", self.seed)
    }
}

/// Generates the study and its ground-truth labels (brain voxels labelled,
/// everything else [`OUTSIDE`]).
pub fn make_phantom(spec: &PhantomSpec) -> Result<(CtpStudy, MaskVolume)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.extents;
    let nt = spec.time_schedule.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let lesion = match (spec.group, &spec.lesion) {
        (Group::Wis, _) | (_, None) => None,
        (_, Some(l)) => {
            let (dx, dy) = if l.jitter > 0.0 {
                (
                    rng.random_range(-l.jitter..=l.jitter),
                    rng.random_range(-l.jitter..=l.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            Some((l.penumbra.shifted(dx, dy), l.core.map(|c| c.shifted(dx, dy))))
        }
    };

    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (rx, ry) = (spec.brain_radii[0] * nx as f64, spec.brain_radii[1] * ny as f64);
    let mut labels = vec![OUTSIDE; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            let in_brain = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0;
            if !in_brain {
                continue;
            }
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                let class = match &lesion {
                    Some((_, Some(core))) if core.contains(p) => Class::Core,
                    Some((pen, _)) if pen.contains(p) => Class::Penumbra,
                    _ => Class::Healthy,
                };
                labels[(x * ny + y) * nz + z] = class as u8;
            }
        }
    }

    let curves: Vec<Vec<f64>> = [spec.healthy, spec.penumbra, spec.core]
        .iter()
        .map(|c| spec.time_schedule.iter().map(|&t| c.eval(t)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let meta = spec.meta();
    let mut data = Vec::with_capacity(labels.len() * nt);
    for &l in &labels {
        for t in 0..nt {
            let hu = if l == OUTSIDE { AIR_HU } else { curves[l as usize][t] };
            let hu = if spec.noise_sigma > 0.0 {
                hu + noise.sample(&mut rng)
            } else {
                hu
            };
            data.push((hu - meta.rescale_intercept) / meta.rescale_slope);
        }
    }
    let raw = Tensor::new(
        vec![nx, ny, nz, nt],
        vec![AxisRole::Width, AxisRole::Height, AxisRole::Depth, AxisRole::Time],
        data,
    )?;
    let study = CtpStudy {
        raw,
        meta,
        patient_id: spec.patient_id(),
        group: spec.group,
        storage: spec.storage,
    };
    Ok((study, MaskVolume::new(spec.extents, labels)?))
}
