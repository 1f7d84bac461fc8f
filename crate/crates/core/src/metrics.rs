//! Evaluation metrics on binary (X, Y, Z) masks: Dice, Hausdorff distance, volume difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::VolumeMeta;

/// Dice coefficient `2|x∩y| / (|x|+|y|)`; two empty masks score 1.
pub fn dice_coeff(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Absolute volume difference in millilitres.
pub fn delta_v_ml(pred: &[bool], gt: &[bool], meta: &VolumeMeta) -> Result<f64> {
    same_len(pred, gt)?;
    let a = pred.iter().filter(|&&v| v).count() as f64;
    let b = gt.iter().filter(|&&v| v).count() as f64;
    Ok((a - b).abs() * meta.voxel_volume_mm3() / 1000.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    /// In-plane distance per slice, averaged over slices with a nonempty union.
    #[default]
    PerSlice,
    /// One 3D point set per mask with anisotropic spacing.
    Volume,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hausdorff {
    pub mm: f64,
    /// Both masks were empty everywhere; `mm` is reported as 0.
    pub empty: bool,
    /// Slices (or the whole volume) where exactly one mask was empty and which were left out.
    pub skipped: usize,
}

/// Symmetric Hausdorff distance in mm between two masks over an (X, Y, Z) grid.
pub fn hausdorff_mm(
    pred: &[bool],
    gt: &[bool],
    dims: [usize; 3],
    meta: &VolumeMeta,
    mode: HausdorffMode,
) -> Result<Hausdorff> {
    same_len(pred, gt)?;
    if dims.iter().product::<usize>() != pred.len() {
        return Err(Error::shape(format!(
            "mask of {} voxels does not fit extents {dims:?}",
            pred.len()
        )));
    }
    let [nx, ny, nz] = dims;
    let s = meta.pixel_spacing_mm;
    match mode {
        HausdorffMode::PerSlice => {
            let (mut sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
            for z in 0..nz {
                let pick = |m: &[bool]| -> Vec<bool> { (0..nx * ny).map(|i| m[i * nz + z]).collect() };
                let (a, b) = (pick(pred), pick(gt));
                match set_hausdorff(&a, &b, &[nx, ny], &[s, s]) {
                    SetDistance::BothEmpty => {}
                    SetDistance::OneEmpty => skipped += 1,
                    SetDistance::Value(d) => {
                        sum += d;
                        counted += 1;
                    }
                }
            }
            Ok(Hausdorff {
                mm: if counted == 0 { 0.0 } else { sum / counted as f64 },
                empty: counted == 0 && skipped == 0,
                skipped,
            })
        }
        HausdorffMode::Volume => {
            let spacing = [s, s, meta.slice_thickness_mm];
            Ok(match set_hausdorff(pred, gt, &dims, &spacing) {
                SetDistance::BothEmpty => Hausdorff {
                    mm: 0.0,
                    empty: true,
                    skipped: 0,
                },
                SetDistance::OneEmpty => Hausdorff {
                    mm: 0.0,
                    empty: false,
                    skipped: 1,
                },
                SetDistance::Value(mm) => Hausdorff {
                    mm,
                    empty: false,
                    skipped: 0,
                },
            })
        }
    }
}

enum SetDistance {
    BothEmpty,
    OneEmpty,
    Value(f64),
}

fn set_hausdorff(a: &[bool], b: &[bool], dims: &[usize], spacing: &[f64]) -> SetDistance {
    let (ea, eb) = (!a.iter().any(|&v| v), !b.iter().any(|&v| v));
    match (ea, eb) {
        (true, true) => SetDistance::BothEmpty,
        (true, false) | (false, true) => SetDistance::OneEmpty,
        _ => {
            let directed = |from: &[bool], to: &[bool]| {
                let d2 = squared_distance_transform(to, dims, spacing);
                from.iter()
                    .zip(&d2)
                    .filter(|(&f, _)| f)
                    .map(|(_, &d)| d)
                    .fold(0.0, f64::max)
            };
            SetDistance::Value(directed(a, b).max(directed(b, a)).sqrt())
        }
    }
}

/// Squared Euclidean distance from every grid point to the nearest `true` point,
/// under per-axis spacing. Separable lower-envelope transform, one pass per axis.
pub fn squared_distance_transform(features: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    let mut f: Vec<f64> = features.iter().map(|&v| if v { 0.0 } else { f64::INFINITY }).collect();
    let strides = crate::tensor::strides(dims);
    for (axis, (&n, &step)) in dims.iter().zip(&strides).enumerate() {
        let w2 = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut env = Envelope::with_capacity(n);
        for start in 0..f.len() {
            // Visit each line once, from its first element.
            if (start / step) % n != 0 {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = f[start + i * step];
            }
            env.transform(&line, w2, &mut out);
            for (i, &v) in out.iter().enumerate() {
                f[start + i * step] = v;
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n + 1),
        }
    }

    /// d(p) = min_q f(q) + w2 (p − q)².
    fn transform(&mut self, f: &[f64], w2: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let n = f.len();
        let meet = |q: usize, p: usize| {
            let (qf, pf) = (q as f64, p as f64);
            ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
        };
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = meet(q, p);
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let d = p as f64 - q as f64;
            *o = f[q] + w2 * d * d;
        }
    }
}

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}
