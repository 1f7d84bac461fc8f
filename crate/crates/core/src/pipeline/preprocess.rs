//! HU conversion, brain extraction, contrast enhancement, standardisation and
//! temporal resampling. All arithmetic is in f64.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AxisRole, Tensor, VolumeMeta};

/// Brain tissue window in HU.
pub const BRAIN_HU_WINDOW: (f64, f64) = (0.0, 100.0);
pub const HE_BINS: usize = 256;
pub const GAMMA: f64 = 0.5;

pub fn hu_convert(raw: &Tensor<f64>, meta: &VolumeMeta) -> Tensor<f64> {
    let (rs, ri) = (meta.rescale_slope, meta.rescale_intercept);
    raw.map(|v| v * rs + ri)
}

/// Brain mask of an HU volume `(X, Y, Z)` or `(X, Y, Z, T)` (first frame used):
/// the largest 6-connected component inside the brain window, with enclosed
/// holes filled slice by slice. Returned in (X, Y, Z) order.
pub fn brain_mask(hu: &Tensor<f64>) -> Result<Vec<bool>> {
    let d = hu.dims();
    if hu.rank() != 3 && hu.rank() != 4 {
        return Err(Error::shape(format!("brain mask needs (X, Y, Z[, T]), got {d:?}")));
    }
    let (nx, ny, nz) = (d[0], d[1], d[2]);
    let nt = if hu.rank() == 4 { d[3] } else { 1 };
    let (lo, hi) = BRAIN_HU_WINDOW;
    let inside: Vec<bool> = (0..nx * ny * nz)
        .map(|i| {
            let v = hu.data()[i * nt];
            v >= lo && v <= hi
        })
        .collect();

    let mut label = vec![0u32; inside.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..inside.len() {
        if !inside[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            let mut visit = |j: usize| {
                if inside[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - ny * nz);
            }
            if x + 1 < nx {
                visit(i + ny * nz);
            }
            if y > 0 {
                visit(i - nz);
            }
            if y + 1 < ny {
                visit(i + nz);
            }
            if z > 0 {
                visit(i - 1);
            }
            if z + 1 < nz {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    if best.1 == 0 {
        return Err(Error::EmptyBrainMask);
    }
    let mut mask: Vec<bool> = label.iter().map(|&l| l == best.0).collect();
    for z in 0..nz {
        fill_holes_2d(&mut mask, nx, ny, nz, z);
    }
    Ok(mask)
}

/// Marks every background pixel of slice `z` not 4-connected to the border as foreground.
fn fill_holes_2d(mask: &mut [bool], nx: usize, ny: usize, nz: usize, z: usize) {
    let at = |x: usize, y: usize| (x * ny + y) * nz + z;
    let mut outside = vec![false; nx * ny];
    let mut queue = VecDeque::new();
    for x in 0..nx {
        for y in 0..ny {
            let border = x == 0 || y == 0 || x + 1 == nx || y + 1 == ny;
            if border && !mask[at(x, y)] {
                outside[x * ny + y] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut nbrs = Vec::with_capacity(4);
        if x > 0 {
            nbrs.push((x - 1, y));
        }
        if x + 1 < nx {
            nbrs.push((x + 1, y));
        }
        if y > 0 {
            nbrs.push((x, y - 1));
        }
        if y + 1 < ny {
            nbrs.push((x, y + 1));
        }
        for (a, b) in nbrs {
            if !mask[at(a, b)] && !outside[a * ny + b] {
                outside[a * ny + b] = true;
                queue.push_back((a, b));
            }
        }
    }
    for x in 0..nx {
        for y in 0..ny {
            if !outside[x * ny + y] {
                mask[at(x, y)] = true;
            }
        }
    }
}

/// Expands an (X, Y, Z) mask to the element layout of an `(X, Y, Z, T...)` tensor.
fn voxel_mask(volume: &Tensor<f64>, mask: &[bool]) -> Result<usize> {
    let d = volume.dims();
    if d.len() < 3 {
        return Err(Error::shape("volume needs at least (X, Y, Z)"));
    }
    let spatial = d[0] * d[1] * d[2];
    if mask.len() != spatial {
        return Err(Error::shape(format!("mask of {} voxels for volume {d:?}", mask.len())));
    }
    Ok(volume.len() / spatial)
}

fn masked_values<'a>(volume: &'a Tensor<f64>, mask: &'a [bool], inner: usize) -> impl Iterator<Item = f64> + 'a {
    volume
        .data()
        .chunks(inner)
        .zip(mask)
        .filter(|(_, &m)| m)
        .flat_map(|(c, _)| c.iter().copied())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceReport {
    /// Masked intensities were constant; the volume passed through unchanged.
    pub constant: bool,
}

/// Min-max normalisation to [0, 1] over brain voxels (all frames), then
/// optional histogram equalisation and gamma correction, in that order.
pub fn enhance(
    volume: &Tensor<f64>,
    mask: &[bool],
    equalize: bool,
    gamma: bool,
) -> Result<(Tensor<f64>, EnhanceReport)> {
    let inner = voxel_mask(volume, mask)?;
    let (lo, hi) =
        masked_values(volume, mask, inner).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Ok((volume.clone(), EnhanceReport { constant: true }));
    }
    let mut out = volume.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    if equalize {
        out = equalize_histogram(&out, mask, inner);
    }
    if gamma {
        out = out.map(|v| v.powf(GAMMA));
    }
    Ok((out, EnhanceReport { constant: false }))
}

fn bin_of(v: f64) -> usize {
    ((v * HE_BINS as f64) as usize).min(HE_BINS - 1)
}

/// Histogram equalisation of values in [0, 1]: `(cdf − cdf_min) / (N − cdf_min)`
/// over the masked voxels; unmasked voxels are mapped with the same table.
fn equalize_histogram(volume: &Tensor<f64>, mask: &[bool], inner: usize) -> Tensor<f64> {
    let mut hist = [0usize; HE_BINS];
    for v in masked_values(volume, mask, inner) {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = [0usize; HE_BINS];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = acc;
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return volume.clone();
    }
    let table: Vec<f64> = cdf
        .iter()
        .map(|&c| (c.saturating_sub(cdf_min)) as f64 / (n - cdf_min) as f64)
        .collect();
    volume.map(|v| table[bin_of(v)])
}

/// `(v − μ) / σ` with population statistics over brain voxels of every frame.
pub fn zscore(volume: &Tensor<f64>, mask: &[bool]) -> Result<Tensor<f64>> {
    let inner = voxel_mask(volume, mask)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for v in masked_values(volume, mask, inner) {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return Err(Error::EmptyBrainMask);
    }
    let mu = sum / n as f64;
    let var = masked_values(volume, mask, inner)
        .map(|v| (v - mu) * (v - mu))
        .sum::<f64>()
        / n as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::config("z-score undefined: brain intensities have zero spread"));
    }
    Ok(volume.map(|v| (v - mu) / sigma))
}

/// Linear interpolation of the last (time) axis onto `t0, t0 + dt, …` up to the
/// final instant. Samples that coincide with an acquisition instant are copied.
pub fn temporal_resample(volume: &Tensor<f64>, schedule: &[f64], dt: f64) -> Result<(Tensor<f64>, Vec<f64>)> {
    let nt = *volume.dims().last().expect("rank >= 1");
    if schedule.len() != nt {
        return Err(Error::shape(format!("{} instants for {nt} frames", schedule.len())));
    }
    if nt < 2 {
        return Err(Error::config("resampling needs at least two time points"));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("time schedule must be strictly increasing"));
    }
    if !(dt > 0.0) {
        return Err(Error::config("resampling step must be positive"));
    }
    let (t0, t1) = (schedule[0], schedule[nt - 1]);
    let steps = ((t1 - t0) / dt + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * dt).collect();
    // (left index, weight of right neighbour) per grid instant.
    let plan: Vec<(usize, f64)> = grid
        .iter()
        .map(|&t| {
            let j = schedule.partition_point(|&s| s <= t).saturating_sub(1).min(nt - 1);
            if (schedule[j] - t).abs() <= 1e-9 * dt || j + 1 == nt {
                (j, 0.0)
            } else {
                (j, (t - schedule[j]) / (schedule[j + 1] - schedule[j]))
            }
        })
        .collect();
    let mut dims = volume.dims().to_vec();
    *dims.last_mut().expect("rank >= 1") = grid.len();
    let mut data = Vec::with_capacity(volume.len() / nt * grid.len());
    for curve in volume.data().chunks(nt) {
        for &(j, w) in &plan {
            data.push(if w == 0.0 {
                curve[j]
            } else {
                curve[j] + w * (curve[j + 1] - curve[j])
            });
        }
    }
    Ok((Tensor::new(dims, volume.roles().to_vec(), data)?, grid))
}

/// Which optional steps run. Everything on except resampling reproduces the
/// best-performing configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub equalize: bool,
    pub gamma: bool,
    pub zscore: bool,
    pub resample: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            equalize: true,
            gamma: true,
            zscore: true,
            resample: false,
        }
    }
}

impl PreprocessConfig {
    /// All sixteen on/off combinations of the four switches.
    pub fn grid() -> Vec<PreprocessConfig> {
        (0..16u8)
            .map(|b| PreprocessConfig {
                equalize: b & 1 != 0,
                gamma: b & 2 != 0,
                zscore: b & 4 != 0,
                resample: b & 8 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    /// `(X, Y, Z, T')`, zero outside the brain.
    pub volume: Tensor<f64>,
    /// Metadata with the output time schedule.
    pub meta: VolumeMeta,
    /// (X, Y, Z) brain mask.
    pub brain: Vec<bool>,
    pub enhance: EnhanceReport,
}

/// The full chain on stored detector values.
pub fn preprocess(raw: &Tensor<f64>, meta: &VolumeMeta, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    meta.validate()?;
    if raw.rank() != 4 {
        return Err(Error::shape(format!(
            "study must be (X, Y, Z, T), got {:?}",
            raw.dims()
        )));
    }
    let hu = hu_convert(raw, meta);
    let brain = brain_mask(&hu)?;
    let (mut v, report) = if cfg.equalize || cfg.gamma {
        enhance(&hu, &brain, cfg.equalize, cfg.gamma)?
    } else {
        (hu, EnhanceReport::default())
    };
    if cfg.zscore {
        v = zscore(&v, &brain)?;
    }
    let mut meta = meta.clone();
    if cfg.resample {
        let (r, grid) = temporal_resample(&v, &meta.time_schedule, 1.0)?;
        v = r;
        meta.time_schedule = grid;
    }
    let nt = v.dims()[3];
    for (chunk, &b) in v.data_mut().chunks_mut(nt).zip(&brain) {
        if !b {
            chunk.fill(0.0);
        }
    }
    let dims = v.dims().to_vec();
    let v = v.reshape(
        dims,
        vec![AxisRole::Width, AxisRole::Height, AxisRole::Depth, AxisRole::Time],
    )?;
    Ok(Preprocessed {
        volume: v,
        meta,
        brain,
        enhance: report,
    })
}
