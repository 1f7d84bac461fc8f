//! Static PNG overlays: lesion classes tinted over the temporal maximum.

use ctp4d_core::{Class, MaskVolume, Tensor};
use image::{Rgb, RgbImage};

use crate::failure::Failure;

const PENUMBRA: [f64; 3] = [40.0, 200.0, 60.0];
const CORE: [f64; 3] = [230.0, 40.0, 40.0];
const OPACITY: f64 = 0.5;

/// One image per slice, x to the right and y downwards. Grey levels span
/// the brain's intensity range of the time-maximum projection.
pub fn render(volume: &Tensor<f64>, brain: &[bool], mask: &MaskVolume) -> Result<Vec<RgbImage>, Failure> {
    let d = volume.dims();
    let (nx, ny, nz, nt) = (d[0], d[1], d[2], d[3]);
    if mask.dims() != [nx, ny, nz] {
        return Err(Failure::usage("overlay mask does not match the study"));
    }
    let mip: Vec<f64> = volume
        .data()
        .chunks(nt)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let (lo, hi) = mip
        .iter()
        .zip(brain)
        .filter(|(_, &b)| b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (&v, _)| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let labels = mask.labels();
    let images = (0..nz)
        .map(|z| {
            RgbImage::from_fn(nx as u32, ny as u32, |x, y| {
                let i = (x as usize * ny + y as usize) * nz + z;
                let g = if brain[i] {
                    ((mip[i] - lo) / span).clamp(0.0, 1.0) * 255.0
                } else {
                    0.0
                };
                let tint = match labels[i] {
                    l if l == Class::Penumbra as u8 => Some(PENUMBRA),
                    l if l == Class::Core as u8 => Some(CORE),
                    _ => None,
                };
                let px = match tint {
                    Some(c) => c.map(|c| (1.0 - OPACITY) * g + OPACITY * c),
                    None => [g; 3],
                };
                Rgb(px.map(|v| v.round() as u8))
            })
        })
        .collect();
    Ok(images)
}
