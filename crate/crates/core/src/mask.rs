use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

/// Label value of voxels outside the brain; excluded from losses and metrics.
pub const OUTSIDE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Class {
    Healthy = 0,
    Penumbra = 1,
    Core = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Healthy, Class::Penumbra, Class::Core];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Healthy => "healthy",
            Class::Penumbra => "penumbra",
            Class::Core => "core",
        }
    }
}

/// Per-voxel class labels of an (X, Y, Z) volume; [`OUTSIDE`] marks non-brain voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() {
            return Err(Error::shape(format!(
                "mask extents {dims:?} need {} labels, got {}",
                dims.iter().product::<usize>(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES && l != OUTSIDE) {
            return Err(Error::shape(format!("invalid class label {bad}")));
        }
        Ok(MaskVolume { dims, labels })
    }

    /// Builds a volume from per-slice (X, Y) label images, stacked along depth.
    pub fn from_slices(width: usize, height: usize, slices: &[Vec<u8>]) -> Result<Self> {
        let depth = slices.len();
        let mut labels = vec![0u8; width * height * depth];
        for (z, s) in slices.iter().enumerate() {
            if s.len() != width * height {
                return Err(Error::shape(format!("slice {z} has {} labels", s.len())));
            }
            for (i, &l) in s.iter().enumerate() {
                labels[i * depth + z] = l;
            }
        }
        Self::new([width, height, depth], labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    /// Labels of slice `z` in (X, Y) row-major order.
    pub fn slice(&self, z: usize) -> Vec<u8> {
        let d = self.dims[2];
        (0..self.dims[0] * self.dims[1])
            .map(|i| self.labels[i * d + z])
            .collect()
    }

    /// Binary mask of one class, with outside voxels false.
    pub fn class_mask(&self, class: Class) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class as u8).collect()
    }

    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != OUTSIDE).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&l| l == class as u8).count()
    }

    /// Copies the outside-brain marking of `reference` onto this volume.
    pub fn restrict_to(&mut self, reference: &MaskVolume) -> Result<()> {
        if reference.dims != self.dims {
            return Err(Error::shape(format!(
                "mask extents {:?} vs {:?}",
                self.dims, reference.dims
            )));
        }
        for (l, &r) in self.labels.iter_mut().zip(&reference.labels) {
            if r == OUTSIDE {
                *l = OUTSIDE;
            }
        }
        Ok(())
    }
}
