//! Dense tensors with per-axis roles.
//!
//! Layout is row-major with the last axis fastest. Axes follow the canonical
//! order width, height, depth, time, channel (filter last for kernels), so a
//! per-voxel class vector is contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisRole {
    Width,
    Height,
    Depth,
    Time,
    Channel,
    /// Output-channel axis of a multi-channel kernel.
    Filter,
}

impl AxisRole {
    /// Default roles for a plain (channel-less) tensor of the given rank.
    pub fn defaults(rank: usize) -> Vec<AxisRole> {
        use AxisRole::*;
        [Width, Height, Depth, Time, Channel, Filter][..rank].to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    roles: Vec<AxisRole>,
    data: Vec<T>,
}

fn check_layout(dims: &[usize], roles: &[AxisRole], len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have at least one axis"));
    }
    if dims.len() != roles.len() {
        return Err(Error::shape(format!(
            "{} extents but {} axis roles",
            dims.len(),
            roles.len()
        )));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("axis {axis} has zero extent")));
    }
    for (i, r) in roles.iter().enumerate() {
        if roles[i + 1..].contains(r) {
            return Err(Error::shape(format!("axis role {r:?} used more than once")));
        }
    }
    if roles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::shape(format!("axis roles {roles:?} are not in canonical order")));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::shape(format!(
            "extents {dims:?} need {expected} elements, buffer has {len}"
        )));
    }
    Ok(())
}

impl<T: Copy> Tensor<T> {
    pub fn new(dims: Vec<usize>, roles: Vec<AxisRole>, data: Vec<T>) -> Result<Self> {
        check_layout(&dims, &roles, data.len())?;
        Ok(Tensor { dims, roles, data })
    }

    /// Tensor with [`AxisRole::defaults`] for its rank.
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let roles = AxisRole::defaults(dims.len().min(6));
        Self::new(dims, roles, data)
    }

    pub fn full(dims: Vec<usize>, roles: Vec<AxisRole>, value: T) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, roles, vec![value; n])
    }

    pub fn from_fn(dims: Vec<usize>, roles: Vec<AxisRole>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut coords = vec![0usize; dims.len()];
        for _ in 0..n {
            data.push(f(&coords));
            for a in (0..dims.len()).rev() {
                coords[a] += 1;
                if coords[a] < dims[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        Self::new(dims, roles, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn roles(&self) -> &[AxisRole] {
        &self.roles
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn axis_of(&self, role: AxisRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.dims)
    }

    pub fn offset(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dims.len() {
            return Err(Error::shape(format!(
                "{} coordinates for a rank-{} tensor",
                coords.len(),
                self.dims.len()
            )));
        }
        let mut off = 0;
        for (axis, (&c, &d)) in coords.iter().zip(&self.dims).enumerate() {
            if c >= d {
                return Err(Error::Bounds {
                    axis,
                    index: c,
                    extent: d,
                });
            }
            off = off * d + c;
        }
        Ok(off)
    }

    pub fn index(&self, coords: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(coords)?])
    }

    pub fn set(&mut self, coords: &[usize], value: T) -> Result<()> {
        let off = self.offset(coords)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            roles: self.roles.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same buffer under new extents and roles.
    pub fn reshape(self, dims: Vec<usize>, roles: Vec<AxisRole>) -> Result<Self> {
        Self::new(dims, roles, self.data)
    }

    /// Drops an axis of extent 1.
    pub fn squeeze_axis(self, axis: usize) -> Result<Self> {
        if self.dims.get(axis) != Some(&1) {
            return Err(Error::shape(format!(
                "cannot squeeze axis {axis} of extents {:?}",
                self.dims
            )));
        }
        let mut dims = self.dims;
        let mut roles = self.roles;
        dims.remove(axis);
        roles.remove(axis);
        Self::new(dims, roles, self.data)
    }

    /// Sub-tensor `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let extent = *self
            .dims
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of rank")))?;
        if len == 0 || start + len > extent {
            return Err(Error::shape(format!(
                "range {start}..{} outside axis {axis} extent {extent}",
                start + len
            )));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Self::new(dims, self.roles.clone(), data)
    }

    /// The hyperplane at `index` along `axis`, with that axis removed.
    pub fn slice_axis(&self, axis: usize, index: usize) -> Result<Self> {
        self.narrow(axis, index, 1)?.squeeze_axis(axis)
    }

    /// Splits `axis` into consecutive pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().sum();
        if self.dims.get(axis) != Some(&total) {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of extents {:?}",
                self.dims
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(tensors: &[Self], axis: usize, role: AxisRole) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
        if axis > first.rank() {
            return Err(Error::shape(format!("stack axis {axis} beyond rank")));
        }
        let mut dims = first.dims.clone();
        let mut roles = first.roles.clone();
        dims.insert(axis, 1);
        roles.insert(axis, role);
        let parts = tensors
            .iter()
            .map(|t| {
                if t.dims != first.dims || t.roles != first.roles {
                    return Err(Error::shape(format!(
                        "stack operands disagree: {:?} vs {:?}",
                        first.dims, t.dims
                    )));
                }
                Tensor::new(dims.clone(), roles.clone(), t.data.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        concat(&parts, axis)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Vec<usize>, roles: Vec<AxisRole>) -> Result<Self> {
        Self::full(dims, roles, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            dims: other.dims.clone(),
            roles: other.roles.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Euclidean norm over every element.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Pads every axis by `amounts[axis]` on both sides.
    pub fn pad(&self, amounts: &[usize], mode: PadMode) -> Result<Self> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "{} pad amounts for rank {}",
                amounts.len(),
                self.rank()
            )));
        }
        let dims: Vec<usize> = self.dims.iter().zip(amounts).map(|(&d, &a)| d + 2 * a).collect();
        let src_strides = self.strides();
        let src_dims = &self.dims;
        Tensor::from_fn(dims, self.roles.clone(), |c| {
            let mut off = 0;
            for a in 0..c.len() {
                let shifted = c[a] as isize - amounts[a] as isize;
                let idx = if shifted < 0 || shifted >= src_dims[a] as isize {
                    match mode {
                        PadMode::Zero => return T::zero(),
                        PadMode::Replicate => shifted.clamp(0, src_dims[a] as isize - 1),
                    }
                } else {
                    shifted
                };
                off += idx as usize * src_strides[a];
            }
            self.data[off]
        })
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Concatenation along an existing axis. All other extents must agree.
pub fn concat<T: Copy>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::shape(format!("concat axis {axis} beyond rank {}", first.rank())));
    }
    for t in &tensors[1..] {
        if t.rank() != first.rank() || t.roles != first.roles {
            return Err(Error::shape(format!(
                "concat operands have roles {:?} and {:?}",
                first.roles, t.roles
            )));
        }
        if let Some(a) = (0..first.rank()).find(|&a| a != axis && t.dims[a] != first.dims[a]) {
            return Err(Error::shape(format!(
                "concat operands mismatch on axis {a}: {} vs {}",
                first.dims[a], t.dims[a]
            )));
        }
    }
    let outer: usize = first.dims[..axis].iter().product();
    let inner: usize = first.dims[axis + 1..].iter().product();
    let mut dims = first.dims.clone();
    dims[axis] = tensors.iter().map(|t| t.dims[axis]).sum();
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.dims[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(dims, first.roles.clone(), data)
}

/// Acquisition geometry of a CTP study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub pixel_spacing_mm: f64,
    pub slice_thickness_mm: f64,
    /// Acquisition instants in seconds.
    pub time_schedule: Vec<f64>,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
}

impl Default for VolumeMeta {
    fn default() -> Self {
        VolumeMeta {
            pixel_spacing_mm: 0.4258,
            slice_thickness_mm: 5.0,
            time_schedule: Vec::new(),
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
        }
    }
}

impl VolumeMeta {
    /// The clinical schedule: twenty frames every second, then ten every two seconds.
    pub fn clinical_schedule() -> Vec<f64> {
        (0..20)
            .map(f64::from)
            .chain((0..10).map(|k| 21.0 + 2.0 * f64::from(k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_spacing_mm > 0.0 && self.slice_thickness_mm > 0.0) {
            return Err(Error::config("voxel spacings must be positive"));
        }
        if self.time_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("time schedule must be strictly increasing"));
        }
        if !(self.rescale_slope.is_finite() && self.rescale_intercept.is_finite()) {
            return Err(Error::config("rescale slope/intercept must be finite"));
        }
        Ok(())
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.pixel_spacing_mm * self.pixel_spacing_mm * self.slice_thickness_mm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn index_row_major() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.index(&[1, 0]).unwrap(), 3.0);
        assert_eq!(t.index(&[1, 1]).unwrap(), 4.0);
        assert_eq!(t.index(&[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn index_out_of_range_names_axis() {
        let t = Tensor::<f64>::zeros(vec![2, 3], AxisRole::defaults(2)).unwrap();
        match t.index(&[1, 3]) {
            Err(Error::Bounds { axis, index, extent }) => {
                assert_eq!((axis, index, extent), (1, 3, 3))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_invariants_enforced() {
        assert!(Tensor::from_vec(vec![2, 2], vec![0.0f64; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], Vec::<f64>::new()).is_err());
        assert!(Tensor::new(vec![1, 1], vec![AxisRole::Width, AxisRole::Width], vec![0.0f64]).is_err());
    }

    #[test]
    fn pad_modes() {
        let t = vec1(&[1.0, 2.0, 3.0]);
        assert_eq!(t.pad(&[1], PadMode::Zero).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(
            t.pad(&[1], PadMode::Replicate).unwrap().data(),
            &[1.0, 1.0, 2.0, 3.0, 3.0]
        );
        assert_eq!(t.pad(&[0], PadMode::Zero).unwrap(), t);
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = concat(&[a.clone(), b], 0).unwrap();
        assert_eq!(c.dims(), &[4, 2]);
        assert_eq!(concat(std::slice::from_ref(&a), 1).unwrap(), a);

        // Three (X, Y, 1, T) slice volumes stacked along depth.
        let v: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::zeros(vec![4, 5, 1, 6], AxisRole::defaults(4)).unwrap())
            .collect();
        assert_eq!(concat(&v, 2).unwrap().dims(), &[4, 5, 3, 6]);

        let bad = Tensor::<f64>::zeros(vec![3, 2], AxisRole::defaults(2)).unwrap();
        match concat(&[a, bad], 1) {
            Err(Error::Shape(msg)) => assert!(msg.contains("axis 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(1usize..4, 1..5).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            proptest::collection::vec(-10.0f64..10.0, n)
                .prop_map(move |data| Tensor::from_vec(dims.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pad_round_trip(t in arb_tensor(), amount in 0usize..3) {
            let amounts = vec![amount; t.rank()];
            let p = t.pad(&amounts, PadMode::Zero).unwrap();
            let mut coords = vec![0; t.rank()];
            for off in 0..t.len() {
                let mut rem = off;
                for a in (0..t.rank()).rev() {
                    coords[a] = rem % t.dims()[a];
                    rem /= t.dims()[a];
                }
                let shifted: Vec<usize> = coords.iter().map(|c| c + amount).collect();
                prop_assert_eq!(p.index(&shifted).unwrap(), t.index(&coords).unwrap());
            }
        }

        #[test]
        fn concat_split_round_trip(t in arb_tensor(), axis_seed in 0usize..8, cut_seed in 0usize..8) {
            let axis = axis_seed % t.rank();
            let extent = t.dims()[axis];
            let cut = cut_seed % extent;
            let sizes: Vec<usize> = if cut == 0 { vec![extent] } else { vec![cut, extent - cut] };
            let parts = t.split(axis, &sizes).unwrap();
            prop_assert_eq!(concat(&parts, axis).unwrap(), t);
        }
    }
}
