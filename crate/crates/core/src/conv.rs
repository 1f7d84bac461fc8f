//! Convolutions in two to four dimensions, the grouped 4D layer, pooling,
//! upsampling and activations.
//!
//! Every convolution uses the flipped-kernel convention centred on the kernel
//! half-width: `g(x) = Σ_i H(i) · I(x + ĩ − i)` with `ĩ = ⌊(k − 1) / 2⌋`. In
//! valid mode the output index is shifted so that output 0 is the first
//! position where the whole kernel overlaps the input; `same` mode reads
//! zeros outside the input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AxisRole, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// How a 4D convolution is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conv4dMode {
    /// Quadruple sum over every kernel tap.
    Direct,
    /// Sum over kernel depth of 2D+time convolutions of single slices.
    #[default]
    Decomposed,
}

/// Which kernel a group of the grouped 4D layer applies to a neighbouring volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSharing {
    /// One kernel per group, shared by every volume the group reads.
    #[default]
    PerGroup,
    /// One kernel per depth offset, shared by all groups (a true 4D convolution).
    PerOffset,
}

impl GroupSharing {
    /// Kernel used by group `group` when reading slice volume `slice`.
    pub fn kernel_index(self, group: usize, slice: usize) -> usize {
        match self {
            GroupSharing::PerGroup => group,
            GroupSharing::PerOffset => group + 1 - slice,
        }
    }
}

/// Slice volumes read by group `group` of the grouped layer: itself and its
/// neighbours that exist.
pub fn legal_slices(group: usize) -> std::ops::Range<usize> {
    group.saturating_sub(1)..(group + 2).min(3)
}

/// Half-width `⌊(k − 1) / 2⌋`.
pub fn half_width(extent: usize) -> usize {
    (extent - 1) / 2
}

#[derive(Clone, Debug)]
pub struct KernelSpec<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(weights: Tensor<T>) -> Self {
        KernelSpec { weights }
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn extents(&self) -> &[usize] {
        self.weights.dims()
    }

    pub fn half_widths(&self) -> Vec<usize> {
        self.extents().iter().map(|&k| half_width(k)).collect()
    }

    pub fn rank(&self) -> usize {
        self.weights.rank()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub padding: Padding,
    /// Input axis each kernel axis binds to. `None` binds kernel axis `i` to input axis `i`.
    pub axis_map: Option<Vec<usize>>,
}

impl ConvOptions {
    pub fn valid() -> Self {
        ConvOptions {
            padding: Padding::Valid,
            axis_map: None,
        }
    }

    pub fn same() -> Self {
        ConvOptions {
            padding: Padding::Same,
            axis_map: None,
        }
    }

    pub fn with_axis_map(mut self, axis_map: Vec<usize>) -> Self {
        self.axis_map = Some(axis_map);
        self
    }

    /// Binds a rank-3 kernel to (width, height, time) of a rank-4 input.
    pub fn temporal(self) -> Self {
        self.with_axis_map(vec![0, 1, 3])
    }
}

// ---------------------------------------------------------------------------
// Engine: channels-last convolution over up to four bound axes.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_dims: [usize; 4],
    pub k_dims: [usize; 4],
    pub out_dims: [usize; 4],
    pub shift: [usize; 4],
    pub cin: usize,
    pub cout: usize,
}

impl Geometry {
    pub fn new(in_dims: [usize; 4], k_dims: [usize; 4], pads: [Padding; 4], cin: usize, cout: usize) -> Result<Self> {
        let mut out_dims = [0; 4];
        let mut shift = [0; 4];
        for a in 0..4 {
            let (n, k) = (in_dims[a], k_dims[a]);
            if k == 0 {
                return Err(Error::shape(format!("kernel axis {a} has zero extent")));
            }
            match pads[a] {
                Padding::Valid => {
                    if k > n {
                        return Err(Error::shape(format!(
                            "kernel extent {k} exceeds input extent {n} on axis {a}"
                        )));
                    }
                    out_dims[a] = n - k + 1;
                    shift[a] = k - 1;
                }
                Padding::Same => {
                    out_dims[a] = n;
                    shift[a] = half_width(k);
                }
            }
        }
        Ok(Geometry {
            in_dims,
            k_dims,
            out_dims,
            shift,
            cin,
            cout,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product::<usize>() * self.cout
    }

    /// Kernel taps along axis `a` that land inside the input for output index `o`.
    #[inline]
    fn taps(&self, a: usize, o: usize) -> std::ops::Range<usize> {
        let top = o + self.shift[a];
        let lo = (top + 1).saturating_sub(self.in_dims[a]);
        let hi = (top + 1).min(self.k_dims[a]);
        lo..hi.max(lo)
    }
}

/// Visits every (output position, kernel tap) pair with flat base offsets:
/// `f(out_pos, in_pos, tap)` where the buffers are `pos * channels + c`.
#[inline]
fn for_each_tap(g: &Geometry, o0: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [_, n1, n2, n3] = g.in_dims;
    let [_, k1, k2, k3] = g.k_dims;
    let [_, m1, m2, m3] = g.out_dims;
    let r0 = g.taps(0, o0);
    for o1 in 0..m1 {
        let r1 = g.taps(1, o1);
        for o2 in 0..m2 {
            let r2 = g.taps(2, o2);
            for o3 in 0..m3 {
                let r3 = g.taps(3, o3);
                let out_pos = ((o0 * m1 + o1) * m2 + o2) * m3 + o3;
                for i0 in r0.clone() {
                    let x0 = o0 + g.shift[0] - i0;
                    for i1 in r1.clone() {
                        let x1 = o1 + g.shift[1] - i1;
                        for i2 in r2.clone() {
                            let x2 = o2 + g.shift[2] - i2;
                            let in_row = ((x0 * n1 + x1) * n2 + x2) * n3;
                            let tap_row = ((i0 * k1 + i1) * k2 + i2) * k3;
                            for i3 in r3.clone() {
                                let x3 = o3 + g.shift[3] - i3;
                                f(out_pos, in_row + x3, tap_row + i3);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output buffer of `g.out_len()` elements. Output slabs along the first axis
/// are independent, so the result does not depend on the thread count.
pub(crate) fn engine_forward<T: Scalar>(g: &Geometry, input: &[T], weight: &[T]) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let slab = g.out_len() / g.out_dims[0];
    let mut out = vec![T::zero(); g.out_len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(o0, chunk)| {
        let base = o0 * slab;
        for_each_tap(g, o0, |out_pos, in_pos, tap| {
            let acc = &mut chunk[out_pos * cout - base..][..cout];
            let xs = &input[in_pos * cin..][..cin];
            let ws = &weight[tap * cin * cout..][..cin * cout];
            for (ci, &x) in xs.iter().enumerate() {
                let w = &ws[ci * cout..][..cout];
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += x * wv;
                }
            }
        });
    });
    out
}

/// Accumulates input and weight gradients for upstream gradient `grad_out`.
pub(crate) fn engine_backward<T: Scalar>(
    g: &Geometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: &mut [T],
    grad_w: &mut [T],
) {
    let (cin, cout) = (g.cin, g.cout);
    for o0 in 0..g.out_dims[0] {
        for_each_tap(g, o0, |out_pos, in_pos, tap| {
            let go = &grad_out[out_pos * cout..][..cout];
            for ci in 0..cin {
                let w = &weight[(tap * cin + ci) * cout..][..cout];
                let mut dot = T::zero();
                for (&gv, &wv) in go.iter().zip(w) {
                    dot += gv * wv;
                }
                grad_in[in_pos * cin + ci] += dot;
                let x = input[in_pos * cin + ci];
                let gw = &mut grad_w[(tap * cin + ci) * cout..][..cout];
                for (d, &gv) in gw.iter_mut().zip(go) {
                    *d += x * gv;
                }
            }
        });
    }
}

fn pad4<T: Copy>(v: &[T], fill: T) -> [T; 4] {
    let mut out = [fill; 4];
    out[..v.len()].copy_from_slice(v);
    out
}

// ---------------------------------------------------------------------------
// Multi-channel convolution used by network layers.
// ---------------------------------------------------------------------------

/// Geometry of a channels-last convolution: `input` is `(spatial..., Cin)`,
/// `weight` is `(kernel spatial..., Cin, Cout)`.
pub(crate) fn channel_geometry<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, pads: &[Padding]) -> Result<Geometry> {
    let spatial = input.rank() - 1;
    if spatial == 0 || spatial > 4 {
        return Err(Error::shape(format!(
            "channel convolution needs 1..=4 spatial axes, got {spatial}"
        )));
    }
    if weight.rank() != spatial + 2 || pads.len() != spatial {
        return Err(Error::shape(format!(
            "kernel {:?} / padding {pads:?} do not match input {:?}",
            weight.dims(),
            input.dims()
        )));
    }
    let cin = input.dims()[spatial];
    if weight.dims()[spatial] != cin {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, input has {cin}",
            weight.dims()[spatial]
        )));
    }
    Geometry::new(
        pad4(&input.dims()[..spatial], 1),
        pad4(&weight.dims()[..spatial], 1),
        pad4(pads, Padding::Valid),
        cin,
        weight.dims()[spatial + 1],
    )
}

fn channel_output<T: Scalar>(input: &Tensor<T>, g: &Geometry, data: Vec<T>) -> Result<Tensor<T>> {
    let spatial = input.rank() - 1;
    let mut dims = g.out_dims[..spatial].to_vec();
    dims.push(g.cout);
    Tensor::new(dims, input.roles().to_vec(), data)
}

pub fn conv_channels<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, pads: &[Padding]) -> Result<Tensor<T>> {
    let g = channel_geometry(input, weight, pads)?;
    let out = engine_forward(&g, input.data(), weight.data());
    channel_output(input, &g, out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv_channels_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    pads: &[Padding],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = channel_geometry(input, weight, pads)?;
    if grad_out.len() != g.out_len() {
        return Err(Error::shape("upstream gradient does not match convolution output"));
    }
    let mut gi = Tensor::zeros_like(input);
    let mut gw = Tensor::zeros_like(weight);
    engine_backward(
        &g,
        input.data(),
        weight.data(),
        grad_out.data(),
        gi.data_mut(),
        gw.data_mut(),
    );
    Ok((gi, gw))
}

// ---------------------------------------------------------------------------
// Single-channel convolutions with explicit axis binding.
// ---------------------------------------------------------------------------

fn bound_axes(input_rank: usize, kernel_rank: usize, opts: &ConvOptions) -> Result<Vec<usize>> {
    let map = opts.axis_map.clone().unwrap_or_else(|| (0..kernel_rank).collect());
    if map.len() != kernel_rank {
        return Err(Error::config(format!(
            "axis map {map:?} has {} entries for a rank-{kernel_rank} kernel",
            map.len()
        )));
    }
    for (i, &a) in map.iter().enumerate() {
        if a >= input_rank {
            return Err(Error::config(format!(
                "kernel axis {i} bound to input axis {a} of a rank-{input_rank} input"
            )));
        }
        if map[..i].contains(&a) {
            return Err(Error::config(format!("input axis {a} bound twice in {map:?}")));
        }
    }
    Ok(map)
}

/// Convolves a plain tensor (rank ≤ 4) with a kernel whose axes bind to
/// `opts.axis_map`; unbound input axes are processed independently.
pub fn conv_bound<T: Scalar>(input: &Tensor<T>, kernel: &KernelSpec<T>, opts: &ConvOptions) -> Result<Tensor<T>> {
    let rank = input.rank();
    if rank > 4 {
        return Err(Error::shape(format!("input rank {rank} exceeds 4")));
    }
    let map = bound_axes(rank, kernel.rank(), opts)?;
    let mut k_dims = [1usize; 4];
    let mut pads = [Padding::Valid; 4];
    for (ka, &ia) in map.iter().enumerate() {
        k_dims[ia] = kernel.extents()[ka];
        pads[ia] = opts.padding;
    }
    // Re-lay the kernel in input-axis order.
    let mut order: Vec<usize> = (0..kernel.rank()).collect();
    order.sort_by_key(|&ka| map[ka]);
    let weights = if order.iter().enumerate().all(|(i, &k)| i == k) {
        kernel.weights().data().to_vec()
    } else {
        let kdims: Vec<usize> = order.iter().map(|&ka| kernel.extents()[ka]).collect();
        let src = kernel.weights();
        Tensor::from_fn(kdims, AxisRole::defaults(kernel.rank()), |c| {
            let mut src_coords = vec![0; c.len()];
            for (pos, &ka) in order.iter().enumerate() {
                src_coords[ka] = c[pos];
            }
            src.index(&src_coords).expect("permuted coordinate in range")
        })?
        .into_data()
    };
    let g = Geometry::new(pad4(input.dims(), 1), k_dims, pads, 1, 1)?;
    let out = engine_forward(&g, input.data(), &weights);
    Tensor::new(g.out_dims[..rank].to_vec(), input.roles().to_vec(), out)
}

/// 2D convolution of a rank-2 image, or slice by slice over the third axis of a rank-3 volume.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &KernelSpec<T>, opts: &ConvOptions) -> Result<Tensor<T>> {
    if kernel.rank() != 2 || !(2..=3).contains(&input.rank()) {
        return Err(Error::shape(format!(
            "conv2d needs a rank-2 kernel and rank-2/3 input, got {:?} and {:?}",
            kernel.extents(),
            input.dims()
        )));
    }
    conv_bound(input, kernel, opts)
}

/// 3D convolution. For a rank-4 input the kernel's third axis binds to depth by
/// default (per time point); use [`ConvOptions::temporal`] for a 2D+time kernel
/// applied per depth slice.
pub fn conv3d<T: Scalar>(input: &Tensor<T>, kernel: &KernelSpec<T>, opts: &ConvOptions) -> Result<Tensor<T>> {
    if kernel.rank() != 3 || !(3..=4).contains(&input.rank()) {
        return Err(Error::shape(format!(
            "conv3d needs a rank-3 kernel and rank-3/4 input, got {:?} and {:?}",
            kernel.extents(),
            input.dims()
        )));
    }
    conv_bound(input, kernel, opts)
}

/// Non-separable 4D convolution of an (X, Y, Z, T) tensor.
pub fn conv4d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &KernelSpec<T>,
    mode: Conv4dMode,
    opts: &ConvOptions,
) -> Result<Tensor<T>> {
    if kernel.rank() != 4 || input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv4d needs rank-4 input and kernel, got {:?} and {:?}",
            input.dims(),
            kernel.extents()
        )));
    }
    if opts.axis_map.is_some() {
        return Err(Error::config("conv4d binds kernel axes in order; axis_map unsupported"));
    }
    match mode {
        Conv4dMode::Direct => conv_bound(input, kernel, opts),
        Conv4dMode::Decomposed => conv4d_decomposed(input, kernel, opts.padding),
    }
}

/// `g''''(x,y,z,t) = Σ_k g'''(x, y, z + d̃ − k, t)` where each `g'''` convolves
/// one 2D+time slice volume with the kernel's k-th 2D+time sub-kernel.
fn conv4d_decomposed<T: Scalar>(input: &Tensor<T>, kernel: &KernelSpec<T>, padding: Padding) -> Result<Tensor<T>> {
    let pads = [padding; 4];
    let g = Geometry::new(pad4(input.dims(), 1), pad4(kernel.extents(), 1), pads, 1, 1)?;
    let [ox, oy, oz, ot] = g.out_dims;
    let (depth, kd) = (input.dims()[2], kernel.extents()[2]);
    let slices: Vec<Tensor<T>> = (0..depth).map(|z| input.slice_axis(2, z)).collect::<Result<_>>()?;
    let sub_kernels: Vec<KernelSpec<T>> = (0..kd)
        .map(|k| kernel.weights().slice_axis(2, k).map(KernelSpec::new))
        .collect::<Result<_>>()?;
    let slice_opts = ConvOptions {
        padding,
        axis_map: None,
    };
    let mut out = vec![T::zero(); ox * oy * oz * ot];
    for z in 0..oz {
        for k in g.taps(2, z) {
            let zi = z + g.shift[2] - k;
            let part = conv3d(&slices[zi], &sub_kernels[k], &slice_opts)?;
            let part = part.data();
            for x in 0..ox {
                for y in 0..oy {
                    let dst = ((x * oy + y) * oz + z) * ot;
                    let src = (x * oy + y) * ot;
                    for t in 0..ot {
                        out[dst + t] += part[src + t];
                    }
                }
            }
        }
    }
    Tensor::new(vec![ox, oy, oz, ot], input.roles().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Grouped 4D convolution layer.
// ---------------------------------------------------------------------------

fn check_grouped<T: Scalar>(input: &Tensor<T>, kernels: &[Tensor<T>; 3]) -> Result<()> {
    if input.rank() != 5 || input.dims()[2] != 3 {
        return Err(Error::shape(format!(
            "grouped 4D layer needs an (X, Y, 3, T, C) input, got {:?}",
            input.dims()
        )));
    }
    let cin = input.dims()[4];
    for k in kernels {
        if k.rank() != 5 || k.dims()[3] != cin || k.dims() != kernels[0].dims() {
            return Err(Error::shape(format!(
                "group kernels must be (w, h, p, {cin}, Cout), got {:?}",
                k.dims()
            )));
        }
    }
    Ok(())
}

/// The grouped 4D layer on a channels-last `(X, Y, 3, T, Cin)` input with three
/// `(w, h, p, Cin, Cout)` kernels. Group `j` sums the convolutions of its legal
/// slice volumes; the three group outputs are stacked back along depth.
pub fn grouped_conv4d_channels<T: Scalar>(
    input: &Tensor<T>,
    kernels: &[Tensor<T>; 3],
    sharing: GroupSharing,
    mode: Conv4dMode,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_grouped(input, kernels)?;
    let pads = [padding; 3];
    match mode {
        Conv4dMode::Decomposed => {
            let slices: Vec<Tensor<T>> = (0..3).map(|z| input.slice_axis(2, z)).collect::<Result<_>>()?;
            let mut groups = Vec::with_capacity(3);
            for j in 0..3 {
                let mut acc: Option<Tensor<T>> = None;
                for m in legal_slices(j) {
                    let part = conv_channels(&slices[m], &kernels[sharing.kernel_index(j, m)], &pads)?;
                    acc = Some(match acc {
                        None => part,
                        Some(mut a) => {
                            for (d, &s) in a.data_mut().iter_mut().zip(part.data()) {
                                *d += s;
                            }
                            a
                        }
                    });
                }
                groups.push(acc.expect("every group has a legal slice"));
            }
            Tensor::stack(&groups, 2, AxisRole::Depth)
        }
        Conv4dMode::Direct => {
            let pads4 = [padding, padding, Padding::Same, padding];
            let stacked = |idx: [usize; 3]| -> Result<Tensor<T>> {
                let parts: Vec<Tensor<T>> = idx.iter().map(|&i| kernels[i].clone()).collect();
                Tensor::stack(&parts, 2, AxisRole::Depth)
            };
            let mut groups = Vec::with_capacity(3);
            for j in 0..3 {
                // Depth tap k reads slice j + 1 - k.
                let idx = match sharing {
                    GroupSharing::PerGroup => [j, j, j],
                    GroupSharing::PerOffset => [0, 1, 2],
                };
                let full = conv_channels(input, &stacked(idx)?, &pads4)?;
                groups.push(full.slice_axis(2, j)?);
            }
            Tensor::stack(&groups, 2, AxisRole::Depth)
        }
    }
}

/// Gradients of [`grouped_conv4d_channels`]: `(grad_input, grad_kernels)`.
pub fn grouped_conv4d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &[Tensor<T>; 3],
    sharing: GroupSharing,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, [Tensor<T>; 3])> {
    check_grouped(input, kernels)?;
    let pads = [padding; 3];
    let slices: Vec<Tensor<T>> = (0..3).map(|z| input.slice_axis(2, z)).collect::<Result<_>>()?;
    let mut grad_slices: Vec<Tensor<T>> = slices.iter().map(Tensor::zeros_like).collect();
    let mut grad_k = [
        Tensor::zeros_like(&kernels[0]),
        Tensor::zeros_like(&kernels[1]),
        Tensor::zeros_like(&kernels[2]),
    ];
    for j in 0..3 {
        let go = grad_out.slice_axis(2, j)?;
        for m in legal_slices(j) {
            let kidx = sharing.kernel_index(j, m);
            let (gi, gw) = conv_channels_backward(&slices[m], &kernels[kidx], &pads, &go)?;
            for (d, &s) in grad_slices[m].data_mut().iter_mut().zip(gi.data()) {
                *d += s;
            }
            for (d, &s) in grad_k[kidx].data_mut().iter_mut().zip(gw.data()) {
                *d += s;
            }
        }
    }
    Ok((Tensor::stack(&grad_slices, 2, AxisRole::Depth)?, grad_k))
}

/// Single-channel grouped layer on an (X, Y, 3, T) input with three 2D+time kernels.
pub fn grouped_conv4d_layer<T: Scalar>(
    input: &Tensor<T>,
    kernels: &[KernelSpec<T>; 3],
    sharing: GroupSharing,
    mode: Conv4dMode,
    padding: Padding,
) -> Result<Tensor<T>> {
    if input.rank() != 4 || input.dims()[2] != 3 {
        return Err(Error::shape(format!(
            "grouped 4D layer needs depth extent 3, got {:?}",
            input.dims()
        )));
    }
    let mut dims = input.dims().to_vec();
    dims.push(1);
    let x = input.clone().reshape(dims, AxisRole::defaults(5))?;
    let ks = kernels
        .iter()
        .map(|k| {
            if k.rank() != 3 {
                return Err(Error::shape("group kernels must be rank-3 (w, h, p)"));
            }
            let mut d = k.extents().to_vec();
            d.extend([1, 1]);
            k.weights().clone().reshape(
                d,
                vec![
                    AxisRole::Width,
                    AxisRole::Height,
                    AxisRole::Time,
                    AxisRole::Channel,
                    AxisRole::Filter,
                ],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ks: [Tensor<T>; 3] = ks.try_into().expect("three kernels");
    let out = grouped_conv4d_channels(&x, &ks, sharing, mode, padding)?;
    out.squeeze_axis(4)
}

// ---------------------------------------------------------------------------
// Pooling, upsampling, activations.
// ---------------------------------------------------------------------------

/// Max pooling with non-overlapping windows. Also returns, per output element,
/// the input offset of the first maximum in row-major window order.
pub fn maxpool_with_indices<T: Scalar>(input: &Tensor<T>, pool: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    if pool.len() != input.rank() {
        return Err(Error::shape(format!(
            "{} pool sizes for rank {}",
            pool.len(),
            input.rank()
        )));
    }
    for (a, (&n, &p)) in input.dims().iter().zip(pool).enumerate() {
        if p == 0 || n % p != 0 {
            return Err(Error::shape(format!(
                "axis {a} extent {n} not divisible by pool size {p}"
            )));
        }
    }
    let out_dims: Vec<usize> = input.dims().iter().zip(pool).map(|(&n, &p)| n / p).collect();
    let in_strides = input.strides();
    let window: usize = pool.iter().product();
    let rank = input.rank();
    let mut argmax = Vec::with_capacity(out_dims.iter().product());
    let mut wcoord = vec![0usize; rank];
    let out = Tensor::from_fn(out_dims, input.roles().to_vec(), |c| {
        let mut best: Option<(T, usize)> = None;
        wcoord.iter_mut().for_each(|w| *w = 0);
        for _ in 0..window {
            let off: usize = (0..rank).map(|a| (c[a] * pool[a] + wcoord[a]) * in_strides[a]).sum();
            let v = input.data()[off];
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, off));
            }
            for a in (0..rank).rev() {
                wcoord[a] += 1;
                if wcoord[a] < pool[a] {
                    break;
                }
                wcoord[a] = 0;
            }
        }
        let (v, off) = best.expect("non-empty pooling window");
        argmax.push(off);
        v
    })?;
    Ok((out, argmax))
}

pub fn maxpool<T: Scalar>(input: &Tensor<T>, pool: &[usize]) -> Result<Tensor<T>> {
    maxpool_with_indices(input, pool).map(|(t, _)| t)
}

/// Nearest-neighbour upsampling of the first two (width, height) axes.
pub fn upsample2d<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    if input.rank() < 2 {
        return Err(Error::shape("upsample2d needs at least two axes"));
    }
    let mut dims = input.dims().to_vec();
    dims[0] *= factor;
    dims[1] *= factor;
    let inner: usize = input.dims()[2..].iter().product();
    let (h, nh) = (input.dims()[1], dims[1]);
    let mut data = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..nh {
            let src = ((x / factor) * h + y / factor) * inner;
            data.extend_from_slice(&input.data()[src..src + inner]);
        }
    }
    Tensor::new(dims, input.roles().to_vec(), data)
}

/// Sums the gradient of [`upsample2d`] back onto the source grid.
pub fn upsample2d_backward<T: Scalar>(grad_out: &Tensor<T>, input_dims: &[usize], factor: usize) -> Result<Tensor<T>> {
    let mut gi = Tensor::zeros(input_dims.to_vec(), grad_out.roles().to_vec())?;
    let inner: usize = input_dims[2..].iter().product();
    let (h, nh) = (input_dims[1], grad_out.dims()[1]);
    for x in 0..grad_out.dims()[0] {
        for y in 0..nh {
            let src = (x * nh + y) * inner;
            let dst = ((x / factor) * h + y / factor) * inner;
            for i in 0..inner {
                let g = grad_out.data()[src + i];
                gi.data_mut()[dst + i] += g;
            }
        }
    }
    Ok(gi)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Softmax { axis: usize },
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::LeakyRelu { alpha } => Ok(leaky_relu(input, alpha)),
        Activation::Softmax { axis } => softmax(input, axis),
    }
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64(alpha);
    input.map(|v| if v >= T::zero() { v } else { a * v })
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Softmax over `axis`, numerically stabilised by the per-vector maximum.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let n = *input
        .dims()
        .get(axis)
        .ok_or_else(|| Error::shape(format!("softmax axis {axis} beyond rank {}", input.rank())))?;
    let inner: usize = input.dims()[axis + 1..].iter().product();
    let outer: usize = input.dims()[..axis].iter().product();
    let mut out = input.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * n + c) * inner + i;
            let m = (0..n).map(|c| data[idx(c)]).fold(T::neg_infinity(), |a, b| a.max(b));
            let mut total = T::zero();
            for c in 0..n {
                let e = (data[idx(c)] - m).exp();
                data[idx(c)] = e;
                total += e;
            }
            for c in 0..n {
                data[idx(c)] = data[idx(c)] / total;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data).unwrap()
    }

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        t(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn delta(dims: &[usize]) -> KernelSpec<f64> {
        let centre: Vec<usize> = dims.iter().map(|&k| half_width(k)).collect();
        KernelSpec::new(
            Tensor::from_fn(dims.to_vec(), AxisRole::defaults(dims.len()), |c| {
                if c == centre.as_slice() {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap(),
        )
    }

    #[test]
    fn half_widths_use_floor() {
        let k = KernelSpec::new(t(&[3, 4, 1, 2], vec![0.0; 24]));
        assert_eq!(k.half_widths(), vec![1, 1, 0, 0]);
    }

    #[test]
    fn conv2d_ones() {
        let x = t(&[3, 3], vec![1.0; 9]);
        let k = KernelSpec::new(t(&[2, 2], vec![1.0; 4]));
        let y = conv2d(&x, &k, &ConvOptions::valid()).unwrap();
        assert_eq!(y.dims(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
        let id = KernelSpec::new(t(&[1, 1], vec![1.0]));
        assert_eq!(conv2d(&x, &id, &ConvOptions::valid()).unwrap(), x);
    }

    #[test]
    fn conv2d_slicewise_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[5, 5, 3], &mut rng);
        let kt = random(&[3, 3], &mut rng);
        let y = conv2d(&x, &KernelSpec::new(kt.clone()), &ConvOptions::valid()).unwrap();
        assert_eq!(y.dims(), &[3, 3, 3]);
        for z in 0..3 {
            for ox in 0..3 {
                for oy in 0..3 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            s += kt.index(&[i, j]).unwrap() * x.index(&[ox + 2 - i, oy + 2 - j, z]).unwrap();
                        }
                    }
                    assert!((y.index(&[ox, oy, z]).unwrap() - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv3d_cases() {
        let x = t(&[3, 3, 3], vec![1.0; 27]);
        let k = KernelSpec::new(t(&[3, 3, 3], vec![1.0; 27]));
        let y = conv3d(&x, &k, &ConvOptions::valid()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random(&[4, 5, 3, 2], &mut rng);
        assert_eq!(conv3d(&v, &delta(&[3, 3, 3]), &ConvOptions::same()).unwrap(), v);
        assert_eq!(
            conv3d(&v, &delta(&[3, 3, 3]), &ConvOptions::same().temporal()).unwrap(),
            v
        );
    }

    #[test]
    fn conv3d_rejects_double_binding() {
        let v = t(&[3, 3, 3, 3], vec![0.0; 81]);
        let k = KernelSpec::new(t(&[3, 3, 3], vec![0.0; 27]));
        let opts = ConvOptions::valid().with_axis_map(vec![0, 1, 1]);
        assert!(matches!(conv3d(&v, &k, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = t(&[2, 2], vec![0.0; 4]);
        let k = KernelSpec::new(t(&[3, 3], vec![0.0; 9]));
        assert!(matches!(conv2d(&x, &k, &ConvOptions::valid()), Err(Error::Shape(_))));
        assert!(conv2d(&x, &k, &ConvOptions::same()).is_ok());
    }

    #[test]
    fn conv4d_cases() {
        let x = t(&[3, 3, 3, 3], vec![1.0; 81]);
        let k = KernelSpec::new(t(&[3, 3, 3, 3], vec![1.0; 81]));
        for mode in [Conv4dMode::Direct, Conv4dMode::Decomposed] {
            let y = conv4d(&x, &k, mode, &ConvOptions::valid()).unwrap();
            assert_eq!(y.data(), &[81.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random(&[4, 4, 3, 5], &mut rng);
        for mode in [Conv4dMode::Direct, Conv4dMode::Decomposed] {
            let y = conv4d(&v, &delta(&[3, 3, 3, 3]), mode, &ConvOptions::same()).unwrap();
            assert!(y.max_abs_diff(&v) == 0.0);
        }
    }

    #[test]
    fn axis_map_permutation_matches_transposed_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[5, 4], &mut rng);
        let k = random(&[3, 2], &mut rng);
        let kt = Tensor::from_fn(vec![2, 3], AxisRole::defaults(2), |c| k.index(&[c[1], c[0]]).unwrap()).unwrap();
        let a = conv2d(&x, &KernelSpec::new(k), &ConvOptions::valid()).unwrap();
        let b = conv2d(
            &x,
            &KernelSpec::new(kt),
            &ConvOptions::valid().with_axis_map(vec![1, 0]),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grouped_layer_with_temporal_deltas_sums_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&[4, 3, 3, 5], &mut rng);
        let ks = [delta(&[3, 3, 3]), delta(&[3, 3, 3]), delta(&[3, 3, 3])];
        for mode in [Conv4dMode::Decomposed, Conv4dMode::Direct] {
            let y = grouped_conv4d_layer(&v, &ks, GroupSharing::PerGroup, mode, Padding::Same).unwrap();
            let s: Vec<Tensor<f64>> = (0..3).map(|z| v.slice_axis(2, z).unwrap()).collect();
            let expect = |zs: &[usize]| {
                let mut acc = Tensor::zeros_like(&s[0]);
                for &z in zs {
                    for (a, &b) in acc.data_mut().iter_mut().zip(s[z].data()) {
                        *a += b;
                    }
                }
                acc
            };
            assert!(y.slice_axis(2, 0).unwrap().max_abs_diff(&expect(&[0, 1])) < 1e-14);
            assert!(y.slice_axis(2, 1).unwrap().max_abs_diff(&expect(&[0, 1, 2])) < 1e-14);
            assert!(y.slice_axis(2, 2).unwrap().max_abs_diff(&expect(&[1, 2])) < 1e-14);
        }
    }

    #[test]
    fn grouped_layer_zero_kernels_and_depth_check() {
        let v = t(&[5, 5, 3, 4], vec![1.0; 300]);
        let z = KernelSpec::new(t(&[3, 3, 3], vec![0.0; 27]));
        let ks = [z.clone(), z.clone(), z];
        let y = grouped_conv4d_layer(&v, &ks, GroupSharing::PerGroup, Conv4dMode::Decomposed, Padding::Valid).unwrap();
        assert_eq!(y.dims(), &[3, 3, 3, 2]);
        assert!(y.data().iter().all(|&x| x == 0.0));
        let bad = t(&[5, 5, 2, 4], vec![1.0; 200]);
        assert!(grouped_conv4d_layer(
            &bad,
            &ks,
            GroupSharing::PerGroup,
            Conv4dMode::Decomposed,
            Padding::Valid
        )
        .is_err());
    }

    #[test]
    fn per_offset_grouped_layer_is_a_4d_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random(&[5, 4, 3, 6], &mut rng);
        let ks: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                random(&[3, 3, 3], &mut rng)
                    .reshape(vec![3, 3, 3], vec![AxisRole::Width, AxisRole::Height, AxisRole::Time])
                    .unwrap()
            })
            .collect();
        let k4 = Tensor::stack(&ks, 2, AxisRole::Depth).unwrap();
        let specs = [
            KernelSpec::new(ks[0].clone()),
            KernelSpec::new(ks[1].clone()),
            KernelSpec::new(ks[2].clone()),
        ];
        let g = grouped_conv4d_layer(
            &v,
            &specs,
            GroupSharing::PerOffset,
            Conv4dMode::Decomposed,
            Padding::Same,
        )
        .unwrap();
        let c = conv4d(&v, &KernelSpec::new(k4), Conv4dMode::Direct, &ConvOptions::same()).unwrap();
        assert!(g.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn maxpool_cases() {
        let x = t(&[4], vec![1.0, 5.0, 2.0, 8.0]);
        assert_eq!(maxpool(&x, &[2]).unwrap().data(), &[5.0, 8.0]);
        assert_eq!(maxpool(&x, &[1]).unwrap(), x);
        assert!(matches!(maxpool(&x, &[3]), Err(Error::Shape(m)) if m.contains("axis 0")));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random(&[2, 2, 1, 30], &mut rng);
        let mut y = v;
        for p in [2, 3, 5] {
            y = maxpool(&y, &[1, 1, 1, p]).unwrap();
        }
        assert_eq!(y.dims(), &[2, 2, 1, 1]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = t(&[4], vec![3.0, 3.0, 1.0, 1.0]);
        let (_, idx) = maxpool_with_indices(&x, &[4]).unwrap();
        assert_eq!(idx, vec![0]);
        let x = t(&[2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let (_, idx) = maxpool_with_indices(&x, &[2]).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn upsample_cases() {
        let x = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2d(&x, 2).unwrap();
        assert_eq!(y.dims(), &[4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(upsample2d(&x, 1).unwrap(), x);
        let z = t(&[4, 6, 3], vec![0.5; 72]);
        let back = upsample2d(&maxpool(&z, &[2, 2, 1]).unwrap(), 2).unwrap();
        assert_eq!(back.dims(), z.dims());
    }

    #[test]
    fn activation_cases() {
        let x = t(&[1], vec![-3.0]);
        assert_eq!(leaky_relu(&x, 1.0 / 3.0).data()[0], -1.0);
        let s = softmax(&t(&[3], vec![0.0, 0.0, 0.0]), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = activation(&t(&[3], vec![2f64.ln(), 0.0, 0.0]), Activation::Softmax { axis: 0 }).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.25).abs() < 1e-15);
        assert!(softmax(&x, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[6, 5, 3], &mut rng).map(|v| v * 10.0);
        let s = softmax(&x, 2).unwrap();
        for px in s.data().chunks(3) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(px.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn maxpool_commutes_with_leaky_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[4, 6, 2], &mut rng);
        for alpha in [0.0, 1.0 / 3.0, 1.0] {
            let a = maxpool(&leaky_relu(&x, alpha), &[2, 3, 1]).unwrap();
            let b = leaky_relu(&maxpool(&x, &[2, 3, 1]).unwrap(), alpha);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_is_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[6, 6, 4, 5], &mut rng);
        let k = KernelSpec::new(random(&[3, 3, 3, 3], &mut rng));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| conv4d(&x, &k, Conv4dMode::Direct, &ConvOptions::same()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
