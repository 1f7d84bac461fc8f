//! Tape-based reverse-mode differentiation over the layer operations.
//!
//! Every operation appends a node holding its output value and enough context
//! to route gradients back. `Tape::backward` walks the nodes in reverse.

use rand::Rng;

use crate::conv::{self, Conv4dMode, GroupSharing, Padding};
use crate::error::{Error, Result};
use crate::losses::{self, ClassProbImage, LabelImage, LossKind, WeightMap};
use crate::mask::NUM_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::{concat, AxisRole, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        pads: Vec<Padding>,
    },
    Grouped {
        x: Var,
        k: [Var; 3],
        sharing: GroupSharing,
        padding: Padding,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Sigmoid {
        x: Var,
    },
    Gate {
        a: Var,
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
    Loss {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros_like(like))
    }
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1 − rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (d, &s) in acc.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} was not recorded on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Channels-last convolution; `w` is `(k..., Cin, Cout)`.
    pub fn conv(&mut self, x: Var, w: Var, pads: &[Padding]) -> Result<Var> {
        let out = conv::conv_channels(&self.node(x)?.value, &self.node(w)?.value, pads)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                pads: pads.to_vec(),
            },
        ))
    }

    /// Grouped 4D layer on `(X, Y, 3, T, Cin)`.
    pub fn grouped4d(
        &mut self,
        x: Var,
        k: [Var; 3],
        sharing: GroupSharing,
        mode: Conv4dMode,
        padding: Padding,
    ) -> Result<Var> {
        let kernels = [
            self.node(k[0])?.value.clone(),
            self.node(k[1])?.value.clone(),
            self.node(k[2])?.value.clone(),
        ];
        let out = conv::grouped_conv4d_channels(&self.node(x)?.value, &kernels, sharing, mode, padding)?;
        Ok(self.push(out, Op::Grouped { x, k, sharing, padding }))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let bv = &self.node(b)?.value;
        let c = *xv.dims().last().expect("rank >= 1");
        if bv.len() != c {
            return Err(Error::shape(format!("bias of {} for {c} channels", bv.len())));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (d, &s) in chunk.iter_mut().zip(bv.data()) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        if av.dims() != bv.dims() {
            return Err(Error::shape(format!("add {:?} and {:?}", av.dims(), bv.dims())));
        }
        let mut out = av.clone();
        for (d, &s) in out.data_mut().iter_mut().zip(bv.data()) {
            *d += s;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x, factor }))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = conv::leaky_relu(&self.node(x)?.value, alpha);
        Ok(self.push(
            out,
            Op::LeakyRelu {
                x,
                alpha: T::from_f64(alpha),
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = conv::sigmoid(&self.node(x)?.value);
        Ok(self.push(out, Op::Sigmoid { x }))
    }

    /// Multiplies `x (..., C)` by single-channel coefficients `a (..., 1)`.
    pub fn gate(&mut self, a: Var, x: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let xv = &self.node(x)?.value;
        let c = *xv.dims().last().expect("rank >= 1");
        let (ad, xd) = (av.dims(), xv.dims());
        if ad.len() != xd.len() || ad[..ad.len() - 1] != xd[..xd.len() - 1] || ad[ad.len() - 1] != 1 {
            return Err(Error::shape(format!("gate {ad:?} cannot scale {xd:?}")));
        }
        let mut out = xv.clone();
        for (chunk, &g) in out.data_mut().chunks_mut(c).zip(av.data()) {
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, Op::Gate { a, x }))
    }

    pub fn maxpool(&mut self, x: Var, pool: &[usize]) -> Result<Var> {
        let (out, argmax) = conv::maxpool_with_indices(&self.node(x)?.value, pool)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = conv::upsample2d(&self.node(x)?.value, factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<Tensor<T>> = xs
            .iter()
            .map(|&v| self.node(v).map(|n| n.value.clone()))
            .collect::<Result<_>>()?;
        let out = concat(&parts, axis)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>, roles: Vec<AxisRole>) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(dims, roles)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = conv::softmax(xv, xv.rank() - 1)?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and scales
    /// survivors by `1/(1 − rate)`. Without an RNG the input passes through.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let xv = &self.node(x)?.value;
        let mask = dropout_mask(xv.len(), rate, rng);
        let mut out = xv.clone();
        for (d, &m) in out.data_mut().iter_mut().zip(&mask) {
            *d *= m;
        }
        Ok(self.push(out, Op::Mask { x, mask }))
    }

    /// Scalar `Σ w_i x_i`, mostly useful for probing gradients.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.len() != w.len() {
            return Err(Error::shape("weighted sum needs one weight per element"));
        }
        let s = xv.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let out = Tensor::from_vec(vec![1], vec![s])?;
        Ok(self.push(
            out,
            Op::WeightedSum {
                x,
                w: w.data().to_vec(),
            },
        ))
    }

    /// Scalar segmentation loss of an `(X, Y, NUM_CLASSES)` probability image.
    pub fn loss(&mut self, p: Var, kind: &LossKind, target: &LabelImage, weights: Option<&WeightMap>) -> Result<Var> {
        let pv = &self.node(p)?.value;
        if pv.rank() != 3 || pv.dims()[2] != NUM_CLASSES {
            return Err(Error::shape(format!(
                "loss expects (X, Y, {NUM_CLASSES}) probabilities, got {:?}",
                pv.dims()
            )));
        }
        let img = ClassProbImage::new(
            pv.dims()[0],
            pv.dims()[1],
            pv.data().iter().map(|&v| Scalar::to_f64(v)).collect(),
        )?;
        let (value, grad) = losses::loss_and_grad(kind, &img, target, weights)?;
        let out = Tensor::from_vec(vec![1], vec![T::from_f64(value)])?;
        Ok(self.push(
            out,
            Op::Loss {
                x: p,
                grad: grad.into_iter().map(T::from_f64).collect(),
            },
        ))
    }

    /// Backpropagates from a scalar `root` scaled by `seed`.
    pub fn backward(&self, root: Var, seed: T) -> Result<Gradients<T>> {
        let rv = &self.node(root)?.value;
        if rv.len() != 1 {
            return Err(Error::shape(format!(
                "backward from a non-scalar of extents {:?} needs an explicit upstream gradient",
                rv.dims()
            )));
        }
        let g = Tensor::new(rv.dims().to_vec(), rv.roles().to_vec(), vec![seed])?;
        self.backward_with(root, g)
    }

    /// Backpropagates an upstream gradient shaped like `root`'s value.
    pub fn backward_with(&self, root: Var, upstream: Tensor<T>) -> Result<Gradients<T>> {
        let rv = &self.node(root)?.value;
        if rv.dims() != upstream.dims() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.dims(),
                rv.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(upstream);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, pads } => {
                    let (gx, gw) =
                        conv::conv_channels_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, pads, &g)?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::Grouped { x, k, sharing, padding } => {
                    let kernels = [
                        self.nodes[k[0].0].value.clone(),
                        self.nodes[k[1].0].value.clone(),
                        self.nodes[k[2].0].value.clone(),
                    ];
                    let (gx, gk) =
                        conv::grouped_conv4d_backward(&self.nodes[x.0].value, &kernels, *sharing, *padding, &g)?;
                    accumulate(&mut grads[x.0], gx);
                    for (kv, gkv) in k.iter().zip(gk) {
                        accumulate(&mut grads[kv.0], gkv);
                    }
                }
                Op::AddBias { x, b } => {
                    let bv = &self.nodes[b.0].value;
                    let c = bv.len();
                    let mut gb = Tensor::zeros_like(bv);
                    for chunk in g.data().chunks(c) {
                        for (d, &s) in gb.data_mut().iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads[x.0], g.map(|v| v * f));
                }
                Op::LeakyRelu { x, alpha } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g;
                    for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v < T::zero() {
                            *d *= *alpha;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g;
                    for (d, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= s * (T::one() - s);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gate { a, x } => {
                    let av = &self.nodes[a.0].value;
                    let xv = &self.nodes[x.0].value;
                    let c = *xv.dims().last().expect("rank >= 1");
                    let mut ga = Tensor::zeros_like(av);
                    let mut gx = g.clone();
                    for (((gx_c, g_c), x_c), (ga_v, &a_v)) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(xv.data().chunks(c))
                        .zip(ga.data_mut().iter_mut().zip(av.data()))
                    {
                        *ga_v = g_c.iter().zip(x_c).map(|(&p, &q)| p * q).sum();
                        gx_c.iter_mut().for_each(|v| *v *= a_v);
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros_like(&self.nodes[x.0].value);
                    for (&off, &v) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[off] += v;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Upsample { x, factor } => {
                    let gx = conv::upsample2d_backward(&g, self.nodes[x.0].value.dims(), *factor)?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Concat { xs, axis } => {
                    let sizes: Vec<usize> = xs.iter().map(|v| self.nodes[v.0].value.dims()[*axis]).collect();
                    let parts = g.split(*axis, &sizes)?;
                    for (v, part) in xs.iter().zip(parts) {
                        let like = &self.nodes[v.0].value;
                        let part = part.reshape(like.dims().to_vec(), like.roles().to_vec())?;
                        accumulate(&mut grads[v.0], part);
                    }
                }
                Op::Reshape { x } => {
                    let like = &self.nodes[x.0].value;
                    accumulate(&mut grads[x.0], g.reshape(like.dims().to_vec(), like.roles().to_vec())?);
                }
                Op::Softmax { x } => {
                    let c = *node.value.dims().last().expect("rank >= 1");
                    let mut gx = g.clone();
                    for ((d, gv), p) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(node.value.data().chunks(c))
                    {
                        let dot: T = gv.iter().zip(p).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &pi) in d.iter_mut().zip(gv).zip(p) {
                            *o = pi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mask { x, mask } => {
                    let mut gx = g;
                    for (d, &m) in gx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::WeightedSum { x, w } | Op::Loss { x, grad: w } => {
                    let up = g.data()[0];
                    let like = &self.nodes[x.0].value;
                    let gx = Tensor::new(
                        like.dims().to_vec(),
                        like.roles().to_vec(),
                        w.iter().map(|&v| v * up).collect(),
                    )?;
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::OUTSIDE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], roles: Vec<AxisRole>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            roles,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn roles(r: &[AxisRole]) -> Vec<AxisRole> {
        r.to_vec()
    }

    use AxisRole::{Channel as C, Depth as D, Filter as F, Height as H, Time as Tm, Width as W};

    /// Checks d(build)/d(leaf) by central differences on `coords` random coordinates of every leaf.
    fn gradcheck(
        leaves: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
        coords: usize,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |ls: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|l| tape.leaf(l.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(out, 1.0).unwrap();
        let h = 1e-3;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros_like(leaf));
            for _ in 0..coords {
                let k = rng.random_range(0..leaf.len());
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let scale = a.abs().max(fd.abs());
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-5 * scale || err <= 1e-9,
                    "leaf {li} coord {k}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[5, 5, 2], roles(&[W, H, C]), &mut rng));
        let w = tape.leaf(rand_tensor(&[3, 3, 2, 4], roles(&[W, H, C, F]), &mut rng));
        let y = tape.conv(x, w, &[Padding::Same; 2]).unwrap();
        let upstream = Tensor::zeros_like(tape.value(y));
        let g = tape.backward_with(y, upstream).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_weight_gradient_is_input_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&[4, 3, 1], roles(&[W, H, C]), &mut rng);
        let total: f64 = input.data().iter().sum();
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1], roles(&[W, H, C, F]), vec![0.7]).unwrap());
        let y = tape.conv(x, w, &[Padding::Valid; 2]).unwrap();
        let ones = Tensor::full(vec![12], vec![W], 1.0).unwrap();
        let s = tape.weighted_sum(y, &ones).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert!((g.get(w).unwrap().data()[0] - total).abs() < 1e-12);
    }

    #[test]
    fn foreign_variable_is_a_state_error() {
        let tape: Tape<f64> = Tape::new();
        assert!(matches!(tape.backward(Var(3), 1.0), Err(Error::State(_))));
    }

    fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = tape.value(y);
        let w = rand_tensor(v.dims(), v.roles().to_vec(), &mut rng);
        tape.weighted_sum(y, &w)
    }

    #[test]
    fn gradcheck_conv_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 2D, valid and same.
        for pad in [Padding::Valid, Padding::Same] {
            gradcheck(
                vec![
                    rand_tensor(&[6, 5, 2], roles(&[W, H, C]), &mut rng),
                    rand_tensor(&[3, 3, 2, 3], roles(&[W, H, C, F]), &mut rng),
                ],
                move |t, v| {
                    let y = t.conv(v[0], v[1], &[pad; 2])?;
                    probe(t, y, 10)
                },
                20,
                4,
            );
        }
        // 3D with mixed padding, as used to collapse depth.
        gradcheck(
            vec![
                rand_tensor(&[5, 4, 3, 2], roles(&[W, H, D, C]), &mut rng),
                rand_tensor(&[3, 3, 3, 2, 2], roles(&[W, H, D, C, F]), &mut rng),
            ],
            |t, v| {
                let y = t.conv(v[0], v[1], &[Padding::Same, Padding::Same, Padding::Valid])?;
                probe(t, y, 11)
            },
            20,
            5,
        );
        // 4D.
        gradcheck(
            vec![
                rand_tensor(&[4, 4, 3, 4, 1], roles(&[W, H, D, Tm, C]), &mut rng),
                rand_tensor(&[3, 3, 3, 3, 1, 2], roles(&[W, H, D, Tm, C, F]), &mut rng),
            ],
            |t, v| {
                let y = t.conv(v[0], v[1], &[Padding::Same; 4])?;
                probe(t, y, 12)
            },
            20,
            6,
        );
    }

    #[test]
    fn gradcheck_grouped_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for sharing in [GroupSharing::PerGroup, GroupSharing::PerOffset] {
            let kr = roles(&[W, H, Tm, C, F]);
            gradcheck(
                vec![
                    rand_tensor(&[4, 4, 3, 4, 2], roles(&[W, H, D, Tm, C]), &mut rng),
                    rand_tensor(&[3, 3, 3, 2, 2], kr.clone(), &mut rng),
                    rand_tensor(&[3, 3, 3, 2, 2], kr.clone(), &mut rng),
                    rand_tensor(&[3, 3, 3, 2, 2], kr, &mut rng),
                ],
                move |t, v| {
                    let y = t.grouped4d(v[0], [v[1], v[2], v[3]], sharing, Conv4dMode::Decomposed, Padding::Same)?;
                    probe(t, y, 13)
                },
                20,
                8,
            );
        }
    }

    #[test]
    fn gradcheck_pool_upsample_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        gradcheck(
            vec![{
                // Well-separated values so no window has a near tie.
                use rand::seq::SliceRandom;
                let mut vals: Vec<f64> = (0..192).map(|i| i as f64 * 0.01).collect();
                vals.shuffle(&mut rng);
                Tensor::new(vec![4, 4, 6, 2], roles(&[W, H, Tm, C]), vals).unwrap()
            }],
            |t, v| {
                let y = t.maxpool(v[0], &[2, 2, 3, 1])?;
                probe(t, y, 14)
            },
            20,
            10,
        );
        gradcheck(
            vec![rand_tensor(&[3, 2, 2], roles(&[W, H, C]), &mut rng)],
            |t, v| {
                let y = t.upsample(v[0], 2)?;
                probe(t, y, 15)
            },
            12,
            11,
        );
        gradcheck(
            vec![rand_tensor(&[5, 4, 3], roles(&[W, H, C]), &mut rng)],
            |t, v| {
                let y = t.leaky_relu(v[0], 1.0 / 3.0)?;
                probe(t, y, 16)
            },
            20,
            12,
        );
        gradcheck(
            vec![rand_tensor(&[5, 4, 3], roles(&[W, H, C]), &mut rng)],
            |t, v| {
                let y = t.softmax(v[0])?;
                probe(t, y, 17)
            },
            20,
            13,
        );
        gradcheck(
            vec![
                rand_tensor(&[5, 4, 3], roles(&[W, H, C]), &mut rng),
                rand_tensor(&[3], roles(&[C]), &mut rng),
            ],
            |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.sigmoid(y)?;
                probe(t, y, 18)
            },
            20,
            14,
        );
        gradcheck(
            vec![
                rand_tensor(&[3, 3, 2], roles(&[W, H, C]), &mut rng),
                rand_tensor(&[3, 3, 3], roles(&[W, H, C]), &mut rng),
            ],
            |t, v| {
                let y = t.concat(&[v[0], v[1]], 2)?;
                let y = t.reshape(y, vec![9, 5], roles(&[W, C]))?;
                probe(t, y, 19)
            },
            20,
            15,
        );
    }

    #[test]
    fn gradcheck_gate_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        gradcheck(
            vec![
                rand_tensor(&[4, 4, 1], roles(&[W, H, C]), &mut rng),
                rand_tensor(&[4, 4, 3], roles(&[W, H, C]), &mut rng),
            ],
            |t, v| {
                let a = t.sigmoid(v[0])?;
                let y = t.gate(a, v[1])?;
                probe(t, y, 20)
            },
            20,
            16,
        );
        gradcheck(
            vec![rand_tensor(&[6, 6, 2], roles(&[W, H, C]), &mut rng)],
            |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                let y = t.dropout(v[0], 0.5, Some(&mut r))?;
                probe(t, y, 21)
            },
            20,
            17,
        );
    }

    #[test]
    fn gradcheck_losses_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let labels: Vec<u8> = (0..20)
            .map(|i| if i % 7 == 3 { OUTSIDE } else { (i % 3) as u8 })
            .collect();
        let target = LabelImage::new(5, 4, labels).unwrap();
        let weights = WeightMap {
            weights: (0..60).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        for kind in [
            LossKind::focal_tversky_default(),
            LossKind::SoftDice,
            LossKind::Dice,
            LossKind::WeightedCce,
        ] {
            let (target, weights) = (target.clone(), weights.clone());
            gradcheck(
                vec![rand_tensor(&[5, 4, 3], roles(&[W, H, C]), &mut rng)],
                move |t, v| {
                    let p = t.softmax(v[0])?;
                    t.loss(p, &kind, &target, Some(&weights))
                },
                20,
                18,
            );
        }
    }
}
