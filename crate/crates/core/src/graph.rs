//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! is a valid topological order for the backward pass. Every op is generic
//! over the scalar, which lets the same graph run in [`Dual`](crate::dual::Dual)
//! arithmetic for Hessian-vector products.

use crate::render::{composite_ray, composite_ray_backward, COMPOSITE_WIDTH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Softplus,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Unary(NodeId, Unary<T>),
    Sum(NodeId),
    ConcatCols(NodeId, NodeId),
    RepeatRows(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    SelectCols(NodeId, usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: Conv2dSpec,
    },
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    Blur(NodeId, Vec<T>),
    Composite {
        sigma: NodeId,
        rgb: NodeId,
        t: Vec<T>,
        delta: Vec<T>,
        background: [T; 3],
        samples: usize,
        weights: Vec<T>,
    },
    MaskedStandardize {
        x: NodeId,
        mask: Vec<bool>,
        std: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node; `None` for nodes that do not need one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that gradients are tracked for.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        match *self.shape(id) {
            [m, n] => (m, n),
            [n] => (1, n),
            ref s => panic!("expected a matrix, got shape {s:?}"),
        }
    }

    fn dims3(&self, id: NodeId) -> (usize, usize, usize) {
        match *self.shape(id) {
            [c, h, w] => (c, h, w),
            ref s => panic!("expected [C, H, W], got shape {s:?}"),
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(b).len(), n, "add_row width");
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &v) in row.iter_mut().zip(bv) {
                *o += v;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::AddRow(a, b),
            &[a, b],
        )
    }

    /// `a[m, n] * b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(b).len(), n, "mul_row width");
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &v) in row.iter_mut().zip(bv) {
                *o *= v;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MulRow(a, b),
            &[a, b],
        )
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn unary(&mut self, a: NodeId, kind: Unary<T>) -> NodeId {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Relu => Box::new(|x: T| x.max(T::zero())),
            Unary::LeakyRelu(s) => Box::new(move |x: T| if x >= T::zero() { x } else { x * s }),
            Unary::Softplus => Box::new(|x: T| x.softplus()),
            Unary::Sigmoid => Box::new(|x: T| x.sigmoid()),
            Unary::Tanh => Box::new(|x: T| x.tanh()),
            Unary::Abs => Box::new(|x: T| x.abs()),
            Unary::Square => Box::new(|x: T| x * x),
            Unary::Exp => Box::new(|x: T| x.exp()),
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(a, kind), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ----- reshaping --------------------------------------------------------

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, p) = self.dims2(a);
        let (m2, q) = self.dims2(b);
        assert_eq!(m, m2, "concat_cols rows");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        self.push(
            Tensor::new(vec![m, p + q], out).unwrap(),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// Tiles a vector `[n]` into `[m, n]`.
    pub fn repeat_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let row = self.value(a).data().to_vec();
        let n = row.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::RepeatRows(a),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], out).unwrap(),
            Op::Transpose(a),
            &[a],
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn select_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.dims2(a);
        assert!(start + len <= n, "select_cols out of range");
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        self.push(
            Tensor::new(vec![m, len], out).unwrap(),
            Op::SelectCols(a, start),
            &[a],
        )
    }

    // ----- images -------------------------------------------------------------

    /// `x[C, H, W] ⋆ w[O, C, K, K] (+ b[O]) → [O, H', W']`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> NodeId {
        let (c, h, wd) = self.dims3(x);
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?}");
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = conv_out(h, wd, k, spec);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); o * ho * wo];
        for oc in 0..o {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((oc * c + ic) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    plane[oy * wo + ox] += wt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv bias");
            for (oc, plane) in out.chunks_exact_mut(ho * wo).enumerate() {
                for v in plane {
                    *v += bv[oc];
                }
            }
        }
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::new(vec![o, ho, wo], out).unwrap(),
            Op::Conv2d { x, w, b, spec },
            &inputs,
        )
    }

    /// 2×2 average pooling (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * ho + y) * wo + xx] = s * q;
                }
            }
        }
        self.push(
            Tensor::new(vec![c, ho, wo], out).unwrap(),
            Op::AvgPool2(x),
            &[x],
        )
    }

    /// `[C, H, W] → [C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let inv = T::one() / T::lit((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::new(vec![c], out).unwrap(),
            Op::GlobalAvgPool(x),
            &[x],
        )
    }

    /// Depthwise separable filtering with a 1-D kernel, valid region only.
    pub fn blur(&mut self, x: NodeId, kernel: &[T]) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let k = kernel.len();
        assert!(h >= k && w >= k, "blur kernel larger than image");
        let (ho, wo) = (h - k + 1, w - k + 1);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        let mut tmp = vec![T::zero(); h * wo];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..wo {
                    tmp[y * wo + xx] = (0..k).map(|a| kernel[a] * plane[y * w + xx + a]).sum();
                }
            }
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] =
                        (0..k).map(|a| kernel[a] * tmp[(y + a) * wo + xx]).sum();
                }
            }
        }
        self.push(
            Tensor::new(vec![c, ho, wo], out).unwrap(),
            Op::Blur(x, kernel.to_vec()),
            &[x],
        )
    }

    // ----- fused ops ----------------------------------------------------------

    /// Front-to-back alpha compositing of `rays` rays with `samples` samples
    /// each. `sigma` holds `rays·samples` densities, `rgb` the matching colors
    /// as `[rays·samples, 3]`; `t`/`delta` are the sample distances and
    /// interval lengths. Output is `[rays, 5]` = (r, g, b, depth, weight sum).
    pub fn composite(
        &mut self,
        sigma: NodeId,
        rgb: NodeId,
        t: Vec<T>,
        delta: Vec<T>,
        samples: usize,
        background: [T; 3],
    ) -> NodeId {
        let n = self.value(sigma).len();
        assert!(samples > 0 && n % samples == 0, "composite sample count");
        assert_eq!(self.value(rgb).len(), 3 * n, "composite colors");
        assert!(t.len() == n && delta.len() == n, "composite distances");
        let rays = n / samples;
        let sv = self.value(sigma).data();
        let cv = self.value(rgb).data();
        let mut weights = vec![T::zero(); n];
        let mut out = Vec::with_capacity(rays * COMPOSITE_WIDTH);
        for r in 0..rays {
            let s = r * samples..(r + 1) * samples;
            let o = composite_ray(
                &sv[s.clone()],
                &cv[3 * s.start..3 * s.end],
                &t[s.clone()],
                &delta[s.clone()],
                background,
                &mut weights[s],
            );
            out.extend_from_slice(&o);
        }
        self.push(
            Tensor::new(vec![rays, COMPOSITE_WIDTH], out).unwrap(),
            Op::Composite {
                sigma,
                rgb,
                t,
                delta,
                background,
                samples,
                weights,
            },
            &[sigma, rgb],
        )
    }

    /// Standardizes the masked entries to zero mean / unit variance and
    /// zeroes the rest. The mask is a constant.
    pub fn masked_standardize(&mut self, x: NodeId, mask: &[bool], eps: T) -> NodeId {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), mask.len(), "mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let shape = self.shape(x).to_vec();
        if count == 0 {
            let z = Tensor::zeros(&shape);
            return self.push(
                z,
                Op::MaskedStandardize {
                    x,
                    mask: mask.to_vec(),
                    std: T::one(),
                },
                &[x],
            );
        }
        let inv_n = T::one() / T::lit(count as f64);
        let mean = xv.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum::<T>() * inv_n;
        let var = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v - mean) * (v - mean))
            .sum::<T>()
            * inv_n;
        let std = (var + eps).sqrt();
        let data = xv
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { (v - mean) / std } else { T::zero() })
            .collect();
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::MaskedStandardize {
                x,
                mask: mask.to_vec(),
                std,
            },
            &[x],
        )
    }

    // ----- backward -----------------------------------------------------------

    /// Backpropagates from `root`, seeding it with ones.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        let seed = Tensor::full(self.shape(root), T::one());
        self.backward_seeded(root, seed)
    }

    pub fn backward_seeded(&self, root: NodeId, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let like = |id: NodeId, data: Vec<T>| Tensor::new(self.shape(id).to_vec(), data).unwrap();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let (_, n) = self.dims2(b);
                if self.wants(a) {
                    // gA = G · Bᵀ
                    let bv = self.value(b).data();
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, like(a, ga));
                }
                if self.wants(b) {
                    // gB = Aᵀ · G
                    let av = self.value(a).data();
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let out = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in out.iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, b, like(b, gb));
                }
            }
            &Op::AddRow(a, b) => {
                let (_, n) = self.dims2(a);
                if self.wants(b) {
                    let mut gb = vec![T::zero(); n];
                    for row in gd.chunks_exact(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, b, like(b, gb));
                }
                self.accumulate(grads, a, like(a, gd.to_vec()));
            }
            &Op::MulRow(a, b) => {
                let (_, n) = self.dims2(a);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let ga = gd
                        .chunks_exact(n)
                        .flat_map(|row| row.iter().zip(bv).map(|(&g, &s)| g * s))
                        .collect();
                    self.accumulate(grads, a, like(a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); n];
                    for (grow, arow) in gd.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((o, &g), &x) in gb.iter_mut().zip(grow).zip(arow) {
                            *o += g * x;
                        }
                    }
                    self.accumulate(grads, b, like(b, gb));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, like(a, gd.to_vec()));
                self.accumulate(grads, b, like(b, gd.to_vec()));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, like(a, gd.to_vec()));
                if self.wants(b) {
                    self.accumulate(grads, b, like(b, gd.iter().map(|&v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, a, like(a, ga));
                }
                if self.wants(b) {
                    let gb = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, b, like(b, gb));
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = gd.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                    self.accumulate(grads, a, like(a, ga));
                }
                if self.wants(b) {
                    let gb = gd
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, b, like(b, gb));
                }
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, like(a, gd.iter().map(|&v| v * c).collect()));
            }
            &Op::AddScalar(a) => {
                self.accumulate(grads, a, like(a, gd.to_vec()));
            }
            &Op::Unary(a, kind) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let one = T::one();
                let ga: Vec<T> = gd
                    .iter()
                    .zip(x)
                    .zip(y)
                    .map(|((&g, &xi), &yi)| {
                        g * match kind {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    one
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xi >= T::zero() {
                                    one
                                } else {
                                    s
                                }
                            }
                            Unary::Softplus => xi.sigmoid(),
                            Unary::Sigmoid => yi * (one - yi),
                            Unary::Tanh => one - yi * yi,
                            Unary::Abs => {
                                if xi > T::zero() {
                                    one
                                } else if xi < T::zero() {
                                    -one
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => T::lit(2.0) * xi,
                            Unary::Exp => yi,
                        }
                    })
                    .collect();
                self.accumulate(grads, a, like(a, ga));
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, like(a, vec![gd[0]; n]));
            }
            &Op::ConcatCols(a, b) => {
                let (m, p) = self.dims2(a);
                let (_, q) = self.dims2(b);
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in gd.chunks_exact(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                self.accumulate(grads, a, like(a, ga));
                self.accumulate(grads, b, like(b, gb));
            }
            &Op::RepeatRows(a) => {
                let n = self.value(a).len();
                let mut ga = vec![T::zero(); n];
                for row in gd.chunks_exact(n) {
                    for (o, &v) in ga.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, a, like(a, ga));
            }
            &Op::Reshape(a) => {
                self.accumulate(grads, a, like(a, gd.to_vec()));
            }
            &Op::Transpose(a) => {
                let (m, n) = self.dims2(a);
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gd[j * m + i];
                    }
                }
                self.accumulate(grads, a, like(a, ga));
            }
            &Op::SelectCols(a, start) => {
                let (m, n) = self.dims2(a);
                let len = node.value.shape()[1];
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, a, like(a, ga));
            }
            &Op::Conv2d { x, w, b, spec } => self.conv2d_backward(x, w, b, spec, g, grads),
            &Op::AvgPool2(x) => {
                let (c, h, w) = self.dims3(x);
                let (ho, wo) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = gd[(ch * ho + y) * wo + xx] * q;
                            let base = ch * h * w;
                            gx[base + 2 * y * w + 2 * xx] += v;
                            gx[base + 2 * y * w + 2 * xx + 1] += v;
                            gx[base + (2 * y + 1) * w + 2 * xx] += v;
                            gx[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.dims3(x);
                let inv = T::one() / T::lit((h * w) as f64);
                let gx = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(h * w))
                    .collect();
                self.accumulate(grads, x, like(x, gx));
            }
            Op::Blur(x, kernel) => {
                let x = *x;
                let (c, h, w) = self.dims3(x);
                let k = kernel.len();
                let (ho, wo) = (h - k + 1, w - k + 1);
                let mut gx = vec![T::zero(); c * h * w];
                let mut tmp = vec![T::zero(); h * wo];
                for ch in 0..c {
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    for y in 0..ho {
                        for xx in 0..wo {
                            let gv = gd[(ch * ho + y) * wo + xx];
                            for (a, &kv) in kernel.iter().enumerate() {
                                tmp[(y + a) * wo + xx] += kv * gv;
                            }
                        }
                    }
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..wo {
                            let tv = tmp[y * wo + xx];
                            for (a, &kv) in kernel.iter().enumerate() {
                                plane[y * w + xx + a] += kv * tv;
                            }
                        }
                    }
                }
                self.accumulate(grads, x, like(x, gx));
            }
            Op::Composite {
                sigma,
                rgb,
                t,
                delta,
                background,
                samples,
                weights,
            } => {
                let (sigma, rgb, samples) = (*sigma, *rgb, *samples);
                let n = t.len();
                let sv = self.value(sigma).data();
                let cv = self.value(rgb).data();
                let mut gs = vec![T::zero(); n];
                let mut gc = vec![T::zero(); 3 * n];
                for (r, gout) in gd.chunks_exact(COMPOSITE_WIDTH).enumerate() {
                    let s = r * samples..(r + 1) * samples;
                    let (gs_r, gc_r) = (&mut gs[s.clone()], &mut gc[3 * s.start..3 * s.end]);
                    composite_ray_backward(
                        &sv[s.clone()],
                        &cv[3 * s.start..3 * s.end],
                        &t[s.clone()],
                        &delta[s.clone()],
                        *background,
                        &weights[s.clone()],
                        gout,
                        gs_r,
                        gc_r,
                    );
                }
                self.accumulate(grads, sigma, like(sigma, gs));
                self.accumulate(grads, rgb, like(rgb, gc));
            }
            Op::MaskedStandardize { x, mask, std } => {
                let x = *x;
                let count = mask.iter().filter(|&&m| m).count();
                let mut gx = vec![T::zero(); mask.len()];
                if count > 0 {
                    let y = node.value.data();
                    let inv_n = T::one() / T::lit(count as f64);
                    let mut mean_g = T::zero();
                    let mut mean_gy = T::zero();
                    for ((&gv, &yv), &m) in gd.iter().zip(y).zip(mask) {
                        if m {
                            mean_g += gv;
                            mean_gy += gv * yv;
                        }
                    }
                    mean_g *= inv_n;
                    mean_gy *= inv_n;
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            gx[i] = (gd[i] - mean_g - y[i] * mean_gy) / *std;
                        }
                    }
                }
                self.accumulate(grads, x, like(x, gx));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: Conv2dSpec,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (c, h, wd) = self.dims3(x);
        let ws = self.shape(w);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = conv_out(h, wd, k, spec);
        let gd = g.data();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut gx = vec![T::zero(); if want_x { c * h * wd } else { 0 }];
        let mut gw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
        for oc in 0..o {
            let gplane = &gd[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wt = wv[widx];
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ic * h * wd + iy as usize * wd;
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let gv = gplane[oy * wo + ox];
                                if want_w {
                                    acc += gv * xv[base + ix as usize];
                                }
                                if want_x {
                                    gx[base + ix as usize] += gv * wt;
                                }
                            }
                        }
                        if want_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), gx).unwrap());
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(ws.to_vec(), gw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                let gb = gd
                    .chunks_exact(ho * wo)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                self.accumulate(grads, b, Tensor::new(vec![o], gb).unwrap());
            }
        }
    }
}

pub fn conv_out(h: usize, w: usize, k: usize, spec: Conv2dSpec) -> (usize, usize) {
    let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
    (ho, wo)
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d sum(f(x)) / dx` for one input tensor.
    fn check(
        x0: Tensor<f64>,
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let root = g.sum(y);
        let grads = g.backward(root);
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = build(&mut g, x);
                let s = g.sum(y);
                g.scalar(s)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
            assert!(err < tol, "element {i}: fd {fd} vs analytic {an}");
        }
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f64 * 0.7).sin() + 0.1) * scale).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_and_bias() {
        let w = ramp(&[3, 4], 0.5);
        check(ramp(&[2, 3], 1.0), move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]));
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            g.square(y)
        }, 1e-6);
        let x = ramp(&[2, 3], 1.0);
        check(ramp(&[3, 4], 0.5), move |g, w| {
            let x = g.constant(x.clone());
            let y = g.matmul(x, w);
            g.tanh(y)
        }, 1e-6);
    }

    #[test]
    fn elementwise_ops() {
        let other = ramp(&[6], 2.0).map(|v| v + 3.0);
        check(ramp(&[6], 1.0), move |g, x| {
            let o = g.constant(other.clone());
            let a = g.mul(x, o);
            let b = g.div(a, o);
            let c = g.sub(b, x);
            let d = g.add(c, x);
            let e = g.softplus(d);
            let f = g.sigmoid(e);
            let h = g.leaky_relu(x, 0.2);
            let q = g.mul(f, h);
            let q = g.add_scalar(q, 0.3);
            g.scale(q, -1.5)
        }, 1e-6);
    }

    #[test]
    fn division_denominator() {
        let num = ramp(&[5], 1.0);
        check(ramp(&[5], 1.0).map(|v| v + 2.0), move |g, d| {
            let n = g.constant(num.clone());
            g.div(n, d)
        }, 1e-6);
    }

    #[test]
    fn row_broadcasts_and_reshapes() {
        check(ramp(&[4], 1.0), |g, v| {
            let m = g.constant(ramp(&[3, 4], 1.0));
            let a = g.mul_row(m, v);
            let r = g.repeat_rows(v, 3);
            let s = g.add(a, r);
            let c = g.concat_cols(s, m);
            let t = g.transpose(c);
            let sel = g.transpose(t);
            let sel = g.select_cols(sel, 2, 4);
            let sq = g.square(sel);
            g.reshape(sq, &[12])
        }, 1e-6);
    }

    #[test]
    fn conv_pool_blur() {
        let w = ramp(&[4, 2, 3, 3], 0.3);
        let b = Tensor::from_vec(vec![0.1, 0.0, -0.1, 0.2]);
        check(ramp(&[2, 6, 6], 1.0), move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, Some(b), Conv2dSpec { stride: 2, padding: 1 });
            let y = g.square(y);
            let p = g.avg_pool2(y);
            g.global_avg_pool(p)
        }, 1e-6);
        let x = ramp(&[2, 5, 5], 1.0);
        check(ramp(&[3, 2, 3, 3], 0.3), move |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 1 });
            g.square(y)
        }, 1e-6);
        check(ramp(&[2, 7, 6], 1.0), |g, x| {
            let y = g.blur(x, &[0.2, 0.5, 0.3]);
            g.square(y)
        }, 1e-6);
    }

    #[test]
    fn masked_standardize_gradient() {
        let mask = vec![true, true, false, true, true, false, true];
        check(ramp(&[7], 1.5), move |g, x| {
            let y = g.masked_standardize(x, &mask, 1e-4);
            let w = g.constant(ramp(&[7], 1.0).map(|v| v * v + 0.2));
            g.mul(y, w)
        }, 1e-5);
    }

    #[test]
    fn composite_gradient() {
        let t: Vec<f64> = vec![1.0, 1.2, 1.4, 1.0, 1.3, 1.5];
        let delta = vec![0.2, 0.2, 0.1, 0.3, 0.2, 0.1];
        let colors = ramp(&[6, 3], 0.5).map(|v| v.abs());
        let w = ramp(&[2, 5], 1.0);
        let (t1, d1) = (t.clone(), delta.clone());
        check(ramp(&[6], 2.0).map(|v| v.abs() + 0.5), move |g, sigma| {
            let c = g.constant(colors.clone());
            let out = g.composite(sigma, c, t1.clone(), d1.clone(), 3, [0.2, 0.4, 0.9]);
            let w = g.constant(w.clone());
            g.mul(out, w)
        }, 1e-6);
        let sigma = ramp(&[6], 2.0).map(|v| v.abs() + 0.5);
        check(ramp(&[6, 3], 0.5), move |g, c| {
            let s = g.constant(sigma.clone());
            let out = g.composite(s, c, t.clone(), delta.clone(), 3, [1.0, 1.0, 1.0]);
            g.square(out)
        }, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.mul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }
}
