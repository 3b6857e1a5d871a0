//! Minimal define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the [`Function`] that produced it. [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a leaf
//! created with [`Tape::param`].
//!
//! Image tensors are single-sample `[C, H, W]`; row tensors are `[R, C]`.
//! Losses that need hand-derived gradients (focal, GIoU, distillation,
//! contrastive) implement [`Function`] in their own modules.

use std::fmt;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First element; meant for scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the upstream gradient of
    /// the output. `None` means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        func: Option<Box<dyn Function>>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            func,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let func = if needs_grad { Some(func) } else { None };
        self.push(output, inputs.to_vec(), func, needs_grad)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Tensor::new(out.shape.clone(), vec![1.0; out.len()]));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = func.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients are reported.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.func.is_some() {
                grads[idx] = None;
            }
        }
        Grads { grads }
    }

    // ----- elementary operations -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.custom(&[a, b], out, Box::new(AddFn))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&t| t.max(0.0)).collect());
        self.custom(&[x], out, Box::new(ReluFn))
    }

    /// `s * x` where `s` is a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|t| t * k).collect());
        self.custom(&[x, s], out, Box::new(ScaleByFn))
    }

    /// Weighted sum of scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        self.custom(&vars, Tensor::scalar(total), Box::new(WeightedSumFn { weights }))
    }

    /// Stacks one-element nodes into a tensor of the given shape.
    pub fn stack(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let data: Vec<f64> = parts.iter().map(|&v| self.value(v).item()).collect();
        let out = Tensor::new(shape.to_vec(), data);
        self.custom(parts, out, Box::new(StackFn))
    }

    /// Element `index` of the flattened tensor as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data[index]);
        let shape = v.shape.clone();
        self.custom(&[x], out, Box::new(PickFn { index, shape }))
    }

    /// `[C, H, W]` convolution with square kernel, zero padding and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad);
        let cols = im2col(xv.data(), &geom);
        let mut out = vec![0.0; geom.out_c * geom.out_hw()];
        gemm(
            geom.out_c,
            geom.col_rows(),
            geom.out_hw(),
            wv.data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            let hw = geom.out_hw();
            for (o, bias) in bv.data().iter().enumerate() {
                for v in &mut out[o * hw..(o + 1) * hw] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new(vec![geom.out_c, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.custom(&inputs, out, Box::new(Conv2dFn { geom }))
    }

    /// Group normalization of a `[C, H, W]` tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (c, hw) = (xv.shape[0], xv.shape[1] * xv.shape[2]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let per = c / groups * hw;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(groups);
        for gi in 0..groups {
            let seg = &xv.data[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for (i, v) in seg.iter().enumerate() {
                let flat = gi * per + i;
                let ch = flat / hw;
                xhat[flat] = (v - mean) * r;
                out[flat] = xhat[flat] * g[ch] + bt[ch];
            }
        }
        let out = Tensor::new(xv.shape.clone(), out);
        self.custom(
            &[x, gamma, beta],
            out,
            Box::new(GroupNormFn {
                groups,
                xhat,
                rstd,
            }),
        )
    }

    /// Nearest-neighbour resize of `[C, H, W]` to `[C, out_h, out_w]`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for i in 0..out_h {
                let si = i * h / out_h;
                for j in 0..out_w {
                    let sj = j * w / out_w;
                    out[(ch * out_h + i) * out_w + j] = xv.data[(ch * h + si) * w + sj];
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], out);
        self.custom(&[x], out, Box::new(UpsampleFn))
    }

    /// `[C, H, W]` to `[H * W, C]` (one row per spatial location, row-major).
    pub fn to_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, hw) = (xv.shape[0], xv.shape[1] * xv.shape[2]);
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = xv.data[ch * hw + p];
            }
        }
        let out = Tensor::new(vec![hw, c], out);
        self.custom(&[x], out, Box::new(ToRowsFn))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).shape[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape[1], cols, "concat_rows: column mismatch");
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let out = Tensor::new(vec![rows, cols], data);
        self.custom(parts, out, Box::new(ConcatRowsFn))
    }

    /// Divides each row of `[R, C]` by its L2 norm (rows with norm below
    /// `1e-12` pass through scaled by `1e12`, i.e. stay finite).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape[1];
        let mut out = xv.data.clone();
        let mut norms = Vec::with_capacity(xv.shape[0]);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let out = Tensor::new(xv.shape.clone(), out);
        self.custom(&[x], out, Box::new(RowNormalizeFn { norms }))
    }

    /// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
        assert_eq!(vb.shape[1], k, "matmul_nt: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out);
        self.custom(&[a, b], out, Box::new(MatMulNtFn))
    }
}

// ----- dense kernels -----

/// `c = op(a) · op(b) + beta * c`, with `op` an optional transpose of a
/// row-major matrix. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: extents checked above; strides describe row-major layouts of
    // the asserted sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 3, "conv2d expects [C, H, W] input");
        assert_eq!(w.len(), 4, "conv2d expects [O, C, K, K] weight");
        assert_eq!(x[0], w[1], "conv2d channel mismatch");
        let k = w[2];
        let out_h = (x[1] + 2 * pad - k) / stride + 1;
        let out_w = (x[2] + 2 * pad - k) / stride + 1;
        ConvGeom {
            in_c: x[0],
            in_h: x[1],
            in_w: x[2],
            out_c: w[0],
            out_h,
            out_w,
            k,
            stride,
            pad,
        }
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.out_hw();
    let mut cols = vec![0.0; g.col_rows() * hw];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    let src_row = (c * g.in_h + ii as usize) * g.in_w;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.in_w as isize {
                            dst[oi * g.out_w + oj] = x[src_row + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.out_hw();
    let mut x = vec![0.0; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = (c * g.in_h + ii as usize) * g.in_w;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.in_w as isize {
                            x[dst_row + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

// ----- backward rules -----

struct AddFn;
impl Function for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct ReluFn;
impl Function for ReluFn {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data
            .iter()
            .zip(&grad.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape.clone(), data))]
    }
}

struct ScaleByFn;
impl Function for ScaleByFn {
    fn name(&self) -> &'static str {
        "scale_by"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = inputs[1].item();
        let dx = Tensor::new(grad.shape.clone(), grad.data.iter().map(|g| g * k).collect());
        let ds: f64 = grad.data.iter().zip(&inputs[0].data).map(|(g, x)| g * x).sum();
        vec![Some(dx), Some(Tensor::new(inputs[1].shape.clone(), vec![ds]))]
    }
}

struct WeightedSumFn {
    weights: Vec<f64>,
}
impl Function for WeightedSumFn {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        self.weights
            .iter()
            .zip(inputs)
            .map(|(w, x)| Some(Tensor::new(x.shape.clone(), vec![g * w])))
            .collect()
    }
}

struct StackFn;
impl Function for StackFn {
    fn name(&self) -> &'static str {
        "stack"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        inputs
            .iter()
            .zip(&grad.data)
            .map(|(x, g)| Some(Tensor::new(x.shape.clone(), vec![*g])))
            .collect()
    }
}

struct PickFn {
    index: usize,
    shape: Vec<usize>,
}
impl Function for PickFn {
    fn name(&self) -> &'static str {
        "pick"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros(self.shape.clone());
        g.data[self.index] = grad.item();
        vec![Some(g)]
    }
}

struct Conv2dFn {
    geom: ConvGeom,
}
impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let hw = g.out_hw();
        let cols = im2col(x.data(), g);
        let mut dw = vec![0.0; w.len()];
        gemm(g.out_c, hw, g.col_rows(), grad.data(), false, &cols, true, &mut dw, 0.0);
        let mut dcols = vec![0.0; g.col_rows() * hw];
        gemm(g.col_rows(), g.out_c, hw, w.data(), true, grad.data(), false, &mut dcols, 0.0);
        let dx = col2im(&dcols, g);
        let mut out = vec![
            Some(Tensor::new(x.shape.clone(), dx)),
            Some(Tensor::new(w.shape.clone(), dw)),
        ];
        if inputs.len() == 3 {
            let db = grad.data.chunks(hw).map(|c| c.iter().sum()).collect();
            out.push(Some(Tensor::new(inputs[2].shape.clone(), db)));
        }
        out
    }
}

struct GroupNormFn {
    groups: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}
impl Function for GroupNormFn {
    fn name(&self) -> &'static str {
        "group_norm"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let gamma = inputs[1].data();
        let (c, hw) = (x.shape[0], x.shape[1] * x.shape[2]);
        let per = c / self.groups * hw;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; x.len()];
        for gi in 0..self.groups {
            let range = gi * per..(gi + 1) * per;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for flat in range.clone() {
                let ch = flat / hw;
                let dy = grad.data[flat];
                dgamma[ch] += dy * self.xhat[flat];
                dbeta[ch] += dy;
                let dxhat = dy * gamma[ch];
                mean_d += dxhat;
                mean_dx += dxhat * self.xhat[flat];
            }
            mean_d /= per as f64;
            mean_dx /= per as f64;
            for flat in range {
                let ch = flat / hw;
                let dxhat = grad.data[flat] * gamma[ch];
                dx[flat] = self.rstd[gi] * (dxhat - mean_d - self.xhat[flat] * mean_dx);
            }
        }
        vec![
            Some(Tensor::new(x.shape.clone(), dx)),
            Some(Tensor::new(vec![c], dgamma)),
            Some(Tensor::new(vec![c], dbeta)),
        ]
    }
}

struct UpsampleFn;
impl Function for UpsampleFn {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (oh, ow) = (output.shape[1], output.shape[2]);
        let mut dx = vec![0.0; x.len()];
        for ch in 0..c {
            for i in 0..oh {
                let si = i * h / oh;
                for j in 0..ow {
                    let sj = j * w / ow;
                    dx[(ch * h + si) * w + sj] += grad.data[(ch * oh + i) * ow + j];
                }
            }
        }
        vec![Some(Tensor::new(x.shape.clone(), dx))]
    }
}

struct ToRowsFn;
impl Function for ToRowsFn {
    fn name(&self) -> &'static str {
        "to_rows"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, hw) = (x.shape[0], x.shape[1] * x.shape[2]);
        let mut dx = vec![0.0; x.len()];
        for ch in 0..c {
            for p in 0..hw {
                dx[ch * hw + p] = grad.data[p * c + ch];
            }
        }
        vec![Some(Tensor::new(x.shape.clone(), dx))]
    }
}

struct ConcatRowsFn;
impl Function for ConcatRowsFn {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|x| {
                let n = x.len();
                let g = Tensor::new(x.shape.clone(), grad.data[offset..offset + n].to_vec());
                offset += n;
                Some(g)
            })
            .collect()
    }
}

struct RowNormalizeFn {
    norms: Vec<f64>,
}
impl Function for RowNormalizeFn {
    fn name(&self) -> &'static str {
        "row_normalize"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = output.shape[1];
        let mut dx = vec![0.0; output.len()];
        for (r, n) in self.norms.iter().enumerate() {
            let y = &output.data[r * c..(r + 1) * c];
            let g = &grad.data[r * c..(r + 1) * c];
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dx[r * c + j] = (g[j] - y[j] * dot) / n;
            }
        }
        vec![Some(Tensor::new(output.shape.clone(), dx))]
    }
}

struct MatMulNtFn;
impl Function for MatMulNtFn {
    fn name(&self) -> &'static str {
        "matmul_nt"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
        let mut da = vec![0.0; m * k];
        gemm(m, n, k, grad.data(), false, b.data(), false, &mut da, 0.0);
        let mut db = vec![0.0; n * k];
        gemm(n, m, k, grad.data(), true, a.data(), false, &mut db, 0.0);
        vec![
            Some(Tensor::new(a.shape.clone(), da)),
            Some(Tensor::new(b.shape.clone(), db)),
        ]
    }
}

/// Central finite-difference gradient of a scalar function of one tensor.
/// Used by tests that check hand-derived backward rules.
pub fn numeric_grad(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape.clone());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        g.data[i] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero components do not dominate.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a
        .data
        .iter()
        .chain(&b.data)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}
