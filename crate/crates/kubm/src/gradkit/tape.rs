//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] is an append-only DAG: every op records its parents, so node
//! ids are topologically ordered by construction and the backward sweep is a
//! single reverse pass. Tapes are rebuilt per step; parameters live outside
//! the tape and are re-registered as leaves each time.
//!
//! The op set is exactly what the training objectives need: affine maps,
//! rectifiers, matrix-vector products (chained for matrix powers), squared
//! norms, cosine similarity, and 2-D strided / transposed convolutions.

use super::tensor::Tensor;
use thiserror::Error;

pub type VarId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cosine similarity of a zero-norm vector is undefined")]
    ZeroNormCosine,
}

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
}

/// Largest `lo..hi` within `0..count` such that every `i` in it satisfies
/// `0 <= i*stride + offset < limit`.
fn strided_valid_range(offset: isize, stride: usize, limit: usize, count: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let top = limit as isize - 1 - offset;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(count);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Scale(VarId, f64),
    Concat(VarId, VarId),
    Relu(VarId),
    Affine {
        weight: VarId,
        input: VarId,
        bias: VarId,
    },
    MatVec {
        matrix: VarId,
        vector: VarId,
    },
    SqNorm(VarId),
    SumScalars(Vec<VarId>),
    Cosine(VarId, VarId),
    Conv2d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if it received any.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape when the node
    /// did not participate in the loss.
    pub fn wrt_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Registers a tensor the loss may differentiate through (a parameter)
    /// or a constant; the tape does not distinguish, callers simply ignore
    /// gradients of constants.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.iter().zip(vb.iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "sub",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.iter().zip(vb.iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let va = self.value(a);
        let data = va.iter().map(|x| c * x).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Scale(a, c))
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 1 || vb.shape().len() != 1 {
            return Err(shape_err(
                "concat",
                format!("expected vectors, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Elementwise `max(0, x)`. The subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let data = vx.iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Relu(x))
    }

    /// `w x + b` with `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, weight: VarId, input: VarId, bias: VarId) -> Result<VarId, TapeError> {
        let (w, x, b) = (self.value(weight), self.value(input), self.value(bias));
        let ws = w.shape();
        if ws.len() != 2 || x.shape().len() != 1 || b.shape().len() != 1 {
            return Err(shape_err(
                "affine",
                format!("w {:?}, x {:?}, b {:?}", ws, x.shape(), b.shape()),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        if x.len() != n || b.len() != m {
            return Err(shape_err(
                "affine",
                format!("w is {}x{}, x has {}, b has {}", m, n, x.len(), b.len()),
            ));
        }
        let wd = w.data();
        let xd = x.data();
        let mut data = b.data().to_vec();
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            data[i] += acc;
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Affine { weight, input, bias }))
    }

    /// `M v` with `M: [m, n]`, `v: [n]`.
    pub fn matvec(&mut self, matrix: VarId, vector: VarId) -> Result<VarId, TapeError> {
        let (m_t, v_t) = (self.value(matrix), self.value(vector));
        let ms = m_t.shape();
        if ms.len() != 2 || v_t.shape().len() != 1 || v_t.len() != ms[1] {
            return Err(shape_err(
                "matvec",
                format!("matrix {:?}, vector {:?}", ms, v_t.shape()),
            ));
        }
        let (m, n) = (ms[0], ms[1]);
        let md = m_t.data();
        let vd = v_t.data();
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &md[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * vd[j];
            }
            data[i] = acc;
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::MatVec { matrix, vector }))
    }

    /// Squared Euclidean norm, producing a scalar.
    pub fn sq_norm(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SqNorm(x))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: Vec<VarId>) -> Result<VarId, TapeError> {
        let mut acc = 0.0;
        for &x in &xs {
            let v = self.value(x);
            if !v.is_scalar() {
                return Err(shape_err(
                    "sum_scalars",
                    format!("operand has shape {:?}", v.shape()),
                ));
            }
            acc += v.item();
        }
        Ok(self.push(Tensor::scalar(acc), Op::SumScalars(xs)))
    }

    /// Cosine similarity `<a,b> / (||a|| ||b||)` of two vectors.
    pub fn cosine(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 1 || va.shape() != vb.shape() {
            return Err(shape_err(
                "cosine",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let na = va.norm();
        let nb = vb.norm();
        if na == 0.0 || nb == 0.0 {
            return Err(TapeError::ZeroNormCosine);
        }
        let dot: f64 = va.iter().zip(vb.iter()).map(|(x, y)| x * y).sum();
        let out = Tensor::scalar(dot / (na * nb));
        Ok(self.push(out, Op::Cosine(a, b)))
    }

    /// 2-D convolution: `input [Cin,H,W]`, `kernel [Cout,Cin,kh,kw]`,
    /// `bias [Cout]`. Output height is `floor((H + 2p - kh) / s) + 1`.
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId, TapeError> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, kernel {:?}", xs, ks),
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || b.len() != cout {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {} input channels, bias {}", kcin, b.len()),
            ));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} does not fit {}x{} at padding {}", kh, kw, h, w, padding),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        let xd = x.data();
        let kd = k.data();
        let bd = b.data();
        for co in 0..cout {
            out[co * ho * wo..(co + 1) * ho * wo].fill(bd[co]);
        }
        // Kernel-outer accumulation: for each tap, the valid output range is
        // computed once, so inner loops run branch-free. Per output cell the
        // taps still land in (ci, ky, kx) order, the same summation order as
        // a direct per-cell loop.
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..kh {
                    let y_off = ky as isize - padding as isize;
                    let (oy_lo, oy_hi) = strided_valid_range(y_off, stride, h, ho);
                    for kx in 0..kw {
                        let x_off = kx as isize - padding as isize;
                        let (ox_lo, ox_hi) = strided_valid_range(x_off, stride, w, wo);
                        if ox_lo >= ox_hi || oy_lo >= oy_hi {
                            continue;
                        }
                        let kval = kd[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + y_off;
                            let xrow = (ci * h + iy as usize) * w;
                            let orow = (co * ho + oy) * wo;
                            let mut ix = (ox_lo * stride) as isize + x_off;
                            for o in &mut out[orow + ox_lo..orow + ox_hi] {
                                *o += kval * xd[xrow + ix as usize];
                                ix += stride as isize;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`] as a
    /// forward op): `input [Cin,H,W]`, `kernel [Cin,Cout,kh,kw]`,
    /// `bias [Cout]`. Output height is `(H-1)s - 2p + kh + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<VarId, TapeError> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {:?}, kernel {:?}", xs, ks),
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (kcin, cout, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || b.len() != cout {
            return Err(shape_err(
                "conv_transpose2d",
                format!("kernel expects {} input channels, bias {}", kcin, b.len()),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(shape_err(
                "conv_transpose2d",
                format!("output_padding {} must be < stride {}", output_padding, stride),
            ));
        }
        let ho_s = (h - 1) * stride + kh + output_padding;
        let wo_s = (w - 1) * stride + kw + output_padding;
        if ho_s < 2 * padding || wo_s < 2 * padding {
            return Err(shape_err(
                "conv_transpose2d",
                format!("padding {} exceeds produced extent {}x{}", padding, ho_s, wo_s),
            ));
        }
        let ho = ho_s - 2 * padding;
        let wo = wo_s - 2 * padding;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            out[co * ho * wo..(co + 1) * ho * wo].fill(b.data()[co]);
        }
        let xd = x.data();
        let kd = k.data();
        // Scatter with per-tap valid ranges hoisted out of the inner loops.
        for ci in 0..cin {
            for co in 0..cout {
                for ky in 0..kh {
                    let y_off = ky as isize - padding as isize;
                    let (iy_lo, iy_hi) = strided_valid_range(y_off, stride, ho, h);
                    for kx in 0..kw {
                        let x_off = kx as isize - padding as isize;
                        let (ix_lo, ix_hi) = strided_valid_range(x_off, stride, wo, w);
                        if ix_lo >= ix_hi || iy_lo >= iy_hi {
                            continue;
                        }
                        let kval = kd[((ci * cout + co) * kh + ky) * kw + kx];
                        for iy in iy_lo..iy_hi {
                            let oy = (iy * stride) as isize + y_off;
                            let xrow = (ci * h + iy) * w;
                            let orow = (co * ho + oy as usize) * wo;
                            let mut ox = (ix_lo * stride) as isize + x_off;
                            for &xv in &xd[xrow + ix_lo..xrow + ix_hi] {
                                out[orow + ox as usize] += kval * xv;
                                ox += stride as isize;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node that influences the loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, TapeError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TapeError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            // Parents always precede children, so splitting at `id` gives
            // mutable access to every parent slot while the node's own
            // gradient is read from the right half.
            let (parent_grads, rest) = grads.split_at_mut(id);
            let g = match rest[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, g, parent_grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut Tensor {
            slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                {
                    let ga = acc(&mut grads[*a], self.value(*a).shape());
                    ga.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d += s);
                }
                {
                    let gb = acc(&mut grads[*b], self.value(*b).shape());
                    gb.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sub(a, b) => {
                {
                    let ga = acc(&mut grads[*a], self.value(*a).shape());
                    ga.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d += s);
                }
                {
                    let gb = acc(&mut grads[*b], self.value(*b).shape());
                    gb.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(&mut grads[*a], self.value(*a).shape());
                ga.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d += c * s);
            }
            Op::Concat(a, b) => {
                let la = self.value(*a).len();
                {
                    let ga = acc(&mut grads[*a], self.value(*a).shape());
                    ga.data_mut()
                        .iter_mut()
                        .zip(g.data()[..la].iter())
                        .for_each(|(d, s)| *d += s);
                }
                {
                    let gb = acc(&mut grads[*b], self.value(*b).shape());
                    gb.data_mut()
                        .iter_mut()
                        .zip(g.data()[la..].iter())
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Relu(a) => {
                let mask: Vec<bool> = self.value(*a).iter().map(|v| *v > 0.0).collect();
                let ga = acc(&mut grads[*a], self.value(*a).shape());
                for (i, s) in g.iter().enumerate() {
                    if mask[i] {
                        ga.data_mut()[i] += s;
                    }
                }
            }
            Op::Affine { weight, input, bias } => {
                let ws = self.value(*weight).shape();
                let (m, n) = (ws[0], ws[1]);
                {
                    let xv = self.value(*input).data();
                    // Split to hold the input value and the weight gradient at once.
                    let gw = acc(&mut grads[*weight], &[m, n]);
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &mut gw.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += gi * xv[j];
                        }
                    }
                }
                {
                    let wv = self.value(*weight).data();
                    let gx = acc(&mut grads[*input], &[n]);
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &wv[i * n..(i + 1) * n];
                        let gxd = gx.data_mut();
                        for j in 0..n {
                            gxd[j] += gi * row[j];
                        }
                    }
                }
                {
                    let gb = acc(&mut grads[*bias], &[m]);
                    gb.data_mut().iter_mut().zip(g.iter()).for_each(|(d, s)| *d += s);
                }
            }
            Op::MatVec { matrix, vector } => {
                let ms = self.value(*matrix).shape();
                let (m, n) = (ms[0], ms[1]);
                {
                    let vv = self.value(*vector).data();
                    let gm = acc(&mut grads[*matrix], &[m, n]);
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &mut gm.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += gi * vv[j];
                        }
                    }
                }
                {
                    let mv = self.value(*matrix).data();
                    let gv = acc(&mut grads[*vector], &[n]);
                    let gvd = gv.data_mut();
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &mv[i * n..(i + 1) * n];
                        for j in 0..n {
                            gvd[j] += gi * row[j];
                        }
                    }
                }
            }
            Op::SqNorm(a) => {
                let gs = g.item();
                let xv = self.value(*a).data();
                let ga = acc(&mut grads[*a], self.value(*a).shape());
                for (d, x) in ga.data_mut().iter_mut().zip(xv.iter()) {
                    *d += 2.0 * gs * x;
                }
            }
            Op::SumScalars(xs) => {
                let gs = g.item();
                for &x in xs {
                    let gx = acc(&mut grads[x], &[]);
                    gx.data_mut()[0] += gs;
                }
            }
            Op::Cosine(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = va.iter().zip(vb.iter()).map(|(x, y)| x * y).sum();
                let c = dot / (na * nb);
                let gs = g.item();
                {
                    let ga = acc(&mut grads[*a], &[va.len()]);
                    let gad = ga.data_mut();
                    for j in 0..va.len() {
                        gad[j] += gs * (vb[j] / (na * nb) - c * va[j] / (na * na));
                    }
                }
                {
                    let gb = acc(&mut grads[*b], &[vb.len()]);
                    let gbd = gb.data_mut();
                    for j in 0..vb.len() {
                        gbd[j] += gs * (va[j] / (na * nb) - c * vb[j] / (nb * nb));
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xs = self.value(*input).shape().to_vec();
                let ks = self.value(*kernel).shape().to_vec();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = self.value(id).shape();
                let (ho, wo) = (os[1], os[2]);
                let (s, p) = (*stride, *padding);

                {
                    let kd = self.value(*kernel).data();
                    let gx = acc(&mut grads[*input], &xs);
                    let gxd = gx.data_mut();
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g.data()[(co * ho + oy) * wo + ox];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * s + kx) as isize - p as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gxd[(ci * h + iy as usize) * w + ix as usize]
                                                += go * kd[((co * cin + ci) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let xd = self.value(*input).data();
                    let gk = acc(&mut grads[*kernel], &ks);
                    let gkd = gk.data_mut();
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g.data()[(co * ho + oy) * wo + ox];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * s + kx) as isize - p as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gkd[((co * cin + ci) * kh + ky) * kw + kx]
                                                += go * xd[(ci * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gb = acc(&mut grads[*bias], &[cout]);
                    let gbd = gb.data_mut();
                    for co in 0..cout {
                        let mut acc_b = 0.0;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                acc_b += g.data()[(co * ho + oy) * wo + ox];
                            }
                        }
                        gbd[co] += acc_b;
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xs = self.value(*input).shape().to_vec();
                let ks = self.value(*kernel).shape().to_vec();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
                let os = self.value(id).shape();
                let (ho, wo) = (os[1], os[2]);
                let (s, p) = (*stride, *padding);

                {
                    // The forward scatter becomes a gather over output cells.
                    let kd = self.value(*kernel).data();
                    let gx = acc(&mut grads[*input], &xs);
                    let gxd = gx.data_mut();
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..w {
                                let mut acc_x = 0.0;
                                for co in 0..cout {
                                    for ky in 0..kh {
                                        let oy = (iy * s + ky) as isize - p as isize;
                                        if oy < 0 || oy >= ho as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (ix * s + kx) as isize - p as isize;
                                            if ox < 0 || ox >= wo as isize {
                                                continue;
                                            }
                                            acc_x += g.data()
                                                [(co * ho + oy as usize) * wo + ox as usize]
                                                * kd[((ci * cout + co) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                                gxd[(ci * h + iy) * w + ix] += acc_x;
                            }
                        }
                    }
                }
                {
                    let xd = self.value(*input).data();
                    let gk = acc(&mut grads[*kernel], &ks);
                    let gkd = gk.data_mut();
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..w {
                                let xv = xd[(ci * h + iy) * w + ix];
                                for co in 0..cout {
                                    for ky in 0..kh {
                                        let oy = (iy * s + ky) as isize - p as isize;
                                        if oy < 0 || oy >= ho as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (ix * s + kx) as isize - p as isize;
                                            if ox < 0 || ox >= wo as isize {
                                                continue;
                                            }
                                            gkd[((ci * cout + co) * kh + ky) * kw + kx] += xv
                                                * g.data()
                                                    [(co * ho + oy as usize) * wo + ox as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gb = acc(&mut grads[*bias], &[cout]);
                    let gbd = gb.data_mut();
                    for co in 0..cout {
                        let mut acc_b = 0.0;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                acc_b += g.data()[(co * ho + oy) * wo + ox];
                            }
                        }
                        gbd[co] += acc_b;
                    }
                }
            }
        }
    }
}
