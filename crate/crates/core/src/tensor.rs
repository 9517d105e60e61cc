//! Dense row-major f64 tensors and the handful of kernels the network needs.
//!
//! Every reduction runs in a fixed order (left to right over the reduced index), so results are
//! bitwise reproducible across runs and thread counts.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds an `n x m` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![n, m], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Number of rows along the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values in one slice along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(0);
        }
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows")))
    })
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Dimension(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Standard matrix product `a[m x k] * b[k x n]`, summing over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data: out,
    };
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a^T * b` for `a[k x m]`, `b[k x n]`; used for weight gradients.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_tn lhs")?;
    expect_rank(b, 2, "matmul_tn rhs")?;
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn leading dimensions differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a * b^T` for `a[m x k]`, `b[n x k]`; used to propagate gradients to layer inputs.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_nt lhs")?;
    expect_rank(b, 2, "matmul_nt rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt trailing dimensions differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Adds `bias[n]` to every row of `x[m x n]`.
pub fn add_row_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let n = x.row_len();
    if bias.len() != n {
        return Err(Error::Dimension(format!(
            "bias of length {} for rows of length {n}",
            bias.len()
        )));
    }
    for row in x.data.chunks_mut(n.max(1)) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(())
}

/// Valid (unpadded, stride 1) cross-correlation of `input[C_in x H x W]` with
/// `kernels[C_out x C_in x kh x kw]`, plus one bias per output channel.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    let (cin, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, kcin, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "conv2d: input has {cin} channels, kernels expect {kcin}"
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Dimension(format!(
            "conv2d: input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    if bias.len() != cout {
        return Err(Error::Dimension(format!(
            "conv2d: {} biases for {cout} output channels",
            bias.len()
        )));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let src = &input.data[c * h * w..(c + 1) * h * w];
            let kbase = (o * cin + c) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kernels.data[kbase + ky * kw + kx];
                    for y in 0..oh {
                        let srow = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let orow = &mut plane[y * ow..(y + 1) * ow];
                        for (ov, &sv) in orow.iter_mut().zip(srow) {
                            *ov += kv * sv;
                        }
                    }
                }
            }
        }
        let b = bias.data[o];
        for v in plane.iter_mut() {
            *v += b;
        }
    }
    let out = Tensor {
        shape: vec![cout, oh, ow],
        data: out,
    };
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d_valid`] given the upstream gradient of its output.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_valid_backward(input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    expect_rank(input, 3, "conv2d_backward input")?;
    expect_rank(kernels, 4, "conv2d_backward kernels")?;
    let (cin, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, kh, kw) = (kernels.shape[0], kernels.shape[2], kernels.shape[3]);
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    if grad_out.shape() != [cout, oh, ow] {
        return Err(Error::Dimension(format!(
            "conv2d_backward: gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [cout, oh, ow]
        )));
    }
    let mut gin = vec![0.0; cin * h * w];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let g = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = g.iter().sum();
        for c in 0..cin {
            let src = &input.data[c * h * w..(c + 1) * h * w];
            let dst = &mut gin[c * h * w..(c + 1) * h * w];
            let kbase = (o * cin + c) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kernels.data[kbase + ky * kw + kx];
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let off = (y + ky) * w + kx;
                        let grow = &g[y * ow..(y + 1) * ow];
                        let srow = &src[off..off + ow];
                        for (gv, sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                        let drow = &mut dst[off..off + ow];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += kv * gv;
                        }
                    }
                    gk[kbase + ky * kw + kx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor {
            shape: vec![cin, h, w],
            data: gin,
        },
        kernels: Tensor {
            shape: kernels.shape.clone(),
            data: gk,
        },
        bias: Tensor {
            shape: vec![cout],
            data: gb,
        },
    })
}

/// Output of a max pool together with the flat input index each output came from.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping `window x window` max pooling over `input[C x H x W]`.
///
/// Trailing rows/columns that do not fill a window are dropped; ties go to the first maximum in
/// row-major window order.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Pooled> {
    expect_rank(input, 3, "maxpool input")?;
    if window == 0 {
        return Err(Error::Dimension("maxpool window must be positive".into()));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if h < window || w < window {
        return Err(Error::Dimension(format!(
            "maxpool: input {h}x{w} smaller than window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = base + (y * window) * w + x * window;
                let mut best = input.data[best_i];
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (y * window + dy) * w + x * window + dx;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok(Pooled {
        output: Tensor {
            shape: vec![c, oh, ow],
            data: out,
        },
        argmax,
    })
}

/// Routes each pooled gradient back to its arg-max position.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Dimension(format!(
            "maxpool_backward: {} indices for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    Ok(g)
}

/// Row-wise softmax of `logits[n x C]` with per-row max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "softmax")?;
    logits.ensure_finite("softmax logits")?;
    let c = logits.shape[1];
    let mut out = logits.data.clone();
    for row in out.chunks_mut(c.max(1)) {
        softmax_in_place(row);
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
