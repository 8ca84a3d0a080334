//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a new tensor
//! and every public constructor or operation rejects non-finite results.
//! Image tensors use `[C, H, W]`; network activations use `[N, C, H, W]`.
//! Broadcasting is limited to scalar-tensor arithmetic and the explicit
//! per-channel [`Tensor::add_bias`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return shape_err("new", format!("zero extent in {shape:?}"));
        }
        if numel_of(&shape) != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(&shape), data.len()),
            );
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        debug_assert_eq!(numel_of(&shape), data.len());
        check_finite(op, &data)?;
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero()).expect("zeros with non-empty extents")
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one()).expect("ones with non-empty extents")
    }

    pub fn scalar(value: S) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> S) -> Result<Self> {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(f).collect();
        Self::new(shape, data)
    }

    /// Standard normal samples, drawn in `f64` and rounded to `S`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape))
            .map(|_| S::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape))
            .map(|_| S::of(rng.random_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            shape_err("item", format!("expected one element, shape {:?}", self.shape))
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, op: &'static str, f: impl Fn(S) -> S) -> Result<Self> {
        Self::from_op(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_op(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        self.map("scale", |v| v * c)
    }

    pub fn add_scalar(&self, c: S) -> Result<Self> {
        self.map("add_scalar", |v| v + c)
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: S, other: &Self, b: S) -> Result<Self> {
        self.zip_map(other, "axpby", |x, y| a * x + b * y)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Result<Self> {
        self.map("clamp", |v| v.max(lo).min(hi))
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn tanh(&self) -> Result<Self> {
        self.map("tanh", |v| v.tanh())
    }

    pub fn sum(&self) -> Result<Self> {
        let s = self.data.iter().copied().sum::<S>();
        Self::from_op("sum", Vec::new(), vec![s])
    }

    pub fn mean(&self) -> Result<Self> {
        let s = self.data.iter().copied().sum::<S>() / S::of(self.numel() as f64);
        Self::from_op("mean", Vec::new(), vec![s])
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Divides by the Euclidean norm of the whole tensor.
    pub fn l2_normalize(&self) -> Result<Self> {
        let n = self.norm_l2();
        if n == S::zero() {
            return Err(Error::ZeroNorm { op: "l2_normalize" });
        }
        self.map("l2_normalize", |v| v / n)
    }

    /// Cosine similarity of the two tensors viewed as flat vectors, clamped
    /// to `[-1, 1]`.
    pub fn cosine(&self, other: &Self) -> Result<S> {
        self.same_shape(other, "cosine")?;
        let na = self.norm_l2();
        let nb = other.norm_l2();
        if na == S::zero() || nb == S::zero() {
            return Err(Error::ZeroNorm { op: "cosine" });
        }
        let c = self.dot(other)? / (na * nb);
        let c = c.max(-S::one()).min(S::one());
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "cosine" });
        }
        Ok(c)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let out = matmul_raw(&self.data, &other.data, m, k, n);
        Self::from_op("matmul", vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("transpose", format!("rank {} tensor", self.rank()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds `bias[c]` to every element of channel `c` in an `[N, C, ...]` tensor.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let c = self.channels_for_bias(bias, "add_bias")?;
        let inner = self.numel() / (self.shape[0] * c);
        let mut out = self.data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias.data[(i / inner) % c];
        }
        Self::from_op("add_bias", self.shape.clone(), out)
    }

    fn channels_for_bias(&self, bias: &Self, op: &'static str) -> Result<usize> {
        if self.rank() < 2 || bias.numel() != self.shape[1] {
            return shape_err(op, format!("input {:?} bias {:?}", self.shape, bias.shape));
        }
        Ok(self.shape[1])
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = S::of(1.0 / hw as f64);
        let out = self
            .data
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        Self::from_op("global_avg_pool", vec![n, c], out)
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(op, format!("expected [N, C, H, W], got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(op, format!("expected [C, H, W], got {:?}", self.shape)),
        }
    }

    /// 2-D cross-correlation (im2col + matmul) over `[N, Ci, H, W]` with weights
    /// `[Co, Ci, Kh, Kw]`, symmetric zero padding and equal strides.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, stride: usize, pad: usize) -> Result<Self> {
        let geom = ConvGeom::new(self, weight, stride, pad)?;
        if let Some(b) = bias {
            if b.numel() != geom.co {
                return shape_err("conv2d", format!("bias {:?} for {} outputs", b.shape, geom.co));
            }
        }
        let mut out = vec![S::zero(); geom.n * geom.co * geom.ho * geom.wo];
        geom.forward(&self.data, &weight.data, &mut out);
        if let Some(b) = bias {
            let plane = geom.ho * geom.wo;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = b.data[i % geom.co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        Self::from_op("conv2d", vec![geom.n, geom.co, geom.ho, geom.wo], out)
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    out.push(row[x / factor]);
                }
            }
        }
        Self::from_op("upsample_nearest", vec![n, c, oh, ow], out)
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (n, ca, h, w) = self.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = other.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err("concat_channels", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(self.numel() + other.numel());
        for i in 0..n {
            out.extend_from_slice(&self.data[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&other.data[i * sb..(i + 1) * sb]);
        }
        Self::from_op("concat_channels", vec![n, ca + cb, h, w], out)
    }

    /// Row-wise softmax of an `[N, K]` tensor.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("softmax", format!("expected [N, K], got {:?}", self.shape));
        }
        let k = self.shape[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(k) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: S = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        Self::from_op("softmax", self.shape.clone(), out)
    }

    /// Mean cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        if self.rank() != 2 || labels.len() != self.shape[0] {
            return shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", self.shape, labels.len()),
            );
        }
        let k = self.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = S::zero();
        for (row, &y) in self.data.chunks(k).zip(labels) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            total = total + lse - row[y];
        }
        Self::from_op("cross_entropy", Vec::new(), vec![total / S::of(labels.len() as f64)])
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Geometry of one convolution; shared by the forward and both adjoint kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Self> {
        let (n, ci, h, wd) = x.dims4("conv2d")?;
        let (co, wci, kh, kw) = w.dims4("conv2d")?;
        if wci != ci {
            return shape_err("conv2d", format!("input {:?} kernel {:?}", x.shape, w.shape));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{wd}"));
        }
        Ok(Self {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + k - pad` falls inside `[0, len)`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let hi = hi.min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Unfolds one image into columns `[Ci*Kh*Kw, Ho*Wo]`; padding is zero.
    fn im2col<S: Scalar>(&self, img: &[S]) -> Vec<S> {
        let (s, hw) = (self.stride, self.ho * self.wo);
        let mut cols = vec![S::zero(); self.patch_len() * hw];
        for c in 0..self.ci {
            let plane = &img[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in ylo..yhi {
                        let irow = &plane[(oy * s + ky - self.pad) * self.w..][..self.w];
                        let orow = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            orow[ox] = irow[ox * s + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating.
    fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let (s, hw) = (self.stride, self.ho * self.wo);
        for c in 0..self.ci {
            let plane = &mut img[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in ylo..yhi {
                        let irow = &mut plane[(oy * s + ky - self.pad) * self.w..][..self.w];
                        let grow = &row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            let ix = ox * s + kx - self.pad;
                            irow[ix] = irow[ix] + grow[ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, x: &[S], w: &[S], out: &mut [S]) {
        let (hw, k) = (self.ho * self.wo, self.patch_len());
        for b in 0..self.n {
            let cols = self.im2col(&x[b * self.ci * self.h * self.w..][..self.ci * self.h * self.w]);
            let y = matmul_raw(w, &cols, self.co, k, hw);
            for (o, v) in out[b * self.co * hw..][..self.co * hw].iter_mut().zip(y) {
                *o = *o + v;
            }
        }
    }

    /// Gradient with respect to the input given the output gradient.
    pub fn backward_input<S: Scalar>(&self, g: &[S], w: &[S]) -> Vec<S> {
        let (hw, k) = (self.ho * self.wo, self.patch_len());
        let wt = transpose_raw(w, self.co, k);
        let img = self.ci * self.h * self.w;
        let mut gx = vec![S::zero(); self.n * img];
        for b in 0..self.n {
            let gcols = matmul_raw(&wt, &g[b * self.co * hw..][..self.co * hw], k, self.co, hw);
            self.col2im(&gcols, &mut gx[b * img..][..img]);
        }
        gx
    }

    /// Gradient with respect to the kernel given the output gradient.
    pub fn backward_weight<S: Scalar>(&self, g: &[S], x: &[S]) -> Vec<S> {
        let (hw, k) = (self.ho * self.wo, self.patch_len());
        let img = self.ci * self.h * self.w;
        let mut gw = vec![S::zero(); self.co * k];
        for b in 0..self.n {
            let cols_t = transpose_raw(&self.im2col(&x[b * img..][..img]), k, hw);
            let part = matmul_raw(&g[b * self.co * hw..][..self.co * hw], &cols_t, self.co, hw, k);
            for (a, v) in gw.iter_mut().zip(part) {
                *a = *a + v;
            }
        }
        gw
    }
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
