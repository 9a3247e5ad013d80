//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes only ever reference earlier
//! nodes, so walking the tape backwards is a valid topological order.

pub(crate) mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::Window;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Silu,
    Tanh,
    Relu,
    /// Slope 0.1 on the negative side.
    LeakyRelu,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.1;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Whether batch normalisation uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-norm statistics measured on one forward pass, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Act(Var, Activation),
    ChannelLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: Window,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the equivalent forward convolution (output -> input).
        geo: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Pool(Var, usize),
    Upsample(Var),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        denom: T,
    },
    LatentContract {
        branch: Var,
        trunk: Var,
    },
    ChannelBias(Var, Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Act(a, _)
            | Op::Pool(a, _)
            | Op::Upsample(a) => vec![*a],
            Op::ChannelLinear { x, w, b }
            | Op::Conv { x, w, b, .. }
            | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Slice { x, .. } => vec![*x],
            Op::MaskedMse { pred, .. } => vec![*pred],
            Op::LatentContract { branch, trunk } => vec![*branch, *trunk],
            Op::ChannelBias(x, b) => vec![*x, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::invalid(
            op,
            format!("expected a 4-D [B, C, H, W] tensor, got {:?}", t.shape()),
        )),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor; gradients are tracked if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act(x, kind))
    }

    /// Per-location linear map over the channel axis: `x: [B, Cin, ...]`,
    /// `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn channel_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::invalid(
                "channel_linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let spatial: usize = xs[2..].iter().product();
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::shape("channel_linear", &[cout], bs));
            }
        }
        let mut out = vec![T::zero(); batch * cout * spatial];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for n in 0..batch {
                let dst = &mut out[n * cout * spatial..(n + 1) * cout * spatial];
                if let Some(b) = b {
                    for (c, &bv) in self.value(b).data().iter().enumerate() {
                        dst[c * spatial..(c + 1) * spatial].fill(bv);
                    }
                }
                let src = &xd[n * cin * spatial..(n + 1) * cin * spatial];
                kernels::gemm(false, false, cout, spatial, cin, wd, src, T::one(), dst);
            }
        }
        let mut shape = xs;
        shape[1] = cout;
        Ok(self.push(Tensor::from_parts(shape, out), Op::ChannelLinear { x, w, b }))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::shape(op, &[cout], bs));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation: `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = dims4("conv2d", self.value(x))?;
        let [cout, wcin, kh, kw] = dims4("conv2d", self.value(w))?;
        if wcin != cin {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        self.check_bias("conv2d", b, cout)?;
        let (ho, wo) = match (
            kernels::conv_out_len(h, kh, stride, pad),
            kernels::conv_out_len(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad}, stride {stride})"),
                ))
            }
        };
        let geo = Window {
            channels: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let mut out = vec![T::zero(); batch * cout * ho * wo];
        let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let plane = ho * wo;
        for n in 0..batch {
            kernels::im2col(&xd[n * cin * h * wd..(n + 1) * cin * h * wd], &geo, &mut cols);
            let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    dst[c * plane..(c + 1) * plane].fill(bv);
                }
            }
            kernels::gemm(false, false, cout, plane, geo.rows(), wdat, &cols, T::one(), dst);
        }
        let t = Tensor::from_parts(vec![batch, cout, ho, wo], out);
        Ok(self.push(t, Op::Conv { x, w, b, geo }))
    }

    /// Transposed convolution: `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`,
    /// output extent `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = dims4("conv_transpose2d", self.value(x))?;
        let [wcin, cout, kh, kw] = dims4("conv_transpose2d", self.value(w))?;
        if wcin != cin {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        self.check_bias("conv_transpose2d", b, cout)?;
        let (ho, wo) = match (
            kernels::deconv_out_len(h, kh, stride, pad),
            kernels::deconv_out_len(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) if stride > 0 => (a, b),
            _ => {
                return Err(Error::invalid(
                    "conv_transpose2d",
                    format!("empty output for input {h}x{wd}, kernel {kh}x{kw}, pad {pad}"),
                ))
            }
        };
        // The forward convolution this op is the adjoint of maps [Cout, Ho, Wo] -> [Cin, H, W].
        let geo = Window {
            channels: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        if kernels::conv_out_len(ho, kh, stride, pad) != Some(h)
            || kernels::conv_out_len(wo, kw, stride, pad) != Some(wd)
        {
            return Err(Error::invalid(
                "conv_transpose2d",
                "geometry is not invertible for this stride/padding",
            ));
        }
        let mut out = vec![T::zero(); batch * cout * ho * wo];
        let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let in_plane = h * wd;
        let out_plane = ho * wo;
        for n in 0..batch {
            kernels::gemm(
                true,
                false,
                geo.rows(),
                in_plane,
                cin,
                wdat,
                &xd[n * cin * in_plane..(n + 1) * cin * in_plane],
                T::zero(),
                &mut cols,
            );
            let dst = &mut out[n * cout * out_plane..(n + 1) * cout * out_plane];
            kernels::col2im(&cols, &geo, dst);
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    dst[c * out_plane..(c + 1) * out_plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::from_parts(vec![batch, cout, ho, wo], out);
        Ok(self.push(t, Op::ConvTranspose { x, w, b, geo }))
    }

    /// Batch normalisation over `[B, H, W]` per channel.
    ///
    /// In [`BnMode::Train`] the batch statistics are used and returned so the
    /// caller can fold them into its running averages; in [`BnMode::Eval`]
    /// `running` supplies mean and unbiased variance.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [batch, c, h, w] = dims4("batch_norm2d", self.value(x))?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape("batch_norm2d", &[c], self.value(v).shape()));
            }
        }
        let count = batch * h * w;
        let plane = h * w;
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d",
                        format!("train mode needs at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for n in 0..batch {
                        let o = (n * c + ch) * plane;
                        acc += xd[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for n in 0..batch {
                        let o = (n * c + ch) * plane;
                        sq += xd[o..o + plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::shape("batch_norm2d", &[c], &[running.0.len()]));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..batch {
            for ch in 0..c {
                let o = (n * c + ch) * plane;
                let m = T::of(mean[ch]);
                let scale = inv_std[ch] * g[ch];
                for i in o..o + plane {
                    out[i] = (xd[i] - m) * scale + bt[ch];
                }
            }
        }
        let t = Tensor::from_parts(vec![batch, c, h, w], out);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.iter().map(|&m| T::of(m)).collect(),
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        );
        Ok((v, stats))
    }

    /// Adaptive average pooling of `[B, C, H, W]` to `[B, C, S, S]`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, s: usize) -> Result<Var> {
        let [batch, c, h, w] = dims4("adaptive_avg_pool2d", self.value(x))?;
        if s == 0 {
            return Err(Error::invalid("adaptive_avg_pool2d", "output size must be >= 1"));
        }
        let out = kernels::adaptive_pool_forward(self.value(x).data(), batch * c, h, w, s);
        let t = Tensor::from_parts(vec![batch, c, s, s], out);
        Ok(self.push(t, Op::Pool(x, s)))
    }

    /// Bilinear resize (half-pixel centres) of `[B, C, h, w]` to `[B, C, H, W]`.
    pub fn bilinear_upsample2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [batch, c, h, w] = dims4("bilinear_upsample2d", self.value(x))?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("bilinear_upsample2d", "target size must be >= 1"));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), batch * c, h, w, oh, ow);
        let t = Tensor::from_parts(vec![batch, c, oh, ow], out);
        Ok(self.push(t, Op::Upsample(x)))
    }

    /// Concatenates two `[B, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let spatial: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * ca * spatial..(n + 1) * ca * spatial]);
            out.extend_from_slice(&db[n * cb * spatial..(n + 1) * cb * spatial]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b)))
    }

    /// Channels `start..start + len` of a `[B, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {xs:?}", start + len),
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * len * spatial);
        for n in 0..xs[0] {
            let o = (n * xs[1] + start) * spatial;
            out.extend_from_slice(&xd[o..o + len * spatial]);
        }
        let mut shape = xs;
        shape[1] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, start }))
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)`.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let ps = self.value(pred).shape();
        if target.shape() != ps {
            return Err(Error::shape("masked_mse", ps, target.shape()));
        }
        if mask.shape() != ps {
            return Err(Error::shape("masked_mse", ps, mask.shape()));
        }
        let denom: T = mask.data().iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::invalid("masked_mse", "mask selects no elements"));
        }
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((&p, &t), &m)| {
                if m == T::zero() {
                    T::zero()
                } else {
                    m * (p - t) * (p - t)
                }
            })
            .sum::<T>()
            / denom;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                denom,
            },
        ))
    }

    /// `out[n, k, i, j] = sum_q branch[n, k * p + q] * trunk[n, q, i, j]` with
    /// `branch: [B, K * p]` (trailing unit extents allowed) and `trunk: [B, p, H, W]`.
    pub fn latent_contract(&mut self, branch: Var, trunk: Var) -> Result<Var> {
        let [batch, p, h, w] = dims4("latent_contract", self.value(trunk))?;
        let bs = self.value(branch).shape().to_vec();
        let width: usize = bs[1..].iter().product();
        if bs[0] != batch || width % p != 0 {
            return Err(Error::invalid(
                "latent_contract",
                format!("branch {bs:?} incompatible with trunk {:?}", [batch, p, h, w]),
            ));
        }
        let k = width / p;
        let plane = h * w;
        let (bd, td) = (self.value(branch).data(), self.value(trunk).data());
        let mut out = vec![T::zero(); batch * k * plane];
        for n in 0..batch {
            kernels::gemm(
                false,
                false,
                k,
                plane,
                p,
                &bd[n * width..(n + 1) * width],
                &td[n * p * plane..(n + 1) * p * plane],
                T::zero(),
                &mut out[n * k * plane..(n + 1) * k * plane],
            );
        }
        let t = Tensor::from_parts(vec![batch, k, h, w], out);
        Ok(self.push(t, Op::LatentContract { branch, trunk }))
    }

    /// Adds `bias[c]` to every element of channel `c` of `[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 || self.value(bias).shape() != [xs[1]] {
            return Err(Error::shape("add_channel_bias", &xs[1..2], self.value(bias).shape()));
        }
        let spatial: usize = xs[2..].iter().product();
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[(i / spatial) % xs[1]];
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::ChannelBias(x, bias)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(bv) {
                        *d += x * o;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(av) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *k);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Act(a, kind) => {
                let (xv, yv) = (self.value(*a).data(), node.value.data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * kind.derivative(xv[i], yv[i]);
                    }
                }
            }
            Op::ChannelLinear { x, w, b } => self.backprop_channel_linear(*x, *w, *b, g, grads),
            Op::Conv { x, w, b, geo } => self.backprop_conv(*x, *w, *b, geo, g, grads),
            Op::ConvTranspose { x, w, b, geo } => {
                self.backprop_conv_transpose(*x, *w, *b, geo, g, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.backprop_batch_norm(*x, *gamma, *beta, mean, inv_std, *batch_stats, g, grads),
            Op::Pool(x, s) => {
                let [batch, c, h, w] = dims4("pool", self.value(*x)).expect("checked in forward");
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::adaptive_pool_backward(g, batch * c, h, w, *s, gx);
                }
            }
            Op::Upsample(x) => {
                let [batch, c, h, w] = dims4("upsample", self.value(*x)).expect("checked in forward");
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::bilinear_backward(g, batch * c, h, w, oh, ow, gx);
                }
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let spatial: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let batch = sa[0];
                if let Some(s) = self.slot(grads, *a) {
                    for n in 0..batch {
                        let src = &g[n * (ca + cb) * spatial..][..ca * spatial];
                        let dst = &mut s[n * ca * spatial..][..ca * spatial];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for n in 0..batch {
                        let src = &g[(n * (ca + cb) + ca) * spatial..][..cb * spatial];
                        let dst = &mut s[n * cb * spatial..][..cb * spatial];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Slice { x, start } => {
                let xs = self.value(*x).shape();
                let spatial: usize = xs[2..].iter().product();
                let len = node.value.shape()[1];
                let (batch, c) = (xs[0], xs[1]);
                if let Some(s) = self.slot(grads, *x) {
                    for n in 0..batch {
                        let dst = &mut s[(n * c + start) * spatial..][..len * spatial];
                        let src = &g[n * len * spatial..][..len * spatial];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            } => {
                let pv = self.value(*pred).data();
                let k = g[0] * T::of(2.0) / *denom;
                if let Some(s) = self.slot(grads, *pred) {
                    for i in 0..s.len() {
                        if mask[i] != T::zero() {
                            s[i] += k * mask[i] * (pv[i] - target[i]);
                        }
                    }
                }
            }
            Op::LatentContract { branch, trunk } => {
                let [batch, p, h, w] = dims4("latent_contract", self.value(*trunk)).expect("checked");
                let plane = h * w;
                let width = self.value(*branch).numel() / batch;
                let k = width / p;
                let (bd, td) = (self.value(*branch).data(), self.value(*trunk).data());
                if let Some(s) = self.slot(grads, *branch) {
                    for n in 0..batch {
                        kernels::gemm(
                            false,
                            true,
                            k,
                            p,
                            plane,
                            &g[n * k * plane..][..k * plane],
                            &td[n * p * plane..][..p * plane],
                            T::one(),
                            &mut s[n * width..][..width],
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *trunk) {
                    for n in 0..batch {
                        kernels::gemm(
                            true,
                            false,
                            p,
                            plane,
                            k,
                            &bd[n * width..][..width],
                            &g[n * k * plane..][..k * plane],
                            T::one(),
                            &mut s[n * p * plane..][..p * plane],
                        );
                    }
                }
            }
            Op::ChannelBias(x, bias) => {
                let xs = self.value(*x).shape();
                let spatial: usize = xs[2..].iter().product();
                let c = xs[1];
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for (i, &v) in g.iter().enumerate() {
                        s[(i / spatial) % c] += v;
                    }
                }
            }
        }
    }

    fn backprop_channel_linear(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.value(x).shape();
        let (batch, cin) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let cout = self.value(w).shape()[0];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if let Some(gw) = self.slot(grads, w) {
            for n in 0..batch {
                kernels::gemm(
                    false,
                    true,
                    cout,
                    cin,
                    spatial,
                    &g[n * cout * spatial..][..cout * spatial],
                    &xd[n * cin * spatial..][..cin * spatial],
                    T::one(),
                    gw,
                );
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                accumulate_channel_sums(g, batch, cout, spatial, gb);
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            for n in 0..batch {
                kernels::gemm(
                    true,
                    false,
                    cin,
                    spatial,
                    cout,
                    wd,
                    &g[n * cout * spatial..][..cout * spatial],
                    T::one(),
                    &mut gx[n * cin * spatial..][..cin * spatial],
                );
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: &Window,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let batch = self.value(x).shape()[0];
        let cout = self.value(w).shape()[0];
        let in_plane = geo.channels * geo.h * geo.w;
        let plane = geo.cols();
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut cols = vec![T::zero(); geo.rows() * plane];
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                accumulate_channel_sums(g, batch, cout, plane, gb);
            }
        }
        let want_w = self.nodes[w.0].requires_grad;
        let want_x = self.nodes[x.0].requires_grad;
        if want_w {
            let gw = self.slot(grads, w).expect("requires grad");
            for n in 0..batch {
                kernels::im2col(&xd[n * in_plane..][..in_plane], geo, &mut cols);
                kernels::gemm(
                    false,
                    true,
                    cout,
                    geo.rows(),
                    plane,
                    &g[n * cout * plane..][..cout * plane],
                    &cols,
                    T::one(),
                    gw,
                );
            }
        }
        if want_x {
            let gx = self.slot(grads, x).expect("requires grad");
            for n in 0..batch {
                kernels::gemm(
                    true,
                    false,
                    geo.rows(),
                    plane,
                    cout,
                    wd,
                    &g[n * cout * plane..][..cout * plane],
                    T::zero(),
                    &mut cols,
                );
                kernels::col2im(&cols, geo, &mut gx[n * in_plane..][..in_plane]);
            }
        }
    }

    fn backprop_conv_transpose(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: &Window,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [batch, cin, h, wd_] = dims4("conv_transpose2d", self.value(x)).expect("checked");
        let cout = geo.channels;
        let in_plane = h * wd_;
        let out_plane = geo.h * geo.w;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                accumulate_channel_sums(g, batch, cout, out_plane, gb);
            }
        }
        let want_w = self.nodes[w.0].requires_grad;
        let want_x = self.nodes[x.0].requires_grad;
        if !want_w && !want_x {
            return;
        }
        let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
        for n in 0..batch {
            kernels::im2col(&g[n * cout * out_plane..][..cout * out_plane], geo, &mut cols);
            if want_w {
                let gw = self.slot(grads, w).expect("requires grad");
                kernels::gemm(
                    false,
                    true,
                    cin,
                    geo.rows(),
                    in_plane,
                    &xd[n * cin * in_plane..][..cin * in_plane],
                    &cols,
                    T::one(),
                    gw,
                );
            }
            if want_x {
                let gx = self.slot(grads, x).expect("requires grad");
                kernels::gemm(
                    false,
                    false,
                    cin,
                    in_plane,
                    geo.rows(),
                    wd,
                    &cols,
                    T::one(),
                    &mut gx[n * cin * in_plane..][..cin * in_plane],
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [batch, c, h, w] = dims4("batch_norm2d", self.value(x)).expect("checked");
        let plane = h * w;
        let count = T::of((batch * plane) as f64);
        let gam = self.value(gamma).data();
        let xd = self.value(x).data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for n in 0..batch {
            for ch in 0..c {
                let o = (n * c + ch) * plane;
                for i in o..o + plane {
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat;
                }
            }
        }
        if let Some(gg) = self.slot(grads, gamma) {
            gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
        }
        if let Some(gb) = self.slot(grads, beta) {
            gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
        }
        if let Some(gx) = self.slot(grads, x) {
            for n in 0..batch {
                for ch in 0..c {
                    let o = (n * c + ch) * plane;
                    let k = gam[ch] * inv_std[ch];
                    for i in o..o + plane {
                        if batch_stats {
                            let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                            gx[i] += k * (g[i] - sum_g[ch] / count - xhat * sum_gx[ch] / count);
                        } else {
                            gx[i] += k * g[i];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate_channel_sums<T: Scalar>(g: &[T], batch: usize, c: usize, plane: usize, out: &mut [T]) {
    for n in 0..batch {
        for ch in 0..c {
            out[ch] += g[(n * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
}
