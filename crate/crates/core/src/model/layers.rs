use crate::autodiff::{Activation, Var};
use crate::error::{Error, Result};
use crate::init::xavier_init;
use crate::tensor::{Scalar, Tensor};

use super::Session;

/// Index into a model's flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Collects named parameters while the network is assembled.
pub(crate) struct Builder<T: Scalar> {
    seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub bn: Vec<BnBuffers>,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            bn: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn param_seed(&self) -> u64 {
        // Each tensor gets its own stream derived from the model seed.
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.tensors.len() as u64 + 1)
    }

    pub fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize, shape: &[usize]) -> Result<ParamId> {
        let t = xavier_init(fan_in, fan_out, shape, self.param_seed())?;
        Ok(self.push(name, t))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.push(name, Tensor::full(shape, T::of(value))?))
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let gamma = self.constant(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = self.constant(format!("{name}.beta"), &[channels], 0.0)?;
        self.bn.push(BnBuffers {
            name: name.to_string(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        });
        Ok(BatchNorm {
            gamma,
            beta,
            slot: self.bn.len() - 1,
        })
    }
}

/// Pointwise affine map over channels (a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let weight = b.xavier(format!("{name}.weight"), fan_in, fan_out, &[fan_out, fan_in])?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), self.bias.map(|b| s.param(b)));
        s.tape.channel_linear(x, w, b)
    }
}

/// Stack of pointwise linear layers with a hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(b, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    /// Applies every layer; the activation follows all but the last.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i < last {
                x = s.tape.activation(x, self.activation);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.batch_norm(x, g, b, self.slot)
    }
}

/// 3×3 convolution without bias, batch norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
}

impl ConvBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let weight = b.xavier(format!("{name}.conv.weight"), cin * 9, cout * 9, &[cout, cin, 3, 3])?;
        let bn = b.batch_norm(&format!("{name}.bn"), cout)?;
        Ok(Self { weight, bn, stride })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, act: Activation) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.conv2d(x, w, None, self.stride, 1)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.tape.activation(y, act))
    }
}

/// 4×4 stride-2 transposed convolution with bias, doubling the extent.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = b.xavier(format!("{name}.weight"), cout * 16, cin * 16, &[cin, cout, 4, 4])?;
        let bias = b.constant(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { weight, bias })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, act: Activation) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.conv_transpose2d(x, w, Some(b), 2, 1)?;
        Ok(s.tape.activation(y, act))
    }
}

/// Encoder-decoder on the pooled `S×S` latent.
///
/// Encoder widths are `c, 2c, 4c` at `S/2, S/4, S/8`, followed by a stride-1
/// bottleneck. Each decoder stage concatenates its input with the encoder
/// feature of the same extent before upsampling. The output layer is a 1×1
/// convolution over the last decoder features concatenated with the pooled input.
#[derive(Debug, Clone)]
pub struct UNet {
    pub enc: [ConvBlock; 3],
    pub mid: ConvBlock,
    pub dec: [UpBlock; 3],
    pub out: Linear,
    pub pool: usize,
    pub activation: Activation,
}

impl UNet {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        p: usize,
        c: usize,
        pool: usize,
        activation: Activation,
    ) -> Result<Self> {
        let enc = [
            ConvBlock::new(b, &format!("{name}.enc1"), p, c, 2)?,
            ConvBlock::new(b, &format!("{name}.enc2"), c, 2 * c, 2)?,
            ConvBlock::new(b, &format!("{name}.enc3"), 2 * c, 4 * c, 2)?,
        ];
        let mid = ConvBlock::new(b, &format!("{name}.mid"), 4 * c, 4 * c, 1)?;
        let dec = [
            UpBlock::new(b, &format!("{name}.dec3"), 8 * c, 2 * c)?,
            UpBlock::new(b, &format!("{name}.dec2"), 4 * c, c)?,
            UpBlock::new(b, &format!("{name}.dec1"), 2 * c, p)?,
        ];
        let out = Linear::new(b, &format!("{name}.out"), 2 * p, p, true)?;
        Ok(Self {
            enc,
            mid,
            dec,
            out,
            pool,
            activation,
        })
    }

    /// Pools `[B, p, H, W]` to `S×S`, runs the encoder-decoder and resizes back.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if self.pool % 8 != 0 {
            return Err(Error::Config(format!(
                "the U-Net needs pool_size divisible by 8, got {}",
                self.pool
            )));
        }
        let shape = s.tape.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let act = self.activation;
        let q = s.tape.adaptive_avg_pool2d(x, self.pool)?;
        s.record("pool", q);
        let e1 = self.enc[0].forward(s, q, act)?;
        s.record("enc1", e1);
        let e2 = self.enc[1].forward(s, e1, act)?;
        s.record("enc2", e2);
        let e3 = self.enc[2].forward(s, e2, act)?;
        s.record("enc3", e3);
        let m = self.mid.forward(s, e3, act)?;
        s.record("mid", m);
        let mut d = m;
        for ((up, skip), label) in self.dec.iter().zip([e3, e2, e1]).zip(["dec3", "dec2", "dec1"]) {
            let cat = s.tape.concat_channels(d, skip)?;
            d = up.forward(s, cat, act)?;
            s.record(label, d);
        }
        let cat = s.tape.concat_channels(d, q)?;
        let y = self.out.forward(s, cat)?;
        s.record("out", y);
        s.tape.bilinear_upsample2d(y, h, w)
    }
}

/// Spatial processor applied to an encoded latent.
#[derive(Debug, Clone)]
pub enum Spatial {
    UNet(UNet),
    /// Per-pixel MLP `p → h → h → p` standing in for the U-Net.
    Pointwise(Mlp),
}

impl Spatial {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Spatial::UNet(u) => u.forward(s, x),
            Spatial::Pointwise(m) => m.forward(s, x),
        }
    }
}

/// Scalar count of a U-Net with latent `p` and base width `c`.
pub fn unet_param_count(p: usize, c: usize) -> usize {
    let conv_bn = |cin: usize, cout: usize| cin * cout * 9 + 2 * cout;
    let up = |cin: usize, cout: usize| cin * cout * 16 + cout;
    conv_bn(p, c)
        + conv_bn(c, 2 * c)
        + conv_bn(2 * c, 4 * c)
        + conv_bn(4 * c, 4 * c)
        + up(8 * c, 2 * c)
        + up(4 * c, c)
        + up(2 * c, p)
        + 2 * p * p
        + p
}

/// Scalar count of the pointwise MLP `p → h → h → p`.
pub fn pointwise_param_count(p: usize, h: usize) -> usize {
    (p * h + h) + (h * h + h) + (h * p + p)
}

/// Hidden width whose pointwise MLP count is closest to `target`.
pub fn matched_hidden_width(p: usize, target: usize) -> usize {
    let mut best = 1;
    let mut h = 1;
    loop {
        let n = pointwise_param_count(p, h);
        if n.abs_diff(target) < pointwise_param_count(p, best).abs_diff(target) {
            best = h;
        }
        if n > target {
            return best;
        }
        h += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_width_brackets_target() {
        let target = unet_param_count(20, 8);
        let h = matched_hidden_width(20, target);
        let n = pointwise_param_count(20, h);
        assert!(n.abs_diff(target) as f64 / target as f64 <= 0.05);
        assert!(pointwise_param_count(20, h + 1).abs_diff(target) >= n.abs_diff(target));
    }
}
