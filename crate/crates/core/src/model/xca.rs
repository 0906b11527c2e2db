//! Cross-covariance transformer block over a (row, frame) token grid.

use candle_core::{Tensor, D};

use super::ops::{depthwise, gelu};
use super::layers::{softmax_last, Builder, Init, LayerNorm, Linear};
use super::ModelError;

/// Pre-normalized residual block: cross-covariance attention, local patch
/// interaction, feed-forward.
///
/// Tokens are laid out `(batch, rows, frames, channels)`.
#[derive(Clone, Debug)]
pub struct XcaBlock {
    channels: usize,
    heads: usize,
    lpi_kernel: usize,
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    /// Per-head scale of the attention logits, shape `(heads, 1, 1)`.
    pub temperature: Tensor,
    pub proj: Linear,
    pub norm_lpi: LayerNorm,
    /// Depthwise kernel, shape `(k*k, channels)`, row-major over (row, frame) taps.
    pub lpi_depthwise: Tensor,
    pub lpi_depthwise_bias: Tensor,
    pub lpi_pointwise: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl XcaBlock {
    pub(crate) fn new(
        bld: &mut Builder,
        name: &str,
        channels: usize,
        heads: usize,
        lpi_kernel: usize,
        ffn_expansion: usize,
    ) -> Result<Self, ModelError> {
        if heads == 0 || channels % heads != 0 {
            return Err(ModelError::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        if lpi_kernel % 2 == 0 {
            return Err(ModelError::Config(format!("LPI kernel {lpi_kernel} must be odd")));
        }
        bld.scope(name, |b| {
            let taps = lpi_kernel * lpi_kernel;
            Ok(XcaBlock {
                channels,
                heads,
                lpi_kernel,
                norm_attn: LayerNorm::new(b, "norm_attn", channels)?,
                qkv: Linear::new(b, "qkv", channels, 3 * channels)?,
                temperature: b.param("temperature", &[heads, 1, 1], Init::Const(1.0))?,
                proj: Linear::new(b, "proj", channels, channels)?,
                norm_lpi: LayerNorm::new(b, "norm_lpi", channels)?,
                lpi_depthwise: b.param("lpi_depthwise.weight", &[taps, channels], Init::VarianceScaling { fan_in: taps })?,
                lpi_depthwise_bias: b.param("lpi_depthwise.bias", &[channels], Init::Const(0.0))?,
                lpi_pointwise: Linear::new(b, "lpi_pointwise", channels, channels)?,
                norm_ffn: LayerNorm::new(b, "norm_ffn", channels)?,
                ffn_in: Linear::new(b, "ffn_in", channels, ffn_expansion * channels)?,
                ffn_out: Linear::new(b, "ffn_out", ffn_expansion * channels, channels)?,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize), ModelError> {
        match x.dims() {
            &[b, r, f, c] if c == self.channels && r > 0 && f > 0 => Ok((b, r, f)),
            d => Err(ModelError::Shape(format!(
                "token grid must be (batch, rows, frames, {}), got {d:?}",
                self.channels
            ))),
        }
    }

    /// Full block on a `(batch, rows, frames, channels)` grid.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check(x)?;
        let x = (x + self.attention(&self.norm_attn.forward(x)?)?)?;
        let x = (&x + self.local_patch(&self.norm_lpi.forward(&x)?)?)?;
        let h = self.norm_ffn.forward(&x)?;
        let h = self.ffn_out.forward(&gelu(&self.ffn_in.forward(&h)?)?)?;
        Ok((x + h)?)
    }

    /// Forward of the residual attention sublayer alone, normalization
    /// included: `x + attention(norm(x))`.
    pub fn attention_sublayer(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check(x)?;
        Ok((x + self.attention(&self.norm_attn.forward(x)?)?)?)
    }

    /// Cross-covariance attention: per head, a `d x d` channel-attention
    /// matrix from L2-normalized queries and keys taken over all tokens.
    fn attention(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let (b, r, f) = self.check(x)?;
        let n = r * f;
        let c = self.channels;
        let h = self.heads;
        let d = c / h;
        // (b, n, 3, h, d) -> (3, b, h, d, n)
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, h, d))?.permute((2, 0, 3, 4, 1))?;
        let q = l2_normalize_last(&qkv.get(0)?)?;
        let k = l2_normalize_last(&qkv.get(1)?)?;
        let v = qkv.get(2)?.contiguous()?;
        let logits = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature)?;
        let attn = softmax_last(&logits)?;
        // (b, h, d, n) -> (b, n, h, d)
        let out = attn.matmul(&v)?.permute((0, 3, 1, 2))?.reshape((b, r, f, c))?;
        Ok(self.proj.forward(&out)?)
    }

    /// Depthwise `k x k` convolution over the (row, frame) grid, GELU, then
    /// a pointwise channel mix.
    fn local_patch(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check(x)?;
        let dw = depthwise(x, &self.lpi_depthwise, &self.lpi_depthwise_bias, self.lpi_kernel)?;
        let dw = gelu(&dw)?;
        Ok(self.lpi_pointwise.forward(&dw)?)
    }
}

fn l2_normalize_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&norm)
}
