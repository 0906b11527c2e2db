//! Encoder and decoder networks.

use candle_core::{Device, Tensor};

use super::layers::{Activation, Builder, Init, Linear, Mlp, TemporalConv};
use super::ops::elu;
use super::xca::XcaBlock;
use super::{temporal_positional_encoding, ModelConfig, ModelError};

fn positional_tensor(cfg: &ModelConfig, frames: usize, like: &Tensor) -> Result<Tensor, ModelError> {
    let pe = temporal_positional_encoding(frames, cfg.channels, cfg.positional_base);
    Ok(Tensor::from_vec(pe, (cfg.channels, frames), &Device::Cpu)?
        .t()?
        .to_dtype(like.dtype())?)
}

fn conv_stack(
    b: &mut Builder,
    name: &str,
    inp: usize,
    widths: &[usize],
    kernel: usize,
) -> Result<Vec<TemporalConv>, ModelError> {
    b.scope(name, |b| {
        let mut fan = inp;
        let mut out = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            out.push(TemporalConv::new(b, &i.to_string(), fan, w, kernel)?);
            fan = w;
        }
        Ok(out)
    })
}

fn run_convs(convs: &[TemporalConv], x: &Tensor, act: Activation) -> candle_core::Result<Tensor> {
    let mut h = x.clone();
    for c in convs {
        h = act.apply(&c.forward(&h)?)?;
    }
    Ok(h)
}

fn check_inputs(motion_or_latent: &Tensor, template: &Tensor, what: &str) -> Result<(usize, usize), ModelError> {
    let (b, j, c) = template
        .dims3()
        .map_err(|_| ModelError::Shape(format!("template must be (batch, joints, 3), got {:?}", template.dims())))?;
    if c != 3 || j == 0 {
        return Err(ModelError::Shape(format!("template must be (batch, joints, 3), got {:?}", template.dims())));
    }
    if motion_or_latent.dim(0)? != b {
        return Err(ModelError::Shape(format!("{what} batch differs from template batch")));
    }
    Ok((b, j))
}

/// Motion + template to latent code.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    motion_convs: Vec<TemporalConv>,
    motion_linear: Mlp,
    template_mlp: Mlp,
    merge: Linear,
    /// Learned aggregation token, shape `(channels,)`.
    pub latent_token: Tensor,
    pub blocks: Vec<XcaBlock>,
    head: Linear,
}

impl Encoder {
    /// `motion (B, J, F, 3)`, `template (B, J, 3)` to `(B, F, Z)`.
    pub fn forward(&self, motion: &Tensor, template: &Tensor) -> Result<Tensor, ModelError> {
        let (b, j) = check_inputs(motion, template, "motion")?;
        let f = match motion.dims() {
            &[_, mj, f, 3] if mj == j && f > 0 => f,
            d => {
                return Err(ModelError::Shape(format!(
                    "motion must be (batch, {j}, frames, 3), got {d:?}"
                )))
            }
        };
        let m = run_convs(&self.motion_convs, motion, Activation::Elu)?;
        let m = self.motion_linear.forward(&m)?;
        let t = self.template_mlp.forward(template)?;
        let tw = t.dim(2)?;
        let t = t.unsqueeze(2)?.broadcast_as((b, j, f, tw))?;
        let x = self.merge.forward(&Tensor::cat(&[&t, &m], 3)?)?;
        let pe = positional_tensor(&self.cfg, f, &x)?;
        let x = x.broadcast_add(&pe)?;
        let c = self.cfg.channels;
        let tok = self.latent_token.reshape((1, 1, 1, c))?.broadcast_as((b, 1, f, c))?;
        let mut x = Tensor::cat(&[&x, &tok], 1)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let latent = x.narrow(1, j, 1)?.squeeze(1)?;
        Ok(self.head.forward(&latent)?)
    }
}

/// Per-block part of the style pathway.
#[derive(Clone, Debug)]
struct StyleHead {
    conv: TemporalConv,
    linear: Linear,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

/// Latent code + template to motion.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: ModelConfig,
    template_mlp: Mlp,
    style_trunk: Vec<TemporalConv>,
    style_heads: Vec<StyleHead>,
    pub blocks: Vec<XcaBlock>,
    output_convs: Vec<TemporalConv>,
    output_linear: Mlp,
}

impl Decoder {
    /// `latent (B, F, Z)`, `template (B, J, 3)` to `(B, J, F, 3)`.
    pub fn forward(&self, latent: &Tensor, template: &Tensor) -> Result<Tensor, ModelError> {
        let (b, j) = check_inputs(latent, template, "latent")?;
        let f = match latent.dims() {
            &[_, f, z] if z == self.cfg.latent_size && f > 0 => f,
            d => {
                return Err(ModelError::Shape(format!(
                    "latent must be (batch, frames, {}), got {d:?}",
                    self.cfg.latent_size
                )))
            }
        };
        let c = self.cfg.channels;
        let t = self.template_mlp.forward(template)?;
        let x = t.unsqueeze(2)?.broadcast_as((b, j, f, c))?;
        let pe = positional_tensor(&self.cfg, f, &x)?;
        let mut x = x.broadcast_add(&pe)?;
        let trunk = run_convs(&self.style_trunk, latent, Activation::Elu)?;
        for (blk, head) in self.blocks.iter().zip(&self.style_heads) {
            let s = elu(&head.conv.forward(&trunk)?)?;
            let s = elu(&head.linear.forward(&s)?)?;
            let s = head.mlp_hidden.forward(&s)?.relu()?;
            let s = head.mlp_out.forward(&s)?;
            x = x.broadcast_mul(&s.unsqueeze(1)?)?;
            x = blk.forward(&x)?;
        }
        let y = run_convs(&self.output_convs, &x, Activation::Elu)?;
        Ok(self.output_linear.forward(&y)?)
    }
}

fn hidden_then_none(n: usize, act: Activation) -> Vec<Activation> {
    let mut v = vec![act; n];
    if let Some(last) = v.last_mut() {
        *last = Activation::None;
    }
    v
}

pub(crate) fn build(b: &mut Builder, cfg: &ModelConfig) -> Result<(Encoder, Decoder), ModelError> {
    let c = cfg.channels;
    let k = cfg.temporal_kernel;
    let encoder = b.scope("encoder", |b| -> Result<Encoder, ModelError> {
        let motion_convs = conv_stack(b, "motion_conv", 3, &cfg.motion_conv_widths, k)?;
        let conv_out = *cfg.motion_conv_widths.last().expect("validated");
        let motion_linear = Mlp::new(
            b,
            "motion_linear",
            conv_out,
            &cfg.motion_linear_widths,
            &vec![Activation::Elu; cfg.motion_linear_widths.len()],
        )?;
        let template_mlp = Mlp::new(
            b,
            "template_mlp",
            3,
            &cfg.encoder_template_widths,
            &vec![Activation::Elu; cfg.encoder_template_widths.len()],
        )?;
        let merged = cfg.encoder_template_widths.last().expect("validated")
            + cfg.motion_linear_widths.last().expect("validated");
        let merge = Linear::new(b, "merge", merged, c)?;
        let latent_token = b.param("latent_token", &[c], Init::Normal(0.02))?;
        let blocks = (0..cfg.blocks)
            .map(|i| XcaBlock::new(b, &format!("block{i}"), c, cfg.heads, cfg.lpi_kernel, cfg.ffn_expansion))
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::new(b, "head", c, cfg.latent_size)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            motion_convs,
            motion_linear,
            template_mlp,
            merge,
            latent_token,
            blocks,
            head,
        })
    })?;
    let decoder = b.scope("decoder", |b| -> Result<Decoder, ModelError> {
        let template_mlp = Mlp::new(
            b,
            "template_mlp",
            3,
            &cfg.decoder_template_widths,
            &hidden_then_none(cfg.decoder_template_widths.len(), Activation::Relu),
        )?;
        let s = cfg.style_width;
        let style_trunk = conv_stack(b, "style_trunk", cfg.latent_size, &[s, s], k)?;
        let mut style_heads = Vec::with_capacity(cfg.blocks);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let head = b.scope(format!("style{i}"), |b| -> Result<StyleHead, ModelError> {
                let conv = TemporalConv::new(b, "conv", s, s, k)?;
                let linear = Linear::new(b, "linear", s, s)?;
                let mlp_hidden = Linear::new(b, "mlp.0", s, s)?;
                // the style code multiplies tokens; start around unit scaling
                let mlp_out = Linear::with_bias(b, "mlp.1", s, c, 1.0)?;
                Ok(StyleHead { conv, linear, mlp_hidden, mlp_out })
            })?;
            style_heads.push(head);
            blocks.push(XcaBlock::new(b, &format!("block{i}"), c, cfg.heads, cfg.lpi_kernel, cfg.ffn_expansion)?);
        }
        let output_convs = conv_stack(b, "output_conv", c, &cfg.output_conv_widths, k)?;
        let conv_out = *cfg.output_conv_widths.last().expect("validated");
        let output_linear = Mlp::new(
            b,
            "output_linear",
            conv_out,
            &cfg.output_linear_widths,
            &hidden_then_none(cfg.output_linear_widths.len(), Activation::Elu),
        )?;
        Ok(Decoder {
            cfg: cfg.clone(),
            template_mlp,
            style_trunk,
            style_heads,
            blocks,
            output_convs,
            output_linear,
        })
    })?;
    Ok((encoder, decoder))
}
