//! Template-conditioned transformer autoencoder.
//!
//! The encoder maps a motion sequence on any skeleton, together with that
//! skeleton's neutral template, to a latent code of fixed width per frame.
//! The decoder maps a latent code and any template back to joint positions.

mod checkpoint;
mod layers;
mod network;
mod ops;
mod xca;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::skeleton::{MotionSequence, SkeletonTemplate, Vec3};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Activation, Init, LayerNorm, Linear, Mlp, ParamStore, TemporalConv};
pub use network::{Decoder, Encoder};
pub use xca::XcaBlock;

/// Parameter count of the reference architecture, for comparison only.
pub const REFERENCE_PARAMETER_COUNT: usize = 2_475_511;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("joint count mismatch: sequence has {seq}, template has {template}")]
    JointMismatch { seq: usize, template: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub latent_size: usize,
    /// Output widths of the joint-wise temporal convolutions on motion.
    pub motion_conv_widths: Vec<usize>,
    /// Linear layers following the motion convolutions.
    pub motion_linear_widths: Vec<usize>,
    pub temporal_kernel: usize,
    pub encoder_template_widths: Vec<usize>,
    /// Last width must equal `channels`.
    pub decoder_template_widths: Vec<usize>,
    pub output_conv_widths: Vec<usize>,
    /// Last width must be 3.
    pub output_linear_widths: Vec<usize>,
    pub style_width: usize,
    pub lpi_kernel: usize,
    pub ffn_expansion: usize,
    pub positional_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 128,
            blocks: 4,
            heads: 8,
            latent_size: 128,
            motion_conv_widths: vec![3, 16, 32, 64],
            motion_linear_widths: vec![64, 64, 64],
            temporal_kernel: 3,
            encoder_template_widths: vec![16, 32, 64],
            decoder_template_widths: vec![16, 32, 64, 128],
            output_conv_widths: vec![128, 128, 128],
            output_linear_widths: vec![128, 128, 3],
            style_width: 128,
            lpi_kernel: 3,
            ffn_expansion: 4,
            positional_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Small network used for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 8,
            blocks: 1,
            heads: 2,
            latent_size: 4,
            motion_conv_widths: vec![4],
            motion_linear_widths: vec![4],
            temporal_kernel: 3,
            encoder_template_widths: vec![4],
            decoder_template_widths: vec![4, 8],
            output_conv_widths: vec![8],
            output_linear_widths: vec![4, 3],
            style_width: 8,
            lpi_kernel: 3,
            ffn_expansion: 2,
            positional_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let lists: [(&str, &Vec<usize>); 6] = [
            ("motion_conv_widths", &self.motion_conv_widths),
            ("motion_linear_widths", &self.motion_linear_widths),
            ("encoder_template_widths", &self.encoder_template_widths),
            ("decoder_template_widths", &self.decoder_template_widths),
            ("output_conv_widths", &self.output_conv_widths),
            ("output_linear_widths", &self.output_linear_widths),
        ];
        for (name, l) in lists {
            if l.is_empty() || l.contains(&0) {
                return bad(format!("{name} must be non-empty with positive widths"));
            }
        }
        for (name, v) in [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("latent_size", self.latent_size),
            ("style_width", self.style_width),
            ("ffn_expansion", self.ffn_expansion),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.channels % 2 != 0 {
            return bad("channels must be even for the positional encoding".into());
        }
        if self.temporal_kernel % 2 == 0 || self.lpi_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.decoder_template_widths.last() != Some(&self.channels) {
            return bad("last decoder template width must equal channels".into());
        }
        if self.output_linear_widths.last() != Some(&3) {
            return bad("last output width must be 3".into());
        }
        if !(self.positional_base.is_finite() && self.positional_base > 1.0) {
            return bad("positional_base must be > 1".into());
        }
        Ok(())
    }
}

/// Interleaved sine/cosine encoding of frame indices, `C x F` channel-major:
/// entry `(2k, f)` is `sin(f * rate(k))` and `(2k + 1, f)` is
/// `cos(f * rate(k))`, with `rate(k) = base^(-2k / C)`.
pub fn temporal_positional_encoding(frames: usize, channels: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; frames * channels];
    for k in 0..channels / 2 {
        let rate = positional_rate(k, channels, base);
        for f in 0..frames {
            let a = f as f64 * rate;
            out[2 * k * frames + f] = a.sin();
            out[(2 * k + 1) * frames + f] = a.cos();
        }
    }
    out
}

pub fn positional_rate(k: usize, channels: usize, base: f64) -> f64 {
    base.powf(-(2.0 * k as f64) / channels as f64)
}

/// Skeleton-free code of a motion: `Z x F`, row-major (`values[z * F + f]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub latent_size: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn zeros(latent_size: usize, frames: usize) -> Self {
        LatentCode { latent_size, frames, values: vec![0.0; latent_size * frames] }
    }

    pub fn get(&self, z: usize, f: usize) -> f64 {
        self.values[z * self.frames + f]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The autoencoder with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    dtype: DType,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Freshly initialized model; the same seed gives bitwise-equal weights.
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = layers::Builder::fresh(seed, dtype);
        let (encoder, decoder) = network::build(&mut b, &config)?;
        let params = b.finish()?;
        Ok(Model { config, dtype, params, encoder, decoder })
    }

    /// Rebuilds a model around existing parameter values.
    pub fn from_params(config: ModelConfig, dtype: DType, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = layers::Builder::existing(params, dtype);
        let (encoder, decoder) = network::build(&mut b, &config)?;
        let params = b.finish()?;
        Ok(Model { config, dtype, params, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Number of learnable scalars, latent token included.
    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Batched encoder: motion `(B, J, F, 3)`, template `(B, J, 3)` to
    /// latents `(B, F, Z)`.
    pub fn encode_tensor(&self, motion: &Tensor, template: &Tensor) -> Result<Tensor, ModelError> {
        self.encoder.forward(motion, template)
    }

    /// Batched decoder: latents `(B, F, Z)`, template `(B, J, 3)` to motion
    /// `(B, J, F, 3)`.
    pub fn decode_tensor(&self, latent: &Tensor, template: &Tensor) -> Result<Tensor, ModelError> {
        self.decoder.forward(latent, template)
    }

    pub fn encode(&self, seq: &MotionSequence, t: &SkeletonTemplate) -> Result<LatentCode, ModelError> {
        if seq.joint_count() != t.joint_count() {
            return Err(ModelError::JointMismatch { seq: seq.joint_count(), template: t.joint_count() });
        }
        let motion = sequence_tensor(seq, self.dtype)?.unsqueeze(0)?;
        let template = template_tensor(t, self.dtype)?.unsqueeze(0)?;
        let z = self.encode_tensor(&motion, &template)?.squeeze(0)?;
        let (frames, latent) = z.dims2()?;
        let values: Vec<f64> = z.t()?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let code = LatentCode { latent_size: latent, frames, values };
        if !code.is_finite() {
            return Err(ModelError::NonFinite("latent code"));
        }
        Ok(code)
    }

    pub fn decode(&self, z: &LatentCode, t: &SkeletonTemplate, framerate: f64) -> Result<MotionSequence, ModelError> {
        if z.latent_size != self.config.latent_size || z.values.len() != z.latent_size * z.frames || z.frames == 0 {
            return Err(ModelError::Shape(format!(
                "latent must be {} x F with F >= 1, got {} x {}",
                self.config.latent_size, z.latent_size, z.frames
            )));
        }
        if !z.is_finite() {
            return Err(ModelError::NonFinite("latent code"));
        }
        let latent = Tensor::from_slice(&z.values, (z.latent_size, z.frames), &Device::Cpu)?
            .t()?
            .to_dtype(self.dtype)?
            .unsqueeze(0)?;
        let template = template_tensor(t, self.dtype)?.unsqueeze(0)?;
        let out = self.decode_tensor(&latent, &template)?.squeeze(0)?;
        let seq = tensor_sequence(&out, t, framerate)?;
        Ok(seq)
    }

    /// Encode then decode under the same template.
    pub fn reconstruct(&self, seq: &MotionSequence, t: &SkeletonTemplate) -> Result<MotionSequence, ModelError> {
        let z = self.encode(seq, t)?;
        self.decode(&z, t, seq.framerate())
    }
}

/// Motion as a `(J, F, 3)` tensor.
pub fn sequence_tensor(seq: &MotionSequence, dtype: DType) -> Result<Tensor, ModelError> {
    let (j, f) = (seq.joint_count(), seq.frame_count());
    let mut data = Vec::with_capacity(j * f * 3);
    for joint in 0..j {
        for frame in 0..f {
            data.extend_from_slice(seq.at(joint, frame).as_slice());
        }
    }
    Ok(Tensor::from_vec(data, (j, f, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Neutral pose as a `(J, 3)` tensor.
pub fn template_tensor(t: &SkeletonTemplate, dtype: DType) -> Result<Tensor, ModelError> {
    let data: Vec<f64> = t.positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Ok(Tensor::from_vec(data, (t.joint_count(), 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`sequence_tensor`] on the template's topology.
pub fn tensor_sequence(x: &Tensor, t: &SkeletonTemplate, framerate: f64) -> Result<MotionSequence, ModelError> {
    let (j, f, _) = x.dims3()?;
    if j != t.joint_count() {
        return Err(ModelError::JointMismatch { seq: j, template: t.joint_count() });
    }
    let data: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("decoded positions"));
    }
    let mut pos = vec![Vec3::zeros(); j * f];
    for joint in 0..j {
        for frame in 0..f {
            let o = (joint * f + frame) * 3;
            pos[frame * j + joint] = Vec3::new(data[o], data[o + 1], data[o + 2]);
        }
    }
    MotionSequence::new(t.topology().clone(), pos, framerate).map_err(|e| ModelError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_heads() {
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn positional_encoding_frame_zero() {
        let pe = temporal_positional_encoding(4, 8, 10_000.0);
        for k in 0..4 {
            assert_eq!(pe[2 * k * 4], 0.0);
            assert_eq!(pe[(2 * k + 1) * 4], 1.0);
        }
    }

    #[test]
    fn single_linear_parameter_count() {
        let mut b = layers::Builder::fresh(0, DType::F32);
        Linear::new(&mut b, "l", 3, 4).unwrap();
        assert_eq!(b.finish().unwrap().element_count(), 16);
    }
}
