//! The two-headed autoencoder: one encoder, a segmentation decoder and a
//! regression decoder whose outputs are combined by threshold masking.

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::build::build_graphs;
use super::graph::LayerGraph;
use super::spec::ModelSpec;
use crate::data::{clip_rows, LogWedge};
use crate::error::{Error, Result};
use crate::tensor::{activation_forward, Activation, Precision, Tensor};

/// Compressed latent of one wedge.
#[derive(Debug, Clone, PartialEq)]
pub struct Code {
    pub shape: Vec<usize>,
    pub payload: Vec<f16>,
    pub model_id: String,
    /// Wedge extents before horizontal padding.
    pub original_extents: [usize; 3],
}

impl Code {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn values(&self) -> Vec<f32> {
        self.payload.iter().map(|h| h.to_f32()).collect()
    }
}

/// Decoder outputs, clipped to the original wedge extents.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub extents: [usize; 3],
    /// Segmentation probabilities.
    pub seg: Vec<f32>,
    /// Transformed regression output, at or above the transform offset. It
    /// can overflow to infinity where the mask is off.
    pub reg: Vec<f32>,
    pub reconstruction: LogWedge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bcae {
    pub spec: ModelSpec,
    pub encoder: LayerGraph,
    pub seg_decoder: LayerGraph,
    pub reg_decoder: LayerGraph,
}

impl Bcae {
    /// Build the graphs with zeroed parameters.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        let [encoder, seg_decoder, reg_decoder] = build_graphs(&spec)?;
        Ok(Self {
            spec,
            encoder,
            seg_decoder,
            reg_decoder,
        })
    }

    /// Build and draw seeded uniform initial weights.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::build(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in model.graphs_mut() {
            g.init_uniform(&mut rng);
        }
        Ok(model)
    }

    pub fn graphs(&self) -> [&LayerGraph; 3] {
        [&self.encoder, &self.seg_decoder, &self.reg_decoder]
    }

    pub fn graphs_mut(&mut self) -> [&mut LayerGraph; 3] {
        [&mut self.encoder, &mut self.seg_decoder, &mut self.reg_decoder]
    }

    pub fn encoder_parameters(&self) -> usize {
        self.encoder.count_parameters()
    }

    pub fn regression_transform(&self) -> Activation {
        let (a, b) = self.spec.transform;
        Activation::ExpAffine { a, b }
    }

    /// Network input for a padded wedge: `[R, A, H]` in 2D, `[1, R, A, H]` in 3D.
    pub fn input_tensor(&self, wedge: &LogWedge) -> Result<Tensor> {
        if !wedge.is_padded() {
            return Err(Error::Unpadded);
        }
        let [r, a, h] = wedge.extents();
        if r != self.spec.radial_layers {
            return Err(Error::dim("encode", "radial axis", self.spec.radial_layers, r));
        }
        let align = self.spec.alignment();
        for (axis, extent) in [("azimuthal axis", a), ("horizontal axis", h)] {
            if extent % align != 0 {
                return Err(Error::config(format!(
                    "{axis} extent {extent} is not a multiple of {align}; pad the wedge"
                )));
            }
        }
        let shape = if self.spec.variant.is_3d() {
            vec![1, r, a, h]
        } else {
            vec![r, a, h]
        };
        Tensor::from_vec(shape, wedge.values().to_vec())
    }

    pub fn encode(&self, wedge: &LogWedge, precision: Precision) -> Result<Code> {
        self.encode_batch(std::slice::from_ref(wedge), precision)
            .map(|mut v| v.pop().expect("one code per wedge"))
    }

    /// Encode several wedges, casting the encoder once.
    pub fn encode_batch(&self, wedges: &[LogWedge], precision: Precision) -> Result<Vec<Code>> {
        let half;
        let encoder = match precision {
            Precision::Full32 => &self.encoder,
            Precision::Half16 => {
                half = self.encoder.cast(Precision::Half16);
                &half
            }
        };
        wedges
            .iter()
            .map(|w| self.encode_with(encoder, w, precision))
            .collect()
    }

    /// Encode with an already prepared (possibly half-precision) encoder.
    pub fn encode_with(&self, encoder: &LayerGraph, wedge: &LogWedge, precision: Precision) -> Result<Code> {
        let x = self.input_tensor(wedge)?.cast(precision).tensor;
        let code = encoder.forward(&x)?;
        if !code.all_finite() {
            return Err(Error::NonFinite { op: "encoder".into() });
        }
        let payload = match code.as_f16() {
            Some(h) => h.to_vec(),
            None => code.cast(Precision::Half16).tensor.as_f16().expect("cast to half").to_vec(),
        };
        Ok(Code {
            shape: code.shape().to_vec(),
            payload,
            model_id: self.spec.model_id(),
            original_extents: wedge.original_extents(),
        })
    }

    /// Padded wedge extents implied by a code shape.
    fn padded_extents(&self, code: &Code) -> Result<[usize; 3]> {
        let expected_rank = if self.spec.variant.is_3d() { 4 } else { 3 };
        if code.shape.len() != expected_rank {
            return Err(Error::dim("decode", "code rank", expected_rank, code.shape.len()));
        }
        if code.shape[0] != self.spec.code_channels {
            return Err(Error::dim("decode", "code channel axis", self.spec.code_channels, code.shape[0]));
        }
        let f = self.spec.alignment();
        let n = code.shape.len();
        let padded = [self.spec.radial_layers, code.shape[n - 2] * f, code.shape[n - 1] * f];
        let orig = code.original_extents;
        if orig[0] != padded[0] || orig[1] != padded[1] || orig[2] > padded[2] {
            return Err(Error::dim("decode", "original extents", padded[2], orig[2]));
        }
        Ok(padded)
    }

    /// Raw decoder outputs over the padded volume: sigmoid probabilities and
    /// transformed regression values.
    pub fn decode_heads(&self, code: &Code) -> Result<(Tensor, Tensor)> {
        if code.model_id != self.spec.model_id() {
            return Err(Error::ModelMismatch {
                expected: self.spec.model_id(),
                found: code.model_id.clone(),
            });
        }
        self.padded_extents(code)?;
        let z = Tensor::from_f16(code.shape.clone(), code.payload.clone())?.cast(Precision::Full32).tensor;
        let seg = self.seg_decoder.forward(&z)?;
        let reg = activation_forward(&self.reg_decoder.forward(&z)?, self.regression_transform());
        Ok((seg, reg))
    }

    pub fn decode(&self, code: &Code) -> Result<Decoded> {
        self.decode_with_threshold(code, self.spec.seg_threshold)
    }

    /// Decode with an explicit segmentation threshold `h`: a voxel is kept
    /// (with its regression value) only where `seg > h`.
    pub fn decode_with_threshold(&self, code: &Code, threshold: f32) -> Result<Decoded> {
        let padded = self.padded_extents(code)?;
        let (seg, reg) = self.decode_heads(code)?;
        let keep = code.original_extents[2];
        let seg = clip_rows(&seg.values(), padded[2], keep);
        let reg = clip_rows(&reg.values(), padded[2], keep);
        // Masked-out regression values never receive gradient and may
        // overflow the exponential; only what survives the mask must be finite.
        let recon: Vec<f32> = seg
            .iter()
            .zip(&reg)
            .map(|(&s, &r)| if s > threshold { r } else { 0.0 })
            .collect();
        if seg.iter().chain(&recon).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decoder".into() });
        }
        Ok(Decoded {
            extents: code.original_extents,
            seg,
            reg,
            reconstruction: LogWedge::new(code.original_extents, recon)?,
        })
    }
}
