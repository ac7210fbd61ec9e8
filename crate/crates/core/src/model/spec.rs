use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Radial layers as channels, 2D convolutions.
    Bcae2d,
    /// 3D encoder with widths (8, 16, 32, 32).
    Bcaepp,
    /// 3D encoder with widths (2, 4, 4, 8).
    Bcaeht,
}

impl Variant {
    pub fn is_3d(self) -> bool {
        !matches!(self, Variant::Bcae2d)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcae2d" | "bcae-2d" => Ok(Variant::Bcae2d),
            "bcaepp" | "bcae++" => Ok(Variant::Bcaepp),
            "bcaeht" | "bcae-ht" => Ok(Variant::Bcaeht),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Declarative architecture description.
///
/// For the 2D variant `widths` holds the single trunk width; for the 3D
/// variants it holds the four encoder stage widths. `m`, `n` and `d` are the
/// encoder block, decoder block and down/upsampling counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub widths: Vec<usize>,
    pub code_channels: usize,
    /// Radial layer count of the wedge (2D input/output channels).
    pub radial_layers: usize,
    /// Segmentation threshold `h`.
    pub seg_threshold: f32,
    /// `(a, b)` of the regression transform `a + b exp(x)`.
    pub transform: (f32, f32),
}

pub const THREE_D_STAGES: usize = 4;
pub const BCAEPP_WIDTHS: [usize; 4] = [8, 16, 32, 32];
pub const BCAEHT_WIDTHS: [usize; 4] = [2, 4, 4, 8];

impl ModelSpec {
    pub fn bcae2d(m: usize, n: usize, d: usize) -> Self {
        Self {
            variant: Variant::Bcae2d,
            m,
            n,
            d,
            widths: vec![32],
            code_channels: 32,
            radial_layers: 16,
            seg_threshold: 0.5,
            transform: (6.0, 3.0),
        }
    }

    /// BCAE-2D(m=4, n=8, d=3).
    pub fn bcae2d_default() -> Self {
        Self::bcae2d(4, 8, 3)
    }

    pub fn bcaepp() -> Self {
        Self::three_d(Variant::Bcaepp, BCAEPP_WIDTHS)
    }

    pub fn bcaeht() -> Self {
        Self::three_d(Variant::Bcaeht, BCAEHT_WIDTHS)
    }

    fn three_d(variant: Variant, widths: [usize; 4]) -> Self {
        Self {
            variant,
            m: THREE_D_STAGES,
            n: THREE_D_STAGES,
            d: THREE_D_STAGES,
            widths: widths.to_vec(),
            code_channels: 8,
            radial_layers: 16,
            seg_threshold: 0.5,
            transform: (6.0, 3.0),
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Bcae2d => Self::bcae2d_default(),
            Variant::Bcaepp => Self::bcaepp(),
            Variant::Bcaeht => Self::bcaeht(),
        }
    }

    /// Same spec with a different 2D trunk width; the code keeps the
    /// trunk's channel count.
    pub fn with_trunk_width(mut self, width: usize) -> Self {
        if self.variant == Variant::Bcae2d {
            self.widths = vec![width];
            self.code_channels = width;
        }
        self
    }

    pub fn trunk_width(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > self.m || self.d > self.n {
            return Err(Error::config(format!(
                "downsampling count d={} must not exceed m={} or n={}",
                self.d, self.m, self.n
            )));
        }
        if self.code_channels == 0 || self.radial_layers == 0 || self.widths.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.seg_threshold)));
        }
        match self.variant {
            Variant::Bcae2d if self.widths.len() != 1 => {
                Err(Error::config("the 2D variant takes a single trunk width"))
            }
            Variant::Bcae2d if self.widths[0] != self.code_channels => Err(Error::config(
                "the 2D decoders start from the code, so code_channels must equal the trunk width",
            )),
            Variant::Bcaepp | Variant::Bcaeht
                if self.widths.len() != THREE_D_STAGES
                    || (self.m, self.n, self.d) != (THREE_D_STAGES, THREE_D_STAGES, THREE_D_STAGES) =>
            {
                Err(Error::config("3D variants have exactly four stages"))
            }
            _ => Ok(()),
        }
    }

    /// Azimuthal and horizontal extents must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << self.d
    }

    /// Code shape for a padded wedge of `extents`.
    pub fn code_shape(&self, extents: [usize; 3]) -> Vec<usize> {
        let f = self.alignment();
        let [r, a, h] = extents;
        if self.variant.is_3d() {
            vec![self.code_channels, r, a / f, h / f]
        } else {
            vec![self.code_channels, a / f, h / f]
        }
    }

    /// Human-readable architecture identifier.
    pub fn model_id(&self) -> String {
        match self.variant {
            Variant::Bcae2d => format!(
                "bcae2d-m{}-n{}-d{}-w{}-c{}",
                self.m,
                self.n,
                self.d,
                self.trunk_width(),
                self.code_channels
            ),
            Variant::Bcaepp => "bcaepp".to_owned(),
            Variant::Bcaeht => "bcaeht".to_owned(),
        }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }
}
