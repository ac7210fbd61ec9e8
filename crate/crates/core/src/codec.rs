//! `BCAC` code files.
//!
//! ```text
//! "BCAC" | version u8 = 1 | model_id (u32 len + utf8) | spec digest [u8; 32]
//!        | original extents u32 x3 | code rank u32 | code dims u32 x rank
//!        | count u32 | count x product(dims) f16 payload
//! ```
//! Everything is little-endian.

use std::path::Path;

use half::f16;

use crate::binio::{put_string, put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::model::{Code, ModelSpec};

const MAGIC: [u8; 4] = *b"BCAC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CodeFile {
    pub model_id: String,
    pub digest: [u8; 32],
    pub original_extents: [usize; 3],
    pub code_shape: Vec<usize>,
    /// One half-precision payload per wedge.
    pub payloads: Vec<Vec<f16>>,
}

fn hex8(d: &[u8; 32]) -> String {
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

impl CodeFile {
    /// Empty file for wedges of `original_extents` compressed by `spec`.
    pub fn new(spec: &ModelSpec, original_extents: [usize; 3]) -> Self {
        let [r, a, h] = original_extents;
        let padded = [r, a, h.div_ceil(crate::data::HORIZONTAL_ALIGN) * crate::data::HORIZONTAL_ALIGN];
        Self {
            model_id: spec.model_id(),
            digest: spec.digest(),
            original_extents,
            code_shape: spec.code_shape(padded),
            payloads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn code_len(&self) -> usize {
        self.code_shape.iter().product()
    }

    pub fn push(&mut self, code: Code) -> Result<()> {
        if code.model_id != self.model_id {
            return Err(Error::ModelMismatch {
                expected: self.model_id.clone(),
                found: code.model_id,
            });
        }
        if code.shape != self.code_shape || code.original_extents != self.original_extents {
            return Err(FormatError::Extent(format!(
                "code {:?} of wedge {:?} in a file of {:?} / {:?}",
                code.shape, code.original_extents, self.code_shape, self.original_extents
            ))
            .into());
        }
        self.payloads.push(code.payload);
        Ok(())
    }

    /// Refuse specs other than the one that produced the codes.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let digest = spec.digest();
        if digest != self.digest || spec.model_id() != self.model_id {
            return Err(Error::ModelMismatch {
                expected: format!("{} ({})", spec.model_id(), hex8(&digest)),
                found: format!("{} ({})", self.model_id, hex8(&self.digest)),
            });
        }
        Ok(())
    }

    pub fn codes(&self) -> impl Iterator<Item = Code> + '_ {
        self.payloads.iter().map(|p| Code {
            shape: self.code_shape.clone(),
            payload: p.clone(),
            model_id: self.model_id.clone(),
            original_extents: self.original_extents,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * self.code_len() * 2);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        put_string(&mut out, &self.model_id);
        out.extend_from_slice(&self.digest);
        for e in self.original_extents {
            put_u32(&mut out, e);
        }
        put_u32(&mut out, self.code_shape.len());
        for &d in &self.code_shape {
            put_u32(&mut out, d);
        }
        put_u32(&mut out, self.len());
        for p in &self.payloads {
            assert_eq!(p.len(), self.code_len(), "payload length matches the code shape");
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let model_id = r.string("model id")?;
        let digest: [u8; 32] = r.take(32, "spec digest")?.try_into().unwrap();
        let original_extents = [r.usize("extents")?, r.usize("extents")?, r.usize("extents")?];
        let rank = r.usize("code rank")?;
        if !(1..=8).contains(&rank) {
            return Err(FormatError::Header(format!("code rank {rank}")).into());
        }
        let code_shape = (0..rank).map(|_| r.usize("code dims")).collect::<Result<Vec<_>, _>>()?;
        if code_shape.contains(&0) || original_extents.contains(&0) {
            return Err(FormatError::Extent(format!("zero extent in {original_extents:?} / {code_shape:?}")).into());
        }
        let count = r.usize("code count")?;
        let n: usize = code_shape.iter().product();
        let mut payloads = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            payloads.push(r.f16s(n, "code payload")?);
        }
        r.finish()?;
        Ok(Self {
            model_id,
            digest,
            original_extents,
            code_shape,
            payloads,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
