//! `TPCW` wedge files.
//!
//! ```text
//! "TPCW" | version u8 = 1 | count u32 | extents u32 x3 | dtype u8 | payload
//! ```
//! dtype 0 stores u16 ADC values, dtype 1 f32 log-ADC values. Wedges are
//! concatenated row-major; everything is little-endian.

use std::fs;
use std::path::Path;

use super::{volume, LogWedge, RawWedge};
use crate::binio::{put_u32, ByteReader};
use crate::error::{FormatError, Result};

const MAGIC: [u8; 4] = *b"TPCW";
const VERSION: u8 = 1;
const DTYPE_ADC: u8 = 0;
const DTYPE_LOG: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum WedgeFile {
    Adc { extents: [usize; 3], wedges: Vec<RawWedge> },
    LogAdc { extents: [usize; 3], wedges: Vec<LogWedge> },
}

impl WedgeFile {
    pub fn extents(&self) -> [usize; 3] {
        match self {
            WedgeFile::Adc { extents, .. } | WedgeFile::LogAdc { extents, .. } => *extents,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            WedgeFile::Adc { wedges, .. } => wedges.len(),
            WedgeFile::LogAdc { wedges, .. } => wedges.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-ADC view of the contents; raw ADC is log-transformed.
    pub fn into_log_wedges(self) -> Vec<LogWedge> {
        match self {
            WedgeFile::Adc { wedges, .. } => wedges.iter().map(RawWedge::log_transform).collect(),
            WedgeFile::LogAdc { wedges, .. } => wedges,
        }
    }

    /// Fraction of nonzero voxels over the whole file.
    pub fn occupancy(&self) -> f64 {
        let (nonzero, total) = match self {
            WedgeFile::Adc { wedges, .. } => wedges.iter().fold((0, 0), |(n, t), w| {
                (n + w.adc().iter().filter(|&&v| v > 0).count(), t + w.adc().len())
            }),
            WedgeFile::LogAdc { wedges, .. } => wedges.iter().fold((0, 0), |(n, t), w| {
                (n + w.values().iter().filter(|&&v| v > 0.0).count(), t + w.values().len())
            }),
        };
        if total == 0 {
            0.0
        } else {
            nonzero as f64 / total as f64
        }
    }
}

pub fn encode_wedge_file(file: &WedgeFile) -> Result<Vec<u8>> {
    let extents = file.extents();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    put_u32(&mut out, file.len());
    for e in extents {
        put_u32(&mut out, e);
    }
    match file {
        WedgeFile::Adc { wedges, .. } => {
            out.push(DTYPE_ADC);
            out.reserve(wedges.len() * volume(extents) * 2);
            for w in wedges {
                check_extents(w.extents(), extents)?;
                for v in w.adc() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        WedgeFile::LogAdc { wedges, .. } => {
            out.push(DTYPE_LOG);
            out.reserve(wedges.len() * volume(extents) * 4);
            for w in wedges {
                check_extents(w.extents(), extents)?;
                for v in w.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn check_extents(found: [usize; 3], expected: [usize; 3]) -> Result<(), FormatError> {
    if found != expected {
        return Err(FormatError::Extent(format!("wedge {found:?} in a file of {expected:?}")));
    }
    Ok(())
}

pub fn decode_wedge_file(bytes: &[u8]) -> Result<WedgeFile> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.usize("wedge count")?;
    let extents = [r.usize("extents")?, r.usize("extents")?, r.usize("extents")?];
    if extents.contains(&0) {
        return Err(FormatError::Extent(format!("zero extent in {extents:?}")).into());
    }
    let dtype = r.u8("dtype")?;
    let n = volume(extents);
    let file = match dtype {
        DTYPE_ADC => {
            let mut wedges = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let adc = r.u16s(n, "wedge payload")?;
                wedges.push(RawWedge::new(extents, adc)?);
            }
            WedgeFile::Adc { extents, wedges }
        }
        DTYPE_LOG => {
            let mut wedges = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                wedges.push(LogWedge::new(extents, r.f32s(n, "wedge payload")?)?);
            }
            WedgeFile::LogAdc { extents, wedges }
        }
        other => return Err(FormatError::DType(other).into()),
    };
    r.finish()?;
    Ok(file)
}

pub fn write_wedge_file(path: impl AsRef<Path>, file: &WedgeFile) -> Result<()> {
    fs::write(path, encode_wedge_file(file)?)?;
    Ok(())
}

pub fn read_wedge_file(path: impl AsRef<Path>) -> Result<WedgeFile> {
    decode_wedge_file(&fs::read(path)?)
}
