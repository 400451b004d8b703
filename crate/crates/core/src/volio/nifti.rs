use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};

use super::{Geometry, LabelMap, LabelSchema, Volume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// The header fields this crate reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub ndim: usize,
    pub dims: [usize; 3],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn is_integer(&self) -> bool {
        !matches!(self.datatype, DT_FLOAT32 | DT_FLOAT64)
    }

    /// Grid placement from the sform if set, else the qform, else pixdim
    /// alone.
    pub fn geometry(&self) -> Geometry {
        let mut g = Geometry::new(self.dims, std::array::from_fn(|a| self.pixdim[a + 1].abs() as f64));
        if self.sform_code > 0 {
            for a in 0..3 {
                let col: [f64; 3] = std::array::from_fn(|r| self.srow[r][a] as f64);
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                g.spacing[a] = norm;
                for r in 0..3 {
                    g.direction[r][a] = col[r] / norm;
                }
            }
            g.origin = std::array::from_fn(|r| self.srow[r][3] as f64);
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d)).to_rotation_matrix();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..3 {
                for col in 0..3 {
                    g.direction[r][col] = rot[(r, col)] * if col == 2 { qfac } else { 1.0 };
                }
            }
            g.origin = self.qoffset.map(|v| v as f64);
        }
        g
    }

    fn for_geometry(g: &Geometry, datatype: i16, bitpix: i16) -> Self {
        let m = Matrix3::from_fn(|r, c| g.direction[r][c]);
        let qfac = if m.determinant() < 0.0 { -1.0 } else { 1.0 };
        let mut proper = m;
        for r in 0..3 {
            proper[(r, 2)] *= qfac;
        }
        let mut q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(proper)).into_inner();
        if q.w < 0.0 {
            q = -q;
        }
        let mut pixdim = [0f32; 8];
        pixdim[0] = qfac as f32;
        for a in 0..3 {
            pixdim[a + 1] = g.spacing[a] as f32;
        }
        pixdim[4] = 1.0;
        NiftiHeader {
            ndim: 3,
            dims: g.dims,
            datatype,
            bitpix,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 1,
            sform_code: 1,
            quatern: [q.i as f32, q.j as f32, q.k as f32],
            qoffset: g.origin.map(|v| v as f32),
            srow: std::array::from_fn(|r| [
                (g.direction[r][0] * g.spacing[0]) as f32,
                (g.direction[r][1] * g.spacing[1]) as f32,
                (g.direction[r][2] * g.spacing[2]) as f32,
                g.origin[r] as f32,
            ]),
            magic: *b"n+1\0",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; HEADER_SIZE];
        let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        let mut dim = [1i16; 8];
        dim[0] = self.ndim as i16;
        for a in 0..3 {
            dim[a + 1] = self.dims[a] as i16;
        }
        for (i, d) in dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d);
        }
        put_i16(&mut h, 70, self.datatype);
        put_i16(&mut h, 72, self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * i, *p);
        }
        put_f32(&mut h, 108, self.vox_offset);
        put_f32(&mut h, 112, self.scl_slope);
        put_f32(&mut h, 116, self.scl_inter);
        h[123] = 2; // millimetres
        put_i16(&mut h, 252, self.qform_code);
        put_i16(&mut h, 254, self.sform_code);
        for i in 0..3 {
            put_f32(&mut h, 256 + 4 * i, self.quatern[i]);
            put_f32(&mut h, 268 + 4 * i, self.qoffset[i]);
        }
        for r in 0..3 {
            for c in 0..4 {
                put_f32(&mut h, 280 + 16 * r + 4 * c, self.srow[r][c]);
            }
        }
        h[344..348].copy_from_slice(&self.magic);
        h
    }

    pub fn from_bytes(h: &[u8], path: &Path) -> Result<(Self, bool)> {
        if h.len() < HEADER_SIZE {
            return Err(Error::format(path, "truncated header"));
        }
        let size_le = i32::from_le_bytes(h[0..4].try_into().expect("4 bytes"));
        let big = match size_le {
            348 => false,
            _ if i32::from_be_bytes(h[0..4].try_into().expect("4 bytes")) == 348 => true,
            _ => return Err(Error::format(path, format!("header size field {size_le}, expected 348"))),
        };
        let magic: [u8; 4] = h[344..348].try_into().expect("4 bytes");
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(Error::format(path, format!("bad magic {magic:?}")));
        }
        let i16_at = |at: usize| {
            let b = [h[at], h[at + 1]];
            if big { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
        };
        let f32_at = |at: usize| {
            let b = [h[at], h[at + 1], h[at + 2], h[at + 3]];
            if big { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
        };
        let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
        let ndim = dim[0];
        if !(1..=4).contains(&ndim) {
            return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
        }
        let ext = |a: usize| if a as i16 <= ndim { dim[a] } else { 1 };
        if ndim == 4 && dim[4] > 1 {
            return Err(Error::format(path, format!("{} time frames; split 4D series into separate volumes", dim[4])));
        }
        let mut dims = [1usize; 3];
        for a in 0..3 {
            let d = ext(a + 1);
            if d < 1 {
                return Err(Error::format(path, format!("non-positive extent {d}")));
            }
            dims[a] = d as usize;
        }
        let header = NiftiHeader {
            ndim: ndim as usize,
            dims,
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim: std::array::from_fn(|i| f32_at(76 + 4 * i)),
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            quatern: std::array::from_fn(|i| f32_at(256 + 4 * i)),
            qoffset: std::array::from_fn(|i| f32_at(268 + 4 * i)),
            srow: std::array::from_fn(|r| std::array::from_fn(|c| f32_at(280 + 16 * r + 4 * c))),
            magic,
        };
        Ok((header, big))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ())).map_err(|e| Error::io(path, e))
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn read_header(path: &Path) -> Result<NiftiHeader> {
    Ok(NiftiHeader::from_bytes(&read_bytes(path)?, path)?.0)
}

/// Decodes the voxel payload as `f64`, before intensity scaling.
fn decode(h: &NiftiHeader, big: bool, bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    let n: usize = h.dims.iter().product();
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype code {other}"))),
    };
    let start = (h.vox_offset as usize).max(HEADER_SIZE);
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::format(path, format!("payload holds {} bytes, need {}", bytes.len().saturating_sub(start), n * width)));
    }
    let body = &bytes[start..end];
    let word = |c: &[u8]| -> Vec<u8> {
        let mut w = c.to_vec();
        if big {
            w.reverse();
        }
        w
    };
    Ok(body
        .chunks_exact(width)
        .map(|c| {
            let w = word(c);
            match h.datatype {
                DT_UINT8 => w[0] as f64,
                DT_INT8 => w[0] as i8 as f64,
                DT_INT16 => i16::from_le_bytes([w[0], w[1]]) as f64,
                DT_UINT16 => u16::from_le_bytes([w[0], w[1]]) as f64,
                DT_INT32 => i32::from_le_bytes(w[..4].try_into().expect("4 bytes")) as f64,
                DT_UINT32 => u32::from_le_bytes(w[..4].try_into().expect("4 bytes")) as f64,
                DT_FLOAT32 => f32::from_le_bytes(w[..4].try_into().expect("4 bytes")) as f64,
                _ => f64::from_le_bytes(w[..8].try_into().expect("8 bytes")),
            }
        })
        .collect())
}

/// A file loaded as an image or, for integer data with a schema, labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Image(Volume),
    Labels(LabelMap),
}

/// Reads a `.nii` or `.nii.gz` file. Integer data loads as a [`LabelMap`]
/// when `schema` is given, otherwise everything loads as a [`Volume`] with
/// the header's intensity scaling applied.
pub fn read_volume(path: &Path, schema: Option<&LabelSchema>) -> Result<Loaded> {
    let bytes = read_bytes(path)?;
    let (h, big) = NiftiHeader::from_bytes(&bytes, path)?;
    let values = decode(&h, big, &bytes, path)?;
    let geometry = h.geometry();
    match schema {
        Some(s) if h.is_integer() => {
            let mut data = Vec::with_capacity(values.len());
            for v in values {
                if v < 0.0 || v > u16::MAX as f64 {
                    return Err(Error::data(format!("{}: label value {v} out of range", path.display())));
                }
                data.push(v as u16);
            }
            LabelMap::new(geometry, data, s.clone()).map(Loaded::Labels)
        }
        _ => {
            let scaled = h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0);
            let data = values
                .into_iter()
                .map(|v| if scaled { (v * h.scl_slope as f64 + h.scl_inter as f64) as f32 } else { v as f32 })
                .collect();
            Volume::new(geometry, data).map(Loaded::Image)
        }
    }
}

pub fn read_labels(path: &Path, schema: &LabelSchema) -> Result<LabelMap> {
    match read_volume(path, Some(schema))? {
        Loaded::Labels(m) => Ok(m),
        Loaded::Image(_) => Err(Error::data(format!("{} holds floating-point data, expected labels", path.display()))),
    }
}

/// Writes a single-file NIfTI-1 image as 32-bit float (gzip if the name
/// ends in `.gz`).
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let h = NiftiHeader::for_geometry(&v.geometry, DT_FLOAT32, 32);
    let mut bytes = h.to_bytes();
    bytes.resize(DATA_OFFSET, 0);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Writes labels as 16-bit signed integers.
pub fn write_labels(m: &LabelMap, path: &Path) -> Result<()> {
    if let Some(l) = m.data.iter().find(|&&l| l > i16::MAX as u16) {
        return Err(Error::data(format!("label {l} does not fit a 16-bit signed integer")));
    }
    let h = NiftiHeader::for_geometry(&m.geometry, DT_INT16, 16);
    let mut bytes = h.to_bytes();
    bytes.resize(DATA_OFFSET, 0);
    for &x in &m.data {
        bytes.extend_from_slice(&(x as i16).to_le_bytes());
    }
    write_bytes(path, &bytes)
}
