//! Little-endian binary containers used on disk.
//!
//! * `HSCB`: 3-D cube. magic, u32 height, width, bands, u8 layout tag, u8
//!   dtype tag, zero padding to the next 16-byte boundary (32 bytes total),
//!   then the payload in the declared layout.
//! * `HSRW`: 2-D plane (raw frames, dark/flat calibration). magic, u32
//!   height, width, u8 dtype tag, padding to 16 bytes, row-major payload.
//! * `HSLB`: 2-D u8 label plane. magic, u32 height, width, padding to 16
//!   bytes, row-major payload.
//!
//! Dtype tags: 0 = f32, 1 = u16. Layout tags: 0 = BSQ, 1 = BIP.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor, TensorData};

pub const CUBE_MAGIC: &[u8; 4] = b"HSCB";
pub const PLANE_MAGIC: &[u8; 4] = b"HSRW";
pub const LABEL_MAGIC: &[u8; 4] = b"HSLB";

pub const CUBE_HEADER_LEN: usize = 32;
pub const PLANE_HEADER_LEN: usize = 16;
pub const LABEL_HEADER_LEN: usize = 16;

const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;

/// Payload of a 2-D plane container.
#[derive(Debug, Clone, PartialEq)]
pub enum PlaneData {
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl PlaneData {
    pub fn len(&self) -> usize {
        match self {
            PlaneData::U16(v) => v.len(),
            PlaneData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: PlaneData,
}

/// Label map: row-major class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                format!("byte {}", self.pos),
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::parse(
                "byte 0",
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn pad_to(&mut self, header_len: usize) -> Result<()> {
        let start = self.pos;
        let pad = self.take(header_len - start, "header padding")?;
        if let Some(k) = pad.iter().position(|&b| b != 0) {
            return Err(Error::parse(format!("byte {}", start + k), "nonzero header padding"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::parse(
                format!("byte {}", self.pos),
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn checked_count(dims: &[u32], elem_size: usize, available: usize, pos: usize) -> Result<usize> {
    let mut count: usize = 1;
    for &d in dims {
        count = count
            .checked_mul(d as usize)
            .ok_or_else(|| Error::parse("header", "dimension product overflows"))?;
    }
    let bytes = count
        .checked_mul(elem_size)
        .ok_or_else(|| Error::parse("header", "payload size overflows"))?;
    if bytes != available {
        return Err(Error::parse(
            format!("byte {pos}"),
            format!("payload is {available} bytes, header declares {bytes}"),
        ));
    }
    Ok(count)
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_u16s(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect()
}

fn pad(out: &mut Vec<u8>, header_len: usize) {
    out.resize(header_len, 0);
}

pub fn encode_cube(t: &Tensor) -> Result<Vec<u8>> {
    let (dtype, elem) = match t.data() {
        TensorData::F32(_) => (DTYPE_F32, 4),
        TensorData::U16(_) => (DTYPE_U16, 2),
        TensorData::I8 { .. } => {
            return Err(Error::ElementType(
                "i8 tensors have no HSCB dtype tag".into(),
            ))
        }
    };
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + t.len() * elem);
    out.extend_from_slice(CUBE_MAGIC);
    for d in [t.height(), t.width(), t.bands()] {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(t.layout().tag());
    out.push(dtype);
    pad(&mut out, CUBE_HEADER_LEN);
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8 { .. } => unreachable!(),
    }
    Ok(out)
}

pub fn decode_cube(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    r.magic(CUBE_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let b = r.u32("bands")?;
    let layout_tag = r.u8("layout tag")?;
    let layout = Layout::from_tag(layout_tag)
        .ok_or_else(|| Error::parse("byte 16", format!("unknown layout tag {layout_tag}")))?;
    let dtype = r.u8("dtype tag")?;
    r.pad_to(CUBE_HEADER_LEN)?;
    let payload = &buf[CUBE_HEADER_LEN..];
    let data = match dtype {
        DTYPE_F32 => {
            checked_count(&[h, w, b], 4, payload.len(), CUBE_HEADER_LEN)?;
            TensorData::F32(read_f32s(payload))
        }
        DTYPE_U16 => {
            checked_count(&[h, w, b], 2, payload.len(), CUBE_HEADER_LEN)?;
            TensorData::U16(read_u16s(payload))
        }
        other => return Err(Error::parse("byte 17", format!("unknown dtype tag {other}"))),
    };
    Tensor::new(h as usize, w as usize, b as usize, layout, data)
}

pub fn encode_plane(p: &Plane) -> Result<Vec<u8>> {
    if p.data.len() != p.height * p.width {
        return Err(Error::Dimension(format!(
            "plane {}x{} holds {} values",
            p.height,
            p.width,
            p.data.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(PLANE_MAGIC);
    for d in [p.height, p.width] {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &p.data {
        PlaneData::F32(v) => {
            out.push(DTYPE_F32);
            pad(&mut out, PLANE_HEADER_LEN);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        PlaneData::U16(v) => {
            out.push(DTYPE_U16);
            pad(&mut out, PLANE_HEADER_LEN);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
    }
    Ok(out)
}

pub fn decode_plane(buf: &[u8]) -> Result<Plane> {
    let mut r = Reader::new(buf);
    r.magic(PLANE_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let dtype = r.u8("dtype tag")?;
    r.pad_to(PLANE_HEADER_LEN)?;
    let payload = &buf[PLANE_HEADER_LEN..];
    let data = match dtype {
        DTYPE_F32 => {
            checked_count(&[h, w], 4, payload.len(), PLANE_HEADER_LEN)?;
            PlaneData::F32(read_f32s(payload))
        }
        DTYPE_U16 => {
            checked_count(&[h, w], 2, payload.len(), PLANE_HEADER_LEN)?;
            PlaneData::U16(read_u16s(payload))
        }
        other => return Err(Error::parse("byte 12", format!("unknown dtype tag {other}"))),
    };
    Ok(Plane {
        height: h as usize,
        width: w as usize,
        data,
    })
}

pub fn encode_labels(l: &LabelPlane) -> Result<Vec<u8>> {
    if l.data.len() != l.height * l.width {
        return Err(Error::Dimension(format!(
            "label plane {}x{} holds {} values",
            l.height,
            l.width,
            l.data.len()
        )));
    }
    let mut out = Vec::with_capacity(LABEL_HEADER_LEN + l.data.len());
    out.extend_from_slice(LABEL_MAGIC);
    for d in [l.height, l.width] {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    pad(&mut out, LABEL_HEADER_LEN);
    out.extend_from_slice(&l.data);
    Ok(out)
}

pub fn decode_labels(buf: &[u8]) -> Result<LabelPlane> {
    let mut r = Reader::new(buf);
    r.magic(LABEL_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    r.pad_to(LABEL_HEADER_LEN)?;
    let payload = &buf[LABEL_HEADER_LEN..];
    checked_count(&[h, w], 1, payload.len(), LABEL_HEADER_LEN)?;
    r.take(payload.len(), "payload")?;
    r.finish()?;
    Ok(LabelPlane {
        height: h as usize,
        width: w as usize,
        data: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_cube(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_cube(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: &Path) -> Result<Tensor> {
    with_path(path, decode_cube(&read_file(path)?))
}

pub fn write_plane(path: &Path, p: &Plane) -> Result<()> {
    fs::write(path, encode_plane(p)?).map_err(|e| Error::io(path, e))
}

pub fn read_plane(path: &Path) -> Result<Plane> {
    with_path(path, decode_plane(&read_file(path)?))
}

pub fn write_labels(path: &Path, l: &LabelPlane) -> Result<()> {
    fs::write(path, encode_labels(l)?).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelPlane> {
    with_path(path, decode_labels(&read_file(path)?))
}
