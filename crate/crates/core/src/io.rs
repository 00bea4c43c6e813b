//! Binary interchange formats and image export.
//!
//! VOGD (grid dump): magic "VOGD", version u16 LE, dtype u8 (0 = f32,
//! 1 = u8), rank u8, extents u32 LE each, payload row-major.
//!
//! VOCP (checkpoint): magic "VOCP", version u16 LE, tensor count u32 LE,
//! then per tensor: name length u16 LE, name bytes, rank u8, extents u32 LE
//! each, f32 LE payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::objective::LabelGrid;
use crate::params::ParamStore;
use crate::scalar::Scalar;

const VOGD_MAGIC: &[u8; 4] = b"VOGD";
const VOCP_MAGIC: &[u8; 4] = b"VOCP";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum VogdPayload {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl VogdPayload {
    pub fn shape(&self) -> &[usize] {
        match self {
            VogdPayload::F32 { shape, .. } | VogdPayload::U8 { shape, .. } => shape,
        }
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn vogd_bytes(payload: &VogdPayload) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VOGD_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    match payload {
        VogdPayload::F32 { shape, data } => {
            buf.push(0);
            buf.push(shape.len() as u8);
            for &e in shape {
                push_u32(&mut buf, e as u32);
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        VogdPayload::U8 { shape, data } => {
            buf.push(1);
            buf.push(shape.len() as u8);
            for &e in shape {
                push_u32(&mut buf, e as u32);
            }
            buf.extend_from_slice(data);
        }
    }
    buf
}

pub fn write_vogd(path: &Path, payload: &VogdPayload) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&vogd_bytes(payload))?;
    Ok(())
}

pub fn parse_vogd(buf: &[u8]) -> Result<VogdPayload> {
    let mut r = Reader::new(buf);
    if r.take(4)? != VOGD_MAGIC {
        return Err(Error::Format("not a VOGD file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported VOGD version {version}")));
    }
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = match dtype {
        0 => {
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            VogdPayload::F32 { shape, data }
        }
        1 => VogdPayload::U8 { shape, data: r.take(numel)?.to_vec() },
        other => return Err(Error::Format(format!("unknown VOGD dtype tag {other}"))),
    };
    if !r.done() {
        return Err(Error::Format("trailing bytes after VOGD payload".into()));
    }
    Ok(payload)
}

pub fn read_vogd(path: &Path) -> Result<VogdPayload> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_vogd(&buf)
}

pub fn write_grid_f32<S: Scalar>(path: &Path, grid: &DenseGrid<S>) -> Result<()> {
    write_vogd(path, &VogdPayload::F32 { shape: grid.shape().to_vec(), data: grid.to_f32_vec() })
}

pub fn read_grid<S: Scalar>(path: &Path) -> Result<DenseGrid<S>> {
    match read_vogd(path)? {
        VogdPayload::F32 { shape, data } => DenseGrid::from_f32_slice(shape, &data),
        VogdPayload::U8 { .. } => Err(Error::Format("expected f32 grid, found u8".into())),
    }
}

pub fn write_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    write_vogd(
        path,
        &VogdPayload::U8 { shape: labels.dims.to_vec(), data: labels.data.clone() },
    )
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    match read_vogd(path)? {
        VogdPayload::U8 { shape, data } => {
            if shape.len() != 3 {
                return Err(Error::Format(format!("label grid must be rank 3, got {shape:?}")));
            }
            LabelGrid::new([shape[0], shape[1], shape[2]], data)
        }
        VogdPayload::F32 { .. } => Err(Error::Format("expected u8 labels, found f32".into())),
    }
}

pub fn checkpoint_bytes<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VOCP_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, store.len() as u32);
    for (_, name, value) in store.iter() {
        push_u16(&mut buf, name.len() as u16);
        buf.extend_from_slice(name.as_bytes());
        buf.push(value.shape().len() as u8);
        for &e in value.shape() {
            push_u32(&mut buf, e as u32);
        }
        for v in value.to_f32_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(store))?;
    Ok(())
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = Reader::new(buf);
    if r.take(4)? != VOCP_MAGIC {
        return Err(Error::Format("not a VOCP file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported VOCP version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, shape, data));
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after VOCP payload".into()));
    }
    Ok(tensors)
}

/// Load a checkpoint into an existing (architecture-matching) store.
pub fn load_checkpoint<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let tensors = parse_checkpoint(&buf)?;
    let converted: Vec<(String, DenseGrid<S>)> = tensors
        .into_iter()
        .map(|(name, shape, data)| Ok((name, DenseGrid::from_f32_slice(shape, &data)?)))
        .collect::<Result<_>>()?;
    store.load_values(&converted)
}

/// Diverging warm-cool colormap on [0, 1]: blue through near-white to red.
pub fn warm_cool_rgb(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let blue = [59.0, 76.0, 192.0];
    let white = [221.0, 221.0, 221.0];
    let red = [180.0, 4.0, 38.0];
    let lerp = |a: [f64; 3], b: [f64; 3], s: f64| {
        [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
    };
    let c = if t < 0.5 { lerp(blue, white, t * 2.0) } else { lerp(white, red, (t - 0.5) * 2.0) };
    [c[0].round() as u8, c[1].round() as u8, c[2].round() as u8]
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "ppm buffer {} bytes for {width}x{height}",
            rgb.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(format!("P6\n{width} {height}\n255\n").as_bytes())?;
    f.write_all(rgb)?;
    Ok(())
}
