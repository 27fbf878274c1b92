//! File formats: FTNT binary tensors, binary PPM/PGM images, CSV
//! training traces, and TOML model configs.
//!
//! FTNT layout: magic "FTNT", u8 version (1), u8 rank, rank little-endian
//! u64 extents, then the row-major float32 payload, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TraceRow;

pub const TENSOR_MAGIC: &[u8; 4] = b"FTNT";
pub const TENSOR_VERSION: u8 = 1;

/// Byte reader that reports the offset of the first missing byte on
/// truncated input.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                format!("truncated while reading {what} ({n} bytes needed)"),
                Some(self.pos as u64),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32_slice(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(
            format!("bad tensor magic {magic:?}"),
            Some(0),
        ));
    }
    let version = r.u8("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::format(
            format!("unsupported tensor version {version}"),
            Some(4),
        ));
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = r.u64(&format!("extent {i}"))? as usize;
        if e == 0 {
            return Err(Error::format("zero extent".to_string(), Some(r.position() - 8)));
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    let data = r.f32_slice(numel, "payload")?;
    if !r.finished() {
        return Err(Error::format(
            format!("{} trailing bytes", buf.len() as u64 - r.position()),
            Some(r.position()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite payload values".to_string(), None));
    }
    Tensor::from_vec(data, &shape)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t))?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_tensor(&fs::read(path)?)
}

/// Binary (P6) PPM decoder producing a `[1, H, W, 3]` image scaled to
/// `[0, 1]`.
pub fn decode_ppm(buf: &[u8]) -> Result<Tensor<f32>> {
    let (header, rest) = parse_pnm_header(buf, b"P6")?;
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(Error::format(
            format!("only maxval 255 supported, got {maxval}"),
            None,
        ));
    }
    let need = w * h * 3;
    if rest.len() < need {
        return Err(Error::format(
            format!("pixel payload needs {need} bytes, found {}", rest.len()),
            Some((buf.len() - rest.len()) as u64),
        ));
    }
    let data: Vec<f32> = rest[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(data, &[1, h, w, 3])
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

/// Binary (P5) PGM encoder for label maps; class ids must fit a byte.
pub fn encode_pgm(labels: &[usize], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::dimension(
            "encode_pgm",
            format!("{} labels for {height}x{width}", labels.len()),
        ));
    }
    if let Some(&big) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Data(format!("label {big} does not fit a PGM byte")));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    labels: &[usize],
    height: usize,
    width: usize,
) -> Result<()> {
    Ok(fs::write(path, encode_pgm(labels, height, width)?)?)
}

/// Reads a P5 PGM back into labels (for tests and round trips).
pub fn decode_pgm(buf: &[u8]) -> Result<(Vec<usize>, usize, usize)> {
    let (header, rest) = parse_pnm_header(buf, b"P5")?;
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(Error::format(
            format!("only maxval 255 supported, got {maxval}"),
            None,
        ));
    }
    if rest.len() < w * h {
        return Err(Error::format(
            format!("pixel payload needs {} bytes, found {}", w * h, rest.len()),
            None,
        ));
    }
    Ok((rest[..w * h].iter().map(|&b| b as usize).collect(), h, w))
}

/// Parses `magic <w> <h> <maxval>` with whitespace and `#` comments,
/// returning the three integers and the raster slice.
fn parse_pnm_header<'a>(buf: &'a [u8], magic: &[u8; 2]) -> Result<([usize; 3], &'a [u8])> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(Error::format(
            format!("expected {} image", String::from_utf8_lossy(magic)),
            Some(0),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(
                "malformed image header".to_string(),
                Some(start as u64),
            ));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format("header field overflow".to_string(), Some(start as u64)))?;
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(
            "missing raster separator".to_string(),
            Some(pos as u64),
        ));
    }
    pos += 1;
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::format("zero image extent".to_string(), None));
    }
    Ok((fields, &buf[pos..]))
}

/// Training trace as `step,loss,lr` CSV.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    Ok(fs::write(path, trace_to_csv(trace))?)
}
