//! NRRD file I/O for the subset used by the pipeline.
//!
//! Supported: 3D scalar volumes, `raw` and `gzip` encodings, element types
//! uint8 / int16 / uint16 / float32, little- or big-endian payloads.
//! Honored header fields: `dimension`, `type`, `sizes`, `encoding`,
//! `endian`, `space directions`, `space origin`. Everything else is
//! skipped; anything outside the subset is rejected with an error naming
//! the offending field.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrrdEncoding {
    Raw,
    Gzip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Uint8,
    Int16,
    Uint16,
    Float32,
}

impl ElementType {
    fn byte_size(self) -> usize {
        match self {
            ElementType::Uint8 => 1,
            ElementType::Int16 | ElementType::Uint16 => 2,
            ElementType::Float32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "uint8" | "uint8_t" | "uchar" | "unsigned char" => Ok(ElementType::Uint8),
            "int16" | "int16_t" | "short" | "short int" | "signed short"
            | "signed short int" => Ok(ElementType::Int16),
            "uint16" | "uint16_t" | "ushort" | "unsigned short" | "unsigned short int" => {
                Ok(ElementType::Uint16)
            }
            "float" | "float32" => Ok(ElementType::Float32),
            other => Err(Error::NrrdParse {
                field: "type".into(),
                message: format!("unsupported element type `{other}`"),
            }),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Uint8 => "uint8",
            ElementType::Int16 => "int16",
            ElementType::Uint16 => "uint16",
            ElementType::Float32 => "float",
        }
    }
}

struct Header {
    element_type: ElementType,
    sizes: [usize; 3],
    encoding: NrrdEncoding,
    big_endian: bool,
    spacing: [f64; 3],
    origin: [f64; 3],
}

fn parse_err(field: &str, message: impl Into<String>) -> Error {
    Error::NrrdParse {
        field: field.into(),
        message: message.into(),
    }
}

/// Parse `(a,b,c)` into three reals.
fn parse_vector(field: &str, s: &str) -> Result<[f64; 3]> {
    let trimmed = s.trim();
    let inner = trimmed
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| parse_err(field, format!("expected `(x,y,z)`, got `{trimmed}`")))?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 {
        return Err(parse_err(field, format!("expected 3 components in `{trimmed}`")));
    }
    let mut v = [0.0f64; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| parse_err(field, format!("bad number `{}`", p.trim())))?;
    }
    Ok(v)
}

/// Split a `space directions` value into its per-axis vectors.
fn split_direction_vectors(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
                if depth == 0 {
                    out.push(cur.trim().to_string());
                    cur.clear();
                }
            }
            c if c.is_whitespace() && depth == 0 => {
                if !cur.is_empty() {
                    out.push(cur.trim().to_string());
                    cur.clear();
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let magic = lines
        .next()
        .ok_or_else(|| parse_err("magic", "empty header"))?;
    if !magic.starts_with("NRRD000") {
        return Err(parse_err("magic", format!("not an NRRD file: `{magic}`")));
    }

    let mut dimension: Option<usize> = None;
    let mut element_type: Option<ElementType> = None;
    let mut sizes: Option<[usize; 3]> = None;
    let mut encoding: Option<NrrdEncoding> = None;
    let mut big_endian = false;
    let mut spacing: Option<[f64; 3]> = None;
    let mut origin = [0.0f64; 3];

    for line in lines {
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        // `key:= value` lines are free-form key/value pairs; skip them.
        if line.contains(":=") {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(parse_err("header", format!("malformed line `{line}`")));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "dimension" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| parse_err("dimension", format!("bad value `{value}`")))?;
                if d != 3 {
                    return Err(parse_err("dimension", format!("unsupported dimension {d}")));
                }
                dimension = Some(d);
            }
            "type" => element_type = Some(ElementType::parse(&value.to_ascii_lowercase())?),
            "sizes" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(parse_err("sizes", format!("expected 3 sizes, got `{value}`")));
                }
                let mut s = [0usize; 3];
                for (i, p) in parts.iter().enumerate() {
                    s[i] = p
                        .parse::<usize>()
                        .map_err(|_| parse_err("sizes", format!("bad size `{p}`")))?;
                    if s[i] == 0 {
                        return Err(parse_err("sizes", "sizes must be >= 1"));
                    }
                }
                sizes = Some(s);
            }
            "encoding" => {
                encoding = Some(match value.to_ascii_lowercase().as_str() {
                    "raw" => NrrdEncoding::Raw,
                    "gzip" | "gz" => NrrdEncoding::Gzip,
                    other => {
                        return Err(Error::UnsupportedFormat(format!(
                            "NRRD encoding `{other}` (only raw and gzip are supported)"
                        )))
                    }
                });
            }
            "endian" => {
                big_endian = match value.to_ascii_lowercase().as_str() {
                    "little" => false,
                    "big" => true,
                    other => {
                        return Err(parse_err("endian", format!("bad value `{other}`")));
                    }
                };
            }
            "space directions" => {
                let vecs = split_direction_vectors(value);
                if vecs.len() != 3 {
                    return Err(parse_err(
                        "space directions",
                        format!("expected 3 vectors, got {}", vecs.len()),
                    ));
                }
                let mut sp = [0.0f64; 3];
                for (axis, v) in vecs.iter().enumerate() {
                    let d = parse_vector("space directions", v)?;
                    for (j, &comp) in d.iter().enumerate() {
                        if j == axis {
                            continue;
                        }
                        if comp.abs() > 1e-12 {
                            return Err(Error::UnsupportedFormat(
                                "oblique space directions are not supported".into(),
                            ));
                        }
                    }
                    if !(d[axis] > 0.0) {
                        return Err(Error::UnsupportedFormat(
                            "non-positive space directions are not supported".into(),
                        ));
                    }
                    sp[axis] = d[axis];
                }
                spacing = Some(sp);
            }
            "space origin" => {
                origin = parse_vector("space origin", value)?;
            }
            // Recognized but irrelevant fields are skipped.
            _ => {}
        }
    }

    if dimension.is_none() {
        return Err(parse_err("dimension", "missing required field"));
    }
    let element_type = element_type.ok_or_else(|| parse_err("type", "missing required field"))?;
    let sizes = sizes.ok_or_else(|| parse_err("sizes", "missing required field"))?;
    let encoding = encoding.ok_or_else(|| parse_err("encoding", "missing required field"))?;

    Ok(Header {
        element_type,
        sizes,
        encoding,
        big_endian,
        spacing: spacing.unwrap_or([1.0, 1.0, 1.0]),
        origin,
    })
}

fn decode_values(header: &Header, payload: &[u8]) -> Result<Vec<f32>> {
    let n = header.sizes[0] * header.sizes[1] * header.sizes[2];
    let want = n * header.element_type.byte_size();
    if payload.len() != want {
        return Err(parse_err(
            "data",
            format!("payload has {} bytes, expected {want}", payload.len()),
        ));
    }
    let be = header.big_endian;
    let mut data = Vec::with_capacity(n);
    match header.element_type {
        ElementType::Uint8 => {
            data.extend(payload.iter().map(|&b| b as f32));
        }
        ElementType::Int16 => {
            for c in payload.chunks_exact(2) {
                let raw = [c[0], c[1]];
                let v = if be {
                    i16::from_be_bytes(raw)
                } else {
                    i16::from_le_bytes(raw)
                };
                data.push(v as f32);
            }
        }
        ElementType::Uint16 => {
            for c in payload.chunks_exact(2) {
                let raw = [c[0], c[1]];
                let v = if be {
                    u16::from_be_bytes(raw)
                } else {
                    u16::from_le_bytes(raw)
                };
                data.push(v as f32);
            }
        }
        ElementType::Float32 => {
            for c in payload.chunks_exact(4) {
                let raw = [c[0], c[1], c[2], c[3]];
                let v = if be {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                };
                data.push(v);
            }
        }
    }
    Ok(data)
}

fn read_impl(path: &Path, binarize: bool) -> Result<VoxelGrid> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    // The header is ASCII up to the first blank line (\n\n or \r\n\r\n).
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| (p, p + 2))
        .or_else(|| {
            bytes
                .windows(4)
                .position(|w| w == b"\r\n\r\n")
                .map(|p| (p, p + 4))
        })
        .ok_or_else(|| parse_err("header", "no blank line separating header from data"))?;
    let header_text = std::str::from_utf8(&bytes[..header_end.0])
        .map_err(|_| parse_err("header", "header is not valid UTF-8"))?;
    let header = parse_header(header_text)?;

    let raw_payload = &bytes[header_end.1..];
    let payload: Vec<u8> = match header.encoding {
        NrrdEncoding::Raw => raw_payload.to_vec(),
        NrrdEncoding::Gzip => {
            let mut out = Vec::new();
            GzDecoder::new(raw_payload)
                .read_to_end(&mut out)
                .map_err(|e| parse_err("data", format!("gzip decode failed: {e}")))?;
            out
        }
    };

    let mut data = decode_values(&header, &payload)?;
    if binarize {
        for v in data.iter_mut() {
            *v = if *v > 0.5 { 1.0 } else { 0.0 };
        }
    }
    let geometry = GridGeometry::new(header.sizes, header.spacing, header.origin)?;
    VoxelGrid::from_data(geometry, data)
}

/// Read an NRRD volume. Values are kept as stored (converted to f32); the
/// binary flag is detected from the data.
pub fn read_nrrd(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    read_impl(path.as_ref(), false)
}

/// Read an NRRD volume and binarize it: values > 0.5 map to 1, the rest to 0.
pub fn read_nrrd_binarize(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    read_impl(path.as_ref(), true)
}

/// Write a volume as NRRD with raw encoding. Binary grids are stored as
/// uint8, fractional grids as float32; reading the file back reproduces the
/// voxel data bit-exactly.
pub fn write_nrrd(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    write_nrrd_with(grid, path, NrrdEncoding::Raw)
}

pub fn write_nrrd_with(
    grid: &VoxelGrid,
    path: impl AsRef<Path>,
    encoding: NrrdEncoding,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nrrd(grid, encoding)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize a volume to NRRD bytes (used for hashing and atomic writes).
pub fn encode_nrrd(grid: &VoxelGrid, encoding: NrrdEncoding) -> Result<Vec<u8>> {
    let element_type = if grid.is_binary() {
        ElementType::Uint8
    } else {
        ElementType::Float32
    };

    let [nx, ny, nz] = grid.dims();
    let [sx, sy, sz] = grid.spacing();
    let [ox, oy, oz] = grid.origin();
    let mut header = String::new();
    header.push_str("NRRD0004\n");
    header.push_str(&format!("type: {}\n", element_type.name()));
    header.push_str("dimension: 3\n");
    header.push_str("space dimension: 3\n");
    header.push_str(&format!("sizes: {nx} {ny} {nz}\n"));
    header.push_str(&format!(
        "space directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})\n"
    ));
    header.push_str(&format!("space origin: ({ox},{oy},{oz})\n"));
    header.push_str(&format!(
        "encoding: {}\n",
        match encoding {
            NrrdEncoding::Raw => "raw",
            NrrdEncoding::Gzip => "gzip",
        }
    ));
    header.push_str("endian: little\n");
    header.push('\n');

    let mut payload = Vec::with_capacity(grid.voxel_count() * element_type.byte_size());
    match element_type {
        ElementType::Uint8 => {
            payload.extend(grid.data().iter().map(|&v| v as u8));
        }
        ElementType::Float32 => {
            for &v in grid.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        _ => unreachable!("writer only emits uint8 or float32"),
    }

    let mut out = header.into_bytes();
    match encoding {
        NrrdEncoding::Raw => out.extend_from_slice(&payload),
        NrrdEncoding::Gzip => {
            let mut enc = GzEncoder::new(&mut out, Compression::new(6));
            enc.write_all(&payload)
                .and_then(|_| enc.finish().map(|_| ()))
                .map_err(|e| Error::UnsupportedFormat(format!("gzip encode failed: {e}")))?;
        }
    }
    Ok(out)
}
