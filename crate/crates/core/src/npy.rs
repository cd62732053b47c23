//! Reading and writing NPY v1.0 files.
//!
//! Writing always produces little-endian `f32` (`'<f4'`) in C order. Reading
//! accepts `'<f4'` and `'<f8'`; `f64` input is narrowed to `f32` with
//! round-to-nearest-even (the `as` cast). Fortran-order files are rejected.
//!
//! See <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_len, Tensor};

/// The NPY magic string.
pub const MAGIC: &[u8; 6] = b"\x93NUMPY";

const PREAMBLE_LEN: usize = MAGIC.len() + 2 + 2;
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Loads a tensor from an NPY file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            Error::MissingInput {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            }
        } else {
            Error::Io(e).in_file(path)
        }
    })?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

/// Writes a tensor as a little-endian `f32` NPY v1.0 file.
pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::Io(e).in_file(path))?;
    file.write_all(&encode(t))
        .map_err(|e| Error::Io(e).in_file(path))?;
    Ok(())
}

/// Serializes a tensor to NPY bytes.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {}, }}",
        format_shape(t.shape())
    );
    // Header (including the trailing newline) pads the preamble to a multiple of 64.
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + pad + 1;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_len + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses NPY bytes into a tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut reader = bytes;
    let header = read_header(&mut reader)?;
    let len = checked_len(&header.shape)?;
    let expected = len
        .checked_mul(header.dtype.size())
        .ok_or_else(|| Error::ShapeOverflow(header.shape.clone()))?;
    if reader.len() != expected {
        return Err(Error::MalformedHeader(format!(
            "shape {:?} needs {expected} data bytes, file holds {}",
            header.shape,
            reader.len()
        )));
    }
    let data: Vec<f32> = match header.dtype {
        Dtype::F4 => reader
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F8 => reader
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };
    Tensor::new(header.shape, data)
}

fn read_header(reader: &mut &[u8]) -> Result<Header> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::MalformedHeader("file shorter than the NPY preamble".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::MalformedHeader("magic string".into()));
    }
    if preamble[6..8] != [1, 0] {
        return Err(Error::MalformedHeader(format!(
            "version {}.{} (only 1.0 is supported)",
            preamble[6], preamble[7]
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    if reader.len() < header_len {
        return Err(Error::MalformedHeader("header_len exceeds file size".into()));
    }
    let (raw, rest) = reader.split_at(header_len);
    *reader = rest;
    let text = std::str::from_utf8(raw)
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    parse_dict(text)
}

fn parse_dict(text: &str) -> Result<Header> {
    let body = text
        .trim_end_matches(['\n', ' '])
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::MalformedHeader("header is not a dict literal".into()))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = parse_quoted(rest)
            .ok_or_else(|| Error::MalformedHeader(format!("expected quoted key at {rest:?}")))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| Error::MalformedHeader(format!("missing ':' after key {key:?}")))?
            .trim_start();
        rest = match key {
            "descr" => {
                let (v, r) = parse_quoted(after)
                    .ok_or_else(|| Error::MalformedHeader("descr".into()))?;
                descr = Some(v.to_string());
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("False") {
                    fortran = Some(false);
                    r
                } else if let Some(r) = after.strip_prefix("True") {
                    fortran = Some(true);
                    r
                } else {
                    return Err(Error::MalformedHeader("fortran_order".into()));
                }
            }
            "shape" => {
                let (v, r) = parse_shape(after)?;
                shape = Some(v);
                r
            }
            other => return Err(Error::MalformedHeader(format!("unknown key {other:?}"))),
        };
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    let descr = descr.ok_or_else(|| Error::MalformedHeader("missing key 'descr'".into()))?;
    let fortran =
        fortran.ok_or_else(|| Error::MalformedHeader("missing key 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::MalformedHeader("missing key 'shape'".into()))?;
    if fortran {
        return Err(Error::FortranOrder);
    }
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        _ => return Err(Error::UnsupportedDtype(descr)),
    };
    Ok(Header { dtype, shape })
}

fn parse_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}

fn parse_shape(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::MalformedHeader("shape is not a tuple".into()))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::MalformedHeader("unterminated shape tuple".into()))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(|d| {
            d.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("shape entry {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}

fn format_shape(shape: &[usize]) -> String {
    match shape {
        [] => "()".into(),
        [n] => format!("({n},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_64_byte_aligned() {
        for shape in [vec![], vec![0], vec![3], vec![2, 3], vec![64, 64, 48, 2]] {
            let t = Tensor::zeros(shape);
            let bytes = encode(&t);
            let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            assert_eq!((PREAMBLE_LEN + header_len) % 64, 0);
            assert_eq!(bytes[PREAMBLE_LEN + header_len - 1], b'\n');
        }
    }

    #[test]
    fn decodes_numpy_style_header() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn zero_scalar_has_zero_bits() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap().len(), 1);
    }

    #[test]
    fn empty_array_round_trips() {
        let t = Tensor::zeros(vec![0]);
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), &[0]);
    }

    #[test]
    fn empty_input_is_malformed_header() {
        let err = decode(&[]).unwrap_err();
        assert!(err.to_string().contains("malformed header"), "{err}");
    }

    fn with_dict(dict: &str, data: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        let mut h = dict.to_string();
        h.push('\n');
        out.extend_from_slice(&(h.len() as u16).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn reads_f64_with_narrowing() {
        let data: Vec<u8> = [0.1f64, -2.5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let bytes = with_dict("{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }", &data);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.data(), &[0.1f64 as f32, -2.5]);
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let bytes = with_dict("{'descr': '<i4', 'fortran_order': False, 'shape': (1,), }", &[0; 4]);
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDtype(d)) if d == "<i4"));
        let bytes = with_dict("{'descr': '>f4', 'fortran_order': False, 'shape': (1,), }", &[0; 4]);
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn rejects_fortran_order() {
        let bytes = with_dict("{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }", &[0; 4]);
        assert!(matches!(decode(&bytes), Err(Error::FortranOrder)));
    }

    #[test]
    fn rejects_overflowing_shape() {
        let bytes = with_dict(
            "{'descr': '<f4', 'fortran_order': False, 'shape': (18446744073709551615, 4), }",
            &[],
        );
        assert!(matches!(decode(&bytes), Err(Error::ShapeOverflow(_))));
    }

    #[test]
    fn rejects_truncated_data() {
        let bytes = with_dict("{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }", &[0; 4]);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("data bytes"));
    }

    #[test]
    fn missing_key_is_named() {
        let bytes = with_dict("{'descr': '<f4', 'shape': (1,), }", &[0; 4]);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("fortran_order"));
    }

    #[test]
    fn keys_in_any_order() {
        let bytes = with_dict("{'shape': (1,), 'fortran_order': False, 'descr': '<f4'}", &[0; 4]);
        assert_eq!(decode(&bytes).unwrap().shape(), &[1]);
    }
}
