//! The subset of NPY v1.0 used for every on-disk tensor: little-endian
//! `float32`, C order, any rank.
//!
//! Header layout: magic `\x93NUMPY`, version `1.0`, a little-endian `u16`
//! header length, then an ASCII Python dict literal padded with spaces and a
//! trailing newline so the data starts on a 64-byte boundary.

use std::path::Path;

use super::TensorError;

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

pub(crate) fn encode(shape: &[usize], values: &[f32]) -> Vec<u8> {
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len() + values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), TensorError> {
    let malformed = |offset: usize, reason: &str| TensorError::MalformedHeader {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };

    if bytes.len() < PREAMBLE_LEN {
        return Err(malformed(bytes.len(), "file shorter than the NPY preamble"));
    }
    if &bytes[..6] != MAGIC {
        return Err(malformed(0, "missing NPY magic string"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(malformed(6, "only NPY version 1.0 is supported"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(malformed(8, "header length runs past end of file"));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..data_start])
        .map_err(|e| malformed(PREAMBLE_LEN + e.valid_up_to(), "header is not ASCII"))?;
    let dict = parse_header_dict(header).map_err(|(pos, reason)| malformed(PREAMBLE_LEN + pos, &reason))?;

    if dict.descr != "<f4" {
        return Err(malformed(
            PREAMBLE_LEN,
            &format!("unsupported dtype '{}', expected '<f4'", dict.descr),
        ));
    }
    if dict.fortran_order {
        return Err(malformed(PREAMBLE_LEN, "fortran_order arrays are not supported"));
    }
    if dict.shape.is_empty() {
        return Err(malformed(PREAMBLE_LEN, "zero-dimensional arrays are not supported"));
    }

    let count = dict
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(PREAMBLE_LEN, "shape product overflows"))?;
    let data = &bytes[data_start..];
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| malformed(PREAMBLE_LEN, "shape product overflows"))?;
    if data.len() != expected {
        return Err(TensorError::ShapeMismatch {
            path: path.to_path_buf(),
            offset: data_start,
            shape: dict.shape,
            expected_bytes: expected,
            found_bytes: data.len(),
        });
    }

    let mut values = Vec::with_capacity(count);
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue {
                path: path.to_path_buf(),
                offset: data_start + 4 * i,
            });
        }
        values.push(v);
    }
    Ok((dict.shape, values))
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the Python dict literal. Errors carry the byte position within the
/// header string.
fn parse_header_dict(src: &str) -> Result<HeaderDict, (usize, String)> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;

    p.skip_ws();
    p.expect(b'{')?;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key_pos = p.pos;
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => fortran_order = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err((key_pos, format!("unexpected key '{other}'"))),
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err((p.pos, "trailing bytes after header dict".into()));
    }

    Ok(HeaderDict {
        descr: descr.ok_or((0, "missing 'descr'".to_string()))?,
        fortran_order: fortran_order.ok_or((0, "missing 'fortran_order'".to_string()))?,
        shape: shape.ok_or((0, "missing 'shape'".to_string()))?,
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), (usize, String)> {
        if self.eat(c) {
            Ok(())
        } else {
            Err((self.pos, format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String, (usize, String)> {
        let start = self.pos;
        let quote = match self.src.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err((start, "expected a quoted string".into())),
        };
        self.pos += 1;
        let body = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err((start, "unterminated string".into()));
        }
        let s = String::from_utf8_lossy(&self.src[body..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn boolean(&mut self) -> Result<bool, (usize, String)> {
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err((self.pos, "expected True or False".into()))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>, (usize, String)> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                break;
            }
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err((start, "expected a dimension".into()));
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
            let dim = text
                .parse::<usize>()
                .map_err(|_| (start, "dimension out of range".to_string()))?;
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                break;
            }
        }
        Ok(dims)
    }
}
