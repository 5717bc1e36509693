//! Shared pieces of the binary file formats: a magic line, a UTF-8
//! `key=value` header terminated by a blank line, and little-endian payloads.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered header entries as written; parsed back into a map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn write_to<W: Write>(&self, w: &mut W, magic: &str) -> io::Result<()> {
        w.write_all(magic.as_bytes())?;
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        w.write_all(b"\n")
    }

    pub fn read_from<R: BufRead>(r: &mut R, magic: &'static str) -> Result<HeaderMap> {
        let mut buf = vec![0u8; magic.len()];
        match r.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(Error::BadMagic { expected: magic })
            }
            Err(e) => return Err(e.into()),
        }
        if buf != magic.as_bytes() {
            return Err(Error::BadMagic { expected: magic });
        }
        let mut map = BTreeMap::new();
        loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| match e.kind() {
                io::ErrorKind::InvalidData => Error::Header("header is not UTF-8".into()),
                _ => e.into(),
            })?;
            if n == 0 {
                return Err(Error::Truncated("header".into()));
            }
            let line = line.trim_end_matches('\n');
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Header(format!("line without '=': {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(HeaderMap { map })
    }
}

#[derive(Debug, Clone)]
pub struct HeaderMap {
    map: BTreeMap<String, String>,
}

impl HeaderMap {
    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Header(format!("missing key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Header(format!("cannot parse {key}={raw:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.map.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    pub fn check_version(&self, expected: u32) -> Result<()> {
        let found: u32 = self.get("version")?;
        if found != expected {
            return Err(Error::Version { found, expected });
        }
        Ok(())
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads `n` binary32 values, reporting `what` on short reads.
pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    read_exact_named(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_named(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_exact_named<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => e.into(),
    })
}

/// Rounds through binary32, the precision of every stored payload.
pub fn to_stored_precision(v: f64) -> f64 {
    v as f32 as f64
}
