//! AF1 array files.
//!
//! ```text
//! {"magic":"AF1","dtype":"f64","shape":[T,K],"order":"row-major","endian":"little","meta":{}}\n
//! <raw little-endian payload>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffengine::Array;
use crate::error::{Error, Result};

const MAGIC: &str = "AF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub order: String,
    pub endian: String,
    #[serde(default = "empty_meta")]
    pub meta: Value,
}

fn empty_meta() -> Value {
    Value::Object(Default::default())
}

impl Header {
    fn new(dtype: Dtype, shape: &[usize], meta: Value) -> Self {
        Header {
            magic: MAGIC.into(),
            dtype,
            shape: shape.to_vec(),
            order: "row-major".into(),
            endian: "little".into(),
            meta,
        }
    }
}

/// Decoded contents of an AF1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Array),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

/// Serializes an `f64` array. NaN payloads (missing values) are written with
/// their bit pattern unchanged.
pub fn encode_f64(a: &Array, meta: Value) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(a.len() * 8);
    for v in a.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    encode(&Header::new(Dtype::F64, a.shape(), meta), &payload)
}

pub fn encode_u8(shape: &[usize], data: &[u8], meta: Value) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("af1", format!("{shape:?} vs {} bytes", data.len())));
    }
    encode(&Header::new(Dtype::U8, shape, meta), data)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Payload)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("magic {:?}", header.magic)));
    }
    if header.endian != "little" {
        return Err(Error::Unsupported(format!("endian {:?}", header.endian)));
    }
    if header.order != "row-major" {
        return Err(Error::Unsupported(format!("order {:?}", header.order)));
    }
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    let expect = n * header.dtype.width();
    if body.len() != expect {
        return Err(Error::Format(format!(
            "shape {:?} needs {expect} payload bytes, found {}",
            header.shape,
            body.len()
        )));
    }
    let payload = match header.dtype {
        Dtype::F64 => {
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Payload::F64(Array::new(header.shape.clone(), data)?)
        }
        Dtype::U8 => Payload::U8 {
            shape: header.shape.clone(),
            data: body.to_vec(),
        },
    };
    Ok((header, payload))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f64(path: &Path, a: &Array, meta: Value) -> Result<()> {
    write_bytes(path, &encode_f64(a, meta)?)
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8], meta: Value) -> Result<()> {
    write_bytes(path, &encode_u8(shape, data, meta)?)
}

pub fn read(path: &Path) -> Result<(Header, Payload)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_f64(path: &Path) -> Result<(Array, Value)> {
    match read(path)? {
        (h, Payload::F64(a)) => Ok((a, h.meta)),
        (h, _) => Err(Error::Format(format!("{}: expected f64, found {:?}", path.display(), h.dtype))),
    }
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>, Value)> {
    match read(path)? {
        (h, Payload::U8 { shape, data }) => Ok((shape, data, h.meta)),
        (h, _) => Err(Error::Format(format!("{}: expected u8, found {:?}", path.display(), h.dtype))),
    }
}
