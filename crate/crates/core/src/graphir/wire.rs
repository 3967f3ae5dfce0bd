//! Minimal protocol-buffers wire encoding.

use super::GraphError;

pub(crate) const VARINT: u8 = 0;
pub(crate) const FIXED64: u8 = 1;
pub(crate) const LEN: u8 = 2;
pub(crate) const FIXED32: u8 = 5;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn key(&mut self, field: u32, wire_type: u8) {
        self.varint(((field as u64) << 3) | wire_type as u64);
    }

    /// int32/int64 fields: negative values take ten bytes.
    pub fn int(&mut self, field: u32, v: i64) {
        self.key(field, VARINT);
        self.varint(v as u64);
    }

    pub fn float(&mut self, field: u32, v: f32) {
        self.key(field, FIXED32);
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn bytes(&mut self, field: u32, data: &[u8]) {
        self.key(field, LEN);
        self.varint(data.len() as u64);
        self.buf.extend_from_slice(data);
    }

    pub fn string(&mut self, field: u32, s: &str) {
        self.bytes(field, s.as_bytes());
    }

    pub fn message(&mut self, field: u32, build: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        build(&mut inner);
        self.bytes(field, &inner.buf);
    }
}

/// One decoded field value. `offset` is the absolute position of the payload.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Value<'a> {
    Varint(u64),
    // skipped by every message we read (doubles, fixed64 ints)
    #[allow(dead_code)]
    Fixed64(u64),
    Bytes { data: &'a [u8], offset: usize },
    Fixed32(u32),
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

pub(crate) fn err(offset: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        offset,
        message: message.into(),
    }
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], base: usize) -> Reader<'a> {
        Reader { data, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn read_varint(&mut self) -> Result<u64, GraphError> {
        let start = self.offset();
        let mut v: u64 = 0;
        for i in 0..10 {
            let Some(&b) = self.data.get(self.pos) else {
                return Err(err(start, "truncated varint"));
            };
            self.pos += 1;
            if i == 9 && b > 1 {
                return Err(err(start, "varint overflows 64 bits"));
            }
            v |= ((b & 0x7f) as u64) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(err(start, "varint longer than 10 bytes"))
    }

    fn take(&mut self, n: usize) -> Result<(&'a [u8], usize), GraphError> {
        let offset = self.offset();
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| err(offset, format!("field of {n} bytes runs past the end")))?;
        let slice = &self.data[self.pos..end];
        self.pos = end;
        Ok((slice, offset))
    }

    /// Next `(field number, value, offset of key)`, or `None` at the end.
    pub fn next(&mut self) -> Result<Option<(u32, Value<'a>, usize)>, GraphError> {
        if self.pos >= self.data.len() {
            return Ok(None);
        }
        let at = self.offset();
        let key = self.read_varint()?;
        let field = key >> 3;
        if field == 0 || field > u32::MAX as u64 >> 3 {
            return Err(err(at, format!("invalid field number {field}")));
        }
        let value = match (key & 7) as u8 {
            VARINT => Value::Varint(self.read_varint()?),
            FIXED64 => {
                let (b, _) = self.take(8)?;
                Value::Fixed64(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            }
            LEN => {
                let len = self.read_varint()?;
                let len = usize::try_from(len).map_err(|_| err(at, "length overflows"))?;
                let (data, offset) = self.take(len)?;
                Value::Bytes { data, offset }
            }
            FIXED32 => {
                let (b, _) = self.take(4)?;
                Value::Fixed32(u32::from_le_bytes(b.try_into().expect("4 bytes")))
            }
            wt => return Err(err(at, format!("unsupported wire type {wt}"))),
        };
        Ok(Some((field as u32, value, at)))
    }
}

impl<'a> Value<'a> {
    pub fn as_int(&self, at: usize) -> Result<i64, GraphError> {
        match *self {
            Value::Varint(v) => Ok(v as i64),
            _ => Err(err(at, "expected a varint")),
        }
    }

    pub fn as_bytes(&self, at: usize) -> Result<(&'a [u8], usize), GraphError> {
        match *self {
            Value::Bytes { data, offset } => Ok((data, offset)),
            _ => Err(err(at, "expected a length-delimited field")),
        }
    }

    pub fn as_string(&self, at: usize) -> Result<String, GraphError> {
        let (b, offset) = self.as_bytes(at)?;
        String::from_utf8(b.to_vec()).map_err(|_| err(offset, "string is not valid UTF-8"))
    }

    pub fn as_float(&self, at: usize) -> Result<f32, GraphError> {
        match *self {
            Value::Fixed32(v) => Ok(f32::from_bits(v)),
            _ => Err(err(at, "expected a fixed32 float")),
        }
    }

    /// Repeated varint field, accepting both packed and unpacked forms.
    pub fn push_ints(&self, at: usize, out: &mut Vec<i64>) -> Result<(), GraphError> {
        match *self {
            Value::Varint(v) => out.push(v as i64),
            Value::Bytes { data, offset } => {
                let mut r = Reader::new(data, offset);
                while r.pos < data.len() {
                    out.push(r.read_varint()? as i64);
                }
            }
            _ => return Err(err(at, "expected varint or packed varints")),
        }
        Ok(())
    }

    /// Repeated float field, packed or unpacked.
    pub fn push_floats(&self, at: usize, out: &mut Vec<f32>) -> Result<(), GraphError> {
        match *self {
            Value::Fixed32(v) => out.push(f32::from_bits(v)),
            Value::Bytes { data, offset } => {
                if data.len() % 4 != 0 {
                    return Err(err(offset, "packed floats are not a multiple of 4 bytes"));
                }
                out.extend(
                    data.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                );
            }
            _ => return Err(err(at, "expected fixed32 or packed floats")),
        }
        Ok(())
    }
}
