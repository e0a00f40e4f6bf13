//! Little-endian binary dataset files.
//!
//! ```text
//! "WBND" | version u16 | F u32 | K u32 | N u32 | n u32 | seed u64
//! | descriptor: len u32 + utf-8 bytes
//! | features: n*F f64 row-major | class labels: n u16
//! | domain presence u8 | domain labels: n u16 (if present)
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{DatasetMeta, DomainDataset};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"WBND";
pub const DATASET_VERSION: u16 = 1;

/// Bounds-checked little-endian reader reporting the byte offset of any failure.
pub(crate) struct ByteReader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader {
            cur: Cursor::new(bytes),
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.cur.position()
    }

    pub(crate) fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    fn wrap<T>(&mut self, what: &str, r: std::io::Result<T>) -> Result<T> {
        r.or_else(|_| self.fail(format!("truncated while reading {what}")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        let r = self.cur.read_exact(&mut m);
        self.wrap("magic", r)?;
        if &m != expected {
            self.cur.set_position(0);
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        let r = self.cur.read_u8();
        self.wrap(what, r)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let r = self.cur.read_u16::<LittleEndian>();
        self.wrap(what, r)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let r = self.cur.read_u32::<LittleEndian>();
        self.wrap(what, r)
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let r = self.cur.read_u64::<LittleEndian>();
        self.wrap(what, r)
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let r = self.cur.read_f64::<LittleEndian>();
        self.wrap(what, r)
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.cur.position()
    }

    /// Reads `count` f64 values after checking they fit in the remaining bytes.
    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        if (count as u64).saturating_mul(8) > self.remaining() {
            return self.fail(format!("truncated while reading {what}"));
        }
        let mut out = vec![0.0; count];
        let r = self.cur.read_f64_into::<LittleEndian>(&mut out);
        self.wrap(what, r)?;
        Ok(out)
    }

    pub(crate) fn u16s(&mut self, count: usize, what: &str) -> Result<Vec<u16>> {
        if (count as u64).saturating_mul(2) > self.remaining() {
            return self.fail(format!("truncated while reading {what}"));
        }
        let mut out = vec![0u16; count];
        let r = self.cur.read_u16_into::<LittleEndian>(&mut out);
        self.wrap(what, r)?;
        Ok(out)
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as u64;
        if len > self.remaining() {
            return self.fail(format!("truncated while reading {what}"));
        }
        let mut buf = vec![0u8; len as usize];
        let r = self.cur.read_exact(&mut buf);
        self.wrap(what, r)?;
        String::from_utf8(buf).or_else(|_| self.fail(format!("{what} is not utf-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return self.fail(format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}

/// Little-endian writer into a byte buffer. Writes into a `Vec` cannot fail.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub(crate) buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.write_all(b).expect("vec write");
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.write_u8(v).expect("vec write");
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.write_u16::<LittleEndian>(v).expect("vec write");
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).expect("vec write");
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).expect("vec write");
    }
    pub(crate) fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} = {v} does not fit in u32")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Contract(format!("{what} = {v} does not fit in u16")))
}

/// Encodes a dataset into bytes.
pub fn write_dataset(ds: &DomainDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u32(to_u32(ds.num_features, "F")?);
    w.u32(to_u32(ds.meta.num_classes, "K")?);
    w.u32(to_u32(ds.meta.num_domains, "N")?);
    w.u32(to_u32(ds.len(), "n")?);
    w.u64(ds.meta.seed);
    w.string(&ds.meta.descriptor);
    w.f64s(&ds.features);
    for &y in &ds.class_labels {
        w.u16(to_u16(y, "class label")?);
    }
    match &ds.domain_labels {
        None => w.u8(0),
        Some(d) => {
            w.u8(1);
            for &x in d {
                w.u16(to_u16(x, "domain label")?);
            }
        }
    }
    Ok(w.buf)
}

/// Decodes a dataset; any malformation yields an error and no partial dataset.
pub fn read_dataset(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let f = r.u32("F")? as usize;
    let k = r.u32("K")? as usize;
    let nd = r.u32("N")? as usize;
    let n = r.u32("n")? as usize;
    let seed = r.u64("seed")?;
    let descriptor = r.string("descriptor")?;
    let features = r.f64s(n.saturating_mul(f), "features")?;
    let class_labels = r.u16s(n, "class labels")?.into_iter().map(usize::from).collect();
    let presence_at = r.offset();
    let domain_labels = match r.u8("domain presence flag")? {
        0 => None,
        1 => Some(r.u16s(n, "domain labels")?.into_iter().map(usize::from).collect()),
        other => {
            return Err(Error::Format {
                offset: presence_at,
                msg: format!("invalid domain presence flag {other}"),
            })
        }
    };
    r.finish()?;
    DomainDataset::new(
        features,
        f,
        class_labels,
        domain_labels,
        DatasetMeta {
            num_classes: k,
            num_domains: nd,
            descriptor,
            seed,
        },
    )
    .map_err(|e| Error::Format {
        offset: r.offset(),
        msg: format!("inconsistent dataset: {e}"),
    })
}

pub fn save_dataset(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_dataset(ds)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    read_dataset(&std::fs::read(path)?)
}
