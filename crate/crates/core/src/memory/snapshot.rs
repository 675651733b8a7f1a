//! Binary bank snapshots for deterministic replay.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "SSMB"            4 bytes
//! version u32              = 1
//! feature_dim u32          C
//! tokens_per_view u32      P
//! capacity u32
//! count u32
//! directional u8
//! next_id u64
//! count × token:
//!   id u64, birth_t u64, read_count u64, usage_sum f64,
//!   direction_key 3 × f64, latent_key C × f32, value C × f32
//! ```
//!
//! Latent keys and values are stored at their in-memory precision (f32).
//! Direction keys and usage sums are kept in f64 so a restored bank replays
//! bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use super::{MemoryBank, MemoryConfig, MemoryToken};
use crate::error::{Error, Result};
use crate::types::Vec3;

const MAGIC: &[u8; 4] = b"SSMB";
const VERSION: u32 = 1;

pub fn snapshot<W: Write>(bank: &MemoryBank, mut out: W) -> Result<()> {
    let cfg = bank.config();
    let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::arg(format!("{what} exceeds u32")));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(cfg.feature_dim, "feature_dim")?.to_le_bytes());
    buf.extend_from_slice(&u32_of(cfg.tokens_per_view, "tokens_per_view")?.to_le_bytes());
    buf.extend_from_slice(&u32_of(cfg.capacity_tokens, "capacity")?.to_le_bytes());
    buf.extend_from_slice(&u32_of(bank.len(), "count")?.to_le_bytes());
    buf.push(u8::from(cfg.directional));
    buf.extend_from_slice(&bank.next_id().to_le_bytes());
    for t in bank.tokens() {
        buf.extend_from_slice(&t.id.to_le_bytes());
        buf.extend_from_slice(&t.birth_t.to_le_bytes());
        buf.extend_from_slice(&t.read_count.to_le_bytes());
        buf.extend_from_slice(&t.usage_sum.to_le_bytes());
        for v in t.direction_key.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in t.latent_key.iter().chain(&t.value) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.pos as u64, "truncated snapshot"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

pub fn restore<R: Read>(mut input: R) -> Result<MemoryBank> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if &cur.take::<4>()? != MAGIC {
        return Err(Error::format(0, "bad snapshot magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported snapshot version {version}")));
    }
    let feature_dim = cur.u32()? as usize;
    let tokens_per_view = cur.u32()? as usize;
    let capacity_tokens = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let directional = match cur.take::<1>()?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::format(cur.pos as u64 - 1, format!("bad directional flag {b}"))),
    };
    let next_id = cur.u64()?;
    let config = MemoryConfig {
        feature_dim,
        tokens_per_view,
        capacity_tokens,
        directional,
    };
    let mut tokens = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let start = cur.pos;
        let id = cur.u64()?;
        let birth_t = cur.u64()?;
        let read_count = cur.u64()?;
        let usage_sum = cur.f64()?;
        let direction_key = Vec3::new(cur.f64()?, cur.f64()?, cur.f64()?);
        let latent_key = (0..feature_dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        let value = (0..feature_dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        if (direction_key.norm() - 1.0).abs() > 1e-9 || !(usage_sum >= 0.0) {
            return Err(Error::format(start as u64, "token violates bank invariants"));
        }
        tokens.push(MemoryToken {
            id,
            latent_key,
            direction_key,
            value,
            usage_sum,
            read_count,
            birth_t,
        });
    }
    if cur.pos != data.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after snapshot"));
    }
    MemoryBank::from_parts(config, tokens, next_id)
}

pub fn write_snapshot(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(Error::at_path(path))?;
    snapshot(bank, std::io::BufWriter::new(f))
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
    restore(std::io::BufReader::new(f))
}
