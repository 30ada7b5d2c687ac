//! Binary weight containers.
//!
//! ```text
//! magic      8 bytes   "TIFADPT1" (adapters) or "TIFBASE1" (base weights)
//! records    repeated  u16 layer-id, u16 rank, u32 rows, u32 cols, payload
//! crc        u32       CRC-32 (IEEE) of every byte between magic and crc
//! ```
//!
//! All integers and floats are little-endian; floats are f32, row-major.
//! An adapter record (rank ≥ 1) carries A (rank×cols) then B (rows×rank).
//! A base record has rank 0 and carries W (rows×cols) then the bias (rows);
//! the condition vector y is stored as layer-id 0xFFFF with cols = 0.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::lora::{LoraAdapter, LoraLayer};
use super::network::{ArchSpec, DenoiserParams, Dense, LayerId};
use crate::error::{Result, TifError};

pub const ADAPTER_MAGIC: &[u8; 8] = b"TIFADPT1";
pub const BASE_MAGIC: &[u8; 8] = b"TIFBASE1";
const EMBED_ID: u16 = 0xFFFF;

fn put_header(buf: &mut Vec<u8>, id: u16, rank: u16, rows: u32, cols: u32) {
    buf.extend_from_slice(&id.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
}

fn put_floats<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| TifError::Format(format!("{what} {v} does not fit in u16")))
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| TifError::Format(format!("dimension {v} does not fit in u32")))
}

fn finish(magic: &[u8; 8], payload: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn adapter_to_bytes(adapter: &LoraAdapter<f32>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let rank = dim_u16(adapter.rank, "rank")?;
    for l in &adapter.layers {
        put_header(
            &mut payload,
            l.id.0,
            rank,
            dim_u32(l.b.nrows())?,
            dim_u32(l.a.ncols())?,
        );
        put_floats(&mut payload, l.a.iter());
        put_floats(&mut payload, l.b.iter());
    }
    Ok(finish(ADAPTER_MAGIC, payload))
}

pub fn base_to_bytes(params: &DenoiserParams<f32>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        let (rows, cols) = l.weight.dim();
        put_header(
            &mut payload,
            dim_u16(i, "layer id")?,
            0,
            dim_u32(rows)?,
            dim_u32(cols)?,
        );
        put_floats(&mut payload, l.weight.iter());
        put_floats(&mut payload, l.bias.iter());
    }
    put_header(
        &mut payload,
        EMBED_ID,
        0,
        dim_u32(params.cond_embed.len())?,
        0,
    );
    put_floats(&mut payload, params.cond_embed.iter());
    Ok(finish(BASE_MAGIC, payload))
}

struct Record {
    id: u16,
    rank: usize,
    rows: usize,
    cols: usize,
    first: Vec<f32>,
    second: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TifError::Format("truncated record".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| TifError::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn parse(bytes: &[u8], magic: &[u8; 8]) -> Result<Vec<Record>> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(TifError::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(TifError::Format("CRC mismatch".into()));
    }
    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
    };
    let mut records = Vec::new();
    while cur.pos < payload.len() {
        let id = cur.u16()?;
        let rank = cur.u16()? as usize;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let (first, second) = if rank == 0 {
            (cur.floats(rows * cols)?, cur.floats(rows)?)
        } else {
            (cur.floats(rank * cols)?, cur.floats(rows * rank)?)
        };
        records.push(Record {
            id,
            rank,
            rows,
            cols,
            first,
            second,
        });
    }
    Ok(records)
}

/// Reads an adapter. The scale factor is not part of the container.
pub fn adapter_from_bytes(bytes: &[u8], scale: f64) -> Result<LoraAdapter<f32>> {
    let records = parse(bytes, ADAPTER_MAGIC)?;
    let rank = records.first().map(|r| r.rank).unwrap_or(0);
    if rank == 0 || records.iter().any(|r| r.rank != rank) {
        return Err(TifError::Format(
            "adapter records need one common rank >= 1".into(),
        ));
    }
    let layers = records
        .into_iter()
        .map(|r| LoraLayer {
            id: LayerId(r.id),
            a: Array2::from_shape_vec((rank, r.cols), r.first).expect("sized by header"),
            b: Array2::from_shape_vec((r.rows, rank), r.second).expect("sized by header"),
        })
        .collect();
    Ok(LoraAdapter {
        rank,
        scale,
        layers,
    })
}

pub fn base_from_bytes(bytes: &[u8]) -> Result<DenoiserParams<f32>> {
    let mut records = parse(bytes, BASE_MAGIC)?;
    let embed_pos = records
        .iter()
        .position(|r| r.id == EMBED_ID)
        .ok_or_else(|| TifError::Format("missing condition vector".into()))?;
    let embed = records.remove(embed_pos);
    if records
        .iter()
        .enumerate()
        .any(|(i, r)| r.id as usize != i || r.rank != 0)
    {
        return Err(TifError::Format(
            "base layers must be dense and in id order".into(),
        ));
    }
    if records.len() < 3 {
        return Err(TifError::Format(
            "base needs cond, hidden and output layers".into(),
        ));
    }
    let cond_dim = embed.rows;
    let image_len = records.last().expect("non-empty").rows;
    let hidden: Vec<usize> = records[1..records.len() - 1]
        .iter()
        .map(|r| r.rows)
        .collect();
    let time_dim = records[1]
        .cols
        .checked_sub(image_len + cond_dim)
        .ok_or_else(|| TifError::Format("first layer narrower than its inputs".into()))?;
    let arch = ArchSpec {
        image_len,
        time_dim,
        cond_dim,
        hidden,
    };
    arch.validate()?;
    for (i, r) in records.iter().enumerate() {
        if arch.layer_dims(LayerId(i as u16)) != Some((r.rows, r.cols)) {
            return Err(TifError::Format(format!(
                "layer {i} has inconsistent dimensions"
            )));
        }
    }
    let layers = records
        .into_iter()
        .map(|r| Dense {
            weight: Array2::from_shape_vec((r.rows, r.cols), r.first).expect("sized by header"),
            bias: Array1::from(r.second),
        })
        .collect();
    Ok(DenoiserParams {
        arch,
        layers,
        cond_embed: Array1::from(embed.second),
    })
}

pub fn write_adapter<W: Write>(adapter: &LoraAdapter<f32>, mut w: W) -> Result<()> {
    w.write_all(&adapter_to_bytes(adapter)?)?;
    Ok(())
}

pub fn read_adapter<R: Read>(mut r: R, scale: f64) -> Result<LoraAdapter<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    adapter_from_bytes(&bytes, scale)
}

pub fn write_base<W: Write>(params: &DenoiserParams<f32>, mut w: W) -> Result<()> {
    w.write_all(&base_to_bytes(params)?)?;
    Ok(())
}

pub fn read_base<R: Read>(mut r: R) -> Result<DenoiserParams<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    base_from_bytes(&bytes)
}

/// SHA-256 of the serialized base weights.
pub fn base_hash(params: &DenoiserParams<f32>) -> Result<[u8; 32]> {
    Ok(Sha256::digest(base_to_bytes(params)?).into())
}
