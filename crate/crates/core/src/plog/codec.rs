//! Bit-exact record and frame encoding. See `docs/FORMATS.md`.
//!
//! Record:
//! ```text
//! u16 model_id_len | model_id utf8 | u64 feature_id | u8 op | u64 epoch |
//! u32 source_shard | u16 matrix_count | { u16 name_len | name | u32 len | f64 * len }*
//! ```
//! Frame:
//! ```text
//! u32 frame_len | u8 flag | u32 record_count | u32 raw_len | u32 crc32(body) | body
//! ```
//! All integers and floats little-endian. `frame_len` counts the bytes after
//! itself. `flag` 0 = raw body, 1 = raw DEFLATE of the concatenated records.

use std::io::{Read, Write};
use std::sync::Arc;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use super::{UpdateOp, UpdateRecord};
use crate::error::{Error, Result};
use crate::model::ParameterSlot;

pub const FLAG_RAW: u8 = 0;
pub const FLAG_DEFLATE: u8 = 1;

/// Bytes after `frame_len` that precede the body.
pub const FRAME_HEADER_REST: usize = 1 + 4 + 4 + 4;
pub const FRAME_PREFIX: usize = 4;

/// Bodies shorter than this are stored raw.
const COMPRESS_MIN: usize = 128;

pub fn encode_record(r: &UpdateRecord, out: &mut Vec<u8>) {
    put_str(out, &r.model_id);
    out.extend_from_slice(&r.feature_id.to_le_bytes());
    out.push(match r.op {
        UpdateOp::Upsert => 0,
        UpdateOp::Delete => 1,
    });
    out.extend_from_slice(&r.epoch.to_le_bytes());
    out.extend_from_slice(&r.source_shard.to_le_bytes());
    encode_slot(&r.payload, out);
}

pub fn encode_slot(slot: &ParameterSlot, out: &mut Vec<u8>) {
    out.extend_from_slice(&(slot.matrix_count() as u16).to_le_bytes());
    for (name, values) in slot.iter() {
        put_str(out, name);
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Encoded size of a record, without encoding it.
pub fn record_len(r: &UpdateRecord) -> usize {
    let slot: usize = r
        .payload
        .iter()
        .map(|(name, values)| 2 + name.len() + 4 + 8 * values.len())
        .sum();
    2 + r.model_id.len() + 8 + 1 + 8 + 4 + 2 + slot
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Cursor over a byte slice with bounds-checked little-endian reads.
#[derive(Clone, Copy)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Decode(format!(
                "truncated: wanted {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Skips a length-prefixed string without validating it.
    pub fn skip_str(&mut self) -> Result<()> {
        let n = self.u16()? as usize;
        self.take(n).map(|_| ())
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Decode(e.to_string()))
    }
}

pub fn decode_record(rd: &mut Reader<'_>) -> Result<UpdateRecord> {
    let model_id: Arc<str> = Arc::from(rd.str()?);
    let feature_id = rd.u64()?;
    let op = match rd.u8()? {
        0 => UpdateOp::Upsert,
        1 => UpdateOp::Delete,
        x => return Err(Error::Decode(format!("bad op byte {x}"))),
    };
    let epoch = rd.u64()?;
    let source_shard = rd.u32()?;
    let payload = decode_slot(rd)?;
    Ok(UpdateRecord {
        feature_id,
        op,
        model_id,
        source_shard,
        payload,
        epoch,
    })
}

/// Advances past one record without materializing it; returns its feature id.
pub fn skip_record(rd: &mut Reader<'_>) -> Result<u64> {
    rd.skip_str()?;
    let feature_id = rd.u64()?;
    rd.take(1 + 8 + 4)?;
    for _ in 0..rd.u16()? {
        rd.skip_str()?;
        let len = rd.u32()? as usize;
        rd.take(len.checked_mul(8).ok_or_else(|| Error::Decode("matrix length overflow".into()))?)?;
    }
    Ok(feature_id)
}

pub fn decode_slot(rd: &mut Reader<'_>) -> Result<ParameterSlot> {
    let count = rd.u16()?;
    let mut slot = ParameterSlot::new();
    for _ in 0..count {
        let name = rd.str()?.to_string();
        let len = rd.u32()? as usize;
        if len > rd.buf.len() / 8 {
            return Err(Error::Decode(format!("matrix length {len} exceeds buffer")));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(rd.f64()?);
        }
        if slot.insert(name, values).is_some() {
            return Err(Error::Decode("duplicate matrix name".into()));
        }
    }
    Ok(slot)
}

/// Serializes and (when worthwhile) compresses a batch into one frame.
pub fn encode_frame(records: &[UpdateRecord], compress: bool) -> Vec<u8> {
    let mut body = Vec::with_capacity(records.len() * 48);
    for r in records {
        encode_record(r, &mut body);
    }
    let raw_len = body.len();
    let (flag, stored) = if compress && raw_len >= COMPRESS_MIN {
        let mut enc = DeflateEncoder::new(Vec::with_capacity(raw_len / 2), Compression::fast());
        enc.write_all(&body).expect("in-memory write");
        let packed = enc.finish().expect("in-memory write");
        if packed.len() < raw_len {
            (FLAG_DEFLATE, packed)
        } else {
            (FLAG_RAW, body)
        }
    } else {
        (FLAG_RAW, body)
    };
    let frame_len = FRAME_HEADER_REST + stored.len();
    let mut out = Vec::with_capacity(FRAME_PREFIX + frame_len);
    out.extend_from_slice(&(frame_len as u32).to_le_bytes());
    out.push(flag);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(raw_len as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&stored).to_le_bytes());
    out.extend_from_slice(&stored);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    /// Total bytes of the frame including the length prefix.
    pub total_len: usize,
    pub flag: u8,
    pub record_count: u32,
    pub raw_len: u32,
    pub crc: u32,
}

/// Parses a frame header; `Ok(None)` when `buf` holds less than a full header.
pub fn peek_header(buf: &[u8]) -> Result<Option<FrameHeader>> {
    if buf.len() < FRAME_PREFIX + FRAME_HEADER_REST {
        return Ok(None);
    }
    let mut rd = Reader::new(buf);
    let frame_len = rd.u32()? as usize;
    if frame_len < FRAME_HEADER_REST {
        return Err(Error::Decode(format!("frame length {frame_len} too small")));
    }
    let flag = rd.u8()?;
    if flag > FLAG_DEFLATE {
        return Err(Error::Decode(format!("unknown frame flag {flag}")));
    }
    Ok(Some(FrameHeader {
        total_len: FRAME_PREFIX + frame_len,
        flag,
        record_count: rd.u32()?,
        raw_len: rd.u32()?,
        crc: rd.u32()?,
    }))
}

/// Verifies a complete frame (header included) and returns its raw body.
fn frame_body(frame: &[u8]) -> Result<(FrameHeader, std::borrow::Cow<'_, [u8]>)> {
    let h = peek_header(frame)?.ok_or_else(|| Error::Decode("short frame".into()))?;
    if frame.len() != h.total_len {
        return Err(Error::Decode(format!(
            "frame is {} bytes, header says {}",
            frame.len(),
            h.total_len
        )));
    }
    let stored = &frame[FRAME_PREFIX + FRAME_HEADER_REST..];
    if crc32fast::hash(stored) != h.crc {
        return Err(Error::Decode("frame checksum mismatch".into()));
    }
    let body = match h.flag {
        FLAG_RAW => std::borrow::Cow::Borrowed(stored),
        _ => {
            let mut out = Vec::with_capacity(h.raw_len as usize);
            DeflateDecoder::new(stored)
                .read_to_end(&mut out)
                .map_err(|e| Error::Decode(format!("inflate: {e}")))?;
            std::borrow::Cow::Owned(out)
        }
    };
    if body.len() != h.raw_len as usize {
        return Err(Error::Decode("decompressed length mismatch".into()));
    }
    Ok((h, body))
}

/// Decodes a complete frame (header included) into its records.
pub fn decode_frame(frame: &[u8]) -> Result<Vec<UpdateRecord>> {
    let (h, body) = frame_body(frame)?;
    let mut rd = Reader::new(&body);
    let mut records = Vec::with_capacity(h.record_count as usize);
    for _ in 0..h.record_count {
        records.push(decode_record(&mut rd)?);
    }
    if !rd.is_empty() {
        return Err(Error::Decode("trailing bytes in frame body".into()));
    }
    Ok(records)
}

/// Like [`decode_frame`], but records whose feature id fails `keep` are
/// skipped undecoded and come back as `None`.
pub fn decode_frame_where(frame: &[u8], keep: &dyn Fn(u64) -> bool) -> Result<Vec<Option<UpdateRecord>>> {
    let (h, body) = frame_body(frame)?;
    let mut rd = Reader::new(&body);
    let mut records = Vec::with_capacity(h.record_count as usize);
    for _ in 0..h.record_count {
        let mut probe = rd;
        probe.skip_str()?;
        if keep(probe.u64()?) {
            records.push(Some(decode_record(&mut rd)?));
        } else {
            skip_record(&mut rd)?;
            records.push(None);
        }
    }
    if !rd.is_empty() {
        return Err(Error::Decode("trailing bytes in frame body".into()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, op: UpdateOp) -> UpdateRecord {
        UpdateRecord {
            feature_id: id,
            op,
            model_id: Arc::from("ctr"),
            source_shard: 3,
            payload: match op {
                UpdateOp::Upsert => ParameterSlot::new().with("w", vec![id as f64 * 0.5]),
                UpdateOp::Delete => ParameterSlot::new(),
            },
            epoch: id + 100,
        }
    }

    #[test]
    fn record_layout_is_fixed() {
        let mut buf = Vec::new();
        encode_record(&rec(7, UpdateOp::Upsert), &mut buf);
        let mut expect = Vec::new();
        expect.extend_from_slice(&3u16.to_le_bytes());
        expect.extend_from_slice(b"ctr");
        expect.extend_from_slice(&7u64.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&107u64.to_le_bytes());
        expect.extend_from_slice(&3u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(b"w");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&3.5f64.to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(record_len(&rec(7, UpdateOp::Upsert)), buf.len());
    }

    #[test]
    fn frame_round_trip_both_flags() {
        let batch: Vec<_> = (0..200)
            .map(|i| rec(i, if i % 7 == 0 { UpdateOp::Delete } else { UpdateOp::Upsert }))
            .collect();
        for compress in [false, true] {
            let frame = encode_frame(&batch, compress);
            let h = peek_header(&frame).unwrap().unwrap();
            assert_eq!(h.flag, if compress { FLAG_DEFLATE } else { FLAG_RAW });
            assert_eq!(h.record_count, 200);
            assert_eq!(decode_frame(&frame).unwrap(), batch);
            let odd = decode_frame_where(&frame, &|id| id % 2 == 1).unwrap();
            for (r, got) in batch.iter().zip(odd) {
                assert_eq!(got.as_ref(), (r.feature_id % 2 == 1).then_some(r));
            }
        }
    }

    #[test]
    fn corrupted_frame_detected() {
        let batch: Vec<_> = (0..50).map(|i| rec(i, UpdateOp::Upsert)).collect();
        let mut frame = encode_frame(&batch, true);
        let last = frame.len() - 1;
        frame[last] ^= 0xff;
        assert!(decode_frame(&frame).is_err());
        assert!(decode_frame(&frame[..frame.len() - 3]).is_err());
    }

    #[test]
    fn partial_header_is_not_an_error() {
        let frame = encode_frame(&[rec(1, UpdateOp::Upsert)], false);
        assert_eq!(peek_header(&frame[..5]).unwrap(), None);
    }
}
