//! Bit-exact binary encoding for adapter exchange and checkpoints.
//!
//! Layout (little-endian throughout): magic `FDLR` | version u16 |
//! msg_type u8 | round u32 | client_id u32 | sample_count u64 |
//! entry_count u32 | per entry { name_len u16, name UTF-8, rows u32,
//! cols u32, rows*cols f64 } | CRC32 of all preceding bytes.

use std::path::Path;

use super::AdapterUpdate;
use crate::error::{Error, Result};
use crate::lora::StateEntry;
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"FDLR";
pub const VERSION: u16 = 1;

/// File extension for serialized adapter checkpoints.
pub const CHECKPOINT_EXT: &str = "fedlora";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    Update = 1,
    Aggregate = 2,
    Done = 3,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::Update),
            2 => Some(MsgType::Aggregate),
            3 => Some(MsgType::Done),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u32,
    pub sample_count: u64,
    pub entries: Vec<StateEntry>,
}

impl WireMessage {
    pub fn done(round: u32) -> Self {
        WireMessage {
            msg_type: MsgType::Done,
            round,
            client_id: 0,
            sample_count: 0,
            entries: Vec::new(),
        }
    }

    pub fn aggregate(round: u32, sample_count: u64, entries: Vec<StateEntry>) -> Self {
        WireMessage {
            msg_type: MsgType::Aggregate,
            round,
            client_id: 0,
            sample_count,
            entries,
        }
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + msg.entries.iter().map(|e| e.matrix.data().len() * 8 + e.name.len() + 12).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.sample_count.to_le_bytes());
    out.extend_from_slice(&(msg.entries.len() as u32).to_le_bytes());
    for e in &msg.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.matrix.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.matrix.cols() as u32).to_le_bytes());
        for v in e.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Protocol {
                field: field.into(),
                detail: format!(
                    "message truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Protocol {
            field: "length".into(),
            detail: format!("message of {} bytes is too short", bytes.len()),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::Protocol {
            field: "crc".into(),
            detail: format!("checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"),
        });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Protocol {
            field: "magic".into(),
            detail: format!("expected FDLR, got {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Protocol {
            field: "version".into(),
            detail: format!("expected {VERSION}, got {version}"),
        });
    }
    let msg_type = MsgType::from_u8(r.take(1, "msg_type")?[0]).ok_or_else(|| Error::Protocol {
        field: "msg_type".into(),
        detail: "unknown message type".into(),
    })?;
    let round = r.u32("round")?;
    let client_id = r.u32("client_id")?;
    let sample_count = r.u64("sample_count")?;
    let entry_count = r.u32("entry_count")? as usize;
    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let name_len = r.u16("name_len")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Protocol {
                field: "name".into(),
                detail: "entry name is not valid UTF-8".into(),
            })?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let raw = r.take(rows * cols * 8, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(StateEntry {
            name,
            matrix: Matrix::from_vec(rows, cols, data)?,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Protocol {
            field: "length".into(),
            detail: format!("{} trailing bytes after the last entry", body.len() - r.pos),
        });
    }
    Ok(WireMessage {
        msg_type,
        round,
        client_id,
        sample_count,
        entries,
    })
}

pub fn encode_update(update: &AdapterUpdate) -> Vec<u8> {
    encode(&WireMessage {
        msg_type: MsgType::Update,
        round: update.round,
        client_id: update.client_id,
        sample_count: update.sample_count,
        entries: update.entries.clone(),
    })
}

pub fn decode_update(bytes: &[u8]) -> Result<AdapterUpdate> {
    let msg = decode(bytes)?;
    if msg.msg_type != MsgType::Update {
        return Err(Error::Protocol {
            field: "msg_type".into(),
            detail: format!("expected an update message, got {:?}", msg.msg_type),
        });
    }
    Ok(AdapterUpdate {
        client_id: msg.client_id,
        round: msg.round,
        sample_count: msg.sample_count,
        entries: msg.entries,
    })
}

/// Write an aggregate message as a checkpoint file.
pub fn write_checkpoint(path: &Path, round: u32, sample_count: u64, entries: &[StateEntry]) -> Result<()> {
    let msg = WireMessage::aggregate(round, sample_count, entries.to_vec());
    std::fs::write(path, encode(&msg))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<WireMessage> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn random_update(seed: u64) -> AdapterUpdate {
        let mut rng = RngState::new(seed);
        let entries = (0..4)
            .map(|i| StateEntry {
                name: format!("layer.{}.v.{}", i / 2, if i % 2 == 0 { "A" } else { "B" }),
                matrix: Matrix::normal(3, 2, 0.0, 1.0, &mut rng),
            })
            .collect();
        AdapterUpdate {
            client_id: 7,
            round: 3,
            sample_count: 1234,
            entries,
        }
    }

    #[test]
    fn round_trip_identity() {
        let update = random_update(1);
        let bytes = encode_update(&update);
        let back = decode_update(&bytes).unwrap();
        assert_eq!(update, back);
    }

    #[test]
    fn bit_flip_is_a_crc_error() {
        let update = random_update(2);
        let mut bytes = encode_update(&update);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        match err {
            Error::Protocol { field, .. } => assert_eq!(field, "crc"),
            other => panic!("expected protocol error, got {other}"),
        }
    }

    #[test]
    fn empty_entry_list_round_trips() {
        let msg = WireMessage::done(9);
        let back = decode(&encode(&msg)).unwrap();
        assert_eq!(back.entries.len(), 0);
        assert_eq!(back, msg);
    }

    #[test]
    fn bad_magic_names_the_field() {
        let mut bytes = encode(&WireMessage::done(1));
        bytes[0] = b'X';
        // fix the crc so the magic check is what trips
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match decode(&bytes).unwrap_err() {
            Error::Protocol { field, .. } => assert_eq!(field, "magic"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_version_names_the_field() {
        let mut bytes = encode(&WireMessage::done(1));
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match decode(&bytes).unwrap_err() {
            Error::Protocol { field, .. } => assert_eq!(field, "version"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("round_1.{CHECKPOINT_EXT}"));
        let update = random_update(3);
        write_checkpoint(&path, 1, 99, &update.entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.msg_type, MsgType::Aggregate);
        assert_eq!(back.entries, update.entries);
    }

    #[test]
    fn exports_serialize_byte_identically() {
        let a = encode_update(&random_update(5));
        let b = encode_update(&random_update(5));
        assert_eq!(a, b);
    }
}
