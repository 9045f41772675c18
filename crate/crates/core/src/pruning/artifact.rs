//! Binary mask artifact.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      4 bytes  "SLMK"
//! version    u32      1
//! tensors    u32
//! per tensor:
//!   id_len   u32, id bytes (UTF-8)
//!   rank     u32, dims u64 x rank
//!   bits     ceil(numel / 8) bytes, element i in byte i/8 at bit i%8
//! ```

use std::fs;
use std::path::Path;

use super::{Mask, PruneGroup};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLMK";
pub const VERSION: u32 = 1;

pub fn encode_mask_artifact(group: &PruneGroup) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + group.len() / 8 + 64 * group.tensor_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(group.tensor_count() as u32).to_le_bytes());
    for (id, mask) in group.entries() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        let (rows, cols) = mask.shape();
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        let mut packed = vec![0u8; mask.len().div_ceil(8)];
        for (i, &b) in mask.bits().iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_mask_artifact(bytes: &[u8]) -> std::result::Result<PruneGroup, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic, not a mask artifact".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported mask artifact version {version}"));
    }
    let count = r.u32()?;
    let mut group = PruneGroup::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| format!("tensor id is not UTF-8: {e}"))?
            .to_owned();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n as usize),
            [a, b] => (*a as usize, *b as usize),
            _ => return Err(format!("tensor `{id}` has unsupported rank {rank}")),
        };
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| format!("tensor `{id}` shape overflows"))?;
        let packed = r.take(numel.div_ceil(8))?;
        let bits = (0..numel).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
        let mask = Mask::from_bits(rows, cols, bits).map_err(|e| e.to_string())?;
        group.push(id, mask).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(group)
}

pub fn write_mask_artifact(path: impl AsRef<Path>, group: &PruneGroup) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_artifact(group)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_artifact(path: impl AsRef<Path>) -> Result<PruneGroup> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_artifact(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_pinned() {
        let mut g = PruneGroup::new();
        g.push("ab", Mask::from_bits(1, 3, vec![true, false, true]).unwrap())
            .unwrap();
        let bytes = encode_mask_artifact(&g);
        let mut expect = b"SLMK".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 2, 0, 0, 0]);
        expect.extend(1u64.to_le_bytes());
        expect.extend(3u64.to_le_bytes());
        expect.push(0b101);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_damage() {
        let mut g = PruneGroup::new();
        g.push("w", Mask::dense(4, 4)).unwrap();
        let bytes = encode_mask_artifact(&g);
        assert!(decode_mask_artifact(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_mask_artifact(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_mask_artifact(&long).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_mask_artifact("/nonexistent/mask.bin").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/mask.bin"));
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec((1usize..9, 1usize..9), 0..5), seed in any::<u64>()) {
            let mut rng = crate::numeric::RngState::new(seed);
            let mut g = PruneGroup::new();
            for (i, (r, c)) in shapes.into_iter().enumerate() {
                let bits = (0..r * c).map(|_| rng.uniform() < 0.3).collect();
                g.push(format!("t{i}"), Mask::from_bits(r, c, bits).unwrap()).unwrap();
            }
            let back = decode_mask_artifact(&encode_mask_artifact(&g)).unwrap();
            prop_assert_eq!(back.flat_bits(), g.flat_bits());
            prop_assert!(back.same_layout(&g));
        }
    }
}
