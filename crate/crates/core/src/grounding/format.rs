//! On-disk library format.
//!
//! ```text
//! magic     4 bytes  "TIDL"
//! version   u32 LE
//! count     u32 LE
//! record*   item_id: str, popularity: u64 LE, terms: u32 LE count then str each
//! str       u32 LE byte length, UTF-8 bytes
//! ```
//!
//! Records are in item id order. The indexes are rebuilt on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{CandidateLibrary, GroundingError};
use crate::ctg::{Term, TermIdSequence, TidMap};

pub const LIBRARY_MAGIC: &[u8; 4] = b"TIDL";
pub const LIBRARY_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn write_library(path: &Path, lib: &CandidateLibrary) -> Result<(), GroundingError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LIBRARY_MAGIC);
    buf.extend_from_slice(&LIBRARY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(lib.len() as u32).to_le_bytes());
    for (id, tid, pop) in lib.entries() {
        put_str(&mut buf, id);
        buf.extend_from_slice(&pop.to_le_bytes());
        buf.extend_from_slice(&(tid.len() as u32).to_le_bytes());
        for t in tid.terms() {
            put_str(&mut buf, t.as_str());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Human-readable dump, one item per line.
pub fn write_library_jsonl(path: &Path, lib: &CandidateLibrary) -> Result<(), GroundingError> {
    #[derive(Serialize)]
    struct Row<'a> {
        item_id: &'a str,
        terms: &'a TermIdSequence,
        popularity: u64,
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (item_id, terms, popularity) in lib.entries() {
        let row = Row {
            item_id,
            terms,
            popularity,
        };
        serde_json::to_writer(&mut out, &row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GroundingError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GroundingError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GroundingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GroundingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str, GroundingError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| GroundingError::Format(format!("invalid UTF-8: {e}")))
    }
}

pub fn read_library_bytes(bytes: &[u8]) -> Result<CandidateLibrary, GroundingError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != LIBRARY_MAGIC {
        return Err(GroundingError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != LIBRARY_VERSION {
        return Err(GroundingError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tids = TidMap::new();
    let mut pop = BTreeMap::new();
    for _ in 0..count {
        let id = r.str()?.to_string();
        let p = r.u64()?;
        let n = r.u32()?;
        let mut terms = Vec::new();
        for _ in 0..n {
            let t = r.str()?;
            terms.push(
                Term::from_canonical(t)
                    .map_err(|e| GroundingError::Format(format!("item {id}: {e}")))?,
            );
        }
        let seq = TermIdSequence::new(terms)
            .map_err(|e| GroundingError::Format(format!("item {id}: {e}")))?;
        pop.insert(id.clone(), p);
        tids.insert(id, seq);
    }
    if r.pos != bytes.len() {
        return Err(GroundingError::Format("trailing bytes".into()));
    }
    Ok(CandidateLibrary::build(&tids, &pop)?.0)
}

pub fn read_library(path: &Path) -> Result<CandidateLibrary, GroundingError> {
    read_library_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let tids: TidMap = [("b", "Q, R"), ("a", "A, B, C")]
            .iter()
            .map(|(k, v)| (k.to_string(), TermIdSequence::from_canonical(v).unwrap()))
            .collect();
        let pop = [("a".to_string(), 4u64)].into_iter().collect();
        let (lib, _) = CandidateLibrary::build(&tids, &pop).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.bin");
        write_library(&path, &lib).unwrap();
        let back = read_library(&path).unwrap();
        let a: Vec<_> = lib.entries().map(|(i, t, p)| (i.to_string(), t.clone(), p)).collect();
        let b: Vec<_> = back.entries().map(|(i, t, p)| (i.to_string(), t.clone(), p)).collect();
        assert_eq!(a, b);

        let bytes = fs::read(&path).unwrap();
        assert!(read_library_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_library_bytes(&bad).is_err());

        let jsonl = dir.path().join("library.jsonl");
        write_library_jsonl(&jsonl, &lib).unwrap();
        let text = fs::read_to_string(jsonl).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"item_id":"a","terms":["A","B","C"],"popularity":4}"#);
    }
}
