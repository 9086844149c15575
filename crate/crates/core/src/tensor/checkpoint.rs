//! Flat binary parameter checkpoints.
//!
//! Layout: the 5-byte header `IEDP1`, then records until end of file. Each
//! record is `u32` name length, UTF-8 name bytes, `u32` rank, `rank` × `u32`
//! extents, and the little-endian `f32` payload in row-major order. All
//! integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel_of, Float, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"IEDP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for r in records {
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Parses a checkpoint byte stream; `origin` only labels errors.
pub fn read_records<R: Read>(mut r: R, origin: &Path) -> Result<Vec<Record>> {
    let bad = |detail: String| Error::Checkpoint { path: origin.to_path_buf(), detail };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing IEDP1 header".into()));
    }
    let total = bytes.len();
    let mut rest = &bytes[MAGIC.len()..];
    let take = |rest: &mut &[u8], n: usize, what: &str| -> Result<Vec<u8>> {
        if n > rest.len() {
            return Err(bad(format!("truncated while reading {what} at byte {}", total - rest.len())));
        }
        let (head, tail) = rest.split_at(n);
        *rest = tail;
        Ok(head.to_vec())
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let mut records = Vec::new();
    while !rest.is_empty() {
        let name_len = u32_at(take(&mut rest, 4, "name length")?);
        let name = String::from_utf8(take(&mut rest, name_len, "name")?).map_err(|e| bad(format!("name: {e}")))?;
        let rank = u32_at(take(&mut rest, 4, "rank")?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(&mut rest, 4, "extent")?));
        }
        let n = numel_of(&shape);
        let payload = take(&mut rest, 4 * n, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

/// Writes every parameter of `store` (frozen or not) in registration order.
pub fn save_checkpoint<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let records: Vec<Record> = store
        .iter()
        .map(|(_, p)| Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().iter().map(|v| v.f64() as f32).collect(),
        })
        .collect();
    let mut buf = Vec::new();
    write_records(&mut buf, &records).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads values into an already-constructed store. Every record must name an
/// existing parameter with a matching shape; returns the number loaded.
pub fn load_checkpoint<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<usize> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_records(std::io::BufReader::new(file), path)?;
    let values = records
        .into_iter()
        .map(|r| {
            let t = Tensor::new(&r.shape, r.data.iter().map(|&v| T::of(v as f64)).collect())?;
            Ok((r.name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    store.load_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_layout_are_exact() {
        let rec = Record { name: "a.b".into(), shape: vec![2], data: vec![1.0, -2.5] };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let mut expect = b"IEDP1".to_vec();
        expect.extend(3u32.to_le_bytes());
        expect.extend(b"a.b");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_records(&buf[..], Path::new("mem")).unwrap(), vec![rec]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let rec = Record { name: "w".into(), shape: vec![3, 1], data: vec![0.0; 3] };
        let mut buf = Vec::new();
        write_records(&mut buf, &[rec]).unwrap();
        buf.truncate(buf.len() - 2);
        let err = read_records(&buf[..], Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // A stray partial record header after the last record.
        buf.clear();
        write_records(&mut buf, &[Record { name: "w".into(), shape: vec![1], data: vec![1.0] }]).unwrap();
        buf.extend_from_slice(&[1, 0]);
        assert!(read_records(&buf[..], Path::new("mem")).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_records(&b"IEDP0"[..], Path::new("mem")).is_err());
    }

    #[test]
    fn store_round_trip_and_scalar_records() {
        let mut store = ParamStore::<f32>::new();
        store.add("scalar", Tensor::scalar(3.5)).unwrap();
        store.add("m", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.iedp");
        save_checkpoint(&store, &path).unwrap();
        let mut fresh = ParamStore::<f32>::new();
        fresh.zeros("scalar", &[]).unwrap();
        fresh.zeros("m", &[2, 2]).unwrap();
        assert_eq!(load_checkpoint(&mut fresh, &path).unwrap(), 2);
        assert_eq!(fresh.value(fresh.id("m").unwrap()), store.value(store.id("m").unwrap()));
        assert_eq!(fresh.value(fresh.id("scalar").unwrap()).item(), 3.5);
    }
}
