//! Binary checkpoint format for parameter stores.
//!
//! Layout: magic `TACKCKPT`, format version (u32 LE), then one record per
//! tensor until EOF — name length (u32 LE), UTF-8 name, rank (u32 LE), each
//! dimension (u32 LE), then the payload as f32 little-endian in row-major
//! order. Tensors are written in store insertion order, so saving the same
//! store twice produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{AutodiffError, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"TACKCKPT";
const VERSION: u32 = 1;

pub fn save_params<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, AutodiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| AutodiffError::CorruptCheckpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>, AutodiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| AutodiffError::CorruptCheckpoint("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(AutodiffError::CorruptCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }

    let mut store = ParamStore::new();
    loop {
        // A record starts with the name length; clean EOF here ends the file.
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(AutodiffError::CorruptCheckpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| AutodiffError::CorruptCheckpoint("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| AutodiffError::CorruptCheckpoint("name is not UTF-8".into()))?;

        let rank = read_u32(&mut r)? as usize;
        if rank > 4 {
            return Err(AutodiffError::CorruptCheckpoint(format!(
                "tensor '{name}' has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 28) {
            return Err(AutodiffError::CorruptCheckpoint(format!(
                "tensor '{name}' claims {numel} elements"
            )));
        }
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| AutodiffError::CorruptCheckpoint(format!("truncated payload for '{name}'")))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = Rng::new(77);
        let mut s = ParamStore::new();
        let mk = |rng: &mut Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
        };
        s.insert("enc.stem.w", mk(&mut rng, &[4, 2, 3, 3])).unwrap();
        s.insert("enc.stem.b", mk(&mut rng, &[4])).unwrap();
        s.insert("head.w", mk(&mut rng, &[3, 8])).unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let s = sample_store();
        save_params(&s, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(
            s.names().collect::<Vec<_>>(),
            loaded.names().collect::<Vec<_>>()
        );
        for (name, t) in s.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.data(), t.data());
        }
    }

    #[test]
    fn header_bytes_are_exactly_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_params(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TACKCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        // First record: name "enc.stem.w" (10 bytes), rank 4, dims 4,2,3,3.
        assert_eq!(&bytes[12..16], &10u32.to_le_bytes());
        assert_eq!(&bytes[16..26], b"enc.stem.w");
        assert_eq!(&bytes[26..30], &4u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &4u32.to_le_bytes());
        assert_eq!(&bytes[34..38], &2u32.to_le_bytes());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let s = sample_store();
        save_params(&s, &p1).unwrap();
        save_params(&s, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_params(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad.bin");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(
            load_params(&bad_magic),
            Err(AutodiffError::CorruptCheckpoint(_))
        ));

        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_params(&truncated),
            Err(AutodiffError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn f64_store_saves_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::new(&[2], vec![0.1, std::f64::consts::PI]).unwrap())
            .unwrap();
        save_params(&s, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.get("x").unwrap().data(), &[0.1f32, std::f32::consts::PI]);
    }
}
