//! Little-endian binary files for codebooks (`VCQC`) and token corpora
//! (`VCQT`), plus an atomic file writer.
//!
//! Codebook layout: magic `VCQC`, version `u16`, `d: u32`, `k_max: u32`,
//! then `k_max · d` `f32` values row-major.
//!
//! Corpus layout: magic `VCQT`, version `u16`, `L: u16`, `k_max: u32`,
//! `N: u64`, flags `u8` (bit 0: labels present), then `N · L` `u32` tokens
//! row-major, then `N` `u32` labels when flagged.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::{Codebook, Result, TokenCorpus, VcqError};

pub const CODEBOOK_MAGIC: [u8; 4] = *b"VCQC";
pub const CORPUS_MAGIC: [u8; 4] = *b"VCQT";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_LABELS: u8 = 1;

fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != expected {
        return Err(VcqError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&expected)
        )));
    }
    let version = r.read_u16::<LE>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(VcqError::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn truncated(e: io::Error) -> VcqError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        VcqError::Format("file is truncated".into())
    } else {
        VcqError::Io(e)
    }
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(VcqError::Format("trailing bytes after payload".into())),
    }
}

pub fn write_codebook<W: Write>(mut w: W, codebook: &Codebook) -> Result<()> {
    w.write_all(&CODEBOOK_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(codebook.dim() as u32)?;
    w.write_u32::<LE>(codebook.k_max() as u32)?;
    for &x in codebook.entries().iter() {
        w.write_f32::<LE>(x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codebook<R: Read>(mut r: R) -> Result<Codebook> {
    read_magic(&mut r, CODEBOOK_MAGIC)?;
    let dim = r.read_u32::<LE>().map_err(truncated)? as usize;
    let k_max = r.read_u32::<LE>().map_err(truncated)? as usize;
    let len = dim
        .checked_mul(k_max)
        .ok_or_else(|| VcqError::Format("codebook dimensions overflow".into()))?;
    let mut data = vec![0f32; len];
    r.read_f32_into::<LE>(&mut data).map_err(truncated)?;
    expect_eof(&mut r)?;
    let entries = Array2::from_shape_vec((k_max, dim), data)
        .map_err(|e| VcqError::Format(e.to_string()))?;
    Codebook::new(entries).map_err(|e| VcqError::Format(e.to_string()))
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &TokenCorpus) -> Result<()> {
    w.write_all(&CORPUS_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u16::<LE>(corpus.length() as u16)?;
    w.write_u32::<LE>(corpus.k_max())?;
    w.write_u64::<LE>(corpus.n_samples() as u64)?;
    w.write_u8(if corpus.labels().is_some() { FLAG_LABELS } else { 0 })?;
    for &x in corpus.tokens() {
        w.write_u32::<LE>(x)?;
    }
    if let Some(labels) = corpus.labels() {
        for &c in labels {
            w.write_u32::<LE>(c)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<TokenCorpus> {
    read_magic(&mut r, CORPUS_MAGIC)?;
    let length = r.read_u16::<LE>().map_err(truncated)? as usize;
    let k_max = r.read_u32::<LE>().map_err(truncated)?;
    let n = r.read_u64::<LE>().map_err(truncated)?;
    let flags = r.read_u8().map_err(truncated)?;
    if flags & !FLAG_LABELS != 0 {
        return Err(VcqError::Format(format!("unknown flag bits {flags:#04x}")));
    }
    let count = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(length))
        .ok_or_else(|| VcqError::Format("corpus dimensions overflow".into()))?;
    let mut tokens = vec![0u32; count];
    r.read_u32_into::<LE>(&mut tokens).map_err(truncated)?;
    let labels = if flags & FLAG_LABELS != 0 {
        let mut labels = vec![0u32; n as usize];
        r.read_u32_into::<LE>(&mut labels).map_err(truncated)?;
        Some(labels)
    } else {
        None
    };
    expect_eof(&mut r)?;
    TokenCorpus::new(length, k_max, tokens, labels).map_err(|e| VcqError::Format(e.to_string()))
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut io::BufWriter<&mut fs::File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path).map_err(|e| VcqError::Io(e.error))?;
    Ok(())
}

pub fn save_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    write_atomic(path, |w| write_codebook(w, codebook))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    read_codebook(io::BufReader::new(fs::File::open(path)?))
}

pub fn save_corpus(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    write_atomic(path, |w| write_corpus(w, corpus))
}

pub fn load_corpus(path: &Path) -> Result<TokenCorpus> {
    read_corpus(io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn codebook_layout_is_exact() {
        let cb = Codebook::new(array![[1.0f32, -2.0], [0.5, 3.25]]).unwrap();
        let mut buf = Vec::new();
        write_codebook(&mut buf, &cb).unwrap();
        let mut expected = b"VCQC".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        for x in [1.0f32, -2.0, 0.5, 3.25] {
            expected.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(buf, expected);
        assert_eq!(read_codebook(&buf[..]).unwrap(), cb);
    }

    #[test]
    fn corpus_layout_is_exact() {
        let c = TokenCorpus::from_rows(&[[1u32, 2], [3, 0]], 4, Some(vec![7, 9])).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        let mut expected = b"VCQT".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.push(1);
        for x in [1u32, 2, 3, 0, 7, 9] {
            expected.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(buf, expected);
        assert_eq!(read_corpus(&buf[..]).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = TokenCorpus::from_rows(&[[1u32, 2]], 4, None).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        assert!(matches!(read_codebook(&buf[..]), Err(VcqError::Format(_))));
        assert!(matches!(read_corpus(&buf[..buf.len() - 1]), Err(VcqError::Format(_))));
        buf.push(0);
        assert!(matches!(read_corpus(&buf[..]), Err(VcqError::Format(_))));
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VCQT");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.push(0);
        buf.extend_from_slice(&5u32.to_le_bytes());
        assert!(matches!(read_corpus(&buf[..]), Err(VcqError::Format(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vcqt");
        let c = TokenCorpus::from_rows(&[[0u32, 1, 1]], 2, None).unwrap();
        save_corpus(&path, &c).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn corpus_roundtrip(
            length in 1usize..6,
            rows in 1usize..6,
            k_max in 1u32..50,
            labelled in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let tokens: Vec<u32> = (0..rows * length)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407))) >> 33) as u32 % k_max)
                .collect();
            let labels = labelled.then(|| (0..rows as u32).collect());
            let c = TokenCorpus::new(length, k_max, tokens, labels).unwrap();
            let mut buf = Vec::new();
            write_corpus(&mut buf, &c).unwrap();
            prop_assert_eq!(read_corpus(&buf[..]).unwrap(), c);
        }

        #[test]
        fn codebook_roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 1..40), dim in 1usize..5) {
            let k = values.len() / dim;
            prop_assume!(k >= 1);
            let entries = Array2::from_shape_vec((k, dim), values[..k * dim].to_vec()).unwrap();
            let cb = Codebook::new(entries).unwrap();
            let mut buf = Vec::new();
            write_codebook(&mut buf, &cb).unwrap();
            prop_assert_eq!(read_codebook(&buf[..]).unwrap(), cb);
        }
    }
}
