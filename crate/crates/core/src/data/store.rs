//! Ordered key -> vector feature store with a binary file format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::DataError;
use crate::io_util;

const MAGIC: &[u8; 4] = b"MMFS";
const VERSION: u32 = 1;

/// Fixed-dimension feature vectors with unique keys, insertion-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    keys: Vec<String>,
    values: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn insert(&mut self, key: String, values: Vec<f32>) -> Result<(), DataError> {
        if values.len() != self.dim {
            return Err(DataError::Dimension(format!(
                "feature store expects dim {}, got {} for '{key}'",
                self.dim,
                values.len()
            )));
        }
        if self.index.contains_key(&key) {
            return Err(DataError::DuplicateKey(key));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.values.push(values);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.values[i].as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC).map_err(io_err)?;
        io_util::write_u32(&mut w, VERSION).map_err(io_err)?;
        io_util::write_u32(&mut w, self.dim as u32).map_err(io_err)?;
        io_util::write_u64(&mut w, self.len() as u64).map_err(io_err)?;
        for (key, values) in self.iter() {
            let bytes = key.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(DataError::Store(format!("key too long: '{key}'")));
            }
            io_util::write_u16(&mut w, bytes.len() as u16).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
            io_util::write_f32_slice(&mut w, values).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<FeatureStore, DataError> {
        let io_err = |source: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let truncated = || DataError::Store(format!("{}: truncated file", path.display()));
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let magic = io_util::read_exact_array::<4>(&mut r).map_err(|_| truncated())?;
        if &magic != MAGIC {
            return Err(DataError::Store(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = io_util::read_u32(&mut r).map_err(|_| truncated())?;
        if version != VERSION {
            return Err(DataError::Store(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let dim = io_util::read_u32(&mut r).map_err(|_| truncated())? as usize;
        let count = io_util::read_u64(&mut r).map_err(|_| truncated())? as usize;
        let mut store = FeatureStore::new(dim);
        for _ in 0..count {
            let key_len = io_util::read_u16(&mut r).map_err(|_| truncated())? as usize;
            let mut key_bytes = vec![0u8; key_len];
            std::io::Read::read_exact(&mut r, &mut key_bytes).map_err(|_| truncated())?;
            let key = String::from_utf8(key_bytes)
                .map_err(|_| DataError::Store("non-UTF-8 key".into()))?;
            let values = io_util::read_f32_vec(&mut r, dim).map_err(|_| truncated())?;
            store.insert(key, values)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = FeatureStore::new(3);
        store.insert("a".into(), vec![1.0, -2.5, 3.25]).unwrap();
        store.insert("b/with/path".into(), vec![0.1, 0.2, f32::MIN_POSITIVE]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.mmfs");
        store.write(&path).unwrap();
        let back = FeatureStore::read(&path).unwrap();
        assert_eq!(back, store);
        let keys: Vec<&str> = back.keys().collect();
        assert_eq!(keys, vec!["a", "b/with/path"]);
        assert_eq!(back.get("a").unwrap(), &[1.0, -2.5, 3.25]);
    }

    #[test]
    fn empty_store_round_trips() {
        let store = FeatureStore::new(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mmfs");
        store.write(&path).unwrap();
        let back = FeatureStore::read(&path).unwrap();
        assert_eq!(back.dim(), 7);
        assert!(back.is_empty());
    }

    #[test]
    fn dimension_and_duplicate_rejection() {
        let mut store = FeatureStore::new(2);
        assert!(matches!(
            store.insert("x".into(), vec![1.0]),
            Err(DataError::Dimension(_))
        ));
        store.insert("x".into(), vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            store.insert("x".into(), vec![3.0, 4.0]),
            Err(DataError::DuplicateKey(_))
        ));
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let mut store = FeatureStore::new(2);
        store.insert("k".into(), vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.mmfs");
        store.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Magic.
        let mut bad = bytes.clone();
        bad[3] = b'?';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            FeatureStore::read(&path),
            Err(DataError::Store(_))
        ));
        // Truncation.
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            FeatureStore::read(&path),
            Err(DataError::Store(_))
        ));
        // Version.
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            FeatureStore::read(&path),
            Err(DataError::Store(_))
        ));
    }
}
