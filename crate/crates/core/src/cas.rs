//! Content-addressed blob store for model updates.
//!
//! Blobs are keyed by their SHA-256 digest. The store keeps everything in
//! memory and can additionally mirror each blob to `<dir>/<hex digest>`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerLayout, ParameterVector};

pub const ADDRESS_SCHEME: &str = "sha256";

/// SHA-256 digest of a blob; text form `sha256:<64 lowercase hex>`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentAddress([u8; 32]);

impl ContentAddress {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn from_digest(digest: [u8; 32]) -> Self {
        Self(digest)
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{ADDRESS_SCHEME}:{}", self.hex())
    }
}

impl fmt::Debug for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for ContentAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let hex_part = s
            .strip_prefix("sha256:")
            .ok_or_else(|| Error::Argument(format!("address {s:?} lacks the sha256: prefix")))?;
        if hex_part.len() != 64 || hex_part.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(Error::Argument(format!("address {s:?} is not 64 lowercase hex digits")));
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(hex_part, &mut digest).map_err(|e| Error::Argument(format!("address {s:?}: {e}")))?;
        Ok(Self(digest))
    }
}

#[derive(Default)]
struct Inner {
    blobs: HashMap<ContentAddress, Arc<[u8]>>,
    total_bytes: u64,
}

/// Thread-safe deduplicating blob store.
#[derive(Default)]
pub struct ContentStore {
    inner: RwLock<Inner>,
    dir: Option<PathBuf>,
}

impl ContentStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Store that also writes each new blob to `dir/<hex digest>`.
    pub fn with_directory(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            inner: RwLock::default(),
            dir: Some(dir),
        })
    }

    pub fn directory(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn put(&self, bytes: &[u8]) -> Result<ContentAddress> {
        let address = ContentAddress::of(bytes);
        if self
            .inner
            .read()
            .expect("store lock poisoned")
            .blobs
            .contains_key(&address)
        {
            return Ok(address);
        }
        let mut inner = self.inner.write().expect("store lock poisoned");
        if inner.blobs.contains_key(&address) {
            return Ok(address);
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(address.hex());
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        inner.blobs.insert(address, Arc::from(bytes));
        inner.total_bytes += bytes.len() as u64;
        Ok(address)
    }

    /// Returns the stored bytes after re-checking their digest.
    pub fn get(&self, address: &ContentAddress) -> Result<Arc<[u8]>> {
        let blob = self
            .inner
            .read()
            .expect("store lock poisoned")
            .blobs
            .get(address)
            .cloned()
            .ok_or_else(|| Error::NotFound(address.to_string()))?;
        if ContentAddress::of(&blob) != *address {
            return Err(Error::Integrity(address.to_string()));
        }
        Ok(blob)
    }

    pub fn contains(&self, address: &ContentAddress) -> bool {
        self.inner
            .read()
            .expect("store lock poisoned")
            .blobs
            .contains_key(address)
    }

    /// Sum of the sizes of all distinct blobs.
    pub fn total_size(&self) -> u64 {
        self.inner.read().expect("store lock poisoned").total_bytes
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock poisoned").blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[doc(hidden)]
    pub fn corrupt_for_test(&self, address: &ContentAddress, bytes: &[u8]) {
        let mut inner = self.inner.write().expect("store lock poisoned");
        inner.blobs.insert(*address, Arc::from(bytes));
    }
}

/// Magic prefix of a serialized model update.
pub const BLOB_MAGIC: &[u8; 4] = b"FCUP";
pub const BLOB_VERSION: u16 = 1;
/// Client id written into blobs holding the aggregated global model.
pub const GLOBAL_MODEL_CLIENT: u32 = u32::MAX;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8;

/// Decoded model-update blob.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateBlob {
    pub round: u32,
    pub client_id: u32,
    pub values: Vec<f64>,
}

/// Serializes a parameter vector as
/// `"FCUP" | version u16 | round u32 | client u32 | dim u64 | dim x f64`,
/// all little-endian.
pub fn encode_update(round: u32, client_id: u32, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_update(bytes: &[u8]) -> Result<UpdateBlob> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Blob("missing FCUP header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOB_VERSION {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let client_id = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
    let dim = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != dim.saturating_mul(8) {
        return Err(Error::Blob(format!(
            "dimension {dim} does not match {} payload bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(UpdateBlob {
        round,
        client_id,
        values,
    })
}

/// Size in bytes of an encoded update of dimension `dim`.
pub fn encoded_len(dim: usize) -> usize {
    HEADER_LEN + 8 * dim
}

impl UpdateBlob {
    pub fn into_parameters(self, layout: Arc<LayerLayout>) -> Result<ParameterVector> {
        ParameterVector::new(self.values, layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_address() {
        let store = ContentStore::in_memory();
        let a = store.put(b"").unwrap();
        assert_eq!(
            a.to_string(),
            "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(store.total_size(), 0);
    }

    #[test]
    fn dedup_and_sizes() {
        let store = ContentStore::in_memory();
        let blob = vec![7u8; 1024];
        let a = store.put(&blob).unwrap();
        let b = store.put(&blob).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.total_size(), 1024);
        let c = store.put(b"other").unwrap();
        assert_ne!(a, c);
        assert_eq!(store.total_size(), 1029);
    }

    #[test]
    fn unknown_address_not_found() {
        let store = ContentStore::in_memory();
        let missing = ContentAddress::of(b"never stored");
        assert!(matches!(store.get(&missing), Err(Error::NotFound(_))));
    }

    #[test]
    fn corrupted_blob_fails_integrity() {
        let store = ContentStore::in_memory();
        let a = store.put(b"payload").unwrap();
        store.corrupt_for_test(&a, b"payl0ad");
        assert!(matches!(store.get(&a), Err(Error::Integrity(_))));
    }

    #[test]
    fn address_text_round_trip() {
        let a = ContentAddress::of(b"x");
        assert_eq!(a.to_string().parse::<ContentAddress>().unwrap(), a);
        assert!("sha256:ABC".parse::<ContentAddress>().is_err());
        assert!(a.to_string().to_uppercase().parse::<ContentAddress>().is_err());
    }

    #[test]
    fn update_blob_round_trip() {
        let values: Vec<f64> = (0..10_000).map(|i| (i as f64).sin() * 1e-3).collect();
        let bytes = encode_update(3, 9, &values);
        assert_eq!(bytes.len(), encoded_len(values.len()));
        assert_eq!(&bytes[..4], b"FCUP");
        let store = ContentStore::in_memory();
        let addr = store.put(&bytes).unwrap();
        let back = decode_update(&store.get(&addr).unwrap()).unwrap();
        assert_eq!(back.round, 3);
        assert_eq!(back.client_id, 9);
        assert_eq!(
            back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn directory_mode_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::with_directory(dir.path().join("blobs")).unwrap();
        let a = store.put(b"hello").unwrap();
        let on_disk = fs::read(dir.path().join("blobs").join(a.hex())).unwrap();
        assert_eq!(on_disk, b"hello");
    }

    #[test]
    fn concurrent_puts_converge() {
        let store = Arc::new(ContentStore::in_memory());
        std::thread::scope(|s| {
            for _ in 0..8 {
                let store = store.clone();
                s.spawn(move || {
                    for i in 0..50u8 {
                        store.put(&[i; 64]).unwrap();
                    }
                });
            }
        });
        assert_eq!(store.len(), 50);
        assert_eq!(store.total_size(), 50 * 64);
    }
}
