//! Label vectors over group members, encrypted label matching, and the
//! encrypted photo store.
//!
//! Each photo carries a binary label vector of length `t` (the number of
//! enrolled members) marking who appears in it. A retrieval query is another
//! binary vector over the same members together with its popcount `λ`. The
//! server computes `ret = L·Q` via [`secure_inner`] over label/query
//! ciphertexts and returns the photos where `ret = λ` — exactly the photos
//! whose member set contains every queried member. `λ` travels in plaintext,
//! so the server learns query cardinality (and `ret` values); it learns
//! nothing else about labels or queries.
//!
//! Photo bytes themselves are protected with an authenticated cipher under a
//! user-held content key; the store only ever holds ciphertext.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305};

use crate::aspe::{secure_inner, EncDataVector, EncQueryVector, MatchingKey};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: [u8; 4] = *b"VIDX";
pub const INDEX_FORMAT_VERSION: u16 = 1;

/// Bytes in a photo content key.
pub const CONTENT_KEY_LEN: usize = 32;

/// Bytes in a photo nonce; must be unique per photo under one content key.
pub const NONCE_LEN: usize = 12;

/// Matching tolerance on the integer-valued `ret`. Worst-case float error
/// under condition-bounded keys at small `t` is orders below this, and the
/// gap to the nearest wrong integer is 1.
pub const MATCH_TOLERANCE: f64 = 1e-3;

/// The enrolled members, in a fixed order: index `j` is coordinate `j` of
/// every label vector and query.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRegistry {
    members: Vec<String>,
}

impl IdentityRegistry {
    /// Validates that identifiers are unique and non-empty. The order given
    /// here is frozen; it defines the label-vector coordinates.
    pub fn new(members: Vec<String>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Protocol("registry needs at least one member".into()));
        }
        let mut seen = HashSet::new();
        for m in &members {
            if m.is_empty() {
                return Err(Error::Protocol("member identifier must be non-empty".into()));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::Protocol(format!("duplicate member {m:?}")));
            }
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn index_of(&self, member: &str) -> Option<usize> {
        self.members.iter().position(|m| m == member)
    }
}

/// Binary presence vector: bit `j` set iff member `j` appears in the photo.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }
}

/// A retrieval query: target bits plus their count `λ`. A photo matches when
/// its label agrees with the query on all `λ` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    bits: Vec<bool>,
    lambda: usize,
}

impl Query {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }
}

/// Marks the given members present over the registry's coordinates.
pub fn build_label_vector<S: AsRef<str>>(
    reg: &IdentityRegistry,
    present: &[S],
) -> Result<LabelVector> {
    let mut bits = vec![false; reg.len()];
    for m in present {
        let j = reg
            .index_of(m.as_ref())
            .ok_or_else(|| Error::UnknownMember(m.as_ref().to_string()))?;
        bits[j] = true;
    }
    Ok(LabelVector::new(bits))
}

/// Builds a query over the given target members. An empty target set would
/// match everything and is rejected.
pub fn build_query<S: AsRef<str>>(reg: &IdentityRegistry, targets: &[S]) -> Result<Query> {
    let label = build_label_vector(reg, targets)?;
    let lambda = label.bits().iter().filter(|&&b| b).count();
    if lambda == 0 {
        return Err(Error::EmptyQuery);
    }
    Ok(Query {
        bits: label.bits,
        lambda,
    })
}

/// Encrypts a label vector under the matching key (database side).
pub fn encrypt_label<R: Rng + ?Sized>(
    key: &MatchingKey,
    label: &LabelVector,
    rng: &mut R,
) -> Result<EncDataVector> {
    key.encrypt_data(&label.as_f64_vec(), rng)
}

/// Encrypts a query under the matching key (query side).
pub fn encrypt_query_label<R: Rng + ?Sized>(
    key: &MatchingKey,
    query: &Query,
    rng: &mut R,
) -> Result<EncQueryVector> {
    key.encrypt_query(&query.as_f64_vec(), rng)
}

/// One stored photo: authenticated ciphertext of the photo bytes plus the
/// encrypted label vector. Nothing here is decryptable by the store.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoRecord {
    pub photo_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub enc_label: EncDataVector,
}

/// Append-only photo store enforcing nonce and photo-id uniqueness and a
/// consistent label dimension.
#[derive(Debug, Clone, Default)]
pub struct PhotoStore {
    records: Vec<PhotoRecord>,
    nonces: HashSet<[u8; NONCE_LEN]>,
    ids: HashSet<String>,
}

impl PhotoStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Label dimension of the stored records, once any exist.
    pub fn label_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.enc_label.dim())
    }

    pub fn insert(&mut self, record: PhotoRecord) -> Result<()> {
        if let Some(dim) = self.label_dim() {
            if record.enc_label.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: record.enc_label.dim(),
                });
            }
        }
        if self.nonces.contains(&record.nonce) {
            return Err(Error::NonceReuse);
        }
        if self.ids.contains(&record.photo_id) {
            return Err(Error::DuplicatePhotoId(record.photo_id));
        }
        self.nonces.insert(record.nonce);
        self.ids.insert(record.photo_id.clone());
        self.records.push(record);
        Ok(())
    }

    /// All-or-nothing batch insert: the whole batch is validated against the
    /// store and against itself before anything is appended.
    pub fn insert_all(&mut self, records: Vec<PhotoRecord>) -> Result<()> {
        let mut batch_nonces = HashSet::new();
        let mut batch_ids = HashSet::new();
        let mut dim = self.label_dim();
        for r in &records {
            match dim {
                Some(d) if r.enc_label.dim() != d => {
                    return Err(Error::Dimension {
                        expected: d,
                        got: r.enc_label.dim(),
                    })
                }
                Some(_) => {}
                None => dim = Some(r.enc_label.dim()),
            }
            if self.nonces.contains(&r.nonce) || !batch_nonces.insert(r.nonce) {
                return Err(Error::NonceReuse);
            }
            if self.ids.contains(&r.photo_id) || !batch_ids.insert(r.photo_id.clone()) {
                return Err(Error::DuplicatePhotoId(r.photo_id.clone()));
            }
        }
        for r in records {
            self.nonces.insert(r.nonce);
            self.ids.insert(r.photo_id.clone());
            self.records.push(r);
        }
        Ok(())
    }

    pub fn record(&self, photo_id: &str) -> Option<&PhotoRecord> {
        self.records.iter().find(|r| r.photo_id == photo_id)
    }

    pub fn records(&self) -> &[PhotoRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.label_dim().unwrap_or(0);
        let mut w = Writer::new();
        w.put_bytes(&INDEX_MAGIC);
        w.put_u16(INDEX_FORMAT_VERSION);
        w.put_u16(t as u16);
        w.put_u32(self.records.len() as u32);
        for r in &self.records {
            w.put_str(&r.photo_id);
            w.put_bytes(&r.nonce);
            w.put_blob(&r.ciphertext);
            w.put_f64_slice(r.enc_label.part1());
            w.put_f64_slice(r.enc_label.part2());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&INDEX_MAGIC, "photo index")?;
        r.expect_version(INDEX_FORMAT_VERSION)?;
        let t = r.u16()? as usize;
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let photo_id = r.str_blob()?;
            let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
            let ciphertext = r.blob()?;
            let part1 = r.f64_vec(t)?;
            let part2 = r.f64_vec(t)?;
            let at = r.pos() as u64;
            store
                .insert(PhotoRecord {
                    photo_id,
                    nonce,
                    ciphertext,
                    enc_label: EncDataVector::from_parts(part1, part2)?,
                })
                .map_err(|e| Error::Parse {
                    offset: at,
                    what: format!("invalid record: {e}"),
                })?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// The on-line matching pass: a photo is returned iff its `ret = L·Q` lies
/// within `tol` of `λ`. Store order is preserved.
pub fn match_photos(
    store: &PhotoStore,
    eq: &EncQueryVector,
    lambda: usize,
    tol: f64,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for record in &store.records {
        let ret = secure_inner(&record.enc_label, eq)?;
        if (ret - lambda as f64).abs() <= tol {
            out.push(record.photo_id.clone());
        }
    }
    Ok(out)
}

fn aead_key(key: &[u8; CONTENT_KEY_LEN]) -> LessSafeKey {
    LessSafeKey::new(UnboundKey::new(&CHACHA20_POLY1305, key).expect("key length is fixed"))
}

/// Authenticated encryption of photo bytes (ChaCha20-Poly1305); the tag is
/// appended to the ciphertext. The nonce must be unique per photo under a
/// given content key — the photo store enforces this.
pub fn encrypt_photo(
    key: &[u8; CONTENT_KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    plaintext: &[u8],
) -> Vec<u8> {
    let mut buf = plaintext.to_vec();
    aead_key(key)
        .seal_in_place_append_tag(Nonce::assume_unique_for_key(*nonce), Aad::empty(), &mut buf)
        .expect("sealing cannot fail for in-memory buffers");
    buf
}

/// Decrypts and authenticates; any tampering yields [`Error::Auth`].
pub fn decrypt_photo(
    key: &[u8; CONTENT_KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
) -> Result<Vec<u8>> {
    let mut buf = ciphertext.to_vec();
    let plaintext = aead_key(key)
        .open_in_place(Nonce::assume_unique_for_key(*nonce), Aad::empty(), &mut buf)
        .map_err(|_| Error::Auth)?;
    Ok(plaintext.to_vec())
}
