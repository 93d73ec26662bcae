//! Split-vector matrix encryption preserving inner products between
//! asymmetrically encrypted vectors.
//!
//! A key holds two invertible matrices `M1`, `M2` and a secret bit vector
//! `S`. Database-side vectors `y` (classifier hyperplanes, label vectors) are
//! split component-wise: where `S_j = 1` the component is duplicated into
//! both halves, where `S_j = 0` it is blinded into `y_j/2 − r` and
//! `y_j/2 + r` with a fresh random `r`. The halves are then transformed with
//! `M1ᵀ` and `M2ᵀ`. Query-side vectors `w` (detection windows, retrieval
//! queries) use the dual rule — duplicated where `S_j = 0`, blinded where
//! `S_j = 1` — and are transformed with `M1⁻¹` and `M2⁻¹`.
//!
//! The matrices cancel pairwise, and for every component either the data
//! side or the query side is an exact duplicate, so
//!
//! ```text
//! (M1ᵀy′)·(M1⁻¹w′) + (M2ᵀy″)·(M2⁻¹w″) = y′·w′ + y″·w″ = y·w
//! ```
//!
//! holds exactly in real arithmetic. Neither side is decryptable on its own;
//! no decryption operation exists anywhere in this crate. The only value the
//! ciphertext pair reveals is the inner product, recovered by
//! [`secure_inner`].
//!
//! Arithmetic is double precision throughout; accuracy contracts are
//! tolerance-based. Matrix generation bounds the condition number (an
//! orthogonal factor times a diagonal with entries in `[0.5, 2]`, so the
//! condition number never exceeds 4) to keep floating-point cancellation
//! benign, and inverses are computed once at key generation and cached.

use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use rand::Rng;

use crate::codec::{pack_bits, unpack_bits, Reader, Writer};
use crate::error::{Error, Result};

pub const KEY_MAGIC: [u8; 4] = *b"ASPE";
pub const KEY_FORMAT_VERSION: u16 = 1;

/// Per-entry tolerance for `M · M⁻¹ = I` when validating a key.
pub const INVERSE_TOLERANCE: f64 = 1e-9;

/// Tighter bound enforced at generation time so validated keys have headroom.
const GENERATION_TOLERANCE: f64 = 1e-10;

const CIPHERTEXT_KIND_DATA: u8 = 0x01;
const CIPHERTEXT_KIND_QUERY: u8 = 0x02;

mod sealed {
    pub trait Sealed {}
}

/// Type-level tag naming what a key is for, preventing the detector product
/// key and the user's matching key from being swapped at compile time.
pub trait KeyPurpose: sealed::Sealed {
    const NAME: &'static str;
}

/// Purpose tag for the detector vendor's product key.
pub enum Detection {}

/// Purpose tag for the user's label-matching private key.
pub enum Matching {}

impl sealed::Sealed for Detection {}
impl KeyPurpose for Detection {
    const NAME: &'static str = "detection";
}

impl sealed::Sealed for Matching {}
impl KeyPurpose for Matching {
    const NAME: &'static str = "matching";
}

/// The vendor's product key: encrypts classifier hyperplanes (data side) and
/// detection windows (query side).
pub type DetectorKey = AspeKey<Detection>;

/// The user's private matching key: encrypts label vectors (data side) and
/// retrieval queries (query side).
pub type MatchingKey = AspeKey<Matching>;

/// Dense square matrix, row-major. Only the handful of operations the scheme
/// needs.
#[derive(Clone, PartialEq)]
pub(crate) struct Mat {
    dim: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    #[cfg(test)]
    pub(crate) fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            *m.at_mut(i, i) = 1.0;
        }
        m
    }

    fn from_rows(dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * dim);
        Self { dim, data }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.dim + c]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// `M · v`
    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ · v`, computed without materializing the transpose.
    fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, &vi) in self.rows().zip(v) {
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * vi;
            }
        }
        out
    }

    /// max |(self · rhs − I)_{ij}|
    fn max_identity_deviation(&self, rhs: &Mat) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let mut acc = 0.0;
                for k in 0..self.dim {
                    acc += self.at(i, k) * rhs.at(k, j);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

/// Database-side ciphertext: the pair `{M1ᵀ y′, M2ᵀ y″}`.
#[derive(Clone, PartialEq)]
pub struct EncDataVector {
    part1: Vec<f64>,
    part2: Vec<f64>,
}

/// Query-side ciphertext: the pair `{M1⁻¹ w′, M2⁻¹ w″}`.
#[derive(Clone, PartialEq)]
pub struct EncQueryVector {
    part1: Vec<f64>,
    part2: Vec<f64>,
}

macro_rules! ciphertext_impl {
    ($ty:ident, $kind:expr, $name:literal) => {
        impl $ty {
            pub(crate) fn from_parts(part1: Vec<f64>, part2: Vec<f64>) -> Result<Self> {
                if part1.len() != part2.len() {
                    return Err(Error::Dimension {
                        expected: part1.len(),
                        got: part2.len(),
                    });
                }
                Ok(Self { part1, part2 })
            }

            pub fn dim(&self) -> usize {
                self.part1.len()
            }

            pub fn part1(&self) -> &[f64] {
                &self.part1
            }

            pub fn part2(&self) -> &[f64] {
                &self.part2
            }

            /// Standalone encoding: 1-byte kind tag, dim as u32, then both
            /// halves as little-endian f64 arrays. The tag stops a data-side
            /// ciphertext from being fed where a query-side one is expected.
            pub fn to_bytes(&self) -> Vec<u8> {
                let mut w = Writer::with_capacity(5 + 16 * self.dim());
                w.put_u8($kind);
                w.put_u32(self.dim() as u32);
                w.put_f64_slice(&self.part1);
                w.put_f64_slice(&self.part2);
                w.into_bytes()
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
                let mut r = Reader::new(bytes);
                let v = Self::read_from(&mut r)?;
                r.finish()?;
                Ok(v)
            }

            pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
                let kind = r.u8()?;
                if kind != $kind {
                    return Err(r.error(format!(
                        "ciphertext kind {kind:#04x} is not a {} vector",
                        $name
                    )));
                }
                let dim = r.u32()? as usize;
                let part1 = r.f64_vec(dim)?;
                let part2 = r.f64_vec(dim)?;
                Ok(Self { part1, part2 })
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($ty), "(dim={})"), self.dim())
            }
        }
    };
}

ciphertext_impl!(EncDataVector, CIPHERTEXT_KIND_DATA, "data");
ciphertext_impl!(EncQueryVector, CIPHERTEXT_KIND_QUERY, "query");

/// The split secret: two invertible matrices with cached inverses plus the
/// split bit vector. One instance serves as the detector product key, an
/// independent instance (over the member-count dimension) as the user's
/// matching key; the [`KeyPurpose`] parameter keeps them apart.
///
/// Immutable after creation and safe to share across threads. Encryption
/// takes the randomness source as an explicit parameter, so concurrent
/// encryption needs one stream per task.
pub struct AspeKey<P: KeyPurpose> {
    dim: usize,
    mat1: Mat,
    mat2: Mat,
    mat1_inv: Mat,
    mat2_inv: Mat,
    split: Vec<bool>,
    _purpose: PhantomData<P>,
}

impl<P: KeyPurpose> fmt::Debug for AspeKey<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AspeKey<{}>(dim={})", P::NAME, self.dim)
    }
}

impl<P: KeyPurpose> AspeKey<P> {
    /// Generates a fresh key of the given dimension. Split bits are
    /// independent fair coin flips; the matrices are drawn as a random
    /// orthogonal factor times a random diagonal in `[0.5, 2]`, which
    /// guarantees invertibility and a condition number of at most 4.
    /// Deterministic for a fixed RNG state.
    ///
    /// Panics if `dim == 0`.
    pub fn generate<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        assert!(dim >= 1, "key dimension must be at least 1");
        let (mat1, mat1_inv) = random_key_matrix(dim, rng);
        let (mat2, mat2_inv) = random_key_matrix(dim, rng);
        let split = (0..dim).map(|_| rng.random::<bool>()).collect();
        Self {
            dim,
            mat1,
            mat2,
            mat1_inv,
            mat2_inv,
            split,
            _purpose: PhantomData,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> &[bool] {
        &self.split
    }

    /// Largest per-entry deviation of `M·M⁻¹` from the identity across both
    /// matrix pairs.
    pub fn max_inverse_deviation(&self) -> f64 {
        self.mat1
            .max_identity_deviation(&self.mat1_inv)
            .max(self.mat2.max_identity_deviation(&self.mat2_inv))
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Encrypts a database-side vector: split under the data rule, then
    /// transform the halves with `M1ᵀ` and `M2ᵀ`.
    pub fn encrypt_data<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<EncDataVector> {
        self.check_dim(v)?;
        let (v1, v2) = split_data(v, &self.split, rng)?;
        EncDataVector::from_parts(
            self.mat1.transpose_mul_vec(&v1),
            self.mat2.transpose_mul_vec(&v2),
        )
    }

    /// Encrypts a query-side vector: split under the query rule, then
    /// transform the halves with `M1⁻¹` and `M2⁻¹`.
    pub fn encrypt_query<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<EncQueryVector> {
        self.check_dim(v)?;
        let (v1, v2) = split_query(v, &self.split, rng)?;
        EncQueryVector::from_parts(self.mat1_inv.mul_vec(&v1), self.mat2_inv.mul_vec(&v2))
    }

    pub(crate) fn from_raw_parts(
        mat1: Mat,
        mat2: Mat,
        mat1_inv: Mat,
        mat2_inv: Mat,
        split: Vec<bool>,
    ) -> Result<Self> {
        let dim = split.len();
        if dim == 0 {
            return Err(Error::Parse {
                offset: 0,
                what: "key dimension must be at least 1".into(),
            });
        }
        for m in [&mat1, &mat2, &mat1_inv, &mat2_inv] {
            if m.dim != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: m.dim,
                });
            }
        }
        let key = Self {
            dim,
            mat1,
            mat2,
            mat1_inv,
            mat2_inv,
            split,
            _purpose: PhantomData,
        };
        let dev = key.max_inverse_deviation();
        if dev > INVERSE_TOLERANCE {
            return Err(Error::Parse {
                offset: 0,
                what: format!("cached inverses deviate from identity by {dev:.3e}"),
            });
        }
        Ok(key)
    }

    /// Serializes the key: magic, format version, dim, packed split bits,
    /// then the four matrices row-major as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(10 + self.dim.div_ceil(8) + 4 * 8 * self.dim * self.dim);
        w.put_bytes(&KEY_MAGIC);
        w.put_u16(KEY_FORMAT_VERSION);
        w.put_u32(self.dim as u32);
        w.put_bytes(&pack_bits(&self.split));
        for m in [&self.mat1, &self.mat2, &self.mat1_inv, &self.mat2_inv] {
            w.put_f64_slice(&m.data);
        }
        w.into_bytes()
    }

    /// Parses a key file, validating the cached inverses against
    /// [`INVERSE_TOLERANCE`]. The file carries no purpose tag; the requested
    /// purpose type is the caller's claim about how the key will be used.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&KEY_MAGIC, "key")?;
        r.expect_version(KEY_FORMAT_VERSION)?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.error("key dimension must be at least 1"));
        }
        let split = unpack_bits(r.take(dim.div_ceil(8))?, dim);
        let mut mats = Vec::with_capacity(4);
        for _ in 0..4 {
            mats.push(Mat::from_rows(dim, r.f64_vec(dim * dim)?));
        }
        r.finish()?;
        let mat2_inv = mats.pop().unwrap();
        let mat1_inv = mats.pop().unwrap();
        let mat2 = mats.pop().unwrap();
        let mat1 = mats.pop().unwrap();
        Self::from_raw_parts(mat1, mat2, mat1_inv, mat2_inv, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Splits a database-side vector. Components with a set split bit are
/// duplicated; the rest become `v_j/2 − r_j` and `v_j/2 + r_j` with a fresh
/// `r_j` per component, drawn uniformly from `[−1, 1]` scaled by
/// `1 + max|v_j|` so the halves stay comparable in magnitude to the input.
pub fn split_data<R: Rng + ?Sized>(
    v: &[f64],
    split: &[bool],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    split_with_rule(v, split, rng, true)
}

/// Splits a query-side vector: the dual rule, duplicating where the split
/// bit is clear and blinding where it is set.
pub fn split_query<R: Rng + ?Sized>(
    v: &[f64],
    split: &[bool],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    split_with_rule(v, split, rng, false)
}

fn split_with_rule<R: Rng + ?Sized>(
    v: &[f64],
    split: &[bool],
    rng: &mut R,
    duplicate_on_set: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != split.len() {
        return Err(Error::Dimension {
            expected: split.len(),
            got: v.len(),
        });
    }
    let scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut first = Vec::with_capacity(v.len());
    let mut second = Vec::with_capacity(v.len());
    for (&x, &bit) in v.iter().zip(split) {
        if bit == duplicate_on_set {
            first.push(x);
            second.push(x);
        } else {
            let r = rng.random_range(-1.0..=1.0) * scale;
            first.push(x / 2.0 - r);
            second.push(x / 2.0 + r);
        }
    }
    Ok((first, second))
}

/// The server-side primitive: `part1·part1 + part2·part2` across the
/// ciphertext pair, which equals the plaintext inner product of the
/// underlying vectors when both were encrypted under the same key.
pub fn secure_inner(ed: &EncDataVector, eq: &EncQueryVector) -> Result<f64> {
    if ed.dim() != eq.dim() {
        return Err(Error::Dimension {
            expected: ed.dim(),
            got: eq.dim(),
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(&ed.part1, &eq.part1) + dot(&ed.part2, &eq.part2))
}

/// Draws `(M, M⁻¹)` with condition number at most 4: `M = Q·D` for a random
/// orthogonal `Q` and diagonal `D` with entries in `[0.5, 2]`, so
/// `M⁻¹ = D⁻¹·Qᵀ` exactly.
fn random_key_matrix<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> (Mat, Mat) {
    for _ in 0..64 {
        let Some(q) = random_orthogonal(dim, rng) else {
            continue;
        };
        let diag: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..=2.0)).collect();
        let mut m = Mat::zeros(dim);
        let mut m_inv = Mat::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                *m.at_mut(i, j) = q.at(i, j) * diag[j];
                *m_inv.at_mut(i, j) = q.at(j, i) / diag[i];
            }
        }
        if m.max_identity_deviation(&m_inv) <= GENERATION_TOLERANCE {
            return (m, m_inv);
        }
    }
    unreachable!("orthogonal matrix generation failed repeatedly");
}

/// Orthonormalizes a Gaussian matrix column by column (modified
/// Gram-Schmidt with one re-orthogonalization pass). Returns `None` on a
/// degenerate draw.
fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Option<Mat> {
    // Columns stored contiguously while orthonormalizing.
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| gaussian(rng)).collect())
        .collect();
    for j in 0..dim {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _ in 0..2 {
            for prev in done.iter() {
                let proj: f64 = prev.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return None;
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
    }
    let mut q = Mat::zeros(dim);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            *q.at_mut(i, j) = v;
        }
    }
    Some(q)
}

/// Standard normal via Box-Muller.
pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
