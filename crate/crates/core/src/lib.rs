//! Privacy-preserving face retrieval for shared cloud photo storage.
//!
//! Three parties cooperate: a detector vendor sells a cascade face detector,
//! users store photos in a shared cloud space, and the cloud server provides
//! storage and compute. The server must be able to run detection and answer
//! retrieval queries without ever seeing the detector parameters, the photo
//! pixels, or who is in which photo.
//!
//! The building block is a split-vector matrix encryption that preserves
//! inner products between asymmetrically encrypted vectors ([`aspe`]).
//! Database-side vectors (classifier hyperplanes, photo label vectors) and
//! query-side vectors (detection windows, retrieval queries) are encrypted
//! under opposite rules so that the server can evaluate dot products — and
//! nothing else — between the two sides.
//!
//! On top of that sit:
//!
//! * [`cascade`] — a staged linear-threshold rejector cascade, evaluated
//!   either in plaintext (client-side oracle) or over ciphertexts
//!   (server-side);
//! * [`image`] — image ingestion and the sliding-window front end feeding the
//!   detector;
//! * [`retrieval`] — binary label vectors over group members, the encrypted
//!   photo store, and threshold matching;
//! * [`protocol`] — the framed three-role wire protocol plus server state
//!   machine and client drivers.
//!
//! The threat model is an honest-but-curious server: it follows the protocol
//! but inspects everything it receives. What it legitimately learns is
//! documented per module; see [`protocol`] for the full leakage profile.

pub mod aspe;
pub mod cascade;
mod codec;
mod error;
pub mod image;
pub mod protocol;
pub mod retrieval;

pub use error::{Error, ErrorCode, Result};
