//! Client drivers for the vendor and user roles. Each is a thin
//! request/reply sequence over a [`FrameTransport`]; keys never travel
//! through here — product keys reach users out of band as key files.

use rand::Rng;

use crate::aspe::{DetectorKey, MatchingKey};
use crate::cascade::{encrypt_detector, CascadeModel};
use crate::error::{Error, Result};
use crate::image::{scan_windows, GrayImage, ScanParams};
use crate::retrieval::{
    build_label_vector, build_query, decrypt_photo, encrypt_label, encrypt_photo,
    encrypt_query_label, PhotoRecord, CONTENT_KEY_LEN, NONCE_LEN,
};

use super::transport::FrameTransport;
use super::wire::{decode, encode};
use super::{ProtocolMessage, WindowGeometry};

/// Default number of windows per detect request.
pub const DEFAULT_DETECT_BATCH: usize = 256;

/// Request/reply driver: allocates request ids, checks that each reply
/// echoes the id it was issued for, and surfaces `ErrorReply` frames as
/// [`Error::Remote`].
pub struct RequestClient<T: FrameTransport> {
    transport: T,
    next_id: u64,
}

impl<T: FrameTransport> RequestClient<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            next_id: 1,
        }
    }

    pub fn request(
        &mut self,
        build: impl FnOnce(u64) -> ProtocolMessage,
    ) -> Result<ProtocolMessage> {
        let id = self.next_id;
        self.next_id += 1;
        self.transport.send(&encode(&build(id)))?;
        let frame = self
            .transport
            .recv()?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        let reply = decode(&frame)?;
        if reply.request_id() != id {
            return Err(Error::Protocol(format!(
                "reply for request {} arrived while waiting on {id}",
                reply.request_id()
            )));
        }
        if let ProtocolMessage::ErrorReply { code, message, .. } = reply {
            return Err(Error::Remote { code, message });
        }
        Ok(reply)
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

/// Vendor role: encrypts the detector under the product key and registers
/// it with the cloud. The product key itself goes to users via a secure
/// out-of-band channel (a key file), never over this transport.
pub fn vendor_publish<T: FrameTransport, R: Rng + ?Sized>(
    client: &mut RequestClient<T>,
    detector_id: &str,
    key: &DetectorKey,
    model: &CascadeModel,
    rng: &mut R,
) -> Result<()> {
    let detector = encrypt_detector(key, model, rng)?;
    let reply = client.request(|request_id| ProtocolMessage::RegisterDetector {
        request_id,
        detector_id: detector_id.to_string(),
        detector,
    })?;
    match reply {
        ProtocolMessage::Ack { .. } => Ok(()),
        other => Err(Error::Protocol(format!(
            "expected ack for registration, got {}",
            other.kind()
        ))),
    }
}

/// User role, detection: slides windows over the photo, normalizes and
/// encrypts each under the product key, submits them in batches, and
/// returns the geometry of every accepted window.
pub fn user_detect<T: FrameTransport, R: Rng + ?Sized>(
    client: &mut RequestClient<T>,
    image: &GrayImage,
    product_key: &DetectorKey,
    params: &ScanParams,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<WindowGeometry>> {
    let batch_size = batch_size.max(1);
    let windows = scan_windows(image, params);
    let mut accepted = Vec::new();
    for chunk in windows.chunks(batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for w in chunk {
            let geom = WindowGeometry {
                origin_x: w.origin_x,
                origin_y: w.origin_y,
                scale: w.scale,
            };
            batch.push((geom, product_key.encrypt_query(&w.vector, rng)?));
        }
        let sent = batch.len();
        let reply = client.request(|request_id| ProtocolMessage::DetectRequest {
            request_id,
            windows: batch,
        })?;
        match reply {
            ProtocolMessage::DetectResponse { outcomes, .. } => {
                if outcomes.len() != sent {
                    return Err(Error::Protocol(format!(
                        "sent {sent} windows, got {} outcomes",
                        outcomes.len()
                    )));
                }
                accepted.extend(
                    outcomes
                        .into_iter()
                        .filter(|(_, o)| o.accepted)
                        .map(|(g, _)| g),
                );
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected detect response, got {}",
                    other.kind()
                )))
            }
        }
    }
    Ok(accepted)
}

/// One photo headed for the cloud: its bytes and who appears in it.
#[derive(Debug, Clone)]
pub struct PhotoUpload {
    pub photo_id: String,
    pub bytes: Vec<u8>,
    pub members: Vec<String>,
}

/// User role, off-line phase: builds a label vector per photo, encrypts
/// labels under the matching key and photo bytes under the content key, and
/// uploads the records. Nonces are drawn fresh from the caller's RNG.
pub fn user_upload<T: FrameTransport, R: Rng + ?Sized>(
    client: &mut RequestClient<T>,
    matching_key: &MatchingKey,
    content_key: &[u8; CONTENT_KEY_LEN],
    registry: &crate::retrieval::IdentityRegistry,
    photos: &[PhotoUpload],
    rng: &mut R,
) -> Result<()> {
    let mut records = Vec::with_capacity(photos.len());
    for p in photos {
        let label = build_label_vector(registry, &p.members)?;
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill(&mut nonce);
        records.push(PhotoRecord {
            photo_id: p.photo_id.clone(),
            nonce,
            ciphertext: encrypt_photo(content_key, &nonce, &p.bytes),
            enc_label: encrypt_label(matching_key, &label, rng)?,
        });
    }
    let reply = client.request(|request_id| ProtocolMessage::UploadPhotos {
        request_id,
        records,
    })?;
    match reply {
        ProtocolMessage::Ack { .. } => Ok(()),
        other => Err(Error::Protocol(format!(
            "expected ack for upload, got {}",
            other.kind()
        ))),
    }
}

/// User role, on-line phase: queries for photos containing every target
/// member and decrypts whatever comes back. Returns `(photo_id, bytes)`
/// pairs in the server's match order.
pub fn user_query<T: FrameTransport, R: Rng + ?Sized>(
    client: &mut RequestClient<T>,
    matching_key: &MatchingKey,
    content_key: &[u8; CONTENT_KEY_LEN],
    registry: &crate::retrieval::IdentityRegistry,
    targets: &[&str],
    rng: &mut R,
) -> Result<Vec<(String, Vec<u8>)>> {
    let query = build_query(registry, targets)?;
    let eq = encrypt_query_label(matching_key, &query, rng)?;
    let lambda = query.lambda() as u32;
    let reply = client.request(|request_id| ProtocolMessage::MatchRequest {
        request_id,
        query: eq,
        lambda,
    })?;
    match reply {
        ProtocolMessage::MatchResponse { photos, .. } => photos
            .into_iter()
            .map(|p| {
                let bytes = decrypt_photo(content_key, &p.nonce, &p.ciphertext)?;
                Ok((p.photo_id, bytes))
            })
            .collect(),
        other => Err(Error::Protocol(format!(
            "expected match response, got {}",
            other.kind()
        ))),
    }
}
