//! Frame encoding: a u32 length prefix covering everything after itself,
//! then a version byte, a variant tag, and the payload. All integers
//! little-endian, floats as 8-byte binary64.

use crate::aspe::EncQueryVector;
use crate::cascade::{DetectionOutcome, EncryptedDetector};
use crate::codec::{Reader, Writer};
use crate::error::{Error, ErrorCode, Result};
use crate::retrieval::{PhotoRecord, NONCE_LEN};

use super::{MatchedPhoto, ProtocolMessage, WindowGeometry};

pub const WIRE_VERSION: u8 = 1;

/// Upper bound on a frame's announced length; protects the receiver from
/// allocating on a hostile length field. A full 22-stage detector is ~20 MB.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

const TAG_REGISTER_DETECTOR: u8 = 0x01;
const TAG_DETECT_REQUEST: u8 = 0x02;
const TAG_DETECT_RESPONSE: u8 = 0x03;
const TAG_UPLOAD_PHOTOS: u8 = 0x04;
const TAG_MATCH_REQUEST: u8 = 0x05;
const TAG_MATCH_RESPONSE: u8 = 0x06;
const TAG_ERROR_REPLY: u8 = 0x07;
const TAG_ACK: u8 = 0x08;

pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(WIRE_VERSION);
    match msg {
        ProtocolMessage::RegisterDetector {
            request_id,
            detector_id,
            detector,
        } => {
            w.put_u8(TAG_REGISTER_DETECTOR);
            w.put_u64(*request_id);
            w.put_str(detector_id);
            w.put_blob(&detector.to_bytes());
        }
        ProtocolMessage::DetectRequest { request_id, windows } => {
            w.put_u8(TAG_DETECT_REQUEST);
            w.put_u64(*request_id);
            w.put_u32(windows.len() as u32);
            for (geom, ew) in windows {
                put_geometry(&mut w, geom);
                w.put_blob(&ew.to_bytes());
            }
        }
        ProtocolMessage::DetectResponse { request_id, outcomes } => {
            w.put_u8(TAG_DETECT_RESPONSE);
            w.put_u64(*request_id);
            w.put_u32(outcomes.len() as u32);
            for (geom, outcome) in outcomes {
                put_geometry(&mut w, geom);
                put_outcome(&mut w, outcome);
            }
        }
        ProtocolMessage::UploadPhotos { request_id, records } => {
            w.put_u8(TAG_UPLOAD_PHOTOS);
            w.put_u64(*request_id);
            w.put_u32(records.len() as u32);
            for r in records {
                w.put_str(&r.photo_id);
                w.put_bytes(&r.nonce);
                w.put_blob(&r.ciphertext);
                w.put_blob(&r.enc_label.to_bytes());
            }
        }
        ProtocolMessage::MatchRequest {
            request_id,
            query,
            lambda,
        } => {
            w.put_u8(TAG_MATCH_REQUEST);
            w.put_u64(*request_id);
            w.put_u32(*lambda);
            w.put_blob(&query.to_bytes());
        }
        ProtocolMessage::MatchResponse { request_id, photos } => {
            w.put_u8(TAG_MATCH_RESPONSE);
            w.put_u64(*request_id);
            w.put_u32(photos.len() as u32);
            for p in photos {
                w.put_str(&p.photo_id);
                w.put_bytes(&p.nonce);
                w.put_blob(&p.ciphertext);
            }
        }
        ProtocolMessage::ErrorReply {
            request_id,
            code,
            message,
        } => {
            w.put_u8(TAG_ERROR_REPLY);
            w.put_u64(*request_id);
            w.put_u16(*code as u16);
            w.put_str(message);
        }
        ProtocolMessage::Ack { request_id } => {
            w.put_u8(TAG_ACK);
            w.put_u64(*request_id);
        }
    }
    let body = w.into_bytes();
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decodes one complete frame (length prefix included). Never panics on
/// hostile input; every malformed shape maps to a distinct error.
pub fn decode(frame: &[u8]) -> Result<ProtocolMessage> {
    let mut r = Reader::new(frame);
    let len = r.u32()? as usize;
    if len as u64 > MAX_FRAME_LEN as u64 {
        return Err(Error::LengthOverflow {
            len: len as u64,
            max: MAX_FRAME_LEN as u64,
        });
    }
    if r.remaining() < len {
        return Err(Error::Truncated {
            offset: r.pos() as u64,
            needed: len - r.remaining(),
            have: r.remaining(),
        });
    }
    if r.remaining() > len {
        return Err(Error::Parse {
            offset: (4 + len) as u64,
            what: "frame longer than its announced length".into(),
        });
    }
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(Error::UnknownWireVersion(version));
    }
    let tag = r.u8()?;
    let msg = match tag {
        TAG_REGISTER_DETECTOR => {
            let request_id = r.u64()?;
            let detector_id = r.str_blob()?;
            let detector = EncryptedDetector::from_bytes(&r.blob()?)?;
            ProtocolMessage::RegisterDetector {
                request_id,
                detector_id,
                detector,
            }
        }
        TAG_DETECT_REQUEST => {
            let request_id = r.u64()?;
            let n = r.u32()? as usize;
            let mut windows = Vec::new();
            for _ in 0..n {
                let geom = get_geometry(&mut r)?;
                let ew = EncQueryVector::from_bytes(&r.blob()?)?;
                windows.push((geom, ew));
            }
            ProtocolMessage::DetectRequest { request_id, windows }
        }
        TAG_DETECT_RESPONSE => {
            let request_id = r.u64()?;
            let n = r.u32()? as usize;
            let mut outcomes = Vec::new();
            for _ in 0..n {
                let geom = get_geometry(&mut r)?;
                let outcome = get_outcome(&mut r)?;
                outcomes.push((geom, outcome));
            }
            ProtocolMessage::DetectResponse { request_id, outcomes }
        }
        TAG_UPLOAD_PHOTOS => {
            let request_id = r.u64()?;
            let n = r.u32()? as usize;
            let mut records = Vec::new();
            for _ in 0..n {
                let photo_id = r.str_blob()?;
                let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
                let ciphertext = r.blob()?;
                let enc_label = crate::aspe::EncDataVector::from_bytes(&r.blob()?)?;
                records.push(PhotoRecord {
                    photo_id,
                    nonce,
                    ciphertext,
                    enc_label,
                });
            }
            ProtocolMessage::UploadPhotos { request_id, records }
        }
        TAG_MATCH_REQUEST => {
            let request_id = r.u64()?;
            let lambda = r.u32()?;
            let query = EncQueryVector::from_bytes(&r.blob()?)?;
            ProtocolMessage::MatchRequest {
                request_id,
                query,
                lambda,
            }
        }
        TAG_MATCH_RESPONSE => {
            let request_id = r.u64()?;
            let n = r.u32()? as usize;
            let mut photos = Vec::new();
            for _ in 0..n {
                let photo_id = r.str_blob()?;
                let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
                let ciphertext = r.blob()?;
                photos.push(MatchedPhoto {
                    photo_id,
                    nonce,
                    ciphertext,
                });
            }
            ProtocolMessage::MatchResponse { request_id, photos }
        }
        TAG_ERROR_REPLY => {
            let request_id = r.u64()?;
            let raw = r.u16()?;
            let code = ErrorCode::from_u16(raw)
                .ok_or_else(|| r.error(format!("unknown error code {raw}")))?;
            let message = r.str_blob()?;
            ProtocolMessage::ErrorReply {
                request_id,
                code,
                message,
            }
        }
        TAG_ACK => ProtocolMessage::Ack { request_id: r.u64()? },
        other => return Err(Error::UnknownTag(other)),
    };
    r.finish()?;
    Ok(msg)
}

fn put_geometry(w: &mut Writer, g: &WindowGeometry) {
    w.put_u32(g.origin_x);
    w.put_u32(g.origin_y);
    w.put_f64(g.scale);
}

fn get_geometry(r: &mut Reader<'_>) -> Result<WindowGeometry> {
    Ok(WindowGeometry {
        origin_x: r.u32()?,
        origin_y: r.u32()?,
        scale: r.f64()?,
    })
}

fn put_outcome(w: &mut Writer, o: &DetectionOutcome) {
    w.put_u8(o.accepted as u8);
    match o.rejected_at_stage {
        Some(i) => {
            w.put_u8(1);
            w.put_u32(i as u32);
        }
        None => w.put_u8(0),
    }
    w.put_u32(o.stage_scores.len() as u32);
    w.put_f64_slice(&o.stage_scores);
}

fn get_outcome(r: &mut Reader<'_>) -> Result<DetectionOutcome> {
    let accepted = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.error(format!("bad boolean byte {other}"))),
    };
    let rejected_at_stage = match r.u8()? {
        0 => None,
        1 => Some(r.u32()? as usize),
        other => return Err(r.error(format!("bad option byte {other}"))),
    };
    if accepted != rejected_at_stage.is_none() {
        return Err(r.error("outcome acceptance disagrees with rejection stage"));
    }
    let n = r.u32()? as usize;
    Ok(DetectionOutcome {
        accepted,
        rejected_at_stage,
        stage_scores: r.f64_vec(n)?,
    })
}
