use thiserror::Error;

/// Numeric error codes carried by protocol `ErrorReply` frames.
///
/// Decode failures and server-side rejections each map to a distinct code so
/// clients can tell them apart without parsing the message text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    /// Frame or payload ended before the announced content.
    Truncated = 1,
    /// Frame carried an unsupported protocol version byte.
    UnknownVersion = 2,
    /// Frame carried an unknown message tag.
    UnknownTag = 3,
    /// Frame length field exceeds the transport limit.
    LengthOverflow = 4,
    /// Payload bytes decoded but violated a message invariant.
    BadPayload = 5,
    /// Detect request arrived before any detector was registered.
    DetectorMissing = 6,
    /// Vector dimensions disagree with the registered detector or store.
    BadDimension = 7,
    /// Uploaded record reuses a nonce already present in the store.
    NonceReuse = 8,
    /// Message kind is not a request the server answers.
    BadRequest = 9,
    /// Any other server-side failure.
    Internal = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => Truncated,
            2 => UnknownVersion,
            3 => UnknownTag,
            4 => LengthOverflow,
            5 => BadPayload,
            6 => DetectorMissing,
            7 => BadDimension,
            8 => NonceReuse,
            9 => BadRequest,
            10 => Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: u64, what: String },

    #[error("truncated input at byte {offset}: needed {needed} more bytes, {have} available")]
    Truncated { offset: u64, needed: usize, have: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("unsupported wire protocol version {0}")]
    UnknownWireVersion(u8),

    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),

    #[error("frame length {len} exceeds limit {max}")]
    LengthOverflow { len: u64, max: u64 },

    #[error("ciphertext failed authentication")]
    Auth,

    #[error("nonce already present in photo store")]
    NonceReuse,

    #[error("duplicate photo id {0:?}")]
    DuplicatePhotoId(String),

    #[error("unknown member {0:?}")]
    UnknownMember(String),

    #[error("query selects no members")]
    EmptyQuery,

    #[error("no detector registered")]
    DetectorMissing,

    #[error("server replied with error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The wire code a server reply should carry for this error.
    pub fn wire_code(&self) -> ErrorCode {
        match self {
            Error::Dimension { .. } => ErrorCode::BadDimension,
            Error::Truncated { .. } => ErrorCode::Truncated,
            Error::UnknownWireVersion(_) => ErrorCode::UnknownVersion,
            Error::UnknownTag(_) => ErrorCode::UnknownTag,
            Error::LengthOverflow { .. } => ErrorCode::LengthOverflow,
            Error::Parse { .. } | Error::Version { .. } => ErrorCode::BadPayload,
            Error::NonceReuse | Error::DuplicatePhotoId(_) => ErrorCode::NonceReuse,
            Error::DetectorMissing => ErrorCode::DetectorMissing,
            Error::Remote { code, .. } => *code,
            _ => ErrorCode::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
