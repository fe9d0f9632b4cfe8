//! Framed binary messages between monitor and manager.
//!
//! A frame is a u32 LE length (tag plus payload), a u8 tag and the payload.
//! Every payload starts with a u32 request id; responses carry the id of the
//! request they answer.

mod conn;
mod message;

use thiserror::Error;

pub use conn::{ByteCounter, Connection, CounterSnapshot, Handler, Options};
pub use message::{
    tag_name, FrameSummary, Message, Preview, ResumeStrategy, StackSummary, ValueSummary, WireStepOp, HEADER_LEN,
    MAX_FRAME, PREVIEW_LIMIT, TAG_NAMES,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("unexpected response {0}")]
    UnexpectedResponse(&'static str),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}
