use std::io::{self, Read, Write};

use super::{DecodeError, Message};

/// Largest frame accepted by default (64 MiB).
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit of {1}")]
    TooLarge(usize, usize),
    #[error("empty frame")]
    Empty,
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
}

impl FrameError {
    /// True when the stream position is unknown and the peer must be dropped.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, FrameError::Decode(_) | FrameError::Empty)
    }
}

/// Reads one frame and decodes it.
///
/// Returns `Ok(None)` on a clean end of stream before any byte of a frame.
pub fn read_frame<R: Read>(reader: &mut R, max: usize) -> Result<Option<Message>, FrameError> {
    let mut len = [0u8; 4];
    loop {
        match reader.read(&mut len[..1]) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    reader.read_exact(&mut len[1..])?;
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > max {
        return Err(FrameError::TooLarge(len, max));
    }
    let mut rest = vec![0u8; len];
    reader.read_exact(&mut rest)?;
    Ok(Some(super::decode_body(rest[0], &rest[1..])?))
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &Message) -> io::Result<()> {
    writer.write_all(&msg.encode())?;
    writer.flush()
}
