use std::io::{ErrorKind, Read, Write};

use super::TransportError;

/// Largest accepted frame body: 64 MiB.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

pub fn encode_frame(body: &[u8]) -> Result<Vec<u8>, TransportError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Parses a buffer holding exactly one frame and returns its body.
pub fn decode_frame(frame: &[u8]) -> Result<&[u8], TransportError> {
    if frame.len() < 4 {
        return Err(TransportError::Framing(format!(
            "{} bytes is shorter than the length prefix",
            frame.len()
        )));
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    if frame.len() - 4 != len {
        return Err(TransportError::Framing(format!(
            "prefix announces {len} bytes, buffer holds {}",
            frame.len() - 4
        )));
    }
    Ok(&frame[4..])
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), TransportError> {
    let frame = encode_frame(body)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. Returns `Ok(None)` on a clean end of stream between
/// frames; a stream that ends inside a frame is a framing error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, TransportError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(TransportError::Framing(format!(
                    "stream ended after {got} of 4 length bytes"
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => {
            TransportError::Framing(format!("stream ended inside a {len}-byte frame"))
        }
        _ => TransportError::Io(e),
    })?;
    Ok(Some(body))
}
