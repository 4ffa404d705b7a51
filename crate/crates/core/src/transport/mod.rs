//! Message carriers. Both carry length-prefixed frames: a 4-byte big-endian
//! body length followed by the body. Neither encrypts; confidentiality lives
//! in [`crate::envelope`].

mod frame;
mod memory;
mod tcp;

pub use frame::{decode_frame, encode_frame, read_frame, write_frame, MAX_FRAME_LEN};
pub use memory::{Delivery, InProcessNetwork, Receipt};
pub use tcp::{tcp_connect, tcp_listen, TcpEndpoint};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("destination `{0}` is not reachable")]
    Unreachable(String),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
