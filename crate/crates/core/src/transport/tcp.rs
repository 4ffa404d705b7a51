use std::io::BufReader;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::{read_frame, write_frame, TransportError};

pub fn tcp_listen(addr: &str) -> Result<TcpListener, TransportError> {
    TcpListener::bind(addr).map_err(|source| TransportError::Bind {
        addr: addr.to_string(),
        source,
    })
}

pub fn tcp_connect(addr: impl ToSocketAddrs + std::fmt::Display) -> Result<TcpEndpoint, TransportError> {
    let label = addr.to_string();
    let stream = TcpStream::connect(addr).map_err(|source| TransportError::Connect {
        addr: label,
        source,
    })?;
    TcpEndpoint::new(stream)
}

/// One framed TCP connection. Reads and writes go through independent handles
/// so a reader thread and a writer may run concurrently.
#[derive(Debug)]
pub struct TcpEndpoint {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpEndpoint {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self { reader: BufReader::new(stream), writer })
    }

    pub fn send(&mut self, body: &[u8]) -> Result<(), TransportError> {
        write_frame(&mut self.writer, body)
    }

    /// Next frame body, or `None` once the peer has closed the connection.
    pub fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        read_frame(&mut self.reader)
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }

    /// Splits off an independent writer handle.
    pub fn writer(&self) -> Result<TcpStream, TransportError> {
        Ok(self.writer.try_clone()?)
    }

    pub fn shutdown(&self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn loopback_roundtrip() {
        let listener = tcp_listen("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut ep = TcpEndpoint::new(s).unwrap();
            let a = ep.recv().unwrap().unwrap();
            let b = ep.recv().unwrap().unwrap();
            ep.send(&[a, b].concat()).unwrap();
            assert!(ep.recv().unwrap().is_none());
        });
        let mut client = tcp_connect(addr).unwrap();
        client.send(b"first,").unwrap();
        client.send(b"second").unwrap();
        assert_eq!(client.recv().unwrap().unwrap(), b"first,second");
        client.shutdown();
        server.join().unwrap();
    }

    #[test]
    fn truncated_frame_over_tcp() {
        let listener = tcp_listen("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            s.write_all(&[0, 0, 0, 10, 1, 2, 3]).unwrap();
        });
        let mut client = tcp_connect(addr).unwrap();
        server.join().unwrap();
        assert!(matches!(client.recv(), Err(TransportError::Framing(_))));
    }

    #[test]
    fn bind_and_connect_errors() {
        assert!(matches!(tcp_listen("256.0.0.1:1"), Err(TransportError::Bind { .. })));
        let listener = tcp_listen("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        assert!(matches!(tcp_connect(addr), Err(TransportError::Connect { .. })));
    }
}
