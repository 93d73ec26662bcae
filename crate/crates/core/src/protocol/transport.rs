//! Frame transports. Both carry whole encoded frames, reliably and in
//! order, so the server's view is identical whichever one is underneath.

use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};

use super::wire::MAX_FRAME_LEN;

/// Ordered, reliable delivery of whole frames. `recv` returns `None` once
/// the peer has gone away.
pub trait FrameTransport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    fn recv(&mut self) -> Result<Option<Vec<u8>>>;
}

/// In-process transport over a pair of queues.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl ChannelTransport {
    /// Two connected endpoints; frames sent on one arrive on the other.
    pub fn pair() -> (Self, Self) {
        let (atx, arx) = channel();
        let (btx, brx) = channel();
        (Self { tx: atx, rx: brx }, Self { tx: btx, rx: arx })
    }
}

impl FrameTransport for ChannelTransport {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Protocol("peer endpoint dropped".into()))
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        Ok(self.rx.recv().ok())
    }
}

/// Byte-stream transport (TCP or anything `Read + Write`). Frames are
/// self-delimiting through their length prefix; the reader validates the
/// announced length before allocating.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write + Send> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write + Send> FrameTransport for StreamTransport<S> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream.write_all(frame)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        let mut header = [0u8; 4];
        // EOF exactly at a frame boundary is a clean close.
        match self.stream.read(&mut header)? {
            0 => return Ok(None),
            mut n => {
                while n < 4 {
                    let more = self.stream.read(&mut header[n..])?;
                    if more == 0 {
                        return Err(Error::Truncated {
                            offset: n as u64,
                            needed: 4 - n,
                            have: n,
                        });
                    }
                    n += more;
                }
            }
        }
        let len = u32::from_le_bytes(header);
        if len > MAX_FRAME_LEN {
            return Err(Error::LengthOverflow {
                len: len as u64,
                max: MAX_FRAME_LEN as u64,
            });
        }
        let mut frame = vec![0u8; 4 + len as usize];
        frame[..4].copy_from_slice(&header);
        self.stream
            .read_exact(&mut frame[4..])
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Truncated {
                    offset: 4,
                    needed: len as usize,
                    have: 0,
                },
                _ => Error::Io(e),
            })?;
        Ok(Some(frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_pair_delivers_in_order() {
        let (mut a, mut b) = ChannelTransport::pair();
        a.send(&[1, 2, 3]).unwrap();
        a.send(&[4]).unwrap();
        assert_eq!(b.recv().unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(b.recv().unwrap(), Some(vec![4]));

        drop(a);
        assert_eq!(b.recv().unwrap(), None);
    }

    #[test]
    fn stream_transport_over_tcp() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = StreamTransport::new(stream);
            while let Some(frame) = t.recv().unwrap() {
                t.send(&frame).unwrap();
            }
        });

        let mut t = StreamTransport::new(std::net::TcpStream::connect(addr).unwrap());
        let frame = {
            let mut f = vec![3, 0, 0, 0];
            f.extend_from_slice(&[7, 8, 9]);
            f
        };
        t.send(&frame).unwrap();
        assert_eq!(t.recv().unwrap(), Some(frame));
        drop(t);
        server.join().unwrap();
    }

    #[test]
    fn stream_transport_rejects_oversized_header() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let writer = std::thread::spawn(move || {
            let mut stream = std::net::TcpStream::connect(addr).unwrap();
            stream.write_all(&u32::MAX.to_le_bytes()).unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        let mut t = StreamTransport::new(stream);
        assert!(matches!(t.recv(), Err(Error::LengthOverflow { .. })));
        writer.join().unwrap();
    }
}
