//! Relays over TCP.
//!
//! Every frame on a socket is a `u32` big-endian length followed by that many
//! bytes. A connection opens with one role byte: `P` for a producer pushing
//! shares (each answered by an ack byte) or `D` for the aggregator draining
//! the buffer (each request is a `u32` maximum, answered by a `u32` count and
//! that many share frames).

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::relay::{Relay, RelayedShare};
use super::wire::ShareMessage;
use super::TransportError;

pub const ROLE_PRODUCER: u8 = b'P';
pub const ROLE_DRAIN: u8 = b'D';
pub const ACK_OK: u8 = 0;
pub const ACK_RETRY: u8 = 1;
pub const ACK_MALFORMED: u8 = 2;
/// Frames above this size are treated as a protocol error.
pub const MAX_FRAME: usize = 1 << 20;

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// A relay listening on a socket until dropped or stopped.
pub struct RelayServer {
    addr: SocketAddr,
    relay: Arc<Relay>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl RelayServer {
    pub fn bind(addr: impl ToSocketAddrs, relay: Arc<Relay>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (relay, stop) = (relay.clone(), stop.clone());
            thread::spawn(move || accept_loop(listener, relay, stop))
        };
        Ok(RelayServer {
            addr,
            relay,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn relay(&self) -> &Arc<Relay> {
        &self.relay
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, relay: Arc<Relay>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _peer)) => {
                // The peer address is never recorded past this point.
                let relay = relay.clone();
                let stop = stop.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, &relay, &stop) {
                        debug!("relay {}: connection closed: {e}", relay.name());
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => warn!("relay {}: accept failed: {e}", relay.name()),
        }
    }
}

fn serve_connection(stream: TcpStream, relay: &Relay, stop: &AtomicBool) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut role = [0u8; 1];
    read_patiently(&mut reader, &mut role, stop)?;
    match role[0] {
        ROLE_PRODUCER => loop {
            let Some(frame) = next_frame(&mut reader, stop)? else {
                return Ok(());
            };
            let ack = match ShareMessage::from_frame(&frame).and_then(|s| relay.forward(s)) {
                Ok(()) => ACK_OK,
                Err(TransportError::Backpressure) => ACK_RETRY,
                Err(e) => {
                    debug!("relay {}: rejected frame: {e}", relay.name());
                    ACK_MALFORMED
                }
            };
            writer.write_all(&[ack])?;
            writer.flush()?;
        },
        ROLE_DRAIN => loop {
            let mut max = [0u8; 4];
            if !read_patiently(&mut reader, &mut max, stop)? {
                return Ok(());
            }
            let batch = relay.drain(u32::from_be_bytes(max) as usize);
            writer.write_all(&(batch.len() as u32).to_be_bytes())?;
            for s in batch {
                write_frame(&mut writer, &s.share.to_frame())?;
            }
            writer.flush()?;
        },
        other => Err(io::Error::new(io::ErrorKind::InvalidData, format!("unknown role byte {other}"))),
    }
}

/// `read_exact` that tolerates read timeouts while the server is running.
/// Returns `false` on end of stream before the first byte.
fn read_patiently<R: Read>(r: &mut R, buf: &mut [u8], stop: &AtomicBool) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        if stop.load(Ordering::SeqCst) {
            return Err(io::Error::new(io::ErrorKind::Interrupted, "relay stopping"));
        }
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(k) => filled += k,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn next_frame<R: Read>(r: &mut R, stop: &AtomicBool) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    if !read_patiently(r, &mut len, stop)? {
        return Ok(None);
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    if len > 0 && !read_patiently(r, &mut buf, stop)? {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(Some(buf))
}

/// Producer side of a relay connection.
pub struct RelayClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl RelayClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        writer.write_all(&[ROLE_PRODUCER])?;
        writer.flush()?;
        Ok(RelayClient {
            reader: BufReader::new(stream),
            writer,
        })
    }

    /// Sends one share and waits for the relay's verdict.
    pub fn send(&mut self, share: &ShareMessage) -> Result<(), TransportError> {
        write_frame(&mut self.writer, &share.to_frame()).map_err(TransportError::io)?;
        self.writer.flush().map_err(TransportError::io)?;
        let mut ack = [0u8; 1];
        self.reader.read_exact(&mut ack).map_err(TransportError::io)?;
        match ack[0] {
            ACK_OK => Ok(()),
            ACK_RETRY => Err(TransportError::Backpressure),
            _ => Err(TransportError::MalformedShare("rejected by relay".into())),
        }
    }
}

/// Aggregator side: pulls buffered shares from one relay.
pub struct DrainClient {
    name: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl DrainClient {
    pub fn connect(name: impl Into<String>, addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        writer.write_all(&[ROLE_DRAIN])?;
        writer.flush()?;
        Ok(DrainClient {
            name: name.into(),
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn drain(&mut self, max: u32) -> Result<Vec<RelayedShare>, TransportError> {
        self.writer.write_all(&max.to_be_bytes()).map_err(TransportError::io)?;
        self.writer.flush().map_err(TransportError::io)?;
        let mut count = [0u8; 4];
        self.reader.read_exact(&mut count).map_err(TransportError::io)?;
        let count = u32::from_be_bytes(count);
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let frame = read_frame(&mut self.reader)
                .map_err(TransportError::io)?
                .ok_or_else(|| TransportError::Io("relay closed mid-batch".into()))?;
            out.push(RelayedShare {
                relay: self.name.clone(),
                share: ShareMessage::from_frame(&frame)?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn share(i: u128) -> ShareMessage {
        ShareMessage {
            message_id: i,
            share_index: 2,
            n_proxies: 2,
            body: vec![i as u8; 30],
        }
    }

    #[test]
    fn socket_roundtrip_preserves_order() {
        let server = RelayServer::bind("127.0.0.1:0", Arc::new(Relay::new("key-2", 1000))).unwrap();
        let mut producer = RelayClient::connect(server.local_addr()).unwrap();
        for i in 0..200 {
            producer.send(&share(i)).unwrap();
        }
        let mut drain = DrainClient::connect("key-2", server.local_addr()).unwrap();
        let got = drain.drain(1000).unwrap();
        assert_eq!(got.len(), 200);
        for (i, s) in got.iter().enumerate() {
            assert_eq!(s.share, share(i as u128));
        }
        assert!(drain.drain(10).unwrap().is_empty());
    }

    #[test]
    fn socket_backpressure_and_malformed() {
        let server = RelayServer::bind("127.0.0.1:0", Arc::new(Relay::new("answer", 1))).unwrap();
        let mut producer = RelayClient::connect(server.local_addr()).unwrap();
        producer.send(&share(1)).unwrap();
        assert_eq!(producer.send(&share(2)), Err(TransportError::Backpressure));
        let mut bad = share(3);
        bad.share_index = 9;
        assert!(matches!(producer.send(&bad), Err(TransportError::MalformedShare(_))));
    }
}
