//! Message transport: length-prefixed frames over an in-process channel pair
//! or a TCP stream, with identical byte accounting on both.
//!
//! A frame is a little-endian u32 body length followed by the body; an empty
//! message is four zero bytes. Counters track wire bytes (prefix included),
//! so an in-process federation and a TCP one report the same traffic for the
//! same messages. Receiving blocks; a peer closing between frames is an
//! orderly shutdown (`Ok(None)`), closing mid-frame is an error.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

use crate::error::{Error, Result};

/// Default ceiling on a single frame body; anything larger is refused on
/// both send and receive.
pub const DEFAULT_MAX_FRAME: usize = 256 << 20;

const PREFIX_LEN: u64 = 4;
const CONNECT_ATTEMPTS: u32 = 3;
const CONNECT_BACKOFF: Duration = Duration::from_millis(50);

/// Monotone wire-traffic counters, prefix bytes included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
}

/// Which side of the conversation an endpoint is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

/// Writes one frame; returns the wire bytes consumed.
pub fn write_frame(w: &mut impl Write, body: &[u8], max_frame: usize) -> Result<u64> {
    if body.len() > max_frame {
        return Err(Error::FrameSize(format!(
            "{} byte frame exceeds the {max_frame} byte limit",
            body.len()
        )));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    Ok(PREFIX_LEN + body.len() as u64)
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly before a new
/// frame started; ending inside a frame is an I/O error, and a declared
/// length over `max_frame` is a size error.
pub fn read_frame(r: &mut impl Read, max_frame: usize) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut got = 0usize;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::truncated("frame prefix")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > max_frame {
        return Err(Error::FrameSize(format!(
            "peer declared a {len} byte frame, limit is {max_frame}"
        )));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|_| Error::truncated("frame body"))?;
    Ok(Some(body))
}

enum Inner {
    InProc {
        tx: mpsc::Sender<Vec<u8>>,
        rx: mpsc::Receiver<Vec<u8>>,
    },
    Tcp(TcpStream),
}

/// One end of a message channel.
pub struct Endpoint {
    inner: Inner,
    counters: Counters,
    max_frame: usize,
    role: Role,
}

impl Endpoint {
    /// Connected in-process pair: (server end, client end). Dropping either
    /// end reads as an orderly shutdown on the other.
    pub fn in_proc_pair() -> (Endpoint, Endpoint) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        let mk = |tx, rx, role| Endpoint {
            inner: Inner::InProc { tx, rx },
            counters: Counters::default(),
            max_frame: DEFAULT_MAX_FRAME,
            role,
        };
        (mk(tx_a, rx_a, Role::Server), mk(tx_b, rx_b, Role::Client))
    }

    fn from_tcp(stream: TcpStream, role: Role) -> Result<Endpoint> {
        stream
            .set_nodelay(true)
            .map_err(|e| Error::Transport(format!("set_nodelay: {e}")))?;
        Ok(Endpoint {
            inner: Inner::Tcp(stream),
            counters: Counters::default(),
            max_frame: DEFAULT_MAX_FRAME,
            role,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn set_max_frame(&mut self, max_frame: usize) {
        self.max_frame = max_frame;
    }

    /// Sends one message as a single frame.
    pub fn send_message(&mut self, body: &[u8]) -> Result<()> {
        let wire = match &mut self.inner {
            Inner::InProc { tx, .. } => {
                if body.len() > self.max_frame {
                    return Err(Error::FrameSize(format!(
                        "{} byte frame exceeds the {} byte limit",
                        body.len(),
                        self.max_frame
                    )));
                }
                tx.send(body.to_vec())
                    .map_err(|_| Error::Transport("peer hung up".into()))?;
                PREFIX_LEN + body.len() as u64
            }
            Inner::Tcp(stream) => {
                let n = write_frame(stream, body, self.max_frame)?;
                stream.flush()?;
                n
            }
        };
        self.counters.messages_sent += 1;
        self.counters.bytes_sent += wire;
        Ok(())
    }

    /// Blocks for the next message; `Ok(None)` is an orderly shutdown.
    pub fn recv_message(&mut self) -> Result<Option<Vec<u8>>> {
        let body = match &mut self.inner {
            Inner::InProc { rx, .. } => match rx.recv() {
                Ok(body) => {
                    if body.len() > self.max_frame {
                        return Err(Error::FrameSize(format!(
                            "received a {} byte frame, limit is {}",
                            body.len(),
                            self.max_frame
                        )));
                    }
                    Some(body)
                }
                Err(mpsc::RecvError) => None,
            },
            Inner::Tcp(stream) => read_frame(stream, self.max_frame)?,
        };
        if let Some(body) = &body {
            self.counters.messages_received += 1;
            self.counters.bytes_received += PREFIX_LEN + body.len() as u64;
        }
        Ok(body)
    }
}

/// Listening socket that yields server-side endpoints.
pub struct Listener(TcpListener);

impl Listener {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Listener> {
        let listener =
            TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind: {e}")))?;
        Ok(Listener(listener))
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.0
            .local_addr()
            .map_err(|e| Error::Transport(format!("local_addr: {e}")))
    }

    /// Blocks for the next inbound connection.
    pub fn accept(&self) -> Result<Endpoint> {
        let (stream, _) = self
            .0
            .accept()
            .map_err(|e| Error::Transport(format!("accept: {e}")))?;
        Endpoint::from_tcp(stream, Role::Server)
    }
}

/// Connects to a listening server, retrying twice with exponential backoff
/// before giving up.
pub fn connect(addr: impl ToSocketAddrs + Clone) -> Result<Endpoint> {
    let mut backoff = CONNECT_BACKOFF;
    let mut last = None;
    for attempt in 0..CONNECT_ATTEMPTS {
        if attempt > 0 {
            std::thread::sleep(backoff);
            backoff *= 2;
        }
        match TcpStream::connect(addr.clone()) {
            Ok(stream) => return Endpoint::from_tcp(stream, Role::Client),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Transport(format!(
        "connect failed after {CONNECT_ATTEMPTS} attempts: {}",
        last.expect("at least one attempt")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn empty_body_is_four_zero_bytes() {
        let mut buf = Vec::new();
        let n = write_frame(&mut buf, &[], DEFAULT_MAX_FRAME).unwrap();
        assert_eq!(n, 4);
        assert_eq!(buf, vec![0, 0, 0, 0]);
        let mut cur = Cursor::new(buf);
        assert_eq!(read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap(), Some(vec![]));
        assert_eq!(read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap(), None);
    }

    #[test]
    fn frame_adds_four_bytes_and_preserves_order() {
        let mut buf = Vec::new();
        let n = write_frame(&mut buf, &[7u8; 26], DEFAULT_MAX_FRAME).unwrap();
        assert_eq!(n, 30);
        assert_eq!(buf.len(), 30);
        write_frame(&mut buf, b"second", DEFAULT_MAX_FRAME).unwrap();
        write_frame(&mut buf, b"third", DEFAULT_MAX_FRAME).unwrap();
        let mut cur = Cursor::new(buf);
        assert_eq!(
            read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap().unwrap(),
            vec![7u8; 26]
        );
        assert_eq!(
            read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap().unwrap(),
            b"second"
        );
        assert_eq!(
            read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap().unwrap(),
            b"third"
        );
        assert_eq!(read_frame(&mut cur, DEFAULT_MAX_FRAME).unwrap(), None);
    }

    #[test]
    fn truncated_frames_are_io_errors() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello world", DEFAULT_MAX_FRAME).unwrap();
        // Cut inside the body.
        let mut cur = Cursor::new(&buf[..8]);
        assert!(matches!(
            read_frame(&mut cur, DEFAULT_MAX_FRAME),
            Err(Error::Io(_))
        ));
        // Cut inside the prefix.
        let mut cur = Cursor::new(&buf[..2]);
        assert!(matches!(
            read_frame(&mut cur, DEFAULT_MAX_FRAME),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn oversize_frames_are_refused_both_ways() {
        let mut buf = Vec::new();
        assert!(matches!(
            write_frame(&mut buf, &[0u8; 100], 99),
            Err(Error::FrameSize(_))
        ));
        let mut evil = Vec::new();
        evil.extend_from_slice(&(1_000_000u32).to_le_bytes());
        evil.extend_from_slice(&[0u8; 16]);
        let mut cur = Cursor::new(evil);
        assert!(matches!(
            read_frame(&mut cur, 1000),
            Err(Error::FrameSize(_))
        ));
    }

    #[test]
    fn in_proc_pair_counts_wire_bytes() {
        let (mut server, mut client) = Endpoint::in_proc_pair();
        assert_eq!(server.role(), Role::Server);
        assert_eq!(client.role(), Role::Client);
        server.send_message(b"broadcast").unwrap();
        let got = client.recv_message().unwrap().unwrap();
        assert_eq!(got, b"broadcast");
        client.send_message(b"reply!").unwrap();
        assert_eq!(server.recv_message().unwrap().unwrap(), b"reply!");

        assert_eq!(server.counters().bytes_sent, 13);
        assert_eq!(client.counters().bytes_received, 13);
        assert_eq!(client.counters().bytes_sent, 10);
        assert_eq!(server.counters().bytes_received, 10);
        assert_eq!(server.counters().messages_sent, 1);
        assert_eq!(server.counters().messages_received, 1);

        drop(server);
        assert!(client.recv_message().unwrap().is_none());
    }

    #[test]
    fn in_proc_respects_frame_limit() {
        let (mut server, mut client) = Endpoint::in_proc_pair();
        server.set_max_frame(8);
        assert!(matches!(
            server.send_message(&[0u8; 9]),
            Err(Error::FrameSize(_))
        ));
        client.send_message(&[0u8; 9]).unwrap();
        assert!(matches!(
            server.recv_message(),
            Err(Error::FrameSize(_))
        ));
    }

    #[test]
    fn tcp_round_trip_matches_in_proc_accounting() {
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server_thread = std::thread::spawn(move || {
            let mut ep = listener.accept().unwrap();
            ep.send_message(b"broadcast").unwrap();
            assert_eq!(ep.recv_message().unwrap().unwrap(), b"reply!");
            ep.counters()
        });
        let mut client = connect(addr).unwrap();
        assert_eq!(client.recv_message().unwrap().unwrap(), b"broadcast");
        client.send_message(b"reply!").unwrap();
        let server_counters = server_thread.join().unwrap();
        // Orderly shutdown after the server side dropped its endpoint.
        assert!(client.recv_message().unwrap().is_none());

        assert_eq!(server_counters.bytes_sent, 13);
        assert_eq!(server_counters.bytes_received, 10);
        assert_eq!(client.counters().bytes_received, 13);
        assert_eq!(client.counters().bytes_sent, 10);
    }

    #[test]
    fn tcp_mid_frame_close_is_an_error() {
        let listener = Listener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (mut stream, _) = listener.0.accept().unwrap();
            // Announce 100 bytes, deliver 3, vanish.
            stream.write_all(&100u32.to_le_bytes()).unwrap();
            stream.write_all(&[1, 2, 3]).unwrap();
        });
        let mut client = connect(addr).unwrap();
        t.join().unwrap();
        assert!(matches!(client.recv_message(), Err(Error::Io(_))));
    }

    #[test]
    fn connect_gives_up_after_retries() {
        // Bind and immediately free a port so nothing listens there.
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let start = std::time::Instant::now();
        let err = connect(addr);
        assert!(matches!(err, Err(Error::Transport(_))));
        // Two backoff sleeps: 50ms + 100ms.
        assert!(start.elapsed() >= Duration::from_millis(140));
    }
}
