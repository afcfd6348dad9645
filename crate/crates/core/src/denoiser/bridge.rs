//! Length-prefixed binary bridge to an out-of-process denoiser.
//!
//! Frame: `u32` body length, then the body
//!
//! ```text
//! version u16 | kind u8 | request-id u64 | t u32 | c u16 | w u16 | h u16
//! | label-len u16 | label (UTF-8) | c·w·h × f32
//! ```
//!
//! All integers and floats are little-endian. A reply echoes the request id
//! and carries ε in the payload; an error frame carries its message in the
//! label field and an empty grid.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{ConditionToken, Denoiser, NoiseQuery};
use crate::error::{BridgeError, Error, Result};
use crate::grid::{Grid, Shape};
use crate::schedule::NoiseSchedule;

pub const PROTOCOL_VERSION: u16 = 1;
const MAX_FRAME: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Request = 1,
    Reply = 2,
    Error = 3,
}

impl TryFrom<u8> for MessageKind {
    type Error = BridgeError;
    fn try_from(v: u8) -> Result<Self, BridgeError> {
        match v {
            1 => Ok(MessageKind::Request),
            2 => Ok(MessageKind::Reply),
            3 => Ok(MessageKind::Error),
            other => Err(BridgeError::Protocol(format!("unknown message kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub version: u16,
    pub kind: MessageKind,
    pub request_id: u64,
    pub t: u32,
    pub label: String,
    pub grid: Grid,
}

impl Message {
    pub fn request(request_id: u64, t: u32, label: &str, grid: Grid) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Request,
            request_id,
            t,
            label: label.to_string(),
            grid,
        }
    }

    pub fn reply(request_id: u64, t: u32, grid: Grid) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Reply,
            request_id,
            t,
            label: String::new(),
            grid,
        }
    }

    pub fn error(request_id: u64, message: &str) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Error,
            request_id,
            t: 0,
            label: message.to_string(),
            grid: Grid::zeros(Shape::new(0, 0, 0)),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, BridgeError> {
        let s = self.grid.shape();
        let dim = |v: usize| {
            u16::try_from(v).map_err(|_| BridgeError::Protocol(format!("dimension {v} exceeds u16")))
        };
        let label = self.label.as_bytes();
        let label_len = u16::try_from(label.len())
            .map_err(|_| BridgeError::Protocol("token label longer than 65535 bytes".into()))?;
        let body_len = 2 + 1 + 8 + 4 + 6 + 2 + label.len() + s.len() * 4;
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&dim(s.channels)?.to_le_bytes());
        out.extend_from_slice(&dim(s.width)?.to_le_bytes());
        out.extend_from_slice(&dim(s.height)?.to_le_bytes());
        out.extend_from_slice(&label_len.to_le_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&self.grid.to_f32_le_bytes());
        Ok(out)
    }

    /// Decodes a frame body (without the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self, BridgeError> {
        let mut cur = Cursor { buf: body, pos: 0 };
        let version = u16::from_le_bytes(cur.take()?);
        if version != PROTOCOL_VERSION {
            return Err(BridgeError::Version {
                expected: PROTOCOL_VERSION,
                got: version,
            });
        }
        let kind = MessageKind::try_from(cur.take::<1>()?[0])?;
        let request_id = u64::from_le_bytes(cur.take()?);
        let t = u32::from_le_bytes(cur.take()?);
        let c = u16::from_le_bytes(cur.take()?) as usize;
        let w = u16::from_le_bytes(cur.take()?) as usize;
        let h = u16::from_le_bytes(cur.take()?) as usize;
        let label_len = u16::from_le_bytes(cur.take()?) as usize;
        let label = std::str::from_utf8(cur.slice(label_len)?)
            .map_err(|_| BridgeError::Protocol("token label is not UTF-8".into()))?
            .to_string();
        let shape = Shape::new(c, w, h);
        let payload = cur.slice(shape.len() * 4)?;
        if cur.pos != body.len() {
            return Err(BridgeError::Protocol(format!(
                "{} trailing bytes after payload",
                body.len() - cur.pos
            )));
        }
        let grid = Grid::from_f32_le_bytes(shape, payload).map_err(|e| BridgeError::Protocol(e.to_string()))?;
        Ok(Self {
            version,
            kind,
            request_id,
            t,
            label,
            grid,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], BridgeError> {
        if self.pos + n > self.buf.len() {
            return Err(BridgeError::Protocol("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], BridgeError> {
        Ok(self.slice(N)?.try_into().expect("slice has length N"))
    }
}

fn io_err(e: io::Error, timeout: Duration) -> BridgeError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout(timeout),
        io::ErrorKind::UnexpectedEof => BridgeError::Protocol("connection closed mid-frame".into()),
        _ => BridgeError::Io(e),
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), BridgeError> {
    w.write_all(&msg.encode()?)?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>, BridgeError> {
    let mut len = [0u8; 4];
    match r.read(&mut len[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(BridgeError::Io(e)),
    }
    r.read_exact(&mut len[1..])?;
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(BridgeError::Protocol(format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Message::decode(&body).map(Some)
}

/// Client side of the bridge. Connections are pooled; a batch is pipelined
/// over one connection and replies are matched by request id.
pub struct RemoteDenoiser {
    endpoint: String,
    timeout: Duration,
    next_id: AtomicU64,
    pool: Mutex<Vec<TcpStream>>,
}

impl RemoteDenoiser {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        if endpoint.is_empty() {
            return Err(Error::param("empty bridge endpoint"));
        }
        Ok(Self {
            endpoint: endpoint.to_string(),
            timeout,
            next_id: AtomicU64::new(1),
            pool: Mutex::new(Vec::new()),
        })
    }

    fn connect(&self) -> Result<TcpStream, BridgeError> {
        if let Some(s) = self.pool.lock().expect("pool lock").pop() {
            return Ok(s);
        }
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| BridgeError::Protocol(format!("cannot resolve {}", self.endpoint)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| io_err(e, self.timeout))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }

    fn roundtrip(&self, queries: &[NoiseQuery<'_>]) -> Result<Vec<Grid>, BridgeError> {
        let stream = self.connect()?;
        let first = self.next_id.fetch_add(queries.len() as u64, Ordering::Relaxed);
        let mut requests = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            let t = u32::try_from(q.t).map_err(|_| BridgeError::Protocol("timestep exceeds u32".into()))?;
            let label = if q.token.null { "" } else { q.token.label.as_str() };
            requests.push(Message::request(first + i as u64, t, label, q.x_t.clone()));
        }
        let expected: HashMap<u64, (usize, Shape)> = requests
            .iter()
            .enumerate()
            .map(|(i, m)| (m.request_id, (i, m.grid.shape())))
            .collect();

        let write_half = stream.try_clone()?;
        let timeout = self.timeout;
        let replies = thread::scope(|scope| {
            let writer = scope.spawn(move || -> Result<(), BridgeError> {
                let mut w = BufWriter::new(write_half);
                for m in &requests {
                    write_message(&mut w, m).map_err(|e| match e {
                        BridgeError::Io(e) => io_err(e, timeout),
                        other => other,
                    })?;
                }
                w.flush().map_err(|e| io_err(e, timeout))
            });
            let mut reader = BufReader::new(&stream);
            let mut out: Vec<Option<Grid>> = vec![None; queries.len()];
            let mut result = Ok(());
            for _ in 0..queries.len() {
                let msg = match read_message(&mut reader) {
                    Ok(Some(m)) => m,
                    Ok(None) => {
                        result = Err(BridgeError::Protocol("bridge closed the connection".into()));
                        break;
                    }
                    Err(BridgeError::Io(e)) => {
                        result = Err(io_err(e, timeout));
                        break;
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                };
                if msg.kind == MessageKind::Error && !expected.contains_key(&msg.request_id) {
                    result = Err(BridgeError::Remote(msg.label));
                    break;
                }
                let Some(&(slot, shape)) = expected.get(&msg.request_id) else {
                    result = Err(BridgeError::Protocol(format!("reply for unknown request {}", msg.request_id)));
                    break;
                };
                match msg.kind {
                    MessageKind::Reply => {}
                    MessageKind::Error => {
                        result = Err(BridgeError::Remote(msg.label));
                        break;
                    }
                    MessageKind::Request => {
                        result = Err(BridgeError::Protocol("peer sent a request as a reply".into()));
                        break;
                    }
                }
                if msg.grid.shape() != shape {
                    result = Err(BridgeError::Protocol(format!(
                        "reply shape {} does not match request shape {shape}",
                        msg.grid.shape()
                    )));
                    break;
                }
                if out[slot].replace(msg.grid).is_some() {
                    result = Err(BridgeError::Protocol(format!("duplicate reply {}", msg.request_id)));
                    break;
                }
            }
            if result.is_err() {
                // unblock the writer if it is stuck on a full socket
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
            let written = writer.join().expect("writer thread panicked");
            result?;
            written?;
            Ok::<_, BridgeError>(out.into_iter().map(|g| g.expect("all slots filled")).collect())
        })?;
        self.pool.lock().expect("pool lock").push(stream);
        Ok(replies)
    }
}

impl Denoiser for RemoteDenoiser {
    fn name(&self) -> &str {
        "remote"
    }

    fn predict_noise(&self, x_t: &Grid, t: usize, token: &ConditionToken, s: &NoiseSchedule) -> Result<Grid> {
        let mut out = self.predict_batch(&[NoiseQuery { x_t, t, token }], s)?;
        Ok(out.remove(0))
    }

    fn predict_batch(&self, queries: &[NoiseQuery<'_>], _s: &NoiseSchedule) -> Result<Vec<Grid>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.roundtrip(queries)?)
    }
}

/// Hosts a denoiser behind the bridge protocol, one thread per connection.
pub struct BridgeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl BridgeServer {
    pub fn spawn(addr: impl ToSocketAddrs, denoiser: Arc<dyn Denoiser>, schedule: NoiseSchedule) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let schedule = Arc::new(schedule);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let d = denoiser.clone();
                let s = schedule.clone();
                thread::spawn(move || {
                    let _ = serve_connection(conn, d.as_ref(), &s);
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

fn serve_connection(conn: TcpStream, d: &dyn Denoiser, s: &NoiseSchedule) -> Result<(), BridgeError> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut writer = BufWriter::new(conn);
    loop {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e @ (BridgeError::Version { .. } | BridgeError::Protocol(_))) => {
                write_message(&mut writer, &Message::error(0, &e.to_string()))?;
                writer.flush()?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let reply = if msg.kind != MessageKind::Request {
            Message::error(msg.request_id, "expected a request frame")
        } else {
            let token = if msg.label.is_empty() {
                ConditionToken::null()
            } else {
                ConditionToken::new(0, msg.label.clone())
            };
            match d.predict_noise(&msg.grid, msg.t as usize, &token, s) {
                Ok(eps) => Message::reply(msg.request_id, msg.t, eps),
                Err(e) => Message::error(msg.request_id, &e.to_string()),
            }
        };
        write_message(&mut writer, &reply)?;
        writer.flush()?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let g = Grid::from_vec(Shape::new(1, 2, 1), vec![1.0, -2.0]).unwrap();
        let bytes = Message::request(0x0102, 7, "ab", g).encode().unwrap();
        let body_len = 2 + 1 + 8 + 4 + 6 + 2 + 2 + 8;
        assert_eq!(&bytes[..4], &(body_len as u32).to_le_bytes());
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..15], &0x0102u64.to_le_bytes());
        assert_eq!(&bytes[15..19], &7u32.to_le_bytes());
        assert_eq!(&bytes[19..25], &[1, 0, 2, 0, 1, 0]);
        assert_eq!(&bytes[25..27], &[2, 0]);
        assert_eq!(&bytes[27..29], b"ab");
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[33..37], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn decode_rejects_bad_frames() {
        let g = Grid::zeros(Shape::new(1, 1, 1));
        let mut bytes = Message::reply(1, 1, g).encode().unwrap();
        bytes[4] = 9;
        assert!(matches!(Message::decode(&bytes[4..]), Err(BridgeError::Version { got: 9, .. })));
        bytes[4] = 1;
        assert!(matches!(Message::decode(&bytes[4..bytes.len() - 1]), Err(BridgeError::Protocol(_))));
        bytes[6] = 42;
        assert!(matches!(Message::decode(&bytes[4..]), Err(BridgeError::Protocol(_))));
    }

    proptest! {
        #[test]
        fn frames_roundtrip(id in any::<u64>(), t in any::<u32>(), label in "[a-z ,]{0,20}", vals in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let g = Grid::from_vec(Shape::new(2, 3, 1), vals).unwrap();
            let msg = Message::request(id, t, &label, g.quantized_f32());
            let bytes = msg.encode().unwrap();
            let mut r = &bytes[..];
            let back = read_message(&mut r).unwrap().unwrap();
            prop_assert_eq!(back, msg);
            prop_assert!(read_message(&mut r).unwrap().is_none());
        }
    }
}
