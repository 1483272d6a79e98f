//! Framed message transport between the two parties, with byte metering.
//!
//! Frame layout: 1-byte type, 4-byte big-endian payload length, payload.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;

use num_bigint::BigUint;

use crate::error::TransportError;
use crate::paillier::{Ciphertext, PublicKey};

pub const FRAME_HEADER_BYTES: usize = 5;
const MAX_FRAME: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Cipher = 1,
    CipherBatch = 2,
    Plain = 3,
    Control = 4,
}

impl FrameKind {
    fn from_byte(b: u8) -> Result<Self, TransportError> {
        Ok(match b {
            1 => FrameKind::Cipher,
            2 => FrameKind::CipherBatch,
            3 => FrameKind::Plain,
            4 => FrameKind::Control,
            other => return Err(TransportError::UnknownFrameType(other)),
        })
    }

    fn name(self) -> &'static str {
        match self {
            FrameKind::Cipher => "CIPHER",
            FrameKind::CipherBatch => "CIPHER_BATCH",
            FrameKind::Plain => "PLAIN",
            FrameKind::Control => "CONTROL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        if self.payload.len() > MAX_FRAME {
            return Err(TransportError::FrameTooLarge(self.payload.len()));
        }
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.payload.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(TransportError::Malformed("short frame".into()));
        }
        let kind = FrameKind::from_byte(bytes[0])?;
        let len = u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]) as usize;
        if bytes.len() != FRAME_HEADER_BYTES + len {
            return Err(TransportError::Malformed("length field does not match frame".into()));
        }
        Ok(Frame { kind, payload: bytes[FRAME_HEADER_BYTES..].to_vec() })
    }

    /// Bytes on the wire, header included.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }
}

/// Typed protocol message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Cipher(Ciphertext),
    CipherBatch(Vec<Ciphertext>),
    Plain(Vec<BigUint>),
    Control(Vec<u8>),
}

impl Message {
    pub fn kind(&self) -> FrameKind {
        match self {
            Message::Cipher(_) => FrameKind::Cipher,
            Message::CipherBatch(_) => FrameKind::CipherBatch,
            Message::Plain(_) => FrameKind::Plain,
            Message::Control(_) => FrameKind::Control,
        }
    }

    /// Transferred units: ciphertexts or plaintext integers.
    pub fn units(&self) -> usize {
        match self {
            Message::Cipher(_) => 1,
            Message::CipherBatch(v) => v.len(),
            Message::Plain(v) => v.len(),
            Message::Control(_) => 0,
        }
    }

    pub fn to_frame(&self, pk: &PublicKey) -> Result<Frame, TransportError> {
        let payload = match self {
            Message::Cipher(c) => pk.serialize(c).map_err(|e| TransportError::Malformed(e.to_string()))?,
            Message::CipherBatch(cs) => {
                let mut out = Vec::with_capacity(cs.len() * pk.ciphertext_bytes());
                for c in cs {
                    out.extend(pk.serialize(c).map_err(|e| TransportError::Malformed(e.to_string()))?);
                }
                out
            }
            Message::Plain(xs) => {
                let mut out = Vec::new();
                for x in xs {
                    let b = if x.bits() == 0 { Vec::new() } else { x.to_bytes_be() };
                    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                    out.extend(b);
                }
                out
            }
            Message::Control(b) => b.clone(),
        };
        Ok(Frame { kind: self.kind(), payload })
    }

    pub fn from_frame(frame: &Frame, pk: &PublicKey) -> Result<Self, TransportError> {
        let width = pk.ciphertext_bytes();
        let de = |b: &[u8]| pk.deserialize(b).map_err(|e| TransportError::Malformed(e.to_string()));
        Ok(match frame.kind {
            FrameKind::Cipher => Message::Cipher(de(&frame.payload)?),
            FrameKind::CipherBatch => {
                if !frame.payload.len().is_multiple_of(width) {
                    return Err(TransportError::Malformed("batch is not a whole number of ciphertexts".into()));
                }
                Message::CipherBatch(frame.payload.chunks(width).map(de).collect::<Result<_, _>>()?)
            }
            FrameKind::Plain => {
                let mut xs = Vec::new();
                let mut p = &frame.payload[..];
                while !p.is_empty() {
                    if p.len() < 4 {
                        return Err(TransportError::Malformed("truncated integer length".into()));
                    }
                    let len = u32::from_be_bytes([p[0], p[1], p[2], p[3]]) as usize;
                    p = &p[4..];
                    if p.len() < len {
                        return Err(TransportError::Malformed("truncated integer".into()));
                    }
                    xs.push(BigUint::from_bytes_be(&p[..len]));
                    p = &p[len..];
                }
                Message::Plain(xs)
            }
            FrameKind::Control => Message::Control(frame.payload.clone()),
        })
    }

    pub fn into_ciphers(self) -> Result<Vec<Ciphertext>, TransportError> {
        match self {
            Message::Cipher(c) => Ok(vec![c]),
            Message::CipherBatch(v) => Ok(v),
            other => Err(TransportError::Unexpected { expected: "CIPHER_BATCH", got: other.kind().name() }),
        }
    }

    pub fn into_plain(self) -> Result<Vec<BigUint>, TransportError> {
        match self {
            Message::Plain(v) => Ok(v),
            other => Err(TransportError::Unexpected { expected: "PLAIN", got: other.kind().name() }),
        }
    }
}

/// A bidirectional, ordered, reliable frame pipe.
pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
}

/// In-process transport; frames travel as encoded bytes.
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn loopback_pair() -> (Loopback, Loopback) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (Loopback { tx: tx_a, rx: rx_a }, Loopback { tx: tx_b, rx: rx_b })
}

impl Transport for Loopback {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx.send(frame.encode()?).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let bytes = self.rx.recv().map_err(|_| TransportError::Closed)?;
        Frame::decode(&bytes)
    }
}

/// TCP transport. Writes go through a dedicated thread so a party can queue
/// a large batch and move on to receiving.
pub struct Socket {
    reader: TcpStream,
    tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<std::io::Result<()>>>,
}

impl Socket {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let mut write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let writer = std::thread::spawn(move || {
            for bytes in rx {
                write_half.write_all(&bytes)?;
            }
            write_half.flush()?;
            write_half.shutdown(std::net::Shutdown::Write)
        });
        Ok(Socket { reader: stream, tx: Some(tx), writer: Some(writer) })
    }
}

impl Transport for Socket {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let tx = self.tx.as_ref().ok_or(TransportError::Closed)?;
        tx.send(frame.encode()?).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let mut header = [0u8; FRAME_HEADER_BYTES];
        self.reader.read_exact(&mut header).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(e),
        })?;
        let kind = FrameKind::from_byte(header[0])?;
        let len = u32::from_be_bytes([header[1], header[2], header[3], header[4]]) as usize;
        if len > MAX_FRAME {
            return Err(TransportError::FrameTooLarge(len));
        }
        let mut payload = vec![0u8; len];
        self.reader.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(e),
        })?;
        Ok(Frame { kind, payload })
    }
}

impl Drop for Socket {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
    }
}

/// Two TCP endpoints connected over localhost.
pub fn socket_pair() -> Result<(Socket, Socket), TransportError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((Socket::new(server)?, Socket::new(client)?))
}

/// Traffic counters for one direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Meter {
    pub messages: u64,
    pub bytes: u64,
    pub units: u64,
    /// Maximal runs of consecutive messages in this direction.
    pub transmissions: u64,
}

impl Meter {
    pub fn merged(&self, other: &Meter) -> Meter {
        Meter {
            messages: self.messages + other.messages,
            bytes: self.bytes + other.bytes,
            units: self.units + other.units,
            transmissions: self.transmissions + other.transmissions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    HolderToEvaluator,
    EvaluatorToHolder,
}

/// One recorded message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub kind: FrameKind,
    pub bytes: usize,
    pub units: usize,
    pub digest: u64,
}

/// Connects the key holder and the evaluator through a real transport and
/// meters every message. Both endpoints are driven from the same thread.
pub struct Link<T: Transport> {
    holder_end: T,
    evaluator_end: T,
    pk: PublicKey,
    to_evaluator: Meter,
    to_holder: Meter,
    last: Option<Direction>,
    transcript: Option<Vec<TranscriptEntry>>,
}

impl<T: Transport> Link<T> {
    pub fn new(holder_end: T, evaluator_end: T, pk: PublicKey) -> Self {
        Link {
            holder_end,
            evaluator_end,
            pk,
            to_evaluator: Meter::default(),
            to_holder: Meter::default(),
            last: None,
            transcript: None,
        }
    }

    pub fn record_transcript(&mut self, on: bool) {
        self.transcript = if on { Some(Vec::new()) } else { None };
    }

    pub fn transcript(&self) -> Option<&[TranscriptEntry]> {
        self.transcript.as_deref()
    }

    pub fn meter(&self, d: Direction) -> Meter {
        match d {
            Direction::HolderToEvaluator => self.to_evaluator,
            Direction::EvaluatorToHolder => self.to_holder,
        }
    }

    pub fn total(&self) -> Meter {
        self.to_evaluator.merged(&self.to_holder)
    }

    /// Completed request/response exchanges.
    pub fn round_trips(&self) -> u64 {
        self.total().transmissions.div_ceil(2)
    }

    pub fn reset_meters(&mut self) {
        self.to_evaluator = Meter::default();
        self.to_holder = Meter::default();
        self.last = None;
        if let Some(t) = self.transcript.as_mut() {
            t.clear();
        }
    }

    /// Sends `msg` from the key holder and returns it as received by the evaluator.
    pub fn to_evaluator(&mut self, msg: Message) -> Result<Message, TransportError> {
        self.deliver(Direction::HolderToEvaluator, msg)
    }

    /// Sends `msg` from the evaluator and returns it as received by the key holder.
    pub fn to_holder(&mut self, msg: Message) -> Result<Message, TransportError> {
        self.deliver(Direction::EvaluatorToHolder, msg)
    }

    fn deliver(&mut self, d: Direction, msg: Message) -> Result<Message, TransportError> {
        let frame = msg.to_frame(&self.pk)?;
        let (tx, rx) = match d {
            Direction::HolderToEvaluator => (&mut self.holder_end, &mut self.evaluator_end),
            Direction::EvaluatorToHolder => (&mut self.evaluator_end, &mut self.holder_end),
        };
        tx.send(&frame)?;
        let got = rx.recv()?;
        let meter = match d {
            Direction::HolderToEvaluator => &mut self.to_evaluator,
            Direction::EvaluatorToHolder => &mut self.to_holder,
        };
        meter.messages += 1;
        meter.bytes += frame.wire_len() as u64;
        meter.units += msg.units() as u64;
        if self.last != Some(d) {
            meter.transmissions += 1;
            self.last = Some(d);
        }
        if let Some(t) = self.transcript.as_mut() {
            let mut h = DefaultHasher::new();
            got.payload.hash(&mut h);
            t.push(TranscriptEntry {
                direction: d,
                kind: got.kind,
                bytes: got.wire_len(),
                units: msg.units(),
                digest: h.finish(),
            });
        }
        Message::from_frame(&got, &self.pk)
    }
}

/// Link bandwidth in bits per second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BandwidthModel {
    bits_per_second: u64,
}

impl BandwidthModel {
    pub fn new(bits_per_second: u64) -> Result<Self, TransportError> {
        if bits_per_second == 0 {
            return Err(TransportError::ZeroBandwidth);
        }
        Ok(BandwidthModel { bits_per_second })
    }

    pub fn mbps(m: u64) -> Result<Self, TransportError> {
        Self::new(m * 1_000_000)
    }

    pub fn bits_per_second(&self) -> u64 {
        self.bits_per_second
    }
}

/// Computation time plus transfer time of `bytes` at the modelled bandwidth.
pub fn estimate_wallclock(bytes: u64, pure_seconds: f64, model: BandwidthModel) -> f64 {
    pure_seconds + (bytes as f64 * 8.0) / model.bits_per_second as f64
}
