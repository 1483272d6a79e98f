use std::io;

use thiserror::Error;

/// Errors raised by the Paillier layer.
#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported key size {0} bits (must be even and at least 64)")]
    UnsupportedKeySize(u32),
    #[error("plaintext out of range: must be below the public modulus")]
    PlaintextRange,
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("ciphertext belongs to a different key")]
    KeyMismatch,
    #[error("serialized ciphertext has {got} bytes, expected {expected}")]
    BadCiphertextLength { expected: usize, got: usize },
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Errors raised by fixed-point encoding and slot packing.
#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("value {value} does not fit the modulus at level {level}")]
    Overflow { value: f64, level: u32 },
    #[error("value is not finite")]
    NotFinite,
    #[error("invalid encoding parameters: {0}")]
    InvalidParams(String),
    #[error("slot {slot} overflows its capacity")]
    SlotOverflow { slot: usize },
    #[error("too many values for layout: {got} > {slots} slots")]
    TooManyValues { got: usize, slots: usize },
    #[error("cannot pack: {0}")]
    CannotPack(String),
}

/// Errors raised while building or transforming circuits.
#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("circuit is empty")]
    Empty,
    #[error("gate {gate} has {got} inputs, expected {expected}")]
    Arity { gate: usize, expected: usize, got: usize },
    #[error("gate {gate} references gate {input} which is not earlier in topological order")]
    NotTopological { gate: usize, input: usize },
    #[error("gate {0} has no consumer but is not the output")]
    DanglingGate(usize),
    #[error("variable {0} is owned by both parties")]
    SharedVariable(u64),
    #[error("variable {0} has no assigned value")]
    MissingVariable(u64),
    #[error("wire list length {wires} does not match gate count {gates}")]
    WireCount { gates: usize, wires: usize },
}

/// Errors raised by the transport layer.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed")]
    Closed,
    #[error("frame too large: {0} bytes")]
    FrameTooLarge(usize),
    #[error("unknown frame type {0}")]
    UnknownFrameType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Errors raised by the two-party protocols.
#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("missing variable {0} in store")]
    MissingVariable(u64),
    #[error("variable {0} has the wrong kind for this operation")]
    WrongKind(u64),
    #[error("level error: {0}")]
    Level(String),
    #[error("operand case does not match the operands")]
    CaseMismatch,
    #[error("mask {0} used more than once")]
    MaskReuse(u64),
    #[error("mask range too small: {0}")]
    MaskMargin(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("gate {0} combines two operands of the same party; run local_compute first")]
    NotCompacted(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Errors raised by data loading and evaluation.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("duplicate rating for user {user} and item {item} at line {line}")]
    Duplicate { user: String, item: String, line: usize },
    #[error("empty evaluation set")]
    EmptySet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Errors raised by gradient aggregation.
#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("threshold must be at least 2, got {0}")]
    Threshold(usize),
    #[error("contributions cover different item sets")]
    MixedItems,
    #[error("contribution layout or level does not match pending sum for item {0}")]
    Mismatch(usize),
    #[error("no contributions")]
    Empty,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Errors raised by the training driver and benchmarks.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: non-finite {what}")]
    Diverged { epoch: usize, what: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}
