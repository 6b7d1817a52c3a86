//! Length-prefixed binary framing between client and server.
//!
//! Every frame is `u32 payload length ‖ u8 message type ‖ payload`, all
//! integers big-endian. See `docs/wire.md` for the byte layout of each
//! message.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::database::{PrpKey, PRP_KEY_BYTES};
use crate::ggm::{PuncturedKey, SEED_BYTES};
use crate::server::ParityMatrix;

pub const FRAME_HEADER_BYTES: usize = 5;
/// Decoders refuse larger payloads instead of allocating them.
pub const MAX_PAYLOAD_BYTES: u32 = 1 << 30;

/// Bytes an answer adds around the matrix: t, √n, B and the chunk count.
pub const ANSWER_FIXED_BYTES: usize = 1 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unexpected {got:?} frame, wanted {wanted}")]
    Unexpected { got: MsgType, wanted: &'static str },
    #[error("peer reported error code {0}")]
    Remote(u16),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedFrame(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    PrpKey = 0x02,
    ChunkStream = 0x03,
    Query = 0x04,
    Answer = 0x05,
    Error = 0x06,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(value: u8) -> Result<Self, WireError> {
        Ok(match value {
            0x01 => MsgType::Hello,
            0x02 => MsgType::PrpKey,
            0x03 => MsgType::ChunkStream,
            0x04 => MsgType::Query,
            0x05 => MsgType::Answer,
            0x06 => MsgType::Error,
            other => return Err(malformed(format!("unknown message type 0x{other:02x}"))),
        })
    }
}

/// Error codes carried by [`MsgType::Error`] frames.
pub mod error_code {
    pub const MALFORMED_FRAME: u16 = 1;
    pub const MALFORMED_KEY: u16 = 2;
    pub const UNEXPECTED_MESSAGE: u16 = 3;
    pub const META_MISMATCH: u16 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    /// Size on the wire, header included.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses exactly one frame occupying all of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(malformed("short frame header"));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let msg_type = MsgType::try_from(bytes[4])?;
        if bytes.len() - FRAME_HEADER_BYTES != len {
            return Err(malformed(format!(
                "length field {len} but {} payload bytes",
                bytes.len() - FRAME_HEADER_BYTES
            )));
        }
        Ok(Self { msg_type, payload: bytes[FRAME_HEADER_BYTES..].to_vec() })
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(&self.to_bytes())?;
        out.flush()
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, WireError> {
        let mut header = [0u8; FRAME_HEADER_BYTES];
        match input.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_be_bytes(header[..4].try_into().unwrap());
        let msg_type = MsgType::try_from(header[4])?;
        if len > MAX_PAYLOAD_BYTES {
            return Err(malformed(format!("payload length {len} too large")));
        }
        let mut payload = vec![0u8; len as usize];
        input.read_exact(&mut payload)?;
        Ok(Self { msg_type, payload })
    }

    fn expect(&self, msg_type: MsgType, wanted: &'static str) -> Result<&[u8], WireError> {
        if self.msg_type == MsgType::Error && msg_type != MsgType::Error {
            return Err(WireError::Remote(decode_error(self)?));
        }
        if self.msg_type != msg_type {
            return Err(WireError::Unexpected { got: self.msg_type, wanted });
        }
        Ok(&self.payload)
    }
}

/// Cursor over a payload that turns short reads into `MalformedFrame`.
struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(malformed(format!("needed {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub n: u32,
    pub entry_size: u32,
    pub levels: u8,
}

pub fn encode_hello(hello: &Hello) -> Frame {
    let mut payload = Vec::with_capacity(9);
    payload.extend_from_slice(&hello.n.to_be_bytes());
    payload.extend_from_slice(&hello.entry_size.to_be_bytes());
    payload.push(hello.levels);
    Frame::new(MsgType::Hello, payload)
}

pub fn decode_hello(frame: &Frame) -> Result<Hello, WireError> {
    let mut r = Reader::new(frame.expect(MsgType::Hello, "Hello")?);
    let hello = Hello { n: r.u32()?, entry_size: r.u32()?, levels: r.u8()? };
    r.finish()?;
    Ok(hello)
}

pub fn encode_prp(key: &PrpKey) -> Frame {
    Frame::new(MsgType::PrpKey, key.as_bytes().to_vec())
}

pub fn decode_prp(frame: &Frame) -> Result<PrpKey, WireError> {
    let mut r = Reader::new(frame.expect(MsgType::PrpKey, "PrpKey")?);
    let key = PrpKey(r.take(PRP_KEY_BYTES)?.try_into().unwrap());
    r.finish()?;
    Ok(key)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPayload {
    pub chunk_id: u32,
    pub bytes: Vec<u8>,
}

pub fn encode_chunk_stream(chunk: &ChunkPayload) -> Frame {
    let mut payload = Vec::with_capacity(4 + chunk.bytes.len());
    payload.extend_from_slice(&chunk.chunk_id.to_be_bytes());
    payload.extend_from_slice(&chunk.bytes);
    Frame::new(MsgType::ChunkStream, payload)
}

pub fn decode_chunk_stream(frame: &Frame) -> Result<ChunkPayload, WireError> {
    let mut r = Reader::new(frame.expect(MsgType::ChunkStream, "ChunkStream")?);
    let chunk_id = r.u32()?;
    Ok(ChunkPayload { chunk_id, bytes: r.buf.to_vec() })
}

pub fn encode_query(key: &PuncturedKey) -> Frame {
    let mut payload = Vec::with_capacity(1 + key.subkeys().len() * SEED_BYTES);
    payload.push(key.levels() as u8);
    payload.extend_from_slice(&key.to_bytes());
    Frame::new(MsgType::Query, payload)
}

pub fn decode_query(frame: &Frame) -> Result<PuncturedKey, WireError> {
    let mut r = Reader::new(frame.expect(MsgType::Query, "Query")?);
    let levels = r.u8()? as usize;
    let key = PuncturedKey::from_bytes(r.take(levels * SEED_BYTES)?).expect("exact length");
    r.finish()?;
    Ok(key)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerPayload {
    pub matrix: ParityMatrix,
    /// Empty, or the two pipelined chunks.
    pub chunks: Vec<ChunkPayload>,
}

pub fn encode_answer(answer: &AnswerPayload) -> Frame {
    let m = &answer.matrix;
    let chunk_bytes: usize = answer.chunks.iter().map(|c| 4 + c.bytes.len()).sum();
    let mut payload = Vec::with_capacity(ANSWER_FIXED_BYTES + m.as_bytes().len() + chunk_bytes);
    payload.push(m.levels() as u8);
    payload.extend_from_slice(&m.columns().to_be_bytes());
    payload.extend_from_slice(&(m.entry_size() as u32).to_be_bytes());
    payload.extend_from_slice(m.as_bytes());
    payload.push(answer.chunks.len() as u8);
    for chunk in &answer.chunks {
        payload.extend_from_slice(&chunk.chunk_id.to_be_bytes());
        payload.extend_from_slice(&chunk.bytes);
    }
    Frame::new(MsgType::Answer, payload)
}

pub fn decode_answer(frame: &Frame) -> Result<AnswerPayload, WireError> {
    let mut r = Reader::new(frame.expect(MsgType::Answer, "Answer")?);
    let levels = r.u8()? as u32;
    let columns = r.u32()?;
    let entry_size = r.u32()? as usize;
    if levels == 0 || levels > 15 || columns != 1 << levels || entry_size == 0 {
        return Err(malformed(format!("bad matrix shape t={levels} √n={columns} B={entry_size}")));
    }
    let cells = (levels as usize + 1) * columns as usize;
    let matrix_len = cells
        .checked_mul(entry_size)
        .filter(|&len| len <= MAX_PAYLOAD_BYTES as usize)
        .ok_or_else(|| malformed("matrix too large"))?;
    let matrix = ParityMatrix::from_bytes(levels, entry_size, r.take(matrix_len)?.to_vec())
        .expect("length checked");
    let count = r.u8()?;
    if count != 0 && count != 2 {
        return Err(malformed(format!("chunk count {count} is neither 0 nor 2")));
    }
    let chunk_len = columns as usize * entry_size;
    let chunks = (0..count)
        .map(|_| {
            let chunk_id = r.u32()?;
            Ok(ChunkPayload { chunk_id, bytes: r.take(chunk_len)?.to_vec() })
        })
        .collect::<Result<Vec<_>, WireError>>()?;
    r.finish()?;
    Ok(AnswerPayload { matrix, chunks })
}

pub fn encode_error(code: u16) -> Frame {
    Frame::new(MsgType::Error, code.to_be_bytes().to_vec())
}

pub fn decode_error(frame: &Frame) -> Result<u16, WireError> {
    if frame.msg_type != MsgType::Error {
        return Err(WireError::Unexpected { got: frame.msg_type, wanted: "Error" });
    }
    let mut r = Reader::new(&frame.payload);
    let code = r.u16()?;
    r.finish()?;
    Ok(code)
}

/// Direction of a frame as seen from the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub direction: Direction,
    pub msg_type: MsgType,
    pub payload_len: usize,
}

/// Captured frame sizes, for bandwidth accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLog {
    pub records: Vec<FrameRecord>,
}

impl TrafficLog {
    pub fn record(&mut self, direction: Direction, frame: &Frame) {
        self.records.push(FrameRecord {
            direction,
            msg_type: frame.msg_type,
            payload_len: frame.payload.len(),
        });
    }

    pub fn bytes(&self, direction: Direction) -> usize {
        self.records
            .iter()
            .filter(|r| r.direction == direction)
            .map(|r| r.payload_len + FRAME_HEADER_BYTES)
            .sum()
    }

    pub fn count(&self, msg_type: MsgType) -> usize {
        self.records.iter().filter(|r| r.msg_type == msg_type).count()
    }

    pub fn of_type(&self, msg_type: MsgType) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.msg_type == msg_type)
    }
}

/// A bidirectional frame channel, seen from the client side.
pub trait Transport {
    fn send(&mut self, frame: &Frame) -> Result<(), WireError>;
    fn recv(&mut self) -> Result<Frame, WireError>;
    fn traffic(&self) -> &TrafficLog;
}

/// Frames over any byte stream, e.g. a `TcpStream`.
pub struct StreamTransport<S> {
    stream: S,
    traffic: TrafficLog,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, traffic: TrafficLog::default() }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        self.traffic.record(Direction::Upload, frame);
        frame.write_to(&mut self.stream)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, WireError> {
        let frame = Frame::read_from(&mut self.stream)?;
        self.traffic.record(Direction::Download, &frame);
        Ok(frame)
    }

    fn traffic(&self) -> &TrafficLog {
        &self.traffic
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggm::Seed;
    use proptest::prelude::*;

    fn key(levels: usize) -> PuncturedKey {
        PuncturedKey::new((0..levels).map(|i| Seed::from_bytes([i as u8; 16])).collect())
    }

    #[test]
    fn query_payload_sizes() {
        let f = encode_query(&key(6));
        assert_eq!(f.payload.len(), 97);
        assert_eq!(decode_query(&f).unwrap(), key(6));

        let zero = PuncturedKey::new(vec![Seed::default()]);
        let f = encode_query(&zero);
        let mut expected = vec![1u8];
        expected.extend_from_slice(&[0u8; 16]);
        assert_eq!(f.payload, expected);
    }

    #[test]
    fn answer_layout() {
        let matrix = ParityMatrix::zeroed(6, 32);
        let f = encode_answer(&AnswerPayload { matrix: matrix.clone(), chunks: vec![] });
        assert_eq!(f.payload.len(), ANSWER_FIXED_BYTES + 7 * 64 * 32);
        assert_eq!(&f.payload[..9], &[6, 0, 0, 0, 64, 0, 0, 0, 32]);
        assert!(f.payload[9..9 + 14336].iter().all(|&b| b == 0));
        assert_eq!(decode_answer(&f).unwrap().matrix, matrix);

        let chunks = vec![
            ChunkPayload { chunk_id: 4, bytes: vec![1; 64 * 32] },
            ChunkPayload { chunk_id: 5, bytes: vec![2; 64 * 32] },
        ];
        let answer = AnswerPayload { matrix, chunks };
        assert_eq!(decode_answer(&encode_answer(&answer)).unwrap(), answer);
    }

    #[test]
    fn control_messages() {
        let hello = Hello { n: 64, entry_size: 1, levels: 3 };
        let f = encode_hello(&hello);
        assert_eq!(f.payload.len(), 9);
        assert_eq!(decode_hello(&f).unwrap(), hello);

        let chunk = ChunkPayload { chunk_id: 7, bytes: vec![9, 8, 7] };
        assert_eq!(decode_chunk_stream(&encode_chunk_stream(&chunk)).unwrap(), chunk);

        let prp = PrpKey([3; 16]);
        assert_eq!(decode_prp(&encode_prp(&prp)).unwrap(), prp);
        assert_eq!(decode_error(&encode_error(258)).unwrap(), 258);
    }

    #[test]
    fn unknown_type_is_malformed() {
        let bytes = [0, 0, 0, 0, 0x7f];
        assert!(matches!(Frame::from_bytes(&bytes), Err(WireError::MalformedFrame(_))));
        assert!(matches!(Frame::read_from(&mut &bytes[..]), Err(WireError::MalformedFrame(_))));
    }

    #[test]
    fn error_frame_surfaces_as_remote() {
        let err = decode_answer(&encode_error(error_code::MALFORMED_KEY)).unwrap_err();
        assert!(matches!(err, WireError::Remote(2)));
        let err = decode_hello(&encode_prp(&PrpKey([0; 16]))).unwrap_err();
        assert!(matches!(err, WireError::Unexpected { got: MsgType::PrpKey, .. }));
    }

    #[test]
    fn stream_transport_frames_bytes() {
        let mut buf = Vec::new();
        encode_hello(&Hello { n: 16, entry_size: 2, levels: 2 }).write_to(&mut buf).unwrap();
        encode_error(1).write_to(&mut buf).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(Frame::read_from(&mut cursor).unwrap().msg_type, MsgType::Hello);
        assert_eq!(Frame::read_from(&mut cursor).unwrap().msg_type, MsgType::Error);
        assert!(matches!(Frame::read_from(&mut cursor), Err(WireError::Closed)));
    }

    proptest! {
        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
            if let Ok(frame) = Frame::from_bytes(&bytes) {
                let _ = decode_hello(&frame);
                let _ = decode_prp(&frame);
                let _ = decode_chunk_stream(&frame);
                let _ = decode_query(&frame);
                let _ = decode_answer(&frame);
                let _ = decode_error(&frame);
            }
            for msg_type in [MsgType::Hello, MsgType::PrpKey, MsgType::ChunkStream,
                             MsgType::Query, MsgType::Answer, MsgType::Error] {
                let frame = Frame::new(msg_type, bytes.clone());
                let _ = decode_hello(&frame);
                let _ = decode_prp(&frame);
                let _ = decode_chunk_stream(&frame);
                let _ = decode_query(&frame);
                let _ = decode_answer(&frame);
                let _ = decode_error(&frame);
            }
        }

        #[test]
        fn query_round_trip(levels in 1usize..16, seed_bytes in any::<[u8; 16]>()) {
            let pk = PuncturedKey::new((0..levels).map(|i| {
                let mut b = seed_bytes;
                b[0] ^= i as u8;
                Seed::from_bytes(b)
            }).collect());
            let frame = encode_query(&pk);
            let reparsed = Frame::from_bytes(&frame.to_bytes()).unwrap();
            prop_assert_eq!(decode_query(&reparsed).unwrap(), pk);
        }
    }
}
