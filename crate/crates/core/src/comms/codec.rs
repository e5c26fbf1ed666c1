//! Length-prefixed little-endian framing.
//!
//! ```text
//! u32 payload_len | u8 version | u8 type | u8 flags (0) | u8 ttl |
//! u16 sender | u32 round | u128 msg_id | payload
//! ```
//!
//! PARAMS payloads are `u32 count` followed by `count` f32 values; the 64-bit
//! working precision is rounded to 32 bits on the wire.

use std::io::Read;

use super::{CommsError, Message, MsgType, PROTOCOL_VERSION};
use crate::NodeId;

pub const FRAME_PREFIX: usize = 4;
pub const HEADER_LEN: usize = 1 + 1 + 1 + 1 + 2 + 4 + 16;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

pub fn encode(msg: &Message) -> Result<Vec<u8>, CommsError> {
    if msg.payload.len() >= MAX_PAYLOAD {
        return Err(CommsError::PayloadTooLarge(msg.payload.len()));
    }
    let mut out = Vec::with_capacity(msg.frame_len());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    out.push(msg.version);
    out.push(msg.msg_type.code());
    out.push(0);
    out.push(msg.ttl);
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.msg_id.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// Decodes one frame from the front of `buf`, returning it and the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), CommsError> {
    if buf.len() < FRAME_PREFIX + HEADER_LEN {
        return Err(CommsError::Truncated { needed: FRAME_PREFIX + HEADER_LEN, available: buf.len() });
    }
    let payload_len = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) as usize;
    if payload_len >= MAX_PAYLOAD {
        return Err(CommsError::PayloadTooLarge(payload_len));
    }
    let total = FRAME_PREFIX + HEADER_LEN + payload_len;
    if buf.len() < total {
        return Err(CommsError::Truncated { needed: total, available: buf.len() });
    }
    let version = buf[4];
    if version != PROTOCOL_VERSION {
        return Err(CommsError::VersionMismatch { found: version, expected: PROTOCOL_VERSION });
    }
    let msg_type = MsgType::from_code(buf[5])?;
    let ttl = buf[7];
    let sender = NodeId::from_le_bytes(buf[8..10].try_into().expect("2 bytes"));
    let round = u32::from_le_bytes(buf[10..14].try_into().expect("4 bytes"));
    let msg_id = u128::from_le_bytes(buf[14..30].try_into().expect("16 bytes"));
    let payload = buf[30..total].to_vec();
    Ok((Message { version, msg_type, sender, round, msg_id, ttl, payload }, total))
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Message, CommsError> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(CommsError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Reads one complete frame (prefix included) from a byte stream.
pub fn read_frame(reader: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut prefix = [0u8; FRAME_PREFIX];
    reader.read_exact(&mut prefix)?;
    let payload_len = u32::from_le_bytes(prefix) as usize;
    if payload_len >= MAX_PAYLOAD {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "oversized frame"));
    }
    let mut frame = vec![0u8; FRAME_PREFIX + HEADER_LEN + payload_len];
    frame[..FRAME_PREFIX].copy_from_slice(&prefix);
    reader.read_exact(&mut frame[FRAME_PREFIX..])?;
    Ok(frame)
}

pub fn encode_params(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_params(payload: &[u8]) -> Result<Vec<f64>, CommsError> {
    if payload.len() < 4 {
        return Err(CommsError::BadPayload("PARAMS payload shorter than its count".into()));
    }
    let count = u32::from_le_bytes(payload[0..4].try_into().expect("4 bytes")) as usize;
    let body = &payload[4..];
    if body.len() != 4 * count {
        return Err(CommsError::BadPayload(format!("PARAMS declares {count} values but carries {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect())
}

/// CONNECT_TO payload: `"<id> <address>"`. When `id` is the message sender it
/// is a handshake; otherwise it asks the receiver to connect to that node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectTo {
    pub peer: NodeId,
    pub address: String,
}

impl ConnectTo {
    pub fn encode(&self) -> Vec<u8> {
        format!("{} {}", self.peer, self.address).into_bytes()
    }

    pub fn decode(payload: &[u8]) -> Result<Self, CommsError> {
        let text = std::str::from_utf8(payload).map_err(|e| CommsError::BadPayload(e.to_string()))?;
        let (id, address) = text
            .split_once(' ')
            .ok_or_else(|| CommsError::BadPayload("CONNECT_TO needs `<id> <address>`".into()))?;
        let peer = id.parse().map_err(|_| CommsError::BadPayload(format!("bad node id `{id}`")))?;
        Ok(Self { peer, address: address.to_string() })
    }
}

/// MODELS_AGGREGATED payload: the aggregator's choice of next leader (SDFL)
/// and the ids whose parameters went into the aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelsAggregated {
    pub next_leader: Option<NodeId>,
    pub contributors: Vec<NodeId>,
}

impl ModelsAggregated {
    const NO_LEADER: NodeId = NodeId::MAX;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 * self.contributors.len());
        out.extend_from_slice(&self.next_leader.unwrap_or(Self::NO_LEADER).to_le_bytes());
        out.extend_from_slice(&(self.contributors.len() as u16).to_le_bytes());
        for id in &self.contributors {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, CommsError> {
        if payload.len() < 4 {
            return Err(CommsError::BadPayload("MODELS_AGGREGATED payload too short".into()));
        }
        let leader = NodeId::from_le_bytes([payload[0], payload[1]]);
        let count = u16::from_le_bytes([payload[2], payload[3]]) as usize;
        let body = &payload[4..];
        if body.len() != 2 * count {
            return Err(CommsError::BadPayload("MODELS_AGGREGATED contributor list length".into()));
        }
        Ok(Self {
            next_leader: (leader != Self::NO_LEADER).then_some(leader),
            contributors: body.chunks_exact(2).map(|c| NodeId::from_le_bytes([c[0], c[1]])).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beat() -> Message {
        Message::new(MsgType::Beat, 3, 0, 0xDEAD_BEEF, 0, Vec::new())
    }

    #[test]
    fn header_layout() {
        let frame = encode(&beat()).unwrap();
        assert_eq!(HEADER_LEN, 26);
        assert_eq!(frame.len(), FRAME_PREFIX + HEADER_LEN);
        assert_eq!(&frame[..4], &[0, 0, 0, 0]);
        assert_eq!(frame[4], PROTOCOL_VERSION);
        assert_eq!(frame[5], MsgType::Beat.code());
        assert_eq!(frame[6], 0);
        assert_eq!(&frame[8..10], &[3, 0]);
    }

    #[test]
    fn params_payload_size() {
        let payload = encode_params(&[0.5; 10]);
        assert_eq!(payload.len(), 4 + 40);
        assert_eq!(decode_params(&payload).unwrap(), vec![0.5; 10]);
        assert!(decode_params(&payload[..7]).is_err());
    }

    #[test]
    fn params_precision_is_f32() {
        let v = [0.1f64, 1e-3, -7.25];
        let back = decode_params(&encode_params(&v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(*b, f64::from(*a as f32));
            assert!((a - b).abs() <= a.abs() * f64::from(f32::EPSILON));
        }
    }

    #[test]
    fn every_type_round_trips() {
        for (i, t) in MsgType::ALL.into_iter().enumerate() {
            let msg = Message::new(t, i as NodeId, 7 * i as u32, u128::MAX - i as u128, 5, vec![i as u8; i]);
            assert_eq!(decode(&encode(&msg).unwrap()).unwrap(), msg);
        }
    }

    #[test]
    fn malformed_frames() {
        let frame = encode(&Message::new(MsgType::Role, 1, 2, 3, 0, vec![1])).unwrap();
        assert!(matches!(decode(&frame[..frame.len() - 1]), Err(CommsError::Truncated { .. })));
        let mut bad_type = frame.clone();
        bad_type[5] = 255;
        assert_eq!(decode(&bad_type), Err(CommsError::UnknownType(255)));
        let mut bad_version = frame.clone();
        bad_version[4] = 9;
        assert_eq!(decode(&bad_version), Err(CommsError::VersionMismatch { found: 9, expected: PROTOCOL_VERSION }));
    }

    #[test]
    fn oversize_payload_is_refused() {
        let msg = Message::new(MsgType::Metrics, 0, 0, 0, 0, vec![0; MAX_PAYLOAD]);
        assert_eq!(encode(&msg), Err(CommsError::PayloadTooLarge(MAX_PAYLOAD)));
    }

    #[test]
    fn forwarding_classes() {
        let forwarding: Vec<MsgType> = MsgType::ALL.into_iter().filter(|t| t.is_forwarding()).collect();
        assert_eq!(
            forwarding,
            vec![
                MsgType::StartLearning,
                MsgType::StopLearning,
                MsgType::Params,
                MsgType::Stop,
                MsgType::ModelsReady,
                MsgType::ModelsAggregated
            ]
        );
    }

    #[test]
    fn typed_payloads() {
        let c = ConnectTo { peer: 4, address: "127.0.0.1:9004".into() };
        assert_eq!(ConnectTo::decode(&c.encode()).unwrap(), c);
        let m = ModelsAggregated { next_leader: Some(2), contributors: vec![0, 1, 3] };
        assert_eq!(ModelsAggregated::decode(&m.encode()).unwrap(), m);
        let none = ModelsAggregated { next_leader: None, contributors: vec![] };
        assert_eq!(ModelsAggregated::decode(&none.encode()).unwrap(), none);
    }
}
