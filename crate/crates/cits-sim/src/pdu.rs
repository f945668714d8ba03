//! Bit-exact PDU wire codec and the hybrid-communication multiplexer that
//! fans one message out over one or more interface-specific frames.
//!
//! Wire layout (big-endian):
//!
//! ```text
//! magic       4 bytes  ASCII "CITS"
//! version     u8       1
//! interface   u8       Mqtt=1, ItsG5=2, InternetIpv6=3, Snmpv3=4
//! msg_type    u16
//! source      u32      node index (see IdTable)
//! dest        u32      node index
//! sequence    u32
//! payload_len u16
//! payload     payload_len bytes
//! crc         u32      CRC-32 (IEEE) over all preceding bytes
//! ```
//!
//! All operations here are pure and reentrant.

use std::collections::{BTreeMap, BTreeSet};

use crate::topology::{ProtocolKind, Topology};

pub const MAGIC: [u8; 4] = *b"CITS";
pub const PDU_VERSION: u8 = 1;
/// Fixed header length in bytes (everything before the payload).
pub const HEADER_LEN: usize = 22;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 65_535;

const fn build_crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

const CRC32_TABLE: [u32; 256] = build_crc32_table();

/// CRC-32 with the IEEE 802.3 polynomial (reflected, init/xorout all-ones).
pub fn crc32_ieee(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        let idx = ((crc ^ byte as u32) & 0xFF) as usize;
        crc = (crc >> 8) ^ CRC32_TABLE[idx];
    }
    crc ^ 0xFFFF_FFFF
}

/// Application-level protocol data unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pdu {
    pub version: u8,
    pub msg_type: u16,
    pub source: String,
    pub dest: String,
    pub sequence: u32,
    pub payload: Vec<u8>,
}

impl Pdu {
    pub fn new(msg_type: u16, source: impl Into<String>, dest: impl Into<String>, sequence: u32, payload: Vec<u8>) -> Self {
        Pdu {
            version: PDU_VERSION,
            msg_type,
            source: source.into(),
            dest: dest.into(),
            sequence,
            payload,
        }
    }
}

/// One interface-specific wire encoding of a PDU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub interface: ProtocolKind,
    pub bytes: Vec<u8>,
}

/// Bidirectional node-id to 32-bit index map used by the codec.
#[derive(Debug, Clone, Default)]
pub struct IdTable {
    by_id: BTreeMap<String, u32>,
    by_index: BTreeMap<u32, String>,
}

impl IdTable {
    /// Indices assigned by sorted node id, so the table is a pure function
    /// of the topology.
    pub fn from_topology(topo: &Topology) -> Self {
        let mut ids: Vec<&str> = topo.nodes.iter().map(|n| n.id.as_str()).collect();
        ids.sort_unstable();
        Self::from_ids(ids)
    }

    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = IdTable::default();
        for (i, id) in ids.into_iter().enumerate() {
            let id = id.into();
            table.by_id.insert(id.clone(), i as u32);
            table.by_index.insert(i as u32, id);
        }
        table
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).copied()
    }

    pub fn id_of(&self, index: u32) -> Option<&str> {
        self.by_index.get(&index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("node {0:?} has no index in the id table")]
    UnknownNodeIndex(String),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte bound")]
    PayloadTooLarge(usize),
}

/// The closed set of decode failures. Decoding arbitrary bytes returns
/// exactly one of these or a valid [`Pdu`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    /// Version byte or interface discriminant outside the defined values.
    #[error("bad version or interface discriminant")]
    BadVersion,
    #[error("frame shorter or longer than its header describes")]
    Truncated,
    #[error("crc mismatch")]
    CrcMismatch,
}

/// Encode one PDU for one interface. Deterministic: same inputs yield
/// identical bytes on every platform.
pub fn encode_pdu(pdu: &Pdu, interface: ProtocolKind, table: &IdTable) -> Result<Frame, EncodeError> {
    if pdu.payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::PayloadTooLarge(pdu.payload.len()));
    }
    let src = table
        .index_of(&pdu.source)
        .ok_or_else(|| EncodeError::UnknownNodeIndex(pdu.source.clone()))?;
    let dst = table
        .index_of(&pdu.dest)
        .ok_or_else(|| EncodeError::UnknownNodeIndex(pdu.dest.clone()))?;

    let mut bytes = Vec::with_capacity(HEADER_LEN + pdu.payload.len() + CRC_LEN);
    bytes.extend_from_slice(&MAGIC);
    bytes.push(pdu.version);
    bytes.push(interface.wire_code());
    bytes.extend_from_slice(&pdu.msg_type.to_be_bytes());
    bytes.extend_from_slice(&src.to_be_bytes());
    bytes.extend_from_slice(&dst.to_be_bytes());
    bytes.extend_from_slice(&pdu.sequence.to_be_bytes());
    bytes.extend_from_slice(&(pdu.payload.len() as u16).to_be_bytes());
    bytes.extend_from_slice(&pdu.payload);
    let crc = crc32_ieee(&bytes);
    bytes.extend_from_slice(&crc.to_be_bytes());
    Ok(Frame { interface, bytes })
}

/// Decode a frame's bytes. Total over arbitrary input: never panics and
/// fails only with a [`DecodeError`].
///
/// A node index missing from the table resolves to a synthetic `#<index>`
/// id; simulator tables are complete, so this only arises when decoding
/// corrupted-but-checksummed input.
pub fn decode_frame_bytes(bytes: &[u8], table: &IdTable) -> Result<(ProtocolKind, Pdu), DecodeError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(DecodeError::Truncated);
    }
    if bytes[0..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = bytes[4];
    if version != PDU_VERSION {
        return Err(DecodeError::BadVersion);
    }
    let interface = ProtocolKind::from_wire_code(bytes[5]).ok_or(DecodeError::BadVersion)?;
    let msg_type = u16::from_be_bytes([bytes[6], bytes[7]]);
    let src = u32::from_be_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    let dst = u32::from_be_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]);
    let sequence = u32::from_be_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]);
    let payload_len = u16::from_be_bytes([bytes[20], bytes[21]]) as usize;
    if bytes.len() != HEADER_LEN + payload_len + CRC_LEN {
        return Err(DecodeError::Truncated);
    }
    let crc_offset = HEADER_LEN + payload_len;
    let stored = u32::from_be_bytes([
        bytes[crc_offset],
        bytes[crc_offset + 1],
        bytes[crc_offset + 2],
        bytes[crc_offset + 3],
    ]);
    if crc32_ieee(&bytes[..crc_offset]) != stored {
        return Err(DecodeError::CrcMismatch);
    }
    let resolve = |idx: u32| match table.id_of(idx) {
        Some(id) => id.to_string(),
        None => format!("#{idx}"),
    };
    let pdu = Pdu {
        version,
        msg_type,
        source: resolve(src),
        dest: resolve(dst),
        sequence,
        payload: bytes[HEADER_LEN..crc_offset].to_vec(),
    };
    Ok((interface, pdu))
}

/// Decode a [`Frame`]; inverse of [`encode_pdu`] for all valid PDUs.
pub fn decode_pdu(frame: &Frame, table: &IdTable) -> Result<Pdu, DecodeError> {
    decode_frame_bytes(&frame.bytes, table).map(|(_, pdu)| pdu)
}

/// How a message is fanned out over the interfaces available at a hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchPolicy {
    /// One frame per available interface; the receiver deduplicates.
    All,
    /// Exactly one frame on the first listed interface that is available.
    Preferred(Vec<ProtocolKind>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MultiplexError {
    #[error("no interface available")]
    NoInterfaceAvailable,
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Fan one PDU out according to the dispatch policy. Every produced frame
/// carries the same message content; only the interface differs.
pub fn hybrid_multiplex(
    pdu: &Pdu,
    available: &BTreeSet<ProtocolKind>,
    policy: &DispatchPolicy,
    table: &IdTable,
) -> Result<Vec<Frame>, MultiplexError> {
    if available.is_empty() {
        return Err(MultiplexError::NoInterfaceAvailable);
    }
    match policy {
        DispatchPolicy::All => available
            .iter()
            .map(|&i| encode_pdu(pdu, i, table).map_err(MultiplexError::from))
            .collect(),
        DispatchPolicy::Preferred(order) => {
            let interface = order
                .iter()
                .find(|i| available.contains(i))
                .ok_or(MultiplexError::NoInterfaceAvailable)?;
            Ok(vec![encode_pdu(pdu, *interface, table)?])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ProtocolKind::*;

    /// Bitwise CRC-32 reference, independent of the table-driven routine.
    fn crc32_reference(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &byte in data {
            crc ^= byte as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            }
        }
        crc ^ 0xFFFF_FFFF
    }

    fn table() -> IdTable {
        IdTable::from_ids(["n0", "n1", "n2", "n3", "n4", "n5"])
    }

    #[test]
    fn crc_check_value() {
        // Standard CRC-32/IEEE check value.
        assert_eq!(crc32_ieee(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32_ieee(b""), 0);
    }

    #[test]
    fn layout_is_22_byte_header_plus_payload_plus_crc() {
        let pdu = Pdu::new(0x0001, "n2", "n5", 7, b"hi".to_vec());
        let frame = encode_pdu(&pdu, Mqtt, &table()).unwrap();
        assert_eq!(frame.bytes.len(), HEADER_LEN + 2 + CRC_LEN);
        assert_eq!(&frame.bytes[0..4], b"CITS");
        assert_eq!(frame.bytes[4], 1);
        assert_eq!(frame.bytes[5], 1); // Mqtt
        assert_eq!(&frame.bytes[6..8], &[0x00, 0x01]);
        assert_eq!(&frame.bytes[8..12], &2u32.to_be_bytes());
        assert_eq!(&frame.bytes[12..16], &5u32.to_be_bytes());
        assert_eq!(&frame.bytes[16..20], &7u32.to_be_bytes());
        assert_eq!(&frame.bytes[20..22], &[0x00, 0x02]);
        assert_eq!(&frame.bytes[22..24], b"hi");
    }

    #[test]
    fn empty_payload_crc_matches_reference_oracle() {
        let pdu = Pdu::new(0x0001, "n0", "n1", 0, Vec::new());
        let frame = encode_pdu(&pdu, ItsG5, &table()).unwrap();
        assert_eq!(frame.bytes.len(), HEADER_LEN + CRC_LEN);
        assert_eq!(&frame.bytes[20..22], &[0, 0]);
        let stored = u32::from_be_bytes(frame.bytes[HEADER_LEN..].try_into().unwrap());
        assert_eq!(stored, crc32_reference(&frame.bytes[..HEADER_LEN]));
    }

    #[test]
    fn encode_rejects_unknown_node_and_oversized_payload() {
        let pdu = Pdu::new(1, "ghost", "n1", 0, Vec::new());
        assert_eq!(
            encode_pdu(&pdu, Mqtt, &table()),
            Err(EncodeError::UnknownNodeIndex("ghost".into()))
        );
        let pdu = Pdu::new(1, "n0", "n1", 0, vec![0; MAX_PAYLOAD + 1]);
        assert_eq!(encode_pdu(&pdu, Mqtt, &table()), Err(EncodeError::PayloadTooLarge(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn decode_errors_are_distinguishable() {
        let t = table();
        let pdu = Pdu::new(0x0203, "n1", "n4", 42, b"payload".to_vec());
        let frame = encode_pdu(&pdu, Snmpv3, &t).unwrap();

        let mut bad_magic = frame.bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_frame_bytes(&bad_magic, &t), Err(DecodeError::BadMagic));

        let mut bad_version = frame.bytes.clone();
        bad_version[4] = 9;
        assert_eq!(decode_frame_bytes(&bad_version, &t), Err(DecodeError::BadVersion));

        let mut bad_interface = frame.bytes.clone();
        bad_interface[5] = 0;
        assert_eq!(decode_frame_bytes(&bad_interface, &t), Err(DecodeError::BadVersion));

        assert_eq!(decode_frame_bytes(&frame.bytes[..10], &t), Err(DecodeError::Truncated));

        let mut flipped_crc = frame.bytes.clone();
        let last = flipped_crc.len() - 1;
        flipped_crc[last] ^= 0xFF;
        assert_eq!(decode_frame_bytes(&flipped_crc, &t), Err(DecodeError::CrcMismatch));

        let mut trailing = frame.bytes.clone();
        trailing.push(0);
        assert_eq!(decode_frame_bytes(&trailing, &t), Err(DecodeError::Truncated));
    }

    #[test]
    fn decode_resolves_unknown_index_to_synthetic_id() {
        let t = table();
        let small = IdTable::from_ids(["n0"]);
        let pdu = Pdu::new(1, "n5", "n0", 0, Vec::new());
        let frame = encode_pdu(&pdu, Mqtt, &t).unwrap();
        let decoded = decode_pdu(&frame, &small).unwrap();
        assert_eq!(decoded.source, "#5");
        assert_eq!(decoded.dest, "n0");
    }

    #[test]
    fn multiplex_all_and_preferred() {
        let t = table();
        let pdu = Pdu::new(0x0301, "n0", "n3", 9, b"status".to_vec());

        let available: BTreeSet<_> = [Mqtt, ItsG5].into_iter().collect();
        let frames = hybrid_multiplex(&pdu, &available, &DispatchPolicy::All, &t).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].interface, Mqtt);
        assert_eq!(frames[1].interface, ItsG5);
        let a = decode_pdu(&frames[0], &t).unwrap();
        let b = decode_pdu(&frames[1], &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, pdu);

        let only_g5: BTreeSet<_> = [ItsG5].into_iter().collect();
        let frames =
            hybrid_multiplex(&pdu, &only_g5, &DispatchPolicy::Preferred(vec![Mqtt, ItsG5]), &t)
                .unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].interface, ItsG5);

        let empty = BTreeSet::new();
        assert_eq!(
            hybrid_multiplex(&pdu, &empty, &DispatchPolicy::All, &t),
            Err(MultiplexError::NoInterfaceAvailable)
        );
        let disjoint: BTreeSet<_> = [Snmpv3].into_iter().collect();
        assert_eq!(
            hybrid_multiplex(&pdu, &disjoint, &DispatchPolicy::Preferred(vec![Mqtt]), &t),
            Err(MultiplexError::NoInterfaceAvailable)
        );
    }

    proptest::proptest! {
        #[test]
        fn roundtrip_identity(
            msg_type in proptest::num::u16::ANY,
            src in 0usize..6,
            dst in 0usize..6,
            seq in proptest::num::u32::ANY,
            payload in proptest::collection::vec(proptest::num::u8::ANY, 0..512),
            iface in 0usize..4,
        ) {
            let t = table();
            let interface = ProtocolKind::ALL[iface];
            let pdu = Pdu::new(msg_type, format!("n{src}"), format!("n{dst}"), seq, payload);
            let frame = encode_pdu(&pdu, interface, &t).unwrap();
            let (got_iface, decoded) = decode_frame_bytes(&frame.bytes, &t).unwrap();
            proptest::prop_assert_eq!(got_iface, interface);
            proptest::prop_assert_eq!(decoded, pdu);
        }

        #[test]
        fn decode_is_total_on_arbitrary_bytes(
            bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..2048),
        ) {
            let t = table();
            // Must not panic; any result is acceptable.
            let _ = decode_frame_bytes(&bytes, &t);
        }

        #[test]
        fn encode_crc_matches_reference(
            payload in proptest::collection::vec(proptest::num::u8::ANY, 0..256),
            seq in proptest::num::u32::ANY,
        ) {
            let t = table();
            let pdu = Pdu::new(0x0101, "n0", "n5", seq, payload);
            let frame = encode_pdu(&pdu, InternetIpv6, &t).unwrap();
            let body = &frame.bytes[..frame.bytes.len() - CRC_LEN];
            let stored = u32::from_be_bytes(frame.bytes[frame.bytes.len() - CRC_LEN..].try_into().unwrap());
            proptest::prop_assert_eq!(stored, crc32_reference(body));
        }
    }
}
