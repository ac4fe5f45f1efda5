//! 64-byte HID report framing: initialization and continuation packets,
//! message fragmentation and reassembly, and channel allocation.
//!
//! Wire layout:
//!
//! ```text
//! init:         CID(4) | CMD|0x80 (1) | BCNT (2, BE) | DATA (57)
//! continuation: CID(4) | SEQ (1)      | DATA (59)
//! ```

use std::collections::HashMap;
use std::fmt;

use parking_lot::Mutex;
use thiserror::Error;

pub const REPORT_LEN: usize = 64;
pub const INIT_DATA_LEN: usize = REPORT_LEN - 7;
pub const CONT_DATA_LEN: usize = REPORT_LEN - 5;
pub const MAX_SEQ: u8 = 0x7F;
/// One initialization packet plus 128 continuation packets.
pub const MAX_PAYLOAD: usize = INIT_DATA_LEN + (MAX_SEQ as usize + 1) * CONT_DATA_LEN;

const INIT_MARKER: u8 = 0x80;

pub type Report = [u8; REPORT_LEN];

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId(pub u32);

impl ChannelId {
    pub const BROADCAST: ChannelId = ChannelId(0xFFFF_FFFF);
    pub const RESERVED: ChannelId = ChannelId(0);

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }

    pub fn to_bytes(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; 4]) -> ChannelId {
        ChannelId(u32::from_be_bytes(bytes))
    }
}

impl fmt::Debug for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelId({:08X})", self.0)
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08X}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FramingError {
    #[error("report must be {REPORT_LEN} bytes, got {0}")]
    BadReportLength(usize),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte message limit")]
    PayloadTooLarge(usize),
    #[error("command 0x{0:02X} does not fit in 7 bits")]
    BadCommand(u8),
    #[error("packet data chunk of {0} bytes is too long")]
    ChunkTooLong(usize),
}

#[derive(Clone, PartialEq, Eq)]
pub struct InitPacket {
    pub cid: ChannelId,
    /// Command code without the high marker bit.
    pub cmd: u8,
    pub bcnt: u16,
    pub data: [u8; INIT_DATA_LEN],
}

#[derive(Clone, PartialEq, Eq)]
pub struct ContPacket {
    pub cid: ChannelId,
    pub seq: u8,
    pub data: [u8; CONT_DATA_LEN],
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Packet {
    Init(InitPacket),
    Cont(ContPacket),
}

impl InitPacket {
    pub fn new(cid: ChannelId, cmd: u8, bcnt: u16, chunk: &[u8]) -> Result<Self, FramingError> {
        if cmd > 0x7F {
            return Err(FramingError::BadCommand(cmd));
        }
        if chunk.len() > INIT_DATA_LEN {
            return Err(FramingError::ChunkTooLong(chunk.len()));
        }
        let mut data = [0u8; INIT_DATA_LEN];
        data[..chunk.len()].copy_from_slice(chunk);
        Ok(InitPacket { cid, cmd, bcnt, data })
    }
}

impl ContPacket {
    pub fn new(cid: ChannelId, seq: u8, chunk: &[u8]) -> Result<Self, FramingError> {
        if chunk.len() > CONT_DATA_LEN {
            return Err(FramingError::ChunkTooLong(chunk.len()));
        }
        let mut data = [0u8; CONT_DATA_LEN];
        data[..chunk.len()].copy_from_slice(chunk);
        Ok(ContPacket { cid, seq: seq & MAX_SEQ, data })
    }
}

impl fmt::Debug for InitPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitPacket")
            .field("cid", &self.cid)
            .field("cmd", &format_args!("0x{:02X}", self.cmd))
            .field("bcnt", &self.bcnt)
            .finish()
    }
}

impl fmt::Debug for ContPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContPacket")
            .field("cid", &self.cid)
            .field("seq", &self.seq)
            .finish()
    }
}

impl Packet {
    pub fn parse(raw: &[u8]) -> Result<Packet, FramingError> {
        if raw.len() != REPORT_LEN {
            return Err(FramingError::BadReportLength(raw.len()));
        }
        let cid = ChannelId::from_bytes([raw[0], raw[1], raw[2], raw[3]]);
        if raw[4] & INIT_MARKER != 0 {
            let mut data = [0u8; INIT_DATA_LEN];
            data.copy_from_slice(&raw[7..]);
            Ok(Packet::Init(InitPacket {
                cid,
                cmd: raw[4] & 0x7F,
                bcnt: u16::from_be_bytes([raw[5], raw[6]]),
                data,
            }))
        } else {
            let mut data = [0u8; CONT_DATA_LEN];
            data.copy_from_slice(&raw[5..]);
            Ok(Packet::Cont(ContPacket { cid, seq: raw[4], data }))
        }
    }

    pub fn to_bytes(&self) -> Report {
        let mut out = [0u8; REPORT_LEN];
        match self {
            Packet::Init(p) => {
                out[..4].copy_from_slice(&p.cid.to_bytes());
                out[4] = p.cmd | INIT_MARKER;
                out[5..7].copy_from_slice(&p.bcnt.to_be_bytes());
                out[7..].copy_from_slice(&p.data);
            }
            Packet::Cont(p) => {
                out[..4].copy_from_slice(&p.cid.to_bytes());
                out[4] = p.seq & MAX_SEQ;
                out[5..].copy_from_slice(&p.data);
            }
        }
        out
    }

    pub fn cid(&self) -> ChannelId {
        match self {
            Packet::Init(p) => p.cid,
            Packet::Cont(p) => p.cid,
        }
    }
}

/// A complete CTAPHID message: one init packet's header plus the
/// concatenated payload of the whole packet sequence.
#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    pub cid: ChannelId,
    pub cmd: u8,
    pub payload: Vec<u8>,
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Message")
            .field("cid", &self.cid)
            .field("cmd", &format_args!("0x{:02X}", self.cmd))
            .field("len", &self.payload.len())
            .finish()
    }
}

/// Number of packets needed to carry `len` payload bytes.
pub fn packet_count(len: usize) -> usize {
    if len <= INIT_DATA_LEN {
        1
    } else {
        1 + (len - INIT_DATA_LEN).div_ceil(CONT_DATA_LEN)
    }
}

pub fn fragment(cid: ChannelId, cmd: u8, payload: &[u8]) -> Result<Vec<Packet>, FramingError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FramingError::PayloadTooLarge(payload.len()));
    }
    let head = payload.len().min(INIT_DATA_LEN);
    let mut packets = Vec::with_capacity(packet_count(payload.len()));
    packets.push(Packet::Init(InitPacket::new(
        cid,
        cmd,
        payload.len() as u16,
        &payload[..head],
    )?));
    for (seq, chunk) in payload[head..].chunks(CONT_DATA_LEN).enumerate() {
        packets.push(Packet::Cont(ContPacket::new(cid, seq as u8, chunk)?));
    }
    Ok(packets)
}

pub fn fragment_reports(cid: ChannelId, cmd: u8, payload: &[u8]) -> Result<Vec<Report>, FramingError> {
    Ok(fragment(cid, cmd, payload)?.iter().map(Packet::to_bytes).collect())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssemblyError {
    #[error("continuation packet on {0} without an open message")]
    UnexpectedContinuation(ChannelId),
    #[error("sequence error on {cid}: expected {expected}, got {got}")]
    InvalidSequence { cid: ChannelId, expected: u8, got: u8 },
    #[error("declared length {bcnt} on {cid} exceeds the message limit")]
    TooLarge { cid: ChannelId, bcnt: u16 },
    /// A new initialization packet arrived while a message on the same
    /// channel was still open. The old message is dropped and assembly
    /// restarts from the new packet; `restarted` holds it if it was already
    /// complete on its own.
    #[error("initialization packet on {cid} while a message was still open")]
    SpuriousInit { cid: ChannelId, restarted: Option<Message> },
}

impl AssemblyError {
    pub fn cid(&self) -> ChannelId {
        match self {
            AssemblyError::UnexpectedContinuation(cid) => *cid,
            AssemblyError::InvalidSequence { cid, .. }
            | AssemblyError::TooLarge { cid, .. }
            | AssemblyError::SpuriousInit { cid, .. } => *cid,
        }
    }
}

struct Partial {
    cmd: u8,
    bcnt: usize,
    next_seq: u8,
    payload: Vec<u8>,
}

/// Per-channel reassembly buffers. At most one open message per channel.
#[derive(Default)]
pub struct Assembler {
    open: HashMap<ChannelId, Partial>,
}

impl Assembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_open(&self, cid: ChannelId) -> bool {
        self.open.contains_key(&cid)
    }

    pub fn open_channels(&self) -> usize {
        self.open.len()
    }

    pub fn abort(&mut self, cid: ChannelId) -> bool {
        self.open.remove(&cid).is_some()
    }

    /// Feed one packet. Returns the completed message once `bcnt` bytes
    /// have been collected.
    pub fn push(&mut self, packet: Packet) -> Result<Option<Message>, AssemblyError> {
        match packet {
            Packet::Init(init) => {
                let cid = init.cid;
                let spurious = self.open.remove(&cid).is_some();
                if init.bcnt as usize > MAX_PAYLOAD {
                    return Err(AssemblyError::TooLarge { cid, bcnt: init.bcnt });
                }
                let bcnt = init.bcnt as usize;
                let head = bcnt.min(INIT_DATA_LEN);
                let mut payload = Vec::with_capacity(bcnt);
                payload.extend_from_slice(&init.data[..head]);
                let done = if payload.len() == bcnt {
                    Some(Message { cid, cmd: init.cmd, payload })
                } else {
                    self.open.insert(cid, Partial { cmd: init.cmd, bcnt, next_seq: 0, payload });
                    None
                };
                if spurious {
                    Err(AssemblyError::SpuriousInit { cid, restarted: done })
                } else {
                    Ok(done)
                }
            }
            Packet::Cont(cont) => {
                let cid = cont.cid;
                let Some(partial) = self.open.get_mut(&cid) else {
                    return Err(AssemblyError::UnexpectedContinuation(cid));
                };
                if cont.seq != partial.next_seq {
                    let expected = partial.next_seq;
                    self.open.remove(&cid);
                    return Err(AssemblyError::InvalidSequence { cid, expected, got: cont.seq });
                }
                let take = (partial.bcnt - partial.payload.len()).min(CONT_DATA_LEN);
                partial.payload.extend_from_slice(&cont.data[..take]);
                partial.next_seq += 1;
                if partial.payload.len() == partial.bcnt {
                    let partial = self.open.remove(&cid).expect("present");
                    Ok(Some(Message { cid, cmd: partial.cmd, payload: partial.payload }))
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// Reassemble a packet sequence belonging to a single message.
pub fn reassemble<I>(packets: I) -> Result<Message, AssemblyError>
where
    I: IntoIterator<Item = Packet>,
{
    let mut assembler = Assembler::new();
    let mut last_cid = ChannelId::RESERVED;
    for packet in packets {
        last_cid = packet.cid();
        if let Some(message) = assembler.push(packet)? {
            return Ok(message);
        }
    }
    Err(AssemblyError::UnexpectedContinuation(last_cid))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("channel identifier space exhausted")]
pub struct ChannelExhausted;

/// Issues channel IDs that are unique for the allocator's lifetime and never
/// equal to the reserved or broadcast values.
pub struct ChannelAllocator {
    next: Mutex<u32>,
}

impl Default for ChannelAllocator {
    fn default() -> Self {
        Self::new()
    }
}

impl ChannelAllocator {
    pub fn new() -> Self {
        Self::starting_at(1)
    }

    pub fn starting_at(first: u32) -> Self {
        ChannelAllocator { next: Mutex::new(first.max(1)) }
    }

    pub fn allocate(&self) -> Result<ChannelId, ChannelExhausted> {
        let mut next = self.next.lock();
        if *next == ChannelId::BROADCAST.0 {
            return Err(ChannelExhausted);
        }
        let cid = ChannelId(*next);
        *next += 1;
        Ok(cid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cid() -> ChannelId {
        ChannelId(0x0102_0304)
    }

    #[test]
    fn parses_init_packet_fields() {
        let mut raw = [0u8; 64];
        raw[..4].copy_from_slice(&[1, 2, 3, 4]);
        raw[4] = 0x86;
        raw[5] = 0x00;
        raw[6] = 0x08;
        match Packet::parse(&raw).unwrap() {
            Packet::Init(p) => {
                assert_eq!(p.cid, cid());
                assert_eq!(p.cmd, 0x06);
                assert_eq!(p.bcnt, 8);
            }
            other => panic!("expected init, got {other:?}"),
        }
        // Matches what the builder produces for the same header.
        let built = fragment(cid(), 0x06, &[0u8; 8]).unwrap();
        assert_eq!(built[0].to_bytes(), raw);
    }

    #[test]
    fn parses_continuation_packet() {
        let raw = [0u8; 64];
        match Packet::parse(&raw).unwrap() {
            Packet::Cont(p) => assert_eq!(p.seq, 0),
            other => panic!("expected continuation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_short_report() {
        assert_eq!(Packet::parse(&[0u8; 63]), Err(FramingError::BadReportLength(63)));
        assert_eq!(Packet::parse(&[0u8; 65]), Err(FramingError::BadReportLength(65)));
    }

    #[test]
    fn empty_payload_is_single_packet() {
        let packets = fragment(cid(), 0x01, &[]).unwrap();
        assert_eq!(packets.len(), 1);
        match &packets[0] {
            Packet::Init(p) => assert_eq!(p.bcnt, 0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn boundary_packet_counts() {
        for (len, count) in [(57, 1), (58, 2), (116, 2), (117, 3), (7609, 129)] {
            let payload = vec![0xAB; len];
            let packets = fragment(cid(), 0x01, &payload).unwrap();
            assert_eq!(packets.len(), count, "len {len}");
            assert_eq!(packet_count(len), count);
            assert_eq!(reassemble(packets).unwrap().payload, payload);
        }
        let packets = fragment(cid(), 0x01, &vec![1; MAX_PAYLOAD]).unwrap();
        match packets.last().unwrap() {
            Packet::Cont(p) => assert_eq!(p.seq, 127),
            _ => unreachable!(),
        }
    }

    #[test]
    fn oversize_payload_rejected() {
        assert_eq!(MAX_PAYLOAD, 7609);
        assert_eq!(
            fragment(cid(), 0x01, &vec![0; 7610]),
            Err(FramingError::PayloadTooLarge(7610))
        );
    }

    #[test]
    fn sequence_gap_detected() {
        let packets = fragment(cid(), 0x10, &[7u8; 200]).unwrap();
        let mut asm = Assembler::new();
        assert_eq!(asm.push(packets[0].clone()), Ok(None));
        assert_eq!(asm.push(packets[1].clone()), Ok(None));
        let err = asm.push(packets[3].clone()).unwrap_err();
        assert_eq!(err, AssemblyError::InvalidSequence { cid: cid(), expected: 1, got: 2 });
        assert!(!asm.is_open(cid()));
    }

    #[test]
    fn repeated_sequence_detected() {
        let packets = fragment(cid(), 0x10, &[7u8; 200]).unwrap();
        let mut asm = Assembler::new();
        asm.push(packets[0].clone()).unwrap();
        asm.push(packets[1].clone()).unwrap();
        assert!(matches!(
            asm.push(packets[1].clone()),
            Err(AssemblyError::InvalidSequence { expected: 1, got: 0, .. })
        ));
    }

    #[test]
    fn lone_continuation_rejected() {
        let packet = Packet::Cont(ContPacket::new(cid(), 0, &[1, 2, 3]).unwrap());
        assert_eq!(
            Assembler::new().push(packet),
            Err(AssemblyError::UnexpectedContinuation(cid()))
        );
    }

    #[test]
    fn spurious_init_restarts_assembly() {
        let first = fragment(cid(), 0x10, &[1u8; 100]).unwrap();
        let second = fragment(cid(), 0x01, &[2u8; 100]).unwrap();
        let mut asm = Assembler::new();
        asm.push(first[0].clone()).unwrap();
        let err = asm.push(second[0].clone()).unwrap_err();
        assert_eq!(err, AssemblyError::SpuriousInit { cid: cid(), restarted: None });
        let msg = asm.push(second[1].clone()).unwrap().unwrap();
        assert_eq!(msg.cmd, 0x01);
        assert_eq!(msg.payload, vec![2u8; 100]);
    }

    #[test]
    fn interleaved_channels_assemble_independently() {
        let a = fragment(ChannelId(1), 0x01, &[0xAA; 150]).unwrap();
        let b = fragment(ChannelId(2), 0x01, &[0xBB; 70]).unwrap();
        let mut asm = Assembler::new();
        assert_eq!(asm.push(a[0].clone()), Ok(None));
        assert_eq!(asm.push(b[0].clone()), Ok(None));
        assert_eq!(asm.push(a[1].clone()), Ok(None));
        assert_eq!(asm.push(b[1].clone()).unwrap().unwrap().payload, vec![0xBB; 70]);
        assert_eq!(asm.push(a[2].clone()).unwrap().unwrap().payload, vec![0xAA; 150]);
    }

    #[test]
    fn padding_is_zero_and_ignored() {
        let packets = fragment(cid(), 0x01, &[0xFF; 60]).unwrap();
        let raw = packets[1].to_bytes();
        assert_eq!(&raw[5..8], &[0xFF; 3]);
        assert!(raw[8..].iter().all(|&b| b == 0));
        let mut dirty = raw;
        dirty[63] = 0x55;
        let mut asm = Assembler::new();
        asm.push(packets[0].clone()).unwrap();
        let msg = asm.push(Packet::parse(&dirty).unwrap()).unwrap().unwrap();
        assert_eq!(msg.payload, vec![0xFF; 60]);
    }

    #[test]
    fn allocator_issues_distinct_ids() {
        let alloc = ChannelAllocator::new();
        let ids: HashSet<_> = (0..1000).map(|_| alloc.allocate().unwrap()).collect();
        assert_eq!(ids.len(), 1000);
        assert!(!ids.contains(&ChannelId::BROADCAST));
        assert!(!ids.contains(&ChannelId::RESERVED));
    }

    #[test]
    fn allocator_exhaustion() {
        let alloc = ChannelAllocator::starting_at(0xFFFF_FFFD);
        assert_eq!(alloc.allocate(), Ok(ChannelId(0xFFFF_FFFD)));
        assert_eq!(alloc.allocate(), Ok(ChannelId(0xFFFF_FFFE)));
        assert_eq!(alloc.allocate(), Err(ChannelExhausted));
        assert_eq!(alloc.allocate(), Err(ChannelExhausted));
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        let init = (any::<u32>(), 0u8..0x80, any::<u16>(), proptest::collection::vec(any::<u8>(), 0..=57))
            .prop_map(|(c, cmd, bcnt, d)| Packet::Init(InitPacket::new(ChannelId(c), cmd, bcnt, &d).unwrap()));
        let cont = (any::<u32>(), 0u8..0x80, proptest::collection::vec(any::<u8>(), 0..=59))
            .prop_map(|(c, seq, d)| Packet::Cont(ContPacket::new(ChannelId(c), seq, &d).unwrap()));
        prop_oneof![init, cont]
    }

    proptest! {
        #[test]
        fn packet_serialization_round_trips(packet in arb_packet()) {
            let raw = packet.to_bytes();
            prop_assert_eq!(raw.len(), REPORT_LEN);
            prop_assert_eq!(Packet::parse(&raw).unwrap(), packet);
        }

        #[test]
        fn fragment_reassemble_identity(payload in proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD), cmd in 0u8..0x80) {
            let packets = fragment(cid(), cmd, &payload).unwrap();
            prop_assert_eq!(packets.len(), packet_count(payload.len()));
            let msg = reassemble(packets).unwrap();
            prop_assert_eq!(msg.cmd, cmd);
            prop_assert_eq!(msg.payload, payload);
        }
    }
}
