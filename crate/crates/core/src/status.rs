//! Status and error codes shared by the CTAPHID transport and the CTAP2 API.
//!
//! CTAPHID error payloads and CTAP2 response status bytes draw from the same
//! numbering space, so a single enum covers both.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StatusCode {
    Success = 0x00,
    InvalidCommand = 0x01,
    InvalidParameter = 0x02,
    InvalidLength = 0x03,
    InvalidSeq = 0x04,
    Timeout = 0x05,
    ChannelBusy = 0x06,
    InvalidChannel = 0x0B,
    CborUnexpectedType = 0x11,
    InvalidCbor = 0x12,
    MissingParameter = 0x14,
    CredentialExcluded = 0x19,
    UnsupportedAlgorithm = 0x26,
    UnsupportedOption = 0x2B,
    OperationDenied = 0x27,
    KeepaliveCancel = 0x2D,
    NoCredentials = 0x2E,
    NotAllowed = 0x30,
    PinInvalid = 0x31,
    PinBlocked = 0x32,
    PinAuthInvalid = 0x33,
    PinNotSet = 0x35,
    PinRequired = 0x36,
    PinPolicyViolation = 0x37,
    Other = 0x7F,
}

impl StatusCode {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(value: u8) -> Option<StatusCode> {
        use StatusCode::*;
        Some(match value {
            0x00 => Success,
            0x01 => InvalidCommand,
            0x02 => InvalidParameter,
            0x03 => InvalidLength,
            0x04 => InvalidSeq,
            0x05 => Timeout,
            0x06 => ChannelBusy,
            0x0B => InvalidChannel,
            0x11 => CborUnexpectedType,
            0x12 => InvalidCbor,
            0x14 => MissingParameter,
            0x19 => CredentialExcluded,
            0x26 => UnsupportedAlgorithm,
            0x27 => OperationDenied,
            0x2B => UnsupportedOption,
            0x2D => KeepaliveCancel,
            0x2E => NoCredentials,
            0x30 => NotAllowed,
            0x31 => PinInvalid,
            0x32 => PinBlocked,
            0x33 => PinAuthInvalid,
            0x35 => PinNotSet,
            0x36 => PinRequired,
            0x37 => PinPolicyViolation,
            0x7F => Other,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use StatusCode::*;
        match self {
            Success => "SUCCESS",
            InvalidCommand => "INVALID_COMMAND",
            InvalidParameter => "INVALID_PARAMETER",
            InvalidLength => "INVALID_LENGTH",
            InvalidSeq => "INVALID_SEQ",
            Timeout => "TIMEOUT",
            ChannelBusy => "CHANNEL_BUSY",
            InvalidChannel => "INVALID_CHANNEL",
            CborUnexpectedType => "CBOR_UNEXPECTED_TYPE",
            InvalidCbor => "INVALID_CBOR",
            MissingParameter => "MISSING_PARAMETER",
            CredentialExcluded => "CREDENTIAL_EXCLUDED",
            UnsupportedAlgorithm => "UNSUPPORTED_ALGORITHM",
            OperationDenied => "OPERATION_DENIED",
            UnsupportedOption => "UNSUPPORTED_OPTION",
            KeepaliveCancel => "KEEPALIVE_CANCEL",
            NoCredentials => "NO_CREDENTIALS",
            NotAllowed => "NOT_ALLOWED",
            PinInvalid => "PIN_INVALID",
            PinBlocked => "PIN_BLOCKED",
            PinAuthInvalid => "PIN_AUTH_INVALID",
            PinNotSet => "PIN_NOT_SET",
            PinRequired => "PIN_REQUIRED",
            PinPolicyViolation => "PIN_POLICY_VIOLATION",
            Other => "OTHER",
        }
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02X} ({})", self.as_u8(), self.name())
    }
}

impl std::error::Error for StatusCode {}
