//! Wire messages.
//!
//! Layout: `phase ∥ stat ∥ field count ∥ (field id ∥ u32-be length ∥ bytes)*`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Block32, Block64, CryptoError, SealedBox};
use crate::wire::{Reader, WireError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unknown {kind} byte {value:#04x}")]
    UnknownTag { kind: &'static str, value: u8 },
    #[error("missing field {0:?}")]
    MissingField(FieldId),
    #[error("field {field:?}: {source}")]
    BadField { field: FieldId, source: CryptoError },
    #[error("too many fields ({0})")]
    TooManyFields(usize),
}

macro_rules! byte_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident = $value:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum $name {
            $($variant = $value),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn from_byte(b: u8) -> Result<Self, EnvelopeError> {
                match b {
                    $($value => Ok($name::$variant),)+
                    value => Err(EnvelopeError::UnknownTag { kind: $kind, value }),
                }
            }
        }
    };
}

byte_enum!(
    /// Protocol phase the message belongs to.
    Phase, "phase" {
        ServerRegistration = 1,
        UserRegistration = 2,
        Login = 3,
        PasswordChange = 4,
        PasswordRecovery = 5,
        CardRecovery = 6,
        LegacyLogin = 0x10,
    }
);

byte_enum!(
    /// The status tag carried by every message.
    Stat, "stat" {
        Register = 1,
        Accept = 2,
        Ack = 3,
        Complete = 4,
        Reject = 5,
        Deregister = 6,
        Login = 7,
        Auth = 8,
        Passchange = 9,
        Fail = 10,
        Recovery = 11,
        Verify = 12,
        Done = 13,
        RecoveryS = 14,
        VerifyS = 15,
        DoneS = 16,
        AcceptS = 17,
    }
);

byte_enum!(
    FieldId, "field" {
        Id = 1,
        Sid = 2,
        Ks = 3,
        Bp = 4,
        Rcont = 5,
        Tx = 6,
        Tc = 7,
        Tcx = 8,
        BpNew = 9,
        TxNew = 10,
        TcNew = 11,
        Nonce = 12,
        M1 = 13,
        M2 = 14,
        M3 = 15,
        M4 = 16,
        M5 = 17,
        M6 = 18,
        M7 = 19,
    }
);

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub phase: Phase,
    pub stat: Stat,
    pub fields: Vec<(FieldId, Vec<u8>)>,
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.fields.iter().map(|(id, _)| id).collect();
        write!(f, "{:?}/{:?}{:?}", self.phase, self.stat, names)
    }
}

impl Envelope {
    pub fn new(phase: Phase, stat: Stat) -> Self {
        Envelope {
            phase,
            stat,
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, id: FieldId, bytes: impl AsRef<[u8]>) -> Self {
        self.fields.push((id, bytes.as_ref().to_vec()));
        self
    }

    pub fn with_box(self, id: FieldId, sealed: &SealedBox) -> Self {
        self.with(id, sealed.to_bytes())
    }

    pub fn get(&self, id: FieldId) -> Option<&[u8]> {
        self.fields
            .iter()
            .find(|(f, _)| *f == id)
            .map(|(_, b)| b.as_slice())
    }

    pub fn get_mut(&mut self, id: FieldId) -> Option<&mut Vec<u8>> {
        self.fields
            .iter_mut()
            .find(|(f, _)| *f == id)
            .map(|(_, b)| b)
    }

    pub fn require(&self, id: FieldId) -> Result<&[u8], EnvelopeError> {
        self.get(id).ok_or(EnvelopeError::MissingField(id))
    }

    pub fn block32(&self, id: FieldId) -> Result<Block32, EnvelopeError> {
        Block32::from_slice(self.require(id)?)
            .map_err(|source| EnvelopeError::BadField { field: id, source })
    }

    pub fn block64(&self, id: FieldId) -> Result<Block64, EnvelopeError> {
        Block64::from_slice(self.require(id)?)
            .map_err(|source| EnvelopeError::BadField { field: id, source })
    }

    pub fn sealed(&self, id: FieldId) -> Result<SealedBox, EnvelopeError> {
        SealedBox::from_bytes(self.require(id)?)
            .map_err(|source| EnvelopeError::BadField { field: id, source })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.phase as u8, self.stat as u8, self.fields.len() as u8];
        for (id, bytes) in &self.fields {
            out.push(*id as u8);
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let mut r = Reader::new(bytes);
        let phase = Phase::from_byte(r.u8()?)?;
        let stat = Stat::from_byte(r.u8()?)?;
        let count = r.u8()? as usize;
        let mut fields = Vec::with_capacity(count);
        for _ in 0..count {
            let id = FieldId::from_byte(r.u8()?)?;
            fields.push((id, r.lp()?.to_vec()));
        }
        r.finish()?;
        Ok(Envelope {
            phase,
            stat,
            fields,
        })
    }
}
