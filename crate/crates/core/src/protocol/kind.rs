use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Decoder, Encoder, Wire};
use crate::types::Regime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    Pbft,
    PbftEA,
    OPbftEA,
    MinBft,
    MinZZ,
    FlexiBft,
    FlexiZZ,
    OFlexiBft,
    OFlexiZZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    /// At most one proposed-but-uncommitted sequence number at the primary.
    Sequential,
    /// Up to `pipeline_width` sequence numbers in flight.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Pbft,
    /// Per-phase trusted logs at every replica.
    Ea,
    /// Trusted counters at every replica.
    Min,
    /// Trusted counter at the primary only.
    Flexi,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 9] = [
        ProtocolKind::Pbft,
        ProtocolKind::PbftEA,
        ProtocolKind::OPbftEA,
        ProtocolKind::MinBft,
        ProtocolKind::MinZZ,
        ProtocolKind::FlexiBft,
        ProtocolKind::FlexiZZ,
        ProtocolKind::OFlexiBft,
        ProtocolKind::OFlexiZZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Pbft => "Pbft",
            ProtocolKind::PbftEA => "PbftEA",
            ProtocolKind::OPbftEA => "OPbftEA",
            ProtocolKind::MinBft => "MinBft",
            ProtocolKind::MinZZ => "MinZZ",
            ProtocolKind::FlexiBft => "FlexiBft",
            ProtocolKind::FlexiZZ => "FlexiZZ",
            ProtocolKind::OFlexiBft => "OFlexiBft",
            ProtocolKind::OFlexiZZ => "OFlexiZZ",
        }
    }

    pub fn family(self) -> Family {
        use ProtocolKind::*;
        match self {
            Pbft => Family::Pbft,
            PbftEA | OPbftEA => Family::Ea,
            MinBft | MinZZ => Family::Min,
            FlexiBft | FlexiZZ | OFlexiBft | OFlexiZZ => Family::Flexi,
        }
    }

    pub fn regime(self) -> Regime {
        match self.family() {
            Family::Pbft | Family::Flexi => Regime::ThreeFPlusOne,
            Family::Ea | Family::Min => Regime::TwoFPlusOne,
        }
    }

    pub fn ordering(self) -> Ordering {
        use ProtocolKind::*;
        match self {
            Pbft | OPbftEA | FlexiBft | FlexiZZ => Ordering::Parallel,
            PbftEA | MinBft | MinZZ | OFlexiBft | OFlexiZZ => Ordering::Sequential,
        }
    }

    pub fn is_sequential(self) -> bool {
        self.ordering() == Ordering::Sequential
    }

    /// Single-phase kinds whose replicas execute on receipt of the proposal.
    pub fn is_speculative(self) -> bool {
        matches!(self, ProtocolKind::MinZZ | ProtocolKind::FlexiZZ | ProtocolKind::OFlexiZZ)
    }

    pub fn is_flexi(self) -> bool {
        self.family() == Family::Flexi
    }

    pub fn phases(self) -> u32 {
        match self.family() {
            Family::Pbft | Family::Ea => 3,
            _ if self.is_speculative() => 1,
            _ => 2,
        }
    }

    pub fn has_prepare_phase(self) -> bool {
        self.phases() >= 2
    }

    pub fn has_commit_phase(self) -> bool {
        self.phases() == 3
    }

    pub fn primary_attests(self) -> bool {
        self != ProtocolKind::Pbft
    }

    /// Whether backups make their own trusted calls for their votes.
    pub fn backups_attest(self) -> bool {
        matches!(self.family(), Family::Ea) || self == ProtocolKind::MinBft
    }

    /// Trusted accesses on the critical path of one sequential batch.
    pub fn serial_accesses(self) -> u32 {
        if self.family() == Family::Ea {
            2
        } else {
            1
        }
    }

    /// Matching prepare votes needed, the proposal counting as the primary's.
    pub fn prepare_quorum(self, f: u32) -> u32 {
        match self.regime() {
            Regime::ThreeFPlusOne => 2 * f + 1,
            Regime::TwoFPlusOne => f + 1,
        }
    }

    pub fn commit_quorum(self, f: u32) -> u32 {
        self.prepare_quorum(f)
    }

    pub fn checkpoint_quorum(self, f: u32) -> u32 {
        self.prepare_quorum(f)
    }

    pub fn view_change_quorum(self, f: u32) -> u32 {
        self.prepare_quorum(f)
    }

    pub fn completion_quorum(self, f: u32) -> u32 {
        if self.is_speculative() {
            2 * f + 1
        } else {
            f + 1
        }
    }

    /// The kind with the opposite ordering mode, where one exists.
    pub fn ordering_twin(self) -> Option<ProtocolKind> {
        use ProtocolKind::*;
        match self {
            PbftEA => Some(OPbftEA),
            OPbftEA => Some(PbftEA),
            FlexiBft => Some(OFlexiBft),
            OFlexiBft => Some(FlexiBft),
            FlexiZZ => Some(OFlexiZZ),
            OFlexiZZ => Some(FlexiZZ),
            _ => None,
        }
    }

    fn tag(self) -> u8 {
        ProtocolKind::ALL.iter().position(|k| *k == self).unwrap() as u8
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace("EA", "-EA").eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

impl Wire for ProtocolKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.tag())
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.u8()?;
        ProtocolKind::ALL
            .get(tag as usize)
            .copied()
            .ok_or(CodecError::BadTag { what: "protocol", tag })
    }
}
