//! Metered two-phase communication simulator.
//!
//! Each frame runs a synchronous protocol round: every in-range
//! collaborator broadcasts one meta-packet per carried channel (its
//! reliability token), the ego decides, and only accepted pairs
//! transmit their feature payload. Transport is in-process, but every
//! packet passes through its real wire encoding so byte accounting and
//! round-trip fidelity are exact.
//!
//! Wire formats, all little-endian:
//! - meta-packet, 7 bytes: sender id (u16), channel id (u8),
//!   reliability token (f32);
//! - feature packet, `3 + 8·D` bytes: sender id (u16), channel id (u8),
//!   then the feature map and the log-variance map as `D` f32 values
//!   each.
//!
//! Floats travel as 32-bit on the wire while the in-graph pipeline
//! stays 64-bit; the metered bytes are what the protocol would really
//! ship. Request messages (one bit per offered pair) are treated as
//! negligible and excluded from the byte totals.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("no encoding available for accepted pair (agent {agent}, modality {modality})")]
    MissingEncoding { agent: usize, modality: usize },
    #[error("packet buffer has {got} bytes, expected {expected}")]
    WireSize { expected: usize, got: usize },
    #[error("agent id {0} does not fit the wire format")]
    SenderOverflow(usize),
    #[error("modality id {0} does not fit the wire format")]
    ModalityOverflow(usize),
    #[error("no frames logged")]
    Empty,
}

/// Reliability-token broadcast: 7 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaPacket {
    pub sender: u16,
    pub modality: u8,
    pub rho: f32,
}

impl MetaPacket {
    pub const WIRE_SIZE: usize = 7;

    pub fn to_bytes(&self) -> [u8; Self::WIRE_SIZE] {
        let mut out = [0u8; Self::WIRE_SIZE];
        out[0..2].copy_from_slice(&self.sender.to_le_bytes());
        out[2] = self.modality;
        out[3..7].copy_from_slice(&self.rho.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommsError> {
        if bytes.len() != Self::WIRE_SIZE {
            return Err(CommsError::WireSize {
                expected: Self::WIRE_SIZE,
                got: bytes.len(),
            });
        }
        Ok(Self {
            sender: u16::from_le_bytes([bytes[0], bytes[1]]),
            modality: bytes[2],
            rho: f32::from_le_bytes([bytes[3], bytes[4], bytes[5], bytes[6]]),
        })
    }
}

/// Accepted-pair payload: feature and log-variance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePacket {
    pub sender: u16,
    pub modality: u8,
    pub f: Vec<f32>,
    pub u: Vec<f32>,
}

impl FeaturePacket {
    pub fn wire_size(embed_dim: usize) -> usize {
        3 + 8 * embed_dim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::wire_size(self.f.len()));
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.push(self.modality);
        for v in self.f.iter().chain(&self.u) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], embed_dim: usize) -> Result<Self, CommsError> {
        let expected = Self::wire_size(embed_dim);
        if bytes.len() != expected {
            return Err(CommsError::WireSize {
                expected,
                got: bytes.len(),
            });
        }
        let read_f32 = |at: usize| {
            f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
        };
        let f = (0..embed_dim).map(|i| read_f32(3 + 4 * i)).collect();
        let u = (0..embed_dim)
            .map(|i| read_f32(3 + 4 * embed_dim + 4 * i))
            .collect();
        Ok(Self {
            sender: u16::from_le_bytes([bytes[0], bytes[1]]),
            modality: bytes[2],
            f,
            u,
        })
    }
}

/// Per-frame byte and pair accounting for the shared-package metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCommLog {
    pub meta_bytes: usize,
    pub feature_bytes: usize,
    pub total_bytes: usize,
    pub accepted_pairs: usize,
    pub offered_pairs: usize,
}

fn wire_ids(agent: usize, modality: usize) -> Result<(u16, u8), CommsError> {
    let sender = u16::try_from(agent).map_err(|_| CommsError::SenderOverflow(agent))?;
    let modality = u8::try_from(modality).map_err(|_| CommsError::ModalityOverflow(modality))?;
    Ok((sender, modality))
}

/// Phase one: every offered (collaborator, channel) pair broadcasts its
/// reliability token. Returns the packets and their byte total.
pub fn handshake(
    offers: &[(usize, usize, f64)],
) -> Result<(Vec<MetaPacket>, usize), CommsError> {
    let packets: Vec<MetaPacket> = offers
        .iter()
        .map(|&(agent, modality, rho)| {
            let (sender, modality) = wire_ids(agent, modality)?;
            Ok(MetaPacket {
                sender,
                modality,
                rho: rho as f32,
            })
        })
        .collect::<Result<_, CommsError>>()?;
    let bytes = packets.len() * MetaPacket::WIRE_SIZE;
    Ok((packets, bytes))
}

/// Byte-level encoding of one provider's maps, keyed by (agent,
/// channel).
pub type EncodingTable = HashMap<(usize, usize), (Vec<f64>, Vec<f64>)>;

/// Phase two: transmit payloads for accepted pairs only. An accepted
/// pair with no stored encoding is a protocol violation.
pub fn request_features(
    accepted: &[(usize, usize)],
    encodings: &EncodingTable,
) -> Result<(Vec<FeaturePacket>, usize), CommsError> {
    let mut packets = Vec::with_capacity(accepted.len());
    let mut bytes = 0;
    for &(agent, modality) in accepted {
        let (f, u) = encodings
            .get(&(agent, modality))
            .ok_or(CommsError::MissingEncoding { agent, modality })?;
        let (sender, modality) = wire_ids(agent, modality)?;
        let packet = FeaturePacket {
            sender,
            modality,
            f: f.iter().map(|&v| v as f32).collect(),
            u: u.iter().map(|&v| v as f32).collect(),
        };
        bytes += FeaturePacket::wire_size(packet.f.len());
        packets.push(packet);
    }
    Ok((packets, bytes))
}

/// Mean per-frame kilobytes over an episode's logs.
pub fn package_size(logs: &[FrameCommLog]) -> Result<f64, CommsError> {
    if logs.is_empty() {
        return Err(CommsError::Empty);
    }
    let total: usize = logs.iter().map(|l| l.total_bytes).sum();
    Ok(total as f64 / logs.len() as f64 / 1024.0)
}

/// Plot-ready CSV rows for the per-frame logs, header included.
pub fn comm_log_csv(logs: &[FrameCommLog]) -> String {
    let mut out =
        String::from("frame,meta_bytes,feature_bytes,total_bytes,accepted_pairs,offered_pairs\n");
    for (i, l) in logs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, l.meta_bytes, l.feature_bytes, l.total_bytes, l.accepted_pairs, l.offered_pairs
        ));
    }
    out
}
