//! Shared-medium frame format.
//!
//! One communication round is carried by a single centrally assembled
//! frame. The layout is normative; all multi-octet fields are
//! little-endian:
//!
//! ```text
//! offset  size  field
//! 0       1     version (currently 1)
//! 1       1     n, number of agents in the frame
//! 2       2     p, protocol message length (u16)
//! 4       3*n   per-agent headers, in order:
//!                 +0  agent_id (u8), strictly increasing
//!                 +1  k (u16), number of complex coefficients, 1 <= k <= p/2 + 1
//! 4+3n    8*Σk  payload: for each agent in header order, k coefficients
//!               as (re, im) pairs of IEEE-754 binary32
//! ```
//!
//! A coefficient costs two bandwidth units and a unit is serialized as
//! four octets, so the payload length is exactly `4 * Σ b_i` octets and a
//! whole frame occupies `4 + 3n + 4 * Σ b_i`.

use num_complex::Complex64;
use thiserror::Error;

use crate::codec::{one_sided_len, ClippedSpectrum};
use crate::scheduler::BudgetVector;

pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4;
pub const PER_AGENT_HEADER_LEN: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("frame build failed: {0}")]
    FrameBuild(String),
    #[error("malformed frame at offset {offset}: {reason}")]
    MalformedFrame { offset: usize, reason: String },
}

fn malformed(offset: usize, reason: impl Into<String>) -> WireError {
    WireError::MalformedFrame {
        offset,
        reason: reason.into(),
    }
}

/// Serialize one round: every agent's clipped spectrum, in agent order.
///
/// `msgs[i]` must occupy exactly `budgets[i]` units and all messages must
/// share the same original length `p`.
pub fn encode_frame(
    budgets: &BudgetVector,
    msgs: &[ClippedSpectrum],
) -> Result<Vec<u8>, WireError> {
    if budgets.len() != msgs.len() {
        return Err(WireError::FrameBuild(format!(
            "{} budgets but {} messages",
            budgets.len(),
            msgs.len()
        )));
    }
    let n = msgs.len();
    if n > u8::MAX as usize {
        return Err(WireError::FrameBuild(format!("{n} agents exceed u8 range")));
    }
    let p = msgs.first().map_or(0, |m| m.original_len());
    if n > 0 && p > u16::MAX as usize {
        return Err(WireError::FrameBuild(format!(
            "message length {p} exceeds u16 range"
        )));
    }

    let mut frame = Vec::with_capacity(
        HEADER_LEN + PER_AGENT_HEADER_LEN * n + 4 * budgets.total(),
    );
    frame.push(FRAME_VERSION);
    frame.push(n as u8);
    frame.extend_from_slice(&(p as u16).to_le_bytes());

    for (i, msg) in msgs.iter().enumerate() {
        if msg.original_len() != p {
            return Err(WireError::FrameBuild(format!(
                "agent {i} has original length {} but the frame carries {p}",
                msg.original_len()
            )));
        }
        if msg.budget() != budgets.get(i) {
            return Err(WireError::FrameBuild(format!(
                "agent {i} occupies {} units but was granted {}",
                msg.budget(),
                budgets.get(i)
            )));
        }
        frame.push(i as u8);
        frame.extend_from_slice(&(msg.coefficients().len() as u16).to_le_bytes());
    }

    for (i, msg) in msgs.iter().enumerate() {
        for c in msg.coefficients() {
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(WireError::FrameBuild(format!(
                    "agent {i} has a non-finite coefficient"
                )));
            }
            frame.extend_from_slice(&(c.re as f32).to_le_bytes());
            frame.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    Ok(frame)
}

/// Parse a frame back into budgets and clipped spectra.
///
/// Every structural violation is reported with the octet offset at which
/// it was detected.
pub fn decode_frame(bytes: &[u8]) -> Result<(BudgetVector, Vec<ClippedSpectrum>), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(
            bytes.len(),
            format!("frame header needs {HEADER_LEN} octets, got {}", bytes.len()),
        ));
    }
    if bytes[0] != FRAME_VERSION {
        return Err(malformed(0, format!("unknown version {}", bytes[0])));
    }
    let n = bytes[1] as usize;
    let p = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
    if n > 0 && p < 2 {
        return Err(malformed(2, format!("message length {p} is below 2")));
    }

    let headers_end = HEADER_LEN + PER_AGENT_HEADER_LEN * n;
    if bytes.len() < headers_end {
        return Err(malformed(
            bytes.len(),
            format!("truncated inside per-agent headers (need {headers_end} octets)"),
        ));
    }

    let mut ks = Vec::with_capacity(n);
    let mut prev_id: Option<u8> = None;
    for i in 0..n {
        let off = HEADER_LEN + PER_AGENT_HEADER_LEN * i;
        let agent_id = bytes[off];
        if let Some(prev) = prev_id {
            if agent_id <= prev {
                return Err(malformed(
                    off,
                    format!("agent ids must be strictly increasing ({prev} then {agent_id})"),
                ));
            }
        }
        prev_id = Some(agent_id);
        let k = u16::from_le_bytes([bytes[off + 1], bytes[off + 2]]) as usize;
        if k == 0 {
            return Err(malformed(off + 1, "zero coefficients (minimum grant is 2 units)"));
        }
        if k > one_sided_len(p) {
            return Err(malformed(
                off + 1,
                format!("{k} coefficients exceed the one-sided spectrum of length {p}"),
            ));
        }
        ks.push(k);
    }

    let payload_len: usize = ks.iter().map(|k| 8 * k).sum();
    let expected = headers_end + payload_len;
    if bytes.len() < expected {
        return Err(malformed(
            bytes.len(),
            format!("truncated payload (expected {expected} octets)"),
        ));
    }
    if bytes.len() > expected {
        return Err(malformed(
            expected,
            format!("{} trailing octets after payload", bytes.len() - expected),
        ));
    }

    let mut msgs = Vec::with_capacity(n);
    let mut offset = headers_end;
    for &k in &ks {
        let mut coeffs = Vec::with_capacity(k);
        for _ in 0..k {
            let re = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            let im = f32::from_le_bytes(bytes[offset + 4..offset + 8].try_into().unwrap());
            if !re.is_finite() || !im.is_finite() {
                return Err(malformed(offset, "non-finite coefficient"));
            }
            coeffs.push(Complex64::new(re as f64, im as f64));
            offset += 8;
        }
        let msg = ClippedSpectrum::from_parts(coeffs, p)
            .map_err(|e| malformed(offset, e.to_string()))?;
        msgs.push(msg);
    }
    let budgets = BudgetVector::new(ks.iter().map(|k| 2 * k).collect());
    Ok((budgets, msgs))
}

/// Exact octet length of a frame for `n` agents with total granted units
/// `sum_b`.
pub fn frame_len(n: usize, sum_b: usize) -> usize {
    HEADER_LEN + PER_AGENT_HEADER_LEN * n + 4 * sum_b
}
