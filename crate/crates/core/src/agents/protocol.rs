//! Remote-agent wire protocol: length-prefixed (4-byte big-endian) UTF-8 JSON
//! messages over a stream socket. Message types: HELLO, OBS, ACT, BYE. The
//! BEV grid travels base64-encoded.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::{BevGrid, ObservationFrame, StackedObservation};

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on a single frame, bytes.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame too large: {0} bytes")]
    FrameTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unexpected message type")]
    Unexpected,
    #[error("protocol version mismatch: peer {0}")]
    Version(u32),
}

/// Write one length-prefixed frame.
pub fn write_frame(stream: &mut impl Write, payload: &[u8]) -> Result<(), ProtocolError> {
    if payload.len() > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(payload.len()));
    }
    let len = (payload.len() as u32).to_be_bytes();
    stream.write_all(&len)?;
    stream.write_all(payload)?;
    stream.flush()?;
    Ok(())
}

/// Read one length-prefixed frame.
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>, ProtocolError> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

/// BEV as transported on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBev {
    pub size: usize,
    pub resolution: f64,
    /// Raw cell bytes, base64.
    pub data_b64: String,
}

impl WireBev {
    pub fn from_grid(grid: &BevGrid) -> Self {
        WireBev {
            size: grid.size,
            resolution: grid.resolution,
            data_b64: base64_encode(&grid.data),
        }
    }

    pub fn to_grid(&self) -> Result<BevGrid, ProtocolError> {
        let data =
            base64_decode(&self.data_b64).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if data.len() != self.size * self.size {
            return Err(ProtocolError::Malformed(format!(
                "bev payload length {} for size {}",
                data.len(),
                self.size
            )));
        }
        Ok(BevGrid {
            size: self.size,
            resolution: self.resolution,
            data,
        })
    }
}

/// Frame with the BEV replaced by its wire form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    pub goal_rel: (f64, f64),
    pub dist_to_center: f64,
    pub speed: f64,
    pub steering: f64,
    pub heading_errors: Vec<f64>,
    pub neighbors: Vec<crate::sensing::NeighborObs>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bev: Option<WireBev>,
}

impl WireFrame {
    pub fn from_frame(f: &ObservationFrame) -> Self {
        WireFrame {
            goal_rel: f.goal_rel,
            dist_to_center: f.dist_to_center,
            speed: f.speed,
            steering: f.steering,
            heading_errors: f.heading_errors.clone(),
            neighbors: f.neighbors.clone(),
            bev: f.bev.as_ref().map(WireBev::from_grid),
        }
    }

    pub fn to_frame(&self) -> Result<ObservationFrame, ProtocolError> {
        Ok(ObservationFrame {
            goal_rel: self.goal_rel,
            dist_to_center: self.dist_to_center,
            speed: self.speed,
            steering: self.steering,
            heading_errors: self.heading_errors.clone(),
            neighbors: self.neighbors.clone(),
            bev: self.bev.as_ref().map(|b| b.to_grid()).transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireStack {
    pub frames: Vec<WireFrame>,
}

impl WireStack {
    pub fn from_stack(s: &StackedObservation) -> Self {
        WireStack {
            frames: s.frames.iter().map(WireFrame::from_frame).collect(),
        }
    }

    pub fn to_stack(&self) -> Result<StackedObservation, ProtocolError> {
        if self.frames.len() != 3 {
            return Err(ProtocolError::Malformed(format!(
                "stack has {} frames",
                self.frames.len()
            )));
        }
        let mut it = self.frames.iter();
        Ok(StackedObservation {
            frames: [
                it.next().unwrap().to_frame()?,
                it.next().unwrap().to_frame()?,
                it.next().unwrap().to_frame()?,
            ],
        })
    }
}

/// Context shipped with every observation so stateless policies can act
/// identically in-process and remotely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireContext {
    pub lane_speed_limit: f64,
    pub speed: f64,
    pub current_target_speed: f64,
    pub time_headway: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
        /// Sim -> agent: requested action space. Agent -> sim: empty.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action_space: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        capabilities: Option<Capabilities>,
    },
    Obs {
        step: u64,
        observation: WireStack,
        context: WireContext,
    },
    Act {
        step: u64,
        action: crate::agents::Action,
    },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub action_spaces: Vec<String>,
}

pub fn send(stream: &mut impl Write, msg: &Message) -> Result<(), ProtocolError> {
    let payload = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    write_frame(stream, &payload)
}

pub fn recv(stream: &mut impl Read) -> Result<Message, ProtocolError> {
    let payload = read_frame(stream)?;
    serde_json::from_slice(&payload).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

// --- base64 (standard alphabet, padded) --------------------------------------

const B64: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

pub fn base64_encode(data: &[u8]) -> String {
    let mut out = String::with_capacity(data.len().div_ceil(3) * 4);
    for chunk in data.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(B64[(n >> 18) as usize & 63] as char);
        out.push(B64[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            B64[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            B64[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

pub fn base64_decode(text: &str) -> Result<Vec<u8>, String> {
    fn val(c: u8) -> Result<u32, String> {
        match c {
            b'A'..=b'Z' => Ok((c - b'A') as u32),
            b'a'..=b'z' => Ok((c - b'a' + 26) as u32),
            b'0'..=b'9' => Ok((c - b'0' + 52) as u32),
            b'+' => Ok(62),
            b'/' => Ok(63),
            _ => Err(format!("invalid base64 byte {c}")),
        }
    }
    let bytes = text.as_bytes();
    if !bytes.len().is_multiple_of(4) {
        return Err("base64 length not a multiple of 4".into());
    }
    let mut out = Vec::with_capacity(bytes.len() / 4 * 3);
    for chunk in bytes.chunks(4) {
        let pad = chunk.iter().filter(|c| **c == b'=').count();
        let mut n = 0u32;
        for (i, &c) in chunk.iter().enumerate() {
            let v = if c == b'=' {
                if i < 2 {
                    return Err("misplaced padding".into());
                }
                0
            } else {
                val(c)?
            };
            n = (n << 6) | v;
        }
        out.push((n >> 16) as u8);
        if pad < 2 {
            out.push((n >> 8) as u8);
        }
        if pad < 1 {
            out.push(n as u8);
        }
    }
    Ok(out)
}
