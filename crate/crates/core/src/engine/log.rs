//! Episode recording: newline-delimited JSON, header line first, one record
//! per step. Logs are the sole input to the metrics suite and replay.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Action;
use crate::bubbles::{ControlOwner, HandoverEvent};
use crate::map::LaneId;
use crate::sensing::EventFlags;
use crate::traffic::LaneChangeRecord;
use crate::vehicle::{ControlCommand, ControlInfo, VehicleId};

pub const LOG_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log parse error at line {0}: {1}")]
    Parse(usize, String),
    #[error("missing header line")]
    MissingHeader,
    #[error("log format {found} does not match {expected}")]
    Version { found: u32, expected: u32 },
}

/// First line of every episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: u32,
    pub kind: String,
    pub scenario: String,
    pub seed: u64,
    pub dt: f64,
    pub map: String,
    /// Agent id -> policy reference.
    pub agents: BTreeMap<String, String>,
    pub config_hash: String,
}

/// Snapshot of one vehicle within a step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub steering: f64,
    pub length: f64,
    pub width: f64,
    pub owner: ControlOwner,
    pub lane: LaneId,
    pub lane_limit: f64,
    pub dist_center: f64,
}

/// Per-ego auxiliary info logged each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfoRecord {
    pub control: ControlInfo,
    /// Remote substitution was applied to this agent's action.
    pub substituted: bool,
    pub progress: f64,
    pub wrong_way_count: u32,
}

/// Engine-detected interaction window entry (game-theoretic metrics input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub other: VehicleId,
    /// "crossing" or "merging".
    pub kind: String,
    /// The other vehicle has already passed the shared conflict area.
    pub other_cleared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnRecord {
    pub id: VehicleId,
    pub actor: String,
    pub route: Vec<LaneId>,
    pub desired_speed: f64,
}

/// One simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub step: u64,
    pub time: f64,
    pub vehicles: Vec<VehicleRecord>,
    /// Ego and social agent actions in agent space.
    pub actions: BTreeMap<String, Action>,
    /// Commands as applied to the vehicles after adapters.
    pub commands: BTreeMap<String, ControlCommand>,
    pub rewards: BTreeMap<String, RewardRecord>,
    pub dones: BTreeMap<String, bool>,
    pub events: BTreeMap<String, EventFlags>,
    pub infos: BTreeMap<String, AgentInfoRecord>,
    pub handovers: Vec<HandoverEvent>,
    pub spawns: Vec<SpawnRecord>,
    pub despawns: Vec<VehicleId>,
    pub lane_changes: Vec<LaneChangeRecord>,
    pub interactions: BTreeMap<String, Vec<InteractionRecord>>,
    pub collisions: Vec<(VehicleId, VehicleId)>,
    pub anomalies: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub raw: f64,
    pub shaped: f64,
}

/// A complete recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(serde_json::to_string(&self.header).unwrap().as_bytes());
        out.push(b'\n');
        for step in &self.steps {
            out.extend_from_slice(serde_json::to_string(step).unwrap().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, LogError> {
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or(LogError::MissingHeader)??;
        let header: LogHeader =
            serde_json::from_str(&header_line).map_err(|e| LogError::Parse(1, e.to_string()))?;
        if header.format != LOG_FORMAT {
            return Err(LogError::Version {
                found: header.format,
                expected: LOG_FORMAT,
            });
        }
        let mut steps = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepRecord =
                serde_json::from_str(&line).map_err(|e| LogError::Parse(i + 2, e.to_string()))?;
            steps.push(step);
        }
        Ok(EpisodeLog { header, steps })
    }

    /// Write atomically (temp file + rename). A `.gz` suffix gzips the body.
    pub fn write_to(&self, path: &Path) -> Result<(), LogError> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp)?;
            if path.extension().is_some_and(|e| e == "gz") {
                let mut enc =
                    flate2::write::GzEncoder::new(&mut file, flate2::Compression::default());
                enc.write_all(&bytes)?;
                enc.finish()?;
            } else {
                file.write_all(&bytes)?;
            }
            file.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, LogError> {
        let file = std::fs::File::open(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            let dec = flate2::read::GzDecoder::new(file);
            Self::from_reader(std::io::BufReader::new(dec))
        } else {
            Self::from_reader(std::io::BufReader::new(file))
        }
    }
}

/// FNV-1a over the canonical scenario + run parameters; pins a log to its
/// exact configuration.
pub fn config_hash(parts: &[&str]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for part in parts {
        for b in part.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> EpisodeLog {
        EpisodeLog {
            header: LogHeader {
                format: LOG_FORMAT,
                kind: "header".into(),
                scenario: "test".into(),
                seed: 7,
                dt: 0.1,
                map: "maps/test.json".into(),
                agents: BTreeMap::from([("a0".to_string(), "keep_lane".to_string())]),
                config_hash: config_hash(&["x"]),
            },
            steps: vec![StepRecord {
                kind: "step".into(),
                step: 0,
                time: 0.0,
                vehicles: vec![VehicleRecord {
                    id: "a0".into(),
                    x: 1.0,
                    y: 2.0,
                    heading: 0.1,
                    speed: 3.0,
                    accel: 0.5,
                    steering: 0.0,
                    length: 4.6,
                    width: 1.8,
                    owner: ControlOwner::EgoAgent("a0".into()),
                    lane: "l0".into(),
                    lane_limit: 13.9,
                    dist_center: 0.02,
                }],
                actions: BTreeMap::new(),
                commands: BTreeMap::new(),
                rewards: BTreeMap::from([(
                    "a0".to_string(),
                    RewardRecord {
                        raw: 0.3,
                        shaped: 0.3,
                    },
                )]),
                dones: BTreeMap::from([("a0".to_string(), false)]),
                events: BTreeMap::new(),
                infos: BTreeMap::new(),
                handovers: vec![],
                spawns: vec![],
                despawns: vec![],
                lane_changes: vec![],
                interactions: BTreeMap::new(),
                collisions: vec![],
                anomalies: vec![],
            }],
        }
    }

    #[test]
    fn round_trips_through_bytes() {
        let log = sample_log();
        let bytes = log.to_bytes();
        let parsed = EpisodeLog::from_reader(std::io::Cursor::new(&bytes)).unwrap();
        assert_eq!(parsed, log);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn gzip_round_trip_via_files() {
        let dir = std::env::temp_dir().join(format!("waysim-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let log = sample_log();
        let plain = dir.join("ep.jsonl");
        let gz = dir.join("ep.jsonl.gz");
        log.write_to(&plain).unwrap();
        log.write_to(&gz).unwrap();
        assert_eq!(EpisodeLog::read_from(&plain).unwrap(), log);
        assert_eq!(EpisodeLog::read_from(&gz).unwrap(), log);
        assert!(std::fs::metadata(&gz).unwrap().len() < std::fs::metadata(&plain).unwrap().len() + 200);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let mut log = sample_log();
        log.header.format = 99;
        let bytes = log.to_bytes();
        assert!(matches!(
            EpisodeLog::from_reader(std::io::Cursor::new(&bytes)),
            Err(LogError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&["scenario", "42"]);
        let b = config_hash(&["scenario", "42"]);
        let c = config_hash(&["scenario", "43"]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}
