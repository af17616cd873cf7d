//! Versioned JSON checkpoints: a header (format version, net config,
//! rng seed) plus named flat f64 arrays. serde_json emits
//! shortest-roundtrip decimal text, so save/load is bit-exact and the
//! files diff cleanly.

use super::{NetConfig, NetParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: NetConfig,
    rng_seed: u64,
    params: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Parse(String),
    UnsupportedVersion(u32),
    MissingParam(String),
    ShapeMismatch { name: String, expected: usize, got: usize },
    UnknownParam(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Parse(e) => write!(f, "checkpoint parse error: {e}"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint format version {v}")
            }
            CheckpointError::MissingParam(n) => write!(f, "checkpoint missing parameter {n}"),
            CheckpointError::ShapeMismatch { name, expected, got } => {
                write!(f, "parameter {name} holds {got} values, expected {expected}")
            }
            CheckpointError::UnknownParam(n) => write!(f, "checkpoint has unknown parameter {n}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn checkpoint_to_string(net: &NetParams, rng_seed: u64) -> String {
    let mut params = BTreeMap::new();
    for (name, tensor) in net.params.iter() {
        params.insert(name.to_string(), tensor.data().to_vec());
    }
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: net.cfg.clone(),
        rng_seed,
        params,
    };
    serde_json::to_string(&file).expect("checkpoint serialization")
}

pub fn save_checkpoint(path: &Path, net: &NetParams, rng_seed: u64) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_to_string(net, rng_seed))?;
    Ok(())
}

pub fn checkpoint_from_str(text: &str) -> Result<(NetParams, u64), CheckpointError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(file.format_version));
    }
    // rebuild shapes/ids from the config, then overwrite every tensor
    let mut net = NetParams::init(file.config, 0);
    for (name, _) in net.params.clone().iter() {
        if !file.params.contains_key(name) {
            return Err(CheckpointError::MissingParam(name.to_string()));
        }
    }
    for (name, values) in &file.params {
        let id = net
            .params
            .id(name)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        let t = net.params.get_mut(id);
        if t.numel() != values.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: t.numel(),
                got: values.len(),
            });
        }
        t.data_mut().copy_from_slice(values);
    }
    Ok((net, file.rng_seed))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetParams, u64), CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tiny_test_cfg;

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = NetParams::init(tiny_test_cfg(), 42);
        let text = checkpoint_to_string(&net, 42);
        let (loaded, seed) = checkpoint_from_str(&text).unwrap();
        assert_eq!(seed, 42);
        for ((na, ta), (nb, tb)) in net.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            let same = ta
                .data()
                .iter()
                .zip(tb.data().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "parameter {na} not bit-identical");
        }
        // and serialization itself is deterministic
        assert_eq!(text, checkpoint_to_string(&loaded, 42));
    }

    #[test]
    fn missing_parameter_is_detected() {
        let net = NetParams::init(tiny_test_cfg(), 1);
        let text = checkpoint_to_string(&net, 1);
        let broken = text.replace("\"embed\"", "\"embed_gone\"");
        match checkpoint_from_str(&broken) {
            Err(CheckpointError::MissingParam(n)) => assert_eq!(n, "embed"),
            other => panic!("expected MissingParam, got {other:?}"),
        }
    }

    #[test]
    fn version_gate() {
        let net = NetParams::init(tiny_test_cfg(), 1);
        let text = checkpoint_to_string(&net, 1).replace(
            "\"format_version\":1",
            "\"format_version\":9",
        );
        assert!(matches!(
            checkpoint_from_str(&text),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }
}
