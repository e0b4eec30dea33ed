use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{param_count, Mlp};
use super::ppo::ActorCritic;
use super::{PpoConfig, RlError};
use crate::pipeline::HorizonBounds;

const FORMAT: &str = "telesync-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Trained on recorded or synthetic operator motion.
    Recorded,
    /// Fine-tuned with a live operator.
    Hitl,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Recorded => "recorded",
            Phase::Hitl => "hitl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub phase: Phase,
    /// Episodes trained so far, both phases together.
    pub episodes: usize,
    pub seed: u64,
    pub config: PpoConfig,
    pub bounds: HorizonBounds,
    pub policy_sizes: Vec<usize>,
    pub value_sizes: Vec<usize>,
}

/// Trained agent plus metadata. On disk: one line of JSON header, then the
/// policy and value parameters as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub agent: ActorCritic,
}

impl Checkpoint {
    pub fn new(agent: ActorCritic, phase: Phase, episodes: usize, seed: u64, config: PpoConfig) -> Self {
        Self {
            header: CheckpointHeader {
                format: FORMAT.into(),
                phase,
                episodes,
                seed,
                config,
                bounds: agent.bounds,
                policy_sizes: agent.policy.sizes().to_vec(),
                value_sizes: agent.value.sizes().to_vec(),
            },
            agent,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), RlError> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for p in self.agent.policy.params().iter().chain(self.agent.value.params()) {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, RlError> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| RlError::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(RlError::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (np, nv) = (param_count(&header.policy_sizes), param_count(&header.value_sizes));
        if bytes.len() != 8 * (np + nv) {
            return Err(RlError::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                np + nv,
                bytes.len()
            )));
        }
        let mut params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = params.split_off(np);
        let bad = || RlError::Checkpoint("layer sizes do not match the parameter count".into());
        let policy = Mlp::from_params(&header.policy_sizes, params).ok_or_else(bad)?;
        let value = Mlp::from_params(&header.value_sizes, value).ok_or_else(bad)?;
        let heads = (header.bounds.h_r_max + header.bounds.h_c_max + 2) as usize;
        if policy.sizes().last() != Some(&heads) || value.sizes().last() != Some(&1) {
            return Err(RlError::Checkpoint(
                "output widths do not match the horizon bounds".into(),
            ));
        }
        Ok(Self {
            agent: ActorCritic {
                bounds: header.bounds,
                policy,
                value,
            },
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        let f = std::fs::File::open(path)
            .map_err(|e| RlError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bounds = HorizonBounds {
            h_r_max: 20,
            h_c_max: 10,
        };
        let agent = ActorCritic::new(bounds, &[8, 8], &mut rng);
        let ck = Checkpoint::new(agent, Phase::Recorded, 3, 9, PpoConfig::default());
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let nl = buf.iter().position(|b| *b == b'\n').unwrap();
        assert_eq!((buf.len() - nl - 1) % 8, 0);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let agent = ActorCritic::new(HorizonBounds::default(), &[4], &mut rng);
        let mut buf = Vec::new();
        Checkpoint::new(agent, Phase::Hitl, 1, 0, PpoConfig::default())
            .write(&mut buf)
            .unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(RlError::Checkpoint(_))));
    }
}
