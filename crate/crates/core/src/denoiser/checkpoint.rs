//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! ([`CheckpointMeta`]), then little-endian `f32` parameters and, when
//! present, the optimizer step count and both moment vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::sampler::NoiseFamily;
use crate::schedule::ScheduleParams;

const MAGIC: &[u8; 8] = b"OCTDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub schedule: ScheduleParams,
    pub network: UNetConfig,
    pub noise_family: NoiseFamily,
    pub iteration: usize,
    pub train: Option<TrainConfig>,
}

impl CheckpointMeta {
    pub fn new(
        schedule: ScheduleParams,
        network: UNetConfig,
        noise_family: NoiseFamily,
        iteration: usize,
        train: Option<TrainConfig>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            schedule,
            network,
            noise_family,
            iteration,
            train,
        }
    }

    /// Fails unless the checkpoint was trained with exactly `params`.
    pub fn check_schedule(&self, params: &ScheduleParams) -> Result<()> {
        if &self.schedule != params {
            return Err(Error::ScheduleMismatch(format!(
                "checkpoint trained with {:?}, requested {:?}",
                self.schedule, params
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: UNet,
    pub(crate) optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// A weights-only checkpoint, e.g. for a network trained elsewhere.
    pub fn from_network(net: UNet, schedule: ScheduleParams, noise_family: NoiseFamily, iteration: usize) -> Self {
        Self {
            meta: CheckpointMeta::new(schedule, *net.config(), noise_family, iteration, None),
            net,
            optimizer: None,
        }
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.optimizer.is_some()
    }
}

fn write_f32s<W: Write>(out: &mut W, xs: &[f32]) -> std::io::Result<()> {
    out.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f32>> {
    let n = read_u64(r)? as usize;
    if n != expected {
        return Err(Error::Checkpoint(format!("expected {expected} values, found {n}")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    write_f32s(&mut out, ckpt.net.params())?;
    match &ckpt.optimizer {
        Some(o) => {
            out.write_all(&[1])?;
            out.write_all(&o.step.to_le_bytes())?;
            write_f32s(&mut out, &o.m)?;
            write_f32s(&mut out, &o.v)?;
        }
        None => out.write_all(&[0])?,
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = read_u64(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("header too large".into()));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    meta.network.validate()?;
    let expected = UNet::new(meta.network, 0)?.num_params();
    let params = read_f32s(&mut r, expected)?;
    let net = UNet::from_params(meta.network, params)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let m = read_f32s(&mut r, expected)?;
            let v = read_f32s(&mut r, expected)?;
            Some(OptimizerState { step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    Ok(Checkpoint { meta, net, optimizer })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_checkpoint(BufWriter::new(File::create(&tmp)?), ckpt)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNet {
        UNet::new(
            UNetConfig {
                widths: [4, 8, 8],
                groups: 2,
                time_features: 8,
                embed_dim: 8,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = small();
        let n = net.num_params();
        let ckpt = Checkpoint {
            meta: CheckpointMeta::new(ScheduleParams::default(), *net.config(), NoiseFamily::Gamma, 42, None),
            net,
            optimizer: Some(OptimizerState {
                step: 42,
                m: (0..n).map(|i| i as f32 * 0.5).collect(),
                v: vec![0.25; n],
            }),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.net.params(), ckpt.net.params());
        assert_eq!(back.optimizer, ckpt.optimizer);
    }

    #[test]
    fn schedule_mismatch_is_reported() {
        let ckpt = Checkpoint::from_network(small(), ScheduleParams::default(), NoiseFamily::Gaussian, 0);
        let other = ScheduleParams {
            steps: 500,
            ..Default::default()
        };
        assert!(matches!(
            ckpt.meta.check_schedule(&other),
            Err(Error::ScheduleMismatch(_))
        ));
        assert!(ckpt.meta.check_schedule(&ScheduleParams::default()).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read_checkpoint(&b"nope"[..]).is_err());
        assert!(read_checkpoint(&b"NOTACKPTxxxxxxxxxxxx"[..]).is_err());
        let ckpt = Checkpoint::from_network(small(), ScheduleParams::default(), NoiseFamily::Gamma, 0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
