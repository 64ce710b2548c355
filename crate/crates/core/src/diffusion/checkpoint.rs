//! Self-describing binary checkpoint for the diffusion prior: schedule
//! name, architecture, training config, live weights, and the EMA shadow.
//! Everything is little-endian; the magic carries the format version.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::nn::unet::{UNet, UNetArch};

use super::TrainConfig;

pub const CKPT_MAGIC: &[u8; 8] = b"EDHZCKP1";

pub fn save_checkpoint(
    path: &Path,
    net: &UNet,
    schedule_name: &str,
    config: &TrainConfig,
) -> Result<()> {
    let mut w = ByteWriter::new(CKPT_MAGIC);
    w.str8(schedule_name);
    w.u32(net.arch.base_channels as u32);
    w.f64(config.lambda_kid);
    w.u32(config.n_kid as u32);
    w.u32(config.kid_every as u32);
    w.f64(config.ema_decay);
    w.f64(config.lr_pretrain);
    w.f64(config.lr_finetune);
    w.u8(config.finetune as u8);
    w.u32(config.batch_size as u32);
    w.u32(config.steps as u32);
    w.u64(config.seed);
    w.params(&net.params);
    w.params(&net.ema);
    atomic_write(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(UNet, String, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, CKPT_MAGIC, path)?;
    let schedule_name = r.str8()?;
    let base_channels = r.u32()? as usize;
    let config = TrainConfig {
        lambda_kid: r.f64()?,
        n_kid: r.u32()? as usize,
        kid_every: r.u32()? as usize,
        ema_decay: r.f64()?,
        lr_pretrain: r.f64()?,
        lr_finetune: r.f64()?,
        finetune: r.u8()? != 0,
        batch_size: r.u32()? as usize,
        steps: r.u32()? as usize,
        seed: r.u64()?,
    };
    let params = r.params()?;
    let ema = r.params()?;
    r.finish()?;

    let arch = UNetArch { base_channels };
    let reference = UNet::new(arch, 0);
    for (set, which) in [(&params, "params"), (&ema, "ema")] {
        if set.entries.len() != reference.params.entries.len() {
            return Err(Error::io(path, format!("{which}: wrong tensor count for architecture")));
        }
        for ((name, t), (ref_name, ref_t)) in set.entries.iter().zip(&reference.params.entries) {
            if name != ref_name || t.dims() != ref_t.dims() {
                return Err(Error::io(
                    path,
                    format!("{which}: tensor '{name}' does not match architecture"),
                ));
            }
        }
    }
    Ok((UNet { arch, params, ema }, schedule_name, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("prior.ckpt");
        let mut net = UNet::new(UNetArch { base_channels: 4 }, 9);
        // make params and ema differ so the two blobs are distinguishable
        net.params.entries[0].1.data[0] = 0.123_456_7;
        let cfg = TrainConfig { seed: 42, finetune: true, ..TrainConfig::default() };
        save_checkpoint(&path, &net, "vp-cosine", &cfg).unwrap();
        let (loaded, schedule, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(schedule, "vp-cosine");
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.arch, net.arch);
        assert_eq!(loaded.params.distance(&net.params), 0.0);
        assert_eq!(loaded.ema.distance(&net.ema), 0.0);
        for ((a, _), (b, _)) in loaded.params.entries.iter().zip(&net.params.entries) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("prior.ckpt");
        let net = UNet::new(UNetArch { base_channels: 4 }, 1);
        save_checkpoint(&path, &net, "vp-cosine", &TrainConfig::default()).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
