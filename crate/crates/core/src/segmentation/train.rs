//! Segmenter training: mean BCE on the two logit channels against the binary
//! region masks, Adam updates, seeded batching, and a weights-only
//! checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::nn::graph::{Graph, Tensor};
use crate::nn::segnet::{SegArch, SegNet};
use crate::nn::Adam;
use crate::raster::Raster;

use super::{binarize, segment_regions, NetSegmenter, RegionSegmenter, SegWeights};

pub const SEG_MAGIC: &[u8; 8] = b"EDHZSEG1";

/// One labeled pair: (hazy image, ventricle mask, septum mask).
pub type LabeledPair = (Raster, Raster, Raster);

#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_channels: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig { learning_rate: 5e-4, steps: 400, batch_size: 8, seed: 0, base_channels: 8 }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Param("learning_rate must be positive and finite".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Param("steps and batch_size must be >= 1".into()));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::Param("base_channels must be a positive multiple of 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegTrainRecord {
    /// Mean batch BCE at every step.
    pub losses: Vec<f64>,
    /// Dice over the training pairs at the default logit threshold.
    pub dice_ventricle: f64,
    pub dice_septum: f64,
}

fn validate_dataset(dataset: &[LabeledPair]) -> Result<(usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::Param("training dataset is empty".into()));
    }
    let (h, w) = dataset[0].0.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Param(format!("images must have dimensions divisible by 4, got {h}x{w}")));
    }
    for (i, (y, v, s)) in dataset.iter().enumerate() {
        y.check_same_shape(&dataset[0].0, "dataset image")?;
        v.check_same_shape(y, "ventricle mask")?;
        s.check_same_shape(y, "septum mask")?;
        if !v.is_binary() || !s.is_binary() {
            return Err(Error::Param(format!("masks of pair {i} are not binary")));
        }
        if !y.as_slice().iter().all(|t| (0.0..=1.0).contains(t)) {
            return Err(Error::Param(format!("image {i} has values outside [0,1]")));
        }
    }
    Ok((h, w))
}

/// Train a fresh segmenter on labeled pairs. Intended for dozens of pairs or
/// more; a single pair is accepted and simply memorized.
pub fn train_region_segmenter(
    dataset: &[LabeledPair],
    config: &SegTrainConfig,
) -> Result<(NetSegmenter, SegTrainRecord)> {
    config.validate()?;
    let (h, w) = validate_dataset(dataset)?;
    let plane = h * w;
    let mut net = SegNet::new(SegArch { base_channels: config.base_channels }, config.seed);
    let mut adam = Adam::new(config.learning_rate as f32, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let b = config.batch_size;
        let mut x_data = vec![0.0f32; b * plane];
        let mut t_data = vec![0.0f32; b * 2 * plane];
        for bi in 0..b {
            let i = rng.random_range(0..dataset.len());
            let (y, v, s) = &dataset[i];
            x_data[bi * plane..(bi + 1) * plane].copy_from_slice(y.as_slice());
            t_data[bi * 2 * plane..bi * 2 * plane + plane].copy_from_slice(v.as_slice());
            t_data[bi * 2 * plane + plane..(bi + 1) * 2 * plane].copy_from_slice(s.as_slice());
        }
        let x = Tensor::from_vec(b, 1, h, w, x_data)?;
        let t = Tensor::from_vec(b, 2, h, w, t_data)?;

        let mut g = Graph::new();
        let leaves = net.param_leaves(&net.params, &mut g);
        let xid = g.leaf(x);
        let tid = g.leaf(t);
        let logits = net.forward_with_leaves(&mut g, &leaves, xid);
        let loss = g.bce_with_logits(logits, tid);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("segmenter loss diverged at step {step}")));
        }
        losses.push(value);
        let grads = g.backward(loss, None);
        let gvecs: Vec<Option<Vec<f32>>> =
            leaves.iter().map(|&id| grads.get(id).map(|s| s.to_vec())).collect();
        adam.step(&mut net.params, &gvecs);
    }
    let seg = NetSegmenter { net };
    let (dice_ventricle, dice_septum) = evaluate_dice(&seg, dataset, SegWeights::default().theta)?;
    Ok((seg, SegTrainRecord { losses, dice_ventricle, dice_septum }))
}

/// Dice overlap of two binary rasters; 1.0 when both are empty.
pub fn dice(a: &Raster, b: &Raster) -> Result<f64> {
    a.check_same_shape(b, "dice")?;
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::Param("dice expects binary rasters".into()));
    }
    let inter = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .filter(|&(&x, &y)| x != 0.0 && y != 0.0)
        .count();
    let total = a.count_nonzero() + b.count_nonzero();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean ventricle/septum Dice over labeled pairs, thresholding logits at
/// `theta`.
pub fn evaluate_dice(
    model: &dyn RegionSegmenter,
    data: &[LabeledPair],
    theta: f32,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Param("no evaluation pairs".into()));
    }
    let (mut dv, mut ds) = (0.0, 0.0);
    for (y, v, s) in data {
        let logits = segment_regions(y, model)?;
        dv += dice(&binarize(&logits.ventricle_logits, theta), v)?;
        ds += dice(&binarize(&logits.septum_logits, theta), s)?;
    }
    let n = data.len() as f64;
    Ok((dv / n, ds / n))
}

pub fn save_segmenter(path: &Path, net: &SegNet) -> Result<()> {
    let mut w = ByteWriter::new(SEG_MAGIC);
    w.u32(net.arch.base_channels as u32);
    w.params(&net.params);
    atomic_write(path, &w.buf)
}

pub fn load_segmenter(path: &Path) -> Result<SegNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, SEG_MAGIC, path)?;
    let base_channels = r.u32()? as usize;
    if base_channels == 0 || base_channels % 4 != 0 {
        return Err(Error::io(path, format!("invalid base_channels {base_channels}")));
    }
    let params = r.params()?;
    r.finish()?;
    let arch = SegArch { base_channels };
    let reference = SegNet::new(arch, 0);
    if params.entries.len() != reference.params.entries.len() {
        return Err(Error::io(path, "wrong tensor count for architecture"));
    }
    for ((name, t), (ref_name, ref_t)) in params.entries.iter().zip(&reference.params.entries) {
        if name != ref_name || t.dims() != ref_t.dims() {
            return Err(Error::io(path, format!("tensor '{name}' does not match architecture")));
        }
    }
    Ok(SegNet { arch, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use tempfile::tempdir;

    fn pair(seed: u64) -> LabeledPair {
        let spec = PhantomSpec { height: 32, width: 32, seed, ..PhantomSpec::default() };
        let p = generate_phantom(&spec).unwrap();
        (p.hazy, p.ventricle_mask, p.septum_mask)
    }

    #[test]
    fn default_learning_rate_matches_reference_setting() {
        assert_eq!(SegTrainConfig::default().learning_rate, 5e-4);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = train_region_segmenter(&[], &SegTrainConfig::default());
        assert!(matches!(err, Err(Error::Param(_))));
    }

    #[test]
    fn dice_oracle_cases() {
        let a = Raster::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Raster::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = Raster::zeros(2, 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&Raster::filled(2, 2, 0.5), &a).is_err());
    }

    #[test]
    fn one_sample_is_memorized() {
        let data = vec![pair(11)];
        let config = SegTrainConfig { steps: 200, batch_size: 1, ..SegTrainConfig::default() };
        let (_, record) = train_region_segmenter(&data, &config).unwrap();
        let mean = 0.5 * (record.dice_ventricle + record.dice_septum);
        assert!(mean >= 0.95, "dice v={} s={}", record.dice_ventricle, record.dice_septum);
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![pair(1), pair(2)];
        let config = SegTrainConfig { steps: 12, batch_size: 2, ..SegTrainConfig::default() };
        let (a, ra) = train_region_segmenter(&data, &config).unwrap();
        let (b, rb) = train_region_segmenter(&data, &config).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.net.params.distance(&b.net.params), 0.0);
    }

    #[test]
    fn segmenter_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        let mut net = SegNet::new(SegArch { base_channels: 8 }, 5);
        net.params.entries[0].1.data[0] = 0.731;
        save_segmenter(&path, &net).unwrap();
        let back = load_segmenter(&path).unwrap();
        assert_eq!(back.arch, net.arch);
        assert_eq!(back.params.distance(&net.params), 0.0);
    }

    #[test]
    fn segmenter_checkpoint_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        let net = SegNet::new(SegArch { base_channels: 8 }, 5);
        save_segmenter(&path, &net).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_segmenter(&path).is_err());
    }
}
