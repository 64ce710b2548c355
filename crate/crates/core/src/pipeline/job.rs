//! Per-image dehaze jobs over phantom datasets: segment, compose guidance,
//! run the guided sampler, evaluate, persist. Completed images are skipped
//! on rerun via a content-hash manifest, so an interrupted job converges to
//! the same output tree as an uninterrupted one.

#[cfg(feature = "png")]
use std::collections::BTreeMap;
#[cfg(feature = "png")]
use std::fs;
#[cfg(feature = "png")]
use std::path::Path;

#[cfg(feature = "png")]
use sha2::{Digest, Sha256};

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
#[cfg(feature = "png")]
use crate::io::{
    atomic_write, read_f32, read_mask_png, read_png, write_f32, write_mask_png, write_png,
};
use crate::metrics::{evaluate_image, kid_score, MetricReport};
use crate::nn::embed::RandomConvEmbedder;
use crate::phantom::PhantomSample;
use crate::pipeline::config::RunConfig;
use crate::raster::Raster;
use crate::sampler::{dehaze, DehazeResult};
use crate::segmentation::{build_guidance, OracleSegmenter, RegionSegmenter};

/// One dataset entry with its references and ground-truth region masks.
#[derive(Debug, Clone)]
pub struct NamedSample {
    pub name: String,
    pub clean: Raster,
    pub hazy: Raster,
    pub ventricle: Raster,
    pub septum: Raster,
}

impl NamedSample {
    pub fn from_phantom(name: impl Into<String>, s: &PhantomSample) -> Self {
        NamedSample {
            name: name.into(),
            clean: s.clean.clone(),
            hazy: s.hazy.clone(),
            ventricle: s.ventricle_mask.clone(),
            septum: s.septum_mask.clone(),
        }
    }
}

/// Where region logits come from: a trained model, or the dataset's own
/// mask files (the oracle path used for phantom experiments).
pub enum SegSource<'a> {
    Model(&'a dyn RegionSegmenter),
    FromMasks,
}

pub struct DehazeDeps<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a dyn NoiseSchedule,
    pub segmenter: SegSource<'a>,
}

/// Segment -> guidance map -> guided sampling for one image.
pub fn process_image(
    sample: &NamedSample,
    deps: &DehazeDeps,
    cfg: &RunConfig,
    seed: u64,
) -> Result<DehazeResult> {
    let oracle;
    let segmenter: &dyn RegionSegmenter = match deps.segmenter {
        SegSource::Model(m) => m,
        SegSource::FromMasks => {
            oracle = OracleSegmenter {
                ventricle: sample.ventricle.clone(),
                septum: sample.septum.clone(),
            };
            &oracle
        }
    };
    let guidance = build_guidance(
        &sample.hazy,
        segmenter,
        &cfg.seg,
        cfg.guidance.fixed_top,
        cfg.guidance.fixed_bottom,
    )?;
    dehaze(
        &sample.hazy,
        &guidance,
        &guidance.bundle.ventricle,
        deps.denoiser,
        deps.schedule,
        &cfg.guidance,
        seed,
    )
}

/// Batch evaluation of a dehazed set against its references.
#[derive(Debug, Clone)]
pub struct SetEvaluation {
    pub per_image: Vec<MetricReport>,
    /// Batch KID (dehazed vs clean); None when the set has fewer than two
    /// images or they are too small for the embedder.
    pub kid: Option<f64>,
    /// Field-wise mean of the per-image reports.
    pub aggregate: MetricReport,
}

/// Metrics consume the display image, `clamp01(dehazed)` — the same pixels
/// the written PNG holds. The unclamped raster keeps the decomposition
/// identity and is persisted separately.
pub fn evaluate_set(
    samples: &[&NamedSample],
    dehazed: &[Raster],
    cfg: &RunConfig,
) -> Result<SetEvaluation> {
    if samples.is_empty() || samples.len() != dehazed.len() {
        return Err(Error::Param(format!(
            "evaluate_set: {} samples vs {} dehazed images",
            samples.len(),
            dehazed.len()
        )));
    }
    let display: Vec<Raster> = dehazed.iter().map(|r| r.clamp01()).collect();
    let embeddable = samples.len() >= 2
        && display.iter().all(|r| r.height() >= 16 && r.width() >= 16);
    let kid = if embeddable {
        let cleans: Vec<Raster> = samples.iter().map(|s| s.clean.clone()).collect();
        Some(kid_score(&display, &cleans, &RandomConvEmbedder::default())?)
    } else {
        None
    };
    let mut per_image = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(&display) {
        per_image.push(evaluate_image(
            d,
            &s.clean,
            &s.hazy,
            &s.septum,
            &s.ventricle,
            kid.unwrap_or(0.0),
            &cfg.anchors,
            cfg.downstream,
        )?);
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let aggregate = MetricReport {
        cnr: mean(|r| r.cnr),
        gcnr: mean(|r| r.gcnr),
        ks_septum: mean(|r| r.ks_septum),
        ks_ventricle: mean(|r| r.ks_ventricle),
        kid: kid.unwrap_or(0.0),
        final_score: mean(|r| r.final_score),
    };
    Ok(SetEvaluation { per_image, kid, aggregate })
}

/// In-memory pipeline over a whole set; the sweep objective and the
/// persistent job share this arithmetic.
pub fn evaluate_config_on_set(
    cfg: &RunConfig,
    deps: &DehazeDeps,
    samples: &[NamedSample],
) -> Result<SetEvaluation> {
    let mut dehazed = Vec::with_capacity(samples.len());
    for (idx, s) in samples.iter().enumerate() {
        let res = process_image(s, deps, cfg, cfg.seed.wrapping_add(idx as u64))?;
        dehazed.push(res.dehazed);
    }
    let refs: Vec<&NamedSample> = samples.iter().collect();
    evaluate_set(&refs, &dehazed, cfg)
}

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub name: String,
    /// The sampler stage was skipped because the manifest hash matched.
    pub skipped: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct JobSummary {
    pub outcomes: Vec<ImageOutcome>,
    /// Present when at least one image completed.
    pub evaluation: Option<SetEvaluation>,
    pub failed: usize,
}

#[cfg(feature = "png")]
fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(feature = "png")]
fn raster_bytes(r: &Raster) -> Vec<u8> {
    r.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Hash of everything the per-image output depends on.
#[cfg(feature = "png")]
fn image_hash(sample: &NamedSample, cfg: &RunConfig, seed: u64, context_tag: &str) -> String {
    let mut h = Sha256::new();
    h.update(context_tag.as_bytes());
    h.update(format!(
        "{:?}|{:?}|anchors={:?}|downstream={}|seed={seed}",
        cfg.seg, cfg.guidance, cfg.anchors, cfg.downstream
    ));
    h.update(raster_bytes(&sample.hazy));
    h.update(raster_bytes(&sample.clean));
    h.update(raster_bytes(&sample.ventricle));
    h.update(raster_bytes(&sample.septum));
    hex(&h.finalize())
}

#[cfg(feature = "png")]
fn load_manifest(path: &Path) -> BTreeMap<String, String> {
    let Ok(text) = fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(feature = "png")]
fn save_manifest(path: &Path, manifest: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in manifest {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

pub fn report_to_string(name: &str, r: &MetricReport) -> String {
    format!(
        "name = {name}\ncnr = {}\ngcnr = {}\nks_septum = {}\nks_ventricle = {}\nkid = {}\nfinal_score = {}\n",
        r.cnr, r.gcnr, r.ks_septum, r.ks_ventricle, r.kid, r.final_score
    )
}

#[cfg(feature = "png")]
/// Normalized haze image plus the affine display parameters as a sidecar.
pub fn write_haze(dir: &Path, name: &str, haze: &Raster) -> Result<()> {
    let (lo, hi) = (haze.min(), haze.max());
    let scale = if hi > lo { hi - lo } else { 1.0 };
    let display = haze.map(|v| (v - lo) / scale);
    write_png(&dir.join(format!("{name}.png")), &display)?;
    atomic_write(
        &dir.join(format!("{name}.txt")),
        format!("offset = {lo}\nscale = {scale}\n").as_bytes(),
    )
}

#[cfg(feature = "png")]
/// Runs the full per-image pipeline over `samples`, persisting under
/// `out_dir`. `context_tag` should fingerprint anything the hash cannot see
/// from the inputs alone (in practice: the checkpoint identity). Failures
/// are recorded per image and do not abort the job.
pub fn run_dehaze_job(
    cfg: &RunConfig,
    deps: &DehazeDeps,
    samples: &[NamedSample],
    out_dir: &Path,
    context_tag: &str,
) -> Result<JobSummary> {
    for sub in ["dehazed", "dehazed_f32", "haze", "guidance", "metrics"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir, e))?;
    }
    let manifest_path = out_dir.join("manifest.txt");
    let mut manifest = load_manifest(&manifest_path);

    let mut outcomes = Vec::with_capacity(samples.len());
    let mut done: Vec<(usize, Raster)> = Vec::new();
    for (idx, sample) in samples.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(idx as u64);
        let hash = image_hash(sample, cfg, seed, context_tag);
        let f32_path = out_dir.join("dehazed_f32").join(format!("{}.f32", sample.name));
        if manifest.get(&sample.name) == Some(&hash) && f32_path.exists() {
            match read_f32(&f32_path) {
                Ok(r) => {
                    done.push((idx, r));
                    outcomes.push(ImageOutcome {
                        name: sample.name.clone(),
                        skipped: true,
                        error: None,
                    });
                    continue;
                }
                Err(_) => {
                    // fall through and recompute a corrupt cache entry
                    manifest.remove(&sample.name);
                }
            }
        }
        match process_image(sample, deps, cfg, seed) {
            Ok(res) => {
                let name = &sample.name;
                write_png(&out_dir.join("dehazed").join(format!("{name}.png")), &res.dehazed.clamp01())?;
                write_f32(&f32_path, &res.dehazed)?;
                write_haze(&out_dir.join("haze"), name, &res.haze)?;
                write_f32(
                    &out_dir.join("guidance").join(format!("{name}.f32")),
                    &res.guidance.precision,
                )?;
                manifest.insert(name.clone(), hash);
                save_manifest(&manifest_path, &manifest)?;
                done.push((idx, res.dehazed));
                outcomes.push(ImageOutcome { name: name.clone(), skipped: false, error: None });
            }
            Err(e) => outcomes.push(ImageOutcome {
                name: sample.name.clone(),
                skipped: false,
                error: Some(e.to_string()),
            }),
        }
    }

    let evaluation = if done.is_empty() {
        None
    } else {
        let refs: Vec<&NamedSample> = done.iter().map(|(i, _)| &samples[*i]).collect();
        let rasters: Vec<Raster> = done.iter().map(|(_, r)| r.clone()).collect();
        let eval = evaluate_set(&refs, &rasters, cfg)?;
        for (s, rep) in refs.iter().zip(&eval.per_image) {
            atomic_write(
                &out_dir.join("metrics").join(format!("{}.txt", s.name)),
                report_to_string(&s.name, rep).as_bytes(),
            )?;
        }
        atomic_write(
            &out_dir.join("metrics").join("aggregate.txt"),
            report_to_string("aggregate", &eval.aggregate).as_bytes(),
        )?;
        Some(eval)
    };

    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    Ok(JobSummary { outcomes, evaluation, failed })
}

#[cfg(feature = "png")]
/// Dataset layout written by the generator: `{clean,hazy,masks}/NNNN.png`
/// plus `sigma/NNNN.f32`.
pub fn save_phantom_dir(dir: &Path, samples: &[PhantomSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}");
        write_png(&dir.join("clean").join(format!("{name}.png")), &s.clean)?;
        write_png(&dir.join("hazy").join(format!("{name}.png")), &s.hazy)?;
        write_mask_png(
            &dir.join("masks").join(format!("{name}.png")),
            &s.ventricle_mask,
            &s.septum_mask,
        )?;
        write_f32(&dir.join("sigma").join(format!("{name}.f32")), &s.true_sigma)?;
    }
    Ok(())
}

#[cfg(feature = "png")]
/// Reads the generator layout back, sorted by name. A present directory
/// without a `hazy/` subtree is an empty dataset, not an error.
pub fn load_phantom_dir(dir: &Path) -> Result<Vec<NamedSample>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, "dataset directory not found"));
    }
    let hazy_dir = dir.join("hazy");
    if !hazy_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = fs::read_dir(&hazy_dir)
        .map_err(|e| Error::io(&hazy_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "png"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let hazy = read_png(&hazy_dir.join(format!("{name}.png")))?;
        let clean = read_png(&dir.join("clean").join(format!("{name}.png")))?;
        let (ventricle, septum) = read_mask_png(&dir.join("masks").join(format!("{name}.png")))?;
        hazy.check_same_shape(&clean, "clean raster")
            .map_err(|e| Error::io(dir, format!("{name}: {e}")))?;
        hazy.check_same_shape(&ventricle, "mask raster")
            .map_err(|e| Error::io(dir, format!("{name}: {e}")))?;
        out.push(NamedSample { name, clean, hazy, ventricle, septum });
    }
    Ok(out)
}
