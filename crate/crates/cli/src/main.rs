//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or partial failure, 2 configuration
//! error (bad flags, malformed config, missing required paths). When
//! `--out` is omitted a verb-specific default under `$ECHODEHAZE_OUT` is
//! used; with neither, the verb refuses to run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use echodehaze::diffusion::checkpoint::{load_checkpoint, save_checkpoint};
use echodehaze::diffusion::{
    sample_unconditional, schedule_by_name, train, CosineSchedule, NoiseSchedule, UNetView,
};
use echodehaze::io::{atomic_write, read_f32, read_mask_png, read_png, write_f32, write_png};
use echodehaze::nn::embed::{RandomConvEmbedder, DEFAULT_EMBEDDER_SEED};
use echodehaze::nn::unet::{UNet, UNetArch};
use echodehaze::phantom::{generate_dataset, PhantomSpec};
use echodehaze::pipeline::{
    evaluate_set, load_config, load_phantom_dir, process_image, report_to_string, run_dehaze_job,
    run_sweep, save_phantom_dir, write_haze, DehazeDeps, NamedSample, RunConfig, SegSource,
    TrialStatus,
};
use echodehaze::segmentation::{
    build_guidance, load_segmenter, save_segmenter, train_region_segmenter, NetSegmenter,
    RegionSegmenter,
};
use echodehaze::{Error, Raster, Result};

#[derive(Parser)]
#[command(name = "echodehaze", version, about = "Ultrasound dehazing with a diffusion prior")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Train the diffusion prior on clean images.
    TrainDiffusion(TrainDiffusionArgs),
    /// Draw unconditional samples from a trained prior.
    Sample(SampleArgs),
    /// Train the ventricle/septum segmenter on a phantom dataset.
    TrainSegmenter(TrainSegmenterArgs),
    /// Segment one image and emit its guidance precision map.
    Segment(SegmentArgs),
    /// Dehaze one image or a whole dataset directory.
    Dehaze(DehazeArgs),
    /// Score dehazed images against references.
    Evaluate(EvaluateArgs),
    /// Random search over guidance weights.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a clean/hazy/masks/sigma dataset.
    Generate(GenerateArgs),
}

/// Flags shared by every verb.
#[derive(Args)]
struct Common {
    /// Run configuration (flat `key = value`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; falls back to a default under $ECHODEHAZE_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
            cfg.seg_train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, default_name: &str) -> Result<PathBuf> {
        if let Some(p) = &self.out {
            return Ok(p.clone());
        }
        match std::env::var_os("ECHODEHAZE_OUT") {
            Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(default_name)),
            _ => Err(Error::Config(format!(
                "no output path for {default_name}: pass --out or set ECHODEHAZE_OUT"
            ))),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of samples.
    #[arg(long, default_value_t = 32)]
    count: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "128x128")]
    size: String,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (uses clean/*.png when present, else *.png).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Denoiser width.
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Diffusion checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Sampling steps; defaults to the config's guidance step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Image size as HxW.
    #[arg(long, default_value = "128x128")]
    size: String,
}

#[derive(Args)]
struct TrainSegmenterArgs {
    #[command(flatten)]
    common: Common,
    /// Phantom dataset directory (hazy/ + masks/).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    /// Hazy input image (PNG).
    #[arg(long)]
    input: PathBuf,
    /// Config file whose seg.* section overrides the main config.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Destination for the precision raster; defaults to OUT/precision.f32.
    #[arg(long)]
    out_map: Option<PathBuf>,
    /// Directory for per-component mask panels; defaults next to the map.
    #[arg(long)]
    out_debug: Option<PathBuf>,
    /// Rows at the top held fixed to the input.
    #[arg(long)]
    fixed_top: Option<usize>,
    /// Rows at the bottom held fixed to the input.
    #[arg(long)]
    fixed_bottom: Option<usize>,
}

#[derive(Args)]
struct DehazeArgs {
    #[command(flatten)]
    common: Common,
    /// Hazy PNG or dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Diffusion checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Config file whose seg.* section overrides the main config.
    #[arg(long)]
    seg_weights: Option<PathBuf>,
    /// Rows at the top held fixed to the input.
    #[arg(long)]
    fixed_top: Option<usize>,
    /// Rows at the bottom held fixed to the input.
    #[arg(long)]
    fixed_bottom: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of dehazed images (NNNN.f32 preferred, NNNN.png accepted).
    #[arg(long)]
    dehazed: PathBuf,
    /// Dataset root holding clean/ and hazy/ references.
    #[arg(long)]
    reference: PathBuf,
    /// Directory of encoded mask PNGs.
    #[arg(long)]
    masks: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Validation dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Diffusion checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Phantom { cmd: PhantomCmd::Generate(a) } => phantom_generate(a),
        Cmd::TrainDiffusion(a) => train_diffusion(a),
        Cmd::Sample(a) => sample(a),
        Cmd::TrainSegmenter(a) => train_segmenter(a),
        Cmd::Segment(a) => segment(a),
        Cmd::Dehaze(a) => dehaze(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Sweep(a) => sweep(a),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    s.split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("bad --size {s:?}: expected HxW, e.g. 128x128")))
}

/// Flag value, else the config's path entry, else a configuration error.
fn required(flag: Option<PathBuf>, from_config: &str, what: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if !from_config.is_empty() {
        return Ok(PathBuf::from(from_config));
    }
    Err(Error::Config(format!(
        "missing {what}: pass the flag or set the path in the config"
    )))
}

fn sha_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Owns whichever segmenter the config selects so `SegSource` can borrow it.
enum SegHolder {
    Model(NetSegmenter),
    FromMasks,
}

impl SegHolder {
    fn from_config(cfg: &RunConfig) -> Result<SegHolder> {
        if cfg.paths.seg_checkpoint.is_empty() {
            Ok(SegHolder::FromMasks)
        } else {
            let net = load_segmenter(Path::new(&cfg.paths.seg_checkpoint))?;
            Ok(SegHolder::Model(NetSegmenter { net }))
        }
    }

    fn source(&self) -> SegSource<'_> {
        match self {
            SegHolder::Model(m) => SegSource::Model(m),
            SegHolder::FromMasks => SegSource::FromMasks,
        }
    }
}

fn phantom_generate(a: GenerateArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("phantoms")?;
    let (height, width) = parse_size(&a.size)?;
    let template = PhantomSpec { height, width, ..PhantomSpec::default() };
    let samples = generate_dataset(&template, a.count, cfg.seed)?;
    save_phantom_dir(&out, &samples)?;
    println!("wrote {} phantom samples to {}", samples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_clean_images(dir: &Path) -> Result<Vec<Raster>> {
    let clean = dir.join("clean");
    let dir = if clean.is_dir() { clean } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_png(p)).collect()
}

fn train_diffusion(a: TrainDiffusionArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("diffusion.ckpt")?;
    let data = required(a.data, &cfg.paths.dataset, "--data")?;
    let images = load_clean_images(&data)?;
    if images.is_empty() {
        return Err(Error::Config(format!("no training PNGs under {}", data.display())));
    }
    let mut net = UNet::new(UNetArch { base_channels: a.base_channels }, cfg.train.seed);
    let embedder = RandomConvEmbedder::new(DEFAULT_EMBEDDER_SEED);
    let schedule = CosineSchedule;
    let record = train(&mut net, &images, &cfg.train, &schedule, &embedder)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_checkpoint(&out, &net, schedule.name(), &cfg.train)?;
    let log = out.with_extension("log");
    atomic_write(&log, record.to_text().as_bytes())?;
    let last = record.steps.last().map_or(f64::NAN, |s| s.total);
    println!(
        "trained {} steps on {} images; final loss {last:.6}",
        record.steps.len(),
        images.len()
    );
    println!("checkpoint: {}", out.display());
    println!("loss log: {}", log.display());
    Ok(ExitCode::SUCCESS)
}

fn sample(a: SampleArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("samples")?;
    let ckpt = required(a.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
    let (net, schedule_name, _) = load_checkpoint(&ckpt)?;
    let schedule = schedule_by_name(&schedule_name)?;
    let denoiser = UNetView::ema(&net);
    let steps = a.steps.unwrap_or(cfg.guidance.steps);
    let (height, width) = parse_size(&a.size)?;
    let images = sample_unconditional(&denoiser, &schedule, steps, cfg.seed, a.count, height, width)?;
    ensure_dir(&out)?;
    for (i, img) in images.iter().enumerate() {
        write_png(&out.join(format!("{i:04}.png")), img)?;
    }
    println!("wrote {} samples to {}", images.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_segmenter(a: TrainSegmenterArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("segmenter.ckpt")?;
    let data = required(a.data, &cfg.paths.dataset, "--data")?;
    let samples = load_phantom_dir(&data)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no dataset under {}", data.display())));
    }
    let pairs: Vec<_> = samples
        .iter()
        .map(|s| (s.hazy.clone(), s.ventricle.clone(), s.septum.clone()))
        .collect();
    let (seg, record) = train_region_segmenter(&pairs, &cfg.seg_train)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_segmenter(&out, &seg.net)?;
    println!(
        "trained on {} pairs; dice ventricle {:.4}, septum {:.4}",
        pairs.len(),
        record.dice_ventricle,
        record.dice_septum
    );
    println!("checkpoint: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn segment(a: SegmentArgs) -> Result<ExitCode> {
    let mut cfg = a.common.config()?;
    if let Some(w) = &a.weights {
        cfg.seg = load_config(w)?.seg;
        cfg.validate()?;
    }
    let holder = SegHolder::from_config(&cfg)?;
    let model: &dyn RegionSegmenter = match &holder {
        SegHolder::Model(m) => m,
        SegHolder::FromMasks => {
            return Err(Error::Config(
                "segment needs a trained model: set paths.seg_checkpoint in the config".into(),
            ))
        }
    };
    let y = read_png(&a.input)?;
    let fixed_top = a.fixed_top.unwrap_or(cfg.guidance.fixed_top);
    let fixed_bottom = a.fixed_bottom.unwrap_or(cfg.guidance.fixed_bottom);
    let g = build_guidance(&y, model, &cfg.seg, fixed_top, fixed_bottom)?;

    let out_map = match a.out_map {
        Some(p) => p,
        None => a.common.out("segment")?.join("precision.f32"),
    };
    let out_debug = match a.out_debug {
        Some(p) => p,
        None => out_map.parent().unwrap_or(Path::new(".")).join("debug"),
    };
    write_f32(&out_map, &g.precision)?;
    ensure_dir(&out_debug)?;
    let b = &g.bundle;
    for (name, r) in [
        ("ventricle", &b.ventricle),
        ("septum", &b.septum),
        ("ventricle_bin", &b.ventricle_bin),
        ("septum_bin", &b.septum_bin),
        ("skeleton", &b.skeleton),
        ("background", &b.background),
        ("dark", &b.dark),
    ] {
        write_png(&out_debug.join(format!("{name}.png")), r)?;
    }
    let (lo, hi) = (g.precision.min(), g.precision.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    write_png(&out_debug.join("precision.png"), &g.precision.map(|v| (v - lo) / span))?;
    println!(
        "precision map: {} (effective omega_v = {})",
        out_map.display(),
        g.effective_omega_v
    );
    println!("debug panels: {}", out_debug.display());
    Ok(ExitCode::SUCCESS)
}

fn dehaze(a: DehazeArgs) -> Result<ExitCode> {
    let mut cfg = a.common.config()?;
    if let Some(w) = &a.seg_weights {
        cfg.seg = load_config(w)?.seg;
    }
    if let Some(r) = a.fixed_top {
        cfg.guidance.fixed_top = r;
    }
    if let Some(r) = a.fixed_bottom {
        cfg.guidance.fixed_bottom = r;
    }
    cfg.validate()?;
    let out = a.common.out("dehaze")?;
    let ckpt = required(a.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
    let ckpt_bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let (net, schedule_name, _) = load_checkpoint(&ckpt)?;
    let schedule = schedule_by_name(&schedule_name)?;
    let denoiser = UNetView::ema(&net);
    let holder = SegHolder::from_config(&cfg)?;
    // the manifest hash must change when either network changes
    let seg_bytes = match cfg.paths.seg_checkpoint.as_str() {
        "" => b"oracle-masks".to_vec(),
        p => fs::read(p).map_err(|e| Error::io(Path::new(p), e))?,
    };
    let tag = sha_hex(&[&ckpt_bytes, &seg_bytes]);
    let deps = DehazeDeps {
        denoiser: &denoiser,
        schedule: &schedule,
        segmenter: holder.source(),
    };

    if a.input.is_dir() {
        let samples = load_phantom_dir(&a.input)?;
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "no dataset under {}: expected hazy/*.png alongside clean/ and masks/",
                a.input.display()
            )));
        }
        let summary = run_dehaze_job(&cfg, &deps, &samples, &out, &tag)?;
        let done = summary.outcomes.iter().filter(|o| o.error.is_none()).count();
        let skipped = summary.outcomes.iter().filter(|o| o.skipped).count();
        println!("{done} image(s) done ({skipped} reused), {} failed", summary.failed);
        for o in summary.outcomes.iter().filter(|o| o.error.is_some()) {
            eprintln!("  {}: {}", o.name, o.error.as_deref().unwrap_or(""));
        }
        if let Some(ev) = &summary.evaluation {
            println!("aggregate final score: {:.4}", ev.aggregate.final_score);
        }
        println!("outputs under {}", out.display());
        return Ok(if summary.failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS });
    }

    // single image: no reference, so a trained segmenter is mandatory and
    // the metric phase is skipped
    if matches!(holder, SegHolder::FromMasks) {
        return Err(Error::Config(
            "dehazing a bare image needs a trained segmenter: set paths.seg_checkpoint".into(),
        ));
    }
    let y = read_png(&a.input)?;
    let name = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (h, w) = y.shape();
    let zero = Raster::zeros(h, w);
    let sample = NamedSample {
        name: name.clone(),
        clean: zero.clone(),
        hazy: y,
        ventricle: zero.clone(),
        septum: zero,
    };
    let res = process_image(&sample, &deps, &cfg, cfg.seed)?;
    for sub in ["dehazed", "dehazed_f32", "haze", "guidance"] {
        ensure_dir(&out.join(sub))?;
    }
    write_png(&out.join("dehazed").join(format!("{name}.png")), &res.dehazed.clamp01())?;
    write_f32(&out.join("dehazed_f32").join(format!("{name}.f32")), &res.dehazed)?;
    write_haze(&out.join("haze"), &name, &res.haze)?;
    write_f32(&out.join("guidance").join(format!("{name}.f32")), &res.guidance.precision)?;
    println!(
        "dehazed {} -> {} (no reference; metrics skipped)",
        a.input.display(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("report.txt")?;
    let mut stems: Vec<String> = fs::read_dir(&a.dehazed)
        .map_err(|e| Error::io(&a.dehazed, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let ext = p.extension()?.to_str()?.to_owned();
            (ext == "png" || ext == "f32")
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    stems.dedup();
    if stems.is_empty() {
        return Err(Error::Config(format!(
            "no .png or .f32 images under {}",
            a.dehazed.display()
        )));
    }

    let mut refs = Vec::new();
    let mut dehazed = Vec::new();
    let mut problems = Vec::new();
    for stem in &stems {
        match load_eval_entry(&a, stem) {
            Ok((sample, img)) => {
                refs.push(sample);
                dehazed.push(img);
            }
            Err(e) => problems.push(format!("{stem}: {e}")),
        }
    }
    if refs.is_empty() {
        return Err(Error::Param(format!(
            "no usable image/reference pairs ({} problem(s)); first: {}",
            problems.len(),
            problems.first().map_or("", |s| s.as_str())
        )));
    }
    let sample_refs: Vec<&NamedSample> = refs.iter().collect();
    let ev = evaluate_set(&sample_refs, &dehazed, &cfg)?;

    let mut report = String::new();
    for (s, r) in refs.iter().zip(&ev.per_image) {
        report.push_str(&report_to_string(&s.name, r));
        report.push('\n');
    }
    report.push_str(&report_to_string("aggregate", &ev.aggregate));
    for p in &problems {
        report.push_str(&format!("\nskipped = {p}\n"));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    atomic_write(&out, report.as_bytes())?;
    println!(
        "scored {} image(s); aggregate final score {:.4}",
        refs.len(),
        ev.aggregate.final_score
    );
    println!("report: {}", out.display());
    for p in &problems {
        eprintln!("skipped {p}");
    }
    Ok(if problems.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_eval_entry(a: &EvaluateArgs, stem: &str) -> Result<(NamedSample, Raster)> {
    let f32_path = a.dehazed.join(format!("{stem}.f32"));
    let img = if f32_path.is_file() {
        read_f32(&f32_path)?
    } else {
        read_png(&a.dehazed.join(format!("{stem}.png")))?
    };
    let clean = read_png(&a.reference.join("clean").join(format!("{stem}.png")))?;
    let hazy = read_png(&a.reference.join("hazy").join(format!("{stem}.png")))?;
    let (ventricle, septum) = read_mask_png(&a.masks.join(format!("{stem}.png")))?;
    Ok((NamedSample { name: stem.into(), clean, hazy, ventricle, septum }, img))
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let out = a.common.out("sweep")?;
    let data = required(a.data, &cfg.paths.dataset, "--data")?;
    let ckpt = required(a.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
    let (net, schedule_name, _) = load_checkpoint(&ckpt)?;
    let schedule = schedule_by_name(&schedule_name)?;
    let denoiser = UNetView::ema(&net);
    let holder = SegHolder::from_config(&cfg)?;
    let deps = DehazeDeps {
        denoiser: &denoiser,
        schedule: &schedule,
        segmenter: holder.source(),
    };
    let samples = load_phantom_dir(&data)?;
    let outcome = run_sweep(&cfg, &deps, &samples, &out)?;
    let completed = outcome
        .trials
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .count();
    println!(
        "{} trial(s), {completed} completed; records under {}",
        outcome.trials.len(),
        out.display()
    );
    match outcome.best {
        Some(i) => {
            let t = &outcome.trials[i];
            println!("best: trial {} objective {:.6}", t.trial_id, t.objective.unwrap_or(f64::NAN));
            for (k, v) in &t.sampled {
                println!("  {k} = {v}");
            }
            Ok(ExitCode::SUCCESS)
        }
        None => {
            eprintln!("no trial completed");
            Ok(ExitCode::from(1))
        }
    }
}
