//! Browser bindings for the interactive demo page.
//!
//! Three operations, each returning an RGBA strip of panels sharing one
//! height, drawn straight onto a canvas via `ImageData`:
//!
//! * [`render_phantom`] — `[clean | hazy]` for a seeded synthetic phantom.
//! * [`render_guidance`] — `[hazy | precision heat map]` under adjustable
//!   mask-composition weights.
//! * [`render_dehaze`] — `[hazy | dehazed | haze]` from a guided sampling
//!   run against a closed-form prior centred on the clean phantom, so the
//!   page needs no trained weights.
//!
//! The `*_impl` functions carry the logic and compile on any target, which
//! keeps the tests runnable on the host.

use wasm_bindgen::prelude::*;

use echodehaze::diffusion::CosineSchedule;
use echodehaze::phantom::{generate_dataset, PhantomSample, PhantomSpec};
use echodehaze::pipeline::{process_image, DehazeDeps, NamedSample, RunConfig, SegSource};
use echodehaze::sampler::AnalyticPrior;
use echodehaze::segmentation::{build_guidance, OracleSegmenter, SegWeights};
use echodehaze::Raster;

/// Prior width around the clean phantom for the demo sampler.
const DEMO_SIGMA0: f32 = 0.15;

fn phantom_for(seed: u32, size: u32) -> Result<PhantomSample, String> {
    let size = size as usize;
    let template = PhantomSpec { height: size, width: size, ..PhantomSpec::default() };
    let mut samples =
        generate_dataset(&template, 1, seed as u64).map_err(|e| e.to_string())?;
    Ok(samples.remove(0))
}

enum Shade {
    /// Clamp to [0,1], render as grey.
    Gray,
    /// Normalize by the panel maximum, render dark blue -> yellow.
    Heat,
}

fn push_pixel(out: &mut Vec<u8>, v: f32, shade: &Shade) {
    let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    match shade {
        Shade::Gray => {
            let b = q(v);
            out.extend_from_slice(&[b, b, b, 255]);
        }
        Shade::Heat => {
            out.extend_from_slice(&[q(v), q(0.9 * v), q(0.45 * (1.0 - v) + 0.1), 255]);
        }
    }
}

/// Side-by-side panels as one RGBA image of width `n * panel_width`.
fn strip(panels: &[(&Raster, Shade)]) -> Vec<u8> {
    let (h, w) = panels[0].0.shape();
    let mut out = Vec::with_capacity(4 * h * w * panels.len());
    for row in 0..h {
        for (r, shade) in panels {
            let scale = match shade {
                Shade::Gray => 1.0,
                Shade::Heat => {
                    let m = r.max();
                    if m > 0.0 { m } else { 1.0 }
                }
            };
            for col in 0..w {
                push_pixel(&mut out, r.get(row, col) / scale, shade);
            }
        }
    }
    out
}

/// Min–max normalize for display; a flat image maps to 0.
fn normalized(r: &Raster) -> Raster {
    let (lo, hi) = (r.min(), r.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    r.map(|v| (v - lo) / span)
}

pub fn render_phantom_impl(seed: u32, size: u32) -> Result<Vec<u8>, String> {
    let s = phantom_for(seed, size)?;
    Ok(strip(&[(&s.clean, Shade::Gray), (&s.hazy, Shade::Gray)]))
}

pub fn render_guidance_impl(
    seed: u32,
    size: u32,
    omega: f32,
    omega_v: f32,
    omega_s: f32,
    theta: f32,
    sigma_blur: f32,
) -> Result<Vec<u8>, String> {
    let s = phantom_for(seed, size)?;
    let mut cfg = RunConfig::default();
    cfg.seg = SegWeights { omega, omega_v, omega_s, theta, sigma_blur };
    cfg.validate().map_err(|e| e.to_string())?;
    let sample = NamedSample::from_phantom("demo", &s);
    let model = OracleSegmenter {
        ventricle: sample.ventricle.clone(),
        septum: sample.septum.clone(),
    };
    let g = build_guidance(&sample.hazy, &model, &cfg.seg, 0, 0).map_err(|e| e.to_string())?;
    Ok(strip(&[(&sample.hazy, Shade::Gray), (&g.precision, Shade::Heat)]))
}

pub fn render_dehaze_impl(
    seed: u32,
    size: u32,
    eta: f32,
    steps: u32,
) -> Result<Vec<u8>, String> {
    if !(1..=480).contains(&steps) {
        return Err("steps must be between 1 and 480".into());
    }
    let s = phantom_for(seed, size)?;
    let mut cfg = RunConfig::default();
    cfg.guidance.steps = steps as usize;
    cfg.guidance.eta = eta;
    cfg.validate().map_err(|e| e.to_string())?;
    let prior = AnalyticPrior::new(s.clean.clone(), DEMO_SIGMA0, CosineSchedule)
        .map_err(|e| e.to_string())?;
    let sample = NamedSample::from_phantom("demo", &s);
    let deps = DehazeDeps {
        denoiser: &prior,
        schedule: &CosineSchedule,
        segmenter: SegSource::FromMasks,
    };
    let res =
        process_image(&sample, &deps, &cfg, seed as u64).map_err(|e| e.to_string())?;
    Ok(strip(&[
        (&sample.hazy, Shade::Gray),
        (&res.dehazed.clamp01(), Shade::Gray),
        (&normalized(&res.haze), Shade::Gray),
    ]))
}

#[wasm_bindgen]
pub fn render_phantom(seed: u32, size: u32) -> Result<Vec<u8>, JsValue> {
    render_phantom_impl(seed, size).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn render_guidance(
    seed: u32,
    size: u32,
    omega: f32,
    omega_v: f32,
    omega_s: f32,
    theta: f32,
    sigma_blur: f32,
) -> Result<Vec<u8>, JsValue> {
    render_guidance_impl(seed, size, omega, omega_v, omega_s, theta, sigma_blur)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn render_dehaze(seed: u32, size: u32, eta: f32, steps: u32) -> Result<Vec<u8>, JsValue> {
    render_dehaze_impl(seed, size, eta, steps).map_err(|e| JsValue::from_str(&e))
}
