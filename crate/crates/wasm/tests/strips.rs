//! Host-side checks of the demo rendering entry points.

use echodehaze_web::{render_dehaze_impl, render_guidance_impl, render_phantom_impl};

const SIZE: u32 = 32;

fn opaque(bytes: &[u8]) -> bool {
    bytes.chunks_exact(4).all(|px| px[3] == 255)
}

#[test]
fn phantom_strip_has_two_panels() {
    let bytes = render_phantom_impl(3, SIZE).unwrap();
    assert_eq!(bytes.len(), (SIZE * SIZE * 2 * 4) as usize);
    assert!(opaque(&bytes));
    assert_eq!(bytes, render_phantom_impl(3, SIZE).unwrap());
    assert_ne!(bytes, render_phantom_impl(4, SIZE).unwrap());
}

#[test]
fn guidance_strip_responds_to_weights() {
    let a = render_guidance_impl(3, SIZE, 1.0, 0.3, 2.0, 0.176, 1.5).unwrap();
    assert_eq!(a.len(), (SIZE * SIZE * 2 * 4) as usize);
    assert!(opaque(&a));
    let b = render_guidance_impl(3, SIZE, 1.0, 0.3, 8.0, 0.176, 1.5).unwrap();
    assert_ne!(a, b, "septum weight change should alter the precision panel");
}

#[test]
fn guidance_rejects_negative_weight() {
    let err = render_guidance_impl(3, SIZE, -1.0, 0.3, 2.0, 0.176, 1.5).unwrap_err();
    assert!(err.contains("omega"), "unexpected error: {err}");
}

#[test]
fn dehaze_strip_changes_the_image() {
    let bytes = render_dehaze_impl(5, SIZE, 0.007, 12).unwrap();
    assert_eq!(bytes.len(), (SIZE * SIZE * 3 * 4) as usize);
    assert!(opaque(&bytes));
    assert_eq!(bytes, render_dehaze_impl(5, SIZE, 0.007, 12).unwrap());

    // the dehazed panel must differ from the hazy input panel somewhere
    let w = SIZE as usize;
    let row_stride = 3 * w * 4;
    let differ = (0..w).any(|row| {
        let base = row * row_stride;
        bytes[base..base + w * 4] != bytes[base + w * 4..base + 2 * w * 4]
    });
    assert!(differ);
}

#[test]
fn dehaze_rejects_bad_steps() {
    let err = render_dehaze_impl(5, SIZE, 0.007, 0).unwrap_err();
    assert!(err.contains("steps"), "unexpected error: {err}");
}
