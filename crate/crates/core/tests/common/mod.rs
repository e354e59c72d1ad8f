#![allow(dead_code)]

use image::{Rgb, RgbImage};
use ndarray::Array2;
use prompt_artisan::mask::MaskSpec;
use prompt_artisan::sampler::{EditRequest, SamplerConfig};

pub const SIZE: usize = 64;

pub fn gradient(h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb([(x * 4 % 256) as u8, (y * 4 % 256) as u8, ((x + y) * 2 % 256) as u8])
    })
}

pub fn rect(top: usize, left: usize, bottom: usize, right: usize) -> Array2<u8> {
    MaskSpec::rect((SIZE, SIZE), (top, left, bottom, right), 0, 0, 1).raster
}

/// Two disjoint regions on 16-pixel boundaries, so every coarse attention cell
/// is pure.
pub fn two_regions(steps: usize, second_prompt: &str) -> EditRequest {
    EditRequest::new(
        gradient(SIZE, SIZE),
        [
            (rect(0, 0, 64, 32), "make it red".to_owned(), 1, 1),
            (rect(16, 32, 48, 64), second_prompt.to_owned(), 2, 2),
        ],
        SamplerConfig::with_steps(steps),
    )
}

/// Three regions: the second overlaps the first, the third shares a group
/// with the first.
pub fn overlapping(steps: usize) -> EditRequest {
    EditRequest::new(
        gradient(SIZE, SIZE),
        [
            (rect(0, 0, 40, 40), "paint the sky orange".to_owned(), 1, 1),
            (rect(24, 24, 64, 64), "add a wooden boat".to_owned(), 2, 2),
            (rect(48, 0, 64, 16), "turn grass to snow".to_owned(), 1, 1),
        ],
        SamplerConfig::with_steps(steps),
    )
}

/// `n` vertical stripes covering the image.
pub fn stripes(steps: usize, n: usize) -> EditRequest {
    let width = SIZE / n;
    EditRequest::new(
        gradient(SIZE, SIZE),
        (0..n).map(|i| {
            (
                rect(0, i * width, SIZE, (i + 1) * width),
                format!("edit stripe number {i}"),
                i as i64,
                i as u32 + 1,
            )
        }),
        SamplerConfig::with_steps(steps),
    )
}
