//! Single-pass, multi-instruction image editing.
//!
//! An edit is a source image plus any number of `(mask, instruction)` pairs.
//! Masks may overlap; a z-order decides which instruction owns each pixel.
//! All instructions are applied in one denoising pass: the prompts are
//! encoded separately and packed into a single conditioning sequence, and
//! the denoiser's attention is biased so that each region only listens to
//! its own instruction and does not mix with other regions.
//!
//! The pieces, bottom up:
//!
//! - [`mask`]: composite label maps and their pooled pyramid.
//! - [`prompt`]: per-prompt encoding and packing.
//! - [`attention`] and [`cacm`]: biased attention and the bias builders.
//! - [`backend`]: denoiser/codec/encoder contracts, a toy backend and the
//!   InstructPix2Pix loader.
//! - [`schedule`] and [`sampler`]: noise schedule and the editing loop.
//!
//! ```
//! use prompt_artisan::backend::toy::ToyBackend;
//! use prompt_artisan::mask::MaskSpec;
//! use prompt_artisan::sampler::{run_edit, EditRequest, SamplerConfig};
//!
//! let image = image::RgbImage::from_pixel(64, 64, image::Rgb([40, 120, 200]));
//! let left = MaskSpec::rect((64, 64), (0, 0, 64, 32), 1, 1, 1).raster;
//! let request = EditRequest::new(
//!     image,
//!     [(left, "turn it red".to_string(), 1, 1)],
//!     SamplerConfig::with_steps(4),
//! );
//! let backend = ToyBackend::new(0);
//! let mut denoiser = backend.denoiser(request.dims())?;
//! let out = run_edit(&request, &mut denoiser, &backend.codec(), &backend.encoder())?;
//! assert_eq!(out.image.dimensions(), (64, 64));
//! # Ok::<(), prompt_artisan::Error>(())
//! ```

pub mod attention;
pub mod backend;
pub mod cacm;
mod error;
pub mod imageio;
pub mod mask;
pub mod prompt;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};

// Code blocks in the guide are compiled and run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/attention-control.md")]
    mod attention_control {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
}
