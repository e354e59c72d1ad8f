//! Backend contracts: denoiser, latent codec and text encoder.
//!
//! A denoiser declares the attention sites it contains. During a forward pass
//! it asks an optional [`AttentionHook`] for an additive pre-softmax bias at
//! every site and reports the resulting probabilities back, which is how
//! attention control and probing plug in without the backend knowing about
//! either.

pub mod ip2p;
pub mod toy;

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::TextEncoder;

/// Latent tensor laid out as `(height, width, channels)`.
pub type Latent = Array3<f64>;

/// Spatial downscale between image and latent.
pub const LATENT_SCALE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Cross,
    #[serde(rename = "self")]
    SelfAttn,
}

/// One attention layer of a denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSite {
    pub id: String,
    pub kind: SiteKind,
    /// Query grid `(height, width)`.
    pub resolution: (usize, usize),
}

impl AttentionSite {
    pub fn new(id: impl Into<String>, kind: SiteKind, resolution: (usize, usize)) -> Self {
        Self {
            id: id.into(),
            kind,
            resolution,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }
}

/// Where in the sampling loop a forward pass happens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// Sampling step index `t` (counts down from `T` to 1).
    pub t: usize,
    /// Cumulative signal fraction at `t`.
    pub alpha_bar: f64,
}

impl StepContext {
    /// Noise level `σ_t = √((1 − ᾱ_t) / ᾱ_t)`.
    pub fn sigma(&self) -> f64 {
        ((1.0 - self.alpha_bar) / self.alpha_bar).sqrt()
    }
}

/// Inputs of one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub latent: &'a Latent,
    pub image_latent: &'a Latent,
    /// `(77 n) x d` packed text conditioning.
    pub conditioning: &'a Array2<f64>,
    pub step: StepContext,
}

/// Callback installed into a denoiser's attention sites.
pub trait AttentionHook {
    /// Additive bias for `site`, or `None` to leave the site untouched.
    ///
    /// `logits` holds the scaled `QKᵀ/√d` of every head, before any bias.
    fn bias(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        logits: &[Array2<f64>],
    ) -> Result<Option<&Array2<f64>>>;

    /// Post-softmax probabilities of every head at `site`.
    fn observe(&mut self, _site: &AttentionSite, _probs: &[Array2<f64>]) {}
}

/// A diffusion denoiser `ε(z_t, t, z_image, c)`.
pub trait DenoiserAdapter {
    fn name(&self) -> &str;

    /// Attention layers, stable across calls.
    fn attention_sites(&self) -> &[AttentionSite];

    fn predict(
        &mut self,
        input: &DenoiserInput<'_>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Latent>;
}

impl<D: DenoiserAdapter + ?Sized> DenoiserAdapter for &mut D {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        (**self).attention_sites()
    }

    fn predict(
        &mut self,
        input: &DenoiserInput<'_>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Latent> {
        (**self).predict(input, hook)
    }
}

impl<D: DenoiserAdapter + ?Sized> DenoiserAdapter for Box<D> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        (**self).attention_sites()
    }

    fn predict(
        &mut self,
        input: &DenoiserInput<'_>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Latent> {
        (**self).predict(input, hook)
    }
}

/// Image ↔ latent autoencoder with an 8x spatial downscale.
pub trait LatentCodec {
    fn encode(&self, image: &RgbImage) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<RgbImage>;
}

/// Latent grid for an image of `(height, width)`.
pub fn latent_resolution((h, w): (usize, usize)) -> Result<(usize, usize)> {
    if h % LATENT_SCALE != 0 || w % LATENT_SCALE != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "image dimensions {h}x{w} must be positive multiples of {LATENT_SCALE}"
        )));
    }
    Ok((h / LATENT_SCALE, w / LATENT_SCALE))
}

/// Denoiser wrapper counting forward passes.
#[derive(Debug)]
pub struct Counting<D> {
    inner: D,
    calls: usize,
}

impl<D> Counting<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: DenoiserAdapter> DenoiserAdapter for Counting<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        self.inner.attention_sites()
    }

    fn predict(
        &mut self,
        input: &DenoiserInput<'_>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Latent> {
        self.calls += 1;
        self.inner.predict(input, hook)
    }
}

/// Hook that records probabilities at one site and delegates bias requests.
struct Probe<'h> {
    site_id: String,
    inner: Option<&'h mut dyn AttentionHook>,
    captured: Option<Vec<Array2<f64>>>,
}

impl AttentionHook for Probe<'_> {
    fn bias(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        logits: &[Array2<f64>],
    ) -> Result<Option<&Array2<f64>>> {
        match self.inner.as_deref_mut() {
            Some(h) => h.bias(site, step, logits),
            None => Ok(None),
        }
    }

    fn observe(&mut self, site: &AttentionSite, probs: &[Array2<f64>]) {
        if site.id == self.site_id {
            self.captured = Some(probs.to_vec());
        }
        if let Some(h) = self.inner.as_deref_mut() {
            h.observe(site, probs);
        }
    }
}

/// Run one forward pass and return the post-softmax attention of every head
/// at `site_id`.
pub fn probe_attention<D: DenoiserAdapter + ?Sized>(
    adapter: &mut D,
    site_id: &str,
    input: &DenoiserInput<'_>,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<Vec<Array2<f64>>> {
    if !adapter.attention_sites().iter().any(|s| s.id == site_id) {
        return Err(Error::invalid(format!("unknown attention site `{site_id}`")));
    }
    let mut probe = Probe {
        site_id: site_id.to_owned(),
        inner: hook,
        captured: None,
    };
    adapter.predict(input, Some(&mut probe))?;
    probe
        .captured
        .ok_or_else(|| Error::backend(format!("site `{site_id}` was not exercised")))
}

/// Hook counting how often each site reports probabilities.
#[derive(Debug, Default)]
pub struct SiteCounter {
    pub counts: BTreeMap<String, usize>,
}

impl AttentionHook for SiteCounter {
    fn bias(
        &mut self,
        _site: &AttentionSite,
        _step: &StepContext,
        _logits: &[Array2<f64>],
    ) -> Result<Option<&Array2<f64>>> {
        Ok(None)
    }

    fn observe(&mut self, site: &AttentionSite, _probs: &[Array2<f64>]) {
        *self.counts.entry(site.id.clone()).or_default() += 1;
    }
}

/// Which backend to run, as named in configuration.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    /// Seeded toy backend.
    Toy { seed: u64 },
    /// Pre-trained InstructPix2Pix from a local model directory.
    Ip2p(ip2p::Ip2pConfig),
}

/// A denoiser, codec and encoder ready for one image size.
pub struct LoadedBackend {
    pub denoiser: Box<dyn DenoiserAdapter + Send>,
    pub codec: Box<dyn LatentCodec + Send>,
    pub encoder: Box<dyn TextEncoder + Send>,
}

impl BackendSpec {
    /// `toy` or `ip2p`; `ip2p` reads its model directory from the environment.
    pub fn from_name(name: &str, toy_seed: u64) -> Result<Self> {
        match name {
            "toy" => Ok(Self::Toy { seed: toy_seed }),
            "ip2p" => Ok(Self::Ip2p(ip2p::Ip2pConfig::from_env()?)),
            other => Err(Error::invalid(format!(
                "unknown backend `{other}`; expected `toy` or `ip2p`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Toy { .. } => "toy",
            Self::Ip2p(_) => "ip2p",
        }
    }

    /// Stable description of the weights in use, for reports and sidecars.
    pub fn identity(&self) -> String {
        match self {
            Self::Toy { seed } => format!("toy(seed={seed})"),
            Self::Ip2p(cfg) => format!("ip2p({})", cfg.model_dir.display()),
        }
    }

    /// Reject image sizes the backend cannot process.
    pub fn check_dims(&self, (h, w): (usize, usize)) -> Result<()> {
        let (lh, lw) = latent_resolution((h, w))?;
        // Toy: one 2x pooling. SD UNet: three 2x downsamplings.
        let factor = match self {
            Self::Toy { .. } => 2,
            Self::Ip2p(_) => 8,
        };
        if lh % factor != 0 || lw % factor != 0 {
            return Err(Error::invalid(format!(
                "the {} backend needs image sides divisible by {}, got {h}x{w}",
                self.name(),
                factor * LATENT_SCALE
            )));
        }
        Ok(())
    }

    /// Instantiate for images of `(height, width)`.
    pub fn load(&self, image_dims: (usize, usize)) -> Result<LoadedBackend> {
        match self {
            Self::Toy { seed } => {
                let toy = toy::ToyBackend::new(*seed);
                Ok(LoadedBackend {
                    denoiser: Box::new(toy.denoiser(image_dims)?),
                    codec: Box::new(toy.codec()),
                    encoder: Box::new(toy.encoder()),
                })
            }
            Self::Ip2p(cfg) => {
                let model = ip2p::real_backend_load(cfg.clone())?;
                Ok(LoadedBackend {
                    denoiser: Box::new(model.denoiser(latent_resolution(image_dims)?)?),
                    codec: Box::new(model.codec()),
                    encoder: Box::new(model.encoder()),
                })
            }
        }
    }
}
