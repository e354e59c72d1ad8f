//! The single-pass editing loop.
//!
//! One run encodes the source image, composites the masks, packs the prompts
//! and then denoises from pure noise for `T` steps. Each step evaluates the
//! denoiser three times (unconditional, image-only, image + text), combines
//! the estimates with dual classifier-free guidance and takes a deterministic
//! DDIM step. While `t > S`, every latent cell outside the masks is replaced
//! with the forward-noised source latent for the next step, which keeps the
//! background anchored to the original image.
//!
//! Cross-attention control and the boost apply only to the image + text
//! branch. Self-attention grouping applies to all three branches unless
//! `self_control_all_branches` is off.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{
    latent_resolution, DenoiserAdapter, DenoiserInput, Latent, LatentCodec, StepContext,
};
use crate::cacm::{install_hooks, AttentionRecord, CacmConfig};
use crate::error::{Error, Result};
use crate::mask::{build_pyramid, composite, LabelPyramid, MaskSpec};
use crate::prompt::{
    concat_prompts, encode_prompts, unconditional_packing, PackedConditioning, TextEncoder,
    TokenRole,
};
use crate::schedule::{forward_noise, NoiseSchedule, NoiseStream};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_TEXT_SCALE: f64 = 7.5;
pub const DEFAULT_IMAGE_SCALE: f64 = 1.5;

/// Default blend stop: the last tenth of the steps run unblended.
pub fn default_blend_stop(steps: usize) -> usize {
    steps.div_ceil(10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub blend_stop: usize,
    pub text_scale: f64,
    pub image_scale: f64,
    pub seed: u64,
    /// Clamp the predicted clean latent to `[-c, c]`; `None` disables.
    #[serde(default = "default_clip")]
    pub clip_sample: Option<f64>,
    #[serde(default)]
    pub cacm: CacmConfig,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::with_steps(DEFAULT_STEPS)
    }
}

impl SamplerConfig {
    /// Defaults with `steps` steps and the matching default blend stop.
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            blend_stop: default_blend_stop(steps),
            text_scale: DEFAULT_TEXT_SCALE,
            image_scale: DEFAULT_IMAGE_SCALE,
            seed: 0,
            clip_sample: default_clip(),
            cacm: CacmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.blend_stop > self.steps {
            return Err(Error::invalid(format!(
                "blend stop {} exceeds step count {}",
                self.blend_stop, self.steps
            )));
        }
        for (name, v) in [("text_scale", self.text_scale), ("image_scale", self.image_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        self.cacm.validate()
    }
}

/// Partial sampler settings; unset fields keep the base value. When `steps`
/// is set without `blend_stop`, the blend stop follows the new step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blend_stop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_sample: Option<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cacm: Option<CacmConfig>,
}

impl SamplerOverrides {
    pub fn apply(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut cfg = base.clone();
        if let Some(steps) = self.steps {
            cfg.steps = steps;
            cfg.blend_stop = default_blend_stop(steps);
        }
        if let Some(s) = self.blend_stop {
            cfg.blend_stop = s;
        }
        if let Some(v) = self.text_scale {
            cfg.text_scale = v;
        }
        if let Some(v) = self.image_scale {
            cfg.image_scale = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.clip_sample {
            cfg.clip_sample = v;
        }
        if let Some(c) = &self.cacm {
            cfg.cacm = c.clone();
        }
        cfg
    }
}

/// One mask with its instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPair {
    pub mask: MaskSpec,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub image: RgbImage,
    pub pairs: Vec<EditPair>,
    pub config: SamplerConfig,
}

impl EditRequest {
    /// Build a request where pair `i` gets prompt index `i + 1`.
    pub fn new(
        image: RgbImage,
        pairs: impl IntoIterator<Item = (Array2<u8>, String, i64, u32)>,
        config: SamplerConfig,
    ) -> Self {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (raster, prompt, order, group))| EditPair {
                mask: MaskSpec::new(raster, order, group, i + 1),
                prompt,
            })
            .collect();
        Self {
            image,
            pairs,
            config,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("at least one mask-prompt pair is required"));
        }
        let dims = self.dims();
        latent_resolution(dims)?;
        for (i, p) in self.pairs.iter().enumerate() {
            if p.mask.dims() != dims {
                return Err(Error::invalid(format!(
                    "mask {} has dimensions {:?}, image is {:?}",
                    i + 1,
                    p.mask.dims(),
                    dims
                )));
            }
        }
        self.config.validate()
    }

    pub fn masks(&self) -> Vec<MaskSpec> {
        self.pairs.iter().map(|p| p.mask.clone()).collect()
    }

    pub fn prompts(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.prompt.as_str()).collect()
    }
}

/// Dual classifier-free guidance:
/// `ε_uu + s_I (ε_iu − ε_uu) + s_T (ε_it − ε_iu)`.
pub fn cfg_combine(
    eps_uu: &Latent,
    eps_iu: &Latent,
    eps_it: &Latent,
    image_scale: f64,
    text_scale: f64,
) -> Result<Latent> {
    if eps_uu.dim() != eps_iu.dim() || eps_iu.dim() != eps_it.dim() {
        return Err(Error::invalid(format!(
            "guidance branches disagree in shape: {:?}, {:?}, {:?}",
            eps_uu.dim(),
            eps_iu.dim(),
            eps_it.dim()
        )));
    }
    let mut out = eps_uu.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_iu)
        .and(eps_it)
        .for_each(|o, &iu, &it| {
            *o = *o + image_scale * (iu - *o) + text_scale * (it - iu);
        });
    Ok(out)
}

/// Replace cells outside `mask_latent` with `q(z_{t−1} | z_orig)` while
/// `t > blend_stop`. Returns `None` when the guard is inactive.
pub fn blend(
    z_next: &Latent,
    z_orig: &Latent,
    t: usize,
    mask_latent: &Array2<u8>,
    blend_stop: usize,
    schedule: &NoiseSchedule,
    stream: &NoiseStream,
) -> Result<Option<Latent>> {
    if t <= blend_stop {
        return Ok(None);
    }
    let (h, w, _) = z_next.dim();
    if z_orig.dim() != z_next.dim() || mask_latent.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "blend shapes disagree: latent {:?}, source {:?}, mask {:?}",
            z_next.dim(),
            z_orig.dim(),
            mask_latent.dim()
        )));
    }
    let background = forward_noise(z_orig, t - 1, schedule, stream)?;
    let mut out = z_next.clone();
    for ((y, x), &m) in mask_latent.indexed_iter() {
        if m == 0 {
            out.slice_mut(ndarray::s![y, x, ..])
                .assign(&background.slice(ndarray::s![y, x, ..]));
        }
    }
    Ok(Some(out))
}

/// Deterministic DDIM update from `t` to `t − 1`.
pub fn ddim_step(
    z_t: &Latent,
    eps: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Latent> {
    if t == 0 {
        return Err(Error::invalid("cannot step below t = 0"));
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar(t - 1)?;
    let mut x0 = (z_t - &(eps * (1.0 - a_t).sqrt())) / a_t.sqrt();
    if let Some(c) = clip {
        x0.mapv_inplace(|v| v.clamp(-c, c));
    }
    if a_prev == 1.0 {
        return Ok(x0);
    }
    Ok(x0 * a_prev.sqrt() + eps * (1.0 - a_prev).sqrt())
}

/// Counters gathered during one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub denoiser_calls: usize,
    pub blend_steps: usize,
}

/// State reported after each denoising step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    /// Step that was just taken, counting down from `T`.
    pub t: usize,
    /// Completed steps so far, `1..=T`.
    pub completed: usize,
    pub total: usize,
    /// `z_{t−1}` after blending.
    pub latent: &'a Latent,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub record_attention: bool,
    pub on_step: Option<&'a mut dyn FnMut(&StepEvent<'_>)>,
}

/// Resolved description of a finished edit, written next to the output image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub backend: String,
    /// `(height, width)` of the source and the output.
    pub dims: (usize, usize),
    pub config: SamplerConfig,
    pub pairs: Vec<SidecarPair>,
    pub stats: RunStats,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarPair {
    pub prompt: String,
    pub order: i64,
    pub group: u32,
    pub roles: Vec<TokenRole>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub image: RgbImage,
    pub stats: RunStats,
    pub attention: Vec<AttentionRecord>,
    /// Token roles of each packed prompt, in prompt order.
    pub roles: Vec<Vec<TokenRole>>,
    pub warnings: Vec<String>,
}

impl EditOutcome {
    pub fn sidecar(&self, request: &EditRequest, backend: impl Into<String>) -> Sidecar {
        Sidecar {
            backend: backend.into(),
            dims: request.dims(),
            config: request.config.clone(),
            pairs: request
                .pairs
                .iter()
                .zip(&self.roles)
                .map(|(p, roles)| SidecarPair {
                    prompt: p.prompt.clone(),
                    order: p.mask.order,
                    group: p.mask.group_id,
                    roles: roles.clone(),
                })
                .collect(),
            stats: self.stats.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Everything derived from a request before the loop starts.
pub struct Prepared {
    pub source_latent: Latent,
    pub pyramid: LabelPyramid,
    pub packed: PackedConditioning,
    pub unconditional: PackedConditioning,
    pub schedule: NoiseSchedule,
    pub warnings: Vec<String>,
}

/// Encode, composite and pack a request for `denoiser`'s attention sites.
pub fn prepare(
    request: &EditRequest,
    denoiser: &dyn DenoiserAdapter,
    codec: &dyn LatentCodec,
    encoder: &dyn TextEncoder,
) -> Result<Prepared> {
    request.validate()?;
    let latent_res = latent_resolution(request.dims())?;
    let source_latent = codec.encode(&request.image)?;
    let clm = composite(&request.masks())?;
    let mut resolutions = vec![latent_res];
    resolutions.extend(denoiser.attention_sites().iter().map(|s| s.resolution));
    let pyramid = build_pyramid(&clm, &resolutions)?;
    let embeddings = encode_prompts(&request.prompts(), encoder)?;
    let warnings = embeddings
        .iter()
        .enumerate()
        .filter(|(_, e)| e.truncated())
        .map(|(i, _)| format!("prompt {} was truncated to 77 tokens", i + 1))
        .collect();
    let packed = concat_prompts(&embeddings)?;
    let unconditional = unconditional_packing(embeddings.len(), encoder)?;
    let schedule = NoiseSchedule::scaled_linear(request.config.steps)?;
    Ok(Prepared {
        source_latent,
        pyramid,
        packed,
        unconditional,
        schedule,
        warnings,
    })
}

fn check_finite(z: &Latent, t: usize) -> Result<()> {
    if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
        let idx = ndarray::Dim(z.dim());
        return Err(Error::NonFinite {
            step: t,
            detail: format!(
                "first non-finite value at flat index {bad} of a {:?} latent",
                idx
            ),
        });
    }
    Ok(())
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::Backend { step: None, message } => Error::Backend {
            step: Some(t),
            message,
        },
        other => other,
    }
}

/// Run one edit.
pub fn run_edit(
    request: &EditRequest,
    denoiser: &mut dyn DenoiserAdapter,
    codec: &dyn LatentCodec,
    encoder: &dyn TextEncoder,
) -> Result<EditOutcome> {
    run_edit_with(request, denoiser, codec, encoder, RunOptions::default())
}

pub fn run_edit_with(
    request: &EditRequest,
    denoiser: &mut dyn DenoiserAdapter,
    codec: &dyn LatentCodec,
    encoder: &dyn TextEncoder,
    mut options: RunOptions<'_>,
) -> Result<EditOutcome> {
    let prep = prepare(request, denoiser, codec, encoder)?;
    let cfg = &request.config;
    let mut denoiser = install_hooks(denoiser, &prep.pyramid, &prep.packed, &cfg.cacm)?;
    if options.record_attention {
        denoiser.hooks_mut().enable_recording();
    }
    let latent_res = latent_resolution(request.dims())?;
    let blend_mask = &prep
        .pyramid
        .level(latent_res)
        .expect("latent level is always built")
        .coverage;

    let stream = NoiseStream::new(cfg.seed);
    let shape = prep.source_latent.dim();
    let null_image = Latent::zeros(shape);
    let mut z = stream.noise(cfg.steps, shape);
    let mut stats = RunStats::default();

    for t in (1..=cfg.steps).rev() {
        let step = StepContext {
            t,
            alpha_bar: prep.schedule.alpha_bar(t)?,
        };
        let input = |image_latent, conditioning| DenoiserInput {
            latent: &z,
            image_latent,
            conditioning,
            step,
        };
        let eps_uu = denoiser
            .predict_plain(&input(&null_image, prep.unconditional.matrix()))
            .map_err(|e| at_step(e, t))?;
        let eps_iu = denoiser
            .predict_plain(&input(&prep.source_latent, prep.unconditional.matrix()))
            .map_err(|e| at_step(e, t))?;
        let eps_it = denoiser
            .predict_conditional(&input(&prep.source_latent, prep.packed.matrix()))
            .map_err(|e| at_step(e, t))?;
        stats.denoiser_calls += 3;

        let eps = cfg_combine(&eps_uu, &eps_iu, &eps_it, cfg.image_scale, cfg.text_scale)?;
        let mut next = ddim_step(&z, &eps, t, &prep.schedule, cfg.clip_sample)?;
        check_finite(&next, t)?;
        if let Some(blended) = blend(
            &next,
            &prep.source_latent,
            t,
            blend_mask,
            cfg.blend_stop,
            &prep.schedule,
            &stream,
        )? {
            next = blended;
            stats.blend_steps += 1;
        }
        stats.steps += 1;
        if let Some(cb) = options.on_step.as_deref_mut() {
            cb(&StepEvent {
                t,
                completed: stats.steps,
                total: cfg.steps,
                latent: &next,
            });
        }
        z = next;
    }

    let image = codec.decode(&z)?;
    let roles = prep
        .packed
        .spans()
        .iter()
        .map(|s| prep.packed.roles()[s.clone()].to_vec())
        .collect();
    Ok(EditOutcome {
        image,
        stats,
        attention: denoiser.hooks_mut().take_records(),
        roles,
        warnings: prep.warnings,
    })
}
