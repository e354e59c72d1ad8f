//! Pre-trained InstructPix2Pix backend: weight discovery and attention-site
//! layout.
//!
//! The model directory follows the diffusers layout
//! (`unet/`, `vae/`, `text_encoder/`, `tokenizer/`). Weights are never
//! vendored; point [`Ip2pConfig::model_dir`] (or `PROMPT_ARTISAN_IP2P_DIR`)
//! at a local snapshot.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use image::RgbImage;

use super::{AttentionSite, DenoiserAdapter, DenoiserInput, Latent, LatentCodec, SiteKind};
use crate::error::{Error, Result};
use crate::prompt::{role_layout, PromptEmbedding, TextEncoder, Tokenized, TOKENS_PER_PROMPT};

const NO_RUNTIME: &str =
    "the InstructPix2Pix forward pass requires a tensor runtime that is not compiled into this build";

pub const MODEL_DIR_ENV: &str = "PROMPT_ARTISAN_IP2P_DIR";
pub const DEVICE_ENV: &str = "PROMPT_ARTISAN_DEVICE";
pub const DEFAULT_MODEL_ID: &str = "timbrooks/instruct-pix2pix";

const REQUIRED_FILES: &[&str] = &[
    "unet/config.json",
    "unet/diffusion_pytorch_model.safetensors",
    "vae/diffusion_pytorch_model.safetensors",
    "text_encoder/model.safetensors",
    "tokenizer/vocab.json",
    "tokenizer/merges.txt",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Device {
    Cpu,
    Cuda(usize),
}

impl std::str::FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Device::Cpu),
            _ => s
                .strip_prefix("cuda:")
                .and_then(|i| i.parse().ok())
                .map(Device::Cuda)
                .ok_or_else(|| Error::invalid(format!("unknown device `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ip2pConfig {
    pub model_dir: PathBuf,
    pub device: Device,
}

impl Ip2pConfig {
    /// Read `PROMPT_ARTISAN_IP2P_DIR` and `PROMPT_ARTISAN_DEVICE` (default `cpu`).
    pub fn from_env() -> Result<Self> {
        let model_dir = std::env::var_os(MODEL_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::backend(fetch_instructions(None)))?;
        let device = std::env::var(DEVICE_ENV)
            .unwrap_or_else(|_| "cpu".into())
            .parse()?;
        Ok(Self { model_dir, device })
    }
}

fn fetch_instructions(dir: Option<&Path>) -> String {
    let target = dir.map_or_else(|| "<dir>".to_owned(), |d| d.display().to_string());
    format!(
        "InstructPix2Pix weights not found; download them with \
         `huggingface-cli download {DEFAULT_MODEL_ID} --local-dir {target}` \
         and set {MODEL_DIR_ENV}={target}"
    )
}

/// The subset of a diffusers `UNet2DConditionModel` config that fixes where
/// attention layers sit.
#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct UNetLayout {
    pub in_channels: usize,
    pub block_out_channels: Vec<usize>,
    pub down_block_types: Vec<String>,
    pub up_block_types: Vec<String>,
    pub layers_per_block: usize,
    pub cross_attention_dim: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default = "default_transformer_depth")]
    pub transformer_layers_per_block: usize,
}

fn default_sample_size() -> usize {
    64
}

fn default_transformer_depth() -> usize {
    1
}

impl UNetLayout {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::invalid(format!("unet config: {e}")))
    }

    /// Every self/cross attention layer for a latent grid of `latent_res`.
    pub fn attention_sites(&self, latent_res: (usize, usize)) -> Result<Vec<AttentionSite>> {
        let depth = self.down_block_types.len();
        if depth == 0 || self.up_block_types.len() != depth {
            return Err(Error::invalid("unet config has mismatched down/up blocks"));
        }
        let factor = 1 << (depth - 1);
        if latent_res.0 % factor != 0 || latent_res.1 % factor != 0 {
            return Err(Error::invalid(format!(
                "latent grid {latent_res:?} is not divisible by {factor}"
            )));
        }
        let at = |level: usize| (latent_res.0 >> level, latent_res.1 >> level);
        let mut sites = Vec::new();
        let mut push_block = |prefix: String, res: (usize, usize), attentions: usize| {
            for a in 0..attentions {
                for tb in 0..self.transformer_layers_per_block {
                    let base = format!("{prefix}.attentions.{a}.transformer_blocks.{tb}");
                    sites.push(AttentionSite::new(format!("{base}.attn1"), SiteKind::SelfAttn, res));
                    sites.push(AttentionSite::new(format!("{base}.attn2"), SiteKind::Cross, res));
                }
            }
        };
        for (i, ty) in self.down_block_types.iter().enumerate() {
            if ty.starts_with("CrossAttn") {
                push_block(format!("down_blocks.{i}"), at(i), self.layers_per_block);
            }
        }
        push_block("mid_block".into(), at(depth - 1), 1);
        for (j, ty) in self.up_block_types.iter().enumerate() {
            if ty.starts_with("CrossAttn") {
                push_block(format!("up_blocks.{j}"), at(depth - 1 - j), self.layers_per_block + 1);
            }
        }
        Ok(sites)
    }
}

/// Loaded model description.
#[derive(Debug, Clone)]
pub struct Ip2pBackend {
    config: Ip2pConfig,
    layout: UNetLayout,
}

impl Ip2pBackend {
    pub fn model_dir(&self) -> &Path {
        &self.config.model_dir
    }

    pub fn layout(&self) -> &UNetLayout {
        &self.layout
    }

    pub fn denoiser(&self, latent_res: (usize, usize)) -> Result<Ip2pDenoiser> {
        Ok(Ip2pDenoiser {
            sites: self.layout.attention_sites(latent_res)?,
        })
    }

    pub fn codec(&self) -> Ip2pCodec {
        Ip2pCodec
    }

    pub fn encoder(&self) -> Ip2pTextEncoder {
        Ip2pTextEncoder {
            width: self.layout.cross_attention_dim,
        }
    }
}

/// VAE handle of the pre-trained model.
#[derive(Debug, Clone, Copy)]
pub struct Ip2pCodec;

impl LatentCodec for Ip2pCodec {
    fn encode(&self, _image: &RgbImage) -> Result<Latent> {
        Err(Error::backend(NO_RUNTIME))
    }

    fn decode(&self, _latent: &Latent) -> Result<RgbImage> {
        Err(Error::backend(NO_RUNTIME))
    }
}

/// CLIP text encoder handle of the pre-trained model.
#[derive(Debug, Clone, Copy)]
pub struct Ip2pTextEncoder {
    width: usize,
}

impl TextEncoder for Ip2pTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    /// Role layout from whitespace words. BPE may split a word into several
    /// tokens, so the layout is a lower bound on the content length.
    fn tokenize(&self, text: &str) -> Tokenized {
        let words = text.split_whitespace().count();
        let content = words.min(TOKENS_PER_PROMPT - 2);
        Tokenized {
            ids: vec![0; TOKENS_PER_PROMPT],
            roles: role_layout(content),
            truncated: words > content,
        }
    }

    fn encode(&self, _text: &str) -> Result<PromptEmbedding> {
        Err(Error::backend(NO_RUNTIME))
    }
}

/// Validate the model directory and device, and read the UNet layout.
pub fn real_backend_load(config: Ip2pConfig) -> Result<Ip2pBackend> {
    let dir = &config.model_dir;
    if let Some(missing) = REQUIRED_FILES.iter().find(|f| !dir.join(f).is_file()) {
        return Err(Error::backend(format!(
            "missing `{missing}`. {}",
            fetch_instructions(Some(dir))
        )));
    }
    if let Device::Cuda(i) = config.device {
        return Err(Error::backend(format!(
            "device cuda:{i} requested but this build has no GPU runtime"
        )));
    }
    let layout = UNetLayout::from_json(&std::fs::read_to_string(dir.join("unet/config.json"))?)?;
    if layout.in_channels != 8 {
        return Err(Error::invalid(format!(
            "unet takes {} input channels; an InstructPix2Pix checkpoint takes 8",
            layout.in_channels
        )));
    }
    Ok(Ip2pBackend { config, layout })
}

/// Denoiser handle for the pre-trained network.
#[derive(Debug, Clone)]
pub struct Ip2pDenoiser {
    sites: Vec<AttentionSite>,
}

impl DenoiserAdapter for Ip2pDenoiser {
    fn name(&self) -> &str {
        "ip2p"
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    fn predict(
        &mut self,
        _input: &DenoiserInput<'_>,
        _hook: Option<&mut dyn super::AttentionHook>,
    ) -> Result<Latent> {
        // FIXME: wire a tensor runtime (candle) with hookable attention processors.
        Err(Error::backend(NO_RUNTIME))
    }
}
