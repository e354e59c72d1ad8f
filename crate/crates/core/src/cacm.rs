//! Region-controlled attention.
//!
//! Attention control is expressed as additive pre-softmax biases:
//!
//! - **Cross-attention.** A pixel of region `k` may only attend to the tokens
//!   of prompt `k`; every other prompt's span gets `−B`. Inside its own span
//!   the content and EOT tokens receive a positive boost, while SOT and PAD
//!   are left at exactly zero. Background pixels attend only to SOT/PAD
//!   positions under [`BackgroundPolicy::SotPadOnly`].
//! - **Self-attention.** A pixel of group `g` may attend to pixels of group
//!   `g` and to background pixels; pixels of other groups get `−B`. Background
//!   pixels attend everywhere. Masks sharing a group id therefore see each
//!   other.
//!
//! The boost of region `k` follows `w · ln(1 + σ_t) · max(QKᵀ/√d)`, where the
//! maximum runs over the queries of region `k` and the tokens of prompt `k`
//! only, and is recomputed for every site and step.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{
    AttentionHook, AttentionSite, DenoiserAdapter, DenoiserInput, Latent, SiteKind, StepContext,
};
use crate::error::{Error, Result};
use crate::mask::LabelPyramid;
use crate::prompt::PackedConditioning;

pub const DEFAULT_NEG_BIAS: f64 = 1e4;
pub const DEFAULT_BOOST_WEIGHT: f64 = 0.3;

/// Which tokens background pixels may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPolicy {
    /// Only SOT and PAD positions of every span.
    #[default]
    SotPadOnly,
    /// Every token.
    Unrestricted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacmConfig {
    pub boost_weight: f64,
    pub neg_bias: f64,
    pub enable_cross: bool,
    pub enable_self: bool,
    pub enable_boost: bool,
    pub background_policy: BackgroundPolicy,
    /// Restrict control to these attention resolutions; `None` means all.
    pub resolutions: Option<Vec<(usize, usize)>>,
    /// Also separate regions in self-attention of the unconditional guidance
    /// branches. Cross-attention control always stays on the text branch.
    pub self_control_all_branches: bool,
}

impl Default for CacmConfig {
    fn default() -> Self {
        Self {
            boost_weight: DEFAULT_BOOST_WEIGHT,
            neg_bias: DEFAULT_NEG_BIAS,
            enable_cross: true,
            enable_self: true,
            enable_boost: true,
            background_policy: BackgroundPolicy::SotPadOnly,
            resolutions: None,
            self_control_all_branches: true,
        }
    }
}

impl CacmConfig {
    /// Every control switched off.
    pub fn disabled() -> Self {
        Self {
            enable_cross: false,
            enable_self: false,
            enable_boost: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.neg_bias.is_finite() && self.neg_bias > 0.0) {
            return Err(Error::invalid(format!(
                "neg_bias must be positive and finite, got {}",
                self.neg_bias
            )));
        }
        if !(self.boost_weight.is_finite() && self.boost_weight >= 0.0) {
            return Err(Error::invalid(format!(
                "boost_weight must be non-negative, got {}",
                self.boost_weight
            )));
        }
        Ok(())
    }

    fn applies_to(&self, site: &AttentionSite) -> bool {
        let enabled = match site.kind {
            SiteKind::Cross => self.enable_cross,
            SiteKind::SelfAttn => self.enable_self,
        };
        enabled
            && self
                .resolutions
                .as_ref()
                .is_none_or(|r| r.contains(&site.resolution))
    }
}

/// `w · ln(1 + σ) · logits_max`.
pub fn boost_schedule(w: f64, sigma_t: f64, logits_max: f64) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    w * sigma_t.ln_1p() * logits_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CrossCell {
    Zero,
    Boost,
    Blocked,
}

/// Structure of a cross-attention bias, independent of the boost value.
#[derive(Debug, Clone)]
pub struct CrossBiasPattern {
    cells: Array2<CrossCell>,
    labels: Vec<u32>,
    num_prompts: usize,
    neg_bias: f64,
    boost_enabled: bool,
}

impl CrossBiasPattern {
    /// Build the pattern for a flattened label raster.
    pub fn new(
        labels: &Array2<u32>,
        packed: &PackedConditioning,
        cfg: &CacmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = packed.num_prompts();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > n) {
            return Err(Error::invalid(format!(
                "label {bad} references a prompt beyond the {n} packed prompts"
            )));
        }
        let roles = packed.roles();
        let flat: Vec<u32> = labels.iter().copied().collect();
        let cells = if cfg.enable_cross {
            Array2::from_shape_fn((flat.len(), packed.len()), |(p, tok)| {
                let label = flat[p] as usize;
                let role = roles[tok];
                if label == 0 {
                    match cfg.background_policy {
                        BackgroundPolicy::Unrestricted => CrossCell::Zero,
                        BackgroundPolicy::SotPadOnly if role.is_semantic() => CrossCell::Blocked,
                        BackgroundPolicy::SotPadOnly => CrossCell::Zero,
                    }
                } else if packed.span_of(tok) != label - 1 {
                    CrossCell::Blocked
                } else if role.is_semantic() {
                    CrossCell::Boost
                } else {
                    CrossCell::Zero
                }
            })
        } else {
            Array2::from_elem((labels.len(), packed.len()), CrossCell::Zero)
        };
        Ok(Self {
            cells,
            labels: flat,
            num_prompts: n,
            neg_bias: cfg.neg_bias,
            boost_enabled: cfg.enable_boost,
        })
    }

    /// Materialize with a concrete boost. Negative boosts are clamped to 0.
    pub fn materialize(&self, boost: f64) -> CrossAttentionBias {
        self.materialize_per_region(&vec![boost; self.num_prompts])
    }

    /// Materialize with `boosts[k - 1]` for the pixels of region `k`.
    /// Negative boosts are clamped to 0.
    pub fn materialize_per_region(&self, boosts: &[f64]) -> CrossAttentionBias {
        let mut out = Array2::zeros(self.cells.dim());
        self.materialize_into(boosts, &mut out);
        CrossAttentionBias { matrix: out }
    }

    /// Largest logit of each region's pixels onto its own prompt's tokens,
    /// over all heads; `-inf` for regions with no pixel at this resolution.
    fn region_max(&self, logits: &[Array2<f64>], packed_spans: &[std::ops::Range<usize>]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.num_prompts];
        for head in logits {
            for (row, &label) in head.rows().into_iter().zip(&self.labels) {
                if label == 0 {
                    continue;
                }
                let k = label as usize - 1;
                let m = row
                    .slice(ndarray::s![packed_spans[k].clone()])
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                out[k] = out[k].max(m);
            }
        }
        out
    }

    fn materialize_into(&self, boosts: &[f64], out: &mut Array2<f64>) {
        assert_eq!(boosts.len(), self.num_prompts, "one boost per prompt");
        let clamp = |b: f64| if self.boost_enabled { b.max(0.0) } else { 0.0 };
        for ((p, tok), o) in out.indexed_iter_mut() {
            *o = match self.cells[[p, tok]] {
                CrossCell::Zero => 0.0,
                CrossCell::Boost => clamp(boosts[self.labels[p] as usize - 1]),
                CrossCell::Blocked => -self.neg_bias,
            };
        }
    }

    fn counts(&self) -> (usize, usize) {
        let blocked = self.cells.iter().filter(|&&c| c == CrossCell::Blocked).count();
        let boosted = self.cells.iter().filter(|&&c| c == CrossCell::Boost).count();
        (blocked, boosted)
    }
}

/// `P x 77n` additive bias for a cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionBias {
    pub matrix: Array2<f64>,
}

/// `P x P` additive bias for a self-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionBias {
    pub matrix: Array2<f64>,
}

/// Cross-attention bias for the label raster at one attention resolution.
pub fn build_cross_bias(
    labels: &Array2<u32>,
    packed: &PackedConditioning,
    cfg: &CacmConfig,
    boost: f64,
) -> Result<CrossAttentionBias> {
    Ok(CrossBiasPattern::new(labels, packed, cfg)?.materialize(boost))
}

/// Self-attention bias for the group raster at one attention resolution.
pub fn build_self_bias(groups: &Array2<u32>, cfg: &CacmConfig) -> SelfAttentionBias {
    let flat: Vec<u32> = groups.iter().copied().collect();
    let p = flat.len();
    let matrix = if cfg.enable_self {
        Array2::from_shape_fn((p, p), |(q, k)| {
            let (gq, gk) = (flat[q], flat[k]);
            if gq == 0 || gk == 0 || gq == gk {
                0.0
            } else {
                -cfg.neg_bias
            }
        })
    } else {
        Array2::zeros((p, p))
    };
    SelfAttentionBias { matrix }
}

/// Per-call summary written to the attention dump.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub t: usize,
    pub site: String,
    pub kind: SiteKind,
    pub resolution: (usize, usize),
    /// Boost applied to each region, in prompt order; empty for self sites.
    pub boosts: Vec<f64>,
    pub blocked_entries: usize,
    pub boosted_entries: usize,
    /// Largest probability mass any query row puts on blocked keys.
    pub max_blocked_mass: f64,
    pub mean_blocked_mass: f64,
}

/// Attention hook implementing region control for one sampling run.
#[derive(Debug)]
pub struct CacmHooks {
    cfg: CacmConfig,
    cross: HashMap<(usize, usize), CrossBiasPattern>,
    selfs: HashMap<(usize, usize), SelfAttentionBias>,
    scratch: HashMap<(usize, usize), Array2<f64>>,
    spans: Vec<std::ops::Range<usize>>,
    current: Option<(StepContext, Vec<f64>)>,
    records: Option<Vec<AttentionRecord>>,
}

impl CacmHooks {
    /// Precompute bias structure for every site `cfg` applies to.
    pub fn install(
        sites: &[AttentionSite],
        pyramid: &LabelPyramid,
        packed: &PackedConditioning,
        cfg: &CacmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cross = HashMap::new();
        let mut selfs = HashMap::new();
        for site in sites.iter().filter(|s| cfg.applies_to(s)) {
            let level = pyramid.level(site.resolution).ok_or_else(|| {
                Error::invalid(format!(
                    "no mask level at resolution {:?} for site `{}`",
                    site.resolution, site.id
                ))
            })?;
            match site.kind {
                SiteKind::Cross if !cross.contains_key(&site.resolution) => {
                    cross.insert(site.resolution, CrossBiasPattern::new(&level.labels, packed, cfg)?);
                }
                SiteKind::SelfAttn if !selfs.contains_key(&site.resolution) => {
                    selfs.insert(site.resolution, build_self_bias(&level.groups, cfg));
                }
                _ => {}
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            cross,
            selfs,
            scratch: HashMap::new(),
            spans: packed.spans().to_vec(),
            current: None,
            records: None,
        })
    }

    /// Start collecting an [`AttentionRecord`] per site call.
    pub fn enable_recording(&mut self) {
        self.records.get_or_insert_with(Vec::new);
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        self.records.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn config(&self) -> &CacmConfig {
        &self.cfg
    }

    /// True when no site receives any bias.
    pub fn is_inert(&self) -> bool {
        self.cross.is_empty() && self.selfs.is_empty()
    }

    fn active_bias(&self, site: &AttentionSite) -> Option<&Array2<f64>> {
        if !self.cfg.applies_to(site) {
            return None;
        }
        match site.kind {
            SiteKind::Cross => self.scratch.get(&site.resolution),
            SiteKind::SelfAttn => self.selfs.get(&site.resolution).map(|b| &b.matrix),
        }
    }
}

impl AttentionHook for CacmHooks {
    fn bias(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        logits: &[Array2<f64>],
    ) -> Result<Option<&Array2<f64>>> {
        if !self.cfg.applies_to(site) {
            self.current = Some((*step, Vec::new()));
            return Ok(None);
        }
        match site.kind {
            SiteKind::Cross => {
                let pattern = self.cross.get(&site.resolution).ok_or_else(|| {
                    Error::invalid(format!("site `{}` was not declared at install time", site.id))
                })?;
                if logits.iter().any(|l| l.dim() != pattern.cells.dim()) {
                    return Err(Error::backend(format!(
                        "site `{}` reported logits that are not {:?}",
                        site.id,
                        pattern.cells.dim()
                    )));
                }
                let sigma = step.sigma();
                let boosts: Vec<f64> = pattern
                    .region_max(logits, &self.spans)
                    .into_iter()
                    .map(|m| {
                        if m.is_finite() {
                            boost_schedule(self.cfg.boost_weight, sigma, m)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let buf = self
                    .scratch
                    .entry(site.resolution)
                    .or_insert_with(|| Array2::zeros(pattern.cells.dim()));
                pattern.materialize_into(&boosts, buf);
                let clamped = boosts
                    .iter()
                    .map(|&b| if pattern.boost_enabled { b.max(0.0) } else { 0.0 })
                    .collect();
                self.current = Some((*step, clamped));
                Ok(Some(&*buf))
            }
            SiteKind::SelfAttn => {
                self.current = Some((*step, Vec::new()));
                let bias = self.selfs.get(&site.resolution).ok_or_else(|| {
                    Error::invalid(format!("site `{}` was not declared at install time", site.id))
                })?;
                Ok(Some(&bias.matrix))
            }
        }
    }

    fn observe(&mut self, site: &AttentionSite, probs: &[Array2<f64>]) {
        if self.records.is_none() {
            return;
        }
        let Some((step, boosts)) = self.current.clone() else {
            return;
        };
        let threshold = -self.cfg.neg_bias / 2.0;
        let (blocked_entries, boosted_entries, masses) = match self.active_bias(site) {
            Some(bias) => {
                let mut masses = Vec::new();
                for head in probs {
                    for (row, brow) in head.rows().into_iter().zip(bias.rows()) {
                        let m: f64 = row
                            .iter()
                            .zip(brow.iter())
                            .filter(|(_, &b)| b < threshold)
                            .map(|(&p, _)| p)
                            .sum();
                        masses.push(m);
                    }
                }
                let (blocked, boosted) = match site.kind {
                    SiteKind::Cross => self.cross[&site.resolution].counts(),
                    SiteKind::SelfAttn => {
                        (bias.iter().filter(|&&b| b < threshold).count(), 0)
                    }
                };
                (blocked, boosted, masses)
            }
            None => (0, 0, vec![0.0]),
        };
        let max = masses.iter().copied().fold(0.0, f64::max);
        let mean = masses.iter().sum::<f64>() / masses.len().max(1) as f64;
        if let Some(records) = self.records.as_mut() {
            records.push(AttentionRecord {
                t: step.t,
                site: site.id.clone(),
                kind: site.kind,
                resolution: site.resolution,
                boosts,
                blocked_entries,
                boosted_entries,
                max_blocked_mass: max,
                mean_blocked_mass: mean,
            });
        }
    }
}

/// Self-attention biases only, without recording.
struct SelfOnly<'a>(&'a mut CacmHooks);

impl AttentionHook for SelfOnly<'_> {
    fn bias(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        logits: &[Array2<f64>],
    ) -> Result<Option<&Array2<f64>>> {
        match site.kind {
            SiteKind::Cross => Ok(None),
            SiteKind::SelfAttn => self.0.bias(site, step, logits),
        }
    }
}

/// A denoiser with region control installed.
#[derive(Debug)]
pub struct HookedDenoiser<D> {
    inner: D,
    hooks: CacmHooks,
}

impl<D: DenoiserAdapter> HookedDenoiser<D> {
    /// Forward pass with region control (image + text branch).
    pub fn predict_conditional(&mut self, input: &DenoiserInput<'_>) -> Result<Latent> {
        self.inner.predict(input, Some(&mut self.hooks))
    }

    /// Forward pass of an unconditional branch. Only self-attention region
    /// separation applies, and only with `self_control_all_branches`.
    pub fn predict_plain(&mut self, input: &DenoiserInput<'_>) -> Result<Latent> {
        if self.hooks.cfg.self_control_all_branches && !self.hooks.selfs.is_empty() {
            self.inner.predict(input, Some(&mut SelfOnly(&mut self.hooks)))
        } else {
            self.inner.predict(input, None)
        }
    }

    pub fn hooks(&self) -> &CacmHooks {
        &self.hooks
    }

    pub fn hooks_mut(&mut self) -> &mut CacmHooks {
        &mut self.hooks
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }

    /// Run a probe at `site_id` through the installed hooks.
    pub fn probe(&mut self, site_id: &str, input: &DenoiserInput<'_>) -> Result<Vec<Array2<f64>>> {
        crate::backend::probe_attention(&mut self.inner, site_id, input, Some(&mut self.hooks))
    }

    pub fn into_parts(self) -> (D, CacmHooks) {
        (self.inner, self.hooks)
    }
}

/// Install region control into every attention site `adapter` declares.
pub fn install_hooks<D: DenoiserAdapter>(
    adapter: D,
    pyramid: &LabelPyramid,
    packed: &PackedConditioning,
    cfg: &CacmConfig,
) -> Result<HookedDenoiser<D>> {
    let hooks = CacmHooks::install(adapter.attention_sites(), pyramid, packed, cfg)?;
    Ok(HookedDenoiser {
        inner: adapter,
        hooks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_pyramid, composite, MaskSpec};
    use crate::prompt::{concat_prompts, PromptEmbedding, TokenRole, TOKENS_PER_PROMPT};
    use ndarray::array;
    use proptest::prelude::*;

    const B: f64 = DEFAULT_NEG_BIAS;

    /// Packed conditioning whose spans have `content` content tokens each.
    fn packed(content: &[usize]) -> PackedConditioning {
        let embs: Vec<_> = content
            .iter()
            .map(|&c| {
                PromptEmbedding::new(
                    Array2::zeros((TOKENS_PER_PROMPT, 2)),
                    crate::prompt::role_layout(c),
                    false,
                )
                .unwrap()
            })
            .collect();
        concat_prompts(&embs).unwrap()
    }

    /// Rule-by-rule oracle over explicit (label, span, role) triples.
    fn cross_oracle(
        labels: &[u32],
        packed: &PackedConditioning,
        cfg: &CacmConfig,
        boost: f64,
    ) -> Array2<f64> {
        let mut m = Array2::zeros((labels.len(), packed.len()));
        if !cfg.enable_cross {
            return m;
        }
        for (p, &l) in labels.iter().enumerate() {
            for (i, span) in packed.spans().iter().enumerate() {
                for tok in span.clone() {
                    let role = packed.roles()[tok];
                    let sot_or_pad = matches!(role, TokenRole::Sot | TokenRole::Pad);
                    m[[p, tok]] = if l == 0 {
                        if cfg.background_policy == BackgroundPolicy::Unrestricted || sot_or_pad {
                            0.0
                        } else {
                            -cfg.neg_bias
                        }
                    } else if l as usize - 1 != i {
                        -cfg.neg_bias
                    } else if sot_or_pad || !cfg.enable_boost {
                        0.0
                    } else {
                        boost
                    };
                }
            }
        }
        m
    }

    #[test]
    fn boost_uses_each_regions_own_span() {
        let p = packed(&[1, 1]);
        let labels = array![[1u32, 2]];
        let pattern = CrossBiasPattern::new(&labels, &p, &CacmConfig::default()).unwrap();
        let mut logits = Array2::zeros((2, p.len()));
        logits[[0, 1]] = 5.0;
        logits[[0, TOKENS_PER_PROMPT + 1]] = 100.0;
        logits[[1, 0]] = 50.0;
        logits[[1, TOKENS_PER_PROMPT + 2]] = 3.0;
        assert_eq!(pattern.region_max(&[logits], p.spans()), vec![5.0, 3.0]);

        let bias = pattern.materialize_per_region(&[2.0, -1.0]).matrix;
        assert_eq!(bias[[0, 1]], 2.0);
        assert_eq!(bias[[0, 0]], 0.0);
        assert_eq!(bias[[1, TOKENS_PER_PROMPT + 1]], 0.0);
        assert_eq!(bias[[1, 1]], -B);
    }

    #[test]
    fn boost_schedule_values() {
        assert_eq!(boost_schedule(0.0, 3.0, 5.0), 0.0);
        assert_eq!(boost_schedule(0.0, 3.0, f64::INFINITY), 0.0);
        assert_eq!(boost_schedule(0.7, 0.0, 5.0), 0.0);
        let v = boost_schedule(0.5, std::f64::consts::E - 1.0, 2.0);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_two_region_rows() {
        // Spans reduced to their first three tokens [SOT, CONTENT, EOT].
        let p = packed(&[1, 1]);
        let labels = array![[1u32, 2]];
        let bias = build_cross_bias(&labels, &p, &CacmConfig::default(), 0.8).unwrap().matrix;
        let pick = |row: usize| -> Vec<f64> {
            [0, 1, 2, 77, 78, 79].iter().map(|&t| bias[[row, t]]).collect()
        };
        assert_eq!(pick(0), vec![0.0, 0.8, 0.8, -B, -B, -B]);
        assert_eq!(pick(1), vec![-B, -B, -B, 0.0, 0.8, 0.8]);
        // PAD of own span stays 0, PAD of the other span is blocked.
        assert_eq!(bias[[0, 50]], 0.0);
        assert_eq!(bias[[0, 77 + 50]], -B);
    }

    #[test]
    fn cross_control_off_is_zero() {
        let p = packed(&[2, 3]);
        let cfg = CacmConfig {
            enable_cross: false,
            ..CacmConfig::default()
        };
        let bias = build_cross_bias(&array![[0u32, 1, 2]], &p, &cfg, 3.0).unwrap();
        assert!(bias.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_full_region_without_boost_is_zero() {
        let p = packed(&[4]);
        let labels = Array2::from_elem((4, 4), 1u32);
        let bias = build_cross_bias(&labels, &p, &CacmConfig::default(), 0.0).unwrap();
        assert!(bias.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boost_disabled_leaves_only_zero_and_block() {
        let p = packed(&[2, 2]);
        let cfg = CacmConfig {
            enable_boost: false,
            ..CacmConfig::default()
        };
        let bias = build_cross_bias(&array![[1u32, 2, 0]], &p, &cfg, 5.0).unwrap();
        assert!(bias.matrix.iter().all(|&v| v == 0.0 || v == -B));
    }

    #[test]
    fn negative_boost_clamps_to_zero() {
        let p = packed(&[2]);
        let bias = build_cross_bias(&array![[1u32]], &p, &CacmConfig::default(), -2.0).unwrap();
        assert!(bias.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let p = packed(&[1, 1]);
        assert!(build_cross_bias(&array![[3u32]], &p, &CacmConfig::default(), 0.0).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let p = packed(&[1]);
        for cfg in [
            CacmConfig { neg_bias: 0.0, ..CacmConfig::default() },
            CacmConfig { boost_weight: -1.0, ..CacmConfig::default() },
        ] {
            assert!(build_cross_bias(&array![[1u32]], &p, &cfg, 0.0).is_err());
        }
    }

    #[test]
    fn self_bias_rules() {
        let b = build_self_bias(&array![[1u32, 2, 0]], &CacmConfig::default()).matrix;
        assert_eq!(b, array![[0.0, -B, 0.0], [-B, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let same = build_self_bias(&Array2::from_elem((2, 3), 4u32), &CacmConfig::default());
        assert!(same.matrix.iter().all(|&v| v == 0.0));
        let off = CacmConfig {
            enable_self: false,
            ..CacmConfig::default()
        };
        assert!(build_self_bias(&array![[1u32, 2]], &off).matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_group_opens_attention_between_masks() {
        let m1 = MaskSpec::new(array![[1, 0, 0]], 1, 5, 1);
        let m2 = MaskSpec::new(array![[0, 0, 1]], 2, 5, 2);
        let clm = composite(&[m1, m2]).unwrap();
        let b = build_self_bias(clm.groups(), &CacmConfig::default()).matrix;
        assert_eq!(b[[0, 2]], 0.0);
        assert_eq!(b[[2, 0]], 0.0);
    }

    #[test]
    fn install_rejects_missing_level() {
        let clm = composite(&[MaskSpec::new(Array2::ones((8, 8)), 0, 1, 1)]).unwrap();
        let pyr = build_pyramid(&clm, &[(4, 4)]).unwrap();
        let sites = [AttentionSite::new("x", SiteKind::Cross, (2, 2))];
        let p = packed(&[1]);
        assert!(CacmHooks::install(&sites, &pyr, &p, &CacmConfig::default()).is_err());
        // Filtered out by the resolution list: no level needed.
        let cfg = CacmConfig {
            resolutions: Some(vec![(4, 4)]),
            ..CacmConfig::default()
        };
        assert!(CacmHooks::install(&sites, &pyr, &p, &cfg).unwrap().is_inert());
    }

    fn labels_strategy(n: u32) -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0..=n, 1..10)
    }

    proptest! {
        #[test]
        fn cross_bias_matches_oracle(
            content in prop::collection::vec(0usize..6, 1..4),
            seed_labels in labels_strategy(3),
            boost in 0.0f64..4.0,
            enable_cross in any::<bool>(),
            enable_boost in any::<bool>(),
            unrestricted in any::<bool>(),
        ) {
            let n = content.len() as u32;
            let labels: Vec<u32> = seed_labels.iter().map(|l| l % (n + 1)).collect();
            let p = packed(&content);
            let cfg = CacmConfig {
                enable_cross,
                enable_boost,
                background_policy: if unrestricted { BackgroundPolicy::Unrestricted } else { BackgroundPolicy::SotPadOnly },
                ..CacmConfig::default()
            };
            let raster = Array2::from_shape_vec((1, labels.len()), labels.clone()).unwrap();
            let got = build_cross_bias(&raster, &p, &cfg, boost).unwrap().matrix;
            prop_assert_eq!(got, cross_oracle(&labels, &p, &cfg, boost));
        }

        #[test]
        fn sot_pad_exact_zero_in_own_span(
            w in prop::sample::select(vec![0.0, 0.3, 1.0]),
            sigma in 0.0f64..20.0,
            logits_max in -5.0f64..5.0,
            labels in labels_strategy(2),
        ) {
            let p = packed(&[3, 1]);
            let cfg = CacmConfig { boost_weight: w, ..CacmConfig::default() };
            let boost = boost_schedule(w, sigma, logits_max);
            let raster = Array2::from_shape_vec((1, labels.len()), labels.clone()).unwrap();
            let bias = build_cross_bias(&raster, &p, &cfg, boost).unwrap().matrix;
            for (px, &l) in labels.iter().enumerate() {
                if l == 0 { continue; }
                for tok in p.spans()[l as usize - 1].clone() {
                    if matches!(p.roles()[tok], TokenRole::Sot | TokenRole::Pad) {
                        prop_assert_eq!(bias[[px, tok]], 0.0);
                    }
                }
            }
        }

        #[test]
        fn merging_groups_only_removes_blocks_between_them(
            groups in prop::collection::vec(0u32..4, 2..12),
        ) {
            let raster = Array2::from_shape_vec((1, groups.len()), groups.clone()).unwrap();
            let before = build_self_bias(&raster, &CacmConfig::default()).matrix;
            let merged = raster.mapv(|g| if g == 2 { 1 } else { g });
            let after = build_self_bias(&merged, &CacmConfig::default()).matrix;
            for ((q, k), &b) in before.indexed_iter() {
                let pair = (groups[q], groups[k]);
                if pair == (1, 2) || pair == (2, 1) {
                    prop_assert_eq!(b, -B);
                    prop_assert_eq!(after[[q, k]], 0.0);
                } else {
                    prop_assert_eq!(after[[q, k]], b);
                }
            }
        }
    }
}
