//! `case.json` manifests.

use std::path::{Path, PathBuf};

use image::RgbImage;
use prompt_artisan::imageio::load_rgb;
use prompt_artisan::mask::load_mask;
use prompt_artisan::sampler::{EditRequest, SamplerConfig, SamplerOverrides};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "case.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: String,
    image: PathBuf,
    edits: Vec<ManifestEdit>,
    #[serde(default)]
    sampler: SamplerOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEdit {
    mask: PathBuf,
    prompt: String,
    order: i64,
    group: u32,
}

/// One mask-instruction pair of a case, with resolved paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEdit {
    pub mask: PathBuf,
    pub prompt: String,
    pub order: i64,
    pub group: u32,
}

/// A validated case. Paths are absolute or relative to the working
/// directory, never to the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub id: String,
    pub dir: PathBuf,
    pub image: PathBuf,
    pub edits: Vec<CaseEdit>,
    pub sampler: SamplerOverrides,
}

impl BenchCase {
    /// Prompt used for whole-image scoring: every instruction, in order,
    /// joined by `", "`.
    pub fn scoring_prompt(&self) -> String {
        self.edits
            .iter()
            .map(|e| e.prompt.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn load_image(&self) -> prompt_artisan::Result<RgbImage> {
        load_rgb(&self.image)
    }

    /// Build the edit request for `base` with this case's overrides applied.
    pub fn request(&self, base: &SamplerConfig) -> prompt_artisan::Result<EditRequest> {
        let image = self.load_image()?;
        let mut pairs = Vec::with_capacity(self.edits.len());
        for e in &self.edits {
            pairs.push((load_mask(&e.mask)?, e.prompt.clone(), e.order, e.group));
        }
        Ok(EditRequest::new(image, pairs, self.sampler.apply(base)))
    }
}

/// Why one case failed to load.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}: {message}{}", manifest.display(), pointer.as_ref().map(|p| format!(" (at {p})")).unwrap_or_default())]
pub struct CaseError {
    pub manifest: PathBuf,
    /// JSON pointer into the manifest, when the error concerns one field.
    pub pointer: Option<String>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadedCases {
    /// Valid cases in lexicographic id order.
    pub cases: Vec<BenchCase>,
    pub errors: Vec<CaseError>,
}

/// Convert a serde path (`edits[1].order`) to a JSON pointer (`/edits/1/order`).
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

fn load_one(manifest: &Path) -> Result<BenchCase, CaseError> {
    let err = |pointer: Option<&str>, message: String| CaseError {
        manifest: manifest.to_owned(),
        pointer: pointer.map(str::to_owned),
        message,
    };
    let text = std::fs::read_to_string(manifest).map_err(|e| err(None, e.to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        err(Some(&pointer), e.inner().to_string())
    })?;
    if m.id.trim().is_empty() {
        return Err(err(Some("/id"), "id must not be empty".into()));
    }
    if m.edits.is_empty() {
        return Err(err(Some("/edits"), "at least one edit is required".into()));
    }
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_owned();
    let image = dir.join(&m.image);
    let dims = image::image_dimensions(&image)
        .map_err(|e| err(Some("/image"), format!("{}: {e}", image.display())))?;
    let mut edits = Vec::with_capacity(m.edits.len());
    for (i, e) in m.edits.into_iter().enumerate() {
        let pointer = format!("/edits/{i}/mask");
        let mask = dir.join(&e.mask);
        let mdims = image::image_dimensions(&mask)
            .map_err(|x| err(Some(&pointer), format!("{}: {x}", mask.display())))?;
        if mdims != dims {
            return Err(err(
                Some(&pointer),
                format!(
                    "mask is {}x{} but the image is {}x{}",
                    mdims.0, mdims.1, dims.0, dims.1
                ),
            ));
        }
        if e.prompt.trim().is_empty() {
            return Err(err(Some(&format!("/edits/{i}/prompt")), "prompt must not be empty".into()));
        }
        edits.push(CaseEdit {
            mask,
            prompt: e.prompt,
            order: e.order,
            group: e.group,
        });
    }
    Ok(BenchCase {
        id: m.id,
        dir,
        image,
        edits,
        sampler: m.sampler,
    })
}

/// Load every `*/case.json` below `dir`.
pub fn load_cases(dir: impl AsRef<Path>) -> std::io::Result<LoadedCases> {
    let mut manifests = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path().join(MANIFEST);
        if path.is_file() {
            manifests.push(path);
        }
    }
    manifests.sort();
    let mut out = LoadedCases::default();
    for m in manifests {
        match load_one(&m) {
            Ok(case) => out.cases.push(case),
            Err(e) => out.errors.push(e),
        }
    }
    out.cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = std::collections::BTreeMap::<String, usize>::new();
    for c in &out.cases {
        *seen.entry(c.id.clone()).or_default() += 1;
    }
    let (keep, dropped): (Vec<_>, Vec<_>) = std::mem::take(&mut out.cases)
        .into_iter()
        .partition(|c| seen[&c.id] == 1);
    out.cases = keep;
    out.errors.extend(dropped.into_iter().map(|c| CaseError {
        manifest: c.dir.join(MANIFEST),
        pointer: Some("/id".into()),
        message: format!("duplicate case id `{}`", c.id),
    }));
    Ok(out)
}
