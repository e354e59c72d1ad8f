//! Adherence scorers.
//!
//! Heavy scorers (CLIP score, PickScore) are external programs behind a
//! capability check; the toy scorer is always available and needs no model.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::case::BenchCase;

pub type Scores = BTreeMap<String, f64>;

pub trait Scorer: Send + Sync {
    /// Identity recorded in reports.
    fn name(&self) -> &str;

    fn metrics(&self) -> Vec<String>;

    /// `Err(reason)` when the scorer cannot run on this machine.
    fn check(&self) -> Result<(), String>;

    /// Higher is better adherence of `image` to `prompt`.
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<Scores, String>;
}

/// Score an edited image against the case's joined instructions.
pub fn score_case(image: &RgbImage, case: &BenchCase, scorer: &dyn Scorer) -> Result<Scores, String> {
    scorer.check()?;
    scorer.score(image, &case.scoring_prompt())
}

const TOY_DIM: usize = 64;

const PALETTE: &[(&str, [u8; 3])] = &[
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("gray", [128, 128, 128]),
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [240, 220, 40]),
    ("orange", [245, 140, 30]),
    ("purple", [130, 50, 170]),
    ("pink", [245, 150, 190]),
    ("brown", [130, 80, 40]),
    ("cyan", [40, 200, 220]),
];

/// Color-bag cosine between an image and a prompt in a seeded word space.
///
/// An image is described by the percentage of its pixels nearest to each
/// palette color; a prompt by its word counts. Both map to weighted sums of
/// seeded word vectors, so [`ToyScorer::describe`] of an image scores 1.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    seed: u64,
    name: String,
}

impl ToyScorer {
    pub const METRIC: &'static str = "toy_clip";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            name: format!("toy(seed={seed})"),
        }
    }

    fn word_vector(&self, word: &str) -> [f64; TOY_DIM] {
        let mut out = [0.0; TOY_DIM];
        for (block, chunk) in out.chunks_mut(4).enumerate() {
            let digest = Sha256::new()
                .chain_update(self.seed.to_le_bytes())
                .chain_update((block as u32).to_le_bytes())
                .chain_update(word.as_bytes())
                .finalize();
            for (v, bytes) in chunk.iter_mut().zip(digest.chunks(8)) {
                let u = u64::from_le_bytes(bytes.try_into().expect("8-byte chunk"));
                *v = (u >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            }
        }
        out
    }

    fn embed(&self, weights: &BTreeMap<String, f64>) -> [f64; TOY_DIM] {
        let mut acc = [0.0; TOY_DIM];
        for (word, &w) in weights {
            for (a, v) in acc.iter_mut().zip(self.word_vector(word)) {
                *a += w * v;
            }
        }
        acc
    }

    fn color_weights(image: &RgbImage) -> BTreeMap<String, f64> {
        let mut counts = [0usize; PALETTE.len()];
        for p in image.pixels() {
            let nearest = PALETTE
                .iter()
                .enumerate()
                .min_by_key(|(_, (_, c))| {
                    (0..3)
                        .map(|i| (p[i] as i32 - c[i] as i32).pow(2))
                        .sum::<i32>()
                })
                .map(|(i, _)| i)
                .expect("palette is not empty");
            counts[nearest] += 1;
        }
        let total = (image.width() * image.height()).max(1) as usize;
        PALETTE
            .iter()
            .zip(counts)
            .map(|((name, _), c)| (name.to_string(), ((c * 100) as f64 / total as f64).round()))
            .filter(|(_, pct)| *pct > 0.0)
            .collect()
    }

    fn word_weights(text: &str) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            *out.entry(word.to_lowercase()).or_insert(0.0) += 1.0;
        }
        out
    }

    /// The prompt the toy scorer considers a perfect description of `image`.
    pub fn describe(image: &RgbImage) -> String {
        Self::color_weights(image)
            .into_iter()
            .flat_map(|(word, pct)| std::iter::repeat_n(word, pct as usize))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

impl Scorer for ToyScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn metrics(&self) -> Vec<String> {
        vec![Self::METRIC.to_owned()]
    }

    fn check(&self) -> Result<(), String> {
        Ok(())
    }

    fn score(&self, image: &RgbImage, prompt: &str) -> Result<Scores, String> {
        let img = self.embed(&Self::color_weights(image));
        let txt = self.embed(&Self::word_weights(prompt));
        Ok(Scores::from([(Self::METRIC.to_owned(), cosine(&img, &txt))]))
    }
}

/// External scorer program.
///
/// Invoked as `PROGRAM ARGS... --image FILE.png --prompt TEXT`; it must print
/// a JSON object mapping metric names to numbers on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandScorer {
    pub name: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub metrics: Vec<String>,
}

impl Scorer for CommandScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn metrics(&self) -> Vec<String> {
        self.metrics.clone()
    }

    fn check(&self) -> Result<(), String> {
        which::which(&self.program)
            .map(|_| ())
            .map_err(|e| format!("scorer program `{}` is not available: {e}", self.program.display()))
    }

    fn score(&self, image: &RgbImage, prompt: &str) -> Result<Scores, String> {
        let file = tempfile::Builder::new()
            .suffix(".png")
            .tempfile()
            .map_err(|e| e.to_string())?;
        image
            .save_with_format(file.path(), image::ImageFormat::Png)
            .map_err(|e| e.to_string())?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg("--image")
            .arg(file.path())
            .arg("--prompt")
            .arg(prompt)
            .output()
            .map_err(|e| format!("running `{}`: {e}", self.program.display()))?;
        if !out.status.success() {
            return Err(format!(
                "`{}` exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        let all: BTreeMap<String, f64> = serde_json::from_slice(&out.stdout)
            .map_err(|e| format!("`{}` printed invalid scores: {e}", self.program.display()))?;
        let mut scores = Scores::new();
        for m in &self.metrics {
            let v = all
                .get(m)
                .ok_or_else(|| format!("`{}` did not report `{m}`", self.program.display()))?;
            scores.insert(m.clone(), *v);
        }
        Ok(scores)
    }
}
