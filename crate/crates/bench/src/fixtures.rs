//! Synthetic sample cases: small geometric scenes with rectangle masks.
//!
//! The shipped `fixtures/cases` directory is the output of
//! [`write_synthetic_cases`]; a test keeps the two in sync.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use prompt_artisan::mask::{encode_mask_png, MaskSpec};
use serde_json::json;

pub const SIZE: usize = 64;

/// Directory of the cases shipped with this crate.
pub fn shipped_cases_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/cases")
}

/// Sky over grass with a sun and a grey block.
pub fn scene() -> RgbImage {
    RgbImage::from_fn(SIZE as u32, SIZE as u32, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        if (xf - 46.0).powi(2) + (yf - 14.0).powi(2) < 64.0 {
            Rgb([240, 220, 40])
        } else if (8..24).contains(&x) && (28..44).contains(&y) {
            Rgb([128, 128, 128])
        } else if y < 36 {
            Rgb([60, (110 + y * 2) as u8, 230])
        } else {
            Rgb([40, (200 - (y - 36) * 2) as u8, 60])
        }
    })
}

struct Edit {
    rect: (usize, usize, usize, usize),
    prompt: &'static str,
    order: i64,
    group: u32,
}

struct Case {
    id: &'static str,
    edits: Vec<Edit>,
}

fn e(rect: (usize, usize, usize, usize), prompt: &'static str, order: i64, group: u32) -> Edit {
    Edit {
        rect,
        prompt,
        order,
        group,
    }
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            id: "disjoint-pair",
            edits: vec![
                e((0, 32, 32, 64), "turn the sun into a moon", 1, 1),
                e((32, 0, 48, 32), "make the block red brick", 2, 2),
            ],
        },
        Case {
            id: "overlap-order",
            edits: vec![
                e((0, 0, 40, 64), "make the sky stormy", 1, 1),
                e((16, 32, 48, 64), "add a hot air balloon", 2, 2),
            ],
        },
        Case {
            id: "shared-boundary",
            edits: vec![
                e((0, 0, 64, 32), "make it a red brick wall", 1, 1),
                e((0, 32, 64, 64), "turn it into blue water", 2, 2),
            ],
        },
        Case {
            id: "shared-group",
            edits: vec![
                e((40, 0, 64, 16), "add a red apple", 1, 1),
                e((40, 48, 64, 64), "add a red apple", 1, 1),
            ],
        },
        Case {
            id: "triple-intersection",
            edits: vec![
                e((8, 8, 40, 40), "paint it orange", 1, 1),
                e((24, 24, 56, 56), "cover it in snow", 3, 2),
                e((16, 32, 48, 48), "add a wooden door", 2, 3),
            ],
        },
    ]
}

/// Write every synthetic case into `dir/<id>/`. Returns the ids.
pub fn write_synthetic_cases(dir: impl AsRef<Path>) -> std::io::Result<Vec<String>> {
    let image_png = prompt_artisan::imageio::encode_png(&scene()).map_err(std::io::Error::other)?;
    let mut ids = Vec::new();
    for (i, case) in cases().into_iter().enumerate() {
        let case_dir = dir.as_ref().join(case.id);
        std::fs::create_dir_all(&case_dir)?;
        std::fs::write(case_dir.join("image.png"), &image_png)?;
        let mut edits = Vec::new();
        for (j, edit) in case.edits.iter().enumerate() {
            let name = format!("mask-{}.png", j + 1);
            let raster = MaskSpec::rect((SIZE, SIZE), edit.rect, edit.order, edit.group, j + 1).raster;
            std::fs::write(
                case_dir.join(&name),
                encode_mask_png(&raster).map_err(std::io::Error::other)?,
            )?;
            edits.push(json!({
                "mask": name,
                "prompt": edit.prompt,
                "order": edit.order,
                "group": edit.group,
            }));
        }
        let manifest = json!({
            "id": case.id,
            "image": "image.png",
            "edits": edits,
            "sampler": { "steps": 10, "seed": i },
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(case_dir.join(crate::case::MANIFEST), text)?;
        ids.push(case.id.to_owned());
    }
    Ok(ids)
}
