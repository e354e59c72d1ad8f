//! Command implementations behind the `prompt-artisan` binary.
//!
//! Exit codes: 0 on success, 2 for invalid input (bad arguments, unreadable
//! or mismatched files, unsupported sizes), 3 when the backend fails.

use std::io::Write;
use std::path::{Path, PathBuf};

use prompt_artisan::backend::BackendSpec;
use prompt_artisan::imageio::{encode_png, load_rgb};
use prompt_artisan::mask::load_mask;
use prompt_artisan::sampler::{run_edit_with, EditRequest, RunOptions, SamplerConfig};
use prompt_artisan_bench::{load_cases, run_benchmark, BenchConfig, BenchOptions};

pub const EXIT_INVALID: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_BACKEND,
            message: message.into(),
        }
    }
}

impl From<prompt_artisan::Error> for CliError {
    fn from(e: prompt_artisan::Error) -> Self {
        if e.is_invalid_input() {
            Self::invalid(e.to_string())
        } else {
            Self::backend(e.to_string())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// A parsed `--pair MASK:PROMPT:ORDER[:GROUP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairArg {
    pub mask: PathBuf,
    pub prompt: String,
    pub order: i64,
    pub group: Option<u32>,
}

impl std::str::FromStr for PairArg {
    type Err = String;

    /// Numbers are taken from the right, so prompts may contain colons. The
    /// mask path ends at the first colon.
    fn from_str(s: &str) -> Result<Self, String> {
        let usage = || format!("`{s}`: expected MASK:PROMPT:ORDER[:GROUP]");
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 3 {
            return Err(usage());
        }
        let n = parts.len();
        // `ORDER:GROUP` only when the two last fields are both integers and
        // a prompt field remains between them and the mask.
        let (order_idx, group) = match (parts[n - 2].parse::<i64>(), parts[n - 1].parse::<u32>()) {
            (Ok(_), Ok(g)) if n >= 4 => (n - 2, Some(g)),
            _ => (n - 1, None),
        };
        let order = parts[order_idx]
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("{}: ORDER `{}` is not an integer", usage(), parts[order_idx]))?;
        let mask = parts[0];
        let prompt = parts[1..order_idx].join(":");
        if mask.is_empty() {
            return Err(usage());
        }
        if group == Some(0) {
            return Err(format!("{}: GROUP must be at least 1", usage()));
        }
        Ok(Self {
            mask: mask.into(),
            prompt,
            order,
            group,
        })
    }
}

/// Everything `edit` needs besides output paths.
#[derive(Debug, Clone)]
pub struct EditArgs {
    pub image: PathBuf,
    pub pairs: Vec<PairArg>,
    pub config: SamplerConfig,
    pub backend: BackendSpec,
}

pub fn build_request(args: &EditArgs) -> Result<EditRequest, CliError> {
    if args.pairs.is_empty() {
        return Err(CliError::invalid("at least one --pair is required"));
    }
    let image = load_rgb(&args.image).map_err(|e| CliError::invalid(format!("{}: {e}", args.image.display())))?;
    let mut pairs = Vec::with_capacity(args.pairs.len());
    for (i, p) in args.pairs.iter().enumerate() {
        let raster = load_mask(&p.mask).map_err(|e| CliError::invalid(format!("{}: {e}", p.mask.display())))?;
        pairs.push((raster, p.prompt.clone(), p.order, p.group.unwrap_or(i as u32 + 1)));
    }
    let request = EditRequest::new(image, pairs, args.config.clone());
    request.validate()?;
    args.backend.check_dims(request.dims())?;
    Ok(request)
}

/// Side outputs of `edit`.
#[derive(Debug, Clone, Default)]
pub struct EditOutputs {
    pub out: PathBuf,
    pub dump_attention: Option<PathBuf>,
    /// Print one JSON line of token roles per prompt to this writer.
    pub dump_roles: bool,
}

/// The sidecar sits next to the PNG: `out.png` → `out.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

pub fn edit(args: &EditArgs, outputs: &EditOutputs, roles_out: &mut dyn Write) -> Result<(), CliError> {
    let request = build_request(args)?;
    let mut loaded = args.backend.load(request.dims())?;
    let outcome = run_edit_with(
        &request,
        loaded.denoiser.as_mut(),
        loaded.codec.as_ref(),
        loaded.encoder.as_ref(),
        RunOptions {
            record_attention: outputs.dump_attention.is_some(),
            on_step: None,
        },
    )?;
    for w in &outcome.warnings {
        tracing::warn!("{w}");
    }
    let write = |path: &Path, bytes: &[u8]| {
        std::fs::write(path, bytes).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    };
    write(&outputs.out, &encode_png(&outcome.image)?)?;
    let sidecar = outcome.sidecar(&request, args.backend.identity());
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| CliError::backend(e.to_string()))?;
    write(&sidecar_path(&outputs.out), &json)?;
    if let Some(path) = &outputs.dump_attention {
        let mut buf = Vec::new();
        for rec in &outcome.attention {
            serde_json::to_writer(&mut buf, rec).map_err(|e| CliError::backend(e.to_string()))?;
            buf.push(b'\n');
        }
        write(path, &buf)?;
    }
    if outputs.dump_roles {
        for (i, (pair, roles)) in request.pairs.iter().zip(&outcome.roles).enumerate() {
            let line = serde_json::json!({ "pair": i, "prompt": pair.prompt, "roles": roles });
            writeln!(roles_out, "{line}").map_err(|e| CliError::invalid(e.to_string()))?;
        }
    }
    Ok(())
}

/// `report.json`, `report.md` or `report` all name the pair of report files.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    let stem = match out.extension().and_then(|e| e.to_str()) {
        Some("json" | "md") => out.with_extension(""),
        _ => out.to_owned(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("md"))
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub cases: PathBuf,
    pub methods: Option<PathBuf>,
    pub out: PathBuf,
    pub images: Option<PathBuf>,
}

/// Run a sweep and write both report files. Cells that fail are reported,
/// not fatal; manifests that fail to load are logged and skipped.
pub fn bench(args: &BenchArgs) -> Result<(PathBuf, PathBuf), CliError> {
    let cfg = match &args.methods {
        Some(path) => BenchConfig::load(path).map_err(CliError::invalid)?,
        None => BenchConfig::from_yaml("{}").map_err(CliError::invalid)?,
    };
    let loaded = load_cases(&args.cases).map_err(|e| CliError::invalid(format!("{}: {e}", args.cases.display())))?;
    for e in &loaded.errors {
        tracing::warn!("skipping case: {e}");
    }
    if loaded.cases.is_empty() {
        return Err(CliError::invalid(format!("no loadable cases under {}", args.cases.display())));
    }
    let backend = BackendSpec::from_name(&cfg.backend, cfg.toy_seed)?;
    let opts = BenchOptions {
        backend,
        base: cfg.sampler.apply(&SamplerConfig::default()),
        workers: cfg.workers,
        image_dir: args.images.clone(),
    };
    let scorers: Vec<_> = cfg.scorers.iter().map(|s| s.build()).collect();
    let report = run_benchmark(&loaded.cases, &cfg.methods, &scorers, &opts).map_err(CliError::invalid)?;
    let (json, md) = report_paths(&args.out);
    for (path, text) in [(&json, report.to_json()), (&md, report.to_markdown())] {
        std::fs::write(path, text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    }
    Ok((json, md))
}
