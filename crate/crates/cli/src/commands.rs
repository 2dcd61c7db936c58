use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stainkit::imaging::{read_image, write_atomic, write_image};
use stainkit::losses::{generator_adv_loss, AdvMode};
use stainkit::macenko::{MacenkoNormalizer, MacenkoParams};
use stainkit::nn::{load_weights, Discriminator, Generator, GeneratorWeights};
use stainkit::ssim::{ssim_rgb, MetricReport, SsimParams};
use stainkit::vahadane::{SnmfParams, VahadaneNormalizer};
use stainkit::wsi::{
    extract_patches, load_patches, normalize_wsi, spill_patches, stitch as stitch_patches, Blend, FailurePolicy,
    PatchGrid, PatchNormalizer, PatchStatus, SaasnNormalizer, DEFAULT_PATCH_SIZE,
};
use stainkit::{Error, RgbImage};

use crate::config::{config_err, parse_flag, pick, processing_err, require, CliResult, Failure, FileConfig};

pub const NORMALIZE_MANIFEST: &str = "manifest.csv";
pub const NORMALIZE_HEADER: &str = "input,output,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Macenko,
    Vahadane,
    Saasn,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "macenko" => Ok(Method::Macenko),
            "vahadane" => Ok(Method::Vahadane),
            "saasn" => Ok(Method::Saasn),
            _ => Err("expected one of macenko, vahadane, saasn".into()),
        }
    }
}

fn parse_policy(s: &str) -> Result<FailurePolicy, String> {
    match s {
        "fail-fast" => Ok(FailurePolicy::FailFast),
        "pass-through" => Ok(FailurePolicy::PassThrough),
        _ => Err("expected fail-fast or pass-through".into()),
    }
}

fn parse_blend(s: &str) -> Result<Blend, String> {
    match s {
        "overwrite" => Ok(Blend::Overwrite),
        "feather" => Ok(Blend::Feather),
        _ => Err("expected overwrite or feather".into()),
    }
}

fn blend_name(b: Blend) -> &'static str {
    match b {
        Blend::Overwrite => "overwrite",
        Blend::Feather => "feather",
    }
}

/// Loader failures are configuration errors and keep the loader's message.
fn load_weights_flag(path: &Path) -> CliResult<GeneratorWeights> {
    load_weights(path).map_err(|e| Failure::Config(format!("--weights {}: {e}", path.display())))
}

fn read_input(path: &Path, flag: &str) -> CliResult<RgbImage> {
    match read_image(path) {
        Ok(img) => Ok(img),
        Err(e @ Error::MissingFile(_)) => Err(Failure::Config(format!("{flag}: {e}"))),
        Err(e) => Err(processing_err(e)),
    }
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files under `root`, as sorted paths relative to it.
fn list_pngs(root: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if is_png(&path) {
                out.push(path.strip_prefix(root).expect("walked from root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out).map_err(|e| Failure::Config(format!("{}: {e}", root.display())))?;
    out.sort();
    Ok(out)
}

/// Relative path with `/` separators, for manifests.
fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| processing_err(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Input PNG or directory searched recursively for PNGs.
    src: PathBuf,
    /// macenko, vahadane or saasn.
    #[arg(long)]
    method: Option<String>,
    /// Reference image for the classical methods.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Generator weights for saasn.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output directory; the input tree is mirrored under it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tile side for images larger than one tile.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Tile stride; defaults to the tile side.
    #[arg(long)]
    stride: Option<usize>,
    /// fail-fast or pass-through (default).
    #[arg(long)]
    policy: Option<String>,
    /// overwrite (default) or feather, for overlapping tiles.
    #[arg(long)]
    blend: Option<String>,
}

struct Normalized {
    output: Option<RgbImage>,
    status: &'static str,
    error: Option<String>,
}

fn normalize_one(
    img: &RgbImage,
    norm: &dyn PatchNormalizer,
    patch_size: usize,
    stride: usize,
    blend: Blend,
    policy: FailurePolicy,
) -> stainkit::Result<Normalized> {
    let (w, h) = img.dims();
    if w <= patch_size && h <= patch_size {
        return match norm.normalize_patch(img) {
            Ok(out) => Ok(Normalized {
                output: Some(out),
                status: "ok",
                error: None,
            }),
            Err(e) if policy == FailurePolicy::PassThrough => Ok(Normalized {
                output: Some(img.clone()),
                status: "passthrough",
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        };
    }
    let mut grid = PatchGrid::with_size(img.dims(), patch_size, stride)?;
    grid.blend = blend;
    let out = normalize_wsi(img, &grid, norm, policy)?;
    let passed = out.statuses.iter().filter(|s| **s == PatchStatus::PassThrough).count();
    let status = match passed {
        0 => "ok",
        n if n == out.statuses.len() => "passthrough",
        _ => "partial",
    };
    Ok(Normalized {
        output: Some(out.image),
        status,
        error: out.failures.first().map(|f| format!("patch ({}, {}): {}", f.row, f.col, f.message)),
    })
}

pub fn normalize(a: NormalizeArgs, file: &FileConfig, seed: u64) -> CliResult<()> {
    let method: Method = parse_flag(&require(pick(a.method, file.method.clone()), "--method", "macenko, vahadane or saasn")?, "--method")?;
    let out = require(pick(a.out, file.out.clone()), "--out", "output directory")?;
    let patch_size = pick(a.patch_size, file.patch_size).unwrap_or(DEFAULT_PATCH_SIZE);
    let stride = pick(a.stride, file.stride).unwrap_or(patch_size);
    let policy = match pick(a.policy, file.policy.clone()) {
        Some(s) => parse_policy(&s).map_err(|e| Failure::Config(format!("invalid value `{s}` for --policy: {e}")))?,
        None => FailurePolicy::PassThrough,
    };
    let blend = match pick(a.blend, file.blend.clone()) {
        Some(s) => parse_blend(&s).map_err(|e| Failure::Config(format!("invalid value `{s}` for --blend: {e}")))?,
        None => Blend::Overwrite,
    };
    PatchGrid::with_size((1, 1), patch_size, stride).map_err(|e| Failure::Config(format!("--patch-size/--stride: {e}")))?;
    let target = pick(a.target, file.target.clone());
    let weights = pick(a.weights, file.weights.clone());

    let normalizer: Box<dyn PatchNormalizer> = match method {
        Method::Macenko | Method::Vahadane => {
            let path = require(target, "--target", "required by the classical methods")?;
            let target = read_input(&path, "--target")?;
            let fitted: stainkit::Result<Box<dyn PatchNormalizer>> = if method == Method::Macenko {
                MacenkoNormalizer::fit(&target, MacenkoParams::default()).map(|n| Box::new(n) as _)
            } else {
                let p = SnmfParams {
                    seed,
                    ..SnmfParams::default()
                };
                VahadaneNormalizer::fit(&target, p).map(|n| Box::new(n) as _)
            };
            fitted.map_err(processing_err)?
        }
        Method::Saasn => {
            let path = require(weights, "--weights", "required by saasn")?;
            Box::new(SaasnNormalizer::new(&load_weights_flag(&path)?).map_err(config_err)?)
        }
    };

    if !a.src.exists() {
        return Err(Failure::Config(format!("input {} does not exist", a.src.display())));
    }
    let (root, files) = if a.src.is_dir() {
        (a.src.clone(), list_pngs(&a.src)?)
    } else {
        let name = a.src.file_name().map(PathBuf::from).unwrap_or_default();
        (a.src.parent().map(Path::to_path_buf).unwrap_or_default(), vec![name])
    };
    if files.is_empty() {
        return Err(Failure::Config(format!("no PNG files under {}", a.src.display())));
    }

    let results = files
        .par_iter()
        .map(|rel| {
            let img = read_image(root.join(rel)).map_err(|e| processing_err(format!("{}: {e}", rel.display())))?;
            let done = normalize_one(&img, normalizer.as_ref(), patch_size, stride, blend, policy)
                .map_err(|e| processing_err(format!("{}: {e}", rel.display())))?;
            Ok((rel, done))
        })
        .collect::<CliResult<Vec<_>>>()?;

    create_dir(&out)?;
    results.par_iter().try_for_each(|(rel, done)| {
        let dest = out.join(rel);
        if let Some(parent) = dest.parent() {
            create_dir(parent)?;
        }
        write_image(done.output.as_ref().expect("output set"), &dest).map_err(processing_err)
    })?;
    let mut csv = format!("{NORMALIZE_HEADER}\n");
    for (rel, done) in &results {
        let name = slash_path(rel);
        writeln!(csv, "{name},{name},{}", done.status).expect("string write");
        if let Some(err) = &done.error {
            eprintln!("stainkit: {name}: kept unnormalized: {err}");
        }
    }
    write_atomic(&out.join(NORMALIZE_MANIFEST), csv.as_bytes()).map_err(processing_err)?;
    println!("normalized {} image(s) into {}", results.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of reference images.
    dir_a: PathBuf,
    /// Directory of images with the same relative names.
    dir_b: PathBuf,
    /// CSV report; created with a header or appended to.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method column of the report (default: name of DIR_B).
    #[arg(long)]
    label: Option<String>,
    /// Direction column of the report (default: `<DIR_A>-><DIR_B>`).
    #[arg(long)]
    direction: Option<String>,
    /// Odd SSIM window side.
    #[arg(long)]
    window: Option<usize>,
    /// Uniform instead of Gaussian window weights.
    #[arg(long)]
    uniform_window: bool,
}

fn dir_name(p: &Path) -> String {
    p.canonicalize()
        .ok()
        .and_then(|c| c.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| p.display().to_string())
}

pub fn evaluate(a: EvaluateArgs, file: &FileConfig) -> CliResult<()> {
    let mut params = if a.uniform_window || file.uniform_window == Some(true) {
        SsimParams::uniform(11)
    } else {
        SsimParams::default()
    };
    if let Some(w) = pick(a.window, file.window) {
        params.window = w;
    }
    params.validate().map_err(|e| Failure::Config(format!("--window: {e}")))?;
    for d in [&a.dir_a, &a.dir_b] {
        if !d.is_dir() {
            return Err(Failure::Config(format!("{} is not a directory", d.display())));
        }
    }
    let names_a: BTreeSet<PathBuf> = list_pngs(&a.dir_a)?.into_iter().collect();
    let names_b: BTreeSet<PathBuf> = list_pngs(&a.dir_b)?.into_iter().collect();
    if names_a != names_b {
        let list = |s: BTreeSet<&PathBuf>| s.into_iter().map(|p| slash_path(p)).collect::<Vec<_>>().join(", ");
        return Err(Failure::Config(format!(
            "unmatched file names; only in {}: [{}]; only in {}: [{}]",
            a.dir_a.display(),
            list(names_a.difference(&names_b).collect()),
            a.dir_b.display(),
            list(names_b.difference(&names_a).collect()),
        )));
    }
    if names_a.is_empty() {
        return Err(Failure::Config(format!("no PNG files under {}", a.dir_a.display())));
    }
    let names: Vec<PathBuf> = names_a.into_iter().collect();
    let values = names
        .par_iter()
        .map(|rel| {
            let x = read_image(a.dir_a.join(rel)).map_err(processing_err)?;
            let y = read_image(a.dir_b.join(rel)).map_err(processing_err)?;
            ssim_rgb(&x, &y, &params).map_err(|e| processing_err(format!("{}: {e}", rel.display())))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let report = MetricReport::from_values(&values).map_err(processing_err)?;
    let method = pick(a.label, file.label.clone()).unwrap_or_else(|| dir_name(&a.dir_b));
    let direction = pick(a.direction, file.direction.clone())
        .unwrap_or_else(|| format!("{}->{}", dir_name(&a.dir_a), dir_name(&a.dir_b)));
    if method.contains(',') || direction.contains(',') {
        return Err(Failure::Config("--label and --direction must not contain commas".into()));
    }
    let row = report.csv_row(&method, &direction);
    println!("{}\n{row}", MetricReport::CSV_HEADER);
    if let Some(out) = pick(a.out, file.out.clone()) {
        let mut text = match std::fs::read_to_string(&out) {
            Ok(existing) => {
                if existing.lines().next() != Some(MetricReport::CSV_HEADER) {
                    return Err(Failure::Config(format!(
                        "--out {} exists without the `{}` header",
                        out.display(),
                        MetricReport::CSV_HEADER
                    )));
                }
                existing
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{}\n", MetricReport::CSV_HEADER),
            Err(e) => return Err(processing_err(format!("{}: {e}", out.display()))),
        };
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&row);
        text.push('\n');
        write_atomic(&out, text.as_bytes()).map_err(processing_err)?;
    }
    Ok(())
}

/// Sidecar written next to extracted patches so `stitch` can rebuild the grid.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub pad_color: [u8; 3],
    pub blend: String,
}

pub fn grid_file_name(slide: &str) -> String {
    format!("{slide}_grid.toml")
}

impl GridFile {
    fn from_grid(g: &PatchGrid) -> Self {
        Self {
            width: g.source_dims.0,
            height: g.source_dims.1,
            patch_size: g.patch_size,
            stride: g.stride,
            pad_color: g.pad_color,
            blend: blend_name(g.blend).into(),
        }
    }

    fn to_grid(&self) -> Result<PatchGrid, String> {
        let mut g = PatchGrid::with_size((self.width, self.height), self.patch_size, self.stride).map_err(|e| e.to_string())?;
        g.pad_color = self.pad_color;
        g.blend = parse_blend(&self.blend)?;
        Ok(g)
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Image to cut into patches.
    image: PathBuf,
    /// Directory receiving the patches, manifest and grid sidecar.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Slide name used in file names (default: image file stem).
    #[arg(long)]
    slide: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Blend recorded for stitching: overwrite (default) or feather.
    #[arg(long)]
    blend: Option<String>,
}

pub fn extract(a: ExtractArgs, file: &FileConfig) -> CliResult<()> {
    let out = require(pick(a.out, file.out.clone()), "--out", "patch directory")?;
    let slide = pick(a.slide, file.slide.clone())
        .or_else(|| a.image.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| Failure::Config("--slide could not be derived from the image name".into()))?;
    let patch_size = pick(a.patch_size, file.patch_size).unwrap_or(DEFAULT_PATCH_SIZE);
    let stride = pick(a.stride, file.stride).unwrap_or(patch_size);
    let img = read_input(&a.image, "image")?;
    let mut grid =
        PatchGrid::with_size(img.dims(), patch_size, stride).map_err(|e| Failure::Config(format!("--patch-size/--stride: {e}")))?;
    if let Some(s) = pick(a.blend, file.blend.clone()) {
        grid.blend = parse_blend(&s).map_err(|e| Failure::Config(format!("invalid value `{s}` for --blend: {e}")))?;
    }
    let patches = extract_patches(&img, &grid).map_err(processing_err)?;
    let statuses = vec![PatchStatus::Ok; patches.len()];
    spill_patches(&patches, &statuses, &out, &slide).map_err(processing_err)?;
    let sidecar = toml::to_string(&GridFile::from_grid(&grid)).map_err(processing_err)?;
    write_atomic(&out.join(grid_file_name(&slide)), sidecar.as_bytes()).map_err(processing_err)?;
    println!("wrote {} patch(es) for slide `{slide}` into {}", patches.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Directory written by `extract`.
    dir: PathBuf,
    /// Slide name (default: the only `*_grid.toml` in DIR).
    #[arg(long)]
    slide: Option<String>,
    /// Output PNG.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn only_slide(dir: &Path) -> CliResult<String> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let mut slides: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_grid.toml")).map(String::from))
        .collect();
    slides.sort();
    match slides.len() {
        1 => Ok(slides.remove(0)),
        0 => Err(Failure::Config(format!("no *_grid.toml in {}; pass --slide", dir.display()))),
        _ => Err(Failure::Config(format!("several slides in {} ({}); pass --slide", dir.display(), slides.join(", ")))),
    }
}

pub fn stitch(a: StitchArgs, file: &FileConfig) -> CliResult<()> {
    let out = require(pick(a.out, file.out.clone()), "--out", "output PNG")?;
    let slide = match pick(a.slide, file.slide.clone()) {
        Some(s) => s,
        None => only_slide(&a.dir)?,
    };
    let grid_path = a.dir.join(grid_file_name(&slide));
    let text = std::fs::read_to_string(&grid_path).map_err(|e| Failure::Config(format!("{}: {e}", grid_path.display())))?;
    let grid: GridFile = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", grid_path.display())))?;
    let grid = grid.to_grid().map_err(|e| Failure::Config(format!("{}: {e}", grid_path.display())))?;
    let (patches, _) = load_patches(&a.dir, &slide).map_err(processing_err)?;
    let img = stitch_patches(&patches, &grid).map_err(processing_err)?;
    write_image(&img, &out).map_err(processing_err)?;
    println!("stitched {} patch(es) into {}", patches.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Input PNG; sides must be multiples of 2^depth.
    input: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ce or ls; selects the adversarial loss reported when the weights
    /// include a discriminator.
    #[arg(long)]
    adv_mode: Option<String>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn infer(a: InferArgs, file: &FileConfig) -> CliResult<()> {
    let weights_path = require(pick(a.weights, file.weights.clone()), "--weights", "generator weights")?;
    let out = require(pick(a.out, file.out.clone()), "--out", "output PNG")?;
    let mode: AdvMode = match pick(a.adv_mode, file.adv_mode.clone()) {
        Some(s) => parse_flag(&s, "--adv-mode")?,
        None => AdvMode::default(),
    };
    let weights = load_weights_flag(&weights_path)?;
    let img = read_input(&a.input, "input")?;
    let generator = Generator::new(&weights).map_err(config_err)?;
    let result = generator.forward_image(&img).map_err(processing_err)?;
    write_image(&result, &out).map_err(processing_err)?;
    println!("wrote {}x{} image to {}", result.width(), result.height(), out.display());
    if weights.has_discriminator() {
        let disc = Discriminator::new(&weights).map_err(config_err)?;
        let (map, mean) = disc.forward_image(&result).map_err(processing_err)?;
        let scores: Vec<f64> = match mode {
            AdvMode::CrossEntropy => map.data().iter().map(|&v| sigmoid(v)).collect(),
            AdvMode::LeastSquares => map.data().to_vec(),
        };
        // saturated logits make log(1 − p) undefined; report it rather than fail
        match generator_adv_loss(&scores, mode) {
            Ok(loss) => println!("discriminator mean logit {mean:.6}; generator adversarial loss ({mode}) {loss:.6}"),
            Err(e) => println!("discriminator mean logit {mean:.6}; generator adversarial loss ({mode}) undefined: {e}"),
        }
    }
    Ok(())
}
