//! Mix-degradation dataset forging: tiling of paired sources, synthetic
//! noisy/JPEG pairs from clean sources, and the JSON Lines manifest that
//! ties the tiles together.

mod manifest;
mod tiling;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use tiling::{axis_count, axis_positions, plan_crops, CropPlan};

use crate::degrade::{child_seed, rng_from_seed, splitmix64, DegradationRecipe, DegradationStep};
use crate::error::{invalid, Error, Result};
use crate::image::{crop, load_image, save_image, to_u8, ImageTensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// How degraded inputs are produced for tasks without paired sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// Additive Gaussian noise, sigma uniform in `[sigma_min, sigma_max]`
    /// (`[0, 1]` intensity scale).
    Denoise {
        #[serde(default)]
        sigma_min: f64,
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
    },
    /// JPEG round trip, quality uniform in `[quality_min, quality_max]`.
    Jpeg {
        #[serde(default = "default_quality_min")]
        quality_min: u8,
        #[serde(default = "default_quality_max")]
        quality_max: u8,
    },
}

fn default_sigma_max() -> f64 {
    50.0 / 255.0
}

fn default_quality_min() -> u8 {
    10
}

fn default_quality_max() -> u8 {
    40
}

/// One source family of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub task: String,
    /// Degraded inputs. Required when `paired`.
    #[serde(default)]
    pub input_dir: Option<PathBuf>,
    /// Clean targets; file names must match those in `input_dir`.
    pub target_dir: PathBuf,
    pub crop: usize,
    pub step: usize,
    #[serde(default = "default_true")]
    pub paired: bool,
    #[serde(default)]
    pub synthetic: Option<Synthetic>,
    /// Glob patterns on the file name; matching sources are left out.
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task.is_empty() || self.task.contains(['/', '\\']) {
            return Err(invalid!("task name {:?} must be a plain directory name", self.task));
        }
        if self.crop == 0 || self.step == 0 {
            return Err(invalid!("{}: crop and step must be positive", self.task));
        }
        match (self.paired, &self.input_dir, &self.synthetic) {
            (true, None, _) => Err(invalid!("{}: paired task needs input_dir", self.task)),
            (true, Some(_), Some(_)) => {
                Err(invalid!("{}: paired task cannot also be synthetic", self.task))
            }
            (false, _, None) => Err(invalid!("{}: unpaired task needs a synthetic kind", self.task)),
            _ => {
                if let Some(Synthetic::Denoise {
                    sigma_min,
                    sigma_max,
                }) = self.synthetic
                {
                    if !(0.0 <= sigma_min && sigma_min <= sigma_max) {
                        return Err(invalid!("{}: bad sigma range", self.task));
                    }
                }
                if let Some(Synthetic::Jpeg {
                    quality_min,
                    quality_max,
                }) = self.synthetic
                {
                    if quality_min == 0 || quality_min > quality_max || quality_max > 100 {
                        return Err(invalid!("{}: bad quality range", self.task));
                    }
                }
                for p in &self.exclude {
                    glob::Pattern::new(p).map_err(|e| invalid!("{}: exclude {p:?}: {e}", self.task))?;
                }
                Ok(())
            }
        }
    }

    fn with_root(mut self, root: &Path) -> Self {
        if self.target_dir.is_relative() {
            self.target_dir = root.join(&self.target_dir);
        }
        if let Some(dir) = self.input_dir.as_mut() {
            if dir.is_relative() {
                *dir = root.join(&*dir);
            }
        }
        self
    }
}

/// Contents of a `--spec` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeSpec {
    pub schema_version: u32,
    pub tasks: Vec<SourceSpec>,
}

impl ForgeSpec {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Parses a spec file; relative source directories are resolved against
    /// the file's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ForgeSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if spec.schema_version != Self::SCHEMA_VERSION {
            return Err(invalid!(
                "{}: unsupported schema_version {}",
                path.display(),
                spec.schema_version
            ));
        }
        let root = path.parent().unwrap_or(Path::new("."));
        let tasks = spec.tasks.into_iter().map(|t| t.with_root(root)).collect();
        Ok(ForgeSpec {
            schema_version: spec.schema_version,
            tasks,
        })
    }
}

/// A source image left out of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub task: String,
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForgeOutcome {
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkipRecord>,
}

fn list_images(dir: &Path, exclude: &[String]) -> Result<Vec<PathBuf>> {
    let patterns: Vec<glob::Pattern> = exclude
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| invalid!("exclude {p:?}: {e}")))
        .collect::<Result<_>>()?;
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && ext_ok && !patterns.iter().any(|p| p.matches(name)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_owned()
}

fn task_seed(master: u64, task: &str) -> u64 {
    let h = task
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3));
    splitmix64(master ^ h)
}

fn synthesize(tile: &ImageTensor, kind: &Synthetic, seed: u64) -> Result<(ImageTensor, DegradationRecipe)> {
    let mut rng = rng_from_seed(seed);
    let step = match *kind {
        Synthetic::Denoise {
            sigma_min,
            sigma_max,
        } => DegradationStep::GaussianNoise {
            sigma: if sigma_min == sigma_max {
                sigma_min
            } else {
                rng.random_range(sigma_min..=sigma_max)
            },
            gray: false,
            seed: rng.next_u64(),
        },
        Synthetic::Jpeg {
            quality_min,
            quality_max,
        } => DegradationStep::Jpeg {
            quality: rng.random_range(quality_min..=quality_max),
            chroma_subsample: true,
        },
    };
    let recipe = DegradationRecipe {
        seed,
        steps: vec![step],
    };
    Ok((recipe.apply(tile)?, recipe))
}

fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn forge_image(
    spec: &SourceSpec,
    index: usize,
    target_path: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Option<SkipRecord>)> {
    let id = stem(target_path);
    let target = load_image(target_path)?;
    let input = match &spec.input_dir {
        Some(dir) if spec.paired => {
            let file = target_path.file_name().expect("listed files have names");
            let path = dir.join(file);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "{}: no input counterpart {}",
                    spec.task,
                    path.display()
                )));
            }
            let img = load_image(&path)?;
            if !img.same_dims(&target) {
                return Err(Error::Data(format!(
                    "{}: {id}: input {}x{} does not match target {}x{}",
                    spec.task,
                    img.width(),
                    img.height(),
                    target.width(),
                    target.height()
                )));
            }
            Some(img)
        }
        _ => None,
    };
    if target.width() < spec.crop || target.height() < spec.crop {
        log::warn!(
            "{}: skipping {id} ({}x{} < crop {})",
            spec.task,
            target.width(),
            target.height(),
            spec.crop
        );
        return Ok((
            Vec::new(),
            Some(SkipRecord {
                task: spec.task.clone(),
                image_id: id,
                reason: format!(
                    "{}x{} smaller than crop {}",
                    target.width(),
                    target.height(),
                    spec.crop
                ),
            }),
        ));
    }
    let plan = plan_crops(target.width(), target.height(), spec.crop, spec.step)?;
    let image_seed = child_seed(seed, index as u64);
    let task_dir = out_dir.join(&spec.task);
    let mut entries = Vec::with_capacity(plan.len());
    for (k, &(x, y)) in plan.positions.iter().enumerate() {
        let name = format!("{id}_x{x}_y{y}.png");
        // Synthetic inputs are derived from the stored (8-bit) clean tile so
        // that replaying the recipe on the saved target is exact.
        let clean = crop(&target, x, y, spec.crop, spec.crop)?.quantized_8bit();
        let (degraded, recipe) = match (&input, &spec.synthetic) {
            (Some(img), _) => (crop(img, x, y, spec.crop, spec.crop)?, None),
            (None, Some(kind)) => {
                let (d, r) = synthesize(&clean, kind, child_seed(image_seed, k as u64))?;
                (d, Some(r))
            }
            (None, None) => unreachable!("validated spec"),
        };
        save_image(&degraded, task_dir.join("input").join(&name))?;
        save_image(&clean, task_dir.join("target").join(&name))?;
        entries.push(ManifestEntry {
            task: spec.task.clone(),
            image_id: id.clone(),
            crop_index: k,
            x,
            y,
            width: spec.crop,
            height: spec.crop,
            input: rel(&[&spec.task, "input", &name]),
            target: rel(&[&spec.task, "target", &name]),
            recipe,
        });
    }
    Ok((entries, None))
}

/// Tiles every usable source image of `spec` into `out_dir/<task>/{input,target}/`.
/// Images are processed in parallel; output depends only on `seed`.
pub fn forge_task(spec: &SourceSpec, out_dir: &Path, seed: u64) -> Result<ForgeOutcome> {
    spec.validate()?;
    let files = list_images(&spec.target_dir, &spec.exclude)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "{}: no source images in {}",
            spec.task,
            spec.target_dir.display()
        )));
    }
    for sub in ["input", "target"] {
        let dir = out_dir.join(&spec.task).join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let seed = task_seed(seed, &spec.task);
    let per_image: Vec<_> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| forge_image(spec, i, path, out_dir, seed))
        .collect::<Result<_>>()?;
    let mut outcome = ForgeOutcome::default();
    for (entries, skip) in per_image {
        outcome.entries.extend(entries);
        outcome.skipped.extend(skip);
    }
    Ok(outcome)
}

/// Forges every task and writes `out_dir/manifest.jsonl`, ordered by
/// `(task, image id, crop index)`.
pub fn forge_all(spec: &ForgeSpec, out_dir: &Path, seed: u64) -> Result<ForgeOutcome> {
    let mut seen = BTreeSet::new();
    for t in &spec.tasks {
        if !seen.insert(&t.task) {
            return Err(invalid!("duplicate task name {:?}", t.task));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut all = ForgeOutcome::default();
    for task in &spec.tasks {
        let o = forge_task(task, out_dir, seed)?;
        all.entries.extend(o.entries);
        all.skipped.extend(o.skipped);
    }
    all.entries.sort_by(|a, b| {
        (&a.task, &a.image_id, a.crop_index).cmp(&(&b.task, &b.image_id, b.crop_index))
    });
    write_manifest(&all.entries, out_dir.join(MANIFEST_FILE))?;
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    MissingFile { line: usize, path: String },
    Unreadable { line: usize, path: String, message: String },
    WrongSize { line: usize, path: String, expected: (usize, usize), actual: (usize, usize) },
    PairMismatch { line: usize, message: String },
    ReplayMismatch { line: usize, path: String, differing_samples: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub entries: usize,
    pub replayed: usize,
    pub findings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks files, tile sizes, coordinate pairing and, for up to
/// `replay_samples` evenly spaced synthetic entries, that replaying the
/// recipe on the stored target reproduces the stored input.
pub fn verify_manifest(entries: &[ManifestEntry], data_root: &Path, replay_samples: usize) -> VerifyReport {
    let synthetic: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.recipe.is_some())
        .map(|(i, _)| i)
        .collect();
    let replay: BTreeSet<usize> = if replay_samples == 0 || synthetic.is_empty() {
        BTreeSet::new()
    } else {
        let n = replay_samples.min(synthetic.len());
        (0..n).map(|k| synthetic[k * synthetic.len() / n]).collect()
    };

    let results: Vec<(Vec<Finding>, bool)> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| check_entry(i + 1, e, data_root, replay.contains(&i)))
        .collect();
    let mut report = VerifyReport {
        entries: entries.len(),
        ..Default::default()
    };
    for (f, replayed) in results {
        report.findings.extend(f);
        report.replayed += usize::from(replayed);
    }
    report
}

fn check_entry(line: usize, e: &ManifestEntry, root: &Path, replay: bool) -> (Vec<Finding>, bool) {
    let mut findings = Vec::new();
    if e.width == 0 || e.height == 0 {
        findings.push(Finding::PairMismatch {
            line,
            message: format!("zero-sized crop {}x{}", e.width, e.height),
        });
    }
    let expected_suffix = format!("_x{}_y{}.png", e.x, e.y);
    for p in [&e.input, &e.target] {
        if !p.ends_with(&expected_suffix) {
            findings.push(Finding::PairMismatch {
                line,
                message: format!("{p} does not carry crop coords ({}, {})", e.x, e.y),
            });
        }
    }
    let mut load = |p: &str| -> Option<ImageTensor> {
        let path = root.join(p);
        if !path.is_file() {
            findings.push(Finding::MissingFile {
                line,
                path: p.to_owned(),
            });
            return None;
        }
        match load_image(&path) {
            Ok(img) => {
                if (img.width(), img.height()) != (e.width, e.height) {
                    findings.push(Finding::WrongSize {
                        line,
                        path: p.to_owned(),
                        expected: (e.width, e.height),
                        actual: (img.width(), img.height()),
                    });
                }
                Some(img)
            }
            Err(err) => {
                findings.push(Finding::Unreadable {
                    line,
                    path: p.to_owned(),
                    message: err.to_string(),
                });
                None
            }
        }
    };
    let input = load(&e.input);
    let target = load(&e.target);
    let mut replayed = false;
    if let (Some(input), Some(target)) = (input, target) {
        if !input.same_dims(&target) {
            findings.push(Finding::PairMismatch {
                line,
                message: format!("input {:?} vs target {:?}", input.dims(), target.dims()),
            });
        } else if let (true, Some(recipe)) = (replay, &e.recipe) {
            replayed = true;
            match recipe.apply(&target) {
                Ok(out) => {
                    let differing = out
                        .data()
                        .iter()
                        .zip(input.data())
                        .filter(|(a, b)| to_u8(**a) != to_u8(**b))
                        .count();
                    if differing > 0 {
                        findings.push(Finding::ReplayMismatch {
                            line,
                            path: e.input.clone(),
                            differing_samples: differing,
                        });
                    }
                }
                Err(err) => findings.push(Finding::Unreadable {
                    line,
                    path: e.input.clone(),
                    message: format!("replay failed: {err}"),
                }),
            }
        }
    }
    (findings, replayed)
}
