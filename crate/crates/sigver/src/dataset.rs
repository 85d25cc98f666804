//! Dataset ingestion and the synthetic signature generator.
//!
//! On disk a dataset is a directory tree `root/<user>/genuine/NN.png` and
//! `root/<user>/forgery/NN.png` described by a flat `dataset.toml` manifest
//! listing users and their image counts. Ordering comes from the manifest
//! and is stable across loads; the evaluation protocols depend on it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{GrayImage, RasterError};

pub const MANIFEST_NAME: &str = "dataset.toml";

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// One user's signature files, in manifest order.
#[derive(Debug, Clone)]
pub struct UserRecord {
    pub id: String,
    pub genuine: Vec<PathBuf>,
    pub skilled_forgeries: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SignatureDataset {
    pub root: PathBuf,
    pub users: Vec<UserRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestUser {
    id: String,
    genuine: usize,
    forgeries: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    user: Vec<ManifestUser>,
}

fn image_path(root: &Path, user: &str, kind: &str, index: usize) -> PathBuf {
    root.join(user).join(kind).join(format!("{:02}.png", index + 1))
}

impl SignatureDataset {
    /// Derive the file layout for a manifest without touching the disk.
    /// Useful for protocol arithmetic on dataset shapes.
    pub fn from_counts(root: &Path, counts: &[(String, usize, usize)]) -> Self {
        let users = counts
            .iter()
            .map(|(id, genuine, forgeries)| UserRecord {
                id: id.clone(),
                genuine: (0..*genuine).map(|i| image_path(root, id, "genuine", i)).collect(),
                skilled_forgeries: (0..*forgeries)
                    .map(|i| image_path(root, id, "forgery", i))
                    .collect(),
            })
            .collect();
        Self {
            root: root.to_path_buf(),
            users,
        }
    }

    /// Parse `dataset.toml` under `root` and verify every referenced file
    /// exists.
    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let manifest_path = root.join(MANIFEST_NAME);
        if !manifest_path.is_file() {
            return Err(DatasetError::MissingFile(manifest_path));
        }
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| DatasetError::MalformedManifest(e.to_string()))?;
        if manifest.user.is_empty() {
            return Err(DatasetError::MalformedManifest("no users listed".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for u in &manifest.user {
            if !ids.insert(&u.id) {
                return Err(DatasetError::MalformedManifest(format!(
                    "duplicate user id {}",
                    u.id
                )));
            }
            if u.genuine == 0 {
                return Err(DatasetError::MalformedManifest(format!(
                    "user {} has no genuine signatures",
                    u.id
                )));
            }
        }

        let counts: Vec<(String, usize, usize)> = manifest
            .user
            .iter()
            .map(|u| (u.id.clone(), u.genuine, u.forgeries))
            .collect();
        let dataset = Self::from_counts(root, &counts);
        for user in &dataset.users {
            for path in user.genuine.iter().chain(&user.skilled_forgeries) {
                if !path.is_file() {
                    return Err(DatasetError::MissingFile(path.clone()));
                }
            }
        }
        Ok(dataset)
    }

    pub fn write_manifest(&self) -> Result<(), DatasetError> {
        let manifest = Manifest {
            user: self
                .users
                .iter()
                .map(|u| ManifestUser {
                    id: u.id.clone(),
                    genuine: u.genuine.len(),
                    forgeries: u.skilled_forgeries.len(),
                })
                .collect(),
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| DatasetError::MalformedManifest(e.to_string()))?;
        std::fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn genuine_count(&self) -> usize {
        self.users.iter().map(|u| u.genuine.len()).sum()
    }

    pub fn forgery_count(&self) -> usize {
        self.users.iter().map(|u| u.skilled_forgeries.len()).sum()
    }
}

/// Synthetic generator parameters. Per user a base signature of smooth
/// random strokes is drawn; genuine samples jitter its control points a
/// little, skilled forgeries re-trace it with larger noise and perturbed
/// stroke endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub genuine_per_user: usize,
    pub skilled_per_user: usize,
    pub strokes: usize,
    /// Per-control-point Gaussian jitter for genuine samples, pixels.
    pub jitter: f64,
    /// Tracing noise for skilled forgeries, pixels.
    pub forgery_noise: f64,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 4,
            genuine_per_user: 24,
            skilled_per_user: 8,
            strokes: 4,
            jitter: 1.2,
            forgery_noise: 4.0,
            canvas_width: 160,
            canvas_height: 100,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.users == 0 || self.genuine_per_user == 0 || self.strokes == 0 {
            return Err(DatasetError::InvalidConfig(
                "users, genuine_per_user and strokes must be >= 1".into(),
            ));
        }
        if self.jitter < 0.0 || self.forgery_noise < 0.0 {
            return Err(DatasetError::InvalidConfig("noise must be >= 0".into()));
        }
        if self.canvas_width < 32 || self.canvas_height < 32 {
            return Err(DatasetError::InvalidConfig("canvas too small".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer over the mixed key parts; every generated file gets
/// its own deterministic stream.
fn derive_seed(seed: u64, user: u64, kind: u64, index: u64) -> u64 {
    let mut x = seed
        ^ user.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ kind.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ index.wrapping_mul(0x94d0_49bb_1331_11eb);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

type Stroke = Vec<(f64, f64)>;

/// Base stroke set of a user: cubic curves through 4..=8 control points.
fn base_strokes(config: &SynthConfig, user: usize) -> Vec<Stroke> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, user as u64, 0, 0));
    let margin = 8.0;
    let w = config.canvas_width as f64 - 2.0 * margin;
    let h = config.canvas_height as f64 - 2.0 * margin;
    (0..config.strokes)
        .map(|_| {
            let points = rng.gen_range(4..=8);
            (0..points)
                .map(|_| {
                    (
                        margin + rng.gen_range(0.0..w),
                        margin + rng.gen_range(0.0..h),
                    )
                })
                .collect()
        })
        .collect()
}

fn perturb(
    strokes: &[Stroke],
    noise: f64,
    endpoint_noise: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<Stroke> {
    let normal = Normal::new(0.0, noise.max(1e-9)).expect("valid std");
    let endpoint = Normal::new(0.0, endpoint_noise.max(1e-9)).expect("valid std");
    strokes
        .iter()
        .map(|stroke| {
            let last = stroke.len() - 1;
            stroke
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    let dist = if i == 0 || i == last { &endpoint } else { &normal };
                    let (dx, dy) = if noise > 0.0 || endpoint_noise > 0.0 {
                        (dist.sample(rng), dist.sample(rng))
                    } else {
                        (0.0, 0.0)
                    };
                    (x + dx, y + dy)
                })
                .collect()
        })
        .collect()
}

/// Catmull-Rom interpolation through the control points of one stroke.
fn spline_points(stroke: &Stroke) -> Vec<(f64, f64)> {
    let n = stroke.len();
    let mut out = Vec::new();
    if n == 1 {
        return vec![stroke[0]];
    }
    let at = |i: isize| stroke[i.clamp(0, n as isize - 1) as usize];
    for seg in 0..n - 1 {
        let p0 = at(seg as isize - 1);
        let p1 = at(seg as isize);
        let p2 = at(seg as isize + 1);
        let p3 = at(seg as isize + 2);
        let seg_len = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let steps = (seg_len * 2.0).ceil().max(4.0) as usize;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let x = 0.5
                * (2.0 * p1.0
                    + (-p0.0 + p2.0) * t
                    + (2.0 * p0.0 - 5.0 * p1.0 + 4.0 * p2.0 - p3.0) * t2
                    + (-p0.0 + 3.0 * p1.0 - 3.0 * p2.0 + p3.0) * t3);
            let y = 0.5
                * (2.0 * p1.1
                    + (-p0.1 + p2.1) * t
                    + (2.0 * p0.1 - 5.0 * p1.1 + 4.0 * p2.1 - p3.1) * t2
                    + (-p0.1 + 3.0 * p1.1 - 3.0 * p2.1 + p3.1) * t3);
            out.push((x, y));
        }
    }
    out.push(stroke[n - 1]);
    out
}

fn render(strokes: &[Stroke], width: usize, height: usize) -> GrayImage {
    let mut img = GrayImage::filled(width, height, 255);
    // pen: ~2-3 px wide disk stamped along the spline
    let radius = 1.2f64;
    let r_ceil = radius.ceil() as isize;
    for stroke in strokes {
        for (x, y) in spline_points(stroke) {
            let cx = x.round() as isize;
            let cy = y.round() as isize;
            for dy in -r_ceil..=r_ceil {
                for dx in -r_ceil..=r_ceil {
                    let (px, py) = (cx + dx, cy + dy);
                    if px < 0 || py < 0 || px >= width as isize || py >= height as isize {
                        continue;
                    }
                    let dist2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                    if dist2 <= radius * radius {
                        img.set(px as usize, py as usize, 0);
                    }
                }
            }
        }
    }
    img
}

/// Render one signature image without touching the disk. `kind` 1 is a
/// genuine sample, `kind` 2 a skilled forgery of the same user's base.
fn render_sample(config: &SynthConfig, user: usize, kind: u64, index: usize) -> GrayImage {
    let base = base_strokes(config, user);
    let mut rng =
        ChaCha20Rng::seed_from_u64(derive_seed(config.seed, user as u64, kind, index as u64));
    let strokes = match kind {
        1 => perturb(&base, config.jitter, config.jitter, &mut rng),
        _ => perturb(
            &base,
            config.forgery_noise,
            2.0 * config.forgery_noise,
            &mut rng,
        ),
    };
    render(&strokes, config.canvas_width, config.canvas_height)
}

/// Generate a synthetic dataset under `out_dir` (manifest plus PNG tree).
/// Bitwise deterministic for a fixed config.
pub fn generate_synthetic(
    config: &SynthConfig,
    out_dir: &Path,
) -> Result<SignatureDataset, DatasetError> {
    config.validate()?;
    let counts: Vec<(String, usize, usize)> = (0..config.users)
        .map(|u| {
            (
                format!("u{:03}", u + 1),
                config.genuine_per_user,
                config.skilled_per_user,
            )
        })
        .collect();
    let dataset = SignatureDataset::from_counts(out_dir, &counts);

    for (ui, user) in dataset.users.iter().enumerate() {
        std::fs::create_dir_all(out_dir.join(&user.id).join("genuine"))?;
        std::fs::create_dir_all(out_dir.join(&user.id).join("forgery"))?;
        for (i, path) in user.genuine.iter().enumerate() {
            render_sample(config, ui, 1, i).save_png(path)?;
        }
        for (i, path) in user.skilled_forgeries.iter().enumerate() {
            render_sample(config, ui, 2, i).save_png(path)?;
        }
    }
    dataset.write_manifest()?;
    Ok(dataset)
}
