//! Deterministic synthetic test sets: blocky Voronoi ground-truth maps with
//! several classes each, plus a colour rendering of each map to serve as the
//! input image.
//!
//! Each image draws from its own ChaCha stream seeded from `(seed, index)`,
//! so the output is byte-identical whether or not images are rendered in
//! parallel.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelmap::{encode_label_map, LabelMap, NUM_CLASSES};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const FIXTURE_MANIFEST: &str = "manifest.json";

/// Voronoi cells are computed on a coarse grid of this many pixels per side.
const CELL: u32 = 8;

const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [220, 220, 255],
    [120, 120, 120],
    [160, 82, 45],
    [60, 60, 60],
    [139, 115, 85],
    [255, 69, 0],
    [30, 144, 255],
    [200, 240, 255],
    [255, 140, 0],
    [255, 192, 203],
    [128, 0, 0],
    [90, 90, 90],
    [255, 255, 0],
];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("width and height must be positive, got {0}x{1}")]
    ZeroDimension(u32, u32),
    #[error("count must be positive")]
    ZeroCount,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    /// Base names (without extension), in generation order.
    pub names: Vec<String>,
}

impl FixtureManifest {
    pub fn load(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(FIXTURE_MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn file_names(&self) -> Vec<String> {
        self.names.iter().map(|n| format!("{n}.png")).collect()
    }
}

pub fn fixture_name(index: usize) -> String {
    format!("img_{index:04}")
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Ground truth for image `index` of the set generated from `seed`.
pub fn ground_truth(seed: u64, index: usize, width: u32, height: u32) -> LabelMap {
    let mut rng = image_rng(seed, index);
    let distinct = rng.random_range(3..=6);
    let mut pool: Vec<u8> = (1..NUM_CLASSES as u8).collect();
    pool.shuffle(&mut rng);
    let mut classes = vec![0u8];
    classes.extend_from_slice(&pool[..distinct - 1]);

    let cols = width.div_ceil(CELL);
    let rows = height.div_ceil(CELL);
    let n_sites = distinct + rng.random_range(0..4);
    let sites: Vec<(f32, f32, u8)> = (0..n_sites)
        .map(|i| {
            (
                rng.random_range(0.0..cols as f32),
                rng.random_range(0.0..rows as f32),
                classes[i % distinct],
            )
        })
        .collect();

    let mut cells = vec![0u8; (cols * rows) as usize];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                    let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least three sites");
            cells[(r * cols + c) as usize] = nearest.2;
        }
    }

    let mut pixels = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        let row = &cells[((y / CELL) * cols) as usize..][..cols as usize];
        pixels.extend((0..width).map(|x| row[(x / CELL) as usize]));
    }
    LabelMap::new(width, height, pixels).expect("classes come from the vocabulary")
}

/// RGB PNG rendering of `map` using a fixed per-class palette.
pub fn render_input(map: &LabelMap) -> Vec<u8> {
    let rgb: Vec<u8> = map
        .pixels()
        .iter()
        .flat_map(|&p| PALETTE[p as usize])
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width(), map.height());
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("png header");
        w.write_image_data(&rgb).expect("png data");
        w.finish().expect("png finish");
    }
    out
}

struct Rendered {
    name: String,
    label_png: Vec<u8>,
    input_png: Vec<u8>,
}

fn render(seed: u64, index: usize, width: u32, height: u32) -> Rendered {
    let map = ground_truth(seed, index, width, height);
    Rendered {
        name: fixture_name(index),
        input_png: render_input(&map),
        label_png: encode_label_map(&map),
    }
}

/// Paths of a generated fixture set.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub root: PathBuf,
    pub manifest: FixtureManifest,
}

impl FixtureSet {
    pub fn images_dir(&self) -> PathBuf {
        self.root.join(IMAGES_DIR)
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join(LABELS_DIR)
    }
}

/// Writes `count` input images and ground-truth maps plus a manifest under
/// `out_dir`. The same arguments always produce byte-identical files.
pub fn generate_fixtures(
    seed: u64,
    count: usize,
    width: u32,
    height: u32,
    out_dir: &Path,
) -> Result<FixtureSet, FixtureError> {
    if width == 0 || height == 0 {
        return Err(FixtureError::ZeroDimension(width, height));
    }
    if count == 0 {
        return Err(FixtureError::ZeroCount);
    }
    let images = out_dir.join(IMAGES_DIR);
    let labels = out_dir.join(LABELS_DIR);
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;

    let write = |r: Rendered| -> io::Result<String> {
        fs::write(images.join(format!("{}.png", r.name)), &r.input_png)?;
        fs::write(labels.join(format!("{}.png", r.name)), &r.label_png)?;
        Ok(r.name)
    };

    #[cfg(feature = "parallel")]
    let names: Vec<String> = {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|i| write(render(seed, i, width, height)))
            .collect::<io::Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let names: Vec<String> = (0..count)
        .map(|i| write(render(seed, i, width, height)))
        .collect::<io::Result<_>>()?;

    let manifest = FixtureManifest {
        seed,
        count,
        width,
        height,
        names,
    };
    fs::write(
        out_dir.join(FIXTURE_MANIFEST),
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(FixtureSet {
        root: out_dir.to_path_buf(),
        manifest,
    })
}
