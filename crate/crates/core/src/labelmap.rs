//! Segmentation label maps: the pixel grids used both for model predictions
//! and for ground truth.
//!
//! On disk a label map is an 8-bit, single-channel PNG whose samples are
//! class identifiers. Decoding is strict: anything that is not exactly that
//! format, or that carries a sample outside the class vocabulary, is a typed
//! error rather than being coerced.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of classes in the label vocabulary.
pub const NUM_CLASSES: usize = 14;

/// Default competition image width.
pub const DEFAULT_WIDTH: u32 = 512;
/// Default competition image height.
pub const DEFAULT_HEIGHT: u32 = 512;

/// Human-readable names for the 14 classes, indexed by identifier.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "avalanche",
    "building undamaged",
    "building damaged",
    "cracks/fissures/subsidence",
    "debris/mud/rock flow",
    "fire/flare",
    "flood/water/river",
    "ice flow",
    "lava flow",
    "person",
    "pyroclastic flow",
    "road/bridge",
    "vehicle",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelMapError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("invalid class id {value} at (row {row}, col {col})")]
    InvalidClassId { row: u32, col: u32, value: u8 },
    #[error("class id {0} is outside 0..=13")]
    ClassOutOfRange(i64),
    #[error("pixel buffer has {actual} entries, expected {expected} for {width}x{height}")]
    LengthMismatch {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("label map must have at least one pixel")]
    Empty,
    #[error("dimension mismatch: got {actual_width}x{actual_height}, expected {expected_width}x{expected_height}")]
    DimensionMismatch {
        actual_width: u32,
        actual_height: u32,
        expected_width: u32,
        expected_height: u32,
    },
}

/// A class identifier in `0..=13`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassId(u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const MAX: ClassId = ClassId((NUM_CLASSES - 1) as u8);

    pub fn new(value: i64) -> Result<Self, LabelMapError> {
        if (0..NUM_CLASSES as i64).contains(&value) {
            Ok(ClassId(value as u8))
        } else {
            Err(LabelMapError::ClassOutOfRange(value))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    /// All 14 classes in ascending order.
    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES as u8).map(ClassId)
    }
}

impl TryFrom<u8> for ClassId {
    type Error = LabelMapError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        ClassId::new(value as i64)
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A `width x height` grid of class identifiers in row-major order.
///
/// Pixels are stored as raw bytes; every constructor validates that each one
/// is a legal [`ClassId`], so the invariant holds for the lifetime of the map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, LabelMapError> {
        let expected = (width as usize) * (height as usize);
        if expected == 0 {
            return Err(LabelMapError::Empty);
        }
        if pixels.len() != expected {
            return Err(LabelMapError::LengthMismatch {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|&p| p as usize >= NUM_CLASSES) {
            return Err(LabelMapError::InvalidClassId {
                row: (i / width as usize) as u32,
                col: (i % width as usize) as u32,
                value: pixels[i],
            });
        }
        Ok(LabelMap {
            width,
            height,
            pixels,
        })
    }

    /// A map with every pixel set to `class`.
    pub fn filled(width: u32, height: u32, class: ClassId) -> Result<Self, LabelMapError> {
        let len = (width as usize) * (height as usize);
        LabelMap::new(width, height, vec![class.get(); len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Raw row-major samples; each is a valid class identifier.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: u32, col: u32) -> Option<ClassId> {
        if row >= self.height || col >= self.width {
            return None;
        }
        Some(ClassId(self.pixels[(row * self.width + col) as usize]))
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// Decodes an 8-bit grayscale PNG into a [`LabelMap`].
pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap, LabelMapError> {
    let malformed = |e: &dyn fmt::Display| LabelMapError::MalformedImage(e.to_string());

    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| malformed(&e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(LabelMapError::MalformedImage(format!(
            "expected single-channel grayscale, got {:?}",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(LabelMapError::MalformedImage(format!(
            "expected 8-bit samples, got {:?}",
            info.bit_depth
        )));
    }
    if info.trns.is_some() {
        return Err(LabelMapError::MalformedImage(
            "transparency chunk not allowed".into(),
        ));
    }
    let (width, height) = (info.width, info.height);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| LabelMapError::MalformedImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| malformed(&e))?;
    buf.truncate(frame.buffer_size());

    // Rows may be padded in principle; compact to width bytes per row.
    let row = width as usize;
    let pixels = if frame.line_size == row {
        buf
    } else {
        buf.chunks(frame.line_size)
            .flat_map(|line| &line[..row])
            .copied()
            .collect()
    };
    LabelMap::new(width, height, pixels)
}

/// Encodes a [`LabelMap`] as an 8-bit grayscale PNG.
pub fn encode_label_map(map: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.len() / 4 + 64);
    {
        let mut encoder = png::Encoder::new(&mut out, map.width, map.height);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        // Writing into a Vec with valid header parameters cannot fail.
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(&map.pixels).expect("png data");
        writer.finish().expect("png finish");
    }
    out
}

pub fn validate_dimensions(
    map: &LabelMap,
    expected_width: u32,
    expected_height: u32,
) -> Result<(), LabelMapError> {
    if map.width == expected_width && map.height == expected_height {
        Ok(())
    } else {
        Err(LabelMapError::DimensionMismatch {
            actual_width: map.width,
            actual_height: map.height,
            expected_width,
            expected_height,
        })
    }
}

/// The set of distinct classes present in `map`.
pub fn class_set(map: &LabelMap) -> BTreeSet<ClassId> {
    let mut seen = [false; NUM_CLASSES];
    for &p in &map.pixels {
        seen[p as usize] = true;
    }
    seen.iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| ClassId(i as u8))
        .collect()
}
