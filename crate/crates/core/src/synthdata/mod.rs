//! Synthetic eye scenes: a pupil inside an iris under an upper eyelid, rendered
//! as flat intensity regions, with exactly known contours and landmarks.

mod augment;
mod generate;
mod io;

pub use augment::{augment, augment_with, AugmentDraw, Reflection, WarpField};
pub use generate::{generate_dataset, generate_sample, sample_rng};
pub use io::{
    read_dataset, read_manifest, read_split, write_dataset, DatasetFile, Manifest, SplitCounts, SplitEntry,
    FORMAT_VERSION, MANIFEST_FILE, RECORDS_FILE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, RasterGrid, ShapeKind, ShapeSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: generation failed: {reason}")]
    GenerationFailure { id: u64, reason: String },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkCounts {
    pub pupil: usize,
    pub iris: usize,
    pub eyelid: usize,
}

impl LandmarkCounts {
    pub fn get(&self, kind: ShapeKind) -> usize {
        match kind {
            ShapeKind::Pupil => self.pupil,
            ShapeKind::Iris => self.iris,
            ShapeKind::Eyelid => self.eyelid,
        }
    }

    pub fn total(&self) -> usize {
        self.pupil + self.iris + self.eyelid
    }
}

impl Default for LandmarkCounts {
    fn default() -> Self {
        LandmarkCounts { pupil: 16, iris: 16, eyelid: 12 }
    }
}

/// Online augmentation strengths. Zero everywhere is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive pixel noise (intensity units).
    pub noise_sigma: f64,
    /// Maximum translation per axis in normalized units.
    pub shift_max: f64,
    /// Probability of painting a bright specular blob.
    pub reflection_prob: f64,
    /// Peak displacement of the smooth warp in normalized units.
    pub deform_amp: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { noise_sigma: 0.0, shift_max: 0.0, reflection_prob: 0.0, deform_amp: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.noise_sigma, self.shift_max, self.reflection_prob, self.deform_amp];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::InvalidConfig("augmentation strengths must be non-negative".into()));
        }
        if self.shift_max >= 0.2 {
            return Err(DataError::InvalidConfig("shift_max must be below 0.2".into()));
        }
        if self.reflection_prob > 1.0 {
            return Err(DataError::InvalidConfig("reflection_prob is a probability".into()));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma: 0.03, shift_max: 0.04, reflection_prob: 0.3, deform_amp: 0.008 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub landmarks: LandmarkCounts,
    /// Resolution of the rendered input image.
    pub grid: RasterGrid,
    pub seed: u64,
    pub augmentation: AugmentConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 1200,
            n_val: 300,
            n_test: 500,
            landmarks: LandmarkCounts::default(),
            grid: RasterGrid { width: 64, height: 64 },
            seed: 0,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DataError::InvalidConfig("every split needs at least one sample".into()));
        }
        let lm = self.landmarks;
        if lm.pupil < 5 || lm.iris < 5 || lm.eyelid < 4 {
            return Err(DataError::InvalidConfig("need >= 5 pupil/iris landmarks and >= 4 eyelid landmarks".into()));
        }
        if lm.pupil > u16::MAX as usize || lm.iris > u16::MAX as usize || lm.eyelid > u16::MAX as usize {
            return Err(DataError::InvalidConfig("landmark count exceeds u16".into()));
        }
        RasterGrid::new(self.grid.width, self.grid.height)?;
        self.augmentation.validate()
    }

    /// First sample id of each split; ids are consecutive across
    /// train, val and test.
    pub fn first_id(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Val => self.n_train as u64,
            Split::Test => (self.n_train + self.n_val) as u64,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

/// One synthetic scene with its annotations. Shapes and landmarks are stored
/// in [`ShapeKind::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub grid: RasterGrid,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub shapes: Vec<ShapeSpec>,
    pub landmarks: Vec<Vec<Point>>,
}

impl Sample {
    pub fn shape(&self, kind: ShapeKind) -> &ShapeSpec {
        &self.shapes[kind as usize]
    }

    pub fn landmarks_of(&self, kind: ShapeKind) -> &[Point] {
        &self.landmarks[kind as usize]
    }

    /// Checks containment, landmark bounds and landmark counts.
    pub fn check_invariants(&self, counts: &LandmarkCounts) -> std::result::Result<(), String> {
        if self.image.len() != self.grid.pixel_count() {
            return Err("image size does not match grid".into());
        }
        if self.shapes.len() != 3 || self.landmarks.len() != 3 {
            return Err("expected three shapes".into());
        }
        for (i, kind) in ShapeKind::ALL.iter().enumerate() {
            if self.shapes[i].kind() != *kind {
                return Err(format!("shape {i} is not a {kind}"));
            }
            if self.landmarks[i].len() != counts.get(*kind) {
                return Err(format!("{kind} landmark count mismatch"));
            }
        }
        let (Some(pupil), Some(iris)) = (self.shapes[0].ellipse(), self.shapes[1].ellipse()) else {
            return Err("pupil and iris must be ellipses".into());
        };
        if !iris.contains_ellipse(pupil, 1.0) {
            return Err("pupil is not contained in the iris".into());
        }
        if !pupil.center_in_unit_square() || !iris.center_in_unit_square() {
            return Err("ellipse center outside the frame".into());
        }
        let in_frame = |p: &Point| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y);
        if !self.landmarks.iter().flatten().all(in_frame) {
            return Err("landmark outside the frame".into());
        }
        if !self.image.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err("pixel intensity outside [0, 1]".into());
        }
        Ok(())
    }
}

/// A generated dataset split into its three parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub(crate) fn quantize_point(p: Point) -> Point {
    Point::new(quantize(p.x), quantize(p.y))
}

/// Rounds shape parameters to `f32` so that the on-disk form is lossless.
pub(crate) fn quantize_shape(s: &ShapeSpec) -> std::result::Result<ShapeSpec, GeometryError> {
    let mut shape = s.clone();
    // canonicalization can move theta off the f32 lattice; settle to a fixed point
    for _ in 0..4 {
        let params: Vec<f64> = shape.parameters().into_iter().map(quantize).collect();
        let next = ShapeSpec::from_parameters(shape.kind(), &params)?;
        if next.parameters() == params {
            return Ok(next);
        }
        shape = next;
    }
    Ok(shape)
}
