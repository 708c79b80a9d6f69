//! Deterministic synthetic datasets and the TLDS1 record format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TLDS1" | u32 count | u32 T | u32 H | u32 W | u32 C | u32 K
//! count × ( T·H·W·C × f32 pixels | u32 label )
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"TLDS1";

/// Intensity of distractor squares; target squares are 1.0.
pub const DISTRACTOR_LEVEL: f32 = 0.5;

/// Most distractors allowed per frame.
pub const MAX_DISTRACTORS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Which quadrant holds a bright square.
    LocatePatch,
    /// How many bright squares (label `k` means `k + 1` squares).
    CountBlobs,
    /// Direction of a square moving across the frames: right, left, down, up.
    MovingBlobDirection,
}

fn default_channels() -> usize {
    3
}

fn default_frames() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Square image side.
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    pub classes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
    /// Dim clutter squares (intensity [`DISTRACTOR_LEVEL`], half the blob side)
    /// placed anywhere in every frame.
    #[serde(default)]
    pub distractors: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn locate_patch(size: usize, noise: f64, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::LocatePatch,
            size,
            channels: 3,
            frames: 1,
            classes: 4,
            noise,
            distractors: 0,
            seed,
        }
    }

    pub fn count_blobs(size: usize, classes: usize, noise: f64, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::CountBlobs,
            size,
            channels: 3,
            frames: 1,
            classes,
            noise,
            distractors: 0,
            seed,
        }
    }

    pub fn moving_blob(size: usize, noise: f64, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::MovingBlobDirection,
            size,
            channels: 3,
            frames: 8,
            classes: 4,
            noise,
            distractors: 0,
            seed,
        }
    }

    /// Side of the bright square.
    pub fn blob_size(&self) -> usize {
        (self.size / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be a finite non-negative value"));
        }
        if self.distractors > MAX_DISTRACTORS {
            return Err(Error::config(
                "distractors",
                format!("at most {MAX_DISTRACTORS} per frame"),
            ));
        }
        let b = self.blob_size();
        match self.kind {
            TaskKind::LocatePatch => {
                if self.size < 2 || !self.size.is_multiple_of(2) {
                    return Err(Error::config("size", "must be even and at least 2"));
                }
                if self.classes != 4 {
                    return Err(Error::config("classes", "locate-patch has exactly 4 classes"));
                }
                if self.frames != 1 {
                    return Err(Error::config("frames", "locate-patch is an image task"));
                }
            }
            TaskKind::CountBlobs => {
                let cells = (self.size / b).pow(2);
                if self.classes < 2 || self.classes > cells {
                    return Err(Error::config(
                        "classes",
                        format!("count-blobs needs 2..={cells} classes at size {}", self.size),
                    ));
                }
                if self.frames != 1 {
                    return Err(Error::config("frames", "count-blobs is an image task"));
                }
            }
            TaskKind::MovingBlobDirection => {
                if self.classes != 4 {
                    return Err(Error::config("classes", "moving-blob-direction has exactly 4 classes"));
                }
                if self.frames < 2 {
                    return Err(Error::config("frames", "motion needs at least 2 frames"));
                }
                if self.size < b + self.frames - 1 {
                    return Err(Error::config(
                        "size",
                        format!("a {b}-pixel square cannot move {} steps", self.frames - 1),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Samples stored as `f32`, the precision of the on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[T, H, W, C]`
    pub dims: [usize; 4],
    pub classes: usize,
    pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: [usize; 4], classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixels for {} samples of {:?}",
                pixels.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            dims,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Shape of a sample: `[H, W, C]` for images, `[T, H, W, C]` for video.
    pub fn sample_shape(&self) -> Vec<usize> {
        let [t, h, w, c] = self.dims;
        if t == 1 {
            vec![h, w, c]
        } else {
            vec![t, h, w, c]
        }
    }

    pub fn sample(&self, i: usize) -> Tensor {
        let n = self.sample_len();
        let data = self.pixels[i * n..(i + 1) * n].iter().map(|&v| f64::from(v)).collect();
        Tensor::new(self.sample_shape(), data).expect("sample shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            classes: self.classes,
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.pixels.len() * 4 + self.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let n = self.sample_len();
        for (i, &label) in self.labels.iter().enumerate() {
            for v in &self.pixels[i * n..(i + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(label as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Dataset("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Dataset("bad magic, expected TLDS1".into()));
        }
        let mut u32s = [0usize; 6];
        for v in &mut u32s {
            *v = read_u32(&mut r)? as usize;
        }
        let [count, t, h, w, c, k] = u32s;
        let per = t * h * w * c;
        if per == 0 || k == 0 {
            return Err(Error::Dataset(format!("degenerate header {u32s:?}")));
        }
        let expected = 29 + count as u128 * (per as u128 * 4 + 4);
        if bytes.len() as u128 != expected {
            return Err(Error::Dataset(format!(
                "file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut pixels = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            for _ in 0..per {
                r.read_exact(&mut buf)?;
                pixels.push(f32::from_le_bytes(buf));
            }
            labels.push(read_u32(&mut r)? as usize);
        }
        Dataset::new([t, h, w, c], k, pixels, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Dataset("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

struct Canvas {
    dims: [usize; 4],
    px: Vec<f32>,
}

impl Canvas {
    fn new(dims: [usize; 4]) -> Self {
        Canvas {
            dims,
            px: vec![0.0; dims.iter().product()],
        }
    }

    fn square(&mut self, frame: usize, y0: usize, x0: usize, side: usize) {
        self.fill(frame, y0, x0, side, 1.0);
    }

    /// Raises pixels to at least `level`.
    fn fill(&mut self, frame: usize, y0: usize, x0: usize, side: usize, level: f32) {
        let [_, h, w, c] = self.dims;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let base = ((frame * h + y) * w + x) * c;
                for v in &mut self.px[base..base + c] {
                    *v = v.max(level);
                }
            }
        }
    }
}

fn draw(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> (Vec<f32>, usize) {
    let (s, b) = (spec.size, spec.blob_size());
    let mut canvas = Canvas::new([spec.frames, s, s, spec.channels]);
    let label = rng.random_range(0..spec.classes);
    match spec.kind {
        TaskKind::LocatePatch => {
            let half = s / 2;
            let side = b.min(half);
            let (qy, qx) = (label / 2, label % 2);
            let y = qy * half + rng.random_range(0..=half - side);
            let x = qx * half + rng.random_range(0..=half - side);
            canvas.square(0, y, x, side);
        }
        TaskKind::CountBlobs => {
            let per_row = s / b;
            let mut cells: Vec<usize> = (0..per_row * per_row).collect();
            for i in 0..=label {
                let j = rng.random_range(i..cells.len());
                cells.swap(i, j);
                canvas.square(0, cells[i] / per_row * b, cells[i] % per_row * b, b);
            }
        }
        TaskKind::MovingBlobDirection => {
            let travel = spec.frames - 1;
            let free = s - b;
            // (dy, dx) for right, left, down, up
            let (dy, dx): (isize, isize) = [(0, 1), (0, -1), (1, 0), (-1, 0)][label];
            let start = |d: isize, rng: &mut ChaCha8Rng| -> usize {
                match d {
                    1 => rng.random_range(0..=free - travel),
                    -1 => rng.random_range(travel..=free),
                    _ => rng.random_range(0..=free),
                }
            };
            let (y0, x0) = (start(dy, rng), start(dx, rng));
            for f in 0..spec.frames {
                let y = (y0 as isize + dy * f as isize) as usize;
                let x = (x0 as isize + dx * f as isize) as usize;
                canvas.square(f, y, x, b);
            }
        }
    }
    let side = (b / 2).max(1);
    for f in 0..spec.frames {
        for _ in 0..spec.distractors {
            let (y, x) = (rng.random_range(0..=s - side), rng.random_range(0..=s - side));
            canvas.fill(f, y, x, side, DISTRACTOR_LEVEL);
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in &mut canvas.px {
            *v += normal.sample(rng) as f32;
        }
    }
    (canvas.px, label)
}

/// Generates `n` samples deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticTaskSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "dataset needs at least one sample"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (px, label) = draw(spec, &mut rng);
        pixels.extend(px);
        labels.push(label);
    }
    Dataset::new(
        [spec.frames, spec.size, spec.size, spec.channels],
        spec.classes,
        pixels,
        labels,
    )
}

/// Generates `n` samples and writes them to `path`.
pub fn generate_dataset(spec: &SyntheticTaskSpec, n: usize, path: impl AsRef<Path>) -> Result<Dataset> {
    let ds = generate(spec, n)?;
    ds.save(path)?;
    Ok(ds)
}
