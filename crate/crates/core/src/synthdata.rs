//! Seeded generators for four ultrasound-proxy tasks over one shared scene
//! model: a single ellipse or rectangle on a noisy background.
//!
//! For a given seed every task sees the same image; only the target differs.
//! Targets come from the clean geometry before speckle noise is applied.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::numkernel::Tensor;
use crate::task::Task;

/// Smallest dataset accepted by [`gen_split`].
pub const MIN_SPLIT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

impl ShapeKind {
    pub fn class_id(self) -> usize {
        match self {
            ShapeKind::Ellipse => 0,
            ShapeKind::Rectangle => 1,
        }
    }
}

/// Scene description in pixel units; `(cx, cy)` is the centre and
/// `(rx, ry)` the semi-axes or half-sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub foreground: f64,
    pub background: f64,
}

impl Geometry {
    pub fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Ellipse
        };
        Geometry {
            kind,
            cx: rng.random_range(0.3 * s..0.7 * s),
            cy: rng.random_range(0.3 * s..0.7 * s),
            rx: rng.random_range(0.15 * s..0.35 * s),
            ry: rng.random_range(0.15 * s..0.35 * s),
            foreground: rng.random_range(0.55..0.95),
            background: rng.random_range(0.05..0.3),
        }
    }

    /// Whether the centre of pixel `(x, y)` lies inside the shape.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }

    /// Class map: 0 background, 1 for the upper part of the shape (pixel
    /// centre above `cy`), 2 for the lower part.
    pub fn mask(&self, size: usize) -> Vec<u8> {
        let mut m = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                if self.contains(x, y) {
                    m[y * size + x] = if (y as f64 + 0.5) < self.cy { 1 } else { 2 };
                }
            }
        }
        m
    }
}

/// Tight `(cx, cy, w, h)` box around the non-zero pixels, normalized to the
/// image extent. `None` for an empty mask.
pub fn mask_box(mask: &[u8], size: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in mask.iter().enumerate() {
        if v != 0 {
            let (x, y) = (i % size, i / size);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let s = size as f64;
    let (l, r) = (x0 as f64, (x1 + 1) as f64);
    let (t, b) = (y0 as f64, (y1 + 1) as f64);
    Some([(l + r) / 2.0 / s, (t + b) / 2.0 / s, (r - l) / s, (b - t) / s])
}

pub fn area_fraction(mask: &[u8]) -> f64 {
    mask.iter().filter(|&&v| v != 0).count() as f64 / mask.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Mask(Vec<u8>),
    Class(usize),
    Box([f64; 4]),
    Scalar(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    /// `[S×S×1]` in `[0, 1]`.
    pub image: Tensor,
    pub task: Task,
    pub seed: u64,
    pub target: Target,
}

/// Renders `geom` with speckle-like noise drawn from `rng`; returns the image
/// and the clean class mask.
pub fn render<R: Rng + ?Sized>(geom: &Geometry, size: usize, rng: &mut R) -> (Tensor, Vec<u8>) {
    let mask = geom.mask(size);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = mask
        .iter()
        .map(|&m| {
            let clean = if m != 0 { geom.foreground } else { geom.background };
            let speckle = 1.0 + 0.25 * normal.sample(rng);
            let additive = 0.03 * normal.sample(rng);
            (clean * speckle + additive).clamp(0.0, 1.0)
        })
        .collect();
    (Tensor::from_parts(vec![size, size, 1], data), mask)
}

pub fn target_for(task: Task, geom: &Geometry, mask: Vec<u8>, size: usize) -> Target {
    match task {
        Task::Seg => Target::Mask(mask),
        Task::Cls => Target::Class(geom.kind.class_id()),
        Task::Det => Target::Box(mask_box(&mask, size).unwrap_or([0.0; 4])),
        Task::Reg => Target::Scalar(area_fraction(&mask)),
    }
}

pub fn gen_sample(task: Task, seed: u64, size: usize) -> TaskSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::random(size, &mut rng);
    let (image, mask) = render(&geom, size, &mut rng);
    TaskSample {
        image,
        task,
        seed,
        target: target_for(task, &geom, mask, size),
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Samples with seeds `base_seed..base_seed+n`, the first 80% for training.
pub fn gen_split(task: Task, n: usize, base_seed: u64, size: usize, mode: ExecMode) -> Result<Split> {
    if n < MIN_SPLIT {
        return Err(Error::Config(format!(
            "a split needs at least {MIN_SPLIT} samples, got {n}"
        )));
    }
    let mut all = exec::map_indexed(mode, n, |i| gen_sample(task, base_seed + i as u64, size));
    let n_train = n * 4 / 5;
    let test = all.split_off(n_train);
    Ok(Split { train: all, test })
}

/// Maps an intensity in `[0, 1]` to an 8-bit grey level.
pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes each sample as a PGM image plus `manifest.csv` with one
/// `file,task,target` record per sample. Segmentation masks are written as
/// `<name>_mask.pgm` with class ids scaled by 127.
pub fn export_dataset(samples: &[TaskSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("file,task,target\n");
    for s in samples {
        let size = s.image.shape()[0];
        let name = format!("{}_{:06}.pgm", s.task, s.seed);
        let pixels: Vec<u8> = s.image.data().iter().map(|&v| to_u8(v)).collect();
        write_pnm(&dir.join(&name), &pixels, size, 1)?;
        let target = match &s.target {
            Target::Mask(m) => {
                let mask_name = format!("{}_{:06}_mask.pgm", s.task, s.seed);
                let scaled: Vec<u8> = m.iter().map(|&c| c.saturating_mul(127)).collect();
                write_pnm(&dir.join(&mask_name), &scaled, size, 1)?;
                format!("mask:{mask_name}")
            }
            Target::Class(c) => format!("class:{c}"),
            Target::Box(b) => format!("box:{};{};{};{}", b[0], b[1], b[2], b[3]),
            Target::Scalar(v) => format!("value:{v}"),
        };
        let _ = writeln!(manifest, "{name},{},{target}", s.task);
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Writes a square binary PGM (`channels == 1`) or PPM (`channels == 3`).
pub fn write_pnm(path: &Path, pixels: &[u8], size: usize, channels: usize) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ColorType, ImageEncoder};
    let (subtype, color) = match channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ColorType::Rgb8),
        c => return Err(Error::Contract(format!("cannot write a {c}-channel PNM image"))),
    };
    if pixels.len() != size * size * channels {
        return Err(Error::Contract(format!(
            "{} bytes do not form a {size}x{size}x{channels} image",
            pixels.len()
        )));
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(pixels, size as u32, size as u32, color.into())
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Io(std::io::Error::other(other.to_string())),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let a = gen_sample(Task::Seg, 42, 32);
        let b = gen_sample(Task::Seg, 42, 32);
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn full_frame_rectangle() {
        let g = Geometry {
            kind: ShapeKind::Rectangle,
            cx: 16.0,
            cy: 16.0,
            rx: 16.0,
            ry: 16.0,
            foreground: 0.8,
            background: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, mask) = render(&g, 32, &mut rng);
        assert_eq!(target_for(Task::Reg, &g, mask.clone(), 32), Target::Scalar(1.0));
        assert_eq!(target_for(Task::Det, &g, mask, 32), Target::Box([0.5, 0.5, 1.0, 1.0]));
    }

    #[test]
    fn pixel_count_matches_regression_target() {
        for seed in 0..50 {
            let seg = gen_sample(Task::Seg, seed, 32);
            let reg = gen_sample(Task::Reg, seed, 32);
            let Target::Mask(m) = seg.target else { panic!() };
            let Target::Scalar(v) = reg.target else { panic!() };
            let count = m.iter().filter(|&&c| c > 0).count();
            assert_eq!(count as f64 / 1024.0, v);
            assert!(m.iter().all(|&c| c <= 2));
        }
    }

    #[test]
    fn box_bounds_mask_support() {
        for seed in 0..50 {
            let Target::Mask(m) = gen_sample(Task::Seg, seed, 32).target else { panic!() };
            let Target::Box(b) = gen_sample(Task::Det, seed, 32).target else { panic!() };
            let (l, r) = ((b[0] - b[2] / 2.0) * 32.0, (b[0] + b[2] / 2.0) * 32.0);
            let (t, bt) = ((b[1] - b[3] / 2.0) * 32.0, (b[1] + b[3] / 2.0) * 32.0);
            let mut touches = [false; 4];
            for (i, &c) in m.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let (x, y) = ((i % 32) as f64, (i / 32) as f64);
                assert!(x >= l && x + 1.0 <= r && y >= t && y + 1.0 <= bt);
                touches[0] |= x == l;
                touches[1] |= x + 1.0 == r;
                touches[2] |= y == t;
                touches[3] |= y + 1.0 == bt;
            }
            assert!(touches.iter().all(|&t| t), "box not tight for seed {seed}");
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = gen_split(Task::Cls, 10, 100, 16, ExecMode::Sequential).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let train: Vec<u64> = s.train.iter().map(|x| x.seed).collect();
        assert!(s.test.iter().all(|x| !train.contains(&x.seed)));
        assert!(gen_split(Task::Cls, 1, 0, 16, ExecMode::Sequential).is_err());
        assert!(gen_split(Task::Cls, 4, 0, 16, ExecMode::Sequential).is_err());
        assert!(gen_split(Task::Cls, 5, 0, 16, ExecMode::Sequential).is_ok());
    }

    #[test]
    fn parallel_generation_is_identical() {
        let a = gen_split(Task::Det, 12, 7, 32, ExecMode::Sequential).unwrap();
        let b = gen_split(Task::Det, 12, 7, 32, ExecMode::Parallel).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn export_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = Task::ALL.iter().map(|&t| gen_sample(t, 3, 16)).collect();
        export_dataset(&samples, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 5);
        assert!(manifest.contains("seg_000003.pgm,seg,mask:seg_000003_mask.pgm"));
        let bytes = std::fs::read(dir.path().join("cls_000003.pgm")).unwrap();
        assert_eq!(&bytes[..2], b"P5");
    }
}
