//! Synthetic grounding data and video augmentations.
//!
//! Each sample is a uniform-noise clip in which a solid colored square is
//! drawn during one contiguous run of frames. The square's color and
//! quadrant define the class; the query is the three-token code
//! `<color> square <quadrant>`. The ground-truth segment covers exactly the
//! frames that show the square: frame `t` is inside iff `t/T ∈ [start, end)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{GtrError, Result};
use crate::matching::Segment;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::video::{write_gtrv, VideoClip};

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
];

pub const QUADRANTS: [&str; 4] = ["topleft", "topright", "bottomleft", "bottomright"];

pub const MAX_CLASSES: usize = 32;

/// Vocabulary of the synthetic queries.
pub fn vocabulary() -> Vocab {
    let mut words: Vec<&str> = COLORS.iter().map(|c| c.0).collect();
    words.push("square");
    words.extend(QUADRANTS);
    Vocab::new(&words)
}

/// `(color index, quadrant index)` of a class; distinct for all 32 classes.
pub fn class_code(class: usize) -> (usize, usize) {
    (class % 8, (class / 8 + 3 * class) % 4)
}

pub fn class_query(class: usize) -> String {
    let (c, q) = class_code(class);
    format!("{} square {}", COLORS[c].0, QUADRANTS[q])
}

/// Pixel rectangle `(y0, x0, height, width)` of the square for a quadrant.
pub fn square_rect(quadrant: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (sh, sw) = ((h / 4).max(1), (w / 4).max(1));
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    let y0 = qy * (h / 2) + (h / 2).saturating_sub(sh) / 2;
    let x0 = qx * (w / 2) + (w / 2).saturating_sub(sw) / 2;
    (y0, x0, sh, sw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl DataSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        DataSpec {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            classes: cfg.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: usize,
    pub seed: u64,
    pub class: usize,
    pub clip: VideoClip,
    pub query: String,
    pub query_ids: Vec<usize>,
    pub gt: Segment,
}

/// Seed for sample `i` of a set generated from `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (i as u64)
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
            .wrapping_add(1)
}

/// `count` samples; class `i mod classes` for sample `i`.
pub fn gen_synthetic(count: usize, spec: &DataSpec, seed: u64) -> Result<Vec<GroundingSample>> {
    if count == 0 {
        return Err(GtrError::contract("sample count must be at least 1"));
    }
    if spec.classes == 0 || spec.classes > MAX_CLASSES {
        return Err(GtrError::Config(format!(
            "classes must be in 1..={MAX_CLASSES}"
        )));
    }
    if spec.frames < 2 || spec.height < 4 || spec.width < 4 {
        return Err(GtrError::InputTooShort(format!(
            "synthetic clips need at least 2 frames of 4×4 pixels, got {}×{}×{}",
            spec.frames, spec.height, spec.width
        )));
    }
    let vocab = vocabulary();
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            gen_sample(i, i % spec.classes, s, spec, &vocab)
        })
        .collect()
}

fn gen_sample(
    id: usize,
    class: usize,
    seed: u64,
    spec: &DataSpec,
    vocab: &Vocab,
) -> Result<GroundingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let lo = (t / 6).max(2).min(t);
    let hi = (t / 2).max(lo);
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=t - len);

    let mut data: Vec<f32> = (0..t * h * w * 3).map(|_| rng.random::<f32>()).collect();
    let (ci, qi) = class_code(class);
    let color = COLORS[ci].1;
    let (y0, x0, sh, sw) = square_rect(qi, h, w);
    for f in start..start + len {
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let o = ((f * h + y) * w + x) * 3;
                data[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![t, h, w, 3], data)?, 1.0)?;
    let query = class_query(class);
    Ok(GroundingSample {
        id,
        seed,
        class,
        clip,
        query_ids: vocab.encode(&query),
        query,
        gt: Segment::new(start as f64 / t as f64, (start + len) as f64 / t as f64)?,
    })
}

/// Stream salt separating the held-out split from the training split.
const EVAL_STREAM: u64 = 0x6576_616c_0000_0001;

/// `cfg.train_samples` training samples drawn from `cfg.seed`.
pub fn train_split(cfg: &ModelConfig) -> Result<Vec<GroundingSample>> {
    gen_synthetic(cfg.train_samples, &DataSpec::from_config(cfg), cfg.seed)
}

/// `cfg.eval_samples` held-out samples from a stream disjoint from
/// [`train_split`].
pub fn eval_split(cfg: &ModelConfig) -> Result<Vec<GroundingSample>> {
    gen_synthetic(
        cfg.eval_samples,
        &DataSpec::from_config(cfg),
        cfg.seed ^ EVAL_STREAM,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
}

impl AugmentFlags {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        AugmentFlags {
            flip: cfg.augment_flip,
            crop: cfg.augment_crop,
            jitter: cfg.augment_jitter,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.crop || self.jitter
    }
}

/// Fraction of each spatial side kept by the random crop.
pub const CROP_FRACTION: f64 = 0.875;

/// Appearance-only augmentation; the ground-truth segment is never touched.
/// Each enabled transform draws its randomness from `rng` in the order
/// flip, crop, jitter.
pub fn augment<R: Rng>(
    sample: &GroundingSample,
    flags: AugmentFlags,
    rng: &mut R,
) -> GroundingSample {
    if !flags.any() {
        return sample.clone();
    }
    let mut clip = sample.clip.clone();
    if flags.flip && rng.random_bool(0.5) {
        clip = flip_horizontal(&clip);
    }
    if flags.crop {
        let (_, h, w) = clip.dims();
        let ch = ((h as f64 * CROP_FRACTION).round() as usize).clamp(1, h);
        let cw = ((w as f64 * CROP_FRACTION).round() as usize).clamp(1, w);
        let oy = rng.random_range(0..=h - ch);
        let ox = rng.random_range(0..=w - cw);
        clip = crop_resize(&clip, oy, ox, ch, cw);
    }
    if flags.jitter {
        let factors: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.8f32..=1.2));
        clip = color_jitter(&clip, factors);
    }
    GroundingSample {
        clip,
        ..sample.clone()
    }
}

pub fn flip_horizontal(clip: &VideoClip) -> VideoClip {
    let (t, h, w) = clip.dims();
    let mut out = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        for y in 0..h {
            for x in (0..w).rev() {
                out.extend((0..3).map(|c| clip.pixel(f, y, x, c)));
            }
        }
    }
    rebuild(clip, out)
}

/// Crop `[oy, oy+ch) × [ox, ox+cw)` and resize back with nearest neighbour.
pub fn crop_resize(clip: &VideoClip, oy: usize, ox: usize, ch: usize, cw: usize) -> VideoClip {
    let (t, h, w) = clip.dims();
    let mut out = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        for y in 0..h {
            let sy = oy + y * ch / h;
            for x in 0..w {
                let sx = ox + x * cw / w;
                out.extend((0..3).map(|c| clip.pixel(f, sy, sx, c)));
            }
        }
    }
    rebuild(clip, out)
}

/// Multiply each channel by its factor and clamp to `[0, 1]`.
pub fn color_jitter(clip: &VideoClip, factors: [f32; 3]) -> VideoClip {
    let out = clip
        .frames()
        .data()
        .chunks(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] * factors[c]).clamp(0.0, 1.0)))
        .collect();
    rebuild(clip, out)
}

fn rebuild(clip: &VideoClip, data: Vec<f32>) -> VideoClip {
    let frames = Tensor::new(clip.frames().shape().to_vec(), data).expect("same shape");
    VideoClip::new(frames, clip.fps).expect("values stay in [0, 1]")
}

/// Write `sample_NNNN.gtrv` clips plus a `samples.csv` manifest
/// (`id,class,query,start,end`).
pub fn write_dataset(dir: &Path, samples: &[GroundingSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,class,query,start,end\n");
    for s in samples {
        write_gtrv(&dir.join(format!("sample_{:04}.gtrv", s.id)), &s.clip)?;
        let _ = writeln!(
            manifest,
            "{},{},{},{},{}",
            s.id, s.class, s.query, s.gt.start, s.gt.end
        );
    }
    fs::write(dir.join("samples.csv"), manifest)?;
    Ok(())
}
