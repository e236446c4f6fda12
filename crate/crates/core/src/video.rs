//! Raw clips and the cubic embedding layer.
//!
//! A 3-D kernel `(k_h, k_w, k_t)` slides over height, width and time with
//! stride `(s_h, s_w, s_t)`. Every placement yields one visual token: the
//! `k_h·k_w·k_t·3` covered values, flattened and linearly projected to `d`.
//! Strides smaller than the kernel make neighbouring cubes overlap. Trailing
//! pixels or frames that do not fit a whole kernel are dropped.
//!
//! Token order is time-major, then row, then column. Values inside one cube
//! are flattened in `(dt, dy, dx, channel)` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{GtrError, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::{Element, Tensor, Var};

pub const GTRV_MAGIC: &[u8; 4] = b"GTRV";

/// Decoded clip, `frames` shaped `[T, H, W, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    /// Frames per second of `frames` (after any temporal sampling).
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f32) -> Result<Self> {
        let sh = frames.shape();
        if sh.len() != 4 || sh[3] != 3 {
            return Err(GtrError::contract(format!(
                "clip must be shaped [T, H, W, 3], got {sh:?}"
            )));
        }
        if sh[0] == 0 || sh[1] == 0 || sh[2] == 0 {
            return Err(GtrError::contract("clip dimensions must be positive"));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GtrError::contract(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.frames.shape()[2]
    }

    /// `(T, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t(), self.h(), self.w())
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let (_, h, w) = self.dims();
        self.frames.data()[((t * h + y) * w + x) * 3 + c]
    }

    /// Contiguous `[H, W, 3]` slice of one frame.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h() * self.w() * 3;
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// Keep frames `0, γ, 2γ, …`.
pub fn sample_frames(raw: &VideoClip, rate: usize) -> Result<VideoClip> {
    if rate == 0 {
        return Err(GtrError::contract("sample rate must be at least 1"));
    }
    let keep: Vec<usize> = (0..raw.t()).step_by(rate).collect();
    if keep.is_empty() {
        return Err(GtrError::InputTooShort(format!(
            "{} frames at sample rate {rate}",
            raw.t()
        )));
    }
    let mut data = Vec::with_capacity(keep.len() * raw.frame(0).len());
    for &t in &keep {
        data.extend_from_slice(raw.frame(t));
    }
    let frames = Tensor::new(vec![keep.len(), raw.h(), raw.w(), 3], data)?;
    Ok(VideoClip {
        frames,
        fps: raw.fps / rate as f32,
    })
}

/// Kernel and stride of the cubic embedding, each `(h, w, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubicConfig {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub embed_dim: usize,
}

impl CubicConfig {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], embed_dim: usize) -> Result<Self> {
        let cfg = CubicConfig {
            kernel,
            stride,
            embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (k, s) = (self.kernel[axis], self.stride[axis]);
            if s == 0 || k == 0 || s > k {
                return Err(GtrError::Config(format!(
                    "cubic kernel {:?} / stride {:?}: need 1 <= stride <= kernel on every axis",
                    self.kernel, self.stride
                )));
            }
        }
        if self.embed_dim == 0 {
            return Err(GtrError::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Values per cube: `k_h·k_w·k_t·3`.
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * 3
    }

    /// Output grid for a clip of `(T, H, W)`.
    pub fn grid(&self, dims: (usize, usize, usize)) -> Result<GridDims> {
        self.validate()?;
        let (t, h, w) = dims;
        let [kh, kw, kt] = self.kernel;
        let [sh, sw, st] = self.stride;
        if kh > h || kw > w || kt > t {
            return Err(GtrError::dim("cubic_embed", &[kh, kw, kt], &[h, w, t]));
        }
        Ok(GridDims {
            o_h: (h - kh) / sh + 1,
            o_w: (w - kw) / sw + 1,
            o_t: (t - kt) / st + 1,
        })
    }
}

/// Token grid extents `(O_h, O_w, O_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub o_h: usize,
    pub o_w: usize,
    pub o_t: usize,
}

impl GridDims {
    pub fn tokens(&self) -> usize {
        self.o_h * self.o_w * self.o_t
    }

    /// Grid coordinate `(h, w, t)` of flat token `i`.
    pub fn coord(&self, i: usize) -> (usize, usize, usize) {
        let w = i % self.o_w;
        let h = (i / self.o_w) % self.o_h;
        let t = i / (self.o_w * self.o_h);
        (h, w, t)
    }
}

/// Closed-form token count `F = O_h·O_w·O_t` for a clip of `(T, H, W)`.
pub fn count_tokens(cfg: &CubicConfig, dims: (usize, usize, usize)) -> Result<usize> {
    Ok(cfg.grid(dims)?.tokens())
}

/// Flattened cubes, `[F × k_h·k_w·k_t·3]`.
pub fn extract_patches<E: Element>(clip: &VideoClip, cfg: &CubicConfig) -> Result<Tensor<E>> {
    let grid = cfg.grid(clip.dims())?;
    let [kh, kw, kt] = cfg.kernel;
    let [sh, sw, st] = cfg.stride;
    let (h, w) = (clip.h(), clip.w());
    let data = clip.frames().data();
    let plen = cfg.patch_len();
    let mut out = Vec::with_capacity(grid.tokens() * plen);
    for ot in 0..grid.o_t {
        for oh in 0..grid.o_h {
            for ow in 0..grid.o_w {
                for dt in 0..kt {
                    let t = ot * st + dt;
                    for dy in 0..kh {
                        let y = oh * sh + dy;
                        let row = ((t * h + y) * w + ow * sw) * 3;
                        out.extend(data[row..row + kw * 3].iter().map(|&v| E::of(v as f64)));
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid.tokens(), plen], out)
}

/// Cubic embedding output: `embeddings` is `[F × d]` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct VisualTokenGrid {
    pub embeddings: Var,
    pub dims: GridDims,
}

/// Mean and standard deviation of `[0, 1]` uniform pixels.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.288_675_134_594_812_9;

/// Shared projection applied to every cube.
#[derive(Debug, Clone, Copy)]
pub struct CubicEmbedding {
    pub cfg: CubicConfig,
    pub proj: Linear,
}

impl CubicEmbedding {
    pub fn new<E: Element>(store: &mut ParamStore<E>, cfg: CubicConfig) -> Self {
        CubicEmbedding {
            cfg,
            proj: store.linear("cubic", cfg.patch_len(), cfg.embed_dim, true),
        }
    }

    pub fn embed<E: Element>(
        &self,
        cx: &mut Ctx<'_, E>,
        clip: &VideoClip,
    ) -> Result<VisualTokenGrid> {
        let dims = self.cfg.grid(clip.dims())?;
        let embeddings = self.embed_patches(cx, extract_patches(clip, &self.cfg)?)?;
        Ok(VisualTokenGrid { embeddings, dims })
    }

    /// Project an already extracted `[F × patch_len]` patch matrix.
    pub fn embed_patches<E: Element>(
        &self,
        cx: &mut Ctx<'_, E>,
        patches: Tensor<E>,
    ) -> Result<Var> {
        let patches = cx.g.constant(patches);
        self.proj.forward(cx, patches)
    }

    /// Like [`embed`](Self::embed), but every pixel is first standardized
    /// to `(x − PIXEL_MEAN) / PIXEL_STD`.
    pub fn embed_standardized<E: Element>(
        &self,
        cx: &mut Ctx<'_, E>,
        clip: &VideoClip,
    ) -> Result<VisualTokenGrid> {
        let dims = self.cfg.grid(clip.dims())?;
        let mut patches = extract_patches::<E>(clip, &self.cfg)?;
        let (mean, inv_std) = (E::of(PIXEL_MEAN), E::of(1.0 / PIXEL_STD));
        patches
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v - mean) * inv_std);
        let embeddings = self.embed_patches(cx, patches)?;
        Ok(VisualTokenGrid { embeddings, dims })
    }
}

/// Fixed sinusoidal encoding `[len × d]`: even channels `sin(p/10000^(2i/d))`,
/// odd channels the matching cosine.
pub fn sinusoidal_encoding<E: Element>(len: usize, d: usize) -> Result<Tensor<E>> {
    if !d.is_multiple_of(2) {
        return Err(GtrError::contract(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(E::of(angle.sin()));
            data.push(E::of(angle.cos()));
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Add the sinusoidal encoding of each token's flat index to `x: [L × d]`.
pub fn add_positional<E: Element>(cx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
    let (len, d) = (cx.g.shape(x)[0], cx.g.shape(x)[1]);
    let pe = cx.g.constant(sinusoidal_encoding(len, d)?);
    cx.g.add(x, pe)
}

pub fn add_positional_encoding<E: Element>(
    cx: &mut Ctx<'_, E>,
    grid: VisualTokenGrid,
) -> Result<VisualTokenGrid> {
    Ok(VisualTokenGrid {
        embeddings: add_positional(cx, grid.embeddings)?,
        dims: grid.dims,
    })
}

/// Serialize a clip: `"GTRV"`, then `T, H, W` as little-endian `u32`, then
/// `T·H·W·3` little-endian `f32` values in row-major order.
pub fn write_gtrv(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + clip.frames().numel() * 4);
    buf.extend_from_slice(GTRV_MAGIC);
    let (t, h, w) = clip.dims();
    for v in [t, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in clip.frames().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_gtrv(path: &Path) -> Result<VideoClip> {
    decode_gtrv(&fs::read(path)?)
}

pub fn decode_gtrv(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 16 {
        return Err(GtrError::Format {
            offset: bytes.len() as u64,
            msg: "truncated GTRV header".into(),
        });
    }
    if &bytes[..4] != GTRV_MAGIC {
        return Err(GtrError::Format {
            offset: 0,
            msg: "bad GTRV magic".into(),
        });
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let n = t * h * w * 3;
    let need = 16 + n * 4;
    if bytes.len() < need {
        return Err(GtrError::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated GTRV payload, expected {need} bytes"),
        });
    }
    let data = bytes[16..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VideoClip::new(Tensor::new(vec![t, h, w, 3], data)?, 1.0)
}
