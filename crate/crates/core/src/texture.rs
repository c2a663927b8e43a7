//! Texture generation: latent grid, sigmoid generation, binarization, block
//! upsampling and body-part masking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pgm::GrayImage;

/// Initial latent value; `sigmoid(4) ~ 0.982`, i.e. a near-white texture with live gradient.
pub const WHITE_LATENT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureGeometry {
    /// Grid side `n`.
    pub grid: usize,
    /// Texture map side `H = W`.
    pub size: usize,
}

impl TextureGeometry {
    pub fn new(grid: usize, size: usize) -> Result<Self> {
        if grid == 0 || size == 0 || size % grid != 0 {
            return Err(Error::InvalidGeometry(format!(
                "texture size {size} must be a positive multiple of grid {grid}"
            )));
        }
        Ok(TextureGeometry { grid, size })
    }

    /// Block side `c = H / n`.
    pub fn block(&self) -> usize {
        self.size / self.grid
    }

    /// Largest texture size not exceeding `target` that the grid divides.
    pub fn fitting(grid: usize, target: usize) -> Result<Self> {
        Self::new(grid, (target / grid.max(1)) * grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub n: usize,
    pub z: Vec<f64>,
}

impl LatentGrid {
    pub fn white(n: usize) -> Self {
        LatentGrid {
            n,
            z: vec![WHITE_LATENT; n * n],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.z.clone()).expect("latent grid shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Binarization {
    Hard,
    Soft { temperature: f64 },
}

/// Geometric annealing from `start` to `end` over the first `anneal_fraction`
/// of the run, then hard binarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_fraction: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.02,
            anneal_fraction: 0.8,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, iteration: usize, total: usize) -> Binarization {
        let anneal = (self.anneal_fraction * total as f64).round() as usize;
        if iteration >= anneal {
            return Binarization::Hard;
        }
        let frac = if anneal <= 1 { 0.0 } else { iteration as f64 / (anneal - 1) as f64 };
        Binarization::Soft {
            temperature: self.start * (self.end / self.start).powf(frac),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyRegion {
    UpperBody,
    Arms,
    Legs,
}

impl BodyRegion {
    pub const ALL: [BodyRegion; 3] = [BodyRegion::UpperBody, BodyRegion::Arms, BodyRegion::Legs];

    pub fn name(self) -> &'static str {
        match self {
            BodyRegion::UpperBody => "upper_body",
            BodyRegion::Arms => "arms",
            BodyRegion::Legs => "legs",
        }
    }
}

/// The seven non-empty region selections, singles first, full body last.
pub fn mask_combinations() -> Vec<Vec<BodyRegion>> {
    use BodyRegion::*;
    vec![
        vec![UpperBody],
        vec![Arms],
        vec![Legs],
        vec![UpperBody, Arms],
        vec![UpperBody, Legs],
        vec![Arms, Legs],
        vec![UpperBody, Arms, Legs],
    ]
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)` in texture-map coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Left and right halves split at the nearest block boundary.
    pub fn split_columns(&self, block: usize) -> (Rect, Rect) {
        let mid = self.x0 + (self.width() / 2 / block.max(1)) * block.max(1);
        let mid = if mid <= self.x0 { self.x0 + self.width() / 2 } else { mid };
        (Rect::new(self.x0, self.y0, mid, self.y1), Rect::new(mid, self.y0, self.x1, self.y1))
    }
}

/// Where each body region lives in the texture map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskLayout {
    pub upper_body: Rect,
    pub arms: Rect,
    pub legs: Rect,
}

impl MaskLayout {
    /// Upper body in the top-left, arms top-right, legs along the bottom, split on block boundaries.
    pub fn standard(geometry: TextureGeometry) -> Self {
        let c = geometry.block();
        let h = geometry.size;
        let split = ((geometry.grid * 3 + 2) / 5).max(1) * c;
        MaskLayout {
            upper_body: Rect::new(0, 0, split, split),
            arms: Rect::new(split, 0, h, split),
            legs: Rect::new(0, split, h, h),
        }
    }

    fn check_region(&self, r: BodyRegion, size: usize) -> Result<()> {
        let rect = self.region(r);
        if rect.x1 > size || rect.y1 > size || rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
            return Err(Error::InvalidGeometry(format!(
                "mask region {} {:?} does not fit a {size}x{size} texture",
                r.name(),
                rect
            )));
        }
        Ok(())
    }

    /// Every region non-empty, inside the texture, and disjoint from the others.
    pub fn validate(&self, size: usize) -> Result<()> {
        for r in BodyRegion::ALL {
            self.check_region(r, size)?;
        }
        for (i, a) in BodyRegion::ALL.iter().enumerate() {
            for b in &BodyRegion::ALL[i + 1..] {
                let (p, q) = (self.region(*a), self.region(*b));
                if p.x0 < q.x1 && q.x0 < p.x1 && p.y0 < q.y1 && q.y0 < p.y1 {
                    return Err(Error::InvalidGeometry(format!("mask regions {} and {} overlap", a.name(), b.name())));
                }
            }
        }
        Ok(())
    }

    pub fn region(&self, r: BodyRegion) -> Rect {
        match r {
            BodyRegion::UpperBody => self.upper_body,
            BodyRegion::Arms => self.arms,
            BodyRegion::Legs => self.legs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    pub size: usize,
    /// Row-major entries in `{0, 1}`.
    pub pixels: Vec<f64>,
    pub regions: Vec<BodyRegion>,
}

impl BodyMask {
    pub fn from_regions(size: usize, layout: &MaskLayout, regions: &[BodyRegion]) -> Result<Self> {
        for r in regions {
            layout.check_region(*r, size)?;
        }
        let mut pixels = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                if regions.iter().any(|r| layout.region(*r).contains(x, y)) {
                    pixels[y * size + x] = 1.0;
                }
            }
        }
        let mut regions = regions.to_vec();
        regions.sort();
        regions.dedup();
        Ok(BodyMask { size, pixels, regions })
    }

    pub fn full(size: usize) -> Self {
        BodyMask {
            size,
            pixels: vec![1.0; size * size],
            regions: BodyRegion::ALL.to_vec(),
        }
    }

    pub fn label(&self) -> String {
        if self.regions.is_empty() {
            return "none".into();
        }
        self.regions.iter().map(|r| r.name()).collect::<Vec<_>>().join("+")
    }
}

/// A realized `H x W` texture map.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl TextureMap {
    pub fn constant(size: usize, value: f64) -> Self {
        TextureMap {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] if h == w => Ok(TextureMap {
                size: *h,
                pixels: t.data().to_vec(),
            }),
            s => Err(Error::shape("TextureMap::from_tensor", "[H, H]", format!("{s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.pixels.clone()).expect("texture shape")
    }

    /// Expands an `n x n` grid of values into `c x c` blocks.
    pub fn from_grid(grid: &[f64], n: usize, block: usize) -> Self {
        let size = n * block;
        let mut pixels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                pixels.push(grid[(y / block) * n + x / block]);
            }
        }
        TextureMap { size, pixels }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(self.size, self.size, self.pixels.clone()).expect("texture image")
    }
}

/// `u = sigmoid(z)`.
pub fn generate(tape: &mut Tape, z: Var) -> Var {
    tape.sigmoid(z)
}

pub fn binarize(tape: &mut Tape, u: Var, mode: Binarization) -> Result<Var> {
    match mode {
        Binarization::Hard => Ok(tape.ste_threshold(u)),
        Binarization::Soft { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
            }
            let centered = tape.shift(u, -0.5);
            let scaled = tape.scale(centered, 1.0 / temperature);
            Ok(tape.sigmoid(scaled))
        }
    }
}

pub fn upsample(tape: &mut Tape, binary: Var, block: usize) -> Result<Var> {
    tape.upsample(binary, block)
}

/// `M * U + (1 - M) * 1`.
pub fn apply_mask(tape: &mut Tape, texture: Var, mask: &BodyMask) -> Result<Var> {
    let shape = tape.value(texture).shape().to_vec();
    if shape != [mask.size, mask.size] {
        return Err(Error::shape("apply_mask", format!("[{0}, {0}]", mask.size), format!("{shape:?}")));
    }
    let m = tape.constant(Tensor::new(shape.clone(), mask.pixels.clone())?);
    let fill = tape.constant(Tensor::new(shape, mask.pixels.iter().map(|m| 1.0 - m).collect())?);
    let kept = tape.mul(m, texture)?;
    tape.add(kept, fill)
}

/// The full latent-to-masked-texture chain on a tape.
pub fn texture_from_latent(tape: &mut Tape, z: Var, mode: Binarization, block: usize, mask: &BodyMask) -> Result<Var> {
    let u = generate(tape, z);
    let ub = binarize(tape, u, mode)?;
    let up = upsample(tape, ub, block)?;
    apply_mask(tape, up, mask)
}

/// Hard-binarized, masked texture for a latent grid.
pub fn realize_texture(latent: &LatentGrid, geometry: TextureGeometry, mask: &BodyMask) -> Result<TextureMap> {
    if latent.n != geometry.grid {
        return Err(Error::shape("realize_texture", geometry.grid, latent.n));
    }
    let mut tape = Tape::new();
    let z = tape.constant(latent.to_tensor());
    let t = texture_from_latent(&mut tape, z, Binarization::Hard, geometry.block(), mask)?;
    TextureMap::from_tensor(tape.value(t))
}

/// Applies a mask to an already-realized texture.
pub fn mask_texture(texture: &TextureMap, mask: &BodyMask) -> Result<TextureMap> {
    let mut tape = Tape::new();
    let t = tape.constant(texture.to_tensor());
    let m = apply_mask(&mut tape, t, mask)?;
    TextureMap::from_tensor(tape.value(m))
}
