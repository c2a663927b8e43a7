//! Synthetic scene specifications, train/test splits and baseline textures.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Background, TrajectoryKind, SCALE_PRESETS};
use crate::texture::{TextureGeometry, TextureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    pub const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    pub fn factor(self) -> f64 {
        SCALE_PRESETS[self as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleClass::Small => "small",
            ScaleClass::Medium => "medium",
            ScaleClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Seeds with this bit set belong to the test split, all others to train.
const TEST_SEED_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: usize,
    pub trajectory: TrajectoryKind,
    pub seed: u64,
    pub background: Background,
    pub scale: ScaleClass,
    pub frames: usize,
    pub split: Split,
}

impl SceneSpec {
    /// Trajectory seed of the `replicate`-th pose-jittered instance of this scene.
    pub fn instance_seed(&self, replicate: u64) -> u64 {
        let mixed = self.seed ^ replicate.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        match self.split {
            Split::Train => mixed & !TEST_SEED_BIT,
            Split::Test => mixed | TEST_SEED_BIT,
        }
    }
}

pub fn generate_split(count_train: usize, count_test: usize, seed: u64, frames: usize) -> Result<Vec<SceneSpec>> {
    if count_train == 0 || count_test == 0 {
        return Err(Error::Contract(format!(
            "split counts must be at least 1, got {count_train} train / {count_test} test"
        )));
    }
    if frames < 2 {
        return Err(Error::Contract(format!("scenes need at least 2 frames, got {frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(count_train + count_test);
    for i in 0..count_train + count_test {
        let split = if i < count_train { Split::Train } else { Split::Test };
        let j = if split == Split::Train { i } else { i - count_train };
        let raw: u64 = rng.gen();
        let seed = match split {
            Split::Train => raw & !TEST_SEED_BIT,
            Split::Test => raw | TEST_SEED_BIT,
        };
        let background = if rng.gen_bool(0.25) { Background::stripes() } else { Background::default() };
        specs.push(SceneSpec {
            id: i,
            trajectory: TrajectoryKind::ALL[(j / 3) % 3],
            seed,
            background,
            scale: ScaleClass::ALL[j % 3],
            frames,
            split,
        });
    }
    Ok(specs)
}

pub fn split_manifest_csv(specs: &[SceneSpec]) -> String {
    let mut out = String::from("spec_id,preset,seed,scale,background,frames,split\n");
    for s in specs {
        let bg = match s.background {
            Background::Constant { .. } => "constant",
            Background::Stripes { .. } => "stripes",
        };
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.id, s.trajectory.name(), s.seed, s.scale.name(), bg, s.frames, split);
    }
    out
}

/// Fair-coin block texture.
pub fn random_texture(geometry: TextureGeometry, seed: u64) -> TextureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..geometry.grid * geometry.grid)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    TextureMap::from_grid(&grid, geometry.grid, geometry.block())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTextures {
    pub white: TextureMap,
    pub black: TextureMap,
    pub random: TextureMap,
}

pub fn baseline_textures(geometry: TextureGeometry, seed: u64) -> BaselineTextures {
    BaselineTextures {
        white: TextureMap::constant(geometry.size, 1.0),
        black: TextureMap::constant(geometry.size, 0.0),
        random: random_texture(geometry, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_counts_and_balance() {
        let specs = generate_split(47, 13, 1, 4).unwrap();
        assert_eq!(specs.len(), 60);
        let test: Vec<_> = specs.iter().filter(|s| s.split == Split::Test).collect();
        assert_eq!(test.len(), 13);
        let scales: HashSet<_> = test.iter().map(|s| s.scale).collect();
        assert_eq!(scales.len(), 3);
        assert_eq!(specs, generate_split(47, 13, 1, 4).unwrap());
        assert!(generate_split(0, 13, 1, 4).is_err());
    }

    #[test]
    fn seeds_are_disjoint_across_splits() {
        let specs = generate_split(47, 13, 9, 4).unwrap();
        let train: HashSet<u64> = specs
            .iter()
            .filter(|s| s.split == Split::Train)
            .flat_map(|s| (0..8).map(move |r| s.instance_seed(r)))
            .collect();
        for s in specs.iter().filter(|s| s.split == Split::Test) {
            for r in 0..8 {
                assert!(!train.contains(&s.instance_seed(r)));
            }
        }
    }

    #[test]
    fn baselines() {
        let g = TextureGeometry::new(10, 60).unwrap();
        let b = baseline_textures(g, 5);
        assert!(b.white.pixels.iter().all(|&v| v == 1.0));
        assert!(b.black.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(b.random, baseline_textures(g, 5).random);
        let c = g.block();
        for y in 0..60 {
            for x in 0..60 {
                let corner = b.random.pixels[(y / c * c) * 60 + x / c * c];
                assert_eq!(b.random.pixels[y * 60 + x], corner);
            }
        }
        let ones = b.random.pixels.iter().filter(|&&v| v == 1.0).count();
        assert!(ones > 900 && ones < 2700);
    }

    #[test]
    fn manifest_has_one_row_per_spec() {
        let specs = generate_split(4, 2, 3, 4).unwrap();
        let csv = split_manifest_csv(&specs);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(5).unwrap().ends_with(",test"));
    }
}
