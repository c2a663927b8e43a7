//! Platform-independent demo state; `lib.rs` only adapts it to JavaScript.

use evtex_core::autodiff::{Tape, Tensor};
use evtex_core::detector::{decode, predict, DetectorParams};
use evtex_core::events::EventTensor;
use evtex_core::pipeline::{simulate, SceneSetup};
use evtex_core::render::{Background, Sensor, TrajectoryKind};
use evtex_core::scenarios::{ScaleClass, SceneSpec, Split};
use evtex_core::texture::{binarize, generate, Binarization, TextureGeometry, TextureMap};
use evtex_core::v2e::V2eConfig;
use evtex_core::viz::{draw_boxes, event_image};
use evtex_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SENSOR: usize = 64;
pub const GRID: usize = 10;
pub const TEXTURE: usize = 60;

pub struct Demo {
    setup: SceneSetup,
    texture: TextureMap,
    detector: Option<DetectorParams>,
    /// Detector input of the last simulated scene.
    input: Option<Tensor>,
    events: u64,
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

/// Grayscale `[0, 1]` pixels to canvas RGBA bytes.
pub fn to_rgba(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

impl Demo {
    pub fn new() -> Self {
        let geometry = TextureGeometry { grid: GRID, size: TEXTURE };
        let sensor = Sensor { width: SENSOR, height: SENSOR };
        Demo {
            setup: SceneSetup::standard(sensor, geometry, V2eConfig::default()),
            texture: TextureMap::constant(TEXTURE, 1.0),
            detector: None,
            input: None,
            events: 0,
        }
    }

    /// Samples a latent grid, binarizes it (hard when `temperature <= 0`) and
    /// makes the result the current texture.
    pub fn texture_preview(&mut self, seed: u64, temperature: f64, spread: f64) -> Result<&TextureMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-spread..=spread)).collect();
        let mode = if temperature > 0.0 { Binarization::Soft { temperature } } else { Binarization::Hard };
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new([GRID, GRID], z)?);
        let u = generate(&mut tape, zv);
        let b = binarize(&mut tape, u, mode)?;
        let grid = tape.value(b).data().to_vec();
        let block = self.setup.geometry.block();
        self.texture = TextureMap::from_grid(&grid, GRID, block);
        Ok(&self.texture)
    }

    pub fn texture(&self) -> &TextureMap {
        &self.texture
    }

    /// Renders the current texture along `trajectory` and returns the collapsed
    /// event image (positive white, negative black, none gray).
    pub fn simulate(&mut self, scene_seed: u64, trajectory: &str, stripes: bool) -> Result<Vec<f64>> {
        let spec = SceneSpec {
            id: 0,
            trajectory: trajectory.parse::<TrajectoryKind>()?,
            seed: scene_seed,
            background: if stripes { Background::stripes() } else { Background::default() },
            scale: ScaleClass::Medium,
            frames: 4,
            split: Split::Test,
        };
        let sample = simulate(&self.setup, Some(&self.texture), &spec, 0)?;
        let tensor = self.event_tensor(&sample.input)?;
        self.events = tensor.total();
        self.input = Some(sample.input);
        Ok(event_image(&tensor).pixels)
    }

    fn event_tensor(&self, input: &Tensor) -> Result<EventTensor> {
        let counts = input.data().iter().map(|&c| c as u32).collect();
        EventTensor::from_counts(counts, self.setup.v2e.bins, SENSOR, SENSOR)
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    /// Parses EVDT bytes; returns the parameter hash.
    pub fn load_detector(&mut self, bytes: &[u8]) -> Result<String> {
        let det = DetectorParams::from_bytes(bytes)?;
        if det.in_channels() != 2 * self.setup.v2e.bins {
            return Err(Error::Config(format!(
                "detector expects {} input channels, the demo produces {}",
                det.in_channels(),
                2 * self.setup.v2e.bins
            )));
        }
        let hash = det.hash();
        self.detector = Some(det);
        Ok(hash)
    }

    /// Detections on the last simulated scene as flat `[x0, y0, x1, y1, conf]`
    /// records, plus the event image with the boxes drawn.
    pub fn detect(&self, threshold: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let det = self
            .detector
            .as_ref()
            .ok_or_else(|| Error::Contract("load a detector first".into()))?;
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Contract("simulate a scene first".into()))?;
        let dets = decode(&predict(det, input)?, threshold);
        let flat = dets
            .iter()
            .flat_map(|d| [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.conf])
            .collect();
        let mut img = event_image(&self.event_tensor(input)?);
        draw_boxes(&mut img, &dets.iter().map(|d| d.bbox).collect::<Vec<_>>(), 1.0);
        Ok((flat, img.pixels))
    }
}
