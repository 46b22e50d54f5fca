//! Browser demo. One synthetic walker at a time; the page asks for RGBA
//! frames of the silhouette, its dynamic difference map, and a block
//! activation heatmap from a small bundled checkpoint.

use gait_dynamics::checkpoint::Checkpoint;
use gait_dynamics::config::RunConfig;
use gait_dynamics::heatmap::{activation_heatmap, normalize_with_regions, region_heat, RegionSet};
use gait_dynamics::image_io::Gray;
use gait_dynamics::model::ModelParams;
use gait_dynamics::synth::{render_walker, Bag, BodyGeometry, WalkerSpec};
use gait_dynamics::train::params_from_checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Full desk model (both branches, 3 blocks) trained on seed-1 synthetic
/// data; regenerate with `gaitdyn train --config crates/core/configs/desk.cfg`.
static MODEL: &[u8] = include_bytes!("../assets/desk.dygt");

pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 44;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Bundled model configuration and parameters.
pub fn bundled_model() -> gait_dynamics::Result<(RunConfig, ModelParams<f32>)> {
    let ckpt = Checkpoint::from_bytes(MODEL)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    let params = params_from_checkpoint(&ckpt, &cfg.model)?;
    Ok((cfg, params))
}

#[wasm_bindgen]
pub struct Demo {
    frames: Vec<Gray>,
    dynamic: Vec<Vec<f64>>,
    model_frames: Vec<Gray>,
    regions: RegionSet,
    cfg: RunConfig,
    params: ModelParams<f32>,
}

#[wasm_bindgen]
impl Demo {
    /// Render a walker. `freq` is in cycles per frame, `amplitude` and
    /// `phase` in radians.
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        freq: f64,
        amplitude: f64,
        phase: f64,
        bag: bool,
        noise: f64,
        frames: usize,
        seed: u64,
    ) -> Result<Demo, JsError> {
        let geometry = BodyGeometry::default();
        let bag = bag.then(|| Bag {
            top: geometry.torso_center.0 as usize,
            left: (geometry.torso_center.1 + geometry.torso_axes.1 + 1.0) as usize,
            height: 8,
            width: 6,
        });
        let spec = WalkerSpec {
            arm_amplitude: 0.3,
            bag,
            noise,
            geometry,
            ..WalkerSpec::new(0, freq, phase, amplitude)
        };
        let (seq, labels) =
            render_walker(&spec, frames, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
        let dynamic = dynamic_difference(&seq.frames);
        let (cfg, params) = bundled_model().map_err(js_err)?;
        let (h, w) = cfg.model.input_size;
        let (model_frames, regions) =
            normalize_with_regions(&seq.frames, &labels.labels, h, w, cfg.normalize)
                .map_err(js_err)?;
        Ok(Demo {
            frames: seq.frames,
            dynamic,
            model_frames,
            regions,
            cfg,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        WIDTH
    }

    pub fn height(&self) -> usize {
        HEIGHT
    }

    pub fn model_width(&self) -> usize {
        self.cfg.model.input_size.1
    }

    pub fn model_height(&self) -> usize {
        self.cfg.model.input_size.0
    }

    /// Number of frames the model saw (frames with no foreground are dropped).
    pub fn model_len(&self) -> usize {
        self.model_frames.len()
    }

    pub fn blocks(&self) -> usize {
        self.cfg.model.num_blocks()
    }

    /// Silhouette frame `t` as RGBA.
    pub fn silhouette_rgba(&self, t: usize) -> Vec<u8> {
        self.frames[t % self.len()]
            .data
            .iter()
            .flat_map(|&v| {
                if v != 0 {
                    [240, 240, 240, 255]
                } else {
                    [20, 20, 28, 255]
                }
            })
            .collect()
    }

    /// Frame `t` minus the temporal mean: red where the body arrives,
    /// blue where it leaves, white where nothing moves.
    pub fn dynamic_rgba(&self, t: usize) -> Vec<u8> {
        self.dynamic[t % self.len()]
            .iter()
            .flat_map(|&d| diverging(d))
            .collect()
    }

    /// Heat of block `block` over the model-resolution silhouette, one RGBA
    /// image per input frame, concatenated.
    pub fn heatmap_rgba(&self, block: usize) -> Result<Vec<u8>, JsError> {
        let maps = self.heat(block)?;
        let mut out = Vec::with_capacity(maps.len() * maps[0].len() * 4);
        for (m, f) in maps.iter().zip(&self.model_frames) {
            for (&v, &s) in m.iter().zip(&f.data) {
                out.extend_from_slice(&inferno(v, s != 0));
            }
        }
        Ok(out)
    }

    /// `legs,bag` mean heat of block `block`; `NA` where the region is absent.
    pub fn region_summary(&self, block: usize) -> Result<String, JsError> {
        let maps = self.heat(block)?;
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
        Ok(format!(
            "{},{}",
            f(region_heat(&maps, &self.regions.legs)),
            f(region_heat(&maps, &self.regions.bag))
        ))
    }
}

impl Demo {
    fn heat(&self, block: usize) -> Result<Vec<Vec<f64>>, JsError> {
        let seq = gait_dynamics::preprocess::SilhouetteSequence {
            subject: String::new(),
            condition: String::new(),
            view: String::new(),
            frames: self.model_frames.clone(),
        };
        let x = seq.to_tensor::<f32>().map_err(js_err)?;
        activation_heatmap(&x, &self.params, &self.cfg.model, block).map_err(js_err)
    }
}

/// Per-pixel `frame - mean over frames`, in `[-1, 1]`.
pub fn dynamic_difference(frames: &[Gray]) -> Vec<Vec<f64>> {
    let n = frames.len() as f64;
    let px = frames.first().map_or(0, |f| f.data.len());
    let mean: Vec<f64> = (0..px)
        .map(|i| frames.iter().filter(|f| f.data[i] != 0).count() as f64 / n)
        .collect();
    frames
        .iter()
        .map(|f| {
            f.data
                .iter()
                .zip(&mean)
                .map(|(&v, &m)| (v != 0) as u8 as f64 - m)
                .collect()
        })
        .collect()
}

fn diverging(d: f64) -> [u8; 4] {
    let a = (d.abs().min(1.0) * 255.0) as u8;
    if d >= 0.0 {
        [255, 255 - a, 255 - a, 255]
    } else {
        [255 - a, 255 - a, 255, 255]
    }
}

/// Black-red-yellow ramp, dimmed off the silhouette.
fn inferno(v: f64, on: bool) -> [u8; 4] {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 2.0).min(1.0);
    let g = (v * 2.0 - 1.0).max(0.0);
    let b = (0.3 - v).max(0.0);
    let k = if on { 255.0 } else { 110.0 };
    [(r * k) as u8, (g * k) as u8, (b * k) as u8, 255]
}
