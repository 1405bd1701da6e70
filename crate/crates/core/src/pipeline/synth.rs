//! Synthetic ambiguity benchmark: textured shapes on a background whose
//! texture is pulled toward one of the class textures by `delta`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::Image;
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::refine::PseudoMask;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 4;
pub const LABELS_FILE: &str = "labels.json";
pub const SPEC_FILE: &str = "synth.json";

const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.85, 0.30, 0.20],
    [0.20, 0.40, 0.85],
    [0.25, 0.75, 0.30],
    [0.85, 0.75, 0.20],
];
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    pub num_classes: usize,
    /// 0 keeps the background texture distinct, 1 makes it a class texture.
    pub delta: f64,
    /// Stripe cycles across the canvas for the first class.
    pub base_frequency: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            num_classes: 2,
            delta: 0.6,
            base_frequency: 6.0,
            amplitude: 0.15,
            noise: 0.03,
            min_shapes: 1,
            max_shapes: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Param(format!("num_classes must be in 1..={MAX_CLASSES}")));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Param(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.size < 8 {
            return Err(Error::Param("canvas must be at least 8 pixels".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Param("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.noise < 0.0 || self.amplitude < 0.0 {
            return Err(Error::Param("noise and amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub color: [f64; 3],
    /// Cycles across the canvas.
    pub freq: f64,
    pub angle: f64,
    pub amp: f64,
}

impl Texture {
    pub fn lerp(&self, other: &Texture, t: f64) -> Texture {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        Texture {
            color: [0, 1, 2].map(|c| mix(self.color[c], other.color[c])),
            freq: mix(self.freq, other.freq),
            angle: mix(self.angle, other.angle),
            amp: mix(self.amp, other.amp),
        }
    }

    fn shade(&self, x: f64, y: f64, size: f64, phase: f64) -> [f64; 3] {
        let s = (2.0 * PI * self.freq * (x * self.angle.cos() + y * self.angle.sin()) / size + phase).sin();
        self.color.map(|c| c + self.amp * s)
    }
}

pub fn class_texture(spec: &SyntheticSpec, class: usize) -> Texture {
    Texture {
        color: PALETTE[class],
        freq: spec.base_frequency * (1.0 + 0.5 * class as f64),
        angle: PI / 4.0 + class as f64 * PI / 2.5,
        amp: spec.amplitude,
    }
}

pub fn background_texture(spec: &SyntheticSpec) -> Texture {
    Texture {
        color: BACKGROUND,
        freq: spec.base_frequency * 0.4,
        angle: 0.0,
        amp: spec.amplitude * 0.5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub gt: PseudoMask,
    pub labels: Vec<bool>,
    /// Class (0-based) whose texture the background leans toward.
    pub background_class: usize,
}

/// One sample, fully determined by `spec.seed` and `index`.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
    let size = spec.size;
    let sf = size as f64;
    let mut gt = vec![0u8; size * size];
    let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..shapes {
        let class = rng.random_range(0..spec.num_classes) as u8 + 1;
        let (cy, cx) = (rng.random_range(0.25..0.75) * sf, rng.random_range(0.25..0.75) * sf);
        let (ry, rx) = (rng.random_range(0.12..0.25) * sf, rng.random_range(0.12..0.25) * sf);
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    gt[y * size + x] = class;
                }
            }
        }
    }
    let background_class = rng.random_range(0..spec.num_classes);
    let bg = background_texture(spec).lerp(&class_texture(spec, background_class), spec.delta);
    let textures: Vec<Texture> = (0..spec.num_classes).map(|c| class_texture(spec, c)).collect();
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Param(e.to_string()))?;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let label = gt[y * size + x];
            let tex = if label == 0 { &bg } else { &textures[label as usize - 1] };
            for v in tex.shade(x as f64, y as f64, sf, phase) {
                let v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut labels = vec![false; spec.num_classes];
    for &l in &gt {
        if l > 0 {
            labels[l as usize - 1] = true;
        }
    }
    Ok(SyntheticSample {
        image: Image::new(size, size, 3, data)?,
        gt: PseudoMask::new(size, size, gt)?,
        labels,
        background_class,
    })
}

pub fn stem(index: usize) -> String {
    format!("{index:05}")
}

/// Write `count` samples under `dir` as `images/*.ppm`, `gt/*.pgm`,
/// `labels.json` and the generating spec.
pub fn synth_generate(spec: &SyntheticSpec, count: usize, dir: &Path) -> Result<()> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Param("count must be at least 1".into()));
    }
    let mut labels = BTreeMap::new();
    for i in 0..count {
        let s = generate_sample(spec, i as u64)?;
        let name = stem(i);
        s.image.write(&dir.join("images").join(format!("{name}.ppm")))?;
        Image::gray(&s.gt).write(&dir.join("gt").join(format!("{name}.pgm")))?;
        labels.insert(name, s.labels.iter().map(|&b| b as u8).collect::<Vec<u8>>());
    }
    write_json(&dir.join(LABELS_FILE), &labels)?;
    write_json(
        &dir.join(SPEC_FILE),
        &serde_json::json!({ "spec": spec, "count": count }),
    )
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    /// `[3 × H × W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
    pub gt: Option<PseudoMask>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load `labels.json`, the matching `images/*.ppm` and any `gt/*.pgm`.
    pub fn load(root: &Path) -> Result<Self> {
        let lpath = root.join(LABELS_FILE);
        let text = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let labels: BTreeMap<String, Vec<u8>> = serde_json::from_str(&text)?;
        let num_classes = labels.values().next().map(Vec::len).unwrap_or(0);
        let mut samples = Vec::with_capacity(labels.len());
        for (stem, vec) in labels {
            if vec.len() != num_classes {
                return Err(Error::Data(format!(
                    "{stem}: {} labels, expected {num_classes}",
                    vec.len()
                )));
            }
            let image = Image::read(&root.join("images").join(format!("{stem}.ppm")))?.to_tensor()?;
            let gpath = root.join("gt").join(format!("{stem}.pgm"));
            let gt = if gpath.exists() {
                let mask = Image::read(&gpath)?.to_mask()?;
                mask.check_classes(num_classes)?;
                Some(mask)
            } else {
                None
            };
            samples.push(Sample {
                stem,
                image,
                labels: vec.into_iter().map(|v| v != 0).collect(),
                gt,
            });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("{} lists no images", lpath.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            num_classes,
            samples,
        })
    }
}
