//! The data-augmentation generator: equiprobable quarter-turn/flip
//! combinations applied with probability 0.5, plus one of four noise kinds
//! on supervised inputs.
//!
//! Geometric transforms are exact permutations of the pixel grid, so masks
//! stay binary and a transform composed with its inverse is a bitwise no-op.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::img::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Size of each renewed augmented set.
    pub output_set_size: usize,
    /// Probability that the sampled rotation/flip combination is applied.
    pub geometric_prob: f64,
    /// Fraction of pixels rewritten by salt-and-pepper noise.
    pub salt_pepper_fraction: f64,
    pub gaussian_sigma: f32,
    /// Half-width of the additive uniform noise interval.
    pub uniform_amplitude: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            output_set_size: 100,
            geometric_prob: 0.5,
            salt_pepper_fraction: 0.05,
            gaussian_sigma: 0.15,
            uniform_amplitude: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_set_size < 1 {
            return Err(Error::Contract(
                "augment output_set_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One of the eight rotation/flip combinations: `quarter_turns` clockwise
/// quarter turns followed by an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeomTransform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
}

impl GeomTransform {
    pub const COUNT: u8 = 8;

    pub const IDENTITY: GeomTransform = GeomTransform {
        quarter_turns: 0,
        flip_horizontal: false,
    };

    pub fn from_index(i: u8) -> GeomTransform {
        GeomTransform {
            quarter_turns: i % 4,
            flip_horizontal: i >= 4,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns == 0 && !self.flip_horizontal
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for _ in 0..self.quarter_turns {
            out = rotate90(&out);
        }
        if self.flip_horizontal {
            out = flip_h(&out);
        }
        out
    }

    pub fn inverse(&self) -> GeomTransform {
        // flip . rot^k inverted is rot^-k . flip; with flip . rot = rot^-1 . flip
        // this stays inside the same family.
        if self.flip_horizontal {
            *self
        } else {
            GeomTransform {
                quarter_turns: (4 - self.quarter_turns) % 4,
                flip_horizontal: false,
            }
        }
    }
}

/// Clockwise quarter turn: output (y, x) takes input (H-1-x, y).
fn rotate90(img: &Image) -> Image {
    let h = img.height();
    let w = img.width();
    Image::from_fn(w, h, |y, x| img.get(h - 1 - x, y))
}

fn flip_h(img: &Image) -> Image {
    let h = img.height();
    let w = img.width();
    Image::from_fn(h, w, |y, x| img.get(y, w - 1 - x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NoiseKind {
    None,
    SaltPepper,
    Gaussian,
    Uniform,
}

const NOISE_KINDS: [NoiseKind; 4] = [
    NoiseKind::None,
    NoiseKind::SaltPepper,
    NoiseKind::Gaussian,
    NoiseKind::Uniform,
];

fn apply_noise(img: &Image, kind: NoiseKind, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    match kind {
        NoiseKind::None => {}
        NoiseKind::SaltPepper => {
            let total = img.len();
            let count = (cfg.salt_pepper_fraction * total as f64).round() as usize;
            let picks = rand::seq::index::sample(rng, total, count.min(total));
            for idx in picks {
                out.data_mut()[idx] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
        NoiseKind::Gaussian => {
            let normal = Normal::new(0.0f32, cfg.gaussian_sigma).expect("sigma > 0");
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            out.clamp_unit();
        }
        NoiseKind::Uniform => {
            let amp = cfg.uniform_amplitude;
            for v in out.data_mut() {
                *v += rng.gen_range(-amp..amp);
            }
            out.clamp_unit();
        }
    }
    out
}

fn draw_geom(cfg: &AugmentConfig, rng: &mut impl Rng) -> GeomTransform {
    let combo = GeomTransform::from_index(rng.gen_range(0..GeomTransform::COUNT));
    if rng.gen_bool(cfg.geometric_prob) {
        combo
    } else {
        GeomTransform::IDENTITY
    }
}

/// One augmented pair: the geometric transform hits both image and mask, the
/// noise hits the image only.
fn augmented_pair(
    src: &Sample,
    tag: usize,
    geom: GeomTransform,
    noise: NoiseKind,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let y = src.y.as_ref().ok_or_else(|| {
        Error::Contract(format!("supervised augmentation needs masks ({})", src.id))
    })?;
    let gx = geom.apply(&src.x);
    let gy = geom.apply(y);
    let mut x = apply_noise(&gx, noise, cfg, rng);
    x.clamp_unit();
    Ok(Sample::labeled(format!("{}@aug{tag}", src.id), x, gy))
}

/// Draws `output_set_size` augmented pairs: a uniformly sampled source pair,
/// one geometric transform applied to both image and mask, and one noise
/// transform applied to the image only.
pub fn augment_supervised(
    source: &[Sample],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("augment_supervised needs sources".into()));
    }
    let mut out = Vec::with_capacity(cfg.output_set_size);
    for k in 0..cfg.output_set_size {
        let src = &source[rng.gen_range(0..source.len())];
        let geom = draw_geom(cfg, rng);
        let noise = NOISE_KINDS[rng.gen_range(0..NOISE_KINDS.len())];
        out.push(augmented_pair(src, k, geom, noise, cfg, rng)?);
    }
    Ok(out)
}

/// Geometric transforms only; no noise is injected on unlabeled images.
pub fn augment_unlabeled(
    source: &[Sample],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("augment_unlabeled needs sources".into()));
    }
    let mut out = Vec::with_capacity(cfg.output_set_size);
    for k in 0..cfg.output_set_size {
        let src = &source[rng.gen_range(0..source.len())];
        let geom = draw_geom(cfg, rng);
        out.push(Sample::unlabeled(
            format!("{}@aug{k}", src.id),
            geom.apply(&src.x),
        ));
    }
    Ok(out)
}
