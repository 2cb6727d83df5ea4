//! Dataset ingestion, preprocessing, split management, and a synthetic
//! capsule-image benchmark for desk-scale runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::seed;

/// An input image with an optional ground-truth mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub x: Image,
    pub y: Option<Image>,
}

impl Sample {
    pub fn labeled(id: impl Into<String>, x: Image, y: Image) -> Sample {
        assert!(x.same_size(&y), "input and mask dimensions differ");
        Sample {
            id: id.into(),
            x,
            y: Some(y),
        }
    }

    pub fn unlabeled(id: impl Into<String>, x: Image) -> Sample {
        Sample {
            id: id.into(),
            x,
            y: None,
        }
    }

    fn strip_label(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            x: self.x.clone(),
            y: None,
        }
    }
}

/// The five dataset splits.
///
/// Overlap rules: test inputs appear nowhere else; labeled training inputs
/// may reappear (label-stripped) in the unlabeled training set, and labeled
/// validation inputs in the unlabeled validation set; labeled training
/// inputs never appear in the unlabeled validation set.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub s_tr: Vec<Sample>,
    pub s_val: Vec<Sample>,
    pub u_tr: Vec<Sample>,
    pub u_val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub n_s_tr: usize,
    pub n_s_val: usize,
    pub n_u_tr: usize,
    pub n_u_val: usize,
    pub n_test: usize,
}

/// Region indices for the 2x2 centroid grid: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub enum SplitMode {
    /// Shuffle, then assign; labeled sets are drawn from inside the
    /// corresponding unlabeled pools so the permitted overlaps hold.
    #[default]
    Iid,
    /// Partition by mask-centroid region to induce covariate shift: the test
    /// set comes from one region, labeled sets from another, unlabeled sets
    /// from the remaining two.
    CentroidRegion { test_region: u8, labeled_region: u8 },
}


impl DatasetBundle {
    /// Checks the overlap rules and that labeled splits carry masks.
    pub fn validate(&self) -> Result<()> {
        for s in self.s_tr.iter().chain(&self.s_val).chain(&self.test) {
            if s.y.is_none() {
                return Err(Error::Contract(format!(
                    "sample {} in a labeled split has no mask",
                    s.id
                )));
            }
        }
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        let test_ids = ids(&self.test);
        for s in self
            .s_tr
            .iter()
            .chain(&self.s_val)
            .chain(&self.u_tr)
            .chain(&self.u_val)
        {
            if test_ids.contains(&s.id) {
                return Err(Error::Contract(format!(
                    "test sample {} leaked into a training split",
                    s.id
                )));
            }
        }
        let u_val_ids = ids(&self.u_val);
        for s in &self.s_tr {
            if u_val_ids.contains(&s.id) {
                return Err(Error::Contract(format!(
                    "labeled training sample {} leaked into the unlabeled validation set",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Plain-text manifest: one `[section]` header per split, then one sample
    /// id per line.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (name, split) in [
            ("s_tr", &self.s_tr),
            ("s_val", &self.s_val),
            ("u_tr", &self.u_tr),
            ("u_val", &self.u_val),
            ("test", &self.test),
        ] {
            text.push_str(&format!("[{name}]\n"));
            for s in split.iter() {
                text.push_str(&s.id);
                text.push('\n');
            }
        }
        crate::pipeline::write_atomic(path, text.as_bytes())
    }
}

/// Pixelwise median of an image stack plus the background-suppressed images:
/// `|image - median|`, rescaled collection-wide to `[0,1]`.
pub fn suppress_background(images: &[Image]) -> Result<(Image, Vec<Image>)> {
    if images.len() < 3 {
        return Err(Error::Contract(format!(
            "background suppression needs at least 3 images, got {}",
            images.len()
        )));
    }
    let first = &images[0];
    for (i, img) in images.iter().enumerate() {
        if !img.same_size(first) {
            return Err(Error::Shape(format!(
                "image {i} is {}x{}, expected {}x{}",
                img.height(),
                img.width(),
                first.height(),
                first.width()
            )));
        }
    }
    let h = first.height();
    let w = first.width();
    let n = images.len();
    let mut column = vec![0.0f32; n];
    let mut background = Image::zeros(h, w);
    for idx in 0..h * w {
        for (j, img) in images.iter().enumerate() {
            column[j] = img.data()[idx];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite pixel values"));
        let median = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
        background.data_mut()[idx] = median;
    }

    let mut processed: Vec<Image> = images
        .iter()
        .map(|img| {
            Image::new(
                h,
                w,
                img.data()
                    .iter()
                    .zip(background.data())
                    .map(|(v, b)| (v - b).abs())
                    .collect(),
            )
        })
        .collect();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for img in &processed {
        for v in img.data() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if hi > lo {
        let scale = 1.0 / (hi - lo);
        for img in &mut processed {
            for v in img.data_mut() {
                *v = (*v - lo) * scale;
            }
        }
    } else {
        // All images identical to the background: everything maps to zero.
        for img in &mut processed {
            img.data_mut().fill(0.0);
        }
    }
    Ok((background, processed))
}

/// Rendering constants for the synthetic capsule benchmark: a bright contour
/// band over a faint interior on a dark background, plus pixel noise. The
/// object is strictly brighter than the background on average, which the
/// curriculum score relies on.
const CAPSULE_CONTOUR: f32 = 0.8;
const CAPSULE_INTERIOR: f32 = 0.15;
const CAPSULE_BACKGROUND: f32 = 0.02;
const CAPSULE_NOISE_SIGMA: f32 = 0.05;
const CAPSULE_CONTOUR_THICKNESS: usize = 2;

/// Generates `n` synthetic capsule samples of side `d` (divisible by 64):
/// distorted-ellipse masks rendered as contour-visible objects.
pub fn synth_capsule_dataset(n: usize, d: usize, master_seed: u64) -> Result<Vec<Sample>> {
    if !d.is_multiple_of(64) {
        return Err(Error::Contract(format!(
            "capsule side must be divisible by 64, got {d}"
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(master_seed, i as u64));
            let mask = crate::synthmask::sample_clean_mask(d, &mut rng, true)?;
            let interior = crate::synthmask::erode(&mask, CAPSULE_CONTOUR_THICKNESS);
            let noise = Normal::new(0.0f32, CAPSULE_NOISE_SIGMA).expect("fixed sigma");
            let mut x = Image::from_fn(d, d, |y, xx| {
                if mask.get(y, xx) == 0.0 {
                    CAPSULE_BACKGROUND
                } else if interior.get(y, xx) == 0.0 {
                    CAPSULE_CONTOUR
                } else {
                    CAPSULE_INTERIOR
                }
            });
            for v in x.data_mut() {
                *v += noise.sample(&mut rng);
            }
            x.clamp_unit();
            Ok(Sample::labeled(format!("capsule_{i:05}"), x, mask))
        })
        .collect()
}

fn centroid_region(sample: &Sample) -> Result<u8> {
    let y = sample.y.as_ref().ok_or_else(|| {
        Error::Contract(format!(
            "centroid split needs masks, sample {} has none",
            sample.id
        ))
    })?;
    let mut sy = 0.0f64;
    let mut sx = 0.0f64;
    let mut count = 0.0f64;
    for yy in 0..y.height() {
        for xx in 0..y.width() {
            if y.get(yy, xx) > 0.0 {
                sy += yy as f64;
                sx += xx as f64;
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::Contract(format!(
            "sample {} has an empty mask, centroid undefined",
            sample.id
        )));
    }
    let cy = sy / count;
    let cx = sx / count;
    let bottom = cy >= y.height() as f64 / 2.0;
    let right = cx >= y.width() as f64 / 2.0;
    Ok(match (bottom, right) {
        (false, false) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (true, true) => 3,
    })
}

/// Splits `samples` into the five sets.
///
/// In iid mode the unlabeled pools are drawn first and the labeled sets are
/// taken from inside them, so labeled training inputs reappear in the
/// unlabeled training set as the protocol expects.
pub fn split(
    samples: &[Sample],
    counts: &SplitCounts,
    mode: &SplitMode,
    split_seed: u64,
) -> Result<DatasetBundle> {
    if counts.n_s_tr > counts.n_u_tr || counts.n_s_val > counts.n_u_val {
        return Err(Error::Capacity(format!(
            "labeled counts ({}, {}) exceed unlabeled pools ({}, {})",
            counts.n_s_tr, counts.n_s_val, counts.n_u_tr, counts.n_u_val
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let bundle = match mode {
        SplitMode::Iid => {
            let needed = counts.n_test + counts.n_u_tr + counts.n_u_val;
            if needed > samples.len() {
                return Err(Error::Capacity(format!(
                    "split needs {needed} samples, only {} available",
                    samples.len()
                )));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let take = |range: std::ops::Range<usize>| {
                order[range]
                    .iter()
                    .map(|i| samples[*i].clone())
                    .collect::<Vec<_>>()
            };
            let test = take(0..counts.n_test);
            let u_tr_pool = take(counts.n_test..counts.n_test + counts.n_u_tr);
            let u_val_pool = take(
                counts.n_test + counts.n_u_tr..counts.n_test + counts.n_u_tr + counts.n_u_val,
            );
            build_bundle(counts, test, u_tr_pool, u_val_pool)?
        }
        SplitMode::CentroidRegion {
            test_region,
            labeled_region,
        } => {
            if test_region == labeled_region || *test_region > 3 || *labeled_region > 3 {
                return Err(Error::Contract(format!(
                    "centroid split needs two distinct regions in 0..4, got {test_region} and {labeled_region}"
                )));
            }
            let mut by_region: [Vec<Sample>; 4] = Default::default();
            for s in samples {
                by_region[centroid_region(s)? as usize].push(s.clone());
            }
            for r in &mut by_region {
                r.shuffle(&mut rng);
            }
            let mut test_pool = std::mem::take(&mut by_region[*test_region as usize]);
            let mut labeled_pool = std::mem::take(&mut by_region[*labeled_region as usize]);
            let mut unlabeled_pool: Vec<Sample> =
                by_region.into_iter().flatten().collect();
            unlabeled_pool.shuffle(&mut rng);
            if test_pool.len() < counts.n_test {
                return Err(Error::Capacity(format!(
                    "test region holds {} samples, need {}",
                    test_pool.len(),
                    counts.n_test
                )));
            }
            if labeled_pool.len() < counts.n_s_tr + counts.n_s_val {
                return Err(Error::Capacity(format!(
                    "labeled region holds {} samples, need {}",
                    labeled_pool.len(),
                    counts.n_s_tr + counts.n_s_val
                )));
            }
            if unlabeled_pool.len() < counts.n_u_tr + counts.n_u_val {
                return Err(Error::Capacity(format!(
                    "unlabeled regions hold {} samples, need {}",
                    unlabeled_pool.len(),
                    counts.n_u_tr + counts.n_u_val
                )));
            }
            test_pool.truncate(counts.n_test);
            let s_tr: Vec<Sample> = labeled_pool.drain(..counts.n_s_tr).collect();
            let s_val: Vec<Sample> = labeled_pool.drain(..counts.n_s_val).collect();
            let u_tr: Vec<Sample> = unlabeled_pool
                .drain(..counts.n_u_tr)
                .map(|s| s.strip_label())
                .collect();
            let u_val: Vec<Sample> = unlabeled_pool
                .drain(..counts.n_u_val)
                .map(|s| s.strip_label())
                .collect();
            DatasetBundle {
                s_tr,
                s_val,
                u_tr,
                u_val,
                test: test_pool,
            }
        }
    };
    bundle.validate()?;
    Ok(bundle)
}

fn build_bundle(
    counts: &SplitCounts,
    test: Vec<Sample>,
    u_tr_pool: Vec<Sample>,
    u_val_pool: Vec<Sample>,
) -> Result<DatasetBundle> {
    let need_label = |s: &Sample| {
        s.y.is_some().then_some(()).ok_or_else(|| {
            Error::Capacity(format!("sample {} lacks the mask a labeled split needs", s.id))
        })
    };
    let s_tr: Vec<Sample> = u_tr_pool[..counts.n_s_tr].to_vec();
    let s_val: Vec<Sample> = u_val_pool[..counts.n_s_val].to_vec();
    for s in s_tr.iter().chain(&s_val).chain(&test) {
        need_label(s)?;
    }
    Ok(DatasetBundle {
        s_tr,
        s_val,
        u_tr: u_tr_pool.iter().map(Sample::strip_label).collect(),
        u_val: u_val_pool.iter().map(Sample::strip_label).collect(),
        test,
    })
}

/// Pixelwise blend `x = y*o + (1-y)*b`: object pixels from `o`, the rest from
/// the background plate `b`.
pub fn composite_cell_image(y: &Image, object: &Image, background: &Image) -> Result<Image> {
    if !y.same_size(object) || !y.same_size(background) {
        return Err(Error::Shape(format!(
            "composite needs equal shapes, got {}x{}, {}x{}, {}x{}",
            y.height(),
            y.width(),
            object.height(),
            object.width(),
            background.height(),
            background.width()
        )));
    }
    Ok(Image::new(
        y.height(),
        y.width(),
        y.data()
            .iter()
            .zip(object.data())
            .zip(background.data())
            .map(|((m, o), b)| m * o + (1.0 - m) * b)
            .collect(),
    ))
}

/// Loads every image in `img_dir` (sorted by filename), paired with masks of
/// the same filename in `mask_dir` when given. Masks are binarized at 0.5.
pub fn load_directory(img_dir: &Path, mask_dir: Option<&Path>) -> Result<Vec<Sample>> {
    let mut entries: Vec<_> = std::fs::read_dir(img_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut samples = Vec::with_capacity(entries.len());
    for path in entries {
        let x = Image::load(&path)?;
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let y = match mask_dir {
            Some(dir) => {
                let mask_path = dir.join(&id);
                if mask_path.exists() {
                    Some(Image::load(&mask_path)?.binarize(0.5))
                } else {
                    None
                }
            }
            None => None,
        };
        samples.push(Sample { id, x, y });
    }
    if samples.is_empty() {
        return Err(Error::Capacity(format!(
            "no images found in {}",
            img_dir.display()
        )));
    }
    Ok(samples)
}
