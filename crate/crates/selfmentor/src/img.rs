//! Single-channel float images in `[0,1]` and their 8-bit grayscale file
//! form.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// An `H x W` grayscale image stored row-major. Masks are images whose values
/// are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Image {
        assert_eq!(data.len(), height * width, "image data length mismatch");
        Image {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Image {
        Image::new(height, width, vec![0.0; height * width])
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Image {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Image {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// View as a `1 x 1 x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
    }

    /// Rebuilds an image from a `1 x 1 x H x W` (or `H x W`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            other => {
                return Err(Error::Shape(format!(
                    "cannot view tensor of shape {other:?} as a single image"
                )))
            }
        };
        Ok(Image::new(h, w, t.data().clone()))
    }

    pub fn binarize(&self, threshold: f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| if *v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes an 8-bit grayscale PNG, rounding `[0,1]` values to `[0,255]`.
    /// The file appears atomically (temp file + rename).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut gray = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = (self.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                gray.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        let mut bytes = std::io::Cursor::new(Vec::new());
        gray.write_to(&mut bytes, ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
        crate::pipeline::write_atomic(path, &bytes.into_inner())
    }

    /// Loads any image the PNG decoder accepts, converted to grayscale with
    /// values scaled to `[0,1]`.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("cannot read image {}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        Ok(Image::new(h, w, data))
    }
}
