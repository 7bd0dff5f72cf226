//! Image/mask datasets on disk, resampling, the synthetic lesion generator,
//! and the binary checkpoint container.

pub mod checkpoint;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use synth::{generate_synthetic, SynthParams};

/// Spatial size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl Size {
    pub const fn new(width: usize, height: usize) -> Self {
        Size { width, height }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Size {
    type Err = Error;

    /// Parses `WxH`, e.g. `64x64`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected WIDTHxHEIGHT, got `{s}`"));
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let width = w.trim().parse().map_err(|_| bad())?;
        let height = h.trim().parse().map_err(|_| bad())?;
        if width == 0 || height == 0 {
            return Err(bad());
        }
        Ok(Size { width, height })
    }
}

/// An RGB image in `[0, 1]` and its binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `(1, 3, H, W)`
    pub image: Tensor<f32>,
    /// `(1, 1, H, W)` with values in {0, 1}
    pub mask: Tensor<f32>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.n() != 1 || is.c() != 3 || ms != Shape::new(1, 1, is.h(), is.w()) {
            return Err(Error::shape(format!(
                "sample {id}: image {is} and mask {ms} do not form a (1,3,H,W)/(1,1,H,W) pair"
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("sample {id}: mask is not binary")));
        }
        Ok(SamplePair { id, image, mask })
    }

    pub fn size(&self) -> Size {
        Size::new(self.image.shape().w(), self.image.shape().h())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Resamples every `(H, W)` plane of `t` to `target` using half-pixel
/// centres. Returns an exact copy when the size already matches.
pub fn resize<T: Element>(t: &Tensor<T>, target: Size, interp: Interpolation) -> Result<Tensor<T>> {
    if target.width == 0 || target.height == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {target}")));
    }
    let [n, c, h, w] = t.shape().0;
    if (h, w) == (target.height, target.width) {
        return Ok(t.clone());
    }
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot resize empty tensor {}", t.shape())));
    }
    let (th, tw) = (target.height, target.width);
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in t.data().chunks(h * w) {
        match interp {
            Interpolation::Nearest => {
                let xs: Vec<usize> = (0..tw)
                    .map(|x| (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1))
                    .collect();
                for y in 0..th {
                    let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                    out.extend(xs.iter().map(|&ix| plane[iy * w + ix]));
                }
            }
            Interpolation::Bilinear => {
                for y in 0..th {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    for x in 0..tw {
                        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        out.push(T::from_f64(bilinear_at(plane, w, h, fx, fy)));
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, th, tw), out)
}

/// Bilinear sample of a `(h, w)` plane at real coordinates inside it.
pub(crate) fn bilinear_at<T: Element>(plane: &[T], w: usize, h: usize, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let p = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
    let top = p(y0, x0) * (1.0 - ax) + p(y0, x1) * ax;
    let bottom = p(y1, x0) * (1.0 - ax) + p(y1, x1) * ax;
    top * (1.0 - ay) + bottom * ay
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("sized above")
}

/// Binarizes at 128: pixels >= 128 are foreground.
pub fn mask_to_tensor(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec([1, 1, h, w], data).expect("sized above")
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First batch item of a `(N, 3, H, W)` tensor in `[0, 1]` as 8-bit RGB.
pub fn tensor_to_image(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape().h(), t.shape().w());
    let planes = [t.plane(0, 0), t.plane(0, 1), t.plane(0, 2)];
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(planes[0][i]), to_u8(planes[1][i]), to_u8(planes[2][i])])
    })
}

/// First channel of the first batch item, scaled by 255 and rounded.
pub fn tensor_to_gray(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = (t.shape().h(), t.shape().w());
    let plane = t.plane(0, 0);
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(plane[y as usize * w + x as usize])]))
}

pub fn save_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })
}

pub fn save_png_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_rgb8())
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_luma8())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads `images/<id>.png` + `masks/<id>.png` pairs, sorted by id, resized
/// to `size` (bilinear for images, nearest for masks).
pub fn load_dataset(dir: &Path, size: Size) -> Result<Vec<SamplePair>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    let orphan_images: Vec<&str> = images.keys().filter(|k| !masks.contains_key(*k)).map(String::as_str).collect();
    let orphan_masks: Vec<&str> = masks.keys().filter(|k| !images.contains_key(*k)).map(String::as_str).collect();
    if !orphan_images.is_empty() || !orphan_masks.is_empty() {
        return Err(Error::Dataset(format!(
            "unpaired files in {}: images without masks {orphan_images:?}, masks without images {orphan_masks:?}",
            dir.display()
        )));
    }
    if images.is_empty() {
        log::warn!("dataset {} is empty", dir.display());
        return Ok(Vec::new());
    }
    images
        .into_par_iter()
        .map(|(id, image_path)| {
            let image = image_to_tensor(&read_rgb(&image_path)?);
            let mask = mask_to_tensor(&read_gray(&masks[&id])?);
            if (image.shape().h(), image.shape().w()) != (mask.shape().h(), mask.shape().w()) {
                return Err(Error::Dataset(format!(
                    "{id}: image is {}x{} but mask is {}x{}",
                    image.shape().w(),
                    image.shape().h(),
                    mask.shape().w(),
                    mask.shape().h()
                )));
            }
            let image = resize(&image, size, Interpolation::Bilinear)?;
            let mask = resize(&mask, size, Interpolation::Nearest)?;
            SamplePair::new(id, image, mask)
        })
        .collect()
}

/// Writes the dataset layout read by [`load_dataset`].
pub fn save_dataset(dir: &Path, samples: &[SamplePair]) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    samples.par_iter().try_for_each(|s| {
        save_png_rgb(&dir.join("images").join(format!("{}.png", s.id)), &tensor_to_image(&s.image))?;
        save_png_gray(&dir.join("masks").join(format!("{}.png", s.id)), &tensor_to_gray(&s.mask))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upscale_repeats() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize(&t, Size::new(4, 1), Interpolation::Nearest).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::<f32>::from_vec([1, 2, 2, 3], (0..12).map(|v| v as f32 * 0.37).collect()).unwrap();
        assert_eq!(resize(&t, Size::new(3, 2), Interpolation::Bilinear).unwrap(), t);
    }

    #[test]
    fn nearest_keeps_masks_binary_and_bilinear_stays_in_range() {
        let bits: Vec<f32> = (0..35).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect();
        let t = Tensor::from_vec([1, 1, 5, 7], bits).unwrap();
        for size in [Size::new(3, 11), Size::new(16, 4), Size::new(1, 1)] {
            let r = resize(&t, size, Interpolation::Nearest).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let b = resize(&t, size, Interpolation::Bilinear).unwrap();
            assert!(b.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(resize(&t, Size::new(0, 4), Interpolation::Nearest).is_err());
    }

    #[test]
    fn size_parsing() {
        assert_eq!("64x48".parse::<Size>().unwrap(), Size::new(64, 48));
        assert!("64".parse::<Size>().is_err());
        assert!("0x4".parse::<Size>().is_err());
    }

    #[test]
    fn mask_binarization_threshold() {
        let img = GrayImage::from_raw(3, 1, vec![200, 100, 128]).unwrap();
        assert_eq!(mask_to_tensor(&img).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn dataset_round_trip_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), Size::new(8, 8)).unwrap().is_empty());

        let samples = generate_synthetic(&SynthParams::new(3, 5, Size::new(16, 16)));
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path(), Size::new(16, 16)).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
        let resized = load_dataset(dir.path(), Size::new(8, 4)).unwrap();
        assert_eq!(resized[0].mask.shape(), Shape::new(1, 1, 4, 8));

        fs::remove_file(dir.path().join("masks").join(format!("{}.png", samples[1].id))).unwrap();
        let err = load_dataset(dir.path(), Size::new(16, 16)).unwrap_err();
        assert!(err.to_string().contains(&samples[1].id), "{err}");
    }
}
