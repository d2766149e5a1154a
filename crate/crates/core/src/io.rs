//! Image files to and from `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat(format!("{} (expected .png or .ppm)", path.display()))),
    }
}

/// Decodes an 8- or 16-bit PNG or PPM. Grey and alpha inputs are expanded
/// or dropped to RGB.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic<T: Scalar>(img: &DynamicImage) -> Tensor<T> {
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    if sixteen {
        let rgb = img.to_rgb16();
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            T::lit(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0)
        })
    } else {
        let rgb = img.to_rgb8();
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            T::lit(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        })
    }
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Item 0 of `x` as an RGB image; values are clamped to `[0, 1]`.
pub fn to_dynamic<T: Scalar>(x: &Tensor<T>, depth: BitDepth) -> Result<DynamicImage> {
    let [n, c, h, w] = x.shape();
    if n == 0 || c != 3 {
        return Err(Error::shape("save_image", format!("expected [1, 3, H, W], got {:?}", x.shape())));
    }
    let px = |xx: u32, yy: u32, ci: usize| x.at([0, ci, yy as usize, xx as usize]).as_f64();
    Ok(match depth {
        BitDepth::Eight => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |xx, yy| {
            Rgb(std::array::from_fn(|ci| quantize(px(xx, yy, ci), 255.0) as u8))
        })),
        BitDepth::Sixteen => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |xx, yy| {
            Rgb(std::array::from_fn(|ci| quantize(px(xx, yy, ci), 65535.0) as u16))
        })),
    })
}

/// Encodes by extension (`.png`, `.ppm`).
pub fn save_image<T: Scalar>(x: &Tensor<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let img = to_dynamic(x, depth)?;
    img.save_with_format(path, format)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Image files with a supported extension in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && format_for(p).is_ok())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn([1, 3, 9, 13], |_| r.random());
        for (name, depth, bound) in [
            ("a.png", BitDepth::Eight, 1.0 / 510.0),
            ("a.ppm", BitDepth::Eight, 1.0 / 510.0),
            ("b.png", BitDepth::Sixteen, 1.0 / 131070.0),
            ("b.ppm", BitDepth::Sixteen, 1.0 / 131070.0),
        ] {
            let p = dir.path().join(name);
            save_image(&x, &p, depth).unwrap();
            let y = load_image::<f32>(&p).unwrap();
            assert_eq!(y.shape(), x.shape());
            let err = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            assert!(err <= bound + 1e-7, "{name}: {err}");
        }
    }

    #[test]
    fn grid_values_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::<f64>::from_fn([1, 3, 2, 2], |[_, c, y, xx]| ((c * 4 + y * 2 + xx) * 23 % 256) as f64 / 255.0);
        let p = dir.path().join("g.ppm");
        save_image(&x, &p, BitDepth::Eight).unwrap();
        let y = load_image::<f64>(&p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn extreme_bytes() {
        let img = DynamicImage::ImageRgb8(ImageBuffer::from_fn(2, 1, |x, _| {
            if x == 0 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        }));
        let t = from_dynamic::<f32>(&img);
        assert_eq!(t.at([0, 0, 0, 0]), 0.0);
        assert_eq!(t.at([0, 2, 0, 1]), 1.0);
    }

    #[test]
    fn structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image::<f32>(dir.path().join("x.jpg")),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(load_image::<f32>(dir.path().join("missing.png")), Err(Error::Io(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(load_image::<f32>(&bad), Err(Error::Image(_))));
        let gray = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(save_image(&gray, dir.path().join("g.png"), BitDepth::Eight).is_err());
    }
}
