//! 8-bit PNG input and output.
//!
//! Pixel values map linearly between bytes and [0, 1] with no gamma
//! handling, so metrics computed on loaded images match metrics computed on
//! saved ones at 8-bit resolution. Grayscale files are expanded to RGB by
//! channel replication; alpha is dropped; higher bit depths are rejected.

use image::{DynamicImage, ImageReader};
use std::path::Path;

use surfelsplat_core::Image3;

use crate::DataError;

/// Writes `img` as an 8-bit RGB PNG, clamping values to [0, 1].
pub fn save_png(img: &Image3, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([q(c[0]), q(c[1]), q(c[2])]));
        }
    }
    out.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DataError::Io { path: path.into(), source },
        other => DataError::UnsupportedImage(other.to_string()),
    })
}

/// Loads an 8-bit PNG as floating-point RGB in [0, 1].
pub fn load_png(path: impl AsRef<Path>) -> Result<Image3, DataError> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(DataError::io(path))?;
    let decoded = reader
        .decode()
        .map_err(|e| DataError::UnsupportedImage(format!("{}: {e}", path.display())))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        DynamicImage::ImageLuma8(img) => DynamicImage::ImageLuma8(img).to_rgb8(),
        DynamicImage::ImageLumaA8(img) => DynamicImage::ImageLumaA8(img).to_rgb8(),
        other => {
            return Err(DataError::UnsupportedImage(format!(
                "{}: unsupported pixel format {:?} (expected 8-bit)",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image3::from_fn(w, h, |x, y| {
        let p = rgb.get_pixel(x as u32, y as u32);
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_image_survives_a_round_trip_at_8_bit_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image3::from_fn(17, 13, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.width, back.height), (17, 13));
        let mut worst: f64 = 0.0;
        for y in 0..13 {
            for x in 0..17 {
                for c in 0..3 {
                    worst = worst.max((back.get(x, y)[c] - img.get(x, y)[c]).abs());
                }
            }
        }
        // Quantization error only: half a step of 1/255.
        assert!(worst <= 0.5 / 255.0 + 1e-12, "worst {worst}");
    }

    #[test]
    fn quantized_values_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image3::from_fn(8, 8, |x, y| {
            [(x as f64 * 31.0 % 256.0) / 255.0, (y as f64 * 17.0 % 256.0) / 255.0, 0.0]
        });
        let path = dir.path().join("q.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image3::from_fn(2, 1, |x, _| if x == 0 { [-0.5; 3] } else { [1.7; 3] });
        let path = dir.path().join("c.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.get(0, 0), [0.0; 3]);
        assert_eq!(back.get(1, 0), [1.0; 3]);
    }

    #[test]
    fn grayscale_input_replicates_into_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let gray = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 40 + y * 10) as u8]));
        gray.save(&path).unwrap();
        let back = load_png(&path).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let v = (x * 40 + y * 10) as f64 / 255.0;
                assert_eq!(back.get(x, y), [v, v, v]);
            }
        }
    }

    #[test]
    fn sixteen_bit_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let deep = image::ImageBuffer::<image::Rgb<u16>, _>::from_fn(4, 4, |x, _| {
            image::Rgb([x as u16 * 9000, 0, 0])
        });
        deep.save(&path).unwrap();
        match load_png(&path).unwrap_err() {
            DataError::UnsupportedImage(msg) => assert!(msg.contains("8-bit"), "{msg}"),
            other => panic!("expected an unsupported-image error, got {other:?}"),
        }
    }

    #[test]
    fn missing_files_surface_the_path() {
        let err = load_png("/nonexistent/nowhere.png").unwrap_err();
        assert!(err.to_string().contains("nowhere.png"));
    }
}
