use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads an 8-bit grayscale PNG.
///
/// Color, alpha, palette and 16-bit files are rejected rather than
/// converted, so no silent channel mixing or requantization happens.
pub fn load_image(path: &Path) -> Result<ImageField> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let hint = "convert to 8-bit grayscale first, e.g. `magick in.png -colorspace Gray -depth 8 out.png`";
    match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale, BitDepth::Eight) => {}
        (ColorType::Grayscale, BitDepth::Sixteen) => {
            return Err(unsupported(path, format!("16-bit images are not supported; {hint}")));
        }
        (ColorType::Grayscale, d) => {
            return Err(unsupported(path, format!("{d:?}-bit grayscale is not supported; {hint}")));
        }
        (c, _) => {
            return Err(unsupported(path, format!("{c:?} image is not single-channel; {hint}")));
        }
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| unsupported(path, "image too large"))?];
    let frame = reader.next_frame(&mut buf)?;
    let stride = frame.line_size;
    let values = Array2::from_shape_fn((h, w), |(i, j)| f64::from(buf[i * stride + j]));
    ImageField::new(values, Domain::Raw8Bit)
}

/// Writes an 8-bit grayscale PNG, rounding to the nearest level.
pub fn save_image(field: &ImageField, path: &Path) -> Result<()> {
    if field.domain() != Domain::Raw8Bit {
        return Err(Error::DomainMismatch {
            expected: Domain::Raw8Bit,
            found: field.domain(),
        });
    }
    let (h, w) = field.dim();
    let bytes: Vec<u8> = field.values().iter().map(|v| v.round() as u8).collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::rng_from_seed;
    use rand::Rng;

    fn write_raw(path: &Path, color: ColorType, depth: BitDepth, data: &[u8], w: u32, h: u32) {
        let mut enc = png::Encoder::new(File::create(path).unwrap(), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
    }

    #[test]
    fn integer_fields_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = rng_from_seed(1);
        let f = ImageField::new(
            Array2::from_shape_fn((13, 29), |_| f64::from(rng.random::<u8>())),
            Domain::Raw8Bit,
        )
        .unwrap();
        save_image(&f, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), f);
    }

    #[test]
    fn rejects_color_and_deep_images() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = dir.path().join("rgb.png");
        write_raw(&rgb, ColorType::Rgb, BitDepth::Eight, &[7; 8 * 8 * 3], 8, 8);
        let err = load_image(&rgb).unwrap_err();
        assert!(matches!(err, Error::UnsupportedImage { .. }));
        assert!(err.to_string().contains("grayscale"));
        let deep = dir.path().join("deep.png");
        write_raw(&deep, ColorType::Grayscale, BitDepth::Sixteen, &[0; 8 * 8 * 2], 8, 8);
        assert!(load_image(&deep).unwrap_err().to_string().contains("16-bit"));
    }

    #[test]
    fn rejects_missing_and_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(&dir.path().join("none.png")), Err(Error::Io(_))));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::PngDecode(_))));
    }

    #[test]
    fn save_requires_raw_scale() {
        let dir = tempfile::tempdir().unwrap();
        let n = ImageField::filled(8, 8, 0.0, Domain::Normalized).unwrap();
        assert!(save_image(&n, &dir.path().join("n.png")).is_err());
    }
}
