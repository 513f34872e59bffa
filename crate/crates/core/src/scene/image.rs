//! Image dumps: binary PPM (P6, the format of record) and PNG, 8 bits per
//! channel, plus decoding back to `[0, 1]` tensors.

use std::io::Cursor;
use std::path::Path;

use ::image::{ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn to_rgb(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(shape_err!("expected H×W×3 image, got {s:?}"));
    }
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).ok_or_else(|| shape_err!("image buffer size mismatch"))
}

fn encode(img: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    let rgb = to_rgb(img)?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, format).map_err(|e| Error::Render(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb(img)?;
    let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    out.extend_from_slice(rgb.as_raw());
    Ok(out)
}

pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    encode(img, ImageFormat::Png)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let rgb = ::image::load_from_memory(bytes)
        .map_err(|e| Error::Render(e.to_string()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Writes PPM or PNG depending on the file extension.
pub fn save(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(img)?,
        _ => encode_ppm(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_roundtrip() {
        let mut img = Tensor::zeros(&[2, 3, 3]);
        img.data_mut()[0] = 1.0;
        img.data_mut()[4] = 0.5;
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6"));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back.data()[4], 128.0 / 255.0);
        let png = encode_png(&img).unwrap();
        assert!(decode(&png).unwrap().bit_eq(&back));
    }
}
