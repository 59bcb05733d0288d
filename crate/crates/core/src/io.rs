//! 8-bit PNG codec for [`ImageTensor`].
//!
//! A stored byte `b` maps to `v = 2b/255 − 1`; the inverse clamps to
//! `[-1, 1]` and rounds half up, so decode → encode is the identity on bytes.
//! Encoder settings are fixed, so equal images give equal files.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn byte_to_unit(b: u8) -> f32 {
    (2.0 * b as f64 / 255.0 - 1.0) as f32
}

pub fn unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { (v as f64).clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

fn codec_err(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

/// Encodes a 1- or 3-channel image as 8-bit grayscale or RGB.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Image(format!("cannot encode {c} channels"))),
    };
    let width = u32::try_from(image.width).map_err(codec_err)?;
    let height = u32::try_from(image.height).map_err(codec_err)?;
    let bytes: Vec<u8> = image.data.iter().map(|&v| unit_to_byte(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Paeth);
        let mut w = enc.write_header().map_err(codec_err)?;
        w.write_image_data(&bytes).map_err(codec_err)?;
        w.finish().map_err(codec_err)?;
    }
    Ok(out)
}

/// Decodes any PNG to a 3-channel image. Palettes and low bit depths are
/// expanded, 16-bit samples are truncated to 8 bits, alpha is dropped and
/// grayscale is replicated to three channels.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(codec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(codec_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Image("palette was not expanded".into())),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * src_channels];
        for px in row.chunks_exact(src_channels) {
            let rgb = if src_channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&b| byte_to_unit(b)));
        }
    }
    ImageTensor::new(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips_every_byte() {
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(5.0), 255);
        assert_eq!(unit_to_byte(f32::NAN), 0);
        // exactly halfway between bytes 127 and 128 rounds up
        assert_eq!(unit_to_byte(0.0), 128);
    }

    #[test]
    fn png_round_trip_is_exact_and_stable() {
        let data: Vec<f32> = (0..7 * 5 * 3).map(|i| byte_to_unit((i * 37 % 256) as u8)).collect();
        let img = ImageTensor::new(5, 7, 3, data).unwrap();
        let bytes = encode_png(&img).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_png(&back).unwrap(), bytes);
    }

    #[test]
    fn grayscale_expands_to_rgb() {
        let img = ImageTensor::new(2, 2, 1, vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.pixel(0, 1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_png(b"not a png").is_err());
        assert!(decode_png(&[]).is_err());
    }
}
