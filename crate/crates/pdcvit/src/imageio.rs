//! Image decode/encode: PNG (8-bit RGB/gray) and binary PPM (P6). Decoded
//! images become [3, h, w] tensors scaled to [0, 1]; grayscale is promoted to
//! three channels by replication.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use pdcvit_core::Tensor;

use crate::error::{Error, Result};

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.into() }
}

pub fn is_supported_extension(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png") | Some("ppm")
    )
}

/// Decodes a PNG or PPM file into a [3, h, w] tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let (w, h, rgb) = match ext.as_str() {
        "png" => decode_png(path)?,
        "ppm" => decode_ppm(path)?,
        other => return Err(image_err(path, format!("unsupported extension '{other}'"))),
    };
    let mut data = vec![0.0f64; 3 * w * h];
    for c in 0..3 {
        for i in 0..w * h {
            data[c * w * h + i] = rgb[i * 3 + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

fn decode_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => pixels.to_vec(),
        png::ColorType::Rgba => pixels.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => pixels.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            pixels.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok((w, h, rgb))
}

/// Binary PPM (P6), maxval 255.
fn decode_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| image_err(path, e.to_string()))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(image_err(path, "not a binary ppm (P6)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| image_err(path, "bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| image_err(path, "bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| image_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(image_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(image_err(path, "truncated ppm pixel data"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Quantizes a [3, h, w] tensor in [0, 1] to interleaved 8-bit RGB.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected [3, h, w] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut rgb = vec![0u8; w * h * 3];
    for c in 0..3 {
        for i in 0..w * h {
            let v = t.data()[c * w * h + i].clamp(0.0, 1.0);
            rgb[i * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    Ok((w, h, rgb))
}

/// Writes a [3, h, w] tensor as PNG or PPM depending on the extension.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (w, h, rgb) = tensor_to_rgb8(t)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => save_png(path, w, h, &rgb),
        "ppm" => save_ppm(path, w, h, &rgb),
        other => Err(image_err(path, format!("unsupported extension '{other}'"))),
    }
}

fn save_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| image_err(path, e.to_string()))?;
    Ok(())
}

fn save_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut out = BufWriter::new(file);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_tensor(h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] =
                        ((c * 67 + y * 13 + x * 7) % 256) as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let t = gradient_tensor(9, 11);
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 9, 11]);
        // Values were exact multiples of 1/255, so the round trip is exact.
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn ppm_roundtrip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let t = gradient_tensor(5, 8);
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn grayscale_png_promotes_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 4, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0, 51, 102, 153, 204, 255, 10, 20]).unwrap();
        drop(w);
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), &[3, 2, 4]);
        let hw = 8;
        for i in 0..hw {
            assert_eq!(t.data()[i], t.data()[hw + i]);
            assert_eq!(t.data()[i], t.data()[2 * hw + i]);
        }
        assert_eq!(t.data()[1], 51.0 / 255.0);
    }

    #[test]
    fn undecodable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("junk.png"));
    }
}
