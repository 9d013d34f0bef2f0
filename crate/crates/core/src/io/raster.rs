//! Grayscale raster ingestion (PGM, PNG) and export (PGM, PFM).
//!
//! Images map linearly from [0, maxval] to [0, 1] and are resized to the
//! working size by area averaging; masks keep raw values as labels and are
//! resized by nearest neighbour.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::scalar::Scalar;
use crate::warp::DeformationField;

pub const WORKING_SIZE: usize = 64;

/// Raw grayscale samples of a raster file.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn format_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {detail}", path.display()))
}

/// Read an 8- or 16-bit grayscale PGM (binary P5 or ASCII P2) or PNG.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        read_png(path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        parse_pgm(&bytes).map_err(|d| format_err(path, d))
    } else {
        Err(format_err(path, "not a PGM or PNG file"))
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let binary = &bytes[..2] == b"P5";
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
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
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok().and_then(|s| s.parse().ok()).ok_or("malformed header")?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err("zero extent".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = width * height;
    let samples: Vec<u16> = if binary {
        pos += 1; // single whitespace after maxval
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let data = bytes.get(pos..pos + need).ok_or("truncated pixel data")?;
        if wide {
            data.chunks(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
        } else {
            data.iter().map(|&b| b as u16).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| "non-ASCII pixel data")?;
        let v: Vec<u16> = text.split_ascii_whitespace().take(n).map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| "bad sample")?;
        if v.len() != n {
            return Err("truncated pixel data".into());
        }
        v
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err("sample exceeds maxval".into());
    }
    Ok(Raster { width, height, maxval: maxval as u16, samples })
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(format_err(path, format!("unsupported color type {color:?} (grayscale only)")));
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let (maxval, samples) = match depth {
        png::BitDepth::Eight => (255, data.iter().map(|&b| b as u16).collect()),
        png::BitDepth::Sixteen => (65535, data.chunks(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()),
        other => return Err(format_err(path, format!("unsupported bit depth {other:?} (8 or 16 only)"))),
    };
    Ok(Raster { width, height, maxval, samples })
}

/// Area-average resampling of a row-major grid to `out_h` x `out_w`.
pub fn resize_area(data: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    // Overlap weights of output cells with input cells along one axis.
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                (lo.floor() as usize..(hi.ceil() as usize).min(n_in))
                    .map(|i| (i, (hi.min((i + 1) as f64) - lo.max(i as f64)) / scale))
                    .filter(|&(_, wt)| wt > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(h, out_h), weights(w, out_w));
    let mut out = vec![0.0; out_h * out_w];
    for (r, ry) in wy.iter().enumerate() {
        for (c, cx) in wx.iter().enumerate() {
            out[r * out_w + c] = ry.iter().flat_map(|&(y, a)| cx.iter().map(move |&(x, b)| data[y * w + x] * a * b)).sum();
        }
    }
    out
}

/// Load a grayscale image, map to [0, 1] and area-resize to 64 x 64.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let r = read_raster(path)?;
    let max = r.maxval as f64;
    let data: Vec<f64> = r.samples.iter().map(|&s| s as f64 / max).collect();
    let data = if (r.height, r.width) == (WORKING_SIZE, WORKING_SIZE) { data } else { resize_area(&data, r.height, r.width, WORKING_SIZE, WORKING_SIZE) };
    Image::new(WORKING_SIZE, WORKING_SIZE, data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Load a label mask; values must be below `num_classes`. Resized to 64 x 64 by nearest neighbour.
pub fn load_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let r = read_raster(path)?;
    if let Some(i) = r.samples.iter().position(|&s| s as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { value: r.samples[i] as u32, row: i / r.width, col: i % r.width, num_classes });
    }
    let labels: Vec<u8> = r.samples.iter().map(|&s| s as u8).collect();
    let mask = LabelMask::new(r.height, r.width, labels)?;
    Ok(resize_nearest(&mask, WORKING_SIZE, WORKING_SIZE))
}

/// Nearest-neighbour resampling of a label mask (sample at output cell centres).
pub fn resize_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> LabelMask {
    if (mask.height, mask.width) == (out_h, out_w) {
        return mask.clone();
    }
    let src = |o: usize, n_out: usize, n_in: usize| (((2 * o + 1) * n_in) / (2 * n_out)).min(n_in - 1);
    let labels = (0..out_h * out_w).map(|i| mask.at(src(i / out_w, out_h, mask.height), src(i % out_w, out_w, mask.width))).collect();
    LabelMask::new(out_h, out_w, labels).expect("extents")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pgm_bytes(width: usize, height: usize, samples: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(samples);
    out
}

/// Write an image as 8-bit binary PGM (values rounded from [0, 1]).
pub fn save_image_pgm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let px = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    write_file(path.as_ref(), &pgm_bytes(image.width, image.height, px))
}

/// Write a label mask as binary PGM holding the raw label bytes.
pub fn save_mask_pgm(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_file(path.as_ref(), &pgm_bytes(mask.width, mask.height, mask.labels.iter().copied()))
}

/// Write one channel of a field as a little-endian greyscale PFM (rows bottom to top).
pub fn save_pfm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for r in (0..height).rev() {
        for v in &values[r * width..(r + 1) * width] {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
    }
    write_file(path.as_ref(), &out)
}

/// Export batch item 0 of a field as `field_x.pfm` and `field_y.pfm` in `dir`.
pub fn save_field_pfm<T: Scalar>(dir: impl AsRef<Path>, field: &DeformationField<T>) -> Result<()> {
    let (_, h, w) = field.dims();
    let d = &field.tensor().data()[..h * w * 2];
    let chan = |k: usize| d.iter().skip(k).step_by(2).map(|v| v.to_f64c() as f32).collect::<Vec<_>>();
    save_pfm(dir.as_ref().join("field_x.pfm"), w, h, &chan(0))?;
    save_pfm(dir.as_ref().join("field_y.pfm"), w, h, &chan(1))
}
