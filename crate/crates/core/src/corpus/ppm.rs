//! Binary portable pixmap (P6, 8-bit) reading and writing, plus the bilinear
//! resize used at ingestion.
//!
//! The writer is canonical — `P6\n{w} {h}\n255\n` followed by raw interleaved
//! RGB — so generated corpora are bit-exact. The reader is tolerant: it
//! accepts `#` comments and any whitespace mix in the header, as produced by
//! other tools.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes a normalized value to one 8-bit channel sample.
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 x H x W` frame as a binary pixmap.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Canonical P6 encoding of a `3 x H x W` frame.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = image.shape();
    let [c, h, w] = shape else {
        return Err(Error::shape("encode_ppm", format!("expected 3xHxW, got {shape:?}")));
    };
    let (c, h, w) = (*c, *h, *w);
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let data = image.data();
    let plane = h * w;
    for i in 0..plane {
        out.push(to_u8(data[i]));
        out.push(to_u8(data[plane + i]));
        out.push(to_u8(data[2 * plane + i]));
    }
    Ok(out)
}

/// Reads one header token, skipping whitespace and `#` comments.
fn next_token<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *at < bytes.len() && bytes[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < bytes.len() && bytes[*at] == b'#' {
            while *at < bytes.len() && bytes[*at] != b'\n' {
                *at += 1;
            }
            continue;
        }
        break;
    }
    let start = *at;
    while *at < bytes.len() && !bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    if start == *at {
        return Err(Error::parse("ppm", "header ended early"));
    }
    Ok(&bytes[start..*at])
}

fn token_usize(bytes: &[u8], at: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, at)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::parse("ppm", format!("bad {what} field")))
}

/// Decodes a P6 pixmap into a `3 x H x W` frame with values in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut at = 0usize;
    if next_token(bytes, &mut at)? != b"P6" {
        return Err(Error::parse("ppm", "not a binary pixmap (missing P6 magic)"));
    }
    let w = token_usize(bytes, &mut at, "width")?;
    let h = token_usize(bytes, &mut at, "height")?;
    let maxval = token_usize(bytes, &mut at, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse("ppm", format!("unsupported maxval {maxval} (1-255 only)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::parse("ppm", "zero-sized image"));
    }
    at += 1; // exactly one whitespace byte separates header from raster
    let need = 3 * w * h;
    if bytes.len() < at + need {
        return Err(Error::parse(
            "ppm",
            format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(at)),
        ));
    }
    let raster = &bytes[at..at + need];
    let plane = w * h;
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        data[i] = raster[3 * i] as f32 * scale;
        data[plane + i] = raster[3 * i + 1] as f32 * scale;
        data[2 * plane + i] = raster[3 * i + 2] as f32 * scale;
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Parse { what: _, detail } => {
            Error::parse(format!("{}", path.display()), detail)
        }
        other => other,
    })
}

/// Bilinear resample of a `C x H x W` frame to `C x out_h x out_w`. Sample
/// positions are pixel centers, so an identity resize is exact.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let shape = src.shape();
    let [c, h, w] = shape else {
        return Err(Error::shape("resize", format!("expected CxHxW, got {shape:?}")));
    };
    let (c, h, w) = (*c, *h, *w);
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize", "target size must be positive"));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let data = src.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = (fy - y0 as f64) as f32;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = (fx - x0 as f64) as f32;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
