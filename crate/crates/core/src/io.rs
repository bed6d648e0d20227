//! File helpers shared by the dataset, trainer and evaluation outputs.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{dequantize_byte, quantize_byte};
use crate::denoiser::ImageLatent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value).as_bytes())
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::json(path, text, &e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    parse_json(path, &text)
}

/// Joins a manifest-relative path onto `root`, rejecting absolute paths and
/// any `..` or prefix component.
pub fn safe_join(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    let ok = !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if !ok {
        return Err(Error::PathEscape(rel.to_string()));
    }
    Ok(root.join(p))
}

/// 8-bit grayscale PNG bytes of a `[h, w]` image in `[-1, 1]`.
pub fn encode_png(img: &ImageLatent<f32>) -> Result<Vec<u8>> {
    encode_gray(
        img.shape(),
        &img.data()
            .iter()
            .map(|&x| quantize_byte(x))
            .collect::<Vec<_>>(),
    )
}

pub fn encode_gray(shape: &[usize], bytes: &[u8]) -> Result<Vec<u8>> {
    let &[h, w] = shape else {
        return Err(Error::shape("encode_png", format!("{shape:?}")));
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Png {
            path: PathBuf::new(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(bytes).map_err(png_err)?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageLatent<f32>) -> Result<()> {
    let bytes = encode_png(img).map_err(|e| with_path(e, path))?;
    write_bytes(path, &bytes)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Png { message, .. } => Error::Png {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

pub fn read_png(path: &Path) -> Result<ImageLatent<f32>> {
    let bytes = read_bytes(path)?;
    let bad = |message: String| Error::Png {
        path: path.to_path_buf(),
        message,
    };
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h].iter().map(|&b| dequantize_byte(b)).collect();
    Tensor::new(vec![h, w], data)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
