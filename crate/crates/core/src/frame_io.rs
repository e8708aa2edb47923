//! Frame files: 8-bit RGB PNG/PPM to and from `[3, H, W]` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(e: image::ImageError) -> Error {
    Error::Image(e.to_string())
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Rounds to 8 bits, clamping to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    t.expect_rank("tensor_to_image", 3)?;
    t.expect_axis("tensor_to_image", 0, "channels", 3)?;
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_mut(3).enumerate() {
        for (c, v) in px.iter_mut().enumerate() {
            let x = d[c * h * w + p];
            *v = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

/// Quantizes a frame to 8 bits and back, as a reader of the written file sees it.
pub fn quantize_frame(t: &Tensor) -> Result<Tensor> {
    Ok(image_to_tensor(&tensor_to_image(t)?))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(image_err)?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    tensor_to_image(t)?
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(image_err)?;
    Ok(out)
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

/// Writes PNG unless the extension is `.ppm`.
pub fn write_frame(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    tensor_to_image(t)?
        .save_with_format(path, fmt)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm")
    )
}

/// PNG/PPM files in `dir`, sorted by file name.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    out.sort();
    Ok(out)
}
