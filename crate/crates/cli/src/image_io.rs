use std::io::Cursor;
use std::path::Path;

use gvtnet::model::checkpoint::write_atomic;
use gvtnet::{Error, Result, Tensor};
use image::{ImageFormat, RgbImage};

/// Reads an image as `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes `[3, H, W]` (clamped to `[0, 1]`) as 8-bit PNG bytes.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("encode_png", "image shape", "[3, H, W]", format!("{:?}", img.shape())));
    };
    let d = img.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Writes a PNG atomically; nothing appears at `path` on failure.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    write_atomic(path, &bytes)
}

/// `[C, H, W]` to `[1, C, H, W]`.
pub fn batched(img: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    img.clone().reshape(&shape).expect("same element count")
}

/// `[1, C, H, W]` to `[C, H, W]`.
pub fn unbatched(img: &Tensor) -> Tensor {
    img.clone().reshape(&img.shape()[1..]).expect("same element count")
}
