//! Class-code export, class-code interpolation and image grids.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use kshot_tensor::{ParamStore, Tensor};

use crate::dataset::chw_to_image;
use crate::error::{Error, Result};
use crate::generator::Generator;

/// Write `label, code_0, ..` rows, one per image, with K = 1 class codes.
/// Returns the number of rows written.
pub fn export_class_codes<W: Write>(
    gen: &Generator,
    params: &ParamStore<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    out: W,
) -> Result<usize> {
    let n = images.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} images", labels.len())));
    }
    let dim = gen.cfg.class_code_dim;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|i| format!("code_{i}")));
    w.write_record(&header)?;
    const CHUNK: usize = 128;
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let codes = gen.class_codes(params, &images.narrow0(start, len)?)?;
        for (row, label) in codes.data().chunks(dim).zip(&labels[start..start + len]) {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        start += len;
    }
    w.flush()?;
    Ok(n)
}

/// Decode a fixed content code with `(1 - t) * code_a + t * code_b` for
/// `steps` evenly spaced `t` in `[0, 1]`.
pub fn interpolate_class_codes(
    gen: &Generator,
    params: &ParamStore<f32>,
    content: &Tensor<f32>,
    class_a: &Tensor<f32>,
    class_b: &Tensor<f32>,
    steps: usize,
) -> Result<Vec<Tensor<f32>>> {
    if steps < 2 {
        return Err(Error::config("interpolation needs at least two steps"));
    }
    let n = content.shape()[0];
    if class_a.shape()[0] != n || class_b.shape()[0] != n {
        return Err(Error::contract("one class image per content image required at each end"));
    }
    let zx = gen.content_codes(params, content)?;
    let za = gen.class_codes(params, class_a)?;
    let zb = gen.class_codes(params, class_b)?;
    (0..steps)
        .map(|i| {
            let t = i as f32 / (steps - 1) as f32;
            let z = za.lerp_with(1.0 - t, &zb, t)?;
            gen.decode_tensor(params, &zx, &z)
        })
        .collect()
}

/// Lay out rows of equally sized CHW images (values in `[-1,1]`) with a
/// one-pixel gutter and save as PNG.
pub fn write_grid(rows: &[Vec<&[f32]>], size: usize, path: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::contract("empty image grid"));
    }
    let cell = size as u32 + 1;
    let mut img = RgbImage::from_pixel(cols as u32 * cell + 1, rows.len() as u32 * cell + 1, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, values) in row.iter().enumerate() {
            let tile = chw_to_image(values, size);
            image::imageops::replace(&mut img, &tile, (c as u32 * cell + 1) as i64, (r as u32 * cell + 1) as i64);
        }
    }
    img.save(path)?;
    Ok(())
}

/// CHW slices of a `[N,3,H,W]` tensor.
pub fn images_of(t: &Tensor<f32>) -> Vec<&[f32]> {
    let n = t.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    t.data().chunks(t.numel() / n).collect()
}
