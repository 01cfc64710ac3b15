use std::path::Path;

use image::{ImageBuffer, Luma};

use super::SuperpixelMap;
use crate::error::{invalid, Error, Result};

/// Writes region ids as a 16-bit grayscale PNG.
pub fn write_png16(map: &SuperpixelMap, path: &Path) -> Result<()> {
    if map.n_regions() > u16::MAX as usize + 1 {
        return Err(invalid!(
            "{} regions do not fit a 16-bit image",
            map.n_regions()
        ));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        map.width() as u32,
        map.height() as u32,
        map.labels().iter().map(|&l| l as u16).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn read_png16(path: &Path) -> Result<SuperpixelMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let labels = img.into_raw().into_iter().map(u32::from).collect();
    SuperpixelMap::from_labels(h as usize, w as usize, labels)
}

/// Writes one `row,col,region` record per pixel, row-major.
pub fn write_csv(map: &SuperpixelMap, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["row", "col", "region"])?;
    for row in 0..map.height() {
        for col in 0..map.width() {
            writer.serialize((row, col, map.label(row, col)))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<SuperpixelMap> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for rec in reader.deserialize() {
        let (row, col, region): (usize, usize, u32) = rec?;
        records.push((row, col, region));
    }
    let height = records.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let width = records.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if records.len() != height * width {
        return Err(invalid!(
            "{} records do not cover a {height}×{width} raster",
            records.len()
        ));
    }
    let mut labels = vec![u32::MAX; height * width];
    for (row, col, region) in records {
        labels[row * width + col] = region;
    }
    if labels.contains(&u32::MAX) {
        return Err(invalid!("duplicate pixel records"));
    }
    SuperpixelMap::from_labels(height, width, labels)
}
