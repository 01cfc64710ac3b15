use super::{seed_layout, SuperpixelMap};
use crate::error::{invalid, Result};

/// Partitions the raster into `target` rectangular cells, row band by row
/// band. Used as the grid baseline in place of SLIC.
pub fn grid_partition(height: usize, width: usize, target: usize) -> Result<SuperpixelMap> {
    if target == 0 || target > height * width {
        return Err(invalid!(
            "grid of {target} cells on a {height}×{width} raster"
        ));
    }
    let rows = seed_layout(height, width, target);
    let mut labels = vec![0u32; height * width];
    let mut first_id = 0usize;
    for (r, &cols) in rows.iter().enumerate() {
        let y0 = r * height / rows.len();
        let y1 = (r + 1) * height / rows.len();
        for y in y0..y1 {
            for x in 0..width {
                let c = x * cols / width;
                labels[y * width + x] = (first_id + c) as u32;
            }
        }
        first_id += cols;
    }
    Ok(SuperpixelMap::from_parts_unchecked(height, width, labels, target))
}
