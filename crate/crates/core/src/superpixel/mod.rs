//! Over-segmentation of images into connected regions.

mod grid;
mod io;
mod slic;

pub use grid::grid_partition;
pub use io::{read_csv, read_png16, write_csv, write_png16};
pub use slic::{slic, SlicParams};

use std::collections::VecDeque;

use crate::error::{invalid, shape_err, Result};

/// Per-pixel region labels. Every pixel carries exactly one id in
/// `0..n_regions`, every id is used, and every region is 4-connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    labels: Vec<u32>,
    n_regions: usize,
    height: usize,
    width: usize,
}

impl SuperpixelMap {
    /// Validates all map invariants.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("superpixel map must be non-empty"));
        }
        if labels.len() != height * width {
            return Err(shape_err!(
                "{} labels for a {height}×{width} map",
                labels.len()
            ));
        }
        let n_regions = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let map = SuperpixelMap {
            labels,
            n_regions,
            height,
            width,
        };
        if let Some(unused) = map.region_sizes().iter().position(|&s| s == 0) {
            return Err(invalid!("region id {unused} is not used by any pixel"));
        }
        if let Some(region) = map.disconnected_region() {
            return Err(invalid!("region {region} is not 4-connected"));
        }
        Ok(map)
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        labels: Vec<u32>,
        n_regions: usize,
    ) -> Self {
        SuperpixelMap {
            labels,
            n_regions,
            height,
            width,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    /// Pixel count of every region, indexed by region id.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_regions];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Row-major flat pixel indices of every region.
    pub fn region_pixels(&self) -> Vec<Vec<usize>> {
        let mut pixels = vec![Vec::new(); self.n_regions];
        for (i, &l) in self.labels.iter().enumerate() {
            pixels[l as usize].push(i);
        }
        pixels
    }

    /// First region (by id) that is split into several 4-connected pieces.
    pub fn disconnected_region(&self) -> Option<usize> {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut visited_region = vec![false; self.n_regions];
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let region = self.labels[start] as usize;
            if visited_region[region] {
                return Some(region);
            }
            visited_region[region] = true;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for j in neighbors4(i, h, w) {
                    if !seen[j] && self.labels[j] as usize == region {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        None
    }
}

/// Flat indices of the 4-neighbours of `i` in an h×w raster.
#[inline]
pub(crate) fn neighbors4(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Row count and per-row cell counts for laying `target` cells on an h×w
/// raster in roughly square cells.
pub(crate) fn seed_layout(h: usize, w: usize, target: usize) -> Vec<usize> {
    let mut rows = ((target as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.min(target));
    loop {
        let per_row: Vec<usize> = (0..rows)
            .map(|r| target / rows + usize::from(r < target % rows))
            .collect();
        if per_row[0] <= w || rows == h.min(target) {
            return per_row;
        }
        rows += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_coverage_and_connectivity() {
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 0, 1, 1]).is_ok());
        // id 1 unused
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 0, 2, 2]).is_err());
        // diagonal pieces of region 0 are not 4-connected
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 1, 1, 0]).is_err());
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 0, 0]).is_err());
    }

    #[test]
    fn single_region_sizes() {
        let m = SuperpixelMap::from_labels(3, 5, vec![0; 15]).unwrap();
        assert_eq!(m.region_sizes(), vec![15]);
    }

    #[test]
    fn layout_hits_target() {
        for (h, w, k) in [(32, 32, 4), (16, 128, 4), (17, 33, 7), (5, 5, 25), (64, 64, 64), (3, 40, 50)] {
            let rows = seed_layout(h, w, k);
            assert_eq!(rows.iter().sum::<usize>(), k, "{h}×{w} k={k}");
            assert!(rows.len() <= h && rows.iter().all(|&r| r <= w && r > 0));
        }
    }
}
