//! SLIC: k-means in joint colour + position space, restricted to a local
//! window around each centre, followed by a connectivity pass.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, VecDeque};

use super::{neighbors4, seed_layout, SuperpixelMap};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Colours in [0, 1] are stretched to this range before distances, the
/// range compactness values are usually quoted for.
pub const COLOR_RANGE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub target_regions: usize,
    /// Weight of spatial against colour distance (colours on a 0–100 scale).
    pub compactness: f64,
    pub max_iters: usize,
}

impl SlicParams {
    pub fn new(target_regions: usize) -> Self {
        SlicParams {
            target_regions,
            compactness: 10.0,
            max_iters: 10,
        }
    }
}

struct Center {
    color: [f64; 3],
    y: f64,
    x: f64,
}

/// Segments a C×H×W image (C ∈ {1, 3}, values in [0, 1]) into superpixels.
pub fn slic<T: Scalar>(image: &Tensor<T>, params: &SlicParams) -> Result<SuperpixelMap> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(shape_err!("SLIC needs 1 or 3 channels, got {c}"));
    }
    let k = params.target_regions;
    if k == 0 || k > h * w {
        return Err(invalid!(
            "target of {k} regions for a {h}×{w} image with {} pixels",
            h * w
        ));
    }
    let n = h * w;
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let mut px = [0.0; 3];
            for (ch, v) in px.iter_mut().enumerate().take(c) {
                *v = image.values()[ch * n + i].as_f64() * COLOR_RANGE;
            }
            px
        })
        .collect();

    let rows = seed_layout(h, w, k);
    let row_step = h as f64 / rows.len() as f64;
    let col_step = rows.iter().map(|&r| w as f64 / r as f64).fold(0.0, f64::max);
    let min_col_step = rows.iter().map(|&r| w as f64 / r as f64).fold(f64::INFINITY, f64::min);
    let step = ((n as f64) / k as f64).sqrt();
    let radius = row_step.max(col_step).ceil() as isize + 1;

    let grad = gradient_magnitude(&colors, h, w);
    let perturb = row_step.min(min_col_step) >= 3.0;
    let mut centers = Vec::with_capacity(k);
    for (r, &count) in rows.iter().enumerate() {
        let fy = (r as f64 + 0.5) * row_step - 0.5;
        let cs = w as f64 / count as f64;
        for j in 0..count {
            let fx = (j as f64 + 0.5) * cs - 0.5;
            let (py, px) = ((fy.round() as usize).min(h - 1), (fx.round() as usize).min(w - 1));
            let moved = if perturb {
                lowest_gradient(&grad, h, w, py, px)
            } else {
                (py, px)
            };
            let (y, x) = if moved == (py, px) {
                (fy, fx)
            } else {
                (moved.0 as f64, moved.1 as f64)
            };
            centers.push(Center {
                color: colors[moved.0 * w + moved.1],
                y,
                x,
            });
        }
    }

    let spatial_weight = (params.compactness / step).powi(2);
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.max_iters.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, center) in centers.iter().enumerate() {
            let cy = center.y.round() as isize;
            let cx = center.x.round() as isize;
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                let dy = y as f64 - center.y;
                for x in x0..=x1 {
                    let i = y * w + x;
                    let dx = x as f64 - center.x;
                    let px = &colors[i];
                    let dc = (px[0] - center.color[0]).powi(2)
                        + (px[1] - center.color[1]).powi(2)
                        + (px[2] - center.color[2]).powi(2);
                    let d = dc + (dy * dy + dx * dx) * spatial_weight;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let s = &mut sums[l as usize];
            s[0] += colors[i][0];
            s[1] += colors[i][1];
            s[2] += colors[i][2];
            s[3] += (i / w) as f64;
            s[4] += (i % w) as f64;
            s[5] += 1.0;
        }
        for (center, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                center.color = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                center.y = s[3] / s[5];
                center.x = s[4] / s[5];
            }
        }
    }
    // Pixels no window ever reached join their nearest labelled neighbour.
    fill_unlabelled(&mut labels, h, w);

    Ok(enforce_connectivity(&labels, h, w))
}

fn gradient_magnitude(colors: &[[f64; 3]], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| &colors[y * w + x];
    let mut grad = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (l, r) = (at(y, x.saturating_sub(1)), at(y, (x + 1).min(w - 1)));
            let (u, d) = (at(y.saturating_sub(1), x), at((y + 1).min(h - 1), x));
            grad[y * w + x] = (0..3)
                .map(|c| (r[c] - l[c]).powi(2) + (d[c] - u[c]).powi(2))
                .sum();
        }
    }
    grad
}

/// Moves a seed within its 3×3 neighbourhood to the lowest-gradient pixel.
/// The seed stays put unless a neighbour is strictly lower.
fn lowest_gradient(grad: &[f64], h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
    let mut best = (y, x);
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            if grad[ny * w + nx] < grad[best.0 * w + best.1] {
                best = (ny, nx);
            }
        }
    }
    best
}

fn fill_unlabelled(labels: &mut [u32], h: usize, w: usize) {
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| labels[i] != u32::MAX).collect();
    while let Some(i) = queue.pop_front() {
        for j in neighbors4(i, h, w) {
            if labels[j] == u32::MAX {
                labels[j] = labels[i];
                queue.push_back(j);
            }
        }
    }
}

/// Splits clusters into 4-connected components. The largest component of
/// each cluster becomes a region; every other component is an orphan and is
/// folded into its largest adjacent group, smallest orphan first.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize) -> SuperpixelMap {
    let n = h * w;
    let mut component = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut cluster_of = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        component[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            for j in neighbors4(i, h, w) {
                if component[j] == usize::MAX && labels[j] == labels[start] {
                    component[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
        cluster_of.push(labels[start]);
    }

    let count = sizes.len();
    let mut largest: HashMap<u32, usize> = HashMap::new();
    for c in 0..count {
        let e = largest.entry(cluster_of[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    let mut anchored = vec![false; count];
    for &c in largest.values() {
        anchored[c] = true;
    }

    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for i in 0..n {
        for j in neighbors4(i, h, w) {
            let (a, b) = (component[i], component[j]);
            if a != b {
                adjacency[a].insert(b);
            }
        }
    }

    let mut parent: Vec<usize> = (0..count).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let mut orphans: Vec<usize> = (0..count).filter(|&c| !anchored[c]).collect();
    orphans.sort_by_key(|&c| (sizes[c], c));
    loop {
        let mut changed = false;
        for &c in &orphans {
            let root = find(&mut parent, c);
            if anchored[root] {
                continue;
            }
            let neighbours: Vec<usize> = adjacency[root].iter().copied().collect();
            let mut best: Option<usize> = None;
            for nb in neighbours {
                let r = find(&mut parent, nb);
                if r == root {
                    continue;
                }
                best = match best {
                    Some(b) if (sizes[b], Reverse(b)) >= (sizes[r], Reverse(r)) => Some(b),
                    _ => Some(r),
                };
            }
            let Some(target) = best else { continue };
            parent[root] = target;
            sizes[target] += sizes[root];
            let absorbed = std::mem::take(&mut adjacency[root]);
            adjacency[target].extend(absorbed);
            changed = true;
        }
        if !changed {
            break;
        }
    }

    let mut region_of_root = vec![u32::MAX; count];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for i in 0..n {
        let r = find(&mut parent, component[i]);
        if region_of_root[r] == u32::MAX {
            region_of_root[r] = next;
            next += 1;
        }
        out[i] = region_of_root[r];
    }
    SuperpixelMap::from_parts_unchecked(h, w, out, next as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::filled(&[3, h, w], v)
    }

    #[test]
    fn uniform_image_gives_grid_cells() {
        let map = slic(&uniform(32, 32, 0.4), &SlicParams::new(4)).unwrap();
        assert_eq!(map.n_regions(), 4);
        // Voronoi cells of the quadrant seeds are the quadrants themselves.
        assert_eq!(map.region_sizes(), vec![256; 4]);
        assert_eq!(map.label(0, 0), map.label(15, 15));
        assert_ne!(map.label(0, 0), map.label(0, 16));
        assert_ne!(map.label(0, 0), map.label(16, 0));
    }

    #[test]
    fn one_region_per_pixel() {
        let img = Tensor::from_vec(&[1, 3, 4], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let map = slic(&img, &SlicParams::new(12)).unwrap();
        assert_eq!(map.n_regions(), 12);
        assert!(map.region_sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn rejects_bad_targets_and_channels() {
        assert!(slic(&uniform(4, 4, 0.0), &SlicParams::new(17)).is_err());
        assert!(slic(&uniform(4, 4, 0.0), &SlicParams::new(0)).is_err());
        assert!(slic(&Tensor::<f64>::zeros(&[2, 4, 4]), &SlicParams::new(2)).is_err());
    }

    #[test]
    fn connectivity_pass_merges_specks() {
        // Cluster 0 owns the top half plus a stray pixel inside cluster 2.
        let mut labels = vec![0u32; 36];
        for l in labels.iter_mut().skip(18) {
            *l = 2;
        }
        labels[6 * 4 + 3] = 0;
        labels[7] = 1;
        let map = enforce_connectivity(&labels, 6, 6);
        assert_eq!(map.n_regions(), 3);
        assert_eq!(map.label(4, 3), map.label(5, 5));
        assert_eq!(map.region_sizes().iter().sum::<usize>(), 36);
    }
}
