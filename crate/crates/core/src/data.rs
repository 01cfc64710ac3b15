//! Image/label-map datasets: PNG ingestion and a generated shapes benchmark.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub name: String,
    /// 3×H×W, values in [0, 1].
    pub image: Tensor<f64>,
    /// Row-major class per pixel.
    pub labels: Vec<usize>,
}

impl Item {
    pub fn image_as<T: Scalar>(&self) -> Tensor<T> {
        let values = self.image.values().iter().map(|&v| T::lit(v)).collect();
        Tensor::from_vec(self.image.shape(), values).expect("same shape")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    class_count: usize,
    ignore_label: Option<usize>,
}

impl Dataset {
    /// Validates that every label is a class or the ignore label and that
    /// all items share one size.
    pub fn new(items: Vec<Item>, class_count: usize, ignore_label: Option<usize>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Dataset("dataset has no items".into()));
        }
        if class_count == 0 {
            return Err(Error::Dataset("class count must be positive".into()));
        }
        let size = items[0].shape();
        for item in &items {
            let (c, h, w) = item.image.dims3()?;
            if c != 3 || (h, w) != size || item.labels.len() != h * w {
                return Err(Error::Dataset(format!(
                    "item `{}`: image {:?} and {} labels do not match the dataset size {size:?}",
                    item.name,
                    item.image.shape(),
                    item.labels.len()
                )));
            }
            if let Some(&bad) = item
                .labels
                .iter()
                .find(|&&l| l >= class_count && Some(l) != ignore_label)
            {
                return Err(Error::Dataset(format!(
                    "item `{}`: label {bad} is neither a class below {class_count} nor the ignore label",
                    item.name
                )));
            }
        }
        Ok(Dataset {
            items,
            class_count,
            ignore_label,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn ignore_label(&self) -> Option<usize> {
        self.ignore_label
    }

    /// (height, width) shared by all items.
    pub fn image_shape(&self) -> (usize, usize) {
        self.items[0].shape()
    }

    /// Loads a list file whose lines are `image.png label.png`, paths relative
    /// to the list file. Blank lines and `#` comments are skipped.
    pub fn load_list(
        list: &Path,
        class_count: usize,
        ignore_label: Option<usize>,
        resize_to: Option<(usize, usize)>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let root = list.parent().unwrap_or(Path::new("."));
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [img, lbl] = parts[..] else {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected `image.png label.png`",
                    list.display(),
                    n + 1
                )));
            };
            items.push(load_pair(&root.join(img), &root.join(lbl), resize_to)?);
        }
        Dataset::new(items, class_count, ignore_label)
    }

    /// Writes `NNNN.png` / `NNNN_label.png` pairs and a `list.txt` into `dir`.
    pub fn write_png(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut list = String::new();
        for item in &self.items {
            let (h, w) = item.shape();
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| {
                    let v = item.image.at3(c, y as usize, x as usize);
                    (v * 255.0).round().clamp(0.0, 255.0) as u8
                };
                Rgb([px(0), px(1), px(2)])
            });
            let lbl: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    Luma([item.labels[y as usize * w + x as usize] as u16])
                });
            let img_name = format!("{}.png", item.name);
            let lbl_name = format!("{}_label.png", item.name);
            img.save(dir.join(&img_name))?;
            lbl.save(dir.join(&lbl_name))?;
            list.push_str(&format!("{img_name} {lbl_name}\n"));
        }
        let path = dir.join("list.txt");
        std::fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn load_pair(image: &Path, labels: &Path, resize_to: Option<(usize, usize)>) -> Result<Item> {
    let mut rgb = image::open(image)?.to_rgb8();
    let lbl = image::open(labels)?;
    let mut lbl16: ImageBuffer<Luma<u16>, Vec<u16>> = match lbl {
        image::DynamicImage::ImageLuma8(g) => {
            ImageBuffer::from_fn(g.width(), g.height(), |x, y| Luma([g.get_pixel(x, y)[0] as u16]))
        }
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Dataset(format!(
                "{}: label maps must be 8- or 16-bit grayscale, found {:?}",
                labels.display(),
                other.color()
            )))
        }
    };
    if let Some((h, w)) = resize_to {
        if rgb.dimensions() != (w as u32, h as u32) {
            rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
        if lbl16.dimensions() != (w as u32, h as u32) {
            lbl16 = imageops::resize(&lbl16, w as u32, h as u32, FilterType::Nearest);
        }
    }
    if rgb.dimensions() != lbl16.dimensions() {
        return Err(Error::Dataset(format!(
            "{} is {:?} but {} is {:?}",
            image.display(),
            rgb.dimensions(),
            labels.display(),
            lbl16.dimensions()
        )));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut values = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            values[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    let name = image
        .file_stem()
        .map_or_else(|| "item".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Item {
        name,
        image: Tensor::from_vec(&[3, h, w], values)?,
        labels: lbl16.pixels().map(|p| p[0] as usize).collect(),
    })
}

/// Parameters of the generated shapes benchmark: class 0 is a textured
/// background, every other class is a shape family with its own colour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            count: 200,
            size: 64,
            classes: 3,
            seed: 1,
        }
    }
}

/// Base colours of the foreground classes (background excluded).
const NOISE: f64 = 0.03;

const SHAPE_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.3, 0.85],
    [0.95, 0.85, 0.1],
    [0.7, 0.2, 0.8],
];

pub fn synthetic_shapes(config: &ShapesConfig) -> Result<Dataset> {
    if !(2..=SHAPE_COLORS.len() + 1).contains(&config.classes) || config.size < 16 {
        return Err(Error::InvalidArgument(format!(
            "shapes need 2–{} classes and size ≥ 16",
            SHAPE_COLORS.len() + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let items = (0..config.count)
        .map(|i| shapes_item(&mut rng, config, format!("{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, config.classes, None)
}

fn shapes_item(rng: &mut ChaCha8Rng, config: &ShapesConfig, name: String) -> Result<Item> {
    let s = config.size;
    let sf = s as f64;
    let mut values = vec![0.0; 3 * s * s];
    let mut labels = vec![0usize; s * s];
    // Background: grey-green base, a low-frequency wave and pixel noise.
    let base = [0.45, 0.55, 0.4].map(|b: f64| b + rng.gen_range(-0.08..0.08));
    let (fy, fx, phase) = (
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..s {
        for x in 0..s {
            let wave = 0.08 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in 0..3 {
                values[(c * s + y) * s + x] = base[c] + wave + rng.gen_range(-NOISE..NOISE);
            }
        }
    }
    let n_shapes = rng.gen_range(1..=3);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..config.classes);
        let color = SHAPE_COLORS[class - 1].map(|v| v + rng.gen_range(-0.08..0.08));
        let r = rng.gen_range(0.12 * sf..0.25 * sf);
        let cy = rng.gen_range(r..sf - r);
        let cx = rng.gen_range(r..sf - r);
        let square = rng.gen_bool(0.5);
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if square {
                    dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85
                } else {
                    dy * dy + dx * dx <= r * r
                };
                if inside {
                    labels[y * s + x] = class;
                    for c in 0..3 {
                        values[(c * s + y) * s + x] = color[c] + rng.gen_range(-0.04..0.04);
                    }
                }
            }
        }
    }
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Item {
        name,
        image: Tensor::from_vec(&[3, s, s], values)?,
        labels,
    })
}

/// Separates a dataset into its first `n` items and the rest.
pub fn split(dataset: &Dataset, n: usize) -> Result<(Dataset, Dataset)> {
    let items = dataset.items();
    if n == 0 || n >= items.len() {
        return Err(Error::Dataset(format!(
            "cannot split {} items at {n}",
            items.len()
        )));
    }
    Ok((
        Dataset::new(items[..n].to_vec(), dataset.class_count, dataset.ignore_label)?,
        Dataset::new(items[n..].to_vec(), dataset.class_count, dataset.ignore_label)?,
    ))
}
