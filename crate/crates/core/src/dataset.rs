//! Procedural toy images: four shapes in two palettes, eight classes.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_image, save_image};
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 4;
pub const NUM_PALETTES: usize = 2;
pub const NUM_CLASSES: usize = NUM_SHAPES * NUM_PALETTES;
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 64,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub size: usize,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    const ALL: [Shape; NUM_SHAPES] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.55 * (dy + r),
            Shape::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
        }
    }
}

/// `(background, foreground)` RGB per palette.
const PALETTES: [([f64; 3], [f64; 3]); NUM_PALETTES] = [
    ([0.15, 0.2, 0.45], [0.95, 0.6, 0.15]),
    ([0.85, 0.85, 0.75], [0.1, 0.55, 0.25]),
];

pub fn class_parts(label: usize) -> (Shape, usize) {
    (Shape::ALL[label / NUM_PALETTES], label % NUM_PALETTES)
}

/// Renders one image with 2×2 supersampled edges.
fn render(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (shape, palette) = class_parts(label);
    let s = size as f64;
    let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let r = s * rng.random_range(0.22..0.32);
    let (mut bg, fg) = PALETTES[palette];
    for c in &mut bg {
        *c += rng.random_range(-0.05..0.05);
    }
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if shape.contains(x as f64 + ox - cx, y as f64 + oy - cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let noise = rng.random_range(-0.02..0.02);
                let v = bg[c] + cover * (fg[c] - bg[c]) + noise;
                data[c * size * size + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("finite render")
}

/// Balanced classes (`label = index mod 8`); every fifth image is a test
/// image. Output depends only on the spec.
pub fn gen_toy_dataset(spec: &DatasetSpec) -> Result<ToyDataset> {
    if spec.count == 0 || spec.size < 8 {
        return Err(Error::InvalidArgument("dataset needs count >= 1 and size >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.count).map(|i| i % NUM_CLASSES).collect();
    let images = labels.iter().map(|&l| render(l, spec.size, &mut rng)).collect();
    let splits = (0..spec.count)
        .map(|i| if i % 5 == 4 { Split::Test } else { Split::Train })
        .collect();
    Ok(ToyDataset {
        size: spec.size,
        images,
        labels,
        splits,
    })
}

fn image_file(i: usize) -> String {
    format!("img_{i:05}.png")
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of images with the given label.
    pub fn of_class(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Writes one PNG per image and `labels.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("index,file,label,split\n");
        for (i, img) in self.images.iter().enumerate() {
            save_image(img, dir.join(image_file(i)))?;
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Test => "test",
            };
            writeln!(csv, "{i},{},{},{split}", image_file(i), self.labels[i]).expect("string write");
        }
        std::fs::write(dir.join(LABELS_FILE), csv)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(LABELS_FILE))?;
        let mut out = ToyDataset {
            size: 0,
            images: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{LABELS_FILE} line {}: '{line}'", n + 1));
            let [_, file, label, split] = fields[..] else {
                return Err(bad());
            };
            let img = load_image(dir.join(file), None)?;
            out.size = img.shape()[1];
            out.images.push(img);
            out.labels.push(label.parse().map_err(|_| bad())?);
            out.splits.push(match split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            });
        }
        if out.labels.iter().any(|&l| l >= NUM_CLASSES) {
            return Err(Error::Format(format!("label outside 0..{NUM_CLASSES}")));
        }
        Ok(out)
    }
}
