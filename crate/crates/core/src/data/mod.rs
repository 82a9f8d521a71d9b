//! Synthetic "organ" segmentation dataset: random non-overlapping ellipses,
//! one intensity band per class, additive Gaussian noise, stored as PGM.

mod pgm;

pub use pgm::{decode_pgm, encode_pgm, write_pgm, Gray8};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Share of cases assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Intensity bands must stay distinct after 8-bit quantization.
pub const MAX_CLASSES: usize = 16;
/// Smallest pixel count of a generated ellipse.
pub const MIN_ELLIPSE_PIXELS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub seed: u64,
    pub n_cases: usize,
    pub size: usize,
    pub n_classes: usize,
    pub noise_sigma: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            seed: 42,
            n_cases: 200,
            size: 96,
            n_classes: 4,
            noise_sigma: 0.08,
        }
    }
}

/// Field checks of [`GeneratorParams`], usable on their own to validate
/// one input value. Each returns a message naming the rule.
pub mod rules {
    use super::MAX_CLASSES;

    pub fn size(v: usize) -> Result<usize, String> {
        if v < 16 || !v.is_multiple_of(8) {
            return Err(format!(
                "size must be a multiple of 8 and at least 16, got {v}"
            ));
        }
        Ok(v)
    }

    pub fn classes(v: usize) -> Result<usize, String> {
        if !(2..=MAX_CLASSES).contains(&v) {
            return Err(format!("classes must be in 2..={MAX_CLASSES}, got {v}"));
        }
        Ok(v)
    }

    pub fn cases(v: usize) -> Result<usize, String> {
        if v < 2 {
            return Err(format!(
                "cases must be at least 2 so both splits are non-empty, got {v}"
            ));
        }
        Ok(v)
    }

    pub fn noise(v: f64) -> Result<f64, String> {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("noise must be finite and nonnegative, got {v}"));
        }
        Ok(v)
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        rules::size(self.size)
            .and(rules::classes(self.n_classes))
            .and(rules::cases(self.n_cases))
            .and(rules::noise(self.noise_sigma))
            .map(|_| ())
            .map_err(Error::Config)
    }

    /// Training cases for `n_cases`, at least one in each split.
    pub fn n_train(&self) -> usize {
        ((self.n_cases as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, self.n_cases - 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_classes: usize,
    /// `[height, width]` of every image.
    pub image_size: [usize; 2],
    pub splits: Splits,
    pub generator: Option<GeneratorParams>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if !(2..=256).contains(&self.n_classes) {
            return Err(Error::Data(format!(
                "n_classes {} out of range",
                self.n_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for id in self.splits.train.iter().chain(&self.splits.val) {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::Data(format!("invalid case id {id:?}")));
            }
            if !seen.insert(id) {
                return Err(Error::Data(format!(
                    "case {id} listed twice (splits must be disjoint)"
                )));
            }
        }
        Ok(())
    }
}

/// One grayscale image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// Intensities in `[0, 1]`, row-major.
    pub image: Vec<f32>,
    pub mask: Mask,
}

impl Case {
    pub fn height(&self) -> usize {
        self.mask.h
    }

    pub fn width(&self) -> usize {
        self.mask.w
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.pgm"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.pgm"))
}

/// Writes `images/<id>.pgm` and `masks/<id>.pgm` under `root`.
pub fn save_case(case: &Case, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let image = Gray8 {
        width: case.width(),
        height: case.height(),
        pixels: case.image.iter().map(|&v| quantize(v)).collect(),
    };
    let mask = Gray8 {
        width: case.width(),
        height: case.height(),
        pixels: case.mask.labels.clone(),
    };
    fs::write(image_path(root, &case.id), encode_pgm(&image))?;
    fs::write(mask_path(root, &case.id), encode_pgm(&mask))?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Gray8> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Loads one case. Image bytes are dequantized by `/255`; mask bytes are labels.
pub fn load_case(root: &Path, id: &str) -> Result<Case> {
    let image = read_pgm(&image_path(root, id))?;
    let mask = read_pgm(&mask_path(root, id))?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "case {id}: image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    Ok(Case {
        id: id.to_string(),
        image: image.pixels.iter().map(|&q| dequantize(q)).collect(),
        mask: Mask::new(mask.height, mask.width, mask.pixels)?,
    })
}

/// A dataset directory with both splits loaded and validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Data(format!("missing dataset manifest {}: {e}", path.display()))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        let load = |ids: &[String]| -> Result<Vec<Case>> {
            ids.iter()
                .map(|id| {
                    let case = load_case(root, id)?;
                    validate_case(&case, &manifest)?;
                    Ok(case)
                })
                .collect()
        };
        let train = load(&manifest.splits.train)?;
        let val = load(&manifest.splits.val)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }
}

fn validate_case(case: &Case, manifest: &DatasetManifest) -> Result<()> {
    let [h, w] = manifest.image_size;
    if (case.height(), case.width()) != (h, w) {
        return Err(Error::Data(format!(
            "case {}: size {}x{} differs from manifest {h}x{w}",
            case.id,
            case.height(),
            case.width()
        )));
    }
    if let Some(&bad) = case
        .mask
        .labels
        .iter()
        .find(|&&l| l as usize >= manifest.n_classes)
    {
        return Err(Error::Data(format!(
            "case {}: label {bad} is not below n_classes {}",
            case.id, manifest.n_classes
        )));
    }
    Ok(())
}

/// Stacks images into an `(n, 1, h, w)` tensor and concatenates their labels.
pub fn batch<T: Scalar>(items: &[(&[f32], &Mask)]) -> Result<(Tensor<T>, Vec<u8>)> {
    let (h, w) = items.first().map_or((0, 0), |(_, m)| (m.h, m.w));
    let mut data = Vec::with_capacity(items.len() * h * w);
    let mut labels = Vec::with_capacity(items.len() * h * w);
    for (img, mask) in items {
        if (mask.h, mask.w) != (h, w) || img.len() != h * w {
            return Err(Error::shape(
                "batch",
                &[h, w],
                &[mask.h, mask.w],
                "all cases in a batch must share one size",
            ));
        }
        data.extend(img.iter().map(|&v| T::lit(v as f64)));
        labels.extend_from_slice(&mask.labels);
    }
    Ok((Tensor::new([items.len(), 1, h, w], data)?, labels))
}

/// Intensity band `[lo, hi]` of a class: equal slices of `[0.1, 0.9]`, each
/// keeping only its middle half so neighbouring bands never touch.
pub fn intensity_band(class: usize, n_classes: usize) -> (f64, f64) {
    let width = 0.8 / n_classes as f64;
    let start = 0.1 + class as f64 * width;
    (start + 0.25 * width, start + 0.75 * width)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.gen_range(0.15 * s..0.85 * s),
            cx: rng.gen_range(0.15 * s..0.85 * s),
            a: rng.gen_range(0.08 * s..0.2 * s),
            b: rng.gen_range(0.08 * s..0.2 * s),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Tries to paint `class` as a new ellipse that keeps at least one pixel of
/// background between it and every earlier ellipse.
fn place<R: Rng + ?Sized>(labels: &mut [u8], size: usize, class: u8, rng: &mut R) -> bool {
    for _ in 0..200 {
        let e = Ellipse::random(size, rng);
        let pixels: Vec<usize> = (0..size * size)
            .filter(|&p| e.contains(p / size, p % size))
            .collect();
        if pixels.len() < MIN_ELLIPSE_PIXELS {
            continue;
        }
        let clear = pixels.iter().all(|&p| {
            let (y, x) = ((p / size) as isize, (p % size) as isize);
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny < 0
                        || nx < 0
                        || ny >= size as isize
                        || nx >= size as isize
                        || labels[ny as usize * size + nx as usize] == 0
                })
            })
        });
        if clear {
            for p in pixels {
                labels[p] = class;
            }
            return true;
        }
    }
    false
}

fn generate_case<R: Rng + ?Sized>(params: &GeneratorParams, index: usize, rng: &mut R) -> Case {
    let (size, k) = (params.size, params.n_classes);
    let n_fg = k - 1;
    // Cycling a required class through the cases guarantees every foreground
    // class appears once the split holds at least n_classes - 1 cases.
    let required = index % n_fg + 1;
    let mut others: Vec<usize> = (1..=n_fg).filter(|&c| c != required).collect();
    others.shuffle(rng);
    let count = rng.gen_range(1..=n_fg);
    let mut classes = vec![required];
    classes.extend_from_slice(&others[..count - 1]);

    let mut labels = vec![0u8; size * size];
    for &c in &classes {
        place(&mut labels, size, c as u8, rng);
    }
    let levels: Vec<f64> = (0..k)
        .map(|c| {
            let (lo, hi) = intensity_band(c, k);
            rng.gen_range(lo..=hi)
        })
        .collect();
    let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
    let image = labels
        .iter()
        .map(|&l| {
            let v = levels[l as usize]
                + if params.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
            dequantize(quantize(v as f32))
        })
        .collect();
    Case {
        id: format!("case_{index:04}"),
        image,
        mask: Mask {
            h: size,
            w: size,
            labels,
        },
    }
}

/// Generates every case in memory; fully determined by `params`.
pub fn generate_cases(params: &GeneratorParams) -> Result<Vec<Case>> {
    params.validate()?;
    let mut rng = stream(params.seed, Stream::Data);
    Ok((0..params.n_cases)
        .map(|i| generate_case(params, i, &mut rng))
        .collect())
}

/// Writes a generated dataset (images, masks, manifest) into `out`.
pub fn generate(params: &GeneratorParams, out: &Path) -> Result<DatasetManifest> {
    let cases = generate_cases(params)?;
    for case in &cases {
        save_case(case, out)?;
    }
    let ids: Vec<String> = cases.into_iter().map(|c| c.id).collect();
    let n_train = params.n_train();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n_classes: params.n_classes,
        image_size: [params.size, params.size],
        splits: Splits {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..].to_vec(),
        },
        generator: Some(params.clone()),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}
