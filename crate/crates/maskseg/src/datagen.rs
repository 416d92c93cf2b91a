//! Deterministic synthetic road-scene generation (six known classes with a
//! things/stuff/road taxonomy) and cut-paste outlier synthesis with binary
//! OOD masks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mten::{self, MtenValue};
use crate::refinement::{Taxonomy, TaxonomyEntry};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 6] = ["road", "sky", "building", "vegetation", "car", "person"];
pub const ROAD: usize = 0;
pub const SKY: usize = 1;
pub const BUILDING: usize = 2;
pub const VEGETATION: usize = 3;
pub const CAR: usize = 4;
pub const PERSON: usize = 5;

/// Base RGB color per known class; textures add per-pixel noise on top.
/// All nine palette colors (classes + anomalies) sit on a sphere around
/// mid-gray, so every color is linearly separable from the rest with a
/// geometric margin well above the texture noise — a flat color patch can
/// never be confused for a mixture of the others.
pub const CLASS_PALETTE: [[f32; 3]; 6] = [
    [0.50, 0.50, 0.05], // road (dark olive)
    [0.50, 0.50, 0.95], // sky (blue)
    [0.95, 0.50, 0.50], // building (brick)
    [0.50, 0.95, 0.50], // vegetation (green)
    [0.05, 0.50, 0.50], // car (teal)
    [0.50, 0.05, 0.50], // person (purple)
];

/// Anomaly-object colors; every entry keeps at least `PALETTE_MIN_DIST`
/// distance to every known-class color.
pub const ANOMALY_PALETTE: [[f32; 3]; 3] = [
    [0.76, 0.76, 0.76], // light gray
    [0.76, 0.24, 0.24], // dark red
    [0.24, 0.24, 0.76], // dark blue
];

pub const PALETTE_MIN_DIST: f32 = 0.3;

const NOISE: f32 = 0.06;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub max_things: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 48,
            width: 64,
            num_classes: 6,
            max_things: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::config(format!(
                "scene size {}x{} must be divisible by 8",
                self.height, self.width
            )));
        }
        if self.num_classes != 6 {
            return Err(Error::config("the synthetic generator defines 6 classes"));
        }
        Ok(())
    }
}

/// One synthetic scene: RGB image, per-pixel class labels (−1 = void), and
/// the binary OOD mask (all zero for inlier scenes).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub labels: Vec<i32>,
    pub ood_mask: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub taxonomy: Vec<TaxonomyEntry>,
    pub scene_count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneSample>,
}

fn put_pixel(image: &mut Tensor, h: usize, w: usize, y: usize, x: usize, rgb: [f32; 3]) {
    for c in 0..3 {
        image.data_mut()[c * h * w + y * w + x] = rgb[c];
    }
}

fn textured(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (base[c] + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0);
    }
    out
}

/// Generate one inlier scene. Layout: sky band on top, a building band with
/// vegetation blobs, then the road band with 0..=max_things things.
pub fn gen_scene(seed: u64, config: &DataConfig) -> Result<SceneSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // All class geometry is snapped to the 2×2 grid so that region
    // boundaries stay representable at the model's finest (half) feature
    // resolution.
    let sky_end = (h / 5 + rng.gen_range(0..h / 10)) & !1;
    let building_end = (2 * h / 5 + rng.gen_range(0..h / 10)) & !1;
    let road_start = (11 * h / 20 + rng.gen_range(0..h / 12)) & !1;

    let mut image = Tensor::zeros(&[3, h, w]);
    let mut labels = vec![0i32; h * w];
    for y in 0..h {
        for x in 0..w {
            let class = if y < sky_end {
                SKY
            } else if y < building_end {
                BUILDING
            } else if y < road_start {
                VEGETATION
            } else {
                ROAD
            };
            labels[y * w + x] = class as i32;
            put_pixel(&mut image, h, w, y, x, textured(&mut rng, CLASS_PALETTE[class]));
        }
    }

    // Vegetation blobs poking into the building band, rasterized per 2×2
    // block (ellipse membership decided at block centers).
    let blobs = rng.gen_range(1..=3);
    for _ in 0..blobs {
        let cy = rng.gen_range(sky_end..road_start) as f64;
        let cx = rng.gen_range(0..w) as f64;
        let ry = rng.gen_range(2..=h / 8).max(2) as f64;
        let rx = rng.gen_range(2..=w / 8).max(2) as f64;
        for by in 0..h / 2 {
            for bx in 0..w / 2 {
                let dy = ((2 * by) as f64 + 0.5 - cy) / ry;
                let dx = ((2 * bx) as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx > 1.0 {
                    continue;
                }
                for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, x) = (2 * by + oy, 2 * bx + ox);
                    if y >= sky_end && y < road_start {
                        labels[y * w + x] = VEGETATION as i32;
                        put_pixel(
                            &mut image,
                            h,
                            w,
                            y,
                            x,
                            textured(&mut rng, CLASS_PALETTE[VEGETATION]),
                        );
                    }
                }
            }
        }
    }

    // Things on the road: car rectangles and thin person rectangles, with
    // even sizes and positions (grid-aligned like the rest of the scene).
    let things = rng.gen_range(0..=config.max_things);
    for _ in 0..things {
        let class = if rng.gen_bool(0.5) { CAR } else { PERSON };
        let even = |v: usize| (v & !1).max(2);
        let (th, tw) = if class == CAR {
            (
                even(rng.gen_range(h / 12..=h / 6).max(2)),
                even(rng.gen_range(w / 8..=w / 4).max(3)),
            )
        } else {
            (
                even(rng.gen_range(h / 8..=h / 5).max(3)),
                even(rng.gen_range(2..=(w / 16).max(2))),
            )
        };
        if road_start + th >= h || tw >= w {
            continue;
        }
        let y0 = road_start + 2 * rng.gen_range(0..=(h - road_start - th) / 2);
        let x0 = 2 * rng.gen_range(0..=(w - tw) / 2);
        for y in y0..y0 + th {
            for x in x0..x0 + tw {
                labels[y * w + x] = class as i32;
                put_pixel(&mut image, h, w, y, x, textured(&mut rng, CLASS_PALETTE[class]));
            }
        }
    }

    Ok(SceneSample {
        image,
        labels,
        ood_mask: Tensor::zeros(&[h, w]),
    })
}

/// Anomaly-object extent range for a given image size: a quarter to half
/// of the smaller image dimension. Objects this large keep a clean interior
/// at every scale of the encoder pyramid (patch averages up to 8 px blend
/// the borders of anything much smaller into its surroundings).
pub fn object_extent_range(height: usize, width: usize) -> (usize, usize) {
    let s = height.min(width);
    ((s / 4).max(4), (s / 2).max(6))
}

/// One anomaly object: an RGB patch with a binary shape mask, textured from
/// the anomaly palette (disjoint from every known-class palette). Extents
/// are drawn from `[min_extent, max_extent]` per axis.
pub fn gen_anomaly_object(seed: u64, min_extent: usize, max_extent: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ca_ffee);
    let oh = rng.gen_range(min_extent..=max_extent);
    let ow = rng.gen_range(min_extent..=max_extent);
    let color = ANOMALY_PALETTE[rng.gen_range(0..ANOMALY_PALETTE.len())];
    let shape = rng.gen_range(0..3);
    let mut mask = Tensor::zeros(&[oh, ow]);
    let (cy, cx) = ((oh - 1) as f64 / 2.0, (ow - 1) as f64 / 2.0);
    for y in 0..oh {
        for x in 0..ow {
            let dy = (y as f64 - cy) / (oh as f64 / 2.0);
            let dx = (x as f64 - cx) / (ow as f64 / 2.0);
            let inside = match shape {
                // ellipse
                0 => dy * dy + dx * dx <= 1.0,
                // triangle: widens toward the bottom
                1 => {
                    let t = (y as f64 + 1.0) / oh as f64;
                    dx.abs() <= t
                }
                // four-pointed star: diamond ∪ cross
                _ => {
                    dy.abs() + dx.abs() <= 0.8
                        || dy.abs() <= 0.25
                        || dx.abs() <= 0.25
                }
            };
            if inside {
                mask.data_mut()[y * ow + x] = 1.0;
            }
        }
    }
    let mut patch = Tensor::zeros(&[3, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            if mask.data()[y * ow + x] > 0.5 {
                let rgb = textured(&mut rng, color);
                for c in 0..3 {
                    patch.data_mut()[c * oh * ow + y * ow + x] = rgb[c];
                }
            }
        }
    }
    (patch, mask)
}

/// Paste an anomaly object at (y0, x0): object pixels overwrite the image
/// and set ood_mask to 1 there; labels are unchanged.
pub fn anomaly_mix(
    scene: &SceneSample,
    patch: &Tensor,
    mask: &Tensor,
    y0: usize,
    x0: usize,
) -> Result<SceneSample> {
    let (h, w) = (scene.ood_mask.shape()[0], scene.ood_mask.shape()[1]);
    let (oh, ow) = (mask.shape()[0], mask.shape()[1]);
    if patch.shape() != [3, oh, ow] {
        return Err(Error::shape("patch/mask shape mismatch"));
    }
    if y0 + oh > h || x0 + ow > w {
        return Err(Error::data(format!(
            "paste at ({}, {}) of {}x{} object exceeds {}x{} image",
            y0, x0, oh, ow, h, w
        )));
    }
    let mut out = scene.clone();
    for y in 0..oh {
        for x in 0..ow {
            if mask.data()[y * ow + x] > 0.5 {
                for c in 0..3 {
                    out.image.data_mut()[c * h * w + (y0 + y) * w + x0 + x] =
                        patch.data()[c * oh * ow + y * ow + x];
                }
                out.ood_mask.data_mut()[(y0 + y) * w + x0 + x] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Paste an object at a position whose footprint center lies on the road.
pub fn anomaly_mix_on_road(
    scene: &SceneSample,
    patch: &Tensor,
    mask: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<SceneSample> {
    let (h, w) = (scene.ood_mask.shape()[0], scene.ood_mask.shape()[1]);
    let (oh, ow) = (mask.shape()[0], mask.shape()[1]);
    if oh > h || ow > w {
        return Err(Error::data("object larger than the image"));
    }
    for _ in 0..200 {
        let y0 = rng.gen_range(0..=h - oh);
        let x0 = rng.gen_range(0..=w - ow);
        let (cy, cx) = (y0 + oh / 2, x0 + ow / 2);
        if scene.labels[cy * w + cx] == ROAD as i32 {
            return anomaly_mix(scene, patch, mask, y0, x0);
        }
    }
    Err(Error::data("no road placement found for anomaly object"))
}

/// Per-class binary semantic masks and their class ids (only classes that
/// appear); training targets for the set-prediction loss.
pub fn semantic_masks(labels: &[i32], num_classes: usize) -> (Vec<Tensor>, Vec<usize>) {
    let mut masks = Vec::new();
    let mut classes = Vec::new();
    for c in 0..num_classes {
        let data: Vec<f32> = labels
            .iter()
            .map(|&l| if l == c as i32 { 1.0 } else { 0.0 })
            .collect();
        if data.iter().any(|&v| v > 0.0) {
            masks.push(Tensor::new(vec![data.len()], data).expect("mask shape"));
            classes.push(c);
        }
    }
    (masks, classes)
}

/// The training outlier pool: `count` anomaly objects derived from a master
/// seed, sized for `height`×`width` images.
pub fn gen_outlier_pool(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Vec<(Tensor, Tensor)> {
    let (lo, hi) = object_extent_range(height, width);
    (0..count)
        .map(|i| gen_anomaly_object(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), lo, hi))
        .collect()
}

/// Draw a training batch: each slot takes a random inlier scene and is
/// outlier-mixed with probability `p_outlier` (unrestricted placement).
pub fn sample_batch(
    inliers: &[SceneSample],
    outlier_pool: &[(Tensor, Tensor)],
    p_outlier: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SceneSample>> {
    if inliers.is_empty() {
        return Err(Error::data("empty inlier set"));
    }
    if !(0.0..=1.0).contains(&p_outlier) {
        return Err(Error::config("p_outlier must lie in [0,1]"));
    }
    if p_outlier > 0.0 && outlier_pool.is_empty() {
        return Err(Error::data("empty outlier pool with p_outlier > 0"));
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let scene = &inliers[rng.gen_range(0..inliers.len())];
        if p_outlier > 0.0 && rng.gen_bool(p_outlier) {
            let (patch, mask) = &outlier_pool[rng.gen_range(0..outlier_pool.len())];
            let (h, w) = (scene.ood_mask.shape()[0], scene.ood_mask.shape()[1]);
            let (oh, ow) = (mask.shape()[0], mask.shape()[1]);
            let y0 = rng.gen_range(0..=h.saturating_sub(oh));
            let x0 = rng.gen_range(0..=w.saturating_sub(ow));
            batch.push(anomaly_mix(scene, patch, mask, y0, x0)?);
        } else {
            batch.push(scene.clone());
        }
    }
    Ok(batch)
}

/// Generate a full dataset. The "test" split pastes 1–2 anomaly objects
/// onto the road of every scene; other splits are inlier-only.
pub fn gen_dataset(config: &DataConfig, seed: u64, count: usize, split: &str) -> Result<Dataset> {
    config.validate()?;
    let mut scenes = Vec::with_capacity(count);
    let with_anomalies = split == "test";
    for i in 0..count {
        let scene_seed = seed
            .wrapping_mul(0x5851_f42d_4c95_7f2d)
            .wrapping_add(i as u64);
        let mut scene = gen_scene(scene_seed, config)?;
        if with_anomalies {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xa0a0);
            let n = rng.gen_range(1..=2);
            let (lo, hi) = object_extent_range(config.height, config.width);
            for j in 0..n {
                let (patch, mask) = gen_anomaly_object(scene_seed.wrapping_add(1000 + j), lo, hi);
                scene = anomaly_mix_on_road(&scene, &patch, &mask, &mut rng)?;
            }
        }
        scenes.push(scene);
    }
    let taxonomy = Taxonomy::synthetic_default();
    Ok(Dataset {
        manifest: DatasetManifest {
            num_classes: config.num_classes,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            taxonomy: taxonomy.entries(&CLASS_NAMES),
            scene_count: count,
            height: config.height,
            width: config.width,
            seed,
            split: split.to_string(),
        },
        scenes,
    })
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(dir.join("manifest.json"), manifest)?;
    for (i, scene) in dataset.scenes.iter().enumerate() {
        mten::write_f32(dir.join(format!("{:04}.image.mten", i)), &scene.image)?;
        mten::write(
            dir.join(format!("{:04}.labels.mten", i)),
            &MtenValue::I32 {
                shape: vec![dataset.manifest.height, dataset.manifest.width],
                data: scene.labels.clone(),
            },
        )?;
        mten::write_f32(dir.join(format!("{:04}.ood.mten", i)), &scene.ood_mask)?;
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    for i in 0..manifest.scene_count {
        let image = mten::read_f32(dir.join(format!("{:04}.image.mten", i)))?;
        let (_, labels) = mten::read(dir.join(format!("{:04}.labels.mten", i)))?.into_i32()?;
        let ood_mask = mten::read_f32(dir.join(format!("{:04}.ood.mten", i)))?;
        scenes.push(SceneSample {
            image,
            labels,
            ood_mask,
        });
    }
    Ok(Dataset { manifest, scenes })
}
