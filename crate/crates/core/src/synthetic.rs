//! Hermetic synthetic corpus generator.
//!
//! Draws leaf-like green ellipses on cluttered non-green backgrounds, with
//! a class-specific spot pattern: none for healthy, round orange spots for
//! rust, gray-brown blotches for scab. The generator also writes the exact
//! ellipse mask per image so segmentation quality can be scored against a
//! known ground truth. Everything is a pure function of (seed, class, index),
//! so two runs with the same arguments produce byte-identical trees.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{ClassCounts, CorpusSummary, Label};
use crate::error::{Error, Result};
use crate::seeding::subseed;

pub const IMAGE_SIZE: u32 = 128;

/// Base leaf fill for healthy leaves. Per-pixel jitter stays well inside
/// the green hue band.
pub const LEAF_GREEN: [u8; 3] = [52, 148, 46];
/// Rust-infected leaves discolor toward yellow-green.
pub const LEAF_GREEN_RUST: [u8; 3] = [125, 175, 25];
/// Scab-infected leaves discolor toward a darker blue-green.
pub const LEAF_GREEN_SCAB: [u8; 3] = [20, 95, 85];

/// Per-class leaf tint. All three stay strongly green (high excess-green),
/// so the baseline segmenter works identically across classes, while the
/// classes stay linearly separable from pooled color statistics alone.
pub fn leaf_base(label: Label) -> [u8; 3] {
    match label {
        Label::Healthy => LEAF_GREEN,
        Label::Rust => LEAF_GREEN_RUST,
        Label::Scab => LEAF_GREEN_SCAB,
    }
}
/// Rust spot color. `is_rust_orange` brackets the jitter applied to it.
pub const RUST_SPOT: [u8; 3] = [222, 126, 30];
/// Scab blotch color, deliberately close to the background palette.
pub const SCAB_SPOT: [u8; 3] = [116, 92, 58];

/// Orange hue-band predicate used by tests to verify that rust images carry
/// rust pixels and healthy images do not.
pub fn is_rust_orange(px: [u8; 3]) -> bool {
    let [r, g, b] = px;
    r > 180 && (80..180).contains(&g) && b < 90 && r > g.saturating_add(60)
}

/// The ellipse that defines a generated leaf.
#[derive(Debug, Clone, Copy)]
pub struct LeafGeometry {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl LeafGeometry {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn mask(&self) -> GrayImage {
        GrayImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
            Luma([if self.contains(x, y) { 255 } else { 0 }])
        })
    }
}

/// Output layout of a generated corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub summary: CorpusSummary,
    pub label_table: PathBuf,
    pub image_dir: PathBuf,
    /// Ground-truth ellipse masks, `<image_id>_mask.png`.
    pub gt_mask_dir: PathBuf,
}

pub fn synthetic_image_id(label: Label, index: usize) -> String {
    format!("{}_{index:04}", label.as_str())
}

/// Generate `n_per_class` images per class under `out_dir`, plus the one-hot
/// label table and ground-truth masks.
pub fn generate_synthetic_corpus(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<SyntheticCorpus> {
    if n_per_class == 0 {
        return Err(Error::InvalidInput("n_per_class must be >= 1".into()));
    }
    let image_dir = out_dir.join("images");
    let gt_mask_dir = out_dir.join("gt_masks");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    std::fs::create_dir_all(&gt_mask_dir).map_err(|e| Error::io(&gt_mask_dir, e))?;

    let label_table = out_dir.join("labels.csv");
    let mut table = String::from("image_id,healthy,multiple_diseases,rust,scab\n");

    let mut counts = ClassCounts::default();
    for label in Label::ALL {
        for i in 0..n_per_class {
            let id = synthetic_image_id(label, i);
            let (img, geometry) = render_leaf_image(label, seed, i);
            let img_path = image_dir.join(format!("{id}.png"));
            img.save(&img_path).map_err(|e| Error::image(&img_path, e))?;
            let mask_path = gt_mask_dir.join(format!("{id}_mask.png"));
            geometry.mask().save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
            let onehot = match label {
                Label::Healthy => "1,0,0,0",
                Label::Rust => "0,0,1,0",
                Label::Scab => "0,0,0,1",
            };
            table.push_str(&format!("{id},{onehot}\n"));
            counts.bump(label);
        }
    }
    std::fs::write(&label_table, table).map_err(|e| Error::io(&label_table, e))?;

    Ok(SyntheticCorpus {
        summary: CorpusSummary {
            total: counts.total(),
            per_class_counts: counts,
            dropped: 0,
            seed,
        },
        label_table,
        image_dir,
        gt_mask_dir,
    })
}

/// Render one image. Pure in (label, seed, index).
pub fn render_leaf_image(label: Label, seed: u64, index: usize) -> (RgbImage, LeafGeometry) {
    let stream = format!("synth/{}/{index}", label.as_str());
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, &stream));

    let size = IMAGE_SIZE;
    let mut img = render_background(&mut rng, size);

    let geometry = LeafGeometry {
        cx: size as f64 / 2.0 + rng.random_range(-10.0..10.0),
        cy: size as f64 / 2.0 + rng.random_range(-10.0..10.0),
        a: rng.random_range(44.0..54.0),
        b: rng.random_range(30.0..38.0),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };

    let base = leaf_base(label);
    for y in 0..size {
        for x in 0..size {
            if geometry.contains(x, y) {
                let jitter = |v: u8, r: &mut ChaCha20Rng, spread: i16| -> u8 {
                    (v as i16 + r.random_range(-spread..=spread)).clamp(0, 255) as u8
                };
                let px = [
                    jitter(base[0], &mut rng, 6),
                    jitter(base[1], &mut rng, 10),
                    jitter(base[2], &mut rng, 6),
                ];
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }

    match label {
        Label::Healthy => {}
        Label::Rust => draw_spots(&mut img, &mut rng, &geometry, RUST_SPOT, 10, 2.0..3.2),
        Label::Scab => draw_blotches(&mut img, &mut rng, &geometry),
    }

    (img, geometry)
}

fn render_background(rng: &mut ChaCha20Rng, size: u32) -> RgbImage {
    // Non-green palette so the excess-green baseline has a clean signal.
    const PALETTE: [[u8; 3]; 4] = [
        [112, 82, 52],   // soil
        [134, 132, 128], // stone
        [152, 160, 176], // overcast sky
        [72, 54, 38],    // dark soil
    ];
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let mut img = RgbImage::from_pixel(size, size, Rgb(base));

    // Clutter: rectangles and discs from the same palette.
    let shapes = rng.random_range(2..5);
    for _ in 0..shapes {
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        if rng.random_bool(0.5) {
            let w = rng.random_range(8..40);
            let h = rng.random_range(8..40);
            let x0 = rng.random_range(0..size);
            let y0 = rng.random_range(0..size);
            for y in y0..(y0 + h).min(size) {
                for x in x0..(x0 + w).min(size) {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        } else {
            let r = rng.random_range(4.0..18.0f64);
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            for y in 0..size {
                for x in 0..size {
                    let d = (x as f64 - cx).hypot(y as f64 - cy);
                    if d <= r {
                        img.put_pixel(x, y, Rgb(color));
                    }
                }
            }
        }
    }

    // Speckle noise.
    for px in img.pixels_mut() {
        for c in 0..3 {
            let v = px.0[c] as i16 + rng.random_range(-6..=6);
            px.0[c] = v.clamp(0, 255) as u8;
        }
    }
    img
}

fn draw_spots(
    img: &mut RgbImage,
    rng: &mut ChaCha20Rng,
    geometry: &LeafGeometry,
    color: [u8; 3],
    max_spots: usize,
    radius: std::ops::Range<f64>,
) {
    let n = rng.random_range(3..=max_spots);
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < n && attempts < 200 {
        attempts += 1;
        let cx = geometry.cx + rng.random_range(-geometry.a..geometry.a) * 0.7;
        let cy = geometry.cy + rng.random_range(-geometry.b..geometry.b) * 0.7;
        let r = rng.random_range(radius.clone());
        if !geometry.contains(cx as u32, cy as u32) {
            continue;
        }
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                if d <= r && geometry.contains(x, y) {
                    let px = [
                        (color[0] as i16 + rng.random_range(-8..=8)).clamp(0, 255) as u8,
                        (color[1] as i16 + rng.random_range(-8..=8)).clamp(0, 255) as u8,
                        (color[2] as i16 + rng.random_range(-8..=8)).clamp(0, 255) as u8,
                    ];
                    img.put_pixel(x, y, Rgb(px));
                }
            }
        }
        drawn += 1;
    }
}

fn draw_blotches(img: &mut RgbImage, rng: &mut ChaCha20Rng, geometry: &LeafGeometry) {
    // Irregular blobs: a short random walk of overlapping small discs.
    let n = rng.random_range(4..=7);
    for _ in 0..n {
        let mut cx = geometry.cx + rng.random_range(-geometry.a..geometry.a) * 0.6;
        let mut cy = geometry.cy + rng.random_range(-geometry.b..geometry.b) * 0.6;
        let steps = rng.random_range(4..8);
        for _ in 0..steps {
            let r = rng.random_range(1.5..2.8);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                    if d <= r && geometry.contains(x, y) {
                        let px = [
                            (SCAB_SPOT[0] as i16 + rng.random_range(-10..=10)).clamp(0, 255) as u8,
                            (SCAB_SPOT[1] as i16 + rng.random_range(-10..=10)).clamp(0, 255) as u8,
                            (SCAB_SPOT[2] as i16 + rng.random_range(-10..=10)).clamp(0, 255) as u8,
                        ];
                        img.put_pixel(x, y, Rgb(px));
                    }
                }
            }
            cx += rng.random_range(-3.0..3.0);
            cy += rng.random_range(-3.0..3.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(1, 0, dir_a.path()).unwrap();
        generate_synthetic_corpus(1, 0, dir_b.path()).unwrap();
        for label in Label::ALL {
            let id = synthetic_image_id(label, 0);
            let a = std::fs::read(dir_a.path().join("images").join(format!("{id}.png"))).unwrap();
            let b = std::fs::read(dir_b.path().join("images").join(format!("{id}.png"))).unwrap();
            assert_eq!(a, b, "{id} differs between identically seeded runs");
        }
        let la = std::fs::read(dir_a.path().join("labels.csv")).unwrap();
        let lb = std::fs::read(dir_b.path().join("labels.csv")).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn counts_and_label_table_match_request() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(2, 42, dir.path()).unwrap();
        assert_eq!(corpus.summary.total, 6);
        assert_eq!(corpus.summary.per_class_counts.healthy, 2);
        assert_eq!(corpus.summary.per_class_counts.rust, 2);
        assert_eq!(corpus.summary.per_class_counts.scab, 2);
        let table = std::fs::read_to_string(&corpus.label_table).unwrap();
        assert_eq!(table.lines().count(), 7); // header + 6 rows
        assert!(table.starts_with("image_id,healthy,multiple_diseases,rust,scab\n"));
        // Every image and ground-truth mask exists.
        for label in Label::ALL {
            for i in 0..2 {
                let id = synthetic_image_id(label, i);
                assert!(corpus.image_dir.join(format!("{id}.png")).is_file());
                assert!(corpus.gt_mask_dir.join(format!("{id}_mask.png")).is_file());
            }
        }
    }

    #[test]
    fn rejects_zero_images_per_class() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(0, 0, dir.path()).is_err());
    }

    #[test]
    fn rust_images_carry_orange_pixels_and_healthy_do_not() {
        for index in 0..8 {
            let (rust_img, rust_geo) = render_leaf_image(Label::Rust, 42, index);
            let orange_inside = rust_img
                .enumerate_pixels()
                .filter(|(x, y, px)| rust_geo.contains(*x, *y) && is_rust_orange(px.0))
                .count();
            assert!(orange_inside > 0, "rust image {index} has no rust-orange pixels");

            let (healthy_img, _) = render_leaf_image(Label::Healthy, 42, index);
            let orange = healthy_img.pixels().filter(|px| is_rust_orange(px.0)).count();
            assert_eq!(orange, 0, "healthy image {index} has rust-orange pixels");
        }
    }

    #[test]
    fn ground_truth_mask_matches_geometry() {
        let (_, geo) = render_leaf_image(Label::Scab, 7, 0);
        let mask = geo.mask();
        for (x, y, px) in mask.enumerate_pixels() {
            assert_eq!(px.0[0] == 255, geo.contains(x, y));
        }
    }
}
