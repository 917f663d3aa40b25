//! Synthetic shapes: filled circles, squares and triangles on a textured
//! background, with exact pixel-aligned boxes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{BBox, GroundTruth};
use crate::tensor::Tensor;

pub const CIRCLE: usize = 0;
pub const SQUARE: usize = 1;
pub const TRIANGLE: usize = 2;

/// Share of instances drawn from the small size band.
pub const SMALL_FRACTION: f64 = 0.5;
/// Upper edge of the small band as a fraction of the image side.
pub const SMALL_LIMIT: f64 = 0.2;
pub const MIN_SIZE: f64 = 0.08;
pub const MAX_SIZE: f64 = 0.45;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `3×S×S`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub max_shapes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_images: 16, max_shapes: 3 }
    }
}

/// Whether pixel `(row, col)` of a `d×d` cell belongs to the shape.
pub fn covers(class: usize, d: usize, row: usize, col: usize) -> bool {
    let half = d as f64 / 2.0;
    let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
    match class {
        CIRCLE => (x - half).powi(2) + (y - half).powi(2) <= half * half,
        SQUARE => true,
        // Apex at the top center; a row's half-width is measured at its lower edge.
        _ => (x - half).abs() <= (row + 1) as f64 / 2.0,
    }
}

fn side_pixels(rng: &mut ChaCha8Rng, size: usize) -> usize {
    let frac = if rng.gen_bool(SMALL_FRACTION) {
        rng.gen_range(MIN_SIZE..SMALL_LIMIT)
    } else {
        rng.gen_range(SMALL_LIMIT..=MAX_SIZE)
    };
    let lo = ((MIN_SIZE * size as f64).ceil() as usize).max(3);
    let hi = ((MAX_SIZE * size as f64).floor() as usize).max(lo);
    ((frac * size as f64).round() as usize).clamp(lo, hi.min(size))
}

fn render(rng: &mut ChaCha8Rng, size: usize, max_shapes: usize) -> SynthSample {
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.5));
    let period = rng.gen_range(3..9);
    let mut image = Tensor::<f32>::zeros(&[3, size, size]);
    let plane = size * size;
    for r in 0..size {
        for c in 0..size {
            let stripe = if (r + c) / period % 2 == 0 { 0.06 } else { -0.06 };
            for (ch, &b) in base.iter().enumerate() {
                let noise: f32 = rng.gen_range(-0.05..0.05);
                image.data_mut()[ch * plane + r * size + c] = (b + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }

    let count = rng.gen_range(1..=max_shapes.max(1));
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..3);
        let color: [f32; 3] = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f32>() >= 0.75 {
                break c;
            }
        };
        let placed = (0..50).find_map(|_| {
            let d = side_pixels(rng, size);
            let x0 = rng.gen_range(0..=size - d);
            let y0 = rng.gen_range(0..=size - d);
            // Disjoint from earlier shapes so every box stays fully visible.
            let free = cells.iter().all(|&(ox, oy, od)| x0 >= ox + od || ox >= x0 + d || y0 >= oy + od || oy >= y0 + d);
            free.then_some((x0, y0, d))
        });
        let Some((x0, y0, d)) = placed else { continue };
        for r in 0..d {
            for c in 0..d {
                if covers(class, d, r, c) {
                    for (ch, &v) in color.iter().enumerate() {
                        image.data_mut()[ch * plane + (y0 + r) * size + x0 + c] = v;
                    }
                }
            }
        }
        let s = size as f64;
        cells.push((x0, y0, d));
        gts.push(GroundTruth {
            bbox: BBox::from_corners(x0 as f64 / s, y0 as f64 / s, (x0 + d) as f64 / s, (y0 + d) as f64 / s),
            class,
        });
    }
    SynthSample { image, gts }
}

/// `n` samples of `size×size` pixels; identical for identical arguments.
pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Vec<SynthSample> {
    synth_dataset_with(seed, &DatasetConfig { n_images: n, ..Default::default() }, size)
}

pub fn synth_dataset_with(seed: u64, cfg: &DatasetConfig, size: usize) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_images).map(|_| render(&mut rng, size, cfg.max_shapes)).collect()
}

/// Seed of a held-out set that never coincides with the training set of `seed`.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(3, 4, 32), synth_dataset(3, 4, 32));
        assert_ne!(synth_dataset(3, 4, 32), synth_dataset(4, 4, 32));
    }

    /// Bounding box of the covered pixels.
    fn rendered_extent(class: usize, d: usize) -> (usize, usize, usize, usize) {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..d {
            for c in 0..d {
                if covers(class, d, r, c) {
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r + 1);
                    c1 = c1.max(c + 1);
                }
            }
        }
        (r0, c0, r1, c1)
    }

    #[test]
    fn shapes_fill_their_cell_exactly() {
        for class in [CIRCLE, SQUARE, TRIANGLE] {
            for d in 3..40 {
                assert_eq!(rendered_extent(class, d), (0, 0, d, d), "class {class} size {d}");
            }
        }
    }

    #[test]
    fn boxes_are_valid_and_disjoint() {
        for s in synth_dataset(11, 200, 64) {
            assert!(!s.gts.is_empty() && s.gts.len() <= 3);
            for (i, a) in s.gts.iter().enumerate() {
                a.bbox.check_domain().unwrap();
                for b in &s.gts[i + 1..] {
                    assert_eq!(crate::anchors::iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let mut counts = [0usize; 3];
        for s in synth_dataset(9, 1000, 32) {
            for g in s.gts {
                counts[g.class] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let share = c as f64 / total as f64;
            assert!((share - 1.0 / 3.0).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn small_instances_are_common() {
        let data = synth_dataset(5, 300, 64);
        let all: Vec<f64> = data.iter().flat_map(|s| s.gts.iter().map(|g| g.bbox.w)).collect();
        let small = all.iter().filter(|&&w| w <= SMALL_LIMIT + 1e-9).count();
        assert!(small as f64 >= 0.4 * all.len() as f64, "{small}/{}", all.len());
        assert!(all.iter().all(|&w| (MIN_SIZE..=MAX_SIZE).contains(&w)));
    }
}
