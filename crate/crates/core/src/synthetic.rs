//! Synthetic test images with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::ScalarField;
use crate::model::LabelMap;
use crate::stack::{Image, Stack};
use crate::supervision::{Patch, Supervision};

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub image: Image<f64>,
    pub truth: LabelMap,
    /// One patch per region, centered in it.
    pub supervision: Supervision,
}

fn render(
    width: usize,
    height: usize,
    levels: &[f64],
    noise: f64,
    seed: u64,
    region: impl Fn(usize, usize) -> usize,
) -> (Image<f64>, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let field = ScalarField::from_fn(width, height, |x, y| {
        let n = if noise > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        };
        levels[region(x, y)] + n
    });
    let truth = LabelMap::from_fn(width, height, |x, y| region(x, y) as u32 + 1);
    (Stack::from_field(field), truth)
}

/// Disk of radius `min(w, h) / 4` at the center (label 2, level 0.75) on a
/// background (label 1, level 0.25), plus Gaussian noise.
pub fn two_region(width: usize, height: usize, noise: f64, seed: u64) -> Synthetic {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let r = width.min(height) as f64 / 4.0;
    let inside = move |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        usize::from(dx * dx + dy * dy < r * r)
    };
    let (image, truth) = render(width, height, &[0.25, 0.75], noise, seed, inside);
    let s = (width.min(height) / 8).max(1);
    let supervision = Supervision::new(vec![
        Patch { channel: 1, x: 0, y: 0, w: s, h: s },
        Patch {
            channel: 2,
            x: width / 2 - s / 2,
            y: height / 2 - s / 2,
            w: s,
            h: s,
        },
    ]);
    Synthetic {
        image,
        truth,
        supervision,
    }
}

/// T-junction: top half (label 1, 0.2), bottom-left (label 2, 0.5) and
/// bottom-right (label 3, 0.8), plus Gaussian noise.
pub fn t_junction(width: usize, height: usize, noise: f64, seed: u64) -> Synthetic {
    let region = move |x: usize, y: usize| {
        if y < height / 2 {
            0
        } else if x < width / 2 {
            1
        } else {
            2
        }
    };
    let (image, truth) = render(width, height, &[0.2, 0.5, 0.8], noise, seed, region);
    let s = (width.min(height) / 8).max(1);
    let supervision = Supervision::new(vec![
        Patch { channel: 1, x: width / 2 - s / 2, y: height / 4 - s / 2, w: s, h: s },
        Patch { channel: 2, x: width / 4 - s / 2, y: 3 * height / 4 - s / 2, w: s, h: s },
        Patch { channel: 3, x: 3 * width / 4 - s / 2, y: 3 * height / 4 - s / 2, w: s, h: s },
    ]);
    Synthetic {
        image,
        truth,
        supervision,
    }
}
