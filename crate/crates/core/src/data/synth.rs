use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DatasetManifest, SceneSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const NAMES: [&str; 8] = ["sky", "ground", "building", "tree", "car", "sign", "person", "pole"];

pub fn class_name(c: usize) -> String {
    NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

/// Base colour per class.
fn palette(c: usize) -> [f64; 3] {
    match c {
        0 => [0.55, 0.7, 0.92],
        1 => [0.45, 0.38, 0.25],
        2 => [0.7, 0.4, 0.35],
        3 => [0.2, 0.55, 0.2],
        4 => [0.85, 0.8, 0.25],
        _ => {
            let t = c as f64 * 0.618_034;
            [t.fract(), (t * 2.0).fract(), (t * 3.0).fract()]
        }
    }
}

/// Texture in `[-1, 1]` for class `c` at pixel `(y, x)`.
fn texture(c: usize, y: usize, x: usize) -> f64 {
    let (y, x) = (y as f64, x as f64);
    let wave = |v: f64, period: f64| (2.0 * std::f64::consts::PI * v / period).sin();
    match c {
        0 => 0.0,
        1 => wave(y, 5.0),
        2 => wave(x, 4.0),
        3 => wave(x, 4.0) * wave(y, 4.0),
        4 => wave(x + y, 6.0),
        _ => {
            let a = c as f64 * 0.7;
            wave(x * a.cos() + y * a.sin(), 3.0 + (c % 3) as f64)
        }
    }
}

fn scene(c: usize, size: usize, seed: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let horizon = rng.gen_range(size / 4..size / 2);
    let mut labels = vec![0usize; size * size];
    for (i, l) in labels.iter_mut().enumerate() {
        *l = usize::from(i / size >= horizon);
    }
    // objects stand on or below the horizon, so sky stays in the top half
    if c > 2 {
        for _ in 0..rng.gen_range(1..=3) {
            let class = rng.gen_range(2..c);
            let h = rng.gen_range(size / 6..=size / 3);
            let w = rng.gen_range(size / 6..=size / 3);
            let bottom = rng.gen_range(horizon + h / 2..=size).min(size);
            let top = bottom.saturating_sub(h);
            let left = rng.gen_range(0..=size - w);
            let ellipse = rng.gen_bool(0.5);
            let (cy, cx) = ((top + bottom) as f64 / 2.0, left as f64 + w as f64 / 2.0);
            for y in top..bottom {
                for x in left..left + w {
                    let inside = !ellipse || {
                        let dy = (y as f64 + 0.5 - cy) / (h as f64 / 2.0);
                        let dx = (x as f64 + 0.5 - cx) / (w as f64 / 2.0);
                        dy * dy + dx * dx <= 1.0
                    };
                    if inside {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
    }
    let jitter: Vec<[f64; 3]> = (0..c)
        .map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)])
        .collect();
    let mut image = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let l = labels[y * size + x];
            let base = palette(l);
            let t = texture(l, y, x);
            let shade = if l == 0 { -0.15 * y as f64 / size as f64 } else { 0.0 };
            for k in 0..3 {
                let v = base[k] + jitter[l][k] + 0.15 * t + shade + noise.sample(&mut rng);
                image[(k * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    SceneSample {
        image: Tensor::from_vec(&[3, size, size], image).expect("finite pixels"),
        labels: LabelMap::new(size, size, labels).expect("square map"),
    }
}

/// `n` RGB scenes of `size × size` with `classes` classes: sky (0) above a horizon in the
/// top half, ground (1) below, and 1–3 textured objects of classes `2..classes` standing on
/// the ground. Identical for identical arguments.
pub fn generate_synthetic_scenes(
    n: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<(Vec<SceneSample>, DatasetManifest)> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if size < 16 {
        return Err(Error::Parameter(format!("scene size must be at least 16, got {size}")));
    }
    if n == 0 {
        return Err(Error::Parameter("need at least one scene".into()));
    }
    let samples: Vec<SceneSample> = (0..n)
        .into_par_iter()
        .map(|i| scene(classes, size, derive_seed(seed, &[i as u64])))
        .collect();
    let manifest = DatasetManifest::describe(&samples, (0..classes).map(class_name).collect(), seed)?;
    Ok((samples, manifest))
}
