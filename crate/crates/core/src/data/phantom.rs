use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, MultiModalCase, Volume};
use crate::error::{Error, Result};

const MIN_EXTENT: usize = 16;
const NOISE_STD: f64 = 0.1;

/// Mean intensity per modality for outside-head, brain, edema, enhancing
/// and necrotic tissue.
const PROFILES: [[f64; 5]; 4] = [
    [0.0, 1.0, 2.2, 1.6, 1.2],
    [0.0, 1.0, 0.8, 0.9, 0.5],
    [0.0, 1.0, 0.9, 2.4, 0.6],
    [0.0, 1.0, 2.0, 1.5, 2.4],
];

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Synthetic case with nested ellipsoids: edema (code 2) around enhancing
/// tumor (code 4) around a necrotic core (code 1), inside an ellipsoidal
/// head. `extent` is `[nx, ny, nz]`, each at least 16.
pub fn make_phantom(seed: u64, extent: [usize; 3]) -> Result<MultiModalCase> {
    if extent.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::ExtentTooSmall(extent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = extent.map(|n| n as f64);
    let center: [f64; 3] = std::array::from_fn(|a| {
        let jitter = e[a] / 16.0;
        (e[a] - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter)
    });
    let edema: [f64; 3] = std::array::from_fn(|a| e[a] * rng.gen_range(0.22..0.26));
    let enhancing = edema.map(|r| r * 0.65);
    let core = edema.map(|r| r * 0.35);
    let head_center = e.map(|n| (n - 1.0) / 2.0);
    let head = e.map(|n| n * 0.47);

    let n = extent.iter().product();
    let mut tissue = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for z in 0..extent[2] {
        for y in 0..extent[1] {
            for x in 0..extent[0] {
                let p = [x as f64, y as f64, z as f64];
                let (t, code) = if inside(p, center, core) {
                    (4, 1)
                } else if inside(p, center, enhancing) {
                    (3, 4)
                } else if inside(p, center, edema) {
                    (2, 2)
                } else if inside(p, head_center, head) {
                    (1, 0)
                } else {
                    (0, 0)
                };
                tissue.push(t);
                codes.push(code);
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let spacing = [1.0; 3];
    let modalities = PROFILES.map(|profile| {
        let data = tissue
            .iter()
            .map(|&t| profile[t] + noise.sample(&mut rng))
            .collect();
        Volume::new(extent, spacing, data).expect("phantom dims")
    });
    let labels = LabelVolume::new(extent, spacing, codes)?;
    MultiModalCase::new(format!("phantom{seed:03}"), modalities, Some(labels))
}
