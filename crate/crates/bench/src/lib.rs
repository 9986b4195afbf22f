//! Shared fixtures for the benchmarks.

use menet_core::data::make_phantom;
use menet_core::metrics::{compose_regions, Mask};

/// Whole-tumor masks of two phantoms with different seeds.
pub fn phantom_masks(extent: [usize; 3]) -> (Mask, Mask) {
    let a = make_phantom(1, extent).expect("valid extent");
    let b = make_phantom(2, extent).expect("valid extent");
    (
        compose_regions(a.labels.as_ref().expect("phantom labels")).wt,
        compose_regions(b.labels.as_ref().expect("phantom labels")).wt,
    )
}
