//! Patch-based texture classification of kidney-stone fragment images.
//!
//! The crate covers the whole desk-scale workflow: grid patch extraction from
//! masked fragment regions, class balancing, seeded geometric augmentation,
//! HSI colour statistics and rotation-invariant LBP histograms, from-scratch
//! Random Forest and Newton-boosted tree ensembles, a small fully-connected
//! transfer head trained with ADAM over precomputed deep features,
//! cross-validated evaluation, and PCA projection for class-separability
//! plots. Every stochastic step takes an explicit seed and reruns reproduce
//! identical artifacts bit for bit.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod imaging;
pub mod mlp;
pub mod patches;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod trees;

pub use dataset::{ClassLabel, Manifest, ManifestEntry, View};
pub use imaging::{ImageRgb, Patch, SegmentationMask};
pub use patches::{PatchDataset, PatchOrigin, PatchRecord};

/// Caps the rayon worker pool from the `LITHOPATCH_THREADS` environment
/// variable. Call once at process start; later calls are no-ops.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("LITHOPATCH_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
