//! Grid patch extraction from masked fragment regions and per-class
//! balancing by down- or up-sampling.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::TransformDescriptor;
use crate::dataset::{ClassLabel, View};
use crate::imaging::{ImageRgb, Patch, SegmentationMask};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("mask dimensions {mask_w}x{mask_h} do not match image {image_w}x{image_h}")]
    MaskImageMismatch { image_w: usize, image_h: usize, mask_w: usize, mask_h: usize },
    #[error("invalid patch parameters: {0}")]
    InvalidParams(String),
    #[error("class {0} has no patches")]
    EmptyClass(ClassLabel),
    #[error("no off-grid fully-masked position found in image {image_id} after {attempts} attempts")]
    InsufficientArea { image_id: String, attempts: usize },
    #[error("no source image provided for image_id {0}")]
    MissingSource(String),
}

/// Where a patch came from: a grid cell, an off-grid random draw, or an
/// augmentation of an earlier record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatchOrigin {
    Grid { x: usize, y: usize },
    Random { x: usize, y: usize },
    Augmented { parent_index: usize, transform: TransformDescriptor },
}

/// A labelled square patch with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch: Patch,
    pub class_label: ClassLabel,
    pub view: View,
    pub source_image_id: String,
    pub origin: PatchOrigin,
}

/// A named seed consumed by one pipeline stage, kept for provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEvent {
    pub stage: String,
    pub seed: u64,
}

/// An ordered patch collection plus the extraction geometry and the seeds
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub records: Vec<PatchRecord>,
    pub patch_size: usize,
    pub max_overlap: usize,
    pub seed_lineage: Vec<SeedEvent>,
}

impl PatchDataset {
    pub fn new(records: Vec<PatchRecord>, patch_size: usize, max_overlap: usize) -> Self {
        Self { records, patch_size, max_overlap, seed_lineage: Vec::new() }
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for r in &self.records {
            counts[r.class_label.index()] += 1;
        }
        counts
    }

    pub fn push_seed(&mut self, stage: &str, seed: u64) {
        self.seed_lineage.push(SeedEvent { stage: stage.to_string(), seed });
    }
}

/// Summed-area table over a mask for O(1) "is this square fully masked"
/// queries.
pub struct MaskIndex {
    width: usize,
    height: usize,
    sums: Vec<u32>,
}

impl MaskIndex {
    pub fn new(mask: &SegmentationMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = mask.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + (x + 1)] =
                    v + sums[y * (w + 1) + (x + 1)] + sums[(y + 1) * (w + 1) + x]
                        - sums[y * (w + 1) + x];
            }
        }
        Self { width: w, height: h, sums }
    }

    /// True when the `size`×`size` square at `(x, y)` lies inside the image
    /// and every pixel of it is masked.
    pub fn square_fully_masked(&self, x: usize, y: usize, size: usize) -> bool {
        if x + size > self.width || y + size > self.height {
            return false;
        }
        let w1 = self.width + 1;
        let total = self.sums[(y + size) * w1 + (x + size)] + self.sums[y * w1 + x]
            - self.sums[y * w1 + (x + size)]
            - self.sums[(y + size) * w1 + x];
        total as usize == size * size
    }
}

/// Grid lattice origins for a mask: stride `patch_size − max_overlap`,
/// anchored at the top-left of the mask's bounding box. Candidates are
/// positions where the patch fits in the image and starts inside the
/// bounding box; whether each is fully masked is checked separately.
pub fn grid_origin_candidates(
    mask: &SegmentationMask,
    patch_size: usize,
    max_overlap: usize,
) -> Vec<(usize, usize)> {
    let Some((bx0, by0, bx1, by1)) = mask.bounding_box() else {
        return Vec::new();
    };
    let stride = patch_size - max_overlap;
    let mut origins = Vec::new();
    let mut y = by0;
    while y <= by1 && y + patch_size <= mask.height() {
        let mut x = bx0;
        while x <= bx1 && x + patch_size <= mask.width() {
            origins.push((x, y));
            x += stride;
        }
        y += stride;
    }
    origins
}

/// Extracts all fully-masked patches on the regular grid, in row-major
/// order. An empty mask logs a warning and yields an empty list.
pub fn extract_grid_patches(
    image: &ImageRgb,
    mask: &SegmentationMask,
    class: ClassLabel,
    view: View,
    source_image_id: &str,
    patch_size: usize,
    max_overlap: usize,
) -> Result<Vec<PatchRecord>, PatchError> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(PatchError::MaskImageMismatch {
            image_w: image.width(),
            image_h: image.height(),
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    if patch_size == 0 || max_overlap >= patch_size {
        return Err(PatchError::InvalidParams(format!(
            "need 0 <= max_overlap < patch_size, got overlap {max_overlap}, size {patch_size}"
        )));
    }
    if mask.bounding_box().is_none() {
        log::warn!("mask for image {source_image_id} has no fragment pixels");
        return Ok(Vec::new());
    }
    let index = MaskIndex::new(mask);
    let mut records = Vec::new();
    for (x, y) in grid_origin_candidates(mask, patch_size, max_overlap) {
        if index.square_fully_masked(x, y, patch_size) {
            records.push(PatchRecord {
                patch: image.crop_square(x, y, patch_size),
                class_label: class,
                view,
                source_image_id: source_image_id.to_string(),
                origin: PatchOrigin::Grid { x, y },
            });
        }
    }
    Ok(records)
}

/// Survivor indices for reducing each class to `target` records, dataset
/// order preserved. Classes at or below `target` keep everything. The
/// removal draw for class `c` comes from `stream(seed, ["down", c])`.
pub fn downsample_selection(labels: &[ClassLabel], target: usize, seed: u64) -> Vec<usize> {
    let mut keep = vec![true; labels.len()];
    for class in ClassLabel::ALL {
        let idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() <= target {
            continue;
        }
        let mut shuffled = idx.clone();
        let mut rng = stream(seed, &[0x646f_776e, class.index() as u64]);
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[target..] {
            keep[i] = false;
        }
    }
    (0..labels.len()).filter(|&i| keep[i]).collect()
}

/// Reduces every class to the pre-existing minimum class count by removing
/// patches uniformly at random, deterministically for a given seed.
pub fn downsample_classes(dataset: &PatchDataset, seed: u64) -> Result<PatchDataset, PatchError> {
    let counts = dataset.class_counts();
    for class in ClassLabel::ALL {
        if counts[class.index()] == 0 {
            return Err(PatchError::EmptyClass(class));
        }
    }
    let min = *counts.iter().min().unwrap();
    let labels: Vec<ClassLabel> = dataset.records.iter().map(|r| r.class_label).collect();
    let survivors = downsample_selection(&labels, min, seed);
    let records = survivors.iter().map(|&i| dataset.records[i].clone()).collect();
    let mut out = PatchDataset {
        records,
        patch_size: dataset.patch_size,
        max_overlap: dataset.max_overlap,
        seed_lineage: dataset.seed_lineage.clone(),
    };
    out.push_seed("downsample", seed);
    Ok(out)
}

/// A source image made available for off-grid patch draws.
pub struct SourceImage {
    pub image_id: String,
    pub image: ImageRgb,
    pub mask: SegmentationMask,
}

struct SourceIndex {
    index: MaskIndex,
    grid: HashSet<(usize, usize)>,
    view: View,
}

const UPSAMPLE_MAX_ATTEMPTS: usize = 10_000;

/// Equalises class counts at `target` (default: the pre-existing maximum
/// class count). Classes above the target are randomly reduced; classes
/// below it are topped up with patches drawn at positions fully inside the
/// mask that do not coincide with any grid origin.
pub fn upsample_classes(
    dataset: &PatchDataset,
    sources: &[SourceImage],
    target: Option<usize>,
    seed: u64,
) -> Result<PatchDataset, PatchError> {
    let counts = dataset.class_counts();
    for class in ClassLabel::ALL {
        if counts[class.index()] == 0 {
            return Err(PatchError::EmptyClass(class));
        }
    }
    let max = *counts.iter().max().unwrap();
    let target = target.unwrap_or(max);
    if target < 1 {
        return Err(PatchError::InvalidParams("target_count must be >= 1".into()));
    }

    // Reduce any class above the target first, preserving order.
    let labels: Vec<ClassLabel> = dataset.records.iter().map(|r| r.class_label).collect();
    let survivors = downsample_selection(&labels, target, seed);
    let mut records: Vec<PatchRecord> =
        survivors.iter().map(|&i| dataset.records[i].clone()).collect();

    let source_by_id: HashMap<&str, &SourceImage> =
        sources.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let mut indexed: HashMap<String, SourceIndex> = HashMap::new();

    for class in ClassLabel::ALL {
        let have = records.iter().filter(|r| r.class_label == class).count();
        if have >= target {
            continue;
        }
        // Candidate pool: the distinct source images this class was cut from,
        // in first-appearance order.
        let mut image_ids: Vec<&str> = Vec::new();
        for r in dataset.records.iter().filter(|r| r.class_label == class) {
            if !image_ids.contains(&r.source_image_id.as_str()) {
                image_ids.push(r.source_image_id.as_str());
            }
        }
        for id in &image_ids {
            let src = source_by_id
                .get(id)
                .ok_or_else(|| PatchError::MissingSource(id.to_string()))?;
            indexed.entry(id.to_string()).or_insert_with(|| SourceIndex {
                index: MaskIndex::new(&src.mask),
                grid: grid_origin_candidates(&src.mask, dataset.patch_size, dataset.max_overlap)
                    .into_iter()
                    .collect(),
                view: dataset
                    .records
                    .iter()
                    .find(|r| r.source_image_id == **id)
                    .map(|r| r.view)
                    .unwrap(),
            });
        }

        let mut rng = stream(seed, &[0x7570, class.index() as u64]);
        let size = dataset.patch_size;
        for _ in 0..target - have {
            let mut placed = false;
            for attempt in 0..UPSAMPLE_MAX_ATTEMPTS {
                let id = image_ids[rng.random_range(0..image_ids.len())];
                let src = source_by_id[id];
                if src.image.width() < size || src.image.height() < size {
                    continue;
                }
                let x = rng.random_range(0..=src.image.width() - size);
                let y = rng.random_range(0..=src.image.height() - size);
                let info = &indexed[id];
                if info.grid.contains(&(x, y)) || !info.index.square_fully_masked(x, y, size) {
                    continue;
                }
                records.push(PatchRecord {
                    patch: src.image.crop_square(x, y, size),
                    class_label: class,
                    view: info.view,
                    source_image_id: id.to_string(),
                    origin: PatchOrigin::Random { x, y },
                });
                placed = true;
                let _ = attempt;
                break;
            }
            if !placed {
                return Err(PatchError::InsufficientArea {
                    image_id: image_ids.join(","),
                    attempts: UPSAMPLE_MAX_ATTEMPTS,
                });
            }
        }
    }

    let mut out = PatchDataset {
        records,
        patch_size: dataset.patch_size,
        max_overlap: dataset.max_overlap,
        seed_lineage: dataset.seed_lineage.clone(),
    };
    out.push_seed("upsample", seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging;

    fn flat_image(w: usize, h: usize) -> ImageRgb {
        let data: Vec<f64> = (0..w * h)
            .flat_map(|i| {
                let v = (i % 251) as f64 / 255.0;
                [v, v, v]
            })
            .collect();
        ImageRgb::new(w, h, data).unwrap()
    }

    fn full_mask(w: usize, h: usize) -> SegmentationMask {
        SegmentationMask::new(w, h, vec![true; w * h]).unwrap()
    }

    fn extract(img: &ImageRgb, mask: &SegmentationMask, size: usize) -> Vec<PatchRecord> {
        extract_grid_patches(img, mask, ClassLabel::Com, View::Surface, "img0", size, 20).unwrap()
    }

    #[test]
    fn grid_512_full_mask_gives_four_patches() {
        let img = flat_image(512, 512);
        let mask = full_mask(512, 512);
        let recs = extract(&img, &mask, 256);
        let origins: Vec<_> = recs
            .iter()
            .map(|r| match r.origin {
                PatchOrigin::Grid { x, y } => (x, y),
                _ => panic!("grid origin expected"),
            })
            .collect();
        assert_eq!(origins, vec![(0, 0), (236, 0), (0, 236), (236, 236)]);
    }

    #[test]
    fn grid_exact_fit_single_patch() {
        let img = flat_image(256, 256);
        let mask = full_mask(256, 256);
        let recs = extract(&img, &mask, 256);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].origin, PatchOrigin::Grid { x: 0, y: 0 });
    }

    #[test]
    fn patch_larger_than_image_gives_empty() {
        let img = flat_image(200, 200);
        let mask = full_mask(200, 200);
        assert!(extract(&img, &mask, 256).is_empty());
    }

    #[test]
    fn empty_mask_gives_empty() {
        let img = flat_image(64, 64);
        let mask = SegmentationMask::new(64, 64, vec![false; 64 * 64]).unwrap();
        assert!(extract(&img, &mask, 32).is_empty());
    }

    #[test]
    fn mismatched_mask_rejected() {
        let img = flat_image(64, 64);
        let mask = full_mask(32, 64);
        let err = extract_grid_patches(
            &img, &mask, ClassLabel::Com, View::Surface, "x", 32, 20,
        )
        .unwrap_err();
        assert!(matches!(err, PatchError::MaskImageMismatch { .. }));
    }

    #[test]
    fn overlap_must_be_smaller_than_patch() {
        let img = flat_image(64, 64);
        let mask = full_mask(64, 64);
        let err = extract_grid_patches(
            &img, &mask, ClassLabel::Com, View::Surface, "x", 16, 16,
        )
        .unwrap_err();
        assert!(matches!(err, PatchError::InvalidParams(_)));
    }

    #[test]
    fn grid_patches_fully_masked_only() {
        // Mask a 40x40 region inside a 64x64 image; only squares inside it
        // survive.
        let img = flat_image(64, 64);
        let mut data = vec![false; 64 * 64];
        for y in 10..50 {
            for x in 12..52 {
                data[y * 64 + x] = true;
            }
        }
        let mask = SegmentationMask::new(64, 64, data).unwrap();
        let recs = extract_grid_patches(
            &img, &mask, ClassLabel::Com, View::Surface, "x", 16, 4,
        )
        .unwrap();
        assert!(!recs.is_empty());
        for r in &recs {
            let (x, y) = match r.origin {
                PatchOrigin::Grid { x, y } => (x, y),
                _ => unreachable!(),
            };
            assert!(x >= 12 && x + 16 <= 52 && y >= 10 && y + 16 <= 50);
            // anchored on the bbox lattice, stride 12
            assert_eq!((x - 12) % 12, 0);
            assert_eq!((y - 10) % 12, 0);
        }
    }

    fn synthetic_dataset(counts: [usize; 4], size: usize) -> (PatchDataset, Vec<SourceImage>) {
        let mut records = Vec::new();
        let mut sources = Vec::new();
        for class in ClassLabel::ALL {
            let id = format!("src-{}", class.name());
            let img = flat_image(64, 64);
            let mask = full_mask(64, 64);
            let recs = extract_grid_patches(
                &img, &mask, class, View::Surface, &id, size, 0,
            )
            .unwrap();
            let need = counts[class.index()];
            assert!(recs.len() >= need, "not enough grid patches for synthetic class");
            records.extend(recs.into_iter().take(need));
            sources.push(SourceImage { image_id: id, image: img, mask });
        }
        (PatchDataset::new(records, size, 0), sources)
    }

    #[test]
    fn downsample_balances_to_minimum() {
        let (ds, _) = synthetic_dataset([20, 23, 12, 9], 8);
        let balanced = downsample_classes(&ds, 7).unwrap();
        assert_eq!(balanced.class_counts(), [9, 9, 9, 9]);
        // labels, views and pixels come through untouched
        for r in &balanced.records {
            assert!(ds.records.contains(r));
        }
    }

    #[test]
    fn downsample_already_balanced_is_identity() {
        let (ds, _) = synthetic_dataset([5, 5, 5, 5], 8);
        let balanced = downsample_classes(&ds, 99).unwrap();
        assert_eq!(balanced.records, ds.records);
    }

    #[test]
    fn downsample_deterministic_per_seed() {
        let (ds, _) = synthetic_dataset([20, 23, 12, 9], 8);
        let a = downsample_classes(&ds, 1).unwrap();
        let b = downsample_classes(&ds, 1).unwrap();
        let c = downsample_classes(&ds, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn upsample_tops_up_to_max() {
        let (ds, sources) = synthetic_dataset([20, 23, 12, 9], 8);
        let up = upsample_classes(&ds, &sources, None, 3).unwrap();
        assert_eq!(up.class_counts(), [23, 23, 23, 23]);
        // new records are off-grid and fully masked
        for r in up.records.iter().filter(|r| matches!(r.origin, PatchOrigin::Random { .. })) {
            let PatchOrigin::Random { x, y } = r.origin else { unreachable!() };
            assert!(x + 8 <= 64 && y + 8 <= 64);
            assert!(x % 8 != 0 || y % 8 != 0, "landed on a grid origin: ({x},{y})");
        }
    }

    #[test]
    fn upsample_explicit_target_reduces_majorities() {
        let (ds, sources) = synthetic_dataset([20, 23, 12, 9], 8);
        let up = upsample_classes(&ds, &sources, Some(15), 3).unwrap();
        assert_eq!(up.class_counts(), [15, 15, 15, 15]);
    }

    #[test]
    fn upsample_at_target_is_identity() {
        let (ds, sources) = synthetic_dataset([6, 6, 6, 6], 8);
        let up = upsample_classes(&ds, &sources, Some(6), 3).unwrap();
        assert_eq!(up.records, ds.records);
    }

    #[test]
    fn upsample_without_room_fails() {
        // 8x8 image with an 8-patch: the only valid position is the grid
        // origin itself, so off-grid draws are impossible.
        let img = flat_image(8, 8);
        let mask = full_mask(8, 8);
        let mut records = Vec::new();
        for class in ClassLabel::ALL {
            let recs = extract_grid_patches(
                &img,
                &mask,
                class,
                View::Surface,
                &format!("s{}", class.index()),
                8,
                0,
            )
            .unwrap();
            records.extend(recs);
        }
        // make COM the majority so others need top-up
        records.push(records[0].clone());
        let ds = PatchDataset::new(records, 8, 0);
        let sources: Vec<SourceImage> = ClassLabel::ALL
            .iter()
            .map(|c| SourceImage {
                image_id: format!("s{}", c.index()),
                image: img.clone(),
                mask: mask.clone(),
            })
            .collect();
        let err = upsample_classes(&ds, &sources, None, 3).unwrap_err();
        assert!(matches!(err, PatchError::InsufficientArea { .. }));
    }

    #[test]
    fn upsample_missing_source_fails() {
        let (ds, _) = synthetic_dataset([10, 5, 5, 5], 8);
        let err = upsample_classes(&ds, &[], None, 3).unwrap_err();
        assert!(matches!(err, PatchError::MissingSource(_)));
    }

    #[test]
    fn table_counts_balance() {
        // Surface counts from the acquisition table: down to the minimum,
        // or up to an explicit 750 per class.
        let labels: Vec<ClassLabel> = [
            (ClassLabel::Com, 870),
            (ClassLabel::Cod, 920),
            (ClassLabel::Ua, 470),
            (ClassLabel::Bru, 420),
        ]
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat(c).take(n))
        .collect();
        let survivors = downsample_selection(&labels, 420, 5);
        let mut counts = [0usize; 4];
        for &i in &survivors {
            counts[labels[i].index()] += 1;
        }
        assert_eq!(counts, [420, 420, 420, 420]);

        let survivors = downsample_selection(&labels, 750, 5);
        let mut counts = [0usize; 4];
        for &i in &survivors {
            counts[labels[i].index()] += 1;
        }
        assert_eq!(counts, [750, 750, 470, 420]);
    }

    #[test]
    fn masked_png_roundtrip_for_sources() {
        // spot check that extraction works from files written by imaging
        let dir = tempfile::tempdir().unwrap();
        let img = flat_image(32, 32);
        let mask = full_mask(32, 32);
        let ip = dir.path().join("i.png");
        let mp = dir.path().join("m.png");
        imaging::save_image_png(&img, &ip).unwrap();
        imaging::save_mask_png(&mask, &mp).unwrap();
        let img2 = imaging::load_image(&ip).unwrap();
        let mask2 = imaging::load_mask(&mp).unwrap();
        assert_eq!(extract(&img2, &mask2, 24).len(), extract(&img, &mask, 24).len());
    }
}
