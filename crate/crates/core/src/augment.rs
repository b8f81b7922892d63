//! Seeded geometric augmentation: flips, affine warps, perspective
//! distortions, and whole-dataset expansion.
//!
//! Warps use inverse mapping with bilinear interpolation, so an identity
//! transform reproduces the input bit for bit on the integer lattice.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Patch;
use crate::patches::{PatchDataset, PatchOrigin, PatchRecord};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("transform is singular (|det| = {0:e})")]
    SingularTransform(f64),
    #[error("augmentation factor must be >= 1")]
    InvalidFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// A geometric transform, kept serialisable so augmented records can record
/// their exact lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformDescriptor {
    Flip { axis: FlipAxis },
    /// Row-major 2×3 matrix `[a, b, tx, c, d, ty]` mapping source to output.
    Affine { matrix: [f64; 6] },
    /// Row-major 3×3 homography mapping source to output.
    Perspective { matrix: [f64; 9] },
    Composite { steps: Vec<TransformDescriptor> },
}

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn mat3_inverse(m: &Mat3) -> Result<Mat3, AugmentError> {
    let det = mat3_det(m);
    if det.abs() < 1e-12 {
        return Err(AugmentError::SingularTransform(det.abs()));
    }
    let inv_det = 1.0 / det;
    let mut adj = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            adj[j][i] = sign * minor * inv_det;
        }
    }
    Ok(adj)
}

impl TransformDescriptor {
    /// The forward transform as a homogeneous 3×3 matrix for a patch of the
    /// given side length (flips need the side to place the mirror axis).
    pub fn to_matrix(&self, size: usize) -> Result<Mat3, AugmentError> {
        let n = (size - 1) as f64;
        match self {
            TransformDescriptor::Flip { axis: FlipAxis::Horizontal } => {
                Ok([[-1.0, 0.0, n], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            }
            TransformDescriptor::Flip { axis: FlipAxis::Vertical } => {
                Ok([[1.0, 0.0, 0.0], [0.0, -1.0, n], [0.0, 0.0, 1.0]])
            }
            TransformDescriptor::Affine { matrix: m } => {
                let det = m[0] * m[4] - m[1] * m[3];
                if det.abs() <= 1e-9 {
                    return Err(AugmentError::SingularTransform(det.abs()));
                }
                Ok([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [0.0, 0.0, 1.0]])
            }
            TransformDescriptor::Perspective { matrix: m } => {
                Ok([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])
            }
            TransformDescriptor::Composite { steps } => {
                let mut total = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                for step in steps {
                    // steps apply left to right, matrices compose right to left
                    total = mat3_mul(&step.to_matrix(size)?, &total);
                }
                Ok(total)
            }
        }
    }
}

/// Mirrors a patch along one axis. Lossless; applying the same flip twice
/// returns the original bit for bit.
pub fn flip(patch: &Patch, axis: FlipAxis) -> Patch {
    let (size, ch) = (patch.size(), patch.channels());
    let mut data = vec![0.0; size * size * ch];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (size - 1 - x, y),
                FlipAxis::Vertical => (x, size - 1 - y),
            };
            for c in 0..ch {
                data[(y * size + x) * ch + c] = patch.get(sx, sy, c);
            }
        }
    }
    Patch::new(size, ch, data).unwrap()
}

fn bilinear(patch: &Patch, c: usize, sx: f64, sy: f64, fill: f64) -> f64 {
    let size = patch.size() as i64;
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            let v = if px >= 0 && px < size && py >= 0 && py < size {
                patch.get(px as usize, py as usize, c)
            } else {
                fill
            };
            acc += w * v;
        }
    }
    acc
}

/// Applies a transform by inverse mapping with bilinear interpolation.
/// Output pixels whose preimage falls outside the patch take `fill`.
pub fn warp(patch: &Patch, t: &TransformDescriptor, fill: f64) -> Result<Patch, AugmentError> {
    let size = patch.size();
    let ch = patch.channels();
    let forward = t.to_matrix(size)?;
    let inv = mat3_inverse(&forward)?;
    let mut data = vec![0.0; size * size * ch];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let w = inv[2][0] * xf + inv[2][1] * yf + inv[2][2];
            if w.abs() < 1e-12 {
                for c in 0..ch {
                    data[(y * size + x) * ch + c] = fill;
                }
                continue;
            }
            let sx = (inv[0][0] * xf + inv[0][1] * yf + inv[0][2]) / w;
            let sy = (inv[1][0] * xf + inv[1][1] * yf + inv[1][2]) / w;
            for c in 0..ch {
                data[(y * size + x) * ch + c] = bilinear(patch, c, sx, sy, fill);
            }
        }
    }
    Ok(Patch::new(size, ch, data).unwrap())
}

fn default_flip_prob() -> f64 {
    0.5
}
fn default_rotation_deg() -> f64 {
    25.0
}
fn default_scale_lo() -> f64 {
    0.9
}
fn default_scale_hi() -> f64 {
    1.1
}
fn default_shear_deg() -> f64 {
    8.0
}
fn default_translation_px() -> f64 {
    10.0
}
fn default_perspective_frac() -> f64 {
    0.05
}
fn default_perspective_prob() -> f64 {
    0.5
}

/// Parameter ranges for randomly drawn transform compositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of mirroring along each axis independently.
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    /// Rotation drawn from U(−r, r) degrees.
    #[serde(default = "default_rotation_deg")]
    pub rotation_deg: f64,
    #[serde(default = "default_scale_lo")]
    pub scale_lo: f64,
    #[serde(default = "default_scale_hi")]
    pub scale_hi: f64,
    /// Horizontal shear drawn from U(−s, s) degrees.
    #[serde(default = "default_shear_deg")]
    pub shear_deg: f64,
    /// Translation per axis drawn from U(−t, t) pixels.
    #[serde(default = "default_translation_px")]
    pub translation_px: f64,
    /// Perspective corner jitter bound as a fraction of the side length.
    #[serde(default = "default_perspective_frac")]
    pub perspective_frac: f64,
    #[serde(default = "default_perspective_prob")]
    pub perspective_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: default_flip_prob(),
            rotation_deg: default_rotation_deg(),
            scale_lo: default_scale_lo(),
            scale_hi: default_scale_hi(),
            shear_deg: default_shear_deg(),
            translation_px: default_translation_px(),
            perspective_frac: default_perspective_frac(),
            perspective_prob: default_perspective_prob(),
        }
    }
}

/// Homography mapping the four source corners to the four target corners,
/// solved by direct linear transform with `h33 = 1`.
fn homography_from_corners(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for (k, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the 8x8 system.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for row in 0..8 {
            if row == col || a[row][col] == 0.0 {
                continue;
            }
            let f = a[row][col] / p;
            for c in col..9 {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut h = [0.0f64; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    h
}

/// Draws one random transform composition for a patch of side `size`.
fn draw_transform(rng: &mut impl Rng, size: usize, config: &AugmentConfig) -> TransformDescriptor {
    let mut steps = Vec::new();
    if rng.random::<f64>() < config.flip_prob {
        steps.push(TransformDescriptor::Flip { axis: FlipAxis::Horizontal });
    }
    if rng.random::<f64>() < config.flip_prob {
        steps.push(TransformDescriptor::Flip { axis: FlipAxis::Vertical });
    }

    let theta = rng.random_range(-config.rotation_deg..=config.rotation_deg).to_radians();
    let scale = rng.random_range(config.scale_lo..=config.scale_hi);
    let shear = rng.random_range(-config.shear_deg..=config.shear_deg).to_radians().tan();
    let tx = rng.random_range(-config.translation_px..=config.translation_px);
    let ty = rng.random_range(-config.translation_px..=config.translation_px);
    let c = (size - 1) as f64 / 2.0;
    // linear part: rotation · shear · uniform scale, fixed about the centre
    let (sin, cos) = theta.sin_cos();
    let a = scale * cos;
    let b = scale * (cos * shear - sin);
    let d = scale * sin;
    let e = scale * (sin * shear + cos);
    let off_x = c - (a * c + b * c) + tx;
    let off_y = c - (d * c + e * c) + ty;
    steps.push(TransformDescriptor::Affine { matrix: [a, b, off_x, d, e, off_y] });

    if rng.random::<f64>() < config.perspective_prob {
        let n = (size - 1) as f64;
        let j = config.perspective_frac * size as f64;
        let src = [(0.0, 0.0), (n, 0.0), (n, n), (0.0, n)];
        let mut dst = src;
        for corner in &mut dst {
            corner.0 += rng.random_range(-j..=j);
            corner.1 += rng.random_range(-j..=j);
        }
        steps.push(TransformDescriptor::Perspective {
            matrix: homography_from_corners(&src, &dst),
        });
    }
    TransformDescriptor::Composite { steps }
}

/// The augmented copy `copy_index` (1-based) of one record, deterministic
/// per `(seed, record_index, copy_index)`.
pub fn augment_record(
    record: &PatchRecord,
    record_index: usize,
    copy_index: usize,
    seed: u64,
    config: &AugmentConfig,
) -> Result<PatchRecord, AugmentError> {
    let mut rng = stream(seed, &[record_index as u64, copy_index as u64]);
    let t = draw_transform(&mut rng, record.patch.size(), config);
    let warped = warp(&record.patch, &t, 0.0)?;
    Ok(PatchRecord {
        patch: warped,
        class_label: record.class_label,
        view: record.view,
        source_image_id: record.source_image_id.clone(),
        origin: PatchOrigin::Augmented { parent_index: record_index, transform: t },
    })
}

/// Expands a dataset by `factor`: for each record the original comes first,
/// followed by `factor − 1` randomly transformed copies.
pub fn augment_dataset(
    dataset: &PatchDataset,
    factor: usize,
    seed: u64,
    config: &AugmentConfig,
) -> Result<PatchDataset, AugmentError> {
    if factor < 1 {
        return Err(AugmentError::InvalidFactor);
    }
    let groups: Vec<Vec<PatchRecord>> = dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let mut group = Vec::with_capacity(factor);
            group.push(record.clone());
            for j in 1..factor {
                group.push(augment_record(record, i, j, seed, config)?);
            }
            Ok(group)
        })
        .collect::<Result<_, AugmentError>>()?;
    let records: Vec<PatchRecord> = groups.into_iter().flatten().collect();
    let mut out = PatchDataset {
        records,
        patch_size: dataset.patch_size,
        max_overlap: dataset.max_overlap,
        seed_lineage: dataset.seed_lineage.clone(),
    };
    out.push_seed("augment", seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassLabel, View};

    fn gray_patch(size: usize, data: Vec<f64>) -> Patch {
        Patch::new(size, 1, data).unwrap()
    }

    fn random_patch(size: usize, seed: u64) -> Patch {
        let mut rng = stream(seed, &[]);
        Patch::new(size, 1, (0..size * size).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let p = random_patch(7, 1);
        assert_eq!(flip(&flip(&p, FlipAxis::Horizontal), FlipAxis::Horizontal), p);
        assert_eq!(flip(&flip(&p, FlipAxis::Vertical), FlipAxis::Vertical), p);
    }

    #[test]
    fn flip_symmetric_patch_is_identity() {
        let p = gray_patch(2, vec![0.3, 0.3, 0.8, 0.8]);
        assert_eq!(flip(&p, FlipAxis::Horizontal), p);
    }

    #[test]
    fn flip_swaps_columns() {
        let p = gray_patch(2, vec![0.1, 0.2, 0.3, 0.4]);
        let f = flip(&p, FlipAxis::Horizontal);
        assert_eq!(f.data(), &[0.2, 0.1, 0.4, 0.3]);
    }

    #[test]
    fn identity_affine_is_bit_exact() {
        let p = random_patch(9, 2);
        let id = TransformDescriptor::Affine { matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };
        assert_eq!(warp(&p, &id, 0.0).unwrap(), p);
    }

    #[test]
    fn quarter_turns_close_after_four() {
        let p = random_patch(8, 3);
        let c = 3.5; // (8-1)/2
        let (s, co) = std::f64::consts::FRAC_PI_2.sin_cos();
        let rot = TransformDescriptor::Affine {
            matrix: [co, -s, c - (co * c - s * c), s, co, c - (s * c + co * c)],
        };
        let mut q = p.clone();
        for _ in 0..4 {
            q = warp(&q, &rot, 0.0).unwrap();
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn translation_fills_exposed_edge() {
        let p = gray_patch(2, vec![1.0, 2.0, 3.0, 4.0]);
        let t = TransformDescriptor::Affine { matrix: [1.0, 0.0, 1.0, 0.0, 1.0, 0.0] };
        let w = warp(&p, &t, 0.0).unwrap();
        assert_eq!(w.data(), &[0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn singular_affine_rejected() {
        let p = random_patch(4, 4);
        let t = TransformDescriptor::Affine { matrix: [1.0, 1.0, 0.0, 1.0, 1.0, 0.0] };
        assert!(matches!(warp(&p, &t, 0.0), Err(AugmentError::SingularTransform(_))));
    }

    #[test]
    fn flip_as_matrix_matches_exact_flip() {
        let p = random_patch(6, 5);
        let t = TransformDescriptor::Flip { axis: FlipAxis::Horizontal };
        assert_eq!(warp(&p, &t, 0.0).unwrap(), flip(&p, FlipAxis::Horizontal));
    }

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (7.0, 0.0), (7.0, 7.0), (0.0, 7.0)];
        let dst = [(0.2, -0.1), (6.9, 0.3), (7.2, 6.8), (-0.3, 7.1)];
        let h = homography_from_corners(&src, &dst);
        for (s, d) in src.iter().zip(dst.iter()) {
            let w = h[6] * s.0 + h[7] * s.1 + h[8];
            let u = (h[0] * s.0 + h[1] * s.1 + h[2]) / w;
            let v = (h[3] * s.0 + h[4] * s.1 + h[5]) / w;
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
        }
    }

    fn tiny_dataset(n: usize, size: usize) -> PatchDataset {
        let records = (0..n)
            .map(|i| PatchRecord {
                patch: random_patch(size, 100 + i as u64),
                class_label: ClassLabel::ALL[i % 4],
                view: View::Surface,
                source_image_id: format!("img{}", i / 4),
                origin: PatchOrigin::Grid { x: 0, y: 0 },
            })
            .collect();
        PatchDataset::new(records, size, 0)
    }

    #[test]
    fn augment_multiplies_counts_and_keeps_originals() {
        let ds = tiny_dataset(10, 6);
        let out = augment_dataset(&ds, 3, 9, &AugmentConfig::default()).unwrap();
        assert_eq!(out.records.len(), 30);
        let originals: Vec<&PatchRecord> = out
            .records
            .iter()
            .filter(|r| !matches!(r.origin, PatchOrigin::Augmented { .. }))
            .collect();
        assert_eq!(originals.len(), 10);
        for (orig, rec) in ds.records.iter().zip(originals) {
            assert_eq!(orig, rec);
        }
    }

    #[test]
    fn augment_factor_one_is_identity() {
        let ds = tiny_dataset(5, 6);
        let out = augment_dataset(&ds, 1, 9, &AugmentConfig::default()).unwrap();
        assert_eq!(out.records, ds.records);
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let ds = tiny_dataset(6, 6);
        let a = augment_dataset(&ds, 4, 11, &AugmentConfig::default()).unwrap();
        let b = augment_dataset(&ds, 4, 11, &AugmentConfig::default()).unwrap();
        let c = augment_dataset(&ds, 4, 12, &AugmentConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn augment_preserves_labels_and_lineage() {
        let ds = tiny_dataset(8, 6);
        let out = augment_dataset(&ds, 2, 3, &AugmentConfig::default()).unwrap();
        for (i, chunk) in out.records.chunks(2).enumerate() {
            assert_eq!(chunk[0].class_label, chunk[1].class_label);
            assert_eq!(chunk[0].view, chunk[1].view);
            assert_eq!(chunk[0].source_image_id, chunk[1].source_image_id);
            match &chunk[1].origin {
                PatchOrigin::Augmented { parent_index, .. } => assert_eq!(*parent_index, i),
                other => panic!("expected augmented origin, got {other:?}"),
            }
        }
    }

    #[test]
    fn descriptor_json_roundtrip() {
        let t = TransformDescriptor::Composite {
            steps: vec![
                TransformDescriptor::Flip { axis: FlipAxis::Vertical },
                TransformDescriptor::Affine { matrix: [1.0, 0.0, 2.0, 0.0, 1.0, -1.0] },
            ],
        };
        let json = serde_json::to_string(&t).unwrap();
        let back: TransformDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }
}
