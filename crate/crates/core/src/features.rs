//! The classical descriptor: a rotation-invariant uniform LBP histogram
//! over grayscale plus HSI colour statistics, 19 values in total.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{rgb_to_hsi, to_grayscale, ImagingError, Patch};
use crate::patches::PatchDataset;

pub const SCHEMA_HSI_LBP_V1: &str = "hsi-lbp-v1";
const LPFV_MAGIC: &[u8; 5] = b"LPFV1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("patch side {side} too small for radius {radius}")]
    PatchTooSmall { side: usize, radius: f64 },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("malformed feature file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fixed-length numeric descriptor tied to a feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema_id: String,
}

/// Column names of the default schema: 10 LBP bins then per-channel
/// mean/std/energy for H, S, I.
pub fn schema_columns() -> Vec<String> {
    let mut cols: Vec<String> = (0..10).map(|i| format!("lbp_{i}")).collect();
    for ch in ["h", "s", "i"] {
        for stat in ["mean", "std", "energy"] {
            cols.push(format!("{ch}_{stat}"));
        }
    }
    cols
}

enum SampleOffset {
    Exact { dx: i64, dy: i64 },
    Interpolated { dx: f64, dy: f64 },
}

fn circle_offsets(neighbors: usize, radius: f64) -> Vec<SampleOffset> {
    (0..neighbors)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / neighbors as f64;
            let dx = radius * angle.cos();
            let dy = -radius * angle.sin();
            let near = |v: f64| (v - v.round()).abs() < 1e-9;
            if near(dx) && near(dy) {
                SampleOffset::Exact { dx: dx.round() as i64, dy: dy.round() as i64 }
            } else {
                SampleOffset::Interpolated { dx, dy }
            }
        })
        .collect()
}

// Bilinear sample whose result is invariant under lattice-preserving
// rotations and mirrors of the patch: the four corner products are summed
// in sorted order so the accumulation order never depends on orientation.
fn sample(patch: &Patch, x: usize, y: usize, off: &SampleOffset) -> f64 {
    match *off {
        SampleOffset::Exact { dx, dy } => {
            patch.get((x as i64 + dx) as usize, (y as i64 + dy) as usize, 0)
        }
        SampleOffset::Interpolated { dx, dy } => {
            let sx = x as f64 + dx;
            let sy = y as f64 + dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as usize, y0 as usize);
            let mut terms = [
                (1.0 - fx) * (1.0 - fy) * patch.get(x0, y0, 0),
                fx * (1.0 - fy) * patch.get(x0 + 1, y0, 0),
                (1.0 - fx) * fy * patch.get(x0, y0 + 1, 0),
                fx * fy * patch.get(x0 + 1, y0 + 1, 0),
            ];
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            terms.iter().sum()
        }
    }
}

// Relative tie tolerance for the neighbor >= center comparison. Interpolated
// neighbors of a constant region land within a few ulp of the center; ties
// must count as 1 for the code to be stable.
const LBP_TIE_EPS: f64 = 1e-12;

fn circular_transitions(code: u32, bits: u32) -> u32 {
    let rotated = ((code << 1) | (code >> (bits - 1))) & ((1 << bits) - 1);
    (code ^ rotated).count_ones()
}

/// Rotation-invariant uniform LBP histogram with `neighbors + 2` bins,
/// L1-normalised over all interior pixels.
///
/// Neighbors are sampled on a circle of the given radius (bilinear where the
/// sample point is off-lattice) and compared to the center with `>=`.
/// Uniform codes (at most two circular bit transitions) fall in the bin of
/// their bit count; the rest share the last bin.
pub fn lbp_riu2(patch: &Patch, neighbors: usize, radius: f64) -> Result<Vec<f64>, FeatureError> {
    assert!(patch.channels() == 1, "lbp_riu2 expects a grayscale patch");
    assert!((1..=24).contains(&neighbors));
    let margin = radius.ceil() as usize;
    let side = patch.size();
    if side as f64 <= 2.0 * radius || side < 2 * margin + 1 {
        return Err(FeatureError::PatchTooSmall { side, radius });
    }
    let offsets = circle_offsets(neighbors, radius);
    let mut counts = vec![0u64; neighbors + 2];
    for y in margin..side - margin {
        for x in margin..side - margin {
            let center = patch.get(x, y, 0);
            let eps = LBP_TIE_EPS * center.abs().max(1.0);
            let mut code = 0u32;
            for (k, off) in offsets.iter().enumerate() {
                if sample(patch, x, y, off) - center >= -eps {
                    code |= 1 << k;
                }
            }
            let bin = if circular_transitions(code, neighbors as u32) <= 2 {
                code.count_ones() as usize
            } else {
                neighbors + 1
            };
            counts[bin] += 1;
        }
    }
    let total = counts.iter().sum::<u64>() as f64;
    Ok(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Per-channel mean, population standard deviation and energy (mean squared
/// value) of H (scaled to `[0,1]` by /360), S and I.
pub fn hsi_color_features(patch: &Patch) -> Result<[f64; 9], FeatureError> {
    if patch.channels() != 3 {
        return Err(ImagingError::ChannelMismatch { expected: 3, got: patch.channels() }.into());
    }
    let n = (patch.size() * patch.size()) as f64;
    let mut sums = [0.0f64; 3];
    let mut sq_sums = [0.0f64; 3];
    let mut hsi = Vec::with_capacity(patch.size() * patch.size());
    for px in patch.data().chunks_exact(3) {
        let (h, s, i) = rgb_to_hsi(px[0], px[1], px[2]);
        let values = [h / 360.0, s, i];
        hsi.push(values);
        for c in 0..3 {
            sums[c] += values[c];
            sq_sums[c] += values[c] * values[c];
        }
    }
    let mut out = [0.0f64; 9];
    for c in 0..3 {
        let mean = sums[c] / n;
        let var = hsi.iter().map(|v| (v[c] - mean) * (v[c] - mean)).sum::<f64>() / n;
        out[3 * c] = mean;
        out[3 * c + 1] = var.sqrt();
        out[3 * c + 2] = sq_sums[c] / n;
    }
    Ok(out)
}

/// The full descriptor: LBP histogram over grayscale, then HSI statistics.
pub fn featurize(patch: &Patch) -> Result<FeatureVector, FeatureError> {
    let gray = to_grayscale(patch)?;
    let mut values = lbp_riu2(&gray, 8, 1.0)?;
    values.extend_from_slice(&hsi_color_features(patch)?);
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(FeatureVector { values, schema_id: SCHEMA_HSI_LBP_V1.to_string() })
}

/// A dense feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema_id: String,
    pub cols: usize,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Featurises every record; row order follows the dataset, labels use the
/// fixed class encoding.
pub fn featurize_dataset(dataset: &PatchDataset) -> Result<FeatureTable, FeatureError> {
    if dataset.records.is_empty() {
        return Err(FeatureError::EmptyDataset);
    }
    let rows: Vec<Vec<f64>> = dataset
        .records
        .par_iter()
        .map(|r| featurize(&r.patch).map(|f| f.values))
        .collect::<Result<_, _>>()?;
    let cols = rows[0].len();
    let values = rows.into_iter().flatten().collect();
    let labels = dataset.records.iter().map(|r| r.class_label.index() as u8).collect();
    Ok(FeatureTable { schema_id: SCHEMA_HSI_LBP_V1.to_string(), cols, values, labels })
}

/// Writes a feature table as CSV: schema column names plus a final `label`
/// column.
pub fn write_csv(table: &FeatureTable, path: &Path) -> Result<(), FeatureError> {
    let io_err = |source| FeatureError::Io { path: path.display().to_string(), source };
    let mut out = String::new();
    let cols = if table.schema_id == SCHEMA_HSI_LBP_V1 && table.cols == 19 {
        schema_columns()
    } else {
        (0..table.cols).map(|i| format!("f{i}")).collect()
    };
    out.push_str(&cols.join(","));
    out.push_str(",label\n");
    for i in 0..table.rows() {
        for v in table.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", table.labels[i]));
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Writes the compact binary format: magic `LPFV1`, little-endian `u32`
/// rows, `u32` cols, `f64` row-major values, then one `u8` label per row.
pub fn write_binary(table: &FeatureTable, path: &Path) -> Result<(), FeatureError> {
    let io_err = |source| FeatureError::Io { path: path.display().to_string(), source };
    let mut buf =
        Vec::with_capacity(13 + table.values.len() * 8 + table.labels.len());
    buf.extend_from_slice(LPFV_MAGIC);
    buf.extend_from_slice(&(table.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.cols as u32).to_le_bytes());
    for v in &table.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&table.labels);
    std::fs::write(path, buf).map_err(io_err)
}

/// Reads the binary format written by [`write_binary`].
pub fn read_binary(path: &Path) -> Result<FeatureTable, FeatureError> {
    let io_err = |source| FeatureError::Io { path: path.display().to_string(), source };
    let bad = |reason: &str| FeatureError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(io_err)?;
    if buf.len() < 13 || &buf[..5] != LPFV_MAGIC {
        return Err(bad("missing LPFV1 header"));
    }
    let rows = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let expected = 13 + rows * cols * 8 + rows;
    if buf.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", buf.len())));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in buf[13..13 + rows * cols * 8].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let labels = buf[13 + rows * cols * 8..].to_vec();
    let schema_id =
        if cols == 19 { SCHEMA_HSI_LBP_V1.to_string() } else { format!("dense-{cols}") };
    Ok(FeatureTable { schema_id, cols, values, labels })
}

/// Reads the CSV layout written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<FeatureTable, FeatureError> {
    let io_err = |source| FeatureError::Io { path: path.display().to_string(), source };
    let bad = |reason: String| FeatureError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let cols = header.split(',').count().saturating_sub(1);
    if cols == 0 {
        return Err(bad("header has no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 {
            return Err(bad(format!("row {i}: expected {} fields, got {}", cols + 1, fields.len())));
        }
        for f in &fields[..cols] {
            values.push(
                f.parse::<f64>().map_err(|e| bad(format!("row {i}: bad value {f:?}: {e}")))?,
            );
        }
        labels.push(
            fields[cols]
                .parse::<u8>()
                .map_err(|e| bad(format!("row {i}: bad label {:?}: {e}", fields[cols])))?,
        );
    }
    let schema_id = if cols == 19 && header.starts_with("lbp_0,") {
        SCHEMA_HSI_LBP_V1.to_string()
    } else {
        format!("dense-{cols}")
    };
    Ok(FeatureTable { schema_id, cols, values, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassLabel, View};
    use crate::patches::{PatchOrigin, PatchRecord};
    use rand::Rng;

    fn gray(size: usize, data: Vec<f64>) -> Patch {
        Patch::new(size, 1, data).unwrap()
    }

    fn random_gray(size: usize, seed: u64) -> Patch {
        let mut rng = crate::rng::stream(seed, &[]);
        gray(size, (0..size * size).map(|_| rng.random()).collect())
    }

    fn random_rgb(size: usize, seed: u64) -> Patch {
        let mut rng = crate::rng::stream(seed, &[1]);
        Patch::new(size, 3, (0..size * size * 3).map(|_| rng.random()).collect()).unwrap()
    }

    /// Exact 90° counter-clockwise rotation by index remap (test oracle).
    fn rotate90(patch: &Patch) -> Patch {
        let (n, ch) = (patch.size(), patch.channels());
        let mut data = vec![0.0; n * n * ch];
        for y in 0..n {
            for x in 0..n {
                for c in 0..ch {
                    // output (x, y) takes input (n-1-y, x)
                    data[(y * n + x) * ch + c] = patch.get(n - 1 - y, x, c);
                }
            }
        }
        Patch::new(n, ch, data).unwrap()
    }

    #[test]
    fn constant_patch_hits_bin_eight() {
        let p = gray(8, vec![0.5; 64]);
        let h = lbp_riu2(&p, 8, 1.0).unwrap();
        assert_eq!(h[8], 1.0);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
        for (i, &v) in h.iter().enumerate() {
            if i != 8 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn histogram_is_normalised() {
        for seed in 0..5 {
            let p = random_gray(12, seed);
            let h = lbp_riu2(&p, 8, 1.0).unwrap();
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(h.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rotation_invariance_is_exact() {
        for seed in 0..20 {
            let p = random_gray(14, seed);
            let h0 = lbp_riu2(&p, 8, 1.0).unwrap();
            let mut q = p.clone();
            for _ in 0..3 {
                q = rotate90(&q);
                assert_eq!(lbp_riu2(&q, 8, 1.0).unwrap(), h0, "seed {seed}");
            }
        }
    }

    #[test]
    fn gray_level_shift_and_scale_invariance() {
        for seed in 0..20 {
            let p = random_gray(12, seed + 50);
            let h0 = lbp_riu2(&p, 8, 1.0).unwrap();
            let mapped = gray(12, p.data().iter().map(|v| 0.5 * v + 0.2).collect());
            assert_eq!(lbp_riu2(&mapped, 8, 1.0).unwrap(), h0, "seed {seed}");
            let shifted = gray(12, p.data().iter().map(|v| v + 0.25).collect());
            assert_eq!(lbp_riu2(&shifted, 8, 1.0).unwrap(), h0, "seed {seed}");
        }
    }

    #[test]
    fn too_small_patch_rejected() {
        let p = gray(2, vec![0.0; 4]);
        assert!(matches!(lbp_riu2(&p, 8, 1.0), Err(FeatureError::PatchTooSmall { .. })));
    }

    #[test]
    fn hsi_features_constant_gray() {
        let p = Patch::new(4, 3, vec![0.5; 48]).unwrap();
        let f = hsi_color_features(&p).unwrap();
        assert_eq!(&f[..6], &[0.0; 6]);
        assert!((f[6] - 0.5).abs() < 1e-12);
        assert_eq!(f[7], 0.0);
        assert!((f[8] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn hsi_features_pure_red() {
        let p = Patch::new(4, 3, [1.0, 0.0, 0.0].repeat(16)).unwrap();
        let f = hsi_color_features(&p).unwrap();
        let expected = [0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0 / 3.0, 0.0, 1.0 / 9.0];
        for (a, b) in f.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn energy_decomposes_into_mean_and_variance() {
        for seed in 0..10 {
            let p = random_rgb(6, seed);
            let f = hsi_color_features(&p).unwrap();
            for c in 0..3 {
                let (m, s, e) = (f[3 * c], f[3 * c + 1], f[3 * c + 2]);
                assert!((e - (m * m + s * s)).abs() < 1e-9);
                assert!(e + 1e-15 >= m * m);
            }
        }
    }

    #[test]
    fn featurize_has_19_values_and_composes() {
        let p = Patch::new(6, 3, vec![0.5; 108]).unwrap();
        let f = featurize(&p).unwrap();
        assert_eq!(f.values.len(), 19);
        assert_eq!(f.schema_id, SCHEMA_HSI_LBP_V1);
        assert_eq!(f.values[8], 1.0); // constant gray -> all LBP mass in bin 8
        assert!((f.values[16] - 0.5).abs() < 1e-12); // i mean
    }

    #[test]
    fn featurize_is_flip_invariant() {
        use crate::augment::{flip, FlipAxis};
        for seed in 0..5 {
            let p = random_rgb(8, seed + 7);
            let a = featurize(&p).unwrap().values;
            let b = featurize(&flip(&p, FlipAxis::Horizontal)).unwrap().values;
            assert_eq!(&a[..10], &b[..10], "LBP block must match exactly");
            for (x, y) in a[10..].iter().zip(&b[10..]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn tiny_dataset(n: usize) -> PatchDataset {
        let records = (0..n)
            .map(|i| PatchRecord {
                patch: random_rgb(6, 1000 + i as u64),
                class_label: ClassLabel::ALL[i % 4],
                view: View::Section,
                source_image_id: format!("im{i}"),
                origin: PatchOrigin::Grid { x: 0, y: 0 },
            })
            .collect();
        PatchDataset::new(records, 6, 0)
    }

    #[test]
    fn dataset_featurization_shape_and_determinism() {
        let ds = tiny_dataset(9);
        let t = featurize_dataset(&ds).unwrap();
        assert_eq!(t.rows(), 9);
        assert_eq!(t.cols, 19);
        assert!(t.values.iter().all(|v| v.is_finite()));
        assert_eq!(t.labels[..4], [0, 1, 2, 3]);
        let t2 = featurize_dataset(&ds).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let ds = tiny_dataset(5);
        let t = featurize_dataset(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_binary(&t, &path).unwrap();
        assert_eq!(read_binary(&path).unwrap(), t);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = tiny_dataset(5);
        let t = featurize_dataset(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_csv(&t, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"LPFV1\x02\x00\x00\x00\x03\x00\x00\x00").unwrap();
        assert!(matches!(read_binary(&path), Err(FeatureError::Malformed { .. })));
    }
}
