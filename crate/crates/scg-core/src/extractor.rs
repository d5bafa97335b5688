//! Frozen hierarchical feature extractor.
//!
//! A fixed-seed stack of conv/ReLU blocks with stride-2 average pooling
//! stands in for a pretrained backbone: level 3/4/5 maps are downsampled
//! by 4/8/16 relative to the input, with non-decreasing channel counts.
//! Weights are orthogonally initialized from the seed and never trained.
//! A file-backed mode consumes feature pyramids exported by external
//! tools through the same cache format, so the matching machinery does
//! not care where features came from.

use crate::error::{Result, ScgError};
use crate::tensor::checkpoint::{check_magic, read_f32_payload, read_u32, write_f32_payload, write_u32};
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"SCGF";
pub const FEATURE_VERSION: u32 = 1;

/// Feature levels carried by every pyramid.
pub const LEVELS: [u8; 3] = [3, 4, 5];

/// Input convention baked into the fingerprint so that externally
/// exported features declare how their source images were scaled.
const INPUT_CONVENTION: &str = "pixels[-1,1]";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorMode {
    ToyFixedSeed,
    FileBacked,
}

/// Construction recipe for the extractor.
#[derive(Clone, Debug)]
pub struct ExtractorSpec {
    pub mode: ExtractorMode,
    pub seed: u64,
    /// Channels of the level 3/4/5 maps.
    pub channels: [usize; 3],
    /// Spatial downsample factor per level relative to the input.
    pub downsample: [usize; 3],
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            mode: ExtractorMode::ToyFixedSeed,
            seed: 7,
            channels: [32, 64, 64],
            downsample: [4, 8, 16],
        }
    }
}

impl ExtractorSpec {
    pub fn toy(seed: u64) -> Self {
        ExtractorSpec { seed, ..Default::default() }
    }
}

/// Per-image feature maps at levels 3, 4, 5.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub source_id: String,
    pub fingerprint: [u8; 32],
    /// (level id, [c, h, w]) sorted by level.
    pub levels: Vec<(u8, Tensor)>,
}

impl FeaturePyramid {
    pub fn level(&self, l: u8) -> Result<&Tensor> {
        self.levels
            .iter()
            .find(|(lv, _)| *lv == l)
            .map(|(_, t)| t)
            .ok_or_else(|| ScgError::Contract(format!("pyramid has no level {l}")))
    }
}

/// The frozen extractor: five conv blocks, stride-2 average pools between
/// the first four, levels tapped at blocks 3, 4, 5.
pub struct Extractor {
    pub spec: ExtractorSpec,
    /// One [O,C,3,3] kernel per block; empty in file-backed mode.
    kernels: Vec<Tensor>,
    fingerprint: [u8; 32],
}

/// Rows of a seeded Gaussian matrix, Gram-Schmidt orthonormalized and
/// scaled by √2 to hold variance through the ReLUs.
fn orthogonal_rows(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    assert!(rows <= cols, "orthogonal init needs rows <= cols");
    let mut mat = Tensor::randn(&[rows, cols], rng).data().to_vec();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| mat[i * cols + c] * mat[j * cols + c]).sum();
            for c in 0..cols {
                mat[i * cols + c] -= dot * mat[j * cols + c];
            }
        }
        let norm: f64 = (0..cols).map(|c| mat[i * cols + c].powi(2)).sum::<f64>().sqrt();
        let s = std::f64::consts::SQRT_2 / norm.max(1e-12);
        for c in 0..cols {
            mat[i * cols + c] *= s;
        }
    }
    mat
}

impl Extractor {
    pub fn new(spec: ExtractorSpec) -> Result<Self> {
        if spec.mode == ExtractorMode::FileBacked {
            return Err(ScgError::Contract(
                "file-backed extractor has no weights; load pyramids from cache files".into(),
            ));
        }
        let [c3, c4, c5] = spec.channels;
        if c4 < c3 || c5 < c4 {
            return Err(ScgError::Config(
                "channel counts must be non-decreasing with level".into(),
            ));
        }
        if spec.downsample != [4, 8, 16] {
            return Err(ScgError::Config(
                "toy extractor taps levels at fixed downsample factors 4/8/16".into(),
            ));
        }
        let c1 = (c3 / 4).max(1);
        let c2 = (c3 / 2).max(1);
        let widths = [3, c1, c2, c3, c4, c5];
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let mut kernels = Vec::with_capacity(5);
        for b in 0..5 {
            let (cin, cout) = (widths[b], widths[b + 1]);
            let rows = orthogonal_rows(cout, cin * 9, &mut rng);
            kernels.push(Tensor::new(vec![cout, cin, 3, 3], rows)?);
        }
        let fingerprint = fingerprint_of(&spec, &kernels);
        Ok(Extractor { spec, kernels, fingerprint })
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Graph forward over a batch: returns the level 3/4/5 vars. Weights
    /// enter as constants, so gradients flow through to the input only.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<(u8, Var)>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ScgError::Dimension(format!(
                "extractor input must be [B,3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(ScgError::Dimension(format!(
                "extractor input {h}x{w} must be divisible by 16; pad to {}x{}",
                h.next_multiple_of(16),
                w.next_multiple_of(16)
            )));
        }
        let mut cur = x;
        let mut levels = Vec::new();
        for (b, kern) in self.kernels.iter().enumerate() {
            let kv = g.constant(kern.clone());
            let conv = g.conv2d(cur, kv, 1, 1)?;
            cur = g.relu(conv);
            if b >= 2 {
                levels.push((LEVELS[b - 2], cur));
            }
            if b < 4 {
                cur = g.avg_pool2d(cur, 2, 2)?;
            }
        }
        Ok(levels)
    }

    /// Extract a pyramid for a single [3,H,W] image; pure in (image, seed).
    pub fn extract(&self, image: &Tensor, source_id: &str) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(ScgError::Dimension(format!(
                "extract expects [3,H,W], got {s:?}"
            )));
        }
        let batched = image.reshaped(&[1, s[0], s[1], s[2]])?;
        let mut g = Graph::new();
        g.set_check_finite(false);
        let xv = g.constant(batched);
        let levels = self.forward_graph(&mut g, xv)?;
        let mut out = Vec::with_capacity(levels.len());
        for (lv, var) in levels {
            let t = g.value(var);
            let ts = t.shape().to_vec();
            out.push((lv, t.reshaped(&[ts[1], ts[2], ts[3]])?));
        }
        Ok(FeaturePyramid {
            source_id: source_id.to_string(),
            fingerprint: self.fingerprint,
            levels: out,
        })
    }
}

fn fingerprint_of(spec: &ExtractorSpec, kernels: &[Tensor]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(INPUT_CONVENTION.as_bytes());
    h.update(spec.seed.to_le_bytes());
    for c in spec.channels {
        h.update((c as u64).to_le_bytes());
    }
    for k in kernels {
        for &v in k.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Write a pyramid to the feature cache format.
pub fn save_features(pyr: &FeaturePyramid, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, FEATURE_VERSION)?;
    w.write_all(&pyr.fingerprint)?;
    w.write_all(&[pyr.levels.len() as u8])?;
    for (lv, t) in &pyr.levels {
        let s = t.shape();
        w.write_all(&[*lv])?;
        write_u32(&mut w, s[0] as u32)?;
        write_u32(&mut w, s[1] as u32)?;
        write_u32(&mut w, s[2] as u32)?;
        write_f32_payload(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a pyramid back; the source id is the file stem.
pub fn load_features(path: &Path) -> Result<FeaturePyramid> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_magic(&mut r, FEATURE_MAGIC, "feature cache")?;
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(ScgError::Incompatible(format!(
            "feature cache version {version}, expected {FEATURE_VERSION}"
        )));
    }
    let mut fingerprint = [0u8; 32];
    r.read_exact(&mut fingerprint)?;
    let mut nl = [0u8; 1];
    r.read_exact(&mut nl)?;
    let mut levels = Vec::with_capacity(nl[0] as usize);
    for _ in 0..nl[0] {
        let mut lv = [0u8; 1];
        r.read_exact(&mut lv)?;
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let data = read_f32_payload(&mut r, c * h * w)?;
        levels.push((lv[0], Tensor::new(vec![c, h, w], data)?));
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeaturePyramid { source_id, fingerprint, levels })
}

/// Header-predicted byte size of a feature cache file.
pub fn predicted_cache_size(levels: &[(u8, Tensor)]) -> usize {
    4 + 4 + 32 + 1 + levels.iter().map(|(_, t)| 1 + 12 + 4 * t.numel()).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let ex = Extractor::new(ExtractorSpec::toy(3)).unwrap();
        let img = Tensor::zeros(&[3, 32, 32]);
        let pyr = ex.extract(&img, "zero").unwrap();
        for (_, t) in &pyr.levels {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_expected_shapes() {
        let ex = Extractor::new(ExtractorSpec::toy(11)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = Tensor::randn(&[3, 64, 64], &mut rng).map(f64::tanh);
        let a = ex.extract(&img, "a").unwrap();
        let b = ex.extract(&img, "b").unwrap();
        let shapes: Vec<_> = a.levels.iter().map(|(l, t)| (*l, t.shape().to_vec())).collect();
        assert_eq!(
            shapes,
            vec![
                (3u8, vec![32, 16, 16]),
                (4u8, vec![64, 8, 8]),
                (5u8, vec![64, 4, 4])
            ]
        );
        for ((_, ta), (_, tb)) in a.levels.iter().zip(&b.levels) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn non_divisible_dims_error_mentions_padding() {
        let ex = Extractor::new(ExtractorSpec::toy(1)).unwrap();
        let img = Tensor::zeros(&[3, 40, 64]);
        let err = ex.extract(&img, "x").unwrap_err();
        assert!(err.to_string().contains("48"), "{err}");
    }

    #[test]
    fn feature_cache_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ex = Extractor::new(ExtractorSpec::toy(2)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let img = Tensor::randn(&[3, 32, 32], &mut rng).map(f64::tanh);
        let pyr = ex.extract(&img, "img0").unwrap();
        let p1 = dir.path().join("img0.scgf");
        save_features(&pyr, &p1).unwrap();
        let loaded = load_features(&p1).unwrap();
        assert_eq!(loaded.fingerprint, pyr.fingerprint);
        assert_eq!(loaded.source_id, "img0");
        let p2 = dir.path().join("again.scgf");
        save_features(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::metadata(&p1).unwrap().len() as usize,
            predicted_cache_size(&pyr.levels)
        );
    }

    #[test]
    fn shift_covariance_at_level5() {
        // Translating the input by 16 px shifts the level-5 map by one cell;
        // compare interior cells outside the receptive-field halo.
        let ex = Extractor::new(ExtractorSpec::toy(21)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let big = Tensor::randn(&[3, 192, 160], &mut rng).map(f64::tanh);
        let crop = |dy: usize| {
            let mut out = Tensor::zeros(&[3, 160, 160]);
            for c in 0..3 {
                for y in 0..160 {
                    for x in 0..160 {
                        let v = big.at3(c, y + dy, x);
                        out.data_mut()[(c * 160 + y) * 160 + x] = v;
                    }
                }
            }
            out
        };
        let p0 = ex.extract(&crop(0), "a").unwrap();
        let p1 = ex.extract(&crop(16), "b").unwrap();
        let a = p0.level(5).unwrap();
        let b = p1.level(5).unwrap();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let halo = 3;
        let mut worst = 0.0f64;
        for ci in 0..c {
            for y in halo..h - halo - 1 {
                for x in halo..w - halo {
                    // map b row y corresponds to map a row y+1
                    worst = worst.max((b.at3(ci, y, x) - a.at3(ci, y + 1, x)).abs());
                }
            }
        }
        assert!(worst < 1e-9, "shift covariance violated: {worst}");
    }

    #[test]
    fn fingerprint_tracks_seed() {
        let a = Extractor::new(ExtractorSpec::toy(1)).unwrap();
        let b = Extractor::new(ExtractorSpec::toy(2)).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
