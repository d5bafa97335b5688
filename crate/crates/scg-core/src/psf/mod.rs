//! Pseudo sketch features: dense feature-patch extraction, cosine
//! matching against a reference store, and assembly of the matched
//! sketch patches into per-photo supervision targets.

mod matching;
mod projection;
mod store;

pub use matching::{match_bruteforce, match_conv, select_candidates,MatchEntry, MatchResult};
pub use projection::pixel_projection;
pub use store::{build_reference_store, load_store, save_store, LevelBank, ReferencePatchStore};

use crate::error::{Result, ScgError};
use crate::extractor::FeaturePyramid;
use crate::tensor::graph::im2col_patch_rows;
use crate::tensor::Tensor;

/// Dense overlapping k×k patches of one feature map, stride 1.
///
/// `patches` is m×d row-major with m = (H−k+1)(W−k+1) and d = c·k²; row j
/// is the patch whose origin is grid point j in row-major order, vectorized
/// in (channel, row, col) order. `norms[j]` is the L2 norm of row j,
/// accumulated in the same element order the conv matcher uses.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub level: u8,
    pub k: usize,
    pub c: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patches: Vec<f64>,
    pub norms: Vec<f64>,
    /// Set when the patches came from a fingerprinted pyramid.
    pub fingerprint: Option<[u8; 32]>,
}

impl PatchSet {
    pub fn m(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let d = self.d();
        &self.patches[j * d..(j + 1) * d]
    }
}

/// Extract the dense patch set of a [c,H,W] feature map.
pub fn extract_patches(map: &Tensor, k: usize) -> Result<PatchSet> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(ScgError::Dimension(format!("expected [c,H,W] map, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if k % 2 == 0 || k == 0 {
        return Err(ScgError::Contract(format!("patch size must be odd and >= 1, got {k}")));
    }
    if k > h || k > w {
        return Err(ScgError::Dimension(format!("patch size {k} exceeds map {h}x{w}")));
    }
    let rows = im2col_patch_rows(map, k)?;
    let (gh, gw) = (h - k + 1, w - k + 1);
    let m = gh * gw;
    let d = c * k * k;
    let data = rows.data();
    let mut norms = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = 0.0;
        for &v in &data[j * d..(j + 1) * d] {
            acc += v * v;
        }
        norms.push(acc.sqrt());
    }
    Ok(PatchSet {
        level: 0,
        k,
        c,
        grid_h: gh,
        grid_w: gw,
        patches: data.to_vec(),
        norms,
        fingerprint: None,
    })
}

/// Patch set of one pyramid level, carrying the pyramid's fingerprint.
pub fn patches_from_pyramid(pyr: &FeaturePyramid, level: u8, k: usize) -> Result<PatchSet> {
    let map = pyr.level(level)?;
    let mut ps = extract_patches(map, k)?;
    ps.level = level;
    ps.fingerprint = Some(pyr.fingerprint);
    Ok(ps)
}

/// Assembled pseudo sketch patches for one level: row j is the stored
/// sketch patch at the matched (ref, patch) index of query patch j.
/// Excluded rows come from zero-norm queries and are skipped by losses.
#[derive(Clone, Debug)]
pub struct PsfTarget {
    pub level: u8,
    pub k: usize,
    pub c: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
    pub excluded: Vec<bool>,
}

impl PsfTarget {
    pub fn m(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Gather matched sketch patches into per-level supervision targets.
pub fn assemble_psf(
    matches: &[MatchResult],
    store: &ReferencePatchStore,
) -> Result<Vec<PsfTarget>> {
    let mut out = Vec::with_capacity(matches.len());
    for mr in matches {
        let bank = store.bank(mr.level)?;
        let (m_ref, d) = (bank.m(), bank.d());
        let mq = mr.entries.len();
        let mut data = vec![0.0; mq * d];
        let mut excluded = vec![false; mq];
        for (j, e) in mr.entries.iter().enumerate() {
            if e.flagged {
                excluded[j] = true;
                continue;
            }
            let src = (e.ref_idx as usize * m_ref + e.patch_idx as usize) * d;
            data[j * d..(j + 1) * d].copy_from_slice(&bank.sketch_raw[src..src + d]);
        }
        out.push(PsfTarget {
            level: mr.level,
            k: store.k,
            c: bank.c,
            grid_h: mr.grid_h,
            grid_w: mr.grid_w,
            data,
            excluded,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k1_patches_are_spatial_fibers() {
        let map = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let ps = extract_patches(&map, 1).unwrap();
        assert_eq!(ps.m(), 4);
        assert_eq!(ps.d(), 3);
        // patch (0,0) = channel fiber at spatial (0,0)
        assert_eq!(ps.row(0), &[0.0, 4.0, 8.0]);
        assert_eq!(ps.row(3), &[3.0, 7.0, 11.0]);
    }

    #[test]
    fn k3_hand_enumeration() {
        let map = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let ps = extract_patches(&map, 3).unwrap();
        assert_eq!(ps.m(), 4);
        assert_eq!(ps.row(0), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn matches_naive_sliding_window() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let map = Tensor::randn(&[8, 10, 10], &mut rng);
        let k = 3;
        let ps = extract_patches(&map, k).unwrap();
        assert_eq!(ps.m(), 64);
        // naive oracle: direct slicing
        let (gh, gw) = (8, 8);
        for gy in 0..gh {
            for gx in 0..gw {
                let j = gy * gw + gx;
                let mut expect = Vec::new();
                for c in 0..8 {
                    for ky in 0..k {
                        for kx in 0..k {
                            expect.push(map.at3(c, gy + ky, gx + kx));
                        }
                    }
                }
                assert_eq!(ps.row(j), &expect[..], "patch ({gy},{gx})");
                let norm: f64 = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((ps.norms[j] - norm).abs() <= 1e-6 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn oversized_patch_errors() {
        let map = Tensor::zeros(&[1, 2, 2]);
        assert!(extract_patches(&map, 3).is_err());
        assert!(extract_patches(&map, 2).is_err()); // even k
    }
}
