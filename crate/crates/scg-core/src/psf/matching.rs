//! Cosine patch matching against the reference store.
//!
//! Two routes compute the same thing. [`match_bruteforce`] walks every
//! (reference, patch) pair per query patch. [`match_conv`] treats each
//! reference's unit patch bank as convolution kernels over the query map
//! (lowered to one im2col of the query plus a matmul per reference) and
//! gets per-location query norms by convolving the squared map with a
//! ones kernel and square-rooting. Both routes accumulate every dot
//! product over the (channel, row, col) patch index in ascending order,
//! so their scores are bit-identical doubles and the argmax agrees
//! exactly under the deterministic tie-break: equal scores keep the
//! lexicographically smallest (reference, patch) index.
//!
//! Zero-norm query patches (undefined cosine) match (0,0) with score 0
//! and are flagged so downstream losses skip them; flagged (zero-norm)
//! reference patches never win.

use super::store::ReferencePatchStore;
use super::PatchSet;
use crate::error::{Result, ScgError};
use crate::extractor::FeaturePyramid;
use crate::tensor::graph::{im2col_cols, matmul_raw};
use crate::tensor::Tensor;

/// Best match of one query patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchEntry {
    pub ref_idx: u32,
    pub patch_idx: u32,
    pub score: f64,
    pub flagged: bool,
}

/// Per-level matching output, indexed like the query patch set.
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub level: u8,
    pub grid_h: usize,
    pub grid_w: usize,
    pub entries: Vec<MatchEntry>,
}

fn checked_candidates(store: &ReferencePatchStore, candidates: Option<&[usize]>) -> Result<Vec<usize>> {
    match candidates {
        None => Ok((0..store.n_refs).collect()),
        Some(c) => {
            if c.is_empty() {
                return Err(ScgError::Contract("candidate set must be nonempty".into()));
            }
            if let Some(&bad) = c.iter().find(|&&i| i >= store.n_refs) {
                return Err(ScgError::Contract(format!(
                    "candidate index {bad} out of range (N = {})",
                    store.n_refs
                )));
            }
            let mut sorted = c.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            Ok(sorted)
        }
    }
}

fn check_query_compat(
    store: &ReferencePatchStore,
    level: u8,
    k: usize,
    c: usize,
    fingerprint: Option<[u8; 32]>,
) -> Result<()> {
    if let Some(fp) = fingerprint {
        store.check_fingerprint(&fp)?;
    }
    let bank = store.bank(level)?;
    if k != store.k || c != bank.c {
        return Err(ScgError::Dimension(format!(
            "query (k={k}, c={c}) incompatible with store level {level} (k={}, c={})",
            store.k, bank.c
        )));
    }
    Ok(())
}

/// Exhaustive cosine argmax over the candidate references.
pub fn match_bruteforce(
    query: &PatchSet,
    store: &ReferencePatchStore,
    level: u8,
    candidates: Option<&[usize]>,
) -> Result<MatchResult> {
    check_query_compat(store, level, query.k, query.c, query.fingerprint)?;
    let bank = store.bank(level)?;
    let cands = checked_candidates(store, candidates)?;
    let (m_ref, d) = (bank.m(), bank.d());
    let mq = query.m();
    let mut entries = Vec::with_capacity(mq);
    for j in 0..mq {
        let qn = query.norms[j];
        if qn == 0.0 {
            entries.push(MatchEntry { ref_idx: 0, patch_idx: 0, score: 0.0, flagged: true });
            continue;
        }
        let qrow = query.row(j);
        let mut best_score = f64::NEG_INFINITY;
        let mut best = (0u32, 0u32);
        for &i in &cands {
            for jj in 0..m_ref {
                if bank.photo_flag[i * m_ref + jj] {
                    continue;
                }
                let rrow = &bank.photo_unit[(i * m_ref + jj) * d..(i * m_ref + jj + 1) * d];
                let mut dot = 0.0;
                for t in 0..d {
                    dot += qrow[t] * rrow[t];
                }
                let score = dot / qn;
                if score > best_score {
                    best_score = score;
                    best = (i as u32, jj as u32);
                }
            }
        }
        if best_score == f64::NEG_INFINITY {
            entries.push(MatchEntry { ref_idx: 0, patch_idx: 0, score: 0.0, flagged: true });
        } else {
            entries.push(MatchEntry {
                ref_idx: best.0,
                patch_idx: best.1,
                score: best_score,
                flagged: false,
            });
        }
    }
    Ok(MatchResult { level, grid_h: query.grid_h, grid_w: query.grid_w, entries })
}

/// Convolution-lowered matching over a raw [c,H,W] query feature map.
/// Returns exactly what [`match_bruteforce`] returns on the same inputs.
pub fn match_conv(
    query_map: &Tensor,
    store: &ReferencePatchStore,
    level: u8,
    candidates: Option<&[usize]>,
    fingerprint: Option<[u8; 32]>,
) -> Result<MatchResult> {
    let s = query_map.shape();
    if s.len() != 3 {
        return Err(ScgError::Dimension(format!("query map must be [c,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = store.k;
    check_query_compat(store, level, k, c, fingerprint)?;
    let bank = store.bank(level)?;
    if k > h || k > w {
        return Err(ScgError::Dimension(format!("patch size {k} exceeds query map {h}x{w}")));
    }
    let cands = checked_candidates(store, candidates)?;
    let (m_ref, d) = (bank.m(), bank.d());
    let (gh, gw) = (h - k + 1, w - k + 1);
    let mq = gh * gw;

    // One im2col of the query map serves every reference kernel bank.
    let cols = im2col_cols(query_map.data(), c, h, w, k, 1, 0);

    // Per-location norms: ones kernel over the squared map, then sqrt.
    let sq = query_map.map(|v| v * v);
    let sq_cols = im2col_cols(sq.data(), c, h, w, k, 1, 0);
    let ones = vec![1.0; d];
    let norm_sq = matmul_raw(&ones, &sq_cols, 1, d, mq);
    let qnorm: Vec<f64> = norm_sq.iter().map(|&v| v.sqrt()).collect();

    let mut best_score = vec![f64::NEG_INFINITY; mq];
    let mut best = vec![(0u32, 0u32); mq];
    for &i in &cands {
        // Reference bank i as kernels: [m_ref, d] · [d, mq] → dots.
        let kern = &bank.photo_unit[i * m_ref * d..(i + 1) * m_ref * d];
        let dots = matmul_raw(kern, &cols, m_ref, d, mq);
        for jj in 0..m_ref {
            if bank.photo_flag[i * m_ref + jj] {
                continue;
            }
            let row = &dots[jj * mq..(jj + 1) * mq];
            for j in 0..mq {
                if qnorm[j] == 0.0 {
                    continue;
                }
                let score = row[j] / qnorm[j];
                if score > best_score[j] {
                    best_score[j] = score;
                    best[j] = (i as u32, jj as u32);
                }
            }
        }
    }

    let entries = (0..mq)
        .map(|j| {
            if qnorm[j] == 0.0 || best_score[j] == f64::NEG_INFINITY {
                MatchEntry { ref_idx: 0, patch_idx: 0, score: 0.0, flagged: true }
            } else {
                MatchEntry {
                    ref_idx: best[j].0,
                    patch_idx: best[j].1,
                    score: best_score[j],
                    flagged: false,
                }
            }
        })
        .collect();
    Ok(MatchResult { level, grid_h: gh, grid_w: gw, entries })
}

/// Coarse pre-selection: the n references whose level-5 maps are most
/// cosine-similar to the query's, descending, ties by ascending index.
/// With `pooled` the descriptor is the per-channel spatial mean instead
/// of the full flattened map.
pub fn select_candidates(
    query: &FeaturePyramid,
    store: &ReferencePatchStore,
    n: usize,
    pooled: bool,
) -> Result<Vec<usize>> {
    if store.n_refs == 0 {
        return Err(ScgError::Contract("candidate selection over empty store".into()));
    }
    if n == 0 || n > store.n_refs {
        return Err(ScgError::Contract(format!(
            "n must be in 1..={}, got {n}",
            store.n_refs
        )));
    }
    store.check_fingerprint(&query.fingerprint)?;
    let l5 = query.level(5)?;
    if l5.shape() != store.desc_shape {
        return Err(ScgError::Dimension(format!(
            "query level-5 shape {:?} vs store {:?}",
            l5.shape(),
            store.desc_shape
        )));
    }
    let reduce = |raw: &[f64]| -> Vec<f64> {
        if pooled {
            let [c, h, w] = store.desc_shape;
            let hw = (h * w) as f64;
            (0..c)
                .map(|ci| raw[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
                .collect()
        } else {
            raw.to_vec()
        }
    };
    let q = reduce(l5.data());
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = (0..store.n_refs)
        .map(|i| {
            let r = reduce(store.desc_row(i));
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
            let sim = if qn == 0.0 || rn == 0.0 { 0.0 } else { dot / (qn * rn) };
            (i, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{Extractor, ExtractorSpec};
    use crate::psf::store::build_reference_store;
    use crate::psf::{extract_patches, patches_from_pyramid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pairs(n: usize, size: usize, seed: u64) -> Vec<(Tensor, Tensor)> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (
                    Tensor::randn(&[3, size, size], &mut rng).map(f64::tanh),
                    Tensor::randn(&[1, size, size], &mut rng).map(f64::tanh),
                )
            })
            .collect()
    }

    /// Independent oracle: straight double loop over the raw cosine.
    fn oracle_match(query: &PatchSet, store: &ReferencePatchStore, level: u8) -> Vec<(u32, u32, f64)> {
        let bank = store.bank(level).unwrap();
        let (m_ref, d) = (bank.m(), bank.d());
        let mut out = Vec::new();
        for j in 0..query.m() {
            let q = query.row(j);
            let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = (0u32, 0u32, f64::NEG_INFINITY);
            for i in 0..store.n_refs {
                for jj in 0..m_ref {
                    if bank.photo_flag[i * m_ref + jj] {
                        continue;
                    }
                    let r = bank.photo_row(i, jj);
                    let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = q.iter().zip(r).map(|(a, b)| a * b).sum();
                    let cosine = dot / (qn * rn);
                    if cosine > best.2 {
                        best = (i as u32, jj as u32, cosine);
                    }
                }
            }
            out.push(best);
        }
        out
    }

    #[test]
    fn self_match_scores_one_everywhere() {
        let ex = Extractor::new(ExtractorSpec::toy(5)).unwrap();
        let ps = pairs(3, 32, 10);
        let store = build_reference_store(&ps, &ex, 3, &[3, 4]).unwrap();
        let pyr = ex.extract(&ps[0].0, "q").unwrap();
        for lv in [3u8, 4u8] {
            let q = patches_from_pyramid(&pyr, lv, 3).unwrap();
            let mr = match_bruteforce(&q, &store, lv, None).unwrap();
            for (j, e) in mr.entries.iter().enumerate() {
                assert_eq!(e.ref_idx, 0, "level {lv} patch {j}");
                assert_eq!(e.patch_idx, j as u32);
                assert!((e.score - 1.0).abs() < 1e-9, "score {}", e.score);
            }
        }
    }

    #[test]
    fn positive_scaling_leaves_argmax() {
        let ex = Extractor::new(ExtractorSpec::toy(5)).unwrap();
        let ps = pairs(3, 32, 11);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let pyr = ex.extract(&ps[1].0, "q").unwrap();
        let q = patches_from_pyramid(&pyr, 3, 3).unwrap();
        let mut scaled = q.clone();
        for v in &mut scaled.patches {
            *v *= 2.5;
        }
        for n in &mut scaled.norms {
            *n *= 2.5;
        }
        let a = match_bruteforce(&q, &store, 3, None).unwrap();
        let b = match_bruteforce(&scaled, &store, 3, None).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!((ea.ref_idx, ea.patch_idx), (eb.ref_idx, eb.patch_idx));
        }
    }

    #[test]
    fn conv_equals_bruteforce_and_oracle() {
        let ex = Extractor::new(ExtractorSpec::toy(6)).unwrap();
        let ps = pairs(3, 32, 12);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let img = Tensor::randn(&[3, 32, 32], &mut rng).map(f64::tanh);
        let pyr = ex.extract(&img, "q").unwrap();
        let q = patches_from_pyramid(&pyr, 3, 3).unwrap();
        let bf = match_bruteforce(&q, &store, 3, None).unwrap();
        let cv = match_conv(pyr.level(3).unwrap(), &store, 3, None, Some(pyr.fingerprint)).unwrap();
        let or = oracle_match(&q, &store, 3);
        for j in 0..q.m() {
            let (eb, ec, eo) = (&bf.entries[j], &cv.entries[j], &or[j]);
            assert_eq!((eb.ref_idx, eb.patch_idx), (ec.ref_idx, ec.patch_idx), "patch {j}");
            assert_eq!(eb.score.to_bits(), ec.score.to_bits(), "bit-exact scores, patch {j}");
            assert_eq!((eb.ref_idx, eb.patch_idx), (eo.0, eo.1), "oracle, patch {j}");
            assert!((eb.score - eo.2).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_query_takes_lexicographic_min() {
        let ex = Extractor::new(ExtractorSpec::toy(7)).unwrap();
        let ps = pairs(2, 32, 13);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let map = Tensor::full(&[32, 8, 8], 0.3);
        let mr = match_conv(&map, &store, 3, None, None).unwrap();
        // Every location has the identical score vector, so every entry
        // must equal the first one, and scores must agree across locations.
        let first = mr.entries[0];
        for e in &mr.entries {
            assert_eq!((e.ref_idx, e.patch_idx), (first.ref_idx, first.patch_idx));
            assert_eq!(e.score.to_bits(), first.score.to_bits());
        }
    }

    #[test]
    fn zero_norm_query_patches_are_flagged() {
        let ex = Extractor::new(ExtractorSpec::toy(7)).unwrap();
        let ps = pairs(2, 32, 14);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let map = Tensor::zeros(&[32, 8, 8]);
        let q = extract_patches(&map, 3).unwrap();
        let mr = match_bruteforce(&q, &store, 3, None).unwrap();
        assert!(mr.entries.iter().all(|e| e.flagged && e.score == 0.0));
        let cv = match_conv(&map, &store, 3, None, None).unwrap();
        assert!(cv.entries.iter().all(|e| e.flagged));
    }

    #[test]
    fn fingerprint_mismatch_is_incompatible() {
        let ex = Extractor::new(ExtractorSpec::toy(7)).unwrap();
        let other = Extractor::new(ExtractorSpec::toy(8)).unwrap();
        let ps = pairs(2, 32, 15);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let pyr = other.extract(&ps[0].0, "q").unwrap();
        let q = patches_from_pyramid(&pyr, 3, 3).unwrap();
        match match_bruteforce(&q, &store, 3, None) {
            Err(crate::error::ScgError::Incompatible(_)) => {}
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn candidate_subset_restricts_search() {
        let ex = Extractor::new(ExtractorSpec::toy(9)).unwrap();
        let ps = pairs(4, 32, 16);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let pyr = ex.extract(&ps[2].0, "q").unwrap();
        let q = patches_from_pyramid(&pyr, 3, 3).unwrap();
        // Self is excluded from the candidate set, so ref 2 can never win.
        let mr = match_bruteforce(&q, &store, 3, Some(&[0, 1])).unwrap();
        assert!(mr.entries.iter().all(|e| e.ref_idx <= 1));
        assert!(match_bruteforce(&q, &store, 3, Some(&[])).is_err());
        assert!(match_bruteforce(&q, &store, 3, Some(&[9])).is_err());
    }

    #[test]
    fn select_candidates_full_and_self() {
        let ex = Extractor::new(ExtractorSpec::toy(9)).unwrap();
        let ps = pairs(4, 32, 17);
        let store = build_reference_store(&ps, &ex, 3, &[3]).unwrap();
        let pyr = ex.extract(&ps[2].0, "q").unwrap();
        let all = select_candidates(&pyr, &store, 4, false).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let top = select_candidates(&pyr, &store, 1, false).unwrap();
        assert_eq!(top, vec![2]);
        assert!(select_candidates(&pyr, &store, 0, false).is_err());
        assert!(select_candidates(&pyr, &store, 5, false).is_err());
    }
}
