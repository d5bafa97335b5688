//! Reference patch store: precomputed, unit-normalized photo patch banks
//! with positionally aligned sketch patch banks, plus the coarse level-5
//! descriptors used for candidate pre-selection. Persists to "SCGR" cache
//! files (f32 little-endian payloads) that reload byte-exactly.

use super::{extract_patches, PatchSet};
use crate::error::{Result, ScgError};
use crate::extractor::Extractor;
use crate::tensor::checkpoint::{check_magic, read_f32_payload, read_u32, write_f32_payload, write_u32};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const STORE_MAGIC: &[u8; 4] = b"SCGR";
pub const STORE_VERSION: u32 = 1;

/// One level's banks across all references. Layout of both banks is
/// `[(ref * m + patch) * d ..]`; photo rows are unit vectors (zero rows
/// are flagged and never win a match), sketch rows are raw values.
#[derive(Clone, Debug)]
pub struct LevelBank {
    pub level: u8,
    pub c: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub k: usize,
    pub photo_unit: Vec<f64>,
    pub photo_flag: Vec<bool>,
    pub sketch_raw: Vec<f64>,
}

impl LevelBank {
    pub fn grid_h(&self) -> usize {
        self.feat_h - self.k + 1
    }

    pub fn grid_w(&self) -> usize {
        self.feat_w - self.k + 1
    }

    pub fn m(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn d(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn photo_row(&self, ref_idx: usize, patch_idx: usize) -> &[f64] {
        let d = self.d();
        let off = (ref_idx * self.m() + patch_idx) * d;
        &self.photo_unit[off..off + d]
    }
}

#[derive(Clone, Debug)]
pub struct ReferencePatchStore {
    pub n_refs: usize,
    pub k: usize,
    pub banks: Vec<LevelBank>,
    /// Flattened level-5 photo maps, one row of `desc_len` per reference.
    pub desc: Vec<f64>,
    pub desc_shape: [usize; 3],
    pub fingerprint: [u8; 32],
}

impl ReferencePatchStore {
    pub fn bank(&self, level: u8) -> Result<&LevelBank> {
        self.banks
            .iter()
            .find(|b| b.level == level)
            .ok_or_else(|| ScgError::Contract(format!("store has no level {level} bank")))
    }

    pub fn desc_len(&self) -> usize {
        self.desc_shape.iter().product()
    }

    pub fn desc_row(&self, i: usize) -> &[f64] {
        let n = self.desc_len();
        &self.desc[i * n..(i + 1) * n]
    }

    pub fn levels(&self) -> Vec<u8> {
        self.banks.iter().map(|b| b.level).collect()
    }

    pub fn check_fingerprint(&self, fp: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != fp {
            return Err(ScgError::Incompatible(
                "extractor fingerprint does not match reference store".into(),
            ));
        }
        Ok(())
    }
}

fn normalize_rows(ps: &PatchSet) -> (Vec<f64>, Vec<bool>) {
    let (m, d) = (ps.m(), ps.d());
    let mut unit = vec![0.0; m * d];
    let mut flag = vec![false; m];
    for j in 0..m {
        let n = ps.norms[j];
        if n == 0.0 {
            flag[j] = true;
            continue;
        }
        for t in 0..d {
            unit[j * d + t] = ps.patches[j * d + t] / n;
        }
    }
    (unit, flag)
}

/// Replicate a grayscale [1,H,W] image to [3,H,W]; pass 3-channel through.
pub fn to_rgb(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match s {
        [3, _, _] => Ok(img.clone()),
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Tensor::new(vec![3, *h, *w], data)
        }
        _ => Err(ScgError::Dimension(format!("expected [1|3,H,W] image, got {s:?}"))),
    }
}

/// Build the store from aligned photo/sketch pairs. Banks are built for
/// `levels` (each level's map must admit k×k patches); level-5 descriptors
/// are always recorded for candidate selection.
pub fn build_reference_store(
    pairs: &[(Tensor, Tensor)],
    extractor: &Extractor,
    k: usize,
    levels: &[u8],
) -> Result<ReferencePatchStore> {
    if pairs.is_empty() {
        return Err(ScgError::Contract("reference set must be nonempty".into()));
    }
    if levels.is_empty() {
        return Err(ScgError::Config("store needs at least one level".into()));
    }
    let mut banks: Vec<LevelBank> = Vec::new();
    let mut desc = Vec::new();
    let mut desc_shape = [0usize; 3];
    for (i, (photo, sketch)) in pairs.iter().enumerate() {
        let ps = photo.shape();
        let ss = sketch.shape();
        if ps.len() != 3 || ss.len() != 3 || ps[1] != ss[1] || ps[2] != ss[2] {
            return Err(ScgError::Dimension(format!(
                "pair {i}: photo {ps:?} and sketch {ss:?} dimensions differ"
            )));
        }
        let photo_pyr = extractor.extract(photo, &format!("ref{i}"))?;
        let sketch_pyr = extractor.extract(&to_rgb(sketch)?, &format!("ref{i}s"))?;
        let l5 = photo_pyr.level(5)?;
        if i == 0 {
            desc_shape = [l5.shape()[0], l5.shape()[1], l5.shape()[2]];
        }
        desc.extend_from_slice(l5.data());

        for &lv in levels {
            let pmap = photo_pyr.level(lv)?;
            let smap = sketch_pyr.level(lv)?;
            let pp = extract_patches(pmap, k).map_err(|e| {
                ScgError::Dimension(format!("pair {i} level {lv}: {e}"))
            })?;
            let sp = extract_patches(smap, k)?;
            let (unit, flag) = normalize_rows(&pp);
            match banks.iter_mut().find(|b| b.level == lv) {
                Some(b) => {
                    if b.feat_h != pmap.shape()[1] || b.feat_w != pmap.shape()[2] {
                        return Err(ScgError::Dimension(format!(
                            "pair {i}: level {lv} map size differs from previous pairs"
                        )));
                    }
                    b.photo_unit.extend_from_slice(&unit);
                    b.photo_flag.extend_from_slice(&flag);
                    b.sketch_raw.extend_from_slice(&sp.patches);
                }
                None => banks.push(LevelBank {
                    level: lv,
                    c: pp.c,
                    feat_h: pmap.shape()[1],
                    feat_w: pmap.shape()[2],
                    k,
                    photo_unit: unit,
                    photo_flag: flag,
                    sketch_raw: sp.patches.clone(),
                }),
            }
        }
    }
    banks.sort_by_key(|b| b.level);
    Ok(ReferencePatchStore {
        n_refs: pairs.len(),
        k,
        banks,
        desc,
        desc_shape,
        fingerprint: extractor.fingerprint(),
    })
}

pub fn save_store(store: &ReferencePatchStore, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(STORE_MAGIC)?;
    write_u32(&mut w, STORE_VERSION)?;
    w.write_all(&store.fingerprint)?;
    write_u32(&mut w, store.n_refs as u32)?;
    write_u32(&mut w, store.k as u32)?;
    w.write_all(&[store.banks.len() as u8])?;
    for b in &store.banks {
        w.write_all(&[b.level])?;
        write_u32(&mut w, b.c as u32)?;
        write_u32(&mut w, b.feat_h as u32)?;
        write_u32(&mut w, b.feat_w as u32)?;
        write_u32(&mut w, b.m() as u32)?;
        write_u32(&mut w, b.d() as u32)?;
        write_f32_payload(&mut w, &b.photo_unit)?;
        write_f32_payload(&mut w, &b.sketch_raw)?;
    }
    for d in store.desc_shape {
        write_u32(&mut w, d as u32)?;
    }
    write_f32_payload(&mut w, &store.desc)?;
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ReferencePatchStore> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_magic(&mut r, STORE_MAGIC, "reference store")?;
    let version = read_u32(&mut r)?;
    if version != STORE_VERSION {
        return Err(ScgError::Incompatible(format!(
            "reference store version {version}, expected {STORE_VERSION}"
        )));
    }
    let mut fingerprint = [0u8; 32];
    r.read_exact(&mut fingerprint)?;
    let n_refs = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let mut nb = [0u8; 1];
    r.read_exact(&mut nb)?;
    let mut banks = Vec::with_capacity(nb[0] as usize);
    for _ in 0..nb[0] {
        let mut lv = [0u8; 1];
        r.read_exact(&mut lv)?;
        let c = read_u32(&mut r)? as usize;
        let feat_h = read_u32(&mut r)? as usize;
        let feat_w = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        if m != (feat_h - k + 1) * (feat_w - k + 1) || d != c * k * k {
            return Err(ScgError::Format(format!(
                "store bank level {}: inconsistent dims",
                lv[0]
            )));
        }
        let photo_unit = read_f32_payload(&mut r, n_refs * m * d)?;
        let sketch_raw = read_f32_payload(&mut r, n_refs * m * d)?;
        let photo_flag = (0..n_refs * m)
            .map(|j| photo_unit[j * d..(j + 1) * d].iter().all(|&v| v == 0.0))
            .collect();
        banks.push(LevelBank {
            level: lv[0],
            c,
            feat_h,
            feat_w,
            k,
            photo_unit,
            photo_flag,
            sketch_raw,
        });
    }
    let desc_shape = [
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    ];
    let desc = read_f32_payload(&mut r, n_refs * desc_shape.iter().product::<usize>())?;
    Ok(ReferencePatchStore { n_refs, k, banks, desc, desc_shape, fingerprint })
}
