//! Volume ingestion and generation: a bit-exact binary format, deterministic
//! random cropping, and a synthetic multi-modal tumor phantom.
//!
//! Labels: 0 background, 1 NCR, 2 ED, 3 ET. Modalities by convention
//! T1, T1c, T2, FLAIR.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::diffcore::NdArray;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const NUM_LABELS: u8 = 4;
const MAGIC: &[u8; 5] = b"SSFV1";

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// [C, H, W, D] float64 intensities.
    pub image: NdArray,
    /// One class id per voxel, raster order (h, w, d).
    pub labels: Vec<u8>,
}

impl Case {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "case image must be [C,H,W,D]".into(),
            });
        }
        let voxels = s[1] * s[2] * s[3];
        if self.labels.len() != voxels {
            return Err(Error::Data(format!(
                "case {}: {} labels for {voxels} voxels",
                self.id,
                self.labels.len()
            )));
        }
        if let Some((i, &v)) = self.labels.iter().enumerate().find(|(_, &v)| v >= NUM_LABELS) {
            return Err(Error::Data(format!(
                "case {}: label value {v} at voxel {i} exceeds {}",
                self.id,
                NUM_LABELS - 1
            )));
        }
        if let Some(bad) = self.image.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "case {}: non-finite intensity {bad}",
                self.id
            )));
        }
        Ok(())
    }
}

// -- SSFV1 file format ----------------------------------------------------------

fn write_header(w: &mut impl Write, kind: u8, dims: [u32; 4], path: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[kind]).map_err(io)?;
    for d in dims {
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Data(format!("{path}: truncated payload"))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_header(r: &mut impl Read, path: &str) -> Result<(u8, [usize; 4])> {
    let mut magic = [0u8; 5];
    read_exact(r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{path}: bad magic, not an SSFV1 volume")));
    }
    let mut kind = [0u8; 1];
    read_exact(r, &mut kind, path)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, path)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    Ok((kind[0], dims))
}

pub fn save_image(path: &Path, image: &NdArray) -> Result<()> {
    let ps = path.display().to_string();
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "image volume must be [C,H,W,D]".into(),
        });
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(&ps, e))?);
    write_header(&mut f, 0, [s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32], &ps)?;
    for &v in image.data() {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&ps, e))?;
    }
    f.flush().map_err(|e| Error::io(&ps, e))
}

pub fn load_image(path: &Path) -> Result<NdArray> {
    let ps = path.display().to_string();
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(&ps, e))?);
    let (kind, dims) = read_header(&mut f, &ps)?;
    if kind != 0 {
        return Err(Error::Data(format!("{ps}: expected image kind 0, found {kind}")));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(&mut f, &mut b, &ps)?;
        data.push(f64::from_le_bytes(b));
    }
    NdArray::new(dims.to_vec(), data)
}

pub fn save_labels(path: &Path, labels: &[u8], dims: (usize, usize, usize)) -> Result<()> {
    let ps = path.display().to_string();
    let (h, w, d) = dims;
    if labels.len() != h * w * d {
        return Err(Error::Data(format!(
            "{ps}: {} labels for {}x{}x{} grid",
            labels.len(),
            h,
            w,
            d
        )));
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(&ps, e))?);
    write_header(&mut f, 1, [1, h as u32, w as u32, d as u32], &ps)?;
    f.write_all(labels).map_err(|e| Error::io(&ps, e))?;
    f.flush().map_err(|e| Error::io(&ps, e))
}

pub fn load_labels(path: &Path) -> Result<(Vec<u8>, (usize, usize, usize))> {
    let ps = path.display().to_string();
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(&ps, e))?);
    let (kind, dims) = read_header(&mut f, &ps)?;
    if kind != 1 {
        return Err(Error::Data(format!("{ps}: expected label kind 1, found {kind}")));
    }
    if dims[0] != 1 {
        return Err(Error::Data(format!("{ps}: label volume must have 1 channel, found {}", dims[0])));
    }
    let n = dims[1] * dims[2] * dims[3];
    let mut labels = vec![0u8; n];
    read_exact(&mut f, &mut labels, &ps)?;
    if let Some((i, &v)) = labels.iter().enumerate().find(|(_, &v)| v >= NUM_LABELS) {
        return Err(Error::Data(format!(
            "{ps}: label value {v} at voxel {i} exceeds {}",
            NUM_LABELS - 1
        )));
    }
    Ok((labels, (dims[1], dims[2], dims[3])))
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.img.ssfv"))
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.lbl.ssfv"))
}

pub fn save_case(dir: &Path, case: &Case) -> Result<()> {
    case.validate()?;
    save_image(&image_path(dir, &case.id), &case.image)?;
    save_labels(&labels_path(dir, &case.id), &case.labels, case.dims())
}

pub fn load_case(dir: &Path, id: &str) -> Result<Case> {
    let image = load_image(&image_path(dir, id))?;
    let (labels, dims) = load_labels(&labels_path(dir, id))?;
    let s = image.shape();
    if (s[1], s[2], s[3]) != dims {
        return Err(Error::Data(format!(
            "case {id}: image grid {:?} does not match label grid {:?}",
            &s[1..],
            dims
        )));
    }
    let case = Case {
        id: id.to_string(),
        image,
        labels,
    };
    case.validate()?;
    Ok(case)
}

/// Case ids present in a dataset directory (those with both file halves),
/// sorted for reproducible iteration order.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let ps = dir.display().to_string();
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(&ps, e))? {
        let entry = entry.map_err(|e| Error::io(&ps, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".img.ssfv") {
            if labels_path(dir, id).exists() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

// -- cropping --------------------------------------------------------------------

/// Deterministic crop: the origin is drawn uniformly (h, then w, then d) from
/// all valid positions with a splitmix64 stream seeded as given.
pub fn random_crop(case: &Case, size: (usize, usize, usize), seed: u64) -> Result<Case> {
    let (h, w, d) = case.dims();
    let (ch, cw, cd) = size;
    if ch > h || cw > w || cd > d || ch == 0 || cw == 0 || cd == 0 {
        return Err(Error::Data(format!(
            "crop {ch}x{cw}x{cd} does not fit inside {h}x{w}x{d}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let oh = rng.below(h - ch + 1);
    let ow = rng.below(w - cw + 1);
    let od = rng.below(d - cd + 1);
    let c = case.image.shape()[0];
    let src = case.image.data();
    let mut img = Vec::with_capacity(c * ch * cw * cd);
    for ci in 0..c {
        for hh in 0..ch {
            for ww in 0..cw {
                let base = ((ci * h + oh + hh) * w + ow + ww) * d + od;
                img.extend_from_slice(&src[base..base + cd]);
            }
        }
    }
    let mut labels = Vec::with_capacity(ch * cw * cd);
    for hh in 0..ch {
        for ww in 0..cw {
            let base = ((oh + hh) * w + ow + ww) * d + od;
            labels.extend_from_slice(&case.labels[base..base + cd]);
        }
    }
    Ok(Case {
        id: format!("{}_crop{oh}_{ow}_{od}", case.id),
        image: NdArray::new(vec![c, ch, cw, cd], img)?,
        labels,
    })
}

// -- synthetic phantom -------------------------------------------------------------

/// Per-axis fraction of the extent used as the outer (ED) ellipsoid radius.
const ED_FRAC: f64 = 0.30;
/// Normalized-radius cutoffs inside the ED ellipsoid: NCR core, then ET rim.
const NCR_CUT: f64 = 0.45;
const ET_CUT: f64 = 0.72;
/// Mean intensity per [modality][label]; modalities T1, T1c, T2, FLAIR.
const INTENSITY: [[f64; 4]; 4] = [
    [0.2, 1.0, 0.6, 0.8],
    [0.3, 0.5, 0.9, 1.4],
    [0.1, 1.2, 1.5, 0.7],
    [0.4, 0.8, 1.1, 1.6],
];
const NOISE_SIGMA: f64 = 0.1;

/// Nested ellipsoid phantom: NCR core inside an ET rim inside an ED shell, at
/// a seeded random center; four noisy modalities keyed off the tissue class.
pub fn synth_case(seed: u64, extents: (usize, usize, usize)) -> Result<Case> {
    let (h, w, d) = extents;
    if h < 12 || w < 12 || d < 12 {
        return Err(Error::Data(format!(
            "extents {h}x{w}x{d} too small for the nested phantom (need >= 12 per axis)"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let radius = |e: usize| ED_FRAC * e as f64;
    let (rh, rw, rd) = (radius(h), radius(w), radius(d));
    let center = |e: usize, r: f64, rng: &mut SplitMix64| rng.uniform(r, e as f64 - 1.0 - r);
    let ch = center(h, rh, &mut rng);
    let cw = center(w, rw, &mut rng);
    let cd = center(d, rd, &mut rng);
    let mut labels = Vec::with_capacity(h * w * d);
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                let dh = (hh as f64 - ch) / rh;
                let dw = (ww as f64 - cw) / rw;
                let dz = (dd as f64 - cd) / rd;
                let rho = (dh * dh + dw * dw + dz * dz).sqrt();
                labels.push(if rho <= NCR_CUT {
                    1
                } else if rho <= ET_CUT {
                    3
                } else if rho <= 1.0 {
                    2
                } else {
                    0
                });
            }
        }
    }
    let voxels = h * w * d;
    let mut img = Vec::with_capacity(4 * voxels);
    for table in &INTENSITY {
        for &lab in &labels {
            img.push(table[lab as usize] + NOISE_SIGMA * rng.gaussian());
        }
    }
    let case = Case {
        id: format!("synth{seed}"),
        image: NdArray::new(vec![4, h, w, d], img)?,
        labels,
    };
    // the phantom must realize every class so region metrics stay meaningful
    for lab in 0..NUM_LABELS {
        if !case.labels.contains(&lab) {
            return Err(Error::Data(format!(
                "phantom seed {seed} at {h}x{w}x{d} produced no voxels of class {lab}"
            )));
        }
    }
    Ok(case)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ssfm_data_{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn case_roundtrip_is_bitwise() {
        let case = synth_case(3, (12, 13, 14)).unwrap();
        let dir = tmp_dir("roundtrip");
        save_case(&dir, &case).unwrap();
        let back = load_case(&dir, &case.id).unwrap();
        assert_eq!(case, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmp_dir("badmagic");
        let p = dir.join("x.img.ssfv");
        std::fs::write(&p, b"XXXX1junkjunkjunkjunkjunk").unwrap();
        let e = load_image(&p).unwrap_err();
        assert!(e.to_string().contains("bad magic"), "{e}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_of_range_label_names_the_voxel() {
        let dir = tmp_dir("badlabel");
        let p = dir.join("x.lbl.ssfv");
        let mut labels = vec![0u8; 8];
        labels[5] = 7;
        // write raw to bypass the save-side validation
        let mut f = File::create(&p).unwrap();
        f.write_all(b"SSFV1").unwrap();
        f.write_all(&[1u8]).unwrap();
        for dim in [1u32, 2, 2, 2] {
            f.write_all(&dim.to_le_bytes()).unwrap();
        }
        f.write_all(&labels).unwrap();
        drop(f);
        let e = load_labels(&p).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("label value 7") && msg.contains("voxel 5"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tmp_dir("trunc");
        let case = synth_case(0, (12, 12, 12)).unwrap();
        save_case(&dir, &case).unwrap();
        let p = image_path(&dir, &case.id);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        let e = load_image(&p).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn full_size_crop_is_identity() {
        let case = synth_case(1, (12, 12, 12)).unwrap();
        let crop = random_crop(&case, (12, 12, 12), 99).unwrap();
        assert_eq!(case.image, crop.image);
        assert_eq!(case.labels, crop.labels);
    }

    #[test]
    fn crop_is_deterministic_and_bounded() {
        let case = synth_case(2, (16, 16, 16)).unwrap();
        let a = random_crop(&case, (8, 8, 8), 7).unwrap();
        let b = random_crop(&case, (8, 8, 8), 7).unwrap();
        assert_eq!(a, b);
        assert!(random_crop(&case, (17, 8, 8), 0).is_err());
    }

    #[test]
    fn crop_preserves_image_label_alignment() {
        let case = synth_case(4, (16, 14, 12)).unwrap();
        let crop = random_crop(&case, (6, 5, 4), 11).unwrap();
        // recover the origin from the generated id
        let parts: Vec<usize> = crop
            .id
            .rsplit("crop")
            .next()
            .unwrap()
            .split('_')
            .map(|s| s.parse().unwrap())
            .collect();
        let (oh, ow, od) = (parts[0], parts[1], parts[2]);
        let (_, w, d) = case.dims();
        for hh in 0..6 {
            for ww in 0..5 {
                for dd in 0..4 {
                    let src = ((oh + hh) * w + ow + ww) * d + od + dd;
                    let dst = (hh * 5 + ww) * 4 + dd;
                    assert_eq!(crop.labels[dst], case.labels[src]);
                    assert_eq!(crop.image.data()[dst], case.image.data()[src]);
                }
            }
        }
    }

    #[test]
    fn crop_origins_cover_the_valid_set() {
        // 8^3 -> 4^3: origins live on [0,4]^3, 125 possibilities
        let case = synth_case(5, (12, 12, 12)).unwrap();
        let case = random_crop(&case, (8, 8, 8), 0).unwrap();
        let mut seen = HashSet::new();
        for seed in 0..1000u64 {
            let mut rng = SplitMix64::new(seed);
            let o = (rng.below(5), rng.below(5), rng.below(5));
            assert!(o.0 <= 4 && o.1 <= 4 && o.2 <= 4);
            // the crop must land at exactly the origin this stream dictates
            let crop = random_crop(&case, (4, 4, 4), seed).unwrap();
            assert!(crop.id.ends_with(&format!("crop{}_{}_{}", o.0, o.1, o.2)));
            seen.insert(o);
        }
        assert!(seen.len() * 10 > 125 * 9, "only {} of 125 origins seen", seen.len());
    }

    #[test]
    fn phantom_contains_all_classes_and_nests_strictly() {
        let case = synth_case(0, (16, 16, 16)).unwrap();
        let count = |lab: u8| case.labels.iter().filter(|&&v| v == lab).count();
        for lab in 0..4 {
            assert!(count(lab) > 0, "class {lab} missing");
        }
        // strict nesting of the composed regions
        let et = count(3);
        let tc = et + count(1);
        let wt = tc + count(2);
        assert!(0 < et && et < tc && tc < wt && wt < case.labels.len());
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = synth_case(8, (13, 12, 15)).unwrap();
        let b = synth_case(8, (13, 12, 15)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_centers_vary_with_seed() {
        let centroid = |c: &Case| {
            let (h, w, d) = c.dims();
            let mut acc = (0.0, 0.0, 0.0);
            let mut n = 0.0;
            for hh in 0..h {
                for ww in 0..w {
                    for dd in 0..d {
                        if c.labels[(hh * w + ww) * d + dd] != 0 {
                            acc = (acc.0 + hh as f64, acc.1 + ww as f64, acc.2 + dd as f64);
                            n += 1.0;
                        }
                    }
                }
            }
            (acc.0 / n, acc.1 / n, acc.2 / n)
        };
        let mut centers = Vec::new();
        for seed in 0..10u64 {
            centers.push(centroid(&synth_case(seed, (16, 16, 16)).unwrap()));
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let (a, b) = (centers[i], centers[j]);
                let dist =
                    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) + (a.2 - b.2).powi(2)).sqrt();
                assert!(dist > 1e-6, "seeds {i} and {j} share a center");
            }
        }
    }

    #[test]
    fn phantom_rejects_small_extents() {
        assert!(synth_case(0, (11, 16, 16)).is_err());
    }

    #[test]
    fn list_cases_finds_pairs() {
        let dir = tmp_dir("list");
        let a = synth_case(1, (12, 12, 12)).unwrap();
        let b = synth_case(2, (12, 12, 12)).unwrap();
        save_case(&dir, &a).unwrap();
        save_case(&dir, &b).unwrap();
        // an unpaired image must not be listed
        save_image(&dir.join("orphan.img.ssfv"), &a.image).unwrap();
        let ids = list_cases(&dir).unwrap();
        assert_eq!(ids, vec!["synth1".to_string(), "synth2".to_string()]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
