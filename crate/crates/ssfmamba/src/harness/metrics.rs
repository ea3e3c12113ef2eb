//! Overlap and surface-distance metrics on binary voxel masks.
//!
//! Masks are flat bool rasters over an (H, W, D) grid, voxel (h, w, d) at
//! index h*W*D + w*D + d, unit spacing.

use crate::data::NUM_LABELS;
use crate::error::{Error, Result};

pub const REGION_NAMES: [&str; 3] = ["WT", "TC", "ET"];
/// Label sets behind each region: WT = {1,2,3}, TC = {1,3}, ET = {3}.
const REGION_LABELS: [&[u8]; 3] = [&[1, 2, 3], &[1, 3], &[3]];

/// WT/TC/ET masks from voxel class ids. The regions nest: ET <= TC <= WT.
pub fn compose_regions(labels: &[u8]) -> Result<[Vec<bool>; 3]> {
    if let Some((i, &v)) = labels.iter().enumerate().find(|(_, &v)| v >= NUM_LABELS) {
        return Err(Error::Data(format!(
            "compose_regions: label {v} at voxel {i} out of range"
        )));
    }
    Ok(REGION_LABELS
        .map(|set| labels.iter().map(|v| set.contains(v)).collect()))
}

/// 2|A∩B| / (|A|+|B|); both masks empty counts as perfect agreement (1.0).
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice masks", &[gt.len()], &[pred.len()]));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let total = pred.iter().filter(|p| **p).count() + gt.iter().filter(|g| **g).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Surface voxels: foreground with a background (or out-of-grid) voxel among
/// the 26 neighbors.
pub fn surface_voxels(mask: &[bool], dims: (usize, usize, usize)) -> Vec<bool> {
    let (h, w, d) = dims;
    let mut out = vec![false; mask.len()];
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                let i = (hh * w + ww) * d + dd;
                if !mask[i] {
                    continue;
                }
                'scan: for nh in -1i64..=1 {
                    for nw in -1i64..=1 {
                        for nd in -1i64..=1 {
                            if nh == 0 && nw == 0 && nd == 0 {
                                continue;
                            }
                            let (ah, aw, ad) =
                                (hh as i64 + nh, ww as i64 + nw, dd as i64 + nd);
                            let outside = ah < 0
                                || aw < 0
                                || ad < 0
                                || ah >= h as i64
                                || aw >= w as i64
                                || ad >= d as i64;
                            if outside
                                || !mask[((ah as usize * w) + aw as usize) * d + ad as usize]
                            {
                                out[i] = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p] == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            ((q as i64 - p as i64) * (q as i64 - p as i64)) as f64 + f[p]
        };
    }
}

/// Exact squared Euclidean distance to the nearest set voxel, by separable
/// 1D transforms along d, then w, then h.
pub fn edt_squared(set: &[bool], dims: (usize, usize, usize)) -> Vec<f64> {
    let (h, w, d) = dims;
    let mut grid: Vec<f64> = set
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0f64; h.max(w).max(d)];
    let mut buf = vec![0.0f64; h.max(w).max(d)];
    for hh in 0..h {
        for ww in 0..w {
            let base = (hh * w + ww) * d;
            line[..d].copy_from_slice(&grid[base..base + d]);
            dt_1d(&line[..d], &mut buf[..d]);
            grid[base..base + d].copy_from_slice(&buf[..d]);
        }
    }
    for hh in 0..h {
        for dd in 0..d {
            for ww in 0..w {
                line[ww] = grid[(hh * w + ww) * d + dd];
            }
            dt_1d(&line[..w], &mut buf[..w]);
            for ww in 0..w {
                grid[(hh * w + ww) * d + dd] = buf[ww];
            }
        }
    }
    for ww in 0..w {
        for dd in 0..d {
            for hh in 0..h {
                line[hh] = grid[(hh * w + ww) * d + dd];
            }
            dt_1d(&line[..h], &mut buf[..h]);
            for hh in 0..h {
                grid[(hh * w + ww) * d + dd] = buf[hh];
            }
        }
    }
    grid
}

/// Linear-interpolation percentile of a sorted sample: position p*(n-1).
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

/// Finite stand-in distance when exactly one mask is empty.
pub fn hd95_sentinel(dims: (usize, usize, usize)) -> f64 {
    let (h, w, d) = dims;
    ((h * h + w * w + d * d) as f64).sqrt()
}

/// 95th percentile of the pooled symmetric surface-to-surface distances.
/// Both masks empty -> 0; exactly one empty -> the grid-diagonal sentinel.
pub fn hd95(pred: &[bool], gt: &[bool], dims: (usize, usize, usize)) -> Result<f64> {
    let (h, w, d) = dims;
    let voxels = h * w * d;
    if pred.len() != voxels || gt.len() != voxels {
        return Err(Error::shape("hd95 masks", &[voxels], &[pred.len(), gt.len()]));
    }
    let ps = surface_voxels(pred, dims);
    let gs = surface_voxels(gt, dims);
    let np = ps.iter().filter(|v| **v).count();
    let ng = gs.iter().filter(|v| **v).count();
    if np == 0 && ng == 0 {
        return Ok(0.0);
    }
    if np == 0 || ng == 0 {
        return Ok(hd95_sentinel(dims));
    }
    let to_gt = edt_squared(&gs, dims);
    let to_pred = edt_squared(&ps, dims);
    let mut pool = Vec::with_capacity(np + ng);
    for i in 0..voxels {
        if ps[i] {
            pool.push(to_gt[i].sqrt());
        }
    }
    for i in 0..voxels {
        if gs[i] {
            pool.push(to_pred[i].sqrt());
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(percentile_sorted(&pool, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_case;
    use crate::rng::SplitMix64;

    fn mask_from(indices: &[usize], n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in indices {
            m[i] = true;
        }
        m
    }

    #[test]
    fn dice_trivial_cases() {
        let a = mask_from(&[1, 2, 3], 8);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask_from(&[4, 5], 8);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = mask_from(&[3, 4], 8);
        assert_eq!(dice(&b, &c).unwrap(), 0.5);
        assert_eq!(dice(&vec![false; 8], &vec![false; 8]).unwrap(), 1.0);
        assert!(dice(&a, &vec![false; 9]).is_err());
    }

    #[test]
    fn dice_symmetry_and_monotonicity() {
        let mut rng = SplitMix64::new(0);
        for _ in 0..20 {
            let a: Vec<bool> = (0..64).map(|_| rng.below(2) == 1).collect();
            let b: Vec<bool> = (0..64).map(|_| rng.below(2) == 1).collect();
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
        // fixed sizes |A|=|B|=4, growing overlap
        let gt = mask_from(&[0, 1, 2, 3], 16);
        let mut prev = -1.0;
        for overlap in 0..=4usize {
            let pred: Vec<usize> = (0..overlap).chain(10..(14 - overlap)).collect();
            let s = dice(&mask_from(&pred, 16), &gt).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn hd95_trivial_cases() {
        let dims = (8, 8, 8);
        let n = 512;
        let a = mask_from(&[(1 * 8 + 1) * 8 + 1], n);
        assert_eq!(hd95(&a, &a, dims).unwrap(), 0.0);
        // single voxels 3 apart along d
        let b = mask_from(&[(1 * 8 + 1) * 8 + 4], n);
        assert_eq!(hd95(&a, &b, dims).unwrap(), 3.0);
        let empty = vec![false; n];
        assert_eq!(hd95(&empty, &empty, dims).unwrap(), 0.0);
        assert_eq!(hd95(&a, &empty, dims).unwrap(), hd95_sentinel(dims));
        assert_eq!(hd95(&empty, &a, dims).unwrap(), hd95_sentinel(dims));
        assert!(hd95(&a, &vec![false; 100], dims).is_err());
    }

    /// All-pairs reference: symmetric pooled nearest-surface distances.
    fn hd95_bruteforce(pred: &[bool], gt: &[bool], dims: (usize, usize, usize)) -> f64 {
        let coords = |mask: &[bool]| -> Vec<(f64, f64, f64)> {
            let surf = surface_voxels(mask, dims);
            let (_, w, d) = dims;
            surf.iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(i, _)| {
                    (
                        (i / (w * d)) as f64,
                        ((i / d) % w) as f64,
                        (i % d) as f64,
                    )
                })
                .collect()
        };
        let (pc, gc) = (coords(pred), coords(gt));
        let nearest = |from: &[(f64, f64, f64)], to: &[(f64, f64, f64)]| -> Vec<f64> {
            from.iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) + (a.2 - b.2).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let mut pool = nearest(&pc, &gc);
        pool.extend(nearest(&gc, &pc));
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        percentile_sorted(&pool, 0.95)
    }

    #[test]
    fn hd95_matches_bruteforce_oracle() {
        let dims = (8, 8, 8);
        let mut rng = SplitMix64::new(1);
        for trial in 0..50 {
            // blobby random masks: a few seeded boxes
            let mut mk = || {
                let mut m = vec![false; 512];
                for _ in 0..(1 + rng.below(3)) {
                    let (h0, w0, d0) = (rng.below(6), rng.below(6), rng.below(6));
                    let (eh, ew, ed) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
                    for h in h0..(h0 + eh).min(8) {
                        for w in w0..(w0 + ew).min(8) {
                            for d in d0..(d0 + ed).min(8) {
                                m[(h * 8 + w) * 8 + d] = true;
                            }
                        }
                    }
                }
                m
            };
            let (a, b) = (mk(), mk());
            if a.iter().all(|v| !v) || b.iter().all(|v| !v) {
                continue;
            }
            let fast = hd95(&a, &b, dims).unwrap();
            let slow = hd95_bruteforce(&a, &b, dims);
            assert!((fast - slow).abs() < 1e-9, "trial {trial}: {fast} vs {slow}");
            let swapped = hd95(&b, &a, dims).unwrap();
            assert!((fast - swapped).abs() < 1e-12, "symmetry");
        }
    }

    #[test]
    fn edt_matches_bruteforce() {
        let dims = (5, 6, 7);
        let n = 5 * 6 * 7;
        let mut rng = SplitMix64::new(2);
        let set: Vec<bool> = (0..n).map(|_| rng.below(10) == 0).collect();
        if set.iter().any(|&v| v) {
            let fast = edt_squared(&set, dims);
            for i in 0..n {
                let (ih, iw, id) = (i / 42, (i / 7) % 6, i % 7);
                let mut best = f64::INFINITY;
                for (j, &s) in set.iter().enumerate() {
                    if s {
                        let (jh, jw, jd) = (j / 42, (j / 7) % 6, j % 7);
                        let dd = (ih as f64 - jh as f64).powi(2)
                            + (iw as f64 - jw as f64).powi(2)
                            + (id as f64 - jd as f64).powi(2);
                        best = best.min(dd);
                    }
                }
                assert!((fast[i] - best).abs() < 1e-9, "voxel {i}");
            }
        }
    }

    #[test]
    fn compose_regions_conventions() {
        let empty = compose_regions(&[0, 0, 0]).unwrap();
        assert!(empty.iter().all(|m| m.iter().all(|v| !v)));
        let single = compose_regions(&[0, 3, 0]).unwrap();
        for m in &single {
            assert_eq!(m, &vec![false, true, false]);
        }
        assert!(compose_regions(&[0, 4]).is_err());
    }

    #[test]
    fn synth_regions_nest_strictly() {
        let case = synth_case(0, (16, 16, 16)).unwrap();
        let [wt, tc, et] = compose_regions(&case.labels).unwrap();
        let count = |m: &[bool]| m.iter().filter(|v| **v).count();
        // containment
        for i in 0..wt.len() {
            assert!(!et[i] || tc[i]);
            assert!(!tc[i] || wt[i]);
        }
        assert!(0 < count(&et) && count(&et) < count(&tc) && count(&tc) < count(&wt));
    }

    #[test]
    fn surface_of_solid_block_is_its_shell() {
        let dims = (4, 4, 4);
        let full = vec![true; 64];
        let surf = surface_voxels(&full, dims);
        for h in 0..4usize {
            for w in 0..4usize {
                for d in 0..4usize {
                    let boundary = [h, w, d].iter().any(|&v| v == 0 || v == 3);
                    assert_eq!(surf[(h * 4 + w) * 4 + d], boundary);
                }
            }
        }
    }
}
