//! 3D multi-directional scanning: bijective voxel-grid-to-sequence orderings.
//!
//! Canonical linear index of voxel (h, w, d) on an (H, W, D) grid is
//! h*(W*D) + w*D + d, matching the volume file layout. Forward scanning only;
//! on the half-spectrum grid a forward scan already carries the mirrored
//! information of the redundant half.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::diffcore::NdArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum OrderKind {
    /// Whole depth-slices consecutively: d outermost, then h, then w.
    InSlice,
    /// Depth fibers consecutively: (h, w) outermost, then d.
    CrossSlice,
    /// block^3 sub-cubes in raster order of their origins, each emitted in
    /// (h, w, d)-raster order; ragged edge blocks truncated to the grid.
    Local3D,
}

/// A bijective sequence-position -> linear-voxel-index permutation with its inverse.
#[derive(Clone, Debug)]
pub struct ScanOrder {
    pub grid_shape: (usize, usize, usize),
    /// forward[i] = linear voxel index scanned at sequence position i.
    pub forward: Arc<Vec<usize>>,
    /// inverse[forward[i]] == i.
    pub inverse: Arc<Vec<usize>>,
}

pub fn build_order(kind: OrderKind, grid: (usize, usize, usize), block: usize) -> Result<ScanOrder> {
    let (h, w, d) = grid;
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w, d],
            reason: "grid extents must be >= 1".into(),
        });
    }
    if block == 0 {
        return Err(Error::Config("scan block must be >= 1".into()));
    }
    let lin = |hh: usize, ww: usize, dd: usize| hh * (w * d) + ww * d + dd;
    let mut forward = Vec::with_capacity(h * w * d);
    match kind {
        OrderKind::InSlice => {
            for dd in 0..d {
                for hh in 0..h {
                    for ww in 0..w {
                        forward.push(lin(hh, ww, dd));
                    }
                }
            }
        }
        OrderKind::CrossSlice => {
            for hh in 0..h {
                for ww in 0..w {
                    for dd in 0..d {
                        forward.push(lin(hh, ww, dd));
                    }
                }
            }
        }
        OrderKind::Local3D => {
            let mut bh = 0;
            while bh < h {
                let mut bw = 0;
                while bw < w {
                    let mut bd = 0;
                    while bd < d {
                        for hh in bh..(bh + block).min(h) {
                            for ww in bw..(bw + block).min(w) {
                                for dd in bd..(bd + block).min(d) {
                                    forward.push(lin(hh, ww, dd));
                                }
                            }
                        }
                        bd += block;
                    }
                    bw += block;
                }
                bh += block;
            }
        }
    }
    let mut inverse = vec![0usize; forward.len()];
    for (i, &v) in forward.iter().enumerate() {
        inverse[v] = i;
    }
    Ok(ScanOrder {
        grid_shape: grid,
        forward: Arc::new(forward),
        inverse: Arc::new(inverse),
    })
}

type CacheKey = (OrderKind, (usize, usize, usize), usize);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<ScanOrder>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<ScanOrder>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Orders are pure functions of (kind, shape, block); cached and shared.
pub fn cached_order(kind: OrderKind, grid: (usize, usize, usize), block: usize) -> Result<Arc<ScanOrder>> {
    let key = (kind, grid, block);
    let mut map = cache().lock().expect("order cache poisoned");
    if let Some(o) = map.get(&key) {
        return Ok(Arc::clone(o));
    }
    let order = Arc::new(build_order(kind, grid, block)?);
    map.insert(key, Arc::clone(&order));
    Ok(order)
}

fn expect_cl(x: &NdArray, l: usize, context: &str) -> Result<usize> {
    match x.shape() {
        [c, ll] if *ll == l => Ok(*c),
        s => Err(Error::shape(context, &[0, l], s)),
    }
}

/// Gather a [C, H, W, D] (or [C, L]) array into scan order: out[c, i] = x[c, forward[i]].
pub fn apply_order(x: &NdArray, order: &ScanOrder) -> Result<NdArray> {
    let l = order.forward.len();
    let c = match x.shape() {
        [c, h, w, d] if (*h, *w, *d) == order.grid_shape => *c,
        [c, ll] if *ll == l => *c,
        s => {
            return Err(Error::shape(
                "apply_order",
                &[0, order.grid_shape.0, order.grid_shape.1, order.grid_shape.2],
                s,
            ))
        }
    };
    let xd = x.data();
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let src = &xd[ch * l..(ch + 1) * l];
        let dst = &mut out[ch * l..(ch + 1) * l];
        for (i, &v) in order.forward.iter().enumerate() {
            dst[i] = src[v];
        }
    }
    NdArray::new(vec![c, l], out)
}

/// Exact inverse of `apply_order`; output restored to [C, H, W, D].
pub fn invert_order(seq: &NdArray, order: &ScanOrder) -> Result<NdArray> {
    let l = order.forward.len();
    let c = expect_cl(seq, l, "invert_order")?;
    let sd = seq.data();
    let (h, w, d) = order.grid_shape;
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let src = &sd[ch * l..(ch + 1) * l];
        let dst = &mut out[ch * l..(ch + 1) * l];
        for (j, &i) in order.inverse.iter().enumerate() {
            dst[j] = src[i];
        }
    }
    NdArray::new(vec![c, h, w, d], out)
}
