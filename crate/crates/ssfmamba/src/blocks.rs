//! MDIF building blocks: the frequency branch (magnitude-domain scanning with
//! phase carried through untouched), the spatial branch, and the fusion MLP
//! with its input residual.
//!
//! Parameters live in a flat name -> array store; builders register them on
//! the tape by name, so one store drives initialization, the optimizer, and
//! checkpointing.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::diffcore::{NdArray, Tape, ValId};
use crate::error::{Error, Result};
use crate::fft3d;
use crate::rng::SplitMix64;
use crate::scan::{cached_order, OrderKind, ScanOrder};
use crate::ssm::{self, MambaIds, MambaParams};

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Flat named parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: IndexMap<String, NdArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NdArray> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|a| a.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Bind a stored parameter onto the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape, name: &str) -> Result<ValId> {
        Ok(tape.param(name, self.get(name)?))
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> NdArray {
    let bound = (6.0 / fan_in as f64).sqrt();
    NdArray::random_uniform(shape, -bound, bound, rng)
}

// -- parameter initialization ------------------------------------------------

pub fn store_conv1x1(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    zero_init: bool,
    rng: &mut SplitMix64,
) -> Result<()> {
    let w = if zero_init {
        NdArray::zeros(&[c_out, c_in])
    } else {
        kaiming_uniform(&[c_out, c_in], c_in, rng)
    };
    store.insert(format!("{prefix}.w"), w)?;
    store.insert(format!("{prefix}.b"), NdArray::zeros(&[c_out]))
}

pub fn store_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), NdArray::filled(&[c], 1.0))?;
    store.insert(format!("{prefix}.beta"), NdArray::zeros(&[c]))
}

pub fn store_mamba(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    expansion: usize,
    d_state: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    let p = MambaParams::init(d_model, expansion, d_state, rng);
    store.insert(format!("{prefix}.w_in"), p.w_in)?;
    store.insert(format!("{prefix}.b_in"), p.b_in)?;
    store.insert(format!("{prefix}.conv_w"), p.conv_w)?;
    store.insert(format!("{prefix}.conv_b"), p.conv_b)?;
    store.insert(format!("{prefix}.a_log"), p.core.a_log)?;
    store.insert(format!("{prefix}.d_skip"), p.core.d_skip)?;
    store.insert(format!("{prefix}.w_b"), p.core.w_b)?;
    store.insert(format!("{prefix}.w_c"), p.core.w_c)?;
    store.insert(format!("{prefix}.w_delta"), p.core.w_delta)?;
    store.insert(format!("{prefix}.b_delta"), p.core.b_delta)?;
    store.insert(format!("{prefix}.w_out"), p.w_out)?;
    store.insert(format!("{prefix}.b_out"), p.b_out)
}

pub fn mamba_ids(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<MambaIds> {
    let d_inner = store.get(&format!("{prefix}.conv_w"))?.shape()[0];
    Ok(MambaIds {
        d_inner,
        w_in: store.register(tape, &format!("{prefix}.w_in"))?,
        b_in: store.register(tape, &format!("{prefix}.b_in"))?,
        conv_w: store.register(tape, &format!("{prefix}.conv_w"))?,
        conv_b: store.register(tape, &format!("{prefix}.conv_b"))?,
        a_log: store.register(tape, &format!("{prefix}.a_log"))?,
        d_skip: store.register(tape, &format!("{prefix}.d_skip"))?,
        w_b: store.register(tape, &format!("{prefix}.w_b"))?,
        w_c: store.register(tape, &format!("{prefix}.w_c"))?,
        w_delta: store.register(tape, &format!("{prefix}.w_delta"))?,
        b_delta: store.register(tape, &format!("{prefix}.b_delta"))?,
        w_out: store.register(tape, &format!("{prefix}.w_out"))?,
        b_out: store.register(tape, &format!("{prefix}.b_out"))?,
    })
}

// -- builders on [C, L] values ------------------------------------------------

/// Per-location channel mixing: out = W x + b at every column.
pub fn conv1x1(tape: &mut Tape, x_cl: ValId, store: &ParamStore, prefix: &str) -> Result<ValId> {
    let l = tape.value(x_cl).shape()[1];
    let w = store.register(tape, &format!("{prefix}.w"))?;
    let b = store.register(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(w, x_cl)?;
    ssm::add_col_bias(tape, y, b, l)
}

/// Channel-axis layer normalization per location.
pub fn layer_norm(tape: &mut Tape, x_cl: ValId, store: &ParamStore, prefix: &str) -> Result<ValId> {
    let gamma = store.register(tape, &format!("{prefix}.gamma"))?;
    let beta = store.register(tape, &format!("{prefix}.beta"))?;
    tape.layer_norm(x_cl, gamma, beta, LN_EPS)
}

/// Scan-order Mamba: gather into sequence order, run the block, scatter back.
fn ordered_mamba(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x_cl: ValId,
    order: &ScanOrder,
) -> Result<ValId> {
    let seq = tape.gather_cols(x_cl, Arc::clone(&order.forward))?;
    let ids = mamba_ids(tape, store, prefix)?;
    let y = ssm::mamba_block(tape, seq, &ids)?;
    tape.gather_cols(y, Arc::clone(&order.inverse))
}

/// Per-block structural configuration; `freq_dirs` empty disables the
/// frequency branch.
#[derive(Clone, Debug)]
pub struct MdifSpec {
    pub channels: usize,
    pub expansion: usize,
    pub d_state: usize,
    pub local3d_block: usize,
    pub freq_dirs: Vec<OrderKind>,
    pub spatial_dirs: Vec<OrderKind>,
}

pub fn store_mdif(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MdifSpec,
    rng: &mut SplitMix64,
) -> Result<()> {
    let c = spec.channels;
    store_layer_norm(store, &format!("{prefix}.spa.ln"), c)?;
    for i in 0..spec.spatial_dirs.len() {
        store_mamba(
            store,
            &format!("{prefix}.spa.m{i}"),
            c,
            spec.expansion,
            spec.d_state,
            rng,
        )?;
    }
    if !spec.freq_dirs.is_empty() {
        store_layer_norm(store, &format!("{prefix}.freq.ln_mag"), c)?;
        store_conv1x1(store, &format!("{prefix}.freq.conv1"), c, c, false, rng)?;
        store_conv1x1(store, &format!("{prefix}.freq.conv2"), c, c, false, rng)?;
        for i in 0..spec.freq_dirs.len() {
            store_mamba(
                store,
                &format!("{prefix}.freq.d{i}.m"),
                c,
                spec.expansion,
                spec.d_state,
                rng,
            )?;
            store_layer_norm(store, &format!("{prefix}.freq.d{i}.ln"), c)?;
        }
    }
    store_conv1x1(store, &format!("{prefix}.fuse.c1"), c, c, false, rng)?;
    // zero init makes the whole block the identity at the start
    store_conv1x1(store, &format!("{prefix}.fuse.c2"), c, c, true, rng)
}

/// Spatial branch: layer_norm then one scan-ordered Mamba per direction.
/// Returns one [C, L] value per direction.
pub fn spatial_branch(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    spec: &MdifSpec,
    x_cl: ValId,
    grid: (usize, usize, usize),
) -> Result<Vec<ValId>> {
    let normed = layer_norm(tape, x_cl, store, &format!("{prefix}.ln"))?;
    let mut outs = Vec::with_capacity(spec.spatial_dirs.len());
    for (i, &dir) in spec.spatial_dirs.iter().enumerate() {
        let order = cached_order(dir, grid, spec.local3d_block)?;
        outs.push(ordered_mamba(
            tape,
            store,
            &format!("{prefix}.m{i}"),
            normed,
            &order,
        )?);
    }
    Ok(outs)
}

/// Frequency branch: magnitude spectrum -> norm -> two 1x1x1 conv blocks ->
/// per-direction scan-ordered Mamba -> norm -> reconstruction with the
/// original phase. Returns one real [C, L] value per direction.
pub fn frequency_branch(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    spec: &MdifSpec,
    x: ValId,
) -> Result<Vec<ValId>> {
    let (c, h, w, d) = match tape.value(x).shape() {
        [c, h, w, d] => (*c, *h, *w, *d),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "frequency_branch expects [C,H,W,D]".into(),
            })
        }
    };
    let dh = fft3d::half_depth(d);
    let lh = h * w * dh;
    let (mag, phase) = tape.spectral_mag(x)?;
    let mag = tape.reshape(mag, vec![c, lh])?;
    let m = layer_norm(tape, mag, store, &format!("{prefix}.ln_mag"))?;
    let m = conv1x1(tape, m, store, &format!("{prefix}.conv1"))?;
    let m = tape.leaky_relu(m, LEAKY_SLOPE)?;
    let m = conv1x1(tape, m, store, &format!("{prefix}.conv2"))?;
    let f_m = tape.leaky_relu(m, LEAKY_SLOPE)?;
    let mut outs = Vec::with_capacity(spec.freq_dirs.len());
    for (i, &dir) in spec.freq_dirs.iter().enumerate() {
        let order = cached_order(dir, (h, w, dh), spec.local3d_block)?;
        let y = ordered_mamba(tape, store, &format!("{prefix}.d{i}.m"), f_m, &order)?;
        let y = layer_norm(tape, y, store, &format!("{prefix}.d{i}.ln"))?;
        let y = tape.reshape(y, vec![c, h, w, dh])?;
        let r = tape.spectral_recon(y, Arc::clone(&phase), (h, w, d))?;
        outs.push(tape.reshape(r, vec![c, h * w * d])?);
    }
    Ok(outs)
}

/// One MDIF block on a [C,H,W,D] value: branch outputs summed in fixed order
/// (spatial directions first, then frequency directions), fusion MLP, input
/// residual.
pub fn mdif_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    spec: &MdifSpec,
    x: ValId,
) -> Result<ValId> {
    let (c, h, w, d) = match tape.value(x).shape() {
        [c, h, w, d] => (*c, *h, *w, *d),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "mdif_block expects [C,H,W,D]".into(),
            })
        }
    };
    if c != spec.channels {
        return Err(Error::shape(
            "mdif_block channels",
            &[spec.channels],
            &[c],
        ));
    }
    let l = h * w * d;
    let x_cl = tape.reshape(x, vec![c, l])?;
    let mut parts = spatial_branch(tape, store, &format!("{prefix}.spa"), spec, x_cl, (h, w, d))?;
    if !spec.freq_dirs.is_empty() {
        parts.extend(frequency_branch(
            tape,
            store,
            &format!("{prefix}.freq"),
            spec,
            x,
        )?);
    }
    let mut sum = parts[0];
    for &p in &parts[1..] {
        sum = tape.add(sum, p)?;
    }
    let f = conv1x1(tape, sum, store, &format!("{prefix}.fuse.c1"))?;
    let f = tape.gelu(f)?;
    let f = conv1x1(tape, f, store, &format!("{prefix}.fuse.c2"))?;
    let out = tape.add(x_cl, f)?;
    tape.reshape(out, vec![c, h, w, d])
}
