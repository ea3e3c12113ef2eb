//! Full encoder-decoder: conv stem, MDIF encoder stages with strided
//! downsampling, transposed-conv decoder with skip and residual connections,
//! zero-initialized segmentation head, cross-entropy loss, and checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::{self, MdifSpec, ParamStore, LEAKY_SLOPE};
use crate::diffcore::{NdArray, Tape, ValId};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scan::OrderKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input modalities.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width of the first stage; stage s has base_channels * 2^s.
    pub base_channels: usize,
    pub num_stages: usize,
    pub mdif_blocks_per_stage: usize,
    /// Sub-cube edge of the 3D-local scan ordering.
    pub local3d_block: usize,
    /// Multi-directional scanning: all three orderings instead of in-slice only.
    pub mdsm_enabled: bool,
    /// Frequency-domain branch on/off.
    pub fdb_enabled: bool,
    /// Restrict scanning to in-slice + cross-slice (overrides mdsm_enabled).
    pub mdsm2_mode: bool,
    pub expansion: usize,
    pub d_state: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 4,
            base_channels: 8,
            num_stages: 3,
            mdif_blocks_per_stage: 2,
            local3d_block: 2,
            mdsm_enabled: true,
            fdb_enabled: true,
            mdsm2_mode: false,
            expansion: 2,
            d_state: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("base_channels", self.base_channels),
            ("num_stages", self.num_stages),
            ("mdif_blocks_per_stage", self.mdif_blocks_per_stage),
            ("local3d_block", self.local3d_block),
            ("expansion", self.expansion),
            ("d_state", self.d_state),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Per-axis divisibility the input volume must satisfy.
    pub fn stride_factor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    /// Scan orderings active under the ablation flags.
    pub fn scan_directions(&self) -> Vec<OrderKind> {
        if self.mdsm2_mode {
            vec![OrderKind::InSlice, OrderKind::CrossSlice]
        } else if self.mdsm_enabled {
            vec![OrderKind::InSlice, OrderKind::CrossSlice, OrderKind::Local3D]
        } else {
            vec![OrderKind::InSlice]
        }
    }

    /// Multi-directional scanning lives in the frequency branch when it is
    /// present; without the frequency branch the spatial branch takes over
    /// the full direction set.
    pub fn mdif_spec(&self, stage: usize) -> MdifSpec {
        let dirs = self.scan_directions();
        let (freq_dirs, spatial_dirs) = if self.fdb_enabled {
            (dirs, vec![OrderKind::InSlice])
        } else {
            (Vec::new(), dirs)
        };
        MdifSpec {
            channels: self.channels_at(stage),
            expansion: self.expansion,
            d_state: self.d_state,
            local3d_block: self.local3d_block,
            freq_dirs,
            spatial_dirs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> NdArray {
    let bound = (6.0 / fan_in as f64).sqrt();
    NdArray::random_uniform(shape, -bound, bound, rng)
}

fn store_conv3(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    let w = kaiming_uniform(&[c_out, c_in, 3, 3, 3], c_in * 27, rng);
    store.insert(format!("{prefix}.w"), w)?;
    store.insert(format!("{prefix}.b"), NdArray::zeros(&[c_out]))
}

fn store_deconv(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    let w = kaiming_uniform(&[c_in, c_out, 2, 2, 2], c_in * 8, rng);
    store.insert(format!("{prefix}.w"), w)?;
    store.insert(format!("{prefix}.b"), NdArray::zeros(&[c_out]))
}

/// Deterministic construction: a single seeded stream drives every draw in a
/// fixed parameter order.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    store_conv3(&mut store, "stem", config.in_channels, config.base_channels, &mut rng)?;
    for s in 0..config.num_stages {
        let spec = config.mdif_spec(s);
        for b in 0..config.mdif_blocks_per_stage {
            blocks::store_mdif(&mut store, &format!("enc{s}.b{b}"), &spec, &mut rng)?;
        }
        if s + 1 < config.num_stages {
            store_conv3(
                &mut store,
                &format!("down{s}"),
                config.channels_at(s),
                config.channels_at(s + 1),
                &mut rng,
            )?;
        }
    }
    for s in (0..config.num_stages.saturating_sub(1)).rev() {
        let cs = config.channels_at(s);
        store_deconv(&mut store, &format!("dec{s}.up"), config.channels_at(s + 1), cs, &mut rng)?;
        store_conv3(&mut store, &format!("dec{s}.conv1"), 2 * cs, cs, &mut rng)?;
        store_conv3(&mut store, &format!("dec{s}.conv2"), cs, cs, &mut rng)?;
    }
    // zero init: initial logits are spatially uniform (all zero)
    blocks::store_conv1x1(
        &mut store,
        "head",
        config.base_channels,
        config.num_classes,
        true,
        &mut rng,
    )?;
    Ok(Model {
        config: config.clone(),
        store,
    })
}

fn conv3(tape: &mut Tape, store: &ParamStore, prefix: &str, x: ValId, stride: usize) -> Result<ValId> {
    let w = store.register(tape, &format!("{prefix}.w"))?;
    let b = store.register(tape, &format!("{prefix}.b"))?;
    tape.conv3d(x, w, b, stride)
}

/// Upsample by 2 (transposed conv), concat the skip, refine with two 3x3x3
/// convs, then add the upsampled tensor back as a residual.
pub fn decoder_stage(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: ValId,
    skip: ValId,
) -> Result<ValId> {
    let w = store.register(tape, &format!("{prefix}.up.w"))?;
    let b = store.register(tape, &format!("{prefix}.up.b"))?;
    let up = tape.conv_transpose3d(x, w, b)?;
    let up_shape = tape.value(up).shape().to_vec();
    let skip_shape = tape.value(skip).shape().to_vec();
    if up_shape != skip_shape {
        return Err(Error::shape("decoder_stage skip", &up_shape, &skip_shape));
    }
    let (c, h, wd, d) = (up_shape[0], up_shape[1], up_shape[2], up_shape[3]);
    let l = h * wd * d;
    let up_cl = tape.reshape(up, vec![c, l])?;
    let skip_cl = tape.reshape(skip, vec![c, l])?;
    let cat = tape.concat_rows(&[up_cl, skip_cl])?;
    let cat = tape.reshape(cat, vec![2 * c, h, wd, d])?;
    let y = conv3(tape, store, &format!("{prefix}.conv1"), cat, 1)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    let y = conv3(tape, store, &format!("{prefix}.conv2"), y, 1)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    tape.add(y, up)
}

/// Record the whole network on the tape; returns logits [num_classes,H,W,D].
pub fn build_forward(tape: &mut Tape, model: &Model, x: ValId) -> Result<ValId> {
    let cfg = &model.config;
    let shape = tape.value(x).shape().to_vec();
    let (c, h, w, d) = match shape[..] {
        [c, h, w, d] => (c, h, w, d),
        _ => {
            return Err(Error::InvalidShape {
                shape,
                reason: "forward expects a [C,H,W,D] volume".into(),
            })
        }
    };
    if c != cfg.in_channels {
        return Err(Error::shape("forward modalities", &[cfg.in_channels], &[c]));
    }
    let f = cfg.stride_factor();
    for e in [h, w, d] {
        if e % f != 0 {
            return Err(Error::Config(format!(
                "input extent {e} must be divisible by {f} (2^(num_stages-1))"
            )));
        }
        if e / f < 2 {
            return Err(Error::Config(format!(
                "input extent {e} collapses below 2 at the deepest stage (factor {f})"
            )));
        }
    }
    let stem = conv3(tape, &model.store, "stem", x, 1)?;
    let mut cur = tape.leaky_relu(stem, LEAKY_SLOPE)?;
    let mut skips = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        let spec = cfg.mdif_spec(s);
        for b in 0..cfg.mdif_blocks_per_stage {
            cur = blocks::mdif_block(tape, &model.store, &format!("enc{s}.b{b}"), &spec, cur)?;
        }
        skips.push(cur);
        if s + 1 < cfg.num_stages {
            let down = conv3(tape, &model.store, &format!("down{s}"), cur, 2)?;
            cur = tape.leaky_relu(down, LEAKY_SLOPE)?;
        }
    }
    for s in (0..cfg.num_stages - 1).rev() {
        cur = decoder_stage(tape, &model.store, &format!("dec{s}"), cur, skips[s])?;
    }
    let flat = tape.reshape(cur, vec![cfg.base_channels, h * w * d])?;
    let logits = blocks::conv1x1(tape, flat, &model.store, "head")?;
    tape.reshape(logits, vec![cfg.num_classes, h, w, d])
}

/// One-shot inference on a fresh tape.
pub fn forward(model: &Model, volume: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let x = tape.input("volume", volume.clone());
    let out = build_forward(&mut tape, model, x)?;
    Ok(tape.value(out).clone())
}

/// Forward plus mean cross-entropy against voxel labels; returns (logits, loss).
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    x: ValId,
    labels: Arc<Vec<u8>>,
) -> Result<(ValId, ValId)> {
    let logits = build_forward(tape, model, x)?;
    let shape = tape.value(logits).shape().to_vec();
    let voxels: usize = shape[1..].iter().product();
    let flat = tape.reshape(logits, vec![shape[0], voxels])?;
    let loss = tape.cross_entropy_mean(flat, labels)?;
    Ok((logits, loss))
}

/// Mean over voxels of -log softmax probability of the true class, stabilized
/// by max subtraction. Logits are [K, ...spatial], labels one id per voxel.
pub fn cross_entropy_loss(logits: &NdArray, labels: &[u8]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "cross_entropy_loss expects [K, ...spatial] logits".into(),
        });
    }
    let k = shape[0];
    let m: usize = shape[1..].iter().product();
    if labels.len() != m {
        return Err(Error::Data(format!(
            "cross_entropy_loss: {} labels for {m} voxels",
            labels.len()
        )));
    }
    let z = logits.data();
    let mut total = 0.0;
    for (col, &y) in labels.iter().enumerate() {
        if y as usize >= k {
            return Err(Error::Data(format!(
                "label {y} at voxel {col} out of range (num_classes {k})"
            )));
        }
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..k {
            mx = mx.max(z[ch * m + col]);
        }
        let mut lse = 0.0;
        for ch in 0..k {
            lse += (z[ch * m + col] - mx).exp();
        }
        total += mx + lse.ln() - z[y as usize * m + col];
    }
    Ok(total / m as f64)
}

// -- checkpoint persistence ----------------------------------------------------

const CKPT_MAGIC: &[u8; 5] = b"SSFC1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    config: ModelConfig,
    step: u64,
    seed: u64,
}

fn write_u32(w: &mut impl Write, v: u32, path: &str) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, model: &Model, step: u64, seed: u64) -> Result<()> {
    let ps = path.display().to_string();
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(&ps, e))?);
    f.write_all(CKPT_MAGIC).map_err(|e| Error::io(&ps, e))?;
    let header = serde_json::to_string(&CkptHeader {
        config: model.config.clone(),
        step,
        seed,
    })?;
    write_u32(&mut f, header.len() as u32, &ps)?;
    f.write_all(header.as_bytes()).map_err(|e| Error::io(&ps, e))?;
    write_u32(&mut f, model.store.len() as u32, &ps)?;
    for (name, arr) in model.store.iter() {
        write_u32(&mut f, name.len() as u32, &ps)?;
        f.write_all(name.as_bytes()).map_err(|e| Error::io(&ps, e))?;
        write_u32(&mut f, arr.shape().len() as u32, &ps)?;
        for &e in arr.shape() {
            write_u32(&mut f, e as u32, &ps)?;
        }
        for &v in arr.data() {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&ps, e))?;
        }
    }
    f.flush().map_err(|e| Error::io(&ps, e))
}

/// Returns the model together with its recorded training step and seed.
/// The parameter inventory must match a fresh build of the stored config,
/// name for name in order, so a loaded model is byte-compatible everywhere.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64, u64)> {
    let ps = path.display().to_string();
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(&ps, e))?);
    let mut magic = [0u8; 5];
    read_exact(&mut f, &mut magic, &ps)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Data(format!("{ps}: bad magic, not an SSFC1 checkpoint")));
    }
    let hlen = read_u32(&mut f, &ps)? as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact(&mut f, &mut hbuf, &ps)?;
    let htext = String::from_utf8(hbuf)
        .map_err(|_| Error::Data(format!("{ps}: header is not UTF-8")))?;
    let header: CkptHeader = serde_json::from_str(&htext)?;
    let mut model = build_model(&header.config, header.seed)?;
    let count = read_u32(&mut f, &ps)? as usize;
    if count != model.store.len() {
        return Err(Error::Data(format!(
            "{ps}: {count} parameter records, config requires {}",
            model.store.len()
        )));
    }
    let expected: Vec<String> = model.store.names().cloned().collect();
    for want in &expected {
        let nlen = read_u32(&mut f, &ps)? as usize;
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut f, &mut nbuf, &ps)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| Error::Data(format!("{ps}: parameter name is not UTF-8")))?;
        if &name != want {
            return Err(Error::Data(format!(
                "{ps}: parameter order mismatch, found {name:?} where {want:?} belongs"
            )));
        }
        let rank = read_u32(&mut f, &ps)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f, &ps)? as usize);
        }
        let slot = model.store.get_mut(&name)?;
        if slot.shape() != shape.as_slice() {
            return Err(Error::shape(format!("checkpoint {name}"), slot.shape(), &shape));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut f, &mut b, &ps)?;
            data.push(f64::from_le_bytes(b));
        }
        *slot = NdArray::new(shape, data)?;
    }
    Ok((model, header.step, header.seed))
}
