//! Real-input 3D Fourier analysis.
//!
//! Conventions, fixed globally:
//! - forward transform is unnormalized, the inverse carries the 1/N factor;
//! - the half-spectrum packs the last axis, keeping indices 0..=D/2;
//! - power-of-two extents use an iterative radix-2 kernel, anything else
//!   falls back to the naive per-line DFT.
//!
//! `dft3_reference` is the literal triple-sum oracle and must stay free of
//! any shared fast-path code.

use num_complex::Complex64;

use crate::diffcore::NdArray;
use crate::error::{Error, Result};

/// Full complex spectrum over the (H, W, D) frequency grid.
#[derive(Clone, Debug)]
pub struct FullSpectrum {
    pub dims: (usize, usize, usize),
    pub data: Vec<Complex64>,
}

/// Hermitian-packed spectrum of a real volume: last axis truncated to
/// 0..=D/2, the rest recoverable via conjugate symmetry.
#[derive(Clone, Debug)]
pub struct HalfSpectrum {
    pub spatial_dims: (usize, usize, usize),
    pub data: Vec<Complex64>,
}

/// Magnitude/phase decomposition of a half-spectrum.
#[derive(Clone, Debug)]
pub struct MagPhase {
    pub spatial_dims: (usize, usize, usize),
    pub magnitude: NdArray,
    pub phase: NdArray,
}

pub fn half_depth(d: usize) -> usize {
    d / 2 + 1
}

pub fn half_grid(spatial: (usize, usize, usize)) -> (usize, usize, usize) {
    (spatial.0, spatial.1, half_depth(spatial.2))
}

impl HalfSpectrum {
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        half_grid(self.spatial_dims)
    }
}

/// A bin is self-conjugate when (u,v,w) == (-u,-v,-w) mod the grid;
/// its coefficient must be real.
pub fn is_self_conjugate(u: usize, v: usize, w: usize, dims: (usize, usize, usize)) -> bool {
    (2 * u) % dims.0 == 0 && (2 * v) % dims.1 == 0 && (2 * w) % dims.2 == 0
}

fn expect_volume_shape(x: &NdArray) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, d] => Ok((*h, *w, *d)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a rank-3 volume".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// 1D kernels

fn fft_line(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(buf, inverse);
    } else {
        dft_naive_line(buf, inverse);
    }
}

fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = buf[i + k];
                let b = buf[i + k + len / 2] * w;
                buf[i + k] = a + b;
                buf[i + k + len / 2] = a - b;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

fn dft_naive_line(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        for (j, &x) in buf.iter().enumerate() {
            let ang = sign * 2.0 * std::f64::consts::PI * (k * j % n) as f64 / n as f64;
            *o += x * Complex64::new(ang.cos(), ang.sin());
        }
    }
    buf.copy_from_slice(&out);
}

/// In-place unnormalized 3D transform along all axes.
fn fft3_complex(data: &mut [Complex64], dims: (usize, usize, usize), inverse: bool) {
    let (h, w, d) = dims;
    let mut line = Vec::new();
    // axis 2 (contiguous)
    for i in 0..h * w {
        fft_line(&mut data[i * d..(i + 1) * d], inverse);
    }
    // axis 1 (stride d)
    line.resize(w, Complex64::new(0.0, 0.0));
    for hi in 0..h {
        for di in 0..d {
            for wi in 0..w {
                line[wi] = data[(hi * w + wi) * d + di];
            }
            fft_line(&mut line, inverse);
            for wi in 0..w {
                data[(hi * w + wi) * d + di] = line[wi];
            }
        }
    }
    // axis 0 (stride w*d)
    line.resize(h, Complex64::new(0.0, 0.0));
    for wi in 0..w {
        for di in 0..d {
            for hi in 0..h {
                line[hi] = data[(hi * w + wi) * d + di];
            }
            fft_line(&mut line, inverse);
            for hi in 0..h {
                data[(hi * w + wi) * d + di] = line[hi];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations

/// Literal triple-sum DFT. O(N^2); this is the oracle, not the production path.
pub fn dft3_reference(volume: &NdArray) -> Result<FullSpectrum> {
    let (h, w, d) = expect_volume_shape(volume)?;
    let x = volume.data();
    let mut out = vec![Complex64::new(0.0, 0.0); h * w * d];
    for u in 0..h {
        for v in 0..w {
            for fw in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for hh in 0..h {
                    for ww in 0..w {
                        for dd in 0..d {
                            let ang = -2.0
                                * std::f64::consts::PI
                                * (u as f64 * hh as f64 / h as f64
                                    + v as f64 * ww as f64 / w as f64
                                    + fw as f64 * dd as f64 / d as f64);
                            acc += x[(hh * w + ww) * d + dd]
                                * Complex64::new(ang.cos(), ang.sin());
                        }
                    }
                }
                out[(u * w + v) * d + fw] = acc;
            }
        }
    }
    Ok(FullSpectrum {
        dims: (h, w, d),
        data: out,
    })
}

/// Fast real-to-complex transform with Hermitian-packed storage.
pub fn rfft3(volume: &NdArray) -> Result<HalfSpectrum> {
    let (h, w, d) = expect_volume_shape(volume)?;
    let mut full: Vec<Complex64> = volume
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft3_complex(&mut full, (h, w, d), false);
    let dh = half_depth(d);
    let mut out = Vec::with_capacity(h * w * dh);
    for u in 0..h {
        for v in 0..w {
            for fw in 0..dh {
                out.push(full[(u * w + v) * d + fw]);
            }
        }
    }
    Ok(HalfSpectrum {
        spatial_dims: (h, w, d),
        data: out,
    })
}

/// True when the stored bin is not the representative of its mirror pair:
/// on the last-axis planes 0 and D/2 both mirror partners are stored, and the
/// one with the larger (u, v) raster index defers to its conjugate partner.
fn is_redundant_stored(u: usize, v: usize, fw: usize, dims: (usize, usize, usize)) -> bool {
    let (h, w, d) = dims;
    if (2 * fw) % d != 0 || is_self_conjugate(u, v, fw, dims) {
        return false;
    }
    let mu = (h - u) % h;
    let mv = (w - v) % w;
    u * w + v > mu * w + mv
}

/// Hermitian completion of a half-spectrum onto the full grid.
/// Self-conjugate bins have their imaginary part dropped; stored bins whose
/// mirror is also stored are overwritten from their representative so the
/// completed spectrum is Hermitian (hence the inverse real) even when the two
/// halves were processed independently.
pub fn hermitian_complete(spec: &HalfSpectrum) -> FullSpectrum {
    let (h, w, d) = spec.spatial_dims;
    let dh = half_depth(d);
    let canonical = |u: usize, v: usize, fw: usize| -> Complex64 {
        let mut c = if is_redundant_stored(u, v, fw, (h, w, d)) {
            let mu = (h - u) % h;
            let mv = (w - v) % w;
            spec.data[(mu * w + mv) * dh + fw].conj()
        } else {
            spec.data[(u * w + v) * dh + fw]
        };
        if is_self_conjugate(u, v, fw, (h, w, d)) {
            c.im = 0.0;
        }
        c
    };
    let mut full = vec![Complex64::new(0.0, 0.0); h * w * d];
    for u in 0..h {
        for v in 0..w {
            for fw in 0..d {
                full[(u * w + v) * d + fw] = if fw < dh {
                    canonical(u, v, fw)
                } else {
                    let mu = (h - u) % h;
                    let mv = (w - v) % w;
                    canonical(mu, mv, d - fw).conj()
                };
            }
        }
    }
    FullSpectrum {
        dims: (h, w, d),
        data: full,
    }
}

/// Inverse transform back to a real volume, with 1/N scaling.
pub fn irfft3(spec: &HalfSpectrum) -> NdArray {
    let (h, w, d) = spec.spatial_dims;
    let mut full = hermitian_complete(spec).data;
    fft3_complex(&mut full, (h, w, d), true);
    let n = (h * w * d) as f64;
    let data: Vec<f64> = full.iter().map(|c| c.re / n).collect();
    NdArray::new(vec![h, w, d], data).expect("irfft3 shape")
}

pub fn to_mag_phase(spec: &HalfSpectrum) -> MagPhase {
    let (gh, gw, gd) = spec.grid_dims();
    let shape = vec![gh, gw, gd];
    let mut mag = Vec::with_capacity(spec.data.len());
    let mut pha = Vec::with_capacity(spec.data.len());
    for c in &spec.data {
        mag.push(c.norm());
        pha.push(phase_of(*c));
    }
    MagPhase {
        spatial_dims: spec.spatial_dims,
        magnitude: NdArray::new(shape.clone(), mag).expect("mag shape"),
        phase: NdArray::new(shape, pha).expect("phase shape"),
    }
}

/// Phase in (-pi, pi], with the phase of an exact zero defined as 0.
pub fn phase_of(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let p = c.im.atan2(c.re);
    if p == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Recombine a (possibly signed, post-network) magnitude with a phase.
pub fn from_mag_phase(mp: &MagPhase) -> Result<HalfSpectrum> {
    if mp.magnitude.shape() != mp.phase.shape() {
        return Err(Error::shape(
            "from_mag_phase",
            mp.magnitude.shape(),
            mp.phase.shape(),
        ));
    }
    let data = mp
        .magnitude
        .data()
        .iter()
        .zip(mp.phase.data())
        .map(|(&m, &p)| Complex64::new(m * p.cos(), m * p.sin()))
        .collect();
    Ok(HalfSpectrum {
        spatial_dims: mp.spatial_dims,
        data,
    })
}

/// Max over all (u,v,w) of |F(-u,-v,-w) - conj(F(u,v,w))| with modular indexing.
pub fn check_conjugate_symmetry(spec: &FullSpectrum) -> f64 {
    let (h, w, d) = spec.dims;
    let mut worst: f64 = 0.0;
    for u in 0..h {
        for v in 0..w {
            for fw in 0..d {
                let a = spec.data[(((h - u) % h) * w + (w - v) % w) * d + (d - fw) % d];
                let b = spec.data[(u * w + v) * d + fw].conj();
                worst = worst.max((a - b).norm());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Adjoints of the linear spectral maps, used by the differentiation tape.

/// Adjoint of `rfft3` viewed as a linear map from a real volume to the packed
/// (re, im) half-spectrum coordinates: dx_n = Re( sum_{k in half} g_k e^{+i w_kn} ).
pub fn rfft3_adjoint(g: &HalfSpectrum) -> NdArray {
    let (h, w, d) = g.spatial_dims;
    let dh = half_depth(d);
    let mut full = vec![Complex64::new(0.0, 0.0); h * w * d];
    for u in 0..h {
        for v in 0..w {
            for fw in 0..dh {
                full[(u * w + v) * d + fw] = g.data[(u * w + v) * dh + fw];
            }
        }
    }
    fft3_complex(&mut full, (h, w, d), true);
    let data: Vec<f64> = full.iter().map(|c| c.re).collect();
    NdArray::new(vec![h, w, d], data).expect("adjoint shape")
}

/// Adjoint of `irfft3` viewed as a linear map from packed half-spectrum
/// coordinates to the real volume. Each representative bin determines itself
/// and its mirror (weight 2); self-conjugate bins carry weight 1 with zero
/// imaginary gradient; redundant stored bins are ignored by the completion
/// and so receive zero gradient.
pub fn irfft3_adjoint(g_vol: &NdArray) -> Result<HalfSpectrum> {
    let (h, w, d) = expect_volume_shape(g_vol)?;
    let mut full: Vec<Complex64> = g_vol
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft3_complex(&mut full, (h, w, d), false);
    let n = (h * w * d) as f64;
    let dh = half_depth(d);
    let mut out = Vec::with_capacity(h * w * dh);
    for u in 0..h {
        for v in 0..w {
            for fw in 0..dh {
                let mut c = full[(u * w + v) * d + fw];
                if is_self_conjugate(u, v, fw, (h, w, d)) {
                    c = Complex64::new(c.re / n, 0.0);
                } else if is_redundant_stored(u, v, fw, (h, w, d)) {
                    c = Complex64::new(0.0, 0.0);
                } else {
                    c = c * (2.0 / n);
                }
                out.push(c);
            }
        }
    }
    Ok(HalfSpectrum {
        spatial_dims: (h, w, d),
        data: out,
    })
}
