//! Filtered back projection.
//!
//! Chain: Beer-Lambert preprocessing, optional Gaussian denoising along
//! channels, offset-scan redundancy weighting, ramp filtering with
//! power-of-two zero padding, pixel-driven back projection with linear
//! interpolation, HU-window quantization to `u16`.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionParams, ScanMode, VolumeDims};
use crate::signal::{blur_f32, gaussian_kernel};
use crate::volume::{PartialVolume, Sinogram, Tile, Volume};

/// Default width (channels) of the offset-scan feather.
pub const DEFAULT_OVERLAP_BAND: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    RamLak,
    SheppLogan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Zero-padded line length; a power of two `>= 2 * n_chan`.
    pub padding: usize,
    /// Pre-filter Gaussian std in channels (0 disables).
    pub blur_sigma: f64,
    /// Offset-scan feather width in channels.
    pub overlap_band: f64,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, n_chan: usize) -> Self {
        Self {
            kind,
            padding: (2 * n_chan).next_power_of_two(),
            blur_sigma: 0.0,
            overlap_band: DEFAULT_OVERLAP_BAND,
        }
    }

    pub fn validate(&self, n_chan: usize) -> Result<()> {
        if self.padding < 2 * n_chan || !self.padding.is_power_of_two() {
            return Err(Error::Param(format!(
                "padding {} must be a power of two >= 2*n_chan ({})",
                self.padding,
                2 * n_chan
            )));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Param("blur_sigma must be >= 0".into()));
        }
        if !(self.overlap_band >= 0.0) {
            return Err(Error::Param("overlap_band must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Param(format!("HU window needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn quantize(&self, v: f64) -> u16 {
        let n = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        // NaN clamps to NaN and casts to 0
        (n * 65535.0).round() as u16
    }

    /// Attenuation value that quantizes to `q` (center of its bin).
    pub fn dequantize(&self, q: u16) -> f64 {
        self.lo + (q as f64 / 65535.0) * (self.hi - self.lo)
    }
}

/// Beer-Lambert: intensity counts to optical depth `-ln(max(raw, 1) / i0)`.
pub fn preprocess(raw: &Sinogram, i0: f64) -> Result<Sinogram> {
    if !(i0 > 0.0) {
        return Err(Error::Param(format!("i0 must be positive, got {i0}")));
    }
    let mut out = raw.clone();
    for v in out.data_mut() {
        *v = -((*v as f64).max(1.0) / i0).ln() as f32;
    }
    Ok(out)
}

/// Redundancy weight of channel coordinate `t` for offset scans.
///
/// With `u = t - axis` measured toward the long detector side, the weight
/// ramps linearly from 0 at `u = -band/2` to 1 at `u = +band/2` (the band is
/// clipped to the overlap region), so conjugate rays `u` and `-u` always sum
/// to 1. Normal scans weight every channel by 1.
pub fn redundancy_weight(t: f64, params: &AcquisitionParams, band: f64) -> f64 {
    if params.scan_mode == ScanMode::Normal {
        return 1.0;
    }
    let axis = params.axis_channel();
    let near_edge = axis.min(params.n_chan as f64 - 1.0 - axis);
    let half = (band / 2.0).min(near_edge).max(0.0);
    let u = (t - axis) * (params.offset_chan.signum() as f64);
    if half == 0.0 {
        return if u > 0.0 {
            1.0
        } else if u < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    ((u + half) / (2.0 * half)).clamp(0.0, 1.0)
}

pub fn redundancy_weights(params: &AcquisitionParams, band: f64) -> Vec<f32> {
    (0..params.n_chan)
        .map(|c| redundancy_weight(c as f64, params, band) as f32)
        .collect()
}

/// Precomputed ramp filter for one line length.
pub struct RampFilter {
    n_chan: usize,
    padding: usize,
    response: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(spec: &FilterSpec, n_chan: usize, pixel_pitch: f64) -> Result<Self> {
        spec.validate(n_chan)?;
        let l = spec.padding;
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_chan,
            padding: l,
            response: frequency_response(spec.kind, l, pixel_pitch),
            forward: planner.plan_fft_forward(l),
            inverse: planner.plan_fft_inverse(l),
        })
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn apply(&self, line: &mut [f32], buf: &mut Vec<Complex<f64>>) {
        self.filter_padded(line, buf);
        let norm = 1.0 / self.padding as f64;
        for (o, b) in line.iter_mut().zip(buf.iter()) {
            *o = (b.re * norm) as f32;
        }
    }

    /// Filters `line` on the zero-padded grid, leaving the unnormalized
    /// inverse transform (all `padding` samples) in `buf`.
    fn filter_padded(&self, line: &[f32], buf: &mut Vec<Complex<f64>>) {
        debug_assert_eq!(line.len(), self.n_chan);
        buf.clear();
        buf.extend(line.iter().map(|&v| Complex::new(v as f64, 0.0)));
        buf.resize(self.padding, Complex::new(0.0, 0.0));
        self.forward.process(buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inverse.process(buf);
    }
}

/// Sampled `|w|` (RamLak) or `|w| sinc(w / 2w_max)` (Shepp-Logan) on a
/// length-`l` DFT grid, `w` in cycles per micrometer. Entry 0 (DC) is zero.
pub fn frequency_response(kind: FilterKind, l: usize, pixel_pitch: f64) -> Vec<f64> {
    (0..l)
        .map(|k| {
            let m = if k <= l / 2 { k } else { l - k } as f64;
            let ramp = m / (l as f64 * pixel_pitch);
            match kind {
                FilterKind::RamLak => ramp,
                FilterKind::SheppLogan => {
                    if m == 0.0 {
                        0.0
                    } else {
                        let x = std::f64::consts::PI * m / l as f64;
                        ramp * x.sin() / x
                    }
                }
            }
        })
        .collect()
}

/// Ramp-filters every (angle, row) line.
pub fn ramp_filter(s: &Sinogram, spec: &FilterSpec) -> Result<Sinogram> {
    let filter = RampFilter::new(spec, s.n_chan(), s.params.pixel_pitch)?;
    let mut out = s.clone();
    let n = s.n_chan();
    out.data_mut().par_chunks_mut(n * 64).for_each_init(Vec::new, |buf, chunk| {
        for line in chunk.chunks_exact_mut(n) {
            filter.apply(line, buf);
        }
    });
    Ok(out)
}

/// Denoising blur, redundancy weighting and ramp filtering in one pass.
pub fn filter_sinogram(s: &Sinogram, spec: &FilterSpec) -> Result<Sinogram> {
    let filter = RampFilter::new(spec, s.n_chan(), s.params.pixel_pitch)?;
    let kernel = gaussian_kernel(spec.blur_sigma);
    let weights = redundancy_weights(&s.params, spec.overlap_band);
    let weighted = s.params.scan_mode == ScanMode::Offset;
    let mut out = s.clone();
    let n = s.n_chan();
    out.data_mut().par_chunks_mut(n * 64).for_each_init(Vec::new, |buf, chunk| {
        for line in chunk.chunks_exact_mut(n) {
            blur_f32(line, &kernel);
            if weighted {
                line.iter_mut().zip(&weights).for_each(|(v, w)| *v *= w);
            }
            filter.apply(line, buf);
        }
    });
    Ok(out)
}

/// Voxels of row `y` inside the reconstruction cylinder, clipped to `xs`.
pub fn fov_span(y: usize, dims: &VolumeDims, radius: f64, xs: Range<usize>) -> Range<usize> {
    let (cx, cy) = dims.center();
    let dy = y as f64 - cy;
    let r2 = radius * radius;
    let rem = r2 - dy * dy;
    if rem < 0.0 {
        return xs.start..xs.start;
    }
    let inside = |x: usize| {
        let dx = x as f64 - cx;
        dx * dx + dy * dy <= r2
    };
    let half = rem.sqrt();
    let mut a = ((cx - half).ceil().max(0.0) as usize).max(xs.start);
    let mut b = (((cx + half).floor() + 1.0).max(0.0) as usize).min(xs.end);
    while a > xs.start && inside(a - 1) {
        a -= 1;
    }
    while a < b && !inside(a) {
        a += 1;
    }
    while b < xs.end && inside(b) {
        b += 1;
    }
    while b > a && !inside(b - 1) {
        b -= 1;
    }
    if a >= b {
        xs.start..xs.start
    } else {
        a..b
    }
}

/// Linear interpolation of `line` at continuous channel `t`; samples off the
/// detector count as zero.
#[inline(always)]
pub fn interp(line: &[f32], t: f64) -> f64 {
    lerp(line, t)
}

#[inline(always)]
fn lerp<T: Copy + Into<f64>>(line: &[T], t: f64) -> f64 {
    if t >= 0.0 {
        // truncation equals floor here and avoids a libm call
        let i = t as usize;
        if i + 1 < line.len() {
            let f = t - i as f64;
            return (1.0 - f) * line[i].into() + f * line[i + 1].into();
        }
    }
    let fl = t.floor();
    let f = t - fl;
    let i = fl as isize;
    let n = line.len() as isize;
    let mut v = 0.0;
    if i >= 0 && i < n {
        v += (1.0 - f) * line[i as usize].into();
    }
    if i + 1 >= 0 && i + 1 < n {
        v += f * line[(i + 1) as usize].into();
    }
    v
}

/// Back-projects the filtered samples of `angles` x `rows` onto `tile`.
///
/// Each voxel accumulates, in ascending angle order, the interpolated
/// sample at its ray coordinate, scaled by the angular step. Voxels outside
/// the field of view stay zero.
pub fn back_project(
    s: &Sinogram,
    dims: &VolumeDims,
    rows: Range<usize>,
    angles: Range<usize>,
    tile: Tile,
) -> Result<PartialVolume> {
    let params = &s.params;
    dims.check_against(params)?;
    if !tile.within(dims) {
        return Err(Error::Dimension(format!("tile {tile:?} outside volume")));
    }
    let sr = s.rows();
    let sa = s.angles();
    if !rows.is_empty() && (rows.start < sr.start || rows.end > sr.end) {
        return Err(Error::Dimension(format!("rows {rows:?} not in sinogram rows {sr:?}")));
    }
    if !angles.is_empty() && (angles.start < sa.start || angles.end > sa.end) {
        return Err(Error::Dimension(format!("angles {angles:?} not in sinogram angles {sa:?}")));
    }
    let mut out = PartialVolume::zeros(rows.clone(), tile);
    if rows.is_empty() || angles.is_empty() || tile.is_empty() {
        return Ok(out);
    }
    let trig: Vec<(f64, f64)> = angles.clone().map(|k| {
        let a = params.angle(k);
        (a.cos(), a.sin())
    }).collect();
    let (cx, cy) = dims.center();
    let axis = params.axis_channel();
    let dtheta = params.angle_step();
    let radius = params.fov_radius();
    let w = tile.width();
    let spans: Vec<Range<usize>> = (tile.y0..tile.y1)
        .map(|y| fov_span(y, dims, radius, tile.x0..tile.x1))
        .collect();
    let area = tile.area();
    out.data
        .par_chunks_mut(area)
        .zip(rows.clone().into_par_iter())
        .for_each(|(slice, z)| {
            let mut acc = vec![0.0f64; area];
            let mut line = Vec::with_capacity(params.n_chan);
            let mut dx_cos = vec![0.0f64; w];
            for (k, &(cos, sin)) in angles.clone().zip(&trig) {
                line.clear();
                line.extend(s.line(k, z).iter().map(|&v| v as f64));
                for (d, x) in dx_cos.iter_mut().zip(tile.x0..tile.x1) {
                    *d = (x as f64 - cx) * cos;
                }
                for (j, y) in (tile.y0..tile.y1).enumerate() {
                    let base = axis + (y as f64 - cy) * sin;
                    let row = &mut acc[j * w..(j + 1) * w];
                    let span = spans[j].start - tile.x0..spans[j].end - tile.x0;
                    for (a, &d) in row[span.clone()].iter_mut().zip(&dx_cos[span]) {
                        *a += lerp(&line, base + d);
                    }
                }
            }
            for (o, a) in slice.iter_mut().zip(acc) {
                *o = (a * dtheta) as f32;
            }
        });
    Ok(out)
}

/// Quantizes through `w`: `round(clamp((v - lo) / (hi - lo), 0, 1) * 65535)`.
pub fn quantize(v: &PartialVolume, w: &HuWindow) -> Vec<u16> {
    v.data.iter().map(|&x| w.quantize(x as f64)).collect()
}

pub fn quantize_volume(v: &PartialVolume, dims: &VolumeDims, w: &HuWindow) -> Result<Volume> {
    if v.rows != (0..dims.nz) || v.tile != Tile::full(dims) {
        return Err(Error::Dimension("quantize_volume needs a full volume".into()));
    }
    Ok(Volume {
        nx: dims.nx,
        ny: dims.ny,
        nz: dims.nz,
        voxel_pitch: dims.voxel_pitch as f32,
        data: quantize(v, w),
    })
}

/// Single-rank reference reconstruction of a full sinogram. `i0` is set when
/// the samples are raw intensity counts rather than optical depth.
pub fn reconstruct(s: &Sinogram, dims: &VolumeDims, spec: &FilterSpec, i0: Option<f64>) -> Result<PartialVolume> {
    let pre;
    let src = match i0 {
        Some(i0) => {
            pre = preprocess(s, i0)?;
            &pre
        }
        None => s,
    };
    let filtered = filter_sinogram(src, spec)?;
    back_project(&filtered, dims, s.rows(), s.angles(), Tile::full(dims))
}
