//! Labeled synthetic microstructures, forward projection and the
//! acquisition degradation chain.
//!
//! Specimens are a cement-paste cylinder (axis along z) on background with
//! non-overlapping spherical aggregates and pores placed by seeded
//! dart throwing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionParams, VolumeDims};
use crate::signal::{blur_f32, gaussian_kernel};
use crate::volume::{MaskVolume, PartialVolume, Sinogram};

pub const BACKGROUND: u8 = 0;
pub const PORE: u8 = 1;
pub const CEMENT: u8 = 2;
pub const AGGREGATE: u8 = 3;
pub const N_CLASSES: usize = 4;

/// Default per-class attenuation in 1/µm. Pores are kept above background so
/// that every class is separable by intensity alone.
pub const DEFAULT_ATTENUATION: [f32; N_CLASSES] = [0.0, 1.0e-4, 3.0e-4, 5.0e-4];

/// Cylinder radius as a fraction of the smaller in-plane extent.
const CYLINDER_FRACTION: f64 = 0.45;
/// Minimum spacing between sphere surfaces, in voxels.
const SPHERE_GAP: f64 = 1.0;
const MAX_ATTEMPTS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Microstructure {
    pub dims: VolumeDims,
    /// Class ids, z-major.
    pub labels: Vec<u8>,
    pub attenuation: [f32; N_CLASSES],
}

impl Microstructure {
    pub fn new(dims: VolumeDims, labels: Vec<u8>, attenuation: [f32; N_CLASSES]) -> Result<Self> {
        dims.validate()?;
        if labels.len() != dims.len() {
            return Err(Error::Dimension("label count does not match dims".into()));
        }
        if labels.iter().any(|&l| l as usize >= N_CLASSES) {
            return Err(Error::Param("labels must be in 0..4".into()));
        }
        check_attenuation(&attenuation)?;
        Ok(Self { dims, labels, attenuation })
    }

    pub fn mask(&self) -> MaskVolume {
        MaskVolume {
            nx: self.dims.nx,
            ny: self.dims.ny,
            nz: self.dims.nz,
            labels: self.labels.clone(),
        }
    }

    /// Per-voxel attenuation as a full float volume.
    pub fn attenuation_volume(&self) -> PartialVolume {
        let mut v = PartialVolume::full_zeros(&self.dims);
        for (o, &l) in v.data.iter_mut().zip(&self.labels) {
            *o = self.attenuation[l as usize];
        }
        v
    }

    pub fn fraction(&self, class: u8) -> f64 {
        let inside = self.labels.iter().filter(|&&l| l != BACKGROUND).count();
        if inside == 0 {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == class).count() as f64 / inside as f64
    }
}

pub fn check_attenuation(a: &[f32; N_CLASSES]) -> Result<()> {
    let ok = a.iter().all(|&v| v >= 0.0 && v.is_finite()) && a[0] <= a[1] && a[1] < a[2] && a[2] < a[3];
    if ok {
        Ok(())
    } else {
        Err(Error::Param(format!(
            "attenuation must satisfy 0 <= bg <= pore < cement < aggregate, got {a:?}"
        )))
    }
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    c: [f64; 3],
    r: f64,
}

/// Generates a 4-class specimen with the requested aggregate and pore
/// volume fractions (relative to the cylinder volume).
pub fn generate_microstructure(
    dims: VolumeDims,
    aggregate_fraction: f64,
    pore_fraction: f64,
    seed: u64,
) -> Result<Microstructure> {
    generate_with_attenuation(dims, aggregate_fraction, pore_fraction, seed, DEFAULT_ATTENUATION)
}

pub fn generate_with_attenuation(
    dims: VolumeDims,
    aggregate_fraction: f64,
    pore_fraction: f64,
    seed: u64,
    attenuation: [f32; N_CLASSES],
) -> Result<Microstructure> {
    if dims.nx * dims.ny * dims.nz == 0 {
        return Err(Error::Dimension("empty volume".into()));
    }
    dims.validate()?;
    check_attenuation(&attenuation)?;
    if !(aggregate_fraction >= 0.0 && pore_fraction >= 0.0 && aggregate_fraction + pore_fraction < 1.0) {
        return Err(Error::Param(format!(
            "fractions must be >= 0 with sum < 1, got {aggregate_fraction} + {pore_fraction}"
        )));
    }
    let (cx, cy) = dims.center();
    let m = dims.nx.min(dims.ny) as f64;
    let r_cyl = CYLINDER_FRACTION * m;
    let mut labels = vec![BACKGROUND; dims.len()];
    let mut cylinder = 0usize;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r_cyl * r_cyl {
                    labels[(z * dims.ny + y) * dims.nx + x] = CEMENT;
                    cylinder += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<Sphere> = Vec::new();
    let agg_radii = ((0.05 * m).max(1.5), (0.12 * m).max(2.5));
    let pore_radii = ((0.02 * m).max(1.0), (0.04 * m).max(1.5));
    let target_agg = aggregate_fraction * cylinder as f64;
    let target_pore = pore_fraction * cylinder as f64;
    let mut sampler = Placement { dims: &dims, r_cyl, labels: &mut labels, placed: &mut placed };
    sampler.fill(&mut rng, AGGREGATE, target_agg, agg_radii);
    sampler.fill(&mut rng, PORE, target_pore, pore_radii);
    Microstructure::new(dims, labels, attenuation)
}

struct Placement<'a> {
    dims: &'a VolumeDims,
    r_cyl: f64,
    labels: &'a mut Vec<u8>,
    placed: &'a mut Vec<Sphere>,
}

impl Placement<'_> {
    fn fill(&mut self, rng: &mut ChaCha8Rng, class: u8, target: f64, radii: (f64, f64)) {
        let mut realized = 0.0;
        let min_vol = 4.0 / 3.0 * PI * radii.0.powi(3);
        let mut attempts = 0;
        while target - realized > 0.5 * min_vol && attempts < MAX_ATTEMPTS {
            attempts += 1;
            let need = target - realized;
            let mut r = rng.random_range(radii.0..=radii.1);
            r = r.min((3.0 * need / (4.0 * PI)).cbrt()).max(1.0);
            if r >= self.r_cyl {
                continue;
            }
            let rho = (self.r_cyl - r) * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let (cx, cy) = self.dims.center();
            let c = [
                cx + rho * phi.cos(),
                cy + rho * phi.sin(),
                rng.random_range(0.0..self.dims.nz as f64) - 0.5,
            ];
            let clear = self.placed.iter().all(|s| {
                let d2: f64 = (0..3).map(|i| (s.c[i] - c[i]).powi(2)).sum();
                d2 >= (s.r + r + SPHERE_GAP).powi(2)
            });
            if !clear {
                continue;
            }
            let painted = self.paint(Sphere { c, r }, class);
            if painted == 0 {
                continue;
            }
            realized += painted as f64;
            self.placed.push(Sphere { c, r });
        }
    }

    fn paint(&mut self, s: Sphere, class: u8) -> usize {
        let d = self.dims;
        let lo = |c: f64, n: usize| ((c - s.r).floor().max(0.0) as usize).min(n);
        let hi = |c: f64, n: usize| ((c + s.r).ceil() as isize + 1).clamp(0, n as isize) as usize;
        let mut n = 0;
        for z in lo(s.c[2], d.nz)..hi(s.c[2], d.nz) {
            for y in lo(s.c[1], d.ny)..hi(s.c[1], d.ny) {
                for x in lo(s.c[0], d.nx)..hi(s.c[0], d.nx) {
                    let d2 = (x as f64 - s.c[0]).powi(2) + (y as f64 - s.c[1]).powi(2) + (z as f64 - s.c[2]).powi(2);
                    let i = (z * d.ny + y) * d.nx + x;
                    if d2 <= s.r * s.r && self.labels[i] == CEMENT {
                        self.labels[i] = class;
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

/// Parallel-beam projection of a float volume: each voxel's value times the
/// pitch is split between the two channels bracketing its ray coordinate
/// (the transpose of the back-projection interpolation).
pub fn project_volume(vol: &PartialVolume, dims: &VolumeDims, params: &AcquisitionParams) -> Result<Sinogram> {
    params.validate()?;
    dims.validate()?;
    dims.check_against(params)?;
    if vol.data.len() != dims.len() || vol.rows != (0..dims.nz) {
        return Err(Error::Dimension("projection needs a full volume".into()));
    }
    let trig = params.trig_table();
    let (cx, cy) = dims.center();
    let axis = params.axis_channel();
    let pitch = dims.voxel_pitch;
    let n_chan = params.n_chan;
    let slice_len = dims.slice_len();
    let per_row: Vec<Vec<f32>> = (0..dims.nz)
        .into_par_iter()
        .map(|z| {
            let slice = &vol.data[z * slice_len..(z + 1) * slice_len];
            let voxels: Vec<(f64, f64, f64)> = slice
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| ((i % dims.nx) as f64 - cx, (i / dims.nx) as f64 - cy, v as f64 * pitch))
                .collect();
            let mut out = vec![0.0f32; params.n_proj * n_chan];
            let mut line = vec![0.0f64; n_chan];
            for (k, &(cos, sin)) in trig.iter().enumerate() {
                line.iter_mut().for_each(|v| *v = 0.0);
                for &(dx, dy, a) in &voxels {
                    let t = axis + dy * sin + dx * cos;
                    splat(&mut line, t, a);
                }
                for (o, &v) in out[k * n_chan..(k + 1) * n_chan].iter_mut().zip(&line) {
                    *o = v as f32;
                }
            }
            out
        })
        .collect();
    let mut s = Sinogram::zeros(*params);
    for (z, row) in per_row.iter().enumerate() {
        for k in 0..params.n_proj {
            s.line_mut(k, z).copy_from_slice(&row[k * n_chan..(k + 1) * n_chan]);
        }
    }
    Ok(s)
}

#[inline(always)]
fn splat(line: &mut [f64], t: f64, a: f64) {
    if t >= 0.0 {
        let i = t as usize;
        if i + 1 < line.len() {
            let f = t - i as f64;
            line[i] += (1.0 - f) * a;
            line[i + 1] += f * a;
            return;
        }
    }
    let fl = t.floor();
    let f = t - fl;
    let i = fl as isize;
    let n = line.len() as isize;
    if i >= 0 && i < n {
        line[i as usize] += (1.0 - f) * a;
    }
    if i + 1 >= 0 && i + 1 < n {
        line[(i + 1) as usize] += f * a;
    }
}

/// Noise-free sinogram of optical depths for `m`.
pub fn forward_project(m: &Microstructure, params: &AcquisitionParams) -> Result<Sinogram> {
    project_volume(&m.attenuation_volume(), &m.dims, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Mean photon count at zero attenuation.
    pub poisson_flux: f64,
    /// Sample photon counts; when off intensities stay noise-free.
    pub poisson: bool,
    pub gaussian_sigma: f64,
    /// Channel-direction blur std in channels.
    pub blur_sigma: f64,
    pub ring_gain_sigma: f64,
    /// Keep every `sparsity`-th angle.
    pub sparsity: usize,
    pub seed: u64,
}

impl DegradationSpec {
    /// No degradation at all.
    pub fn identity(poisson_flux: f64) -> Self {
        Self {
            poisson_flux,
            poisson: false,
            gaussian_sigma: 0.0,
            blur_sigma: 0.0,
            ring_gain_sigma: 0.0,
            sparsity: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.poisson_flux > 0.0 && self.poisson_flux.is_finite()) {
            return Err(Error::Param("poisson_flux must be positive".into()));
        }
        if !(self.gaussian_sigma >= 0.0 && self.blur_sigma >= 0.0 && self.ring_gain_sigma >= 0.0) {
            return Err(Error::Param("noise sigmas must be >= 0".into()));
        }
        if self.sparsity < 1 {
            return Err(Error::Param("sparsity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Poisson variate: inversion below mean 30, rounded normal approximation
/// above.
pub fn poisson_sample<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 30.0 {
        let u: f64 = rng.random();
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        let z: f64 = StandardNormal.sample(rng);
        (mean + mean.sqrt() * z).round().max(0.0)
    }
}

/// Applies the degradation chain to an optical-depth sinogram:
/// Beer-Lambert to counts, per-channel ring gain, channel blur, Poisson
/// sampling, additive Gaussian noise, clamp to one count, back to optical
/// depth, then angle subsampling.
pub fn degrade(s: &Sinogram, spec: &DegradationSpec) -> Result<Sinogram> {
    spec.validate()?;
    if !s.is_full() {
        return Err(Error::Param("degrade needs a full sinogram".into()));
    }
    let params = s.params;
    if params.n_proj % spec.sparsity != 0 {
        return Err(Error::Param(format!(
            "n_proj {} not divisible by sparsity {}",
            params.n_proj, spec.sparsity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let i0 = spec.poisson_flux;
    let gains: Vec<f64> = (0..params.n_chan)
        .map(|_| {
            if spec.ring_gain_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + spec.ring_gain_sigma * z).max(0.05)
            } else {
                1.0
            }
        })
        .collect();
    let kernel = gaussian_kernel(spec.blur_sigma);
    let kept: Vec<usize> = (0..params.n_proj).step_by(spec.sparsity).collect();
    let mut out_params = params;
    out_params.n_proj = kept.len();
    let mut out = Sinogram::zeros(out_params);
    let mut counts = vec![0.0f32; params.n_chan];
    for k in 0..params.n_proj {
        for r in 0..params.n_rows {
            // the noise stream covers every angle, so subsampling does not
            // change the draws for kept angles
            for ((c, &p), g) in counts.iter_mut().zip(s.line(k, r)).zip(&gains) {
                *c = (i0 * (-(p as f64)).exp() * g) as f32;
            }
            blur_f32(&mut counts, &kernel);
            let keep = k % spec.sparsity == 0;
            let dst = if keep { Some(out.line_mut(k / spec.sparsity, r)) } else { None };
            let mut depth = Vec::with_capacity(params.n_chan);
            for &c in counts.iter() {
                let mut i = c as f64;
                if spec.poisson {
                    i = poisson_sample(&mut rng, i);
                }
                if spec.gaussian_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    i += spec.gaussian_sigma * z;
                }
                depth.push(-(i.max(1.0) / i0).ln() as f32);
            }
            if let Some(dst) = dst {
                dst.copy_from_slice(&depth);
            }
        }
    }
    Ok(out)
}

/// Optical depth to raw counts: `i0 * exp(-p)`.
pub fn to_intensity(s: &Sinogram, i0: f64) -> Sinogram {
    let mut out = s.clone();
    for v in out.data_mut() {
        *v = (i0 * (-(*v as f64)).exp()) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims(n: usize, nz: usize) -> VolumeDims {
        VolumeDims::new(n, n, nz, 1.0).unwrap()
    }

    #[test]
    fn empty_fractions_give_plain_cylinder() {
        let m = generate_microstructure(small_dims(24, 3), 0.0, 0.0, 1).unwrap();
        let (cx, cy) = m.dims.center();
        for y in 0..24 {
            for x in 0..24 {
                let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= (0.45f64 * 24.0).powi(2);
                let want = if inside { CEMENT } else { BACKGROUND };
                assert_eq!(m.labels[y * 24 + x], want);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let d = small_dims(32, 8);
        let a = generate_microstructure(d, 0.3, 0.05, 7).unwrap();
        let b = generate_microstructure(d, 0.3, 0.05, 7).unwrap();
        let c = generate_microstructure(d, 0.3, 0.05, 8).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = small_dims(16, 2);
        assert!(generate_microstructure(d, 0.6, 0.4, 0).is_err());
        assert!(generate_microstructure(d, -0.1, 0.0, 0).is_err());
        let mut z = d;
        z.nz = 0;
        assert!(generate_microstructure(z, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn background_projects_to_zero() {
        let d = small_dims(16, 2);
        let m = Microstructure::new(d, vec![0; d.len()], DEFAULT_ATTENUATION).unwrap();
        let p = AcquisitionParams::normal(12, 2, 16, 1.0).unwrap();
        let s = forward_project(&m, &p).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let d = small_dims(16, 2);
        let m = generate_microstructure(d, 0.0, 0.0, 0).unwrap();
        let p = AcquisitionParams::normal(12, 3, 16, 1.0).unwrap();
        assert!(forward_project(&m, &p).is_err());
    }

    #[test]
    fn identity_degradation() {
        let d = small_dims(16, 2);
        let m = generate_microstructure(d, 0.2, 0.0, 3).unwrap();
        let p = AcquisitionParams::normal(8, 2, 16, 1.0).unwrap();
        let s = forward_project(&m, &p).unwrap();
        let o = degrade(&s, &DegradationSpec::identity(1e6)).unwrap();
        for (a, b) in s.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn sparsity_keeps_every_kth_angle() {
        let p = AcquisitionParams::normal(360, 1, 4, 1.0).unwrap();
        let s = Sinogram::zeros(p);
        let mut spec = DegradationSpec::identity(1e4);
        spec.sparsity = 4;
        let o = degrade(&s, &spec).unwrap();
        assert_eq!(o.params.n_proj, 90);
        assert!((o.params.angle(1) - p.angle(4)).abs() < 1e-12);
        spec.sparsity = 7;
        assert!(degrade(&s, &spec).is_err());
    }

    #[test]
    fn ring_error_is_constant_per_channel() {
        let p = AcquisitionParams::normal(20, 2, 16, 1.0).unwrap();
        let data: Vec<f32> = (0..p.n_samples()).map(|i| ((i * 37) % 13) as f32 * 0.05).collect();
        let s = Sinogram::new(p, data).unwrap();
        let mut spec = DegradationSpec::identity(1e6);
        spec.ring_gain_sigma = 0.05;
        spec.seed = 11;
        let o = degrade(&s, &spec).unwrap();
        for c in 0..16 {
            let err0 = o.line(0, 0)[c] - s.line(0, 0)[c];
            for k in 0..20 {
                for r in 0..2 {
                    let e = o.line(k, r)[c] - s.line(k, r)[c];
                    assert!((e - err0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn poisson_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mean in [3.0, 80.0] {
            let n = 20000;
            let xs: Vec<f64> = (0..n).map(|_| poisson_sample(&mut rng, mean)).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            assert!((m - mean).abs() < 0.05 * mean, "mean {m}");
            assert!((v - mean).abs() < 0.1 * mean, "var {v}");
        }
    }

    #[test]
    fn noisy_degradation_is_seeded() {
        let p = AcquisitionParams::normal(8, 2, 16, 1.0).unwrap();
        let s = Sinogram::zeros(p);
        let spec = DegradationSpec {
            poisson_flux: 500.0,
            poisson: true,
            gaussian_sigma: 2.0,
            blur_sigma: 1.0,
            ring_gain_sigma: 0.02,
            sparsity: 2,
            seed: 42,
        };
        assert_eq!(degrade(&s, &spec).unwrap(), degrade(&s, &spec).unwrap());
        let mut other = spec;
        other.seed = 43;
        assert_ne!(degrade(&s, &spec).unwrap(), degrade(&s, &other).unwrap());
    }
}
