//! Acquisition and volume coordinate conventions.
//!
//! The volume is centered at `((nx-1)/2, (ny-1)/2)` and the detector at
//! `(n_chan-1)/2`. Voxel pitch equals detector pitch (parallel beam, unit
//! magnification), so a ray coordinate is measured directly in channels.
//! The rotation axis projects onto channel `(n_chan-1)/2 - offset_chan`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    Normal,
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub n_proj: usize,
    pub n_rows: usize,
    pub n_chan: usize,
    /// Total rotation in radians.
    pub angle_span: f64,
    /// Detector channel spacing in micrometers.
    pub pixel_pitch: f64,
    pub scan_mode: ScanMode,
    /// Signed lateral detector shift in channels.
    pub offset_chan: i32,
}

impl AcquisitionParams {
    /// Normal scan over π.
    pub fn normal(n_proj: usize, n_rows: usize, n_chan: usize, pixel_pitch: f64) -> Result<Self> {
        let p = Self {
            n_proj,
            n_rows,
            n_chan,
            angle_span: PI,
            pixel_pitch,
            scan_mode: ScanMode::Normal,
            offset_chan: 0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Offset scan over 2π with the detector shifted by `offset_chan` channels.
    pub fn offset(
        n_proj: usize,
        n_rows: usize,
        n_chan: usize,
        pixel_pitch: f64,
        offset_chan: i32,
    ) -> Result<Self> {
        let p = Self {
            n_proj,
            n_rows,
            n_chan,
            angle_span: 2.0 * PI,
            pixel_pitch,
            scan_mode: ScanMode::Offset,
            offset_chan,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_proj < 1 {
            return Err(Error::Geometry("n_proj must be >= 1".into()));
        }
        if self.n_rows < 1 {
            return Err(Error::Geometry("n_rows must be >= 1".into()));
        }
        if self.n_chan < 2 {
            return Err(Error::Geometry("n_chan must be >= 2".into()));
        }
        if !(self.angle_span > 0.0 && self.angle_span.is_finite()) {
            return Err(Error::Geometry("angle_span must be positive".into()));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::Geometry("pixel_pitch must be positive".into()));
        }
        match self.scan_mode {
            ScanMode::Normal if self.offset_chan != 0 => {
                Err(Error::Geometry("normal scan requires offset_chan = 0".into()))
            }
            ScanMode::Offset
                if self.offset_chan == 0 || self.offset_chan.unsigned_abs() as usize >= self.n_chan =>
            {
                Err(Error::Geometry(format!(
                    "offset scan requires 0 < |offset_chan| < n_chan, got {}",
                    self.offset_chan
                )))
            }
            _ => Ok(()),
        }
    }

    /// Angle of projection `k`: `k * angle_span / n_proj`.
    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * self.angle_span / self.n_proj as f64
    }

    pub fn angle_step(&self) -> f64 {
        self.angle_span / self.n_proj as f64
    }

    /// `(cos, sin)` for every projection angle.
    pub fn trig_table(&self) -> Vec<(f64, f64)> {
        (0..self.n_proj)
            .map(|k| {
                let a = self.angle(k);
                (a.cos(), a.sin())
            })
            .collect()
    }

    pub fn detector_center(&self) -> f64 {
        (self.n_chan as f64 - 1.0) / 2.0
    }

    /// Channel onto which the rotation axis projects.
    pub fn axis_channel(&self) -> f64 {
        self.detector_center() - self.offset_chan as f64
    }

    /// Radius (in voxels) of the cylinder reconstructed from this acquisition.
    ///
    /// Normal scans see the inscribed disc of the detector. Offset scans over
    /// a full turn see out to the far detector edge.
    pub fn fov_radius(&self) -> f64 {
        let a = self.axis_channel();
        let b = self.n_chan as f64 - 1.0 - a;
        match self.scan_mode {
            ScanMode::Normal => a.min(b),
            ScanMode::Offset => a.max(b),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_proj * self.n_rows * self.n_chan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Micrometers.
    pub voxel_pitch: f64,
}

impl VolumeDims {
    pub fn new(nx: usize, ny: usize, nz: usize, voxel_pitch: f64) -> Result<Self> {
        let d = Self { nx, ny, nz, voxel_pitch };
        d.validate()?;
        Ok(d)
    }

    /// Volume matching `params`: one slice per detector row, same pitch.
    pub fn for_acquisition(params: &AcquisitionParams, nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, params.n_rows, params.pixel_pitch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Geometry(format!(
                "volume needs nx, ny >= 2, got {}x{}",
                self.nx, self.ny
            )));
        }
        if self.nz < 1 {
            return Err(Error::Geometry("volume needs nz >= 1".into()));
        }
        if !(self.voxel_pitch > 0.0 && self.voxel_pitch.is_finite()) {
            return Err(Error::Geometry("voxel_pitch must be positive".into()));
        }
        Ok(())
    }

    /// Checks the row/slice bijection and pitch agreement with `params`.
    pub fn check_against(&self, params: &AcquisitionParams) -> Result<()> {
        if self.nz != params.n_rows {
            return Err(Error::Dimension(format!(
                "volume nz {} != detector rows {}",
                self.nz, params.n_rows
            )));
        }
        if (self.voxel_pitch - params.pixel_pitch).abs() > 1e-9 * params.pixel_pitch {
            return Err(Error::Dimension(format!(
                "voxel pitch {} != pixel pitch {}",
                self.voxel_pitch, params.pixel_pitch
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.nx as f64 - 1.0) / 2.0, (self.ny as f64 - 1.0) / 2.0)
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specimen {
    pub id: String,
    pub params: AcquisitionParams,
    pub dims: VolumeDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenSet {
    specimens: Vec<Specimen>,
}

impl SpecimenSet {
    pub fn new(specimens: Vec<Specimen>) -> Result<Self> {
        if specimens.is_empty() {
            return Err(Error::Geometry("specimen set is empty".into()));
        }
        for (i, s) in specimens.iter().enumerate() {
            s.params.validate()?;
            s.dims.validate()?;
            s.dims.check_against(&s.params)?;
            if specimens[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Geometry(format!("duplicate specimen id {:?}", s.id)));
            }
        }
        Ok(Self { specimens })
    }

    pub fn specimens(&self) -> &[Specimen] {
        &self.specimens
    }

    pub fn len(&self) -> usize {
        self.specimens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specimens.is_empty()
    }
}

/// Continuous detector channel hit by the ray through voxel `(x, y)` at
/// angle `theta`.
#[inline]
pub fn ray_coordinate(x: f64, y: f64, theta: f64, params: &AcquisitionParams, dims: &VolumeDims) -> f64 {
    ray_coordinate_trig(x, y, theta.cos(), theta.sin(), params, dims)
}

#[inline]
pub fn ray_coordinate_trig(
    x: f64,
    y: f64,
    cos: f64,
    sin: f64,
    params: &AcquisitionParams,
    dims: &VolumeDims,
) -> f64 {
    let (cx, cy) = dims.center();
    params.axis_channel() + (x - cx) * cos + (y - cy) * sin
}
