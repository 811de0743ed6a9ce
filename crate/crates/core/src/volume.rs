//! Array containers: sinograms, float (partial) volumes, quantized volumes
//! and label masks. All volumes are stored z-major, then y, then x.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionParams, VolumeDims};

/// Angle-major stack of projections, possibly restricted to a sub-range of
/// angles and rows of the full acquisition described by `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub params: AcquisitionParams,
    angles: Range<usize>,
    rows: Range<usize>,
    data: Vec<f32>,
}

impl Sinogram {
    pub fn new(params: AcquisitionParams, data: Vec<f32>) -> Result<Self> {
        params.validate()?;
        if data.len() != params.n_samples() {
            return Err(Error::Dimension(format!(
                "sinogram has {} samples, expected {}",
                data.len(),
                params.n_samples()
            )));
        }
        Ok(Self { angles: 0..params.n_proj, rows: 0..params.n_rows, params, data })
    }

    pub fn zeros(params: AcquisitionParams) -> Self {
        let n = params.n_samples();
        Self { angles: 0..params.n_proj, rows: 0..params.n_rows, params, data: vec![0.0; n] }
    }

    /// Block of a larger acquisition holding only `angles` x `rows`.
    pub fn from_block(
        params: AcquisitionParams,
        angles: Range<usize>,
        rows: Range<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if angles.end > params.n_proj || rows.end > params.n_rows || angles.start > angles.end || rows.start > rows.end {
            return Err(Error::Dimension("sinogram block outside acquisition".into()));
        }
        if data.len() != angles.len() * rows.len() * params.n_chan {
            return Err(Error::Dimension("sinogram block length mismatch".into()));
        }
        Ok(Self { params, angles, rows, data })
    }

    pub fn angles(&self) -> Range<usize> {
        self.angles.clone()
    }

    pub fn rows(&self) -> Range<usize> {
        self.rows.clone()
    }

    pub fn is_full(&self) -> bool {
        self.angles == (0..self.params.n_proj) && self.rows == (0..self.params.n_rows)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn n_chan(&self) -> usize {
        self.params.n_chan
    }

    fn offset(&self, k: usize, r: usize) -> usize {
        debug_assert!(self.angles.contains(&k) && self.rows.contains(&r));
        ((k - self.angles.start) * self.rows.len() + (r - self.rows.start)) * self.params.n_chan
    }

    /// Detector line for absolute angle `k` and row `r`.
    pub fn line(&self, k: usize, r: usize) -> &[f32] {
        let o = self.offset(k, r);
        &self.data[o..o + self.params.n_chan]
    }

    pub fn line_mut(&mut self, k: usize, r: usize) -> &mut [f32] {
        let o = self.offset(k, r);
        let n = self.params.n_chan;
        &mut self.data[o..o + n]
    }

    pub fn lines_mut(&mut self) -> std::slice::ChunksExactMut<'_, f32> {
        let n = self.params.n_chan;
        self.data.chunks_exact_mut(n)
    }

    /// Copies out a sub-block (absolute ranges).
    pub fn extract(&self, angles: Range<usize>, rows: Range<usize>) -> Result<Self> {
        if angles.start < self.angles.start
            || angles.end > self.angles.end
            || rows.start < self.rows.start
            || rows.end > self.rows.end
            || angles.start > angles.end
            || rows.start > rows.end
        {
            return Err(Error::Dimension(format!(
                "extract {angles:?} x {rows:?} outside {:?} x {:?}",
                self.angles, self.rows
            )));
        }
        let mut data = Vec::with_capacity(angles.len() * rows.len() * self.params.n_chan);
        for k in angles.clone() {
            for r in rows.clone() {
                data.extend_from_slice(self.line(k, r));
            }
        }
        Ok(Self { params: self.params, angles, rows, data })
    }
}

/// Axis-aligned rectangle `[x0,x1) x [y0,y1)` of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Tile {
    pub fn new(x0: usize, x1: usize, y0: usize, y1: usize) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn full(dims: &VolumeDims) -> Self {
        Self { x0: 0, x1: dims.nx, y0: 0, y1: dims.ny }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn within(&self, dims: &VolumeDims) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= dims.nx && self.y1 <= dims.ny
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// Float volume over `rows` x `tile`; a full reconstruction is the special
/// case `rows = 0..nz`, `tile = full`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialVolume {
    pub rows: Range<usize>,
    pub tile: Tile,
    pub data: Vec<f32>,
}

impl PartialVolume {
    pub fn zeros(rows: Range<usize>, tile: Tile) -> Self {
        let n = rows.len() * tile.area();
        Self { rows, tile, data: vec![0.0; n] }
    }

    pub fn full_zeros(dims: &VolumeDims) -> Self {
        Self::zeros(0..dims.nz, Tile::full(dims))
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z - self.rows.start) * self.tile.height() + (y - self.tile.y0)) * self.tile.width() + (x - self.tile.x0)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Copies `part` into the matching region of `self`.
    pub fn insert(&mut self, part: &PartialVolume) -> Result<()> {
        let t = part.tile;
        if part.rows.start < self.rows.start
            || part.rows.end > self.rows.end
            || t.x0 < self.tile.x0
            || t.x1 > self.tile.x1
            || t.y0 < self.tile.y0
            || t.y1 > self.tile.y1
        {
            return Err(Error::Dimension("partial volume outside target".into()));
        }
        let w = t.width();
        for z in part.rows.clone() {
            for y in t.y0..t.y1 {
                let src = part.index(t.x0, y, z);
                let dst = self.index(t.x0, y, z);
                self.data[dst..dst + w].copy_from_slice(&part.data[src..src + w]);
            }
        }
        Ok(())
    }

    /// Max absolute difference normalized by the max magnitude of `reference`.
    pub fn max_relative_error(&self, reference: &PartialVolume) -> f64 {
        assert_eq!(self.data.len(), reference.data.len());
        let scale = reference.data.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Quantized reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_pitch: f32,
    pub data: Vec<u16>,
}

impl Volume {
    pub fn slice(&self, z: usize) -> &[u16] {
        let n = self.nx * self.ny;
        &self.data[z * n..(z + 1) * n]
    }
}

/// 4-class label volume (values 0..=3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(nx: usize, ny: usize, nz: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != nx * ny * nz {
            return Err(Error::Dimension(format!(
                "mask has {} labels, expected {}",
                labels.len(),
                nx * ny * nz
            )));
        }
        Ok(Self { nx, ny, nz, labels })
    }

    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz, labels: vec![0; nx * ny * nz] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = v;
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.nx * self.ny;
        &self.labels[z * n..(z + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_matches_lines() {
        let p = AcquisitionParams::normal(4, 3, 2, 1.0).unwrap();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let s = Sinogram::new(p, data).unwrap();
        let b = s.extract(1..3, 1..2).unwrap();
        assert_eq!(b.line(1, 1), s.line(1, 1));
        assert_eq!(b.line(2, 1), s.line(2, 1));
        assert_eq!(b.data().len(), 4);
        assert!(s.extract(0..5, 0..1).is_err());
        assert!(!b.is_full());
    }

    #[test]
    fn insert_places_block() {
        let dims = VolumeDims::new(4, 4, 2, 1.0).unwrap();
        let mut full = PartialVolume::full_zeros(&dims);
        let mut part = PartialVolume::zeros(1..2, Tile::new(1, 3, 2, 4));
        part.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 + 1.0);
        full.insert(&part).unwrap();
        assert_eq!(full.get(1, 2, 1), 1.0);
        assert_eq!(full.get(2, 3, 1), 4.0);
        assert_eq!(full.get(0, 0, 0), 0.0);
        let outside = PartialVolume::zeros(0..3, Tile::new(0, 1, 0, 1));
        assert!(full.insert(&outside).is_err());
    }
}
