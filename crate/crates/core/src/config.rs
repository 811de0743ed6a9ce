//! Plain-text `key = value` experiment configuration. Defaults form the
//! standard 256³ preset; unknown or repeated keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fbp::{FilterKind, HuWindow, DEFAULT_OVERLAP_BAND};
use crate::geometry::{AcquisitionParams, ScanMode, Specimen, SpecimenSet, VolumeDims};
use crate::partition::{Mapping, RankGrid};
use crate::phantom::{degrade, forward_project, generate_with_attenuation, DegradationSpec, Microstructure, N_CLASSES};
use crate::pipeline::PipelineConfig;
use crate::ranksim::{Fabric, StorageModel};
use crate::segfuse::{SapParams, ThresholdSegmenter};
use crate::volume::Sinogram;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub specimens: usize,
    // acquisition and volume
    pub n_proj: usize,
    pub n_rows: usize,
    pub n_chan: usize,
    pub nx: usize,
    pub ny: usize,
    pub pixel_pitch: f64,
    pub scan_mode: ScanMode,
    pub offset_chan: i32,
    // microstructure
    pub aggregate_fraction: f64,
    pub pore_fraction: f64,
    pub attenuation: [f32; N_CLASSES],
    // degradation
    pub poisson_flux: f64,
    pub poisson: bool,
    pub gaussian_sigma: f64,
    pub detector_blur: f64,
    pub ring_gain_sigma: f64,
    pub sparsity: usize,
    // reconstruction
    pub filter: FilterKind,
    pub prefilter_sigma: f64,
    pub overlap_band: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    // parallel execution
    pub grid: RankGrid,
    pub groups: usize,
    pub overlap: bool,
    pub fuse: bool,
    pub mapping: Mapping,
    pub mem_budget: Option<u64>,
    pub flop_rate: f64,
    pub link_bandwidth: f64,
    pub link_latency: f64,
    pub pfs_read_bw: f64,
    pub pfs_write_bw: f64,
    pub staging_bw: f64,
    // segmentation
    pub leaf_budget: usize,
    pub patch_size: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
    /// Explicit uint16 class thresholds; midpoints between class levels when unset.
    pub thresholds: Option<[f32; 3]>,
    pub connectivity: u32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            specimens: 1,
            n_proj: 256,
            n_rows: 256,
            n_chan: 256,
            nx: 256,
            ny: 256,
            pixel_pitch: 12.0,
            scan_mode: ScanMode::Normal,
            offset_chan: 0,
            aggregate_fraction: 0.35,
            pore_fraction: 0.04,
            attenuation: crate::phantom::DEFAULT_ATTENUATION,
            poisson_flux: 1.0e5,
            poisson: true,
            gaussian_sigma: 0.0,
            detector_blur: 0.0,
            ring_gain_sigma: 0.0,
            sparsity: 1,
            filter: FilterKind::RamLak,
            prefilter_sigma: 1.0,
            overlap_band: DEFAULT_OVERLAP_BAND,
            window_lo: -1.0e-4,
            window_hi: 6.0e-4,
            grid: RankGrid::new(1, 2, 2).unwrap(),
            groups: 1,
            overlap: true,
            fuse: true,
            mapping: Mapping::Cyclic,
            mem_budget: None,
            flop_rate: 1.0e11,
            link_bandwidth: 1.0e10,
            link_latency: 2.0e-6,
            pfs_read_bw: 2.0e9,
            pfs_write_bw: 1.0e9,
            staging_bw: 1.0e10,
            leaf_budget: 256,
            patch_size: 16,
            canny_low: 0.1,
            canny_high: 0.3,
            canny_sigma: 1.0,
            thresholds: None,
            connectivity: 6,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", ln + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", ln + 1)));
            }
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", ln + 1)),
                other => other,
            })?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "specimens" => self.specimens = parse_num(key, v)?,
            "n_proj" => self.n_proj = parse_num(key, v)?,
            "n_rows" => self.n_rows = parse_num(key, v)?,
            "n_chan" => self.n_chan = parse_num(key, v)?,
            "nx" => self.nx = parse_num(key, v)?,
            "ny" => self.ny = parse_num(key, v)?,
            "pixel_pitch" => self.pixel_pitch = parse_num(key, v)?,
            "scan_mode" => {
                self.scan_mode = match v {
                    "normal" => ScanMode::Normal,
                    "offset" => ScanMode::Offset,
                    _ => return Err(Error::Config(format!("scan_mode: expected normal or offset, got {v:?}"))),
                }
            }
            "offset_chan" => self.offset_chan = parse_num(key, v)?,
            "aggregate_fraction" => self.aggregate_fraction = parse_num(key, v)?,
            "pore_fraction" => self.pore_fraction = parse_num(key, v)?,
            "mu_background" => self.attenuation[0] = parse_num(key, v)?,
            "mu_pore" => self.attenuation[1] = parse_num(key, v)?,
            "mu_cement" => self.attenuation[2] = parse_num(key, v)?,
            "mu_aggregate" => self.attenuation[3] = parse_num(key, v)?,
            "poisson_flux" => self.poisson_flux = parse_num(key, v)?,
            "poisson" => self.poisson = parse_switch(key, v)?,
            "gaussian_sigma" => self.gaussian_sigma = parse_num(key, v)?,
            "detector_blur" => self.detector_blur = parse_num(key, v)?,
            "ring_gain_sigma" => self.ring_gain_sigma = parse_num(key, v)?,
            "sparsity" => self.sparsity = parse_num(key, v)?,
            "filter" => {
                self.filter = match v {
                    "ramlak" | "ram-lak" => FilterKind::RamLak,
                    "shepp-logan" | "shepplogan" => FilterKind::SheppLogan,
                    _ => return Err(Error::Config(format!("filter: expected ramlak or shepp-logan, got {v:?}"))),
                }
            }
            "prefilter_sigma" => self.prefilter_sigma = parse_num(key, v)?,
            "overlap_band" => self.overlap_band = parse_num(key, v)?,
            "window_lo" => self.window_lo = parse_num(key, v)?,
            "window_hi" => self.window_hi = parse_num(key, v)?,
            "grid" => self.grid = v.parse().map_err(|e: Error| Error::Config(format!("grid: {e}")))?,
            "groups" => self.groups = parse_num(key, v)?,
            "overlap" => self.overlap = parse_switch(key, v)?,
            "fuse" => self.fuse = parse_switch(key, v)?,
            "mapping" => {
                self.mapping = match v {
                    "block" => Mapping::Block,
                    "cyclic" => Mapping::Cyclic,
                    _ => return Err(Error::Config(format!("mapping: expected block or cyclic, got {v:?}"))),
                }
            }
            "mem_budget" => self.mem_budget = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "flop_rate" => self.flop_rate = parse_num(key, v)?,
            "link_bandwidth" => self.link_bandwidth = parse_num(key, v)?,
            "link_latency" => self.link_latency = parse_num(key, v)?,
            "pfs_read_bw" => self.pfs_read_bw = parse_num(key, v)?,
            "pfs_write_bw" => self.pfs_write_bw = parse_num(key, v)?,
            "staging_bw" => self.staging_bw = parse_num(key, v)?,
            "leaf_budget" => self.leaf_budget = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "canny_low" => self.canny_low = parse_num(key, v)?,
            "canny_high" => self.canny_high = parse_num(key, v)?,
            "canny_sigma" => self.canny_sigma = parse_num(key, v)?,
            "thresholds" => {
                if v == "auto" {
                    self.thresholds = None;
                } else {
                    let t: Vec<f32> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
                    if t.len() != 3 {
                        return Err(Error::Config("thresholds: expected three comma-separated values".into()));
                    }
                    self.thresholds = Some([t[0], t[1], t[2]]);
                }
            }
            "connectivity" => self.connectivity = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn acquisition(&self) -> Result<AcquisitionParams> {
        match self.scan_mode {
            ScanMode::Normal => AcquisitionParams::normal(self.n_proj, self.n_rows, self.n_chan, self.pixel_pitch),
            ScanMode::Offset => AcquisitionParams::offset(self.n_proj, self.n_rows, self.n_chan, self.pixel_pitch, self.offset_chan),
        }
    }

    pub fn dims(&self) -> Result<VolumeDims> {
        VolumeDims::for_acquisition(&self.acquisition()?, self.nx, self.ny)
    }

    /// Acquisition after angle subsampling.
    pub fn acquired(&self) -> Result<AcquisitionParams> {
        let mut p = self.acquisition()?;
        if self.sparsity == 0 || p.n_proj % self.sparsity != 0 {
            return Err(Error::Config(format!("sparsity {} must divide n_proj {}", self.sparsity, p.n_proj)));
        }
        p.n_proj /= self.sparsity;
        Ok(p)
    }

    pub fn specimen_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn degradation(&self, i: usize) -> DegradationSpec {
        DegradationSpec {
            poisson_flux: self.poisson_flux,
            poisson: self.poisson,
            gaussian_sigma: self.gaussian_sigma,
            blur_sigma: self.detector_blur,
            ring_gain_sigma: self.ring_gain_sigma,
            sparsity: self.sparsity,
            seed: self.specimen_seed(i) ^ 0x5EED,
        }
    }

    pub fn window(&self) -> Result<HuWindow> {
        HuWindow::new(self.window_lo, self.window_hi)
    }

    /// Explicit thresholds, or midpoints between the quantized class levels.
    pub fn segmenter(&self) -> Result<ThresholdSegmenter> {
        if let Some([a, b, c]) = self.thresholds {
            return ThresholdSegmenter::new(a, b, c);
        }
        let w = self.window()?;
        let q: Vec<f64> = self.attenuation.iter().map(|&m| w.quantize(m as f64) as f64).collect();
        let mid = |i: usize| ((q[i] + q[i + 1]) / 2.0) as f32;
        ThresholdSegmenter::new(mid(0), mid(1), mid(2))
    }

    pub fn sap(&self) -> SapParams {
        SapParams {
            budget: self.leaf_budget,
            p: self.patch_size,
            canny_low: self.canny_low,
            canny_high: self.canny_high,
            canny_sigma: self.canny_sigma,
        }
    }

    pub fn specimen_set(&self) -> Result<SpecimenSet> {
        let params = self.acquired()?;
        let dims = VolumeDims::for_acquisition(&params, self.nx, self.ny)?;
        SpecimenSet::new(
            (0..self.specimens)
                .map(|i| Specimen { id: format!("specimen{i}"), params, dims })
                .collect(),
        )
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut p = PipelineConfig::new(self.grid, self.groups, self.window()?);
        p.overlap = self.overlap;
        p.fuse_ai = self.fuse;
        p.mapping = self.mapping;
        p.filter = self.filter;
        p.blur_sigma = self.prefilter_sigma;
        p.overlap_band = self.overlap_band;
        p.mem_budget = self.mem_budget;
        p.flop_rate = self.flop_rate;
        p.sap = self.sap();
        p.segmenter = self.segmenter()?;
        p.validate()?;
        Ok(p)
    }

    pub fn fabric(&self) -> Result<Fabric> {
        Fabric::new(self.grid.total(), self.link_bandwidth, self.link_latency, self.seed)
    }

    pub fn storage(&self) -> Result<StorageModel> {
        StorageModel::new(self.pfs_read_bw, self.pfs_write_bw, self.staging_bw)
    }

    /// Ground-truth specimen `i` and its degraded optical-depth sinogram.
    pub fn simulate(&self, i: usize) -> Result<(Microstructure, Sinogram)> {
        let params = self.acquisition()?;
        let dims = self.dims()?;
        let m = generate_with_attenuation(dims, self.aggregate_fraction, self.pore_fraction, self.specimen_seed(i), self.attenuation)?;
        let clean = forward_project(&m, &params)?;
        let s = degrade(&clean, &self.degradation(i))?;
        Ok((m, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let c = Config::parse("# comment\nseed = 9\ngrid = 2x1x3\nfuse = off\nthresholds = 1, 2, 3\n\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.grid.total(), 6);
        assert!(!c.fuse);
        assert_eq!(c.thresholds, Some([1.0, 2.0, 3.0]));
        assert!(matches!(Config::parse("colour = red"), Err(Error::Config(_))));
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("seed 1").is_err());
        assert!(Config::parse("overlap = maybe").is_err());
    }

    #[test]
    fn default_thresholds_separate_classes() {
        let c = Config::default();
        let s = c.segmenter().unwrap();
        let w = c.window().unwrap();
        for (class, &mu) in c.attenuation.iter().enumerate() {
            assert_eq!(s.classify(w.quantize(mu as f64) as f32) as usize, class);
        }
    }

    #[test]
    fn sparsity_must_divide() {
        let c = Config { n_proj: 10, sparsity: 3, ..Config::default() };
        assert!(c.acquired().is_err());
    }
}
