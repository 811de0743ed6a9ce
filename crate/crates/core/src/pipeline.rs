//! Four-stage reconstruction pipeline over group-row partitions:
//! load (PFS to staging), compute (broadcast, filter, back-project), reduce
//! (reduce-scatter of partial volumes) and store (uint16 volume, or fused
//! segmentation writing 2-bit masks).
//!
//! The math runs group by group; stage durations come from the fabric and
//! storage cost models, and the schedule is derived from them. With overlap
//! on, groups flow through the stages as a permutation flow shop:
//! `C[g][s] = max(C[g][s-1], C[g-1][s]) + t[g][s]`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbp::{back_project, filter_sinogram, preprocess, FilterKind, FilterSpec, HuWindow, DEFAULT_OVERLAP_BAND};
use crate::geometry::SpecimenSet;
use crate::partition::{map_block, map_cyclic, partition_specimens, Group, Mapping, RankGrid};
use crate::ranksim::{Fabric, StorageModel, Tier};
use crate::segfuse::{assemble_mask, fused_infer, FusedStats, MaskPiece, SapParams, SlicePiece, ThresholdSegmenter};
use crate::volume::{MaskVolume, PartialVolume, Sinogram, Tile, Volume};

/// Flops charged per (angle, voxel) pair.
pub const FLOPS_PER_PAIR: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Load,
    Comp,
    Comm,
    Store,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Load, Stage::Comp, Stage::Comm, Stage::Store];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Comp => "comp",
            Stage::Comm => "comm",
            Stage::Store => "store",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub group: usize,
    pub stage: Stage,
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
    pub flops: f64,
}

/// Per-group, per-stage timing. Load and store bytes are PFS bytes; compute
/// and reduce bytes are link bytes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub records: Vec<StageRecord>,
}

impl StageTrace {
    pub fn n_groups(&self) -> usize {
        self.records.iter().map(|r| r.group + 1).max().unwrap_or(0)
    }

    pub fn durations(&self) -> Vec<[f64; 4]> {
        let mut t = vec![[0.0; 4]; self.n_groups()];
        for r in &self.records {
            t[r.group][r.stage as usize] = r.end - r.start;
        }
        t
    }

    pub fn makespan(&self) -> f64 {
        self.records.iter().map(|r| r.end).fold(0.0, f64::max)
    }

    pub fn bytes(&self, stage: Stage) -> u64 {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.bytes).sum()
    }

    pub fn flops(&self) -> f64 {
        self.records.iter().map(|r| r.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,stage,start,end,bytes,flops\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.9},{:.9},{},{:.0}\n", r.group, r.stage.name(), r.start, r.end, r.bytes, r.flops));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: RankGrid,
    pub group_size: usize,
    pub overlap: bool,
    pub fuse_ai: bool,
    pub mapping: Mapping,
    pub filter: FilterKind,
    pub blur_sigma: f64,
    pub overlap_band: f64,
    /// Set when the inputs are raw counts rather than optical depth.
    pub i0: Option<f64>,
    pub window: HuWindow,
    /// Per-rank budget for resident projections and partial volumes.
    pub mem_budget: Option<u64>,
    /// Modeled per-rank compute rate, flop/s.
    pub flop_rate: f64,
    pub sap: SapParams,
    pub segmenter: ThresholdSegmenter,
}

impl PipelineConfig {
    pub fn new(grid: RankGrid, group_size: usize, window: HuWindow) -> Self {
        Self {
            grid,
            group_size,
            overlap: true,
            fuse_ai: false,
            mapping: Mapping::Cyclic,
            filter: FilterKind::RamLak,
            blur_sigma: 0.0,
            overlap_band: DEFAULT_OVERLAP_BAND,
            i0: None,
            window,
            mem_budget: None,
            flop_rate: 1.0e11,
            sap: SapParams::default(),
            segmenter: ThresholdSegmenter { t: [16384.0, 32768.0, 49152.0] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 1 {
            return Err(Error::Param("group size must be >= 1".into()));
        }
        if !(self.flop_rate > 0.0) {
            return Err(Error::Param("flop rate must be > 0".into()));
        }
        if self.fuse_ai {
            self.sap.validate()?;
        }
        Ok(())
    }

    pub fn filter_spec(&self, n_chan: usize) -> FilterSpec {
        FilterSpec { blur_sigma: self.blur_sigma, overlap_band: self.overlap_band, ..FilterSpec::new(self.filter, n_chan) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub makespan: f64,
    pub model_makespan: f64,
    pub serial_time: f64,
    pub max_stage_total: f64,
    pub flops: f64,
    /// Raw sinogram bytes of all specimens.
    pub sinogram_bytes: u64,
    /// Reconstructed voxels over all specimens.
    pub voxels: u64,
    pub pfs_bytes_read: u64,
    pub pfs_bytes_written: u64,
    pub staging_bytes: u64,
    pub link_bytes: u64,
    pub fused: Option<FusedStats>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Float reconstructions, one full volume per specimen.
    pub volumes: Vec<PartialVolume>,
    pub quantized: Vec<Volume>,
    /// Label volumes when `fuse_ai` is set, empty otherwise.
    pub masks: Vec<MaskVolume>,
    pub trace: StageTrace,
    pub report: RunReport,
}

/// Fill of the first group plus the slowest stage of every later group.
pub fn makespan_model(stage_times: &[[f64; 4]]) -> f64 {
    let Some(first) = stage_times.first() else { return 0.0 };
    first.iter().sum::<f64>() + stage_times[1..].iter().map(|t| t.iter().cloned().fold(0.0, f64::max)).sum::<f64>()
}

/// Completion times `C[g][s]` of the flow-shop schedule.
pub fn flow_shop(stage_times: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let mut c = vec![[0.0; 4]; stage_times.len()];
    for g in 0..stage_times.len() {
        for s in 0..4 {
            let ready: f64 = if s > 0 { c[g][s - 1] } else { 0.0 };
            let free = if g > 0 { c[g - 1][s] } else { 0.0 };
            c[g][s] = ready.max(free) + stage_times[g][s];
        }
    }
    c
}

pub fn max_stage_total(stage_times: &[[f64; 4]]) -> f64 {
    (0..4).map(|s| stage_times.iter().map(|t| t[s]).sum::<f64>()).fold(0.0, f64::max)
}

pub fn serial_total(stage_times: &[[f64; 4]]) -> f64 {
    stage_times.iter().flatten().sum()
}

fn schedule(stage_times: &[[f64; 4]], overlap: bool) -> Vec<[(f64, f64); 4]> {
    if overlap {
        flow_shop(stage_times)
            .iter()
            .zip(stage_times)
            .map(|(c, t)| std::array::from_fn(|s| (c[s] - t[s], c[s])))
            .collect()
    } else {
        let mut now = 0.0;
        stage_times
            .iter()
            .map(|t| {
                std::array::from_fn(|s| {
                    let start = now;
                    now += t[s];
                    (start, now)
                })
            })
            .collect()
    }
}

/// Blocks aligned to whole slices: `ceil(rows / g)` slices each.
fn slice_blocks(rows: usize, g: usize) -> usize {
    rows.div_ceil(g)
}

#[derive(Default)]
struct GroupStages {
    times: [f64; 4],
    bytes: [u64; 4],
    flops: f64,
}

struct Ctx<'a> {
    set: &'a SpecimenSet,
    sinos: &'a [Sinogram],
    cfg: &'a PipelineConfig,
    fabric: &'a mut Fabric,
    storage: &'a mut StorageModel,
    volumes: Vec<PartialVolume>,
    mask_pieces: Vec<Vec<MaskPiece>>,
    fused: FusedStats,
}

/// Runs the pipeline on full sinograms (one per specimen, same order as
/// `set`).
pub fn run(
    set: &SpecimenSet,
    sinos: &[Sinogram],
    cfg: &PipelineConfig,
    fabric: &mut Fabric,
    storage: &mut StorageModel,
) -> Result<RunOutput> {
    cfg.validate()?;
    if sinos.len() != set.len() {
        return Err(Error::Dimension(format!("{} sinograms for {} specimens", sinos.len(), set.len())));
    }
    for (s, sp) in sinos.iter().zip(set.specimens()) {
        if !s.is_full() || s.params != sp.params {
            return Err(Error::Dimension(format!("sinogram does not match specimen {:?}", sp.id)));
        }
        cfg.filter_spec(sp.params.n_chan).validate(sp.params.n_chan)?;
    }
    if fabric.n_ranks() != cfg.grid.total() {
        return Err(Error::Fabric(format!("fabric has {} ranks, grid needs {}", fabric.n_ranks(), cfg.grid.total())));
    }
    let block = partition_specimens(set, cfg.grid, cfg.group_size)?;
    let plan = match cfg.mapping {
        Mapping::Block => map_block(&block),
        Mapping::Cyclic => map_cyclic(&block),
    };
    let link_before = fabric.bytes_moved();
    let pfs_before = storage.counters(Tier::Pfs);
    let mut ctx = Ctx {
        set,
        sinos,
        cfg,
        fabric,
        storage,
        volumes: set.specimens().iter().map(|sp| PartialVolume::full_zeros(&sp.dims)).collect(),
        mask_pieces: vec![Vec::new(); set.len()],
        fused: FusedStats::default(),
    };
    let mut per_group = Vec::with_capacity(plan.groups.len());
    for (g, group) in plan.groups.iter().enumerate() {
        per_group.push(ctx.run_group(g, group)?);
    }

    let times: Vec<[f64; 4]> = per_group.iter().map(|s| s.times).collect();
    let slots = schedule(&times, cfg.overlap);
    let mut trace = StageTrace::default();
    for (g, (st, slot)) in per_group.iter().zip(&slots).enumerate() {
        for s in Stage::ALL {
            let i = s as usize;
            trace.records.push(StageRecord {
                group: g,
                stage: s,
                start: slot[i].0,
                end: slot[i].1,
                bytes: st.bytes[i],
                flops: if s == Stage::Comp { st.flops } else { 0.0 },
            });
        }
    }

    let Ctx { volumes, mask_pieces, fused, fabric, storage, .. } = ctx;
    let quantized = set
        .specimens()
        .iter()
        .zip(&volumes)
        .map(|(sp, v)| crate::fbp::quantize_volume(v, &sp.dims, &cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let masks = if cfg.fuse_ai {
        set.specimens()
            .iter()
            .zip(&mask_pieces)
            .map(|(sp, pieces)| assemble_mask(pieces, sp.dims.nx, sp.dims.ny, sp.dims.nz))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let pfs = storage.counters(Tier::Pfs);
    let report = RunReport {
        makespan: trace.makespan(),
        model_makespan: makespan_model(&times),
        serial_time: serial_total(&times),
        max_stage_total: max_stage_total(&times),
        flops: trace.flops(),
        sinogram_bytes: sinos.iter().map(|s| s.data().len() as u64 * 4).sum(),
        voxels: set.specimens().iter().map(|sp| sp.dims.len() as u64).sum(),
        pfs_bytes_read: pfs.bytes_read - pfs_before.bytes_read,
        pfs_bytes_written: pfs.bytes_written - pfs_before.bytes_written,
        staging_bytes: storage.counters(Tier::Staging).bytes_written,
        link_bytes: fabric.bytes_moved() - link_before,
        fused: cfg.fuse_ai.then_some(fused),
    };
    Ok(RunOutput { volumes, quantized, masks, trace, report })
}

impl Ctx<'_> {
    fn run_group(&mut self, g: usize, group: &Group) -> Result<GroupStages> {
        let mut st = GroupStages::default();
        let cfg = self.cfg;
        let specimens = self.set.specimens();
        let n_ranks = self.fabric.n_ranks();

        // slabs in order of first appearance
        let mut slabs: Vec<(usize, Range<usize>)> = Vec::new();
        for u in &group.units {
            if !slabs.iter().any(|(s, r)| *s == u.specimen && *r == u.row_slab) {
                slabs.push((u.specimen, u.row_slab.clone()));
            }
        }

        // memory guard
        let mut resident = vec![0u64; n_ranks];
        for (u, &r) in group.units.iter().zip(&group.ranks) {
            let p = &specimens[u.specimen].params;
            resident[r] += (u.row_slab.len() * u.slice_tile.area() * 4) as u64
                + (u.angle_chunk.len() * u.row_slab.len() * p.n_chan * 4) as u64;
        }
        if let Some(budget) = cfg.mem_budget {
            if let Some((rank, &needed)) = resident.iter().enumerate().find(|(_, &b)| b > budget) {
                return Err(Error::OutOfMemory { rank, needed, budget });
            }
        }

        // load
        let slab_bytes: Vec<u64> = slabs
            .iter()
            .map(|(s, rows)| {
                let p = &specimens[*s].params;
                (p.n_proj * rows.len() * p.n_chan * 4) as u64
            })
            .collect();
        let read = self.storage.concurrent(Tier::Pfs, false, &slab_bytes);
        let stage = self.storage.concurrent(Tier::Staging, true, &slab_bytes);
        st.times[0] = read.iter().cloned().fold(0.0, f64::max) + stage.iter().cloned().fold(0.0, f64::max);
        st.bytes[0] = slab_bytes.iter().sum();

        // compute: one broadcast per (slab, chunk) to the ranks holding its tiles
        let link0 = self.fabric.bytes_moved();
        let mut bcast: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
        for (u, &r) in group.units.iter().zip(&group.ranks) {
            let e = bcast.entry((u.specimen, u.row_slab.start, u.angle_chunk.start)).or_default();
            if !e.contains(&r) {
                e.push(r);
            }
        }
        let mut bcast_time = 0.0f64;
        let mut root_reads = Vec::new();
        for (&(s, r0, a0), ranks) in &bcast {
            let u = group
                .units
                .iter()
                .find(|u| u.specimen == s && u.row_slab.start == r0 && u.angle_chunk.start == a0)
                .unwrap();
            let p = &specimens[s].params;
            let bytes = (u.angle_chunk.len() * u.row_slab.len() * p.n_chan * 4) as u64;
            let root = *ranks.iter().min().unwrap();
            bcast_time = bcast_time.max(self.fabric.broadcast_model(root, bytes, ranks)?);
            root_reads.push(bytes);
        }
        let staging_read = self.storage.concurrent(Tier::Staging, false, &root_reads).into_iter().fold(0.0, f64::max);
        let mut rank_cost = vec![0.0f64; n_ranks];
        let mut partials: Vec<Option<PartialVolume>> = vec![None; group.units.len()];
        for i in self.fabric.execution_order(g as u64, group.units.len()) {
            let u = &group.units[i];
            let sp = &specimens[u.specimen];
            let mut block = self.sinos[u.specimen].extract(u.angle_chunk.clone(), u.row_slab.clone())?;
            if let Some(i0) = cfg.i0 {
                block = preprocess(&block, i0)?;
            }
            let filtered = filter_sinogram(&block, &cfg.filter_spec(sp.params.n_chan))?;
            partials[i] = Some(back_project(&filtered, &sp.dims, u.row_slab.clone(), u.angle_chunk.clone(), u.slice_tile)?);
            rank_cost[group.ranks[i]] += u.est_cost * FLOPS_PER_PAIR / cfg.flop_rate;
            st.flops += FLOPS_PER_PAIR * (u.angle_chunk.len() * u.slice_tile.area() * u.row_slab.len()) as f64;
        }
        st.times[1] = staging_read + bcast_time + rank_cost.iter().cloned().fold(0.0, f64::max);
        st.bytes[1] = self.fabric.bytes_moved() - link0;

        // reduce: one reduce-scatter per (slab, tile) over the ranks holding its chunks
        let link1 = self.fabric.bytes_moved();
        let mut reductions: BTreeMap<(usize, usize, Tile), Vec<usize>> = BTreeMap::new();
        for (i, u) in group.units.iter().enumerate() {
            reductions.entry((u.specimen, u.row_slab.start, u.slice_tile)).or_default().push(i);
        }
        let mut comm_time = 0.0f64;
        // (specimen, z range, tile, owner) of every reduced block
        let mut owned: Vec<(usize, Range<usize>, Tile, usize)> = Vec::new();
        for ((s, _, tile), members) in &reductions {
            let rows = group.units[members[0]].row_slab.clone();
            let mut ranks: Vec<usize> = members.iter().map(|&i| group.ranks[i]).collect();
            ranks.sort_unstable();
            ranks.dedup();
            let gsz = ranks.len();
            let per = slice_blocks(rows.len(), gsz);
            let area = tile.area();
            let padded = per * gsz * area;
            // local pre-sum of chunks that landed on the same rank, in chunk order
            let mut contrib: Vec<Vec<f32>> = vec![vec![0.0; padded]; gsz];
            let mut seeded = vec![false; gsz];
            let mut by_chunk: Vec<usize> = members.clone();
            by_chunk.sort_by_key(|&i| group.units[i].angle_chunk.start);
            for &i in &by_chunk {
                let k = ranks.binary_search(&group.ranks[i]).unwrap();
                let part = partials[i].take().unwrap();
                let dst = &mut contrib[k][..part.data.len()];
                if seeded[k] {
                    dst.iter_mut().zip(&part.data).for_each(|(a, b)| *a += b);
                } else {
                    dst.copy_from_slice(&part.data);
                    seeded[k] = true;
                }
            }
            let (blocks, t) = self.fabric.reduce_scatter_block(&contrib, &ranks)?;
            comm_time = comm_time.max(t);
            let mut whole = PartialVolume::zeros(rows.clone(), *tile);
            for (k, b) in blocks.iter().enumerate() {
                let z0 = rows.start + k * per;
                let z1 = (z0 + per).min(rows.end);
                if z0 >= z1 {
                    continue;
                }
                let n = (z1 - z0) * area;
                let off = (z0 - rows.start) * area;
                whole.data[off..off + n].copy_from_slice(&b[..n]);
                owned.push((*s, z0..z1, *tile, ranks[k]));
            }
            self.volumes[*s].insert(&whole)?;
        }
        st.times[2] = comm_time;
        st.bytes[2] = self.fabric.bytes_moved() - link1;

        // store
        let mut per_owner = vec![0u64; n_ranks];
        let mut fused_time = 0.0;
        if cfg.fuse_ai {
            let mut pieces = Vec::new();
            let mut dest = Vec::new();
            for (s, zs, tile, owner) in &owned {
                let v = &self.volumes[*s];
                for z in zs.clone() {
                    let mut data = Vec::with_capacity(tile.area());
                    for y in tile.y0..tile.y1 {
                        let i = v.index(tile.x0, y, z);
                        data.extend(v.data[i..i + tile.width()].iter().map(|&x| cfg.window.quantize(x as f64)));
                    }
                    pieces.push(SlicePiece { z, tile: *tile, owner: *owner, data });
                    dest.push(*s);
                }
            }
            let (masks, stats) = fused_infer(&pieces, &cfg.sap, &cfg.segmenter, self.fabric)?;
            fused_time = stats.time;
            accumulate(&mut self.fused, &stats);
            // each owner writes its labels as one packed run
            let mut labels_per_owner = vec![0u64; n_ranks];
            for (m, s) in masks.into_iter().zip(dest) {
                labels_per_owner[m.owner] += m.labels.len() as u64;
                self.mask_pieces[s].push(m);
            }
            for (o, n) in labels_per_owner.iter().enumerate() {
                per_owner[o] = n.div_ceil(4);
            }
        } else {
            for (_, zs, tile, owner) in &owned {
                per_owner[*owner] += (zs.len() * tile.area() * 2) as u64;
            }
        }
        let writes: Vec<u64> = per_owner.into_iter().filter(|&b| b > 0).collect();
        let wt = self.storage.concurrent(Tier::Pfs, true, &writes).into_iter().fold(0.0, f64::max);
        st.times[3] = fused_time + wt;
        st.bytes[3] = writes.iter().sum();
        Ok(st)
    }
}

fn accumulate(total: &mut FusedStats, s: &FusedStats) {
    total.patches += s.patches;
    total.step2_payload_bytes += s.step2_payload_bytes;
    total.step2_header_bytes += s.step2_header_bytes;
    total.step4_payload_bytes += s.step4_payload_bytes;
    total.raw_bytes += s.raw_bytes;
    total.time += s.time;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoAudit {
    pub pfs_bytes_read: u64,
    pub pfs_bytes_written: u64,
    /// Sinogram read, uint16 volume write and re-read, 32-bit mask write.
    pub staged_bytes: u64,
    /// Sinogram read and 2-bit mask write.
    pub fused_bytes: u64,
    pub savings_vs_staged: f64,
    /// Set when the ratio is undefined (no voxels).
    pub degenerate: bool,
}

/// Byte accounting of a fused run against the staged store-then-segment
/// baseline.
pub fn io_audit_bytes(sinogram_bytes: u64, voxels: u64, fuse_ai: bool) -> IoAudit {
    let staged = sinogram_bytes + 2 * voxels + 2 * voxels + 4 * voxels;
    let fused = sinogram_bytes + voxels.div_ceil(4);
    let degenerate = voxels == 0;
    let savings = if !fuse_ai || degenerate { 0.0 } else { 1.0 - fused as f64 / staged as f64 };
    IoAudit {
        pfs_bytes_read: sinogram_bytes,
        pfs_bytes_written: if fuse_ai { voxels.div_ceil(4) } else { 2 * voxels },
        staged_bytes: staged,
        fused_bytes: fused,
        savings_vs_staged: savings,
        degenerate,
    }
}

/// As [`io_audit_bytes`], with read/write totals taken from the run's
/// storage counters.
pub fn io_audit(report: &RunReport, fuse_ai: bool) -> IoAudit {
    IoAudit {
        pfs_bytes_read: report.pfs_bytes_read,
        pfs_bytes_written: report.pfs_bytes_written,
        ..io_audit_bytes(report.sinogram_bytes, report.voxels, fuse_ai)
    }
}

pub fn report_text(r: &RunReport, audit: Option<&IoAudit>) -> String {
    let mut s = format!(
        "makespan_s {:.6}\nmodel_makespan_s {:.6}\nserial_s {:.6}\nmax_stage_total_s {:.6}\nflops {:.0}\npfs_read_bytes {}\npfs_write_bytes {}\nlink_bytes {}\n",
        r.makespan, r.model_makespan, r.serial_time, r.max_stage_total, r.flops, r.pfs_bytes_read, r.pfs_bytes_written, r.link_bytes
    );
    if let Some(a) = audit {
        s.push_str(&format!(
            "staged_bytes {}\nfused_bytes {}\nio_savings {:.6}{}\n",
            a.staged_bytes,
            a.fused_bytes,
            a.savings_vs_staged,
            if a.degenerate { " (undefined: no voxels)" } else { "" }
        ));
    }
    if let Some(f) = &r.fused {
        s.push_str(&format!(
            "patches {}\nstep2_payload_bytes {}\nstep2_header_bytes {}\nraw_slice_bytes {}\n",
            f.patches, f.step2_payload_bytes, f.step2_header_bytes, f.raw_bytes
        ));
    }
    s
}
