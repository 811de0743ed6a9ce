//! Fused segmentation over the rank fabric, the 2-bit mask codec and the
//! downstream analytics (Dice, connected components, size bins).
//!
//! `fused_infer` follows five steps:
//! 1. each owner builds a tree per resident (slice, tile) piece and patchifies it;
//! 2. an all-to-all sends every piece's patches to rank `z mod ranks`;
//! 3. that rank runs the segmenter on whole-slice sequences;
//! 4. a reverse all-to-all returns the mask patches;
//! 5. owners depatch with the trees they kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::N_CLASSES;
use crate::ranksim::Fabric;
use crate::sap::{build_tree, canny, depatch, patchify_image, Payload, PatchSequence, PatchTree};
use crate::volume::{MaskVolume, Tile};

pub trait Segmenter: Sync {
    /// Maps an image sequence to a mask sequence over the same regions.
    fn segment(&self, seq: &PatchSequence) -> Result<PatchSequence>;
}

/// Per-pixel four-class thresholding: class = number of thresholds the
/// value reaches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSegmenter {
    pub t: [f32; 3],
}

impl ThresholdSegmenter {
    pub fn new(t1: f32, t2: f32, t3: f32) -> Result<Self> {
        if !(t1 < t2 && t2 < t3) {
            return Err(Error::Param(format!("thresholds must increase, got {t1}, {t2}, {t3}")));
        }
        Ok(Self { t: [t1, t2, t3] })
    }

    #[inline]
    pub fn classify(&self, v: f32) -> u8 {
        self.t.iter().filter(|&&t| v >= t).count() as u8
    }

    pub fn classify_all(&self, values: &[u16]) -> Vec<u8> {
        values.iter().map(|&v| self.classify(v as f32)).collect()
    }
}

impl Segmenter for ThresholdSegmenter {
    fn segment(&self, seq: &PatchSequence) -> Result<PatchSequence> {
        let Payload::Image(v) = &seq.payload else {
            return Err(Error::Param("segmenter needs an image sequence".into()));
        };
        Ok(PatchSequence {
            p: seq.p,
            dim: seq.dim,
            regions: seq.regions.clone(),
            payload: Payload::Mask(v.iter().map(|&x| self.classify(x)).collect()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SapParams {
    /// Leaf budget per piece.
    pub budget: usize,
    /// Patch resolution.
    pub p: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
}

impl Default for SapParams {
    fn default() -> Self {
        Self { budget: 256, p: 16, canny_low: 0.1, canny_high: 0.3, canny_sigma: 1.0 }
    }
}

impl SapParams {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 || self.p < 1 {
            return Err(Error::Param("leaf budget and patch size must be >= 1".into()));
        }
        if !(0.0 < self.canny_low && self.canny_low < self.canny_high && self.canny_high <= 1.0) {
            return Err(Error::Param("canny ratios must satisfy 0 < low < high <= 1".into()));
        }
        if !(self.canny_sigma >= 0.0) {
            return Err(Error::Param("canny sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One slice of one tile held by `owner`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePiece {
    pub z: usize,
    pub tile: Tile,
    pub owner: usize,
    pub data: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPiece {
    pub z: usize,
    pub tile: Tile,
    pub owner: usize,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FusedStats {
    pub patches: usize,
    /// Patch payload of step 2: patches x p^2 x 2 bytes.
    pub step2_payload_bytes: u64,
    /// Per-piece headers sent alongside the payload.
    pub step2_header_bytes: u64,
    pub step4_payload_bytes: u64,
    /// Raw u16 bytes of all pieces.
    pub raw_bytes: u64,
    pub time: f64,
}

const PIECE_HEADER: usize = 12;

/// Step 1 for one piece: tree on the Canny map, bilinear patches rounded to
/// `u16` levels (what goes on the wire).
pub fn local_patchify(piece: &SlicePiece, sap: &SapParams) -> Result<(PatchTree, PatchSequence)> {
    let (w, h) = (piece.tile.width(), piece.tile.height());
    if piece.data.len() != w * h {
        return Err(Error::Dimension("slice piece does not match its tile".into()));
    }
    let img: Vec<f64> = piece.data.iter().map(|&v| v as f64).collect();
    let edges = canny(&img, w, h, sap.canny_low, sap.canny_high, sap.canny_sigma)?;
    let tree = build_tree(&edges, sap.budget)?;
    let raw: Vec<f32> = piece.data.iter().map(|&v| v as f32).collect();
    let mut seq = patchify_image(&raw, &tree, sap.p)?;
    if let Payload::Image(v) = &mut seq.payload {
        v.iter_mut().for_each(|x| *x = x.round().clamp(0.0, 65535.0));
    }
    Ok((tree, seq))
}

/// Single-process patchify, segment, depatch of one piece.
pub fn local_infer(piece: &SlicePiece, sap: &SapParams, seg: &dyn Segmenter) -> Result<Vec<u8>> {
    let (tree, seq) = local_patchify(piece, sap)?;
    depatch(&seg.segment(&seq)?, &tree)
}

fn encode_image_patches(seq: &PatchSequence) -> Vec<u8> {
    let Payload::Image(v) = &seq.payload else { unreachable!() };
    v.iter().flat_map(|&x| (x as u16).to_le_bytes()).collect()
}

fn decode_image_patches(bytes: &[u8], template: &PatchSequence) -> PatchSequence {
    let v = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f32).collect();
    PatchSequence { p: template.p, dim: template.dim, regions: template.regions.clone(), payload: Payload::Image(v) }
}

/// Distributed patch-exchange inference. `pieces` may come in any order;
/// the result lists mask pieces in the same order.
pub fn fused_infer(pieces: &[SlicePiece], sap: &SapParams, seg: &dyn Segmenter, fabric: &mut Fabric) -> Result<(Vec<MaskPiece>, FusedStats)> {
    sap.validate()?;
    let n = fabric.n_ranks();
    if let Some(bad) = pieces.iter().find(|pc| pc.owner >= n) {
        return Err(Error::Fabric(format!("piece owner {} outside fabric of {n}", bad.owner)));
    }
    let group: Vec<usize> = (0..n).collect();
    let mut stats = FusedStats::default();

    // step 1
    let local: Vec<(PatchTree, PatchSequence)> = pieces.iter().map(|pc| local_patchify(pc, sap)).collect::<Result<_>>()?;
    stats.patches = local.iter().map(|(_, s)| s.len()).sum();
    stats.raw_bytes = pieces.iter().map(|pc| pc.data.len() as u64 * 2).sum();

    // step 2: owner -> z mod n, messages keyed by piece index
    let mut send = vec![vec![Vec::new(); n]; n];
    for (i, (pc, (_, seq))) in pieces.iter().zip(&local).enumerate() {
        let payload = encode_image_patches(seq);
        stats.step2_payload_bytes += payload.len() as u64;
        stats.step2_header_bytes += PIECE_HEADER as u64;
        let buf = &mut send[pc.owner][pc.z % n];
        buf.extend_from_slice(&(i as u64).to_le_bytes());
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&payload);
    }
    let (recv, t2) = fabric.all_to_all_v(&send, &group)?;

    // step 3
    let mut back = vec![vec![Vec::new(); n]; n];
    for (dest, row) in recv.iter().enumerate() {
        for (src, buf) in row.iter().enumerate() {
            let mut pos = 0;
            while pos < buf.len() {
                let i = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
                let len = u32::from_le_bytes(buf[pos + 8..pos + 12].try_into().unwrap()) as usize;
                pos += PIECE_HEADER;
                let seq = decode_image_patches(&buf[pos..pos + len], &local[i].1);
                pos += len;
                let Payload::Mask(labels) = seg.segment(&seq)?.payload else {
                    return Err(Error::Mask("segmenter returned an image".into()));
                };
                if labels.len() != seq.len() * seq.patch_len() {
                    return Err(Error::Mask("segmenter changed the sequence length".into()));
                }
                stats.step4_payload_bytes += labels.len() as u64;
                let out = &mut back[dest][src];
                out.extend_from_slice(&(i as u64).to_le_bytes());
                out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
                out.extend_from_slice(&labels);
            }
        }
    }

    // step 4
    let (returned, t4) = fabric.all_to_all_v(&back, &group)?;
    stats.time = t2 + t4;

    // step 5
    let mut masks: Vec<Option<MaskPiece>> = vec![None; pieces.len()];
    for row in &returned {
        for buf in row {
            let mut pos = 0;
            while pos < buf.len() {
                let i = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
                let len = u32::from_le_bytes(buf[pos + 8..pos + 12].try_into().unwrap()) as usize;
                pos += PIECE_HEADER;
                let (tree, seq) = &local[i];
                let mseq = PatchSequence {
                    p: seq.p,
                    dim: seq.dim,
                    regions: seq.regions.clone(),
                    payload: Payload::Mask(buf[pos..pos + len].to_vec()),
                };
                pos += len;
                let pc = &pieces[i];
                masks[i] = Some(MaskPiece { z: pc.z, tile: pc.tile, owner: pc.owner, labels: depatch(&mseq, tree)? });
            }
        }
    }
    let masks = masks
        .into_iter()
        .map(|m| m.ok_or_else(|| Error::Fabric("mask piece lost in exchange".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, stats))
}

/// Writes mask pieces into a full label volume.
pub fn assemble_mask(pieces: &[MaskPiece], nx: usize, ny: usize, nz: usize) -> Result<MaskVolume> {
    let mut m = MaskVolume::zeros(nx, ny, nz);
    for pc in pieces {
        let t = pc.tile;
        if t.x1 > nx || t.y1 > ny || pc.z >= nz || pc.labels.len() != t.area() {
            return Err(Error::Dimension("mask piece outside volume".into()));
        }
        for y in t.y0..t.y1 {
            let dst = m.index(t.x0, y, pc.z);
            let src = (y - t.y0) * t.width();
            m.labels[dst..dst + t.width()].copy_from_slice(&pc.labels[src..src + t.width()]);
        }
    }
    Ok(m)
}

/// Two bits per voxel, LSB-first within each byte, row-major voxel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitmapMask {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub payload: Vec<u8>,
}

impl BitmapMask {
    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

pub fn pack_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; labels.len().div_ceil(4)];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= N_CLASSES {
            return Err(Error::Mask(format!("label {l} at voxel {i} does not fit in 2 bits")));
        }
        out[i / 4] |= l << (2 * (i % 4));
    }
    Ok(out)
}

pub fn unpack_labels(payload: &[u8], n: usize) -> Result<Vec<u8>> {
    if payload.len() != n.div_ceil(4) {
        return Err(Error::Mask(format!("payload of {} bytes cannot hold {n} voxels", payload.len())));
    }
    Ok((0..n).map(|i| (payload[i / 4] >> (2 * (i % 4))) & 3).collect())
}

pub fn encode_bitmap(mask: &MaskVolume) -> Result<BitmapMask> {
    Ok(BitmapMask { nx: mask.nx, ny: mask.ny, nz: mask.nz, payload: pack_labels(&mask.labels)? })
}

pub fn decode_bitmap(b: &BitmapMask) -> Result<MaskVolume> {
    MaskVolume::new(b.nx, b.ny, b.nz, unpack_labels(&b.payload, b.n_voxels())?)
}

fn check_same(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("mask dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)` for class `c`; 1 when both are empty.
pub fn dice(pred: &MaskVolume, truth: &MaskVolume, c: u8) -> Result<f64> {
    check_same(pred, truth)?;
    let (mut p, mut t, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.labels.iter().zip(&truth.labels) {
        let (ia, ib) = (a == c, b == c);
        p += ia as u64;
        t += ib as u64;
        both += (ia && ib) as u64;
    }
    Ok(if p + t == 0 { 1.0 } else { 2.0 * both as f64 / (p + t) as f64 })
}

/// Per-class Dice and their mean over the classes present in `truth`.
pub fn dice_report(pred: &MaskVolume, truth: &MaskVolume) -> Result<([Option<f64>; N_CLASSES], f64)> {
    check_same(pred, truth)?;
    let mut present = [false; N_CLASSES];
    for &l in &truth.labels {
        if (l as usize) < N_CLASSES {
            present[l as usize] = true;
        }
    }
    let mut per = [None; N_CLASSES];
    let mut sum = 0.0;
    let mut k = 0;
    for c in 0..N_CLASSES {
        if present[c] {
            let d = dice(pred, truth, c as u8)?;
            per[c] = Some(d);
            sum += d;
            k += 1;
        }
    }
    Ok((per, if k == 0 { 1.0 } else { sum / k as f64 }))
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let up = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = up;
            a = up;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Face6,
    Full26,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Face6),
            26 => Ok(Self::Full26),
            _ => Err(Error::Param(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// Component id per voxel, `0` outside the class; ids start at 1 in
    /// order of each component's first voxel in raster order.
    pub labels: Vec<u32>,
    /// `sizes[id - 1]` voxels.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Component ids by decreasing size (ties: lower id first).
    pub fn ranking(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (1..=self.sizes.len() as u32).collect();
        ids.sort_by(|&a, &b| self.sizes[b as usize - 1].cmp(&self.sizes[a as usize - 1]).then(a.cmp(&b)));
        ids
    }

    /// Bin index of each component: the last edge not above its size.
    pub fn bins(&self, edges: &[usize]) -> Vec<usize> {
        self.sizes.iter().map(|&s| edges.iter().take_while(|&&e| e <= s).count().saturating_sub(1)).collect()
    }

    pub fn histogram(&self, edges: &[usize]) -> Vec<usize> {
        let mut h = vec![0; edges.len().max(1)];
        for b in self.bins(edges) {
            h[b] += 1;
        }
        h
    }

    pub fn to_csv(&self, edges: &[usize]) -> String {
        let mut s = String::from("component,size,bin\n");
        for (i, (size, bin)) in self.sizes.iter().zip(self.bins(edges)).enumerate() {
            s.push_str(&format!("{},{size},{bin}\n", i + 1));
        }
        s
    }
}

/// Powers of two `1, 2, 4, ...` up to `max_size`.
pub fn log_bins(max_size: usize) -> Vec<usize> {
    let mut e = vec![1];
    while *e.last().unwrap() * 2 <= max_size.max(1) {
        e.push(e.last().unwrap() * 2);
    }
    e
}

pub fn connected_components(mask: &MaskVolume, class: u8, conn: Connectivity) -> Result<Components> {
    if class as usize >= N_CLASSES {
        return Err(Error::Param(format!("class {class} out of range")));
    }
    let (nx, ny, nz) = mask.dims();
    let n = mask.len();
    let mut uf = UnionFind { parent: (0..n as u32).collect() };
    // half-neighbourhood: offsets that precede the voxel in raster order
    let mut offs: Vec<(isize, isize, isize)> = Vec::new();
    for dz in -1..=0isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                let face = dx.abs() + dy.abs() + dz.abs() == 1;
                if before && (conn == Connectivity::Full26 || face) {
                    offs.push((dx, dy, dz));
                }
            }
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if mask.labels[i] != class {
                    continue;
                }
                for &(dx, dy, dz) in &offs {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let j = mask.index(qx as usize, qy as usize, qz as usize);
                    if mask.labels[j] == class {
                        uf.union(i as u32, j as u32);
                    }
                }
            }
        }
    }
    let mut id_of_root = vec![0u32; n];
    let mut labels = vec![0u32; n];
    let mut sizes = Vec::new();
    for i in 0..n {
        if mask.labels[i] != class {
            continue;
        }
        let r = uf.find(i as u32) as usize;
        if id_of_root[r] == 0 {
            sizes.push(0);
            id_of_root[r] = sizes.len() as u32;
        }
        labels[i] = id_of_root[r];
        sizes[id_of_root[r] as usize - 1] += 1;
    }
    Ok(Components { labels, sizes })
}
