//! Symmetric adaptive patching.
//!
//! An edge map drives a quadtree (or octree) refinement: the leaf with the
//! largest score is split until the next split would exceed the leaf budget.
//! Leaves are linearized in Z-order and resampled to fixed `p`-sized
//! patches, identically for images and masks, so a mask sequence can be
//! painted back onto the slice from the tree alone.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::blur_2d;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Binary Canny edge map (values 0 or 1).
///
/// Thresholds are fractions of the maximum gradient magnitude, so the
/// result does not depend on the image's offset or positive scale.
pub fn canny(img: &[f64], width: usize, height: usize, low_ratio: f64, high_ratio: f64, sigma: f64) -> Result<EdgeMap> {
    if img.len() != width * height {
        return Err(Error::Dimension(format!("image has {} pixels, expected {width}x{height}", img.len())));
    }
    if !(0.0 < low_ratio && low_ratio < high_ratio && high_ratio <= 1.0) {
        return Err(Error::Param(format!("need 0 < low < high <= 1, got {low_ratio}, {high_ratio}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Param("sigma must be >= 0".into()));
    }
    let (w, h) = (width as isize, height as isize);
    let mut s = img.to_vec();
    blur_2d(&mut s, width, height, sigma);
    let px = |x: isize, y: isize| s[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];

    let n = width * height;
    let mut mag = vec![0.0; n];
    let mut dir = vec![0u8; n];
    for y in 0..h {
        for x in 0..w {
            let gx = px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x - 1, y)
                - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x, y - 1)
                - px(x + 1, y - 1);
            let i = (y * w + x) as usize;
            mag[i] = gx.hypot(gy);
            let mut a = gy.atan2(gx).to_degrees();
            if a < 0.0 {
                a += 180.0;
            }
            dir[i] = (((a + 22.5) / 45.0) as u8) % 4;
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut out = EdgeMap { width, height, data: vec![0.0; n] };
    if max == 0.0 {
        return Ok(out);
    }

    // Non-maximum suppression: strictly above the neighbour behind the
    // gradient, at least the one ahead, so plateaus keep one pixel.
    let at = |x: isize, y: isize| if x < 0 || y < 0 || x >= w || y >= h { 0.0 } else { mag[(y * w + x) as usize] };
    let mut class = vec![0u8; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            if !(m > at(x - dx, y - dy) && m >= at(x + dx, y + dy)) {
                continue;
            }
            let r = m / max;
            class[i] = if r >= high_ratio {
                2
            } else if r >= low_ratio {
                1
            } else {
                0
            };
        }
    }

    let mut queue: VecDeque<usize> = (0..n).filter(|&i| class[i] == 2).collect();
    for &i in &queue {
        out.data[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if class[j] > 0 && out.data[j] == 0.0 {
                    out.data[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

/// Morton code of a point; bit `k` of x lands at position `dim * k`, y
/// next, then z.
pub fn z_index(p: [usize; 3], dim: usize) -> u64 {
    let mut code = 0u64;
    for bit in 0..(64 / dim) {
        for (a, &c) in p.iter().take(dim).enumerate() {
            code |= (((c >> bit) & 1) as u64) << (bit * dim + a);
        }
    }
    code
}

/// Cube (or square) of side `side` at `origin`; unused axes have origin 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub origin: [usize; 3],
    pub side: usize,
}

impl Region {
    pub fn volume(&self, dim: usize) -> usize {
        self.side.pow(dim as u32)
    }

    fn child(&self, c: usize) -> Region {
        let half = self.side / 2;
        let mut origin = self.origin;
        for (a, o) in origin.iter_mut().enumerate() {
            if c >> a & 1 == 1 {
                *o += half;
            }
        }
        Region { origin, side: half }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitScore {
    /// Sum of field values (edge pixels) in the region.
    Sum,
    /// Variance of field values over the region's in-extent pixels.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub region: Region,
    pub score: f64,
    /// Empty for leaves, `2^dim` entries in Z-order otherwise.
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTree {
    pub dim: usize,
    /// Unpadded extent `[nx, ny, nz]` (`nz = 1` for quadtrees).
    pub extent: [usize; 3],
    /// Padded power-of-two side.
    pub side: usize,
    pub budget: usize,
    nodes: Vec<Node>,
    /// Node ids in the order they were split.
    splits: Vec<usize>,
    /// Leaf node ids in Z-order.
    leaves: Vec<usize>,
}

/// Prefix sums over a 3D field, for O(1) region statistics.
struct Integral {
    ext: [usize; 3],
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], ext: [usize; 3]) -> Self {
        let [nx, ny, nz] = ext;
        let (sx, sy) = (nx + 1, ny + 1);
        let len = sx * sy * (nz + 1);
        let (mut sum, mut sq) = (vec![0.0; len], vec![0.0; len]);
        let id = |x: usize, y: usize, z: usize| (z * sy + y) * sx + x;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = values[(z * ny + y) * nx + x];
                    for (arr, v) in [(&mut sum, v), (&mut sq, v * v)] {
                        arr[id(x + 1, y + 1, z + 1)] = v + arr[id(x, y + 1, z + 1)] + arr[id(x + 1, y, z + 1)]
                            + arr[id(x + 1, y + 1, z)]
                            - arr[id(x, y, z + 1)]
                            - arr[id(x, y + 1, z)]
                            - arr[id(x + 1, y, z)]
                            + arr[id(x, y, z)];
                    }
                }
            }
        }
        Self { ext, sum, sq }
    }

    /// (count, sum, sum of squares) over the region clipped to the extent.
    fn stats(&self, r: &Region, dim: usize) -> (f64, f64, f64) {
        let mut lo = [0usize; 3];
        let mut hi = [1usize; 3];
        for a in 0..3 {
            if a < dim {
                lo[a] = r.origin[a].min(self.ext[a]);
                hi[a] = (r.origin[a] + r.side).min(self.ext[a]);
            } else {
                hi[a] = self.ext[a];
            }
        }
        let count = (0..3).map(|a| hi[a] - lo[a]).product::<usize>() as f64;
        if count == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let (sx, sy) = (self.ext[0] + 1, self.ext[1] + 1);
        let box_sum = |arr: &[f64]| {
            let mut s = 0.0;
            for c in 0..8usize {
                let x = if c & 1 == 1 { hi[0] } else { lo[0] };
                let y = if c & 2 == 2 { hi[1] } else { lo[1] };
                let z = if c & 4 == 4 { hi[2] } else { lo[2] };
                let sign = if (c.count_ones() % 2) == 1 { -1.0 } else { 1.0 };
                s += sign * arr[(z * sy + y) * sx + x];
            }
            -s
        };
        (count, box_sum(&self.sum), box_sum(&self.sq))
    }

    fn score(&self, r: &Region, dim: usize, kind: SplitScore) -> f64 {
        let (n, s, q) = self.stats(r, dim);
        match kind {
            SplitScore::Sum => s,
            SplitScore::Variance => {
                if n == 0.0 {
                    0.0
                } else {
                    (q / n - (s / n) * (s / n)).max(0.0)
                }
            }
        }
    }
}

struct Candidate {
    score: f64,
    side: usize,
    z: u64,
    node: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Candidate {
    // Highest score; ties go to the larger leaf, then the lowest Z-index.
    fn cmp(&self, o: &Self) -> Ordering {
        self.score
            .total_cmp(&o.score)
            .then(self.side.cmp(&o.side))
            .then(o.z.cmp(&self.z))
    }
}

/// Quadtree over a 2D edge map.
pub fn build_tree(e: &EdgeMap, budget: usize) -> Result<PatchTree> {
    build_tree_nd(&e.data, [e.width, e.height, 1], 2, budget, SplitScore::Sum)
}

/// Quadtree (`dim = 2`) or octree (`dim = 3`) over a scalar field stored
/// z-major, then y, then x.
pub fn build_tree_nd(values: &[f64], extent: [usize; 3], dim: usize, budget: usize, score: SplitScore) -> Result<PatchTree> {
    if dim != 2 && dim != 3 {
        return Err(Error::Tree(format!("dimension must be 2 or 3, got {dim}")));
    }
    if budget < 1 {
        return Err(Error::Tree("leaf budget must be >= 1".into()));
    }
    if dim == 2 && extent[2] != 1 {
        return Err(Error::Tree("2D tree needs nz = 1".into()));
    }
    if extent.iter().any(|&e| e == 0) || values.len() != extent.iter().product::<usize>() {
        return Err(Error::Dimension(format!("field of {} values does not match extent {extent:?}", values.len())));
    }
    let side = extent[..dim].iter().cloned().max().unwrap().next_power_of_two();
    let integral = Integral::new(values, extent);
    let fanout = 1usize << dim;
    let root = Region { origin: [0; 3], side };
    let mut nodes = vec![Node { region: root, score: integral.score(&root, dim, score), children: Vec::new() }];
    let mut heap = BinaryHeap::new();
    if side >= 2 {
        heap.push(Candidate { score: nodes[0].score, side, z: 0, node: 0 });
    }
    let mut splits = Vec::new();
    let mut n_leaves = 1;
    while n_leaves + fanout - 1 <= budget {
        let Some(c) = heap.pop() else { break };
        let parent = nodes[c.node].region;
        for k in 0..fanout {
            let r = parent.child(k);
            let id = nodes.len();
            let s = integral.score(&r, dim, score);
            nodes.push(Node { region: r, score: s, children: Vec::new() });
            nodes[c.node].children.push(id);
            if r.side >= 2 {
                heap.push(Candidate { score: s, side: r.side, z: z_index(r.origin, dim), node: id });
            }
        }
        splits.push(c.node);
        n_leaves += fanout - 1;
    }
    Ok(PatchTree::assemble(dim, extent, side, budget, nodes, splits))
}

impl PatchTree {
    fn assemble(dim: usize, extent: [usize; 3], side: usize, budget: usize, nodes: Vec<Node>, splits: Vec<usize>) -> Self {
        let mut leaves: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].children.is_empty()).collect();
        leaves.sort_by_key(|&i| z_index(nodes[i].region.origin, dim));
        Self { dim, extent, side, budget, nodes, splits, leaves }
    }

    pub fn fanout(&self) -> usize {
        1 << self.dim
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn splits(&self) -> &[usize] {
        &self.splits
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaves
    }

    /// Leaf regions in Z-order.
    pub fn leaf_regions(&self) -> Vec<Region> {
        self.leaves.iter().map(|&i| self.nodes[i].region).collect()
    }

    /// Preorder encoding: header, then per node a split flag and its score.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + self.nodes.len() * 9);
        b.push(self.dim as u8);
        for v in [self.extent[0], self.extent[1], self.extent[2], self.side, self.budget] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            b.push(!n.children.is_empty() as u8);
            b.extend_from_slice(&n.score.to_le_bytes());
            stack.extend(n.children.iter().rev());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Tree(format!("tree decode: {m}"));
        if bytes.len() < 21 {
            return Err(bad("truncated header"));
        }
        let dim = bytes[0] as usize;
        if dim != 2 && dim != 3 {
            return Err(bad("bad dimension"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[1 + 4 * k..5 + 4 * k].try_into().unwrap()) as usize;
        let extent = [word(0), word(1), word(2)];
        let (side, budget) = (word(3), word(4));
        if !side.is_power_of_two() || extent[..dim].iter().any(|&e| e > side || e == 0) {
            return Err(bad("inconsistent extent"));
        }
        let mut pos = 21;
        let mut nodes: Vec<Node> = Vec::new();
        let mut splits = Vec::new();
        // (region, parent) pending in preorder
        let mut stack = vec![(Region { origin: [0; 3], side }, usize::MAX)];
        while let Some((region, parent)) = stack.pop() {
            if pos + 9 > bytes.len() {
                return Err(bad("truncated node list"));
            }
            let split = match bytes[pos] {
                0 => false,
                1 => true,
                _ => return Err(bad("bad split flag")),
            };
            let score = f64::from_le_bytes(bytes[pos + 1..pos + 9].try_into().unwrap());
            pos += 9;
            let id = nodes.len();
            nodes.push(Node { region, score, children: Vec::new() });
            if parent != usize::MAX {
                nodes[parent].children.push(id);
            }
            if split {
                if region.side < 2 {
                    return Err(bad("split of a unit region"));
                }
                splits.push(id);
                for k in (0..1usize << dim).rev() {
                    stack.push((region.child(k), id));
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self::assemble(dim, extent, side, budget, nodes, splits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Image(Vec<f32>),
    Mask(Vec<u8>),
}

/// Fixed-size patches, one per tree leaf, in Z-order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSequence {
    pub p: usize,
    pub dim: usize,
    pub regions: Vec<Region>,
    pub payload: Payload,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    pub fn image_patch(&self, i: usize) -> Option<&[f32]> {
        let n = self.patch_len();
        match &self.payload {
            Payload::Image(v) => Some(&v[i * n..(i + 1) * n]),
            Payload::Mask(_) => None,
        }
    }

    pub fn mask_patch(&self, i: usize) -> Option<&[u8]> {
        let n = self.patch_len();
        match &self.payload {
            Payload::Mask(v) => Some(&v[i * n..(i + 1) * n]),
            Payload::Image(_) => None,
        }
    }
}

fn check_field(len: usize, tree: &PatchTree, p: usize) -> Result<()> {
    if p < 1 {
        return Err(Error::Param("patch resolution must be >= 1".into()));
    }
    if len != tree.extent.iter().product::<usize>() {
        return Err(Error::Dimension(format!("field of {len} values does not match tree extent {:?}", tree.extent)));
    }
    Ok(())
}

/// Patch-local coordinates `0..p` for each axis, in row-major order over
/// the first `dim` axes (x fastest).
fn patch_coords(p: usize, dim: usize) -> impl Iterator<Item = [usize; 3]> {
    let n = p.pow(dim as u32);
    (0..n).map(move |i| {
        let mut c = [0; 3];
        let mut r = i;
        for a in c.iter_mut().take(dim) {
            *a = r % p;
            r /= p;
        }
        c
    })
}

/// Bilinear (trilinear in 3D) resampling of each leaf to `p` samples per
/// axis. Sample `i` reads source position `(i + 0.5) * side / p - 0.5`,
/// clamped to the leaf; positions beyond the extent read the nearest edge
/// pixel.
pub fn patchify_image(img: &[f32], tree: &PatchTree, p: usize) -> Result<PatchSequence> {
    check_field(img.len(), tree, p)?;
    let dim = tree.dim;
    let [nx, ny, _] = tree.extent;
    let read = |c: [usize; 3]| {
        let c = clamp_to(c, tree.extent);
        img[(c[2] * ny + c[1]) * nx + c[0]]
    };
    let regions = tree.leaf_regions();
    let mut out = Vec::with_capacity(regions.len() * p.pow(dim as u32));
    for r in &regions {
        let scale = r.side as f64 / p as f64;
        let taps: Vec<(usize, usize, f64)> = (0..p)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (r.side - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(r.side - 1);
                (lo, hi, s - lo as f64)
            })
            .collect();
        for c in patch_coords(p, dim) {
            let mut acc = 0.0f64;
            for corner in 0..(1usize << dim) {
                let mut w = 1.0;
                let mut src = [0usize; 3];
                for a in 0..dim {
                    let (lo, hi, f) = taps[c[a]];
                    let up = corner >> a & 1 == 1;
                    w *= if up { f } else { 1.0 - f };
                    src[a] = r.origin[a] + if up { hi } else { lo };
                }
                if w != 0.0 {
                    acc += w * read(src) as f64;
                }
            }
            out.push(acc as f32);
        }
    }
    Ok(PatchSequence { p, dim, regions, payload: Payload::Image(out) })
}

fn clamp_to(c: [usize; 3], extent: [usize; 3]) -> [usize; 3] {
    [c[0].min(extent[0] - 1), c[1].min(extent[1] - 1), c[2].min(extent[2] - 1)]
}

/// Nearest-neighbour resampling of label leaves. Positions beyond the
/// extent read the nearest edge voxel, so a leaf that is uniform inside the
/// extent yields a uniform patch.
pub fn patchify_mask(mask: &[u8], tree: &PatchTree, p: usize) -> Result<PatchSequence> {
    check_field(mask.len(), tree, p)?;
    let dim = tree.dim;
    let [nx, ny, _] = tree.extent;
    let regions = tree.leaf_regions();
    let mut out = Vec::with_capacity(regions.len() * p.pow(dim as u32));
    for r in &regions {
        let near: Vec<usize> = (0..p).map(|i| ((2 * i + 1) * r.side) / (2 * p)).collect();
        for c in patch_coords(p, dim) {
            let mut src = [0usize; 3];
            for a in 0..dim {
                src[a] = r.origin[a] + near[c[a]];
            }
            let src = clamp_to(src, tree.extent);
            out.push(mask[(src[2] * ny + src[1]) * nx + src[0]]);
        }
    }
    Ok(PatchSequence { p, dim, regions, payload: Payload::Mask(out) })
}

/// Paints each mask patch back onto its leaf by nearest-neighbour
/// upscaling and crops the padding.
pub fn depatch(seq: &PatchSequence, tree: &PatchTree) -> Result<Vec<u8>> {
    let Payload::Mask(data) = &seq.payload else {
        return Err(Error::Tree("depatch needs a mask sequence".into()));
    };
    if seq.dim != tree.dim {
        return Err(Error::Tree("sequence and tree dimensions differ".into()));
    }
    let regions = tree.leaf_regions();
    if seq.regions != regions {
        return Err(Error::Tree(format!(
            "sequence of {} patches does not match tree of {} leaves",
            seq.len(),
            regions.len()
        )));
    }
    let (p, dim) = (seq.p, seq.dim);
    if data.len() != regions.len() * seq.patch_len() {
        return Err(Error::Tree("mask payload length mismatch".into()));
    }
    let [nx, ny, nz] = tree.extent;
    let mut out = vec![0u8; nx * ny * nz];
    let plen = seq.patch_len();
    for (k, r) in regions.iter().enumerate() {
        let patch = &data[k * plen..(k + 1) * plen];
        let hi: Vec<usize> = (0..3).map(|a| if a < dim { (r.origin[a] + r.side).min(tree.extent[a]) } else { 1 }).collect();
        let map = |a: usize, v: usize| ((2 * (v - r.origin[a]) + 1) * p) / (2 * r.side);
        for z in r.origin[2]..hi[2] {
            let pz = if dim == 3 { map(2, z) } else { 0 };
            for y in r.origin[1]..hi[1] {
                let py = map(1, y);
                for x in r.origin[0]..hi[0] {
                    let px = map(0, x);
                    out[(z * ny + y) * nx + x] = patch[(pz * p + py) * p + px];
                }
            }
        }
    }
    Ok(out)
}
