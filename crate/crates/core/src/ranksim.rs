//! In-process rank fabric: collectives with analytic cost models and a
//! bandwidth-shared storage tier. Everything is deterministic; modeled times
//! are returned alongside the data and logged to a trace.
//!
//! Cost models (placeholders, not measurements):
//! - broadcast: binomial tree, `lat * ceil(log2 g) + bytes / bw`
//! - reduce-scatter-block: ring, `(g-1)/g * bytes / bw + (g-1) * lat`
//! - all-to-all-v: `max_rank (in + out bytes) / bw + (g-1) * lat`
//! - storage: `bytes / bw`, with concurrent streams sharing bandwidth equally

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op: String,
    pub ranks: usize,
    pub bytes: u64,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    n_ranks: usize,
    link_bandwidth: f64,
    link_latency: f64,
    seed: u64,
    bytes_moved: u64,
    time: f64,
    trace: Vec<TraceEvent>,
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

impl Fabric {
    pub fn new(n_ranks: usize, link_bandwidth: f64, link_latency: f64, seed: u64) -> Result<Self> {
        if n_ranks == 0 {
            return Err(Error::Fabric("fabric needs at least one rank".into()));
        }
        if !(link_bandwidth > 0.0) || !(link_latency >= 0.0) {
            return Err(Error::Fabric("bandwidth must be > 0 and latency >= 0".into()));
        }
        Ok(Self { n_ranks, link_bandwidth, link_latency, seed, bytes_moved: 0, time: 0.0, trace: Vec::new() })
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn bandwidth(&self) -> f64 {
        self.link_bandwidth
    }

    pub fn latency(&self) -> f64 {
        self.link_latency
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bytes that crossed a link, summed over all collectives so far.
    pub fn bytes_moved(&self) -> u64 {
        self.bytes_moved
    }

    /// Sum of modeled collective times so far.
    pub fn total_time(&self) -> f64 {
        self.time
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("op,ranks,bytes,time\n");
        for e in &self.trace {
            s.push_str(&format!("{},{},{},{:.9}\n", e.op, e.ranks, e.bytes, e.time));
        }
        s
    }

    fn check_group(&self, group: &[usize]) -> Result<()> {
        if group.is_empty() {
            return Err(Error::Fabric("empty group".into()));
        }
        let mut seen = vec![false; self.n_ranks];
        for &r in group {
            if r >= self.n_ranks {
                return Err(Error::Fabric(format!("rank {r} outside fabric of {}", self.n_ranks)));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::Fabric(format!("rank {r} listed twice in group")));
            }
        }
        Ok(())
    }

    fn record(&mut self, op: &str, ranks: usize, bytes: u64, time: f64) {
        self.bytes_moved += bytes;
        self.time += time;
        self.trace.push(TraceEvent { op: op.into(), ranks, bytes, time });
    }

    pub fn broadcast_time(&self, bytes: u64, group_len: usize) -> f64 {
        if group_len <= 1 {
            return 0.0;
        }
        self.link_latency * ceil_log2(group_len) as f64 + bytes as f64 / self.link_bandwidth
    }

    pub fn reduce_scatter_time(&self, bytes: u64, group_len: usize) -> f64 {
        let g = group_len as f64;
        (g - 1.0) / g * bytes as f64 / self.link_bandwidth + (g - 1.0) * self.link_latency
    }

    /// Delivers `payload` from `root` to every member of `group`; element
    /// `i` of the result is what `group[i]` holds afterwards.
    pub fn broadcast(&mut self, root: usize, payload: &[u8], group: &[usize]) -> Result<(Vec<Vec<u8>>, f64)> {
        self.check_group(group)?;
        if !group.contains(&root) {
            return Err(Error::Fabric(format!("broadcast root {root} not in group")));
        }
        let bytes = payload.len() as u64;
        let time = self.broadcast_time(bytes, group.len());
        self.record("broadcast", group.len(), bytes * (group.len() as u64 - 1), time);
        Ok((vec![payload.to_vec(); group.len()], time))
    }

    /// Cost-only broadcast for payloads already shared in memory: charges
    /// the same time and link bytes as [`Fabric::broadcast`].
    pub fn broadcast_model(&mut self, root: usize, bytes: u64, group: &[usize]) -> Result<f64> {
        self.check_group(group)?;
        if !group.contains(&root) {
            return Err(Error::Fabric(format!("broadcast root {root} not in group")));
        }
        let time = self.broadcast_time(bytes, group.len());
        self.record("broadcast", group.len(), bytes * (group.len() as u64 - 1), time);
        Ok(time)
    }

    /// Element-wise sum of `contributions` (one per group member, same
    /// order as `group`), split into `|group|` equal blocks; member `i`
    /// receives block `i`. Terms are added in ascending rank id.
    pub fn reduce_scatter_block(&mut self, contributions: &[Vec<f32>], group: &[usize]) -> Result<(Vec<Vec<f32>>, f64)> {
        self.check_group(group)?;
        if contributions.len() != group.len() {
            return Err(Error::Fabric(format!(
                "{} contributions for a group of {}",
                contributions.len(),
                group.len()
            )));
        }
        let len = contributions[0].len();
        if contributions.iter().any(|c| c.len() != len) {
            return Err(Error::Fabric("reduce-scatter contributions differ in length".into()));
        }
        if len % group.len() != 0 {
            return Err(Error::Fabric(format!("length {len} not divisible by group size {}", group.len())));
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by_key(|&i| group[i]);
        let block = len / group.len();
        let mut out = Vec::with_capacity(group.len());
        for b in 0..group.len() {
            let range = b * block..(b + 1) * block;
            let mut acc = contributions[order[0]][range.clone()].to_vec();
            for &i in &order[1..] {
                acc.iter_mut().zip(&contributions[i][range.clone()]).for_each(|(a, v)| *a += v);
            }
            out.push(acc);
        }
        let bytes = (len * 4) as u64;
        let time = self.reduce_scatter_time(bytes, group.len());
        let g = group.len() as u64;
        self.record("reduce_scatter_block", group.len(), bytes * (g - 1), time);
        Ok((out, time))
    }

    /// `send[i][j]` goes from member `i` to member `j`; returns
    /// `recv[j][i] == send[i][j]`. Self-sends are local copies and do not
    /// count towards link bytes.
    pub fn all_to_all_v(&mut self, send: &[Vec<Vec<u8>>], group: &[usize]) -> Result<(Vec<Vec<Vec<u8>>>, f64)> {
        self.check_group(group)?;
        let g = group.len();
        if send.len() != g || send.iter().any(|row| row.len() != g) {
            return Err(Error::Fabric(format!("all-to-all send matrix must be {g}x{g}")));
        }
        let mut recv: Vec<Vec<Vec<u8>>> = vec![Vec::with_capacity(g); g];
        for j in 0..g {
            for row in send {
                recv[j].push(row[j].clone());
            }
        }
        let mut busiest = 0u64;
        let mut total = 0u64;
        for i in 0..g {
            let out: u64 = (0..g).filter(|&j| j != i).map(|j| send[i][j].len() as u64).sum();
            let inb: u64 = (0..g).filter(|&j| j != i).map(|j| send[j][i].len() as u64).sum();
            busiest = busiest.max(out + inb);
            total += out;
        }
        let time = busiest as f64 / self.link_bandwidth + (g as f64 - 1.0) * self.link_latency;
        self.record("all_to_all_v", g, total, time);
        Ok((recv, time))
    }

    /// Seed-determined permutation of `0..n` for epoch `epoch`; used to run
    /// per-rank work in an arbitrary but reproducible order.
    pub fn execution_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    Pfs,
    Staging,
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pfs" => Ok(Tier::Pfs),
            "staging" | "llio" => Ok(Tier::Staging),
            _ => Err(Error::Param(format!("unknown storage tier {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierCounters {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub read_time: f64,
    pub write_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageModel {
    pub pfs_read_bw: f64,
    pub pfs_write_bw: f64,
    pub staging_bw: f64,
    pfs: TierCounters,
    staging: TierCounters,
}

impl StorageModel {
    pub fn new(pfs_read_bw: f64, pfs_write_bw: f64, staging_bw: f64) -> Result<Self> {
        if !(pfs_read_bw > 0.0 && pfs_write_bw > 0.0 && staging_bw > 0.0) {
            return Err(Error::Param("storage bandwidths must be > 0".into()));
        }
        Ok(Self { pfs_read_bw, pfs_write_bw, staging_bw, pfs: TierCounters::default(), staging: TierCounters::default() })
    }

    pub fn counters(&self, tier: Tier) -> TierCounters {
        match tier {
            Tier::Pfs => self.pfs,
            Tier::Staging => self.staging,
        }
    }

    fn bandwidth(&self, tier: Tier, write: bool) -> f64 {
        match (tier, write) {
            (Tier::Pfs, false) => self.pfs_read_bw,
            (Tier::Pfs, true) => self.pfs_write_bw,
            (Tier::Staging, _) => self.staging_bw,
        }
    }

    fn account(&mut self, tier: Tier, write: bool, bytes: u64, time: f64) {
        let c = match tier {
            Tier::Pfs => &mut self.pfs,
            Tier::Staging => &mut self.staging,
        };
        if write {
            c.bytes_written += bytes;
            c.write_time += time;
        } else {
            c.bytes_read += bytes;
            c.read_time += time;
        }
    }

    pub fn read(&mut self, tier: Tier, bytes: u64) -> f64 {
        self.concurrent(tier, false, &[bytes])[0]
    }

    pub fn write(&mut self, tier: Tier, bytes: u64) -> f64 {
        self.concurrent(tier, true, &[bytes])[0]
    }

    /// Completion times of streams that start together on one tier and
    /// share its bandwidth equally among those still active.
    pub fn concurrent(&mut self, tier: Tier, write: bool, streams: &[u64]) -> Vec<f64> {
        let bw = self.bandwidth(tier, write);
        let times = processor_sharing(streams, bw);
        for (&b, &t) in streams.iter().zip(&times) {
            self.account(tier, write, b, t);
        }
        times
    }
}

/// Completion times under equal bandwidth sharing.
pub fn processor_sharing(streams: &[u64], bw: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by_key(|&i| (streams[i], i));
    let mut out = vec![0.0; streams.len()];
    let (mut now, mut done) = (0.0, 0.0f64);
    let mut active = streams.len();
    for i in order {
        let b = streams[i] as f64;
        now += (b - done) * active as f64 / bw;
        done = b;
        out[i] = now;
        active -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

    fn fabric(n: usize) -> Fabric {
        Fabric::new(n, GIB, 1e-6, 7).unwrap()
    }

    #[test]
    fn broadcast_single_rank_is_free() {
        let mut f = fabric(4);
        let (got, t) = f.broadcast(2, b"abc", &[2]).unwrap();
        assert_eq!(got, vec![b"abc".to_vec()]);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn broadcast_time_model() {
        let mut f = fabric(8);
        let payload = vec![7u8; 1 << 20];
        let group: Vec<usize> = (0..8).collect();
        let (got, t) = f.broadcast(3, &payload, &group).unwrap();
        assert!(got.iter().all(|p| *p == payload));
        let expect = 3e-6 + 1.0 / 1024.0;
        assert!((t - expect).abs() < 1e-12, "{t}");
        assert!((t - 0.000_979_5).abs() < 1e-6);
        assert!(f.broadcast(9, &payload, &group).is_err());
        assert!(f.broadcast(1, &payload, &[0, 2]).is_err());
    }

    #[test]
    fn reduce_scatter_examples() {
        let mut f = fabric(2);
        let (out, _) = f.reduce_scatter_block(&[vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]], &[0, 1]).unwrap();
        assert_eq!(out, vec![vec![11.0, 22.0], vec![33.0, 44.0]]);
        let (one, t) = f.reduce_scatter_block(&[vec![5.0, 6.0]], &[1]).unwrap();
        assert_eq!(one, vec![vec![5.0, 6.0]]);
        assert_eq!(t, 0.0);
        assert!(f.reduce_scatter_block(&[vec![1.0; 3], vec![1.0; 3]], &[0, 1]).is_err());
        assert!(f.reduce_scatter_block(&[vec![1.0; 4], vec![1.0; 2]], &[0, 1]).is_err());
    }

    #[test]
    fn reduce_scatter_matches_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = fabric(6);
        for g in 1..=6usize {
            let group: Vec<usize> = (0..6).rev().take(g).collect();
            let len = g * rng.random_range(1..20);
            let c: Vec<Vec<f32>> = (0..g).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            // gather to one place, sum in ascending rank order, scatter
            let mut by_rank: Vec<(usize, &Vec<f32>)> = group.iter().cloned().zip(&c).collect();
            by_rank.sort_by_key(|p| p.0);
            let mut total = by_rank[0].1.clone();
            for (_, v) in &by_rank[1..] {
                total.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
            }
            let (out, _) = f.reduce_scatter_block(&c, &group).unwrap();
            let block = len / g;
            for i in 0..g {
                assert_eq!(out[i], total[i * block..(i + 1) * block]);
            }
        }
    }

    #[test]
    fn all_to_all_transposes() {
        let mut f = fabric(4);
        let group = [0, 1, 2, 3];
        let send: Vec<Vec<Vec<u8>>> = (0..4).map(|i| (0..4).map(|_| vec![i as u8; i]).collect()).collect();
        let (recv, _) = f.all_to_all_v(&send, &group).unwrap();
        for j in 0..4 {
            assert_eq!(recv[j].iter().map(|b| b.len()).sum::<usize>(), 6);
            for i in 0..4 {
                assert_eq!(recv[j][i], send[i][j]);
            }
        }
        let empty = vec![vec![Vec::new(); 4]; 4];
        let (recv, t) = f.all_to_all_v(&empty, &group).unwrap();
        assert!(recv.iter().flatten().all(|b| b.is_empty()));
        assert!((t - 3e-6).abs() < 1e-15);
    }

    #[test]
    fn storage_examples() {
        let mut s = StorageModel::new(2.0 * GIB, GIB, 4.0 * GIB).unwrap();
        assert_eq!(s.read(Tier::Pfs, 0), 0.0);
        assert_eq!(s.read(Tier::Pfs, 8 * (1 << 30)), 4.0);
        let mut s1 = StorageModel::new(GIB, GIB, GIB).unwrap();
        let t = s1.concurrent(Tier::Pfs, false, &[1 << 30, 1 << 30]);
        assert_eq!(t, vec![2.0, 2.0]);
        assert_eq!(s1.counters(Tier::Pfs).bytes_read, 2 << 30);
        assert_eq!(s1.counters(Tier::Staging), TierCounters::default());
        assert!("tape".parse::<Tier>().is_err());
    }

    #[test]
    fn processor_sharing_uneven() {
        // 1 and 3 bytes at 1 B/s: both at 0.5 B/s until t=2, then 2 more bytes alone
        assert_eq!(processor_sharing(&[3, 1], 1.0), vec![4.0, 2.0]);
    }

    #[test]
    fn execution_order_is_seeded_permutation() {
        let f = fabric(3);
        let a = f.execution_order(5, 10);
        assert_eq!(a, f.execution_order(5, 10));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }
}
