//! Property tests for the cross-module invariants.

use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tomofuse::fbp::{back_project, filter_sinogram, redundancy_weight, reconstruct, FilterKind, FilterSpec, HuWindow};
use tomofuse::formats::{decode_mask, decode_sinogram, decode_volume, encode_mask, encode_sinogram, encode_volume};
use tomofuse::geometry::{ray_coordinate, AcquisitionParams, Specimen, SpecimenSet, VolumeDims};
use tomofuse::partition::{
    imbalance, map_block, map_cyclic, partition_specimens, workload_model, Group, GroupPlan, Mapping, RankGrid,
    WorkUnit,
};
use tomofuse::phantom::{degrade, generate_microstructure, project_volume, DegradationSpec};
use tomofuse::pipeline::{max_stage_total, run, serial_total, PipelineConfig, Stage};
use tomofuse::ranksim::{Fabric, StorageModel, Tier};
use tomofuse::sap::{build_tree_nd, SplitScore};
use tomofuse::segfuse::{
    connected_components, decode_bitmap, dice, encode_bitmap, fused_infer, local_infer, BitmapMask, Connectivity,
    SapParams, SlicePiece, ThresholdSegmenter,
};
use tomofuse::volume::{MaskVolume, PartialVolume, Sinogram, Tile};

fn random_volume(dims: &VolumeDims, seed: u64) -> PartialVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = PartialVolume::full_zeros(dims);
    v.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    v
}

fn random_sinogram(p: AcquisitionParams, seed: u64) -> Sinogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sinogram::new(p, (0..p.n_samples()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(nx: usize, ny: usize, nz: usize, seed: u64) -> MaskVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskVolume::new(nx, ny, nz, (0..nx * ny * nz).map(|_| rng.random_range(0..4)).collect()).unwrap()
}

fn acquisition() -> impl Strategy<Value = AcquisitionParams> {
    (2usize..24, 1usize..4, 8usize..24, any::<bool>(), 1i32..4).prop_map(|(proj, rows, chan, offset, o)| {
        if offset {
            AcquisitionParams::offset(2 * proj, rows, chan, 1.0, if proj % 2 == 0 { o } else { -o }).unwrap()
        } else {
            AcquisitionParams::normal(proj, rows, chan, 1.0).unwrap()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conjugate_rays_mirror_about_detector_center(
        x in 0.0f64..40.0, y in 0.0f64..40.0, theta in 0.0f64..(2.0 * PI), chan in 8usize..64,
    ) {
        let p = AcquisitionParams::normal(8, 1, chan, 1.0).unwrap();
        let d = VolumeDims::new(40, 40, 1, 1.0).unwrap();
        let a = ray_coordinate(x, y, theta, &p, &d);
        let b = ray_coordinate(x, y, theta + PI, &p, &d);
        prop_assert!((a + b - 2.0 * p.detector_center()).abs() < 1e-9);
    }

    #[test]
    fn offset_redundancy_weights_sum_to_half_the_views(
        half_proj in 2usize..40, chan in 16usize..64, rho in 0.0f64..1.0, phi in 0.0f64..(2.0 * PI),
        band in 0.0f64..40.0, negative in any::<bool>(),
    ) {
        let off = (chan / 4) as i32 * if negative { -1 } else { 1 };
        let p = AcquisitionParams::offset(2 * half_proj, 1, chan, 1.0, off).unwrap();
        let d = VolumeDims::for_acquisition(&p, chan, chan).unwrap();
        let (cx, cy) = d.center();
        let r = rho * p.fov_radius();
        let (x, y) = (cx + r * phi.cos(), cy + r * phi.sin());
        let total: f64 = (0..p.n_proj).map(|k| redundancy_weight(ray_coordinate(x, y, p.angle(k), &p, &d), &p, band)).sum();
        prop_assert!((total - half_proj as f64).abs() <= 1e-6 * half_proj as f64, "total {total}");
    }

    #[test]
    fn forward_projection_is_linear(p in acquisition(), n in 4usize..12, a in -2.0f32..2.0, b in -2.0f32..2.0, seed in any::<u64>()) {
        let d = VolumeDims::new(n, n, p.n_rows, 1.0).unwrap();
        let (x, y) = (random_volume(&d, seed), random_volume(&d, seed ^ 1));
        let mut z = x.clone();
        z.data.iter_mut().zip(&y.data).for_each(|(zv, yv)| *zv = a * *zv + b * yv);
        let (fx, fy, fz) = (project_volume(&x, &d, &p).unwrap(), project_volume(&y, &d, &p).unwrap(), project_volume(&z, &d, &p).unwrap());
        let scale = fz.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        for ((zx, xx), yy) in fz.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((zx - (a * xx + b * yy)).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn rows_only_reach_their_slice(p in acquisition(), row in 0usize..4, seed in any::<u64>()) {
        prop_assume!(row < p.n_rows);
        let d = VolumeDims::for_acquisition(&p, 12, 12).unwrap();
        let s = random_sinogram(p, seed);
        let mut z = s.clone();
        for k in 0..p.n_proj {
            z.line_mut(k, row).iter_mut().for_each(|v| *v = 0.0);
        }
        let spec = FilterSpec::new(FilterKind::RamLak, p.n_chan);
        let (a, b) = (reconstruct(&s, &d, &spec, None).unwrap(), reconstruct(&z, &d, &spec, None).unwrap());
        let area = d.slice_len();
        for r in 0..p.n_rows {
            let same = a.data[r * area..(r + 1) * area] == b.data[r * area..(r + 1) * area];
            prop_assert_eq!(same, r != row || a.data[r * area..(r + 1) * area].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn back_projection_is_additive_over_angle_partitions(p in acquisition(), parts in prop::sample::select(vec![2usize, 3, 7]), seed in any::<u64>()) {
        let d = VolumeDims::for_acquisition(&p, 12, 12).unwrap();
        let s = filter_sinogram(&random_sinogram(p, seed), &FilterSpec::new(FilterKind::RamLak, p.n_chan)).unwrap();
        let full = back_project(&s, &d, 0..p.n_rows, 0..p.n_proj, Tile::full(&d)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=p.n_proj)).collect();
        cuts.extend([0, p.n_proj]);
        cuts.sort();
        let mut sum = vec![0.0f64; full.data.len()];
        for w in cuts.windows(2) {
            let part = back_project(&s, &d, 0..p.n_rows, w[0]..w[1], Tile::full(&d)).unwrap();
            sum.iter_mut().zip(&part.data).for_each(|(a, b)| *a += *b as f64);
        }
        let scale = full.data.iter().fold(1e-12f32, |m, v| m.max(v.abs())) as f64;
        for (a, b) in sum.iter().zip(&full.data) {
            prop_assert!((a - *b as f64).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn workload_matches_brute_force(p in acquisition(), nx in 2usize..32, ny in 2usize..32, x0f in 0.0f64..1.0, y0f in 0.0f64..1.0) {
        prop_assume!(p.n_proj <= 16);
        let d = VolumeDims::new(nx, ny, p.n_rows, 1.0).unwrap();
        let (x0, y0) = ((x0f * nx as f64) as usize, (y0f * ny as f64) as usize);
        let tile = Tile::new(x0, nx, y0, ny);
        let unit = WorkUnit { specimen: 0, specimen_id: "s".into(), row_slab: 0..p.n_rows, angle_chunk: 0..p.n_proj, slice_tile: tile, est_cost: 0.0 };
        let mut count = 0usize;
        for k in 0..p.n_proj {
            for y in y0..ny {
                for x in x0..nx {
                    let t = ray_coordinate(x as f64, y as f64, p.angle(k), &p, &d);
                    if t >= 0.0 && t < p.n_chan as f64 {
                        count += 1;
                    }
                }
            }
        }
        prop_assert_eq!(workload_model(&unit, &p, &d), (count * p.n_rows) as f64);
    }

    #[test]
    fn bitmap_codec_is_a_bijection(nx in 1usize..20, ny in 1usize..20, nz in 1usize..5, seed in any::<u64>()) {
        let m = random_mask(nx, ny, nz, seed);
        let b = encode_bitmap(&m).unwrap();
        prop_assert_eq!(b.payload.len(), (nx * ny * nz).div_ceil(4));
        prop_assert_eq!(&decode_bitmap(&b).unwrap(), &m);
        prop_assert_eq!(encode_bitmap(&decode_bitmap(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn dice_is_symmetric(n in 1usize..200, seed in any::<u64>(), c in 0u8..4) {
        let (a, b) = (random_mask(n, 1, 1, seed), random_mask(n, 1, 1, seed ^ 7));
        prop_assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
        prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
    }

    #[test]
    fn component_counts_survive_axis_permutation(nx in 1usize..8, ny in 1usize..8, nz in 1usize..8, seed in any::<u64>(), perm in 0usize..6) {
        let m = random_mask(nx, ny, nz, seed);
        let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
        let src = [nx, ny, nz];
        let dst = [src[order[0]], src[order[1]], src[order[2]]];
        let mut t = MaskVolume::zeros(dst[0], dst[1], dst[2]);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let c = [x, y, z];
                    t.set(c[order[0]], c[order[1]], c[order[2]], m.get(x, y, z));
                }
            }
        }
        for class in 0..4 {
            for conn in [Connectivity::Face6, Connectivity::Full26] {
                let (a, b) = (connected_components(&m, class, conn).unwrap(), connected_components(&t, class, conn).unwrap());
                prop_assert_eq!(a.count(), b.count());
                let (mut sa, mut sb) = (a.sizes.clone(), b.sizes.clone());
                sa.sort();
                sb.sort();
                prop_assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn tree_budget_law_is_maximal(nx in 1usize..40, ny in 1usize..40, budget in 1usize..120, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..nx * ny).map(|_| rng.random::<f64>()).collect();
        let t = build_tree_nd(&values, [nx, ny, 1], 2, budget, SplitScore::Sum).unwrap();
        prop_assert_eq!(t.n_leaves(), 1 + 3 * t.splits().len());
        let splittable = t.leaf_regions().iter().any(|r| r.side >= 2);
        prop_assert!(t.n_leaves() <= budget);
        prop_assert!(t.n_leaves() + 3 > budget || !splittable);
    }

    #[test]
    fn file_formats_round_trip(p in acquisition(), seed in any::<u64>(), nx in 1usize..9, nz in 1usize..4) {
        let s = random_sinogram(p, seed);
        let back = decode_sinogram(&encode_sinogram(&s).unwrap()).unwrap();
        prop_assert_eq!(back.params, s.params);
        prop_assert_eq!(back.data(), s.data());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = tomofuse::volume::Volume { nx, ny: nx + 1, nz, voxel_pitch: rng.random(), data: (0..nx * (nx + 1) * nz).map(|_| rng.random()).collect() };
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        let b = encode_bitmap(&random_mask(nx, nx + 1, nz, seed)).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&b)).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn randomized_ops_are_pure_functions_of_the_seed(seed in any::<u64>()) {
        let p = AcquisitionParams::normal(12, 3, 16, 1.0).unwrap();
        let d = VolumeDims::for_acquisition(&p, 16, 16).unwrap();
        let a = generate_microstructure(d, 0.3, 0.05, seed).unwrap();
        prop_assert_eq!(&a, &generate_microstructure(d, 0.3, 0.05, seed).unwrap());
        let s = tomofuse::phantom::forward_project(&a, &p).unwrap();
        let spec = DegradationSpec { ring_gain_sigma: 0.01, gaussian_sigma: 2.0, blur_sigma: 0.5, seed, ..DegradationSpec::identity(1e4) };
        let (x, y) = (degrade(&s, &spec).unwrap(), degrade(&s, &spec).unwrap());
        prop_assert_eq!(x.data(), y.data());
    }

    #[test]
    fn partition_units_tile_each_slab_once(
        n_spec in 1usize..4, rows in 4usize..12, proj in 4usize..12, pr in 1usize..4, pp in 1usize..4, ps in 1usize..5, g in 1usize..4,
    ) {
        let p = AcquisitionParams::normal(proj, rows, 16, 1.0).unwrap();
        let d = VolumeDims::for_acquisition(&p, 16, 16).unwrap();
        let set = SpecimenSet::new((0..n_spec).map(|i| Specimen { id: format!("s{i}"), params: p, dims: d }).collect()).unwrap();
        let plan = partition_specimens(&set, RankGrid::new(pr, pp, ps).unwrap(), g).unwrap();
        let mut cover = vec![0u32; n_spec * rows * proj * 16 * 16];
        for group in &plan.groups {
            prop_assert!(group.units.len() <= plan.grid.total() * g);
            for u in &group.units {
                for r in u.row_slab.clone() {
                    for k in u.angle_chunk.clone() {
                        for y in u.slice_tile.y0..u.slice_tile.y1 {
                            for x in u.slice_tile.x0..u.slice_tile.x1 {
                                cover[(((u.specimen * rows + r) * proj + k) * 16 + y) * 16 + x] += 1;
                            }
                        }
                    }
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn cyclic_never_worse_for_identical_groups(n_groups in 1usize..6, n_ranks in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let costs: Vec<f64> = (0..n_ranks).map(|_| rng.random_range(0.0..10.0)).collect();
        let unit = |c: f64| WorkUnit { specimen: 0, specimen_id: "s".into(), row_slab: 0..1, angle_chunk: 0..1, slice_tile: Tile::new(0, 1, 0, 1), est_cost: c };
        let groups = (0..n_groups).map(|_| Group { units: costs.iter().map(|&c| unit(c)).collect(), ranks: Vec::new() }).collect();
        let plan = GroupPlan { grid: RankGrid::new(1, n_ranks, 1).unwrap(), group_size: 1, strategy: Mapping::Block, groups };
        let b = imbalance(&map_block(&plan)).unwrap().overall.max_over_mean;
        let c = imbalance(&map_cyclic(&plan)).unwrap().overall.max_over_mean;
        prop_assert!(c <= b + 1e-12, "cyclic {c} block {b}");
    }

    #[test]
    fn collectives_match_serial_oracles(n in 1usize..7, blk in 0usize..8, seed in any::<u64>()) {
        let len = blk * n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group: Vec<usize> = (0..n).collect();
        let mut f = Fabric::new(n, 1e9, 1e-6, seed).unwrap();
        let contribs: Vec<Vec<f32>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (blocks, t1) = f.reduce_scatter_block(&contribs, &group).unwrap();
        let total: Vec<f32> = (0..len).map(|i| contribs.iter().fold(0.0f32, |a, c| a + c[i])).collect();
        prop_assert_eq!(blocks.concat(), total);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let (copies, t2) = f.broadcast(n - 1, &payload, &group).unwrap();
        prop_assert!(copies.iter().all(|c| *c == payload));
        let send: Vec<Vec<Vec<u8>>> = (0..n).map(|i| (0..n).map(|j| vec![(i * n + j) as u8; (i + j) % 3]).collect()).collect();
        let (recv, t3) = f.all_to_all_v(&send, &group).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(&recv[j][i], &send[i][j]);
            }
        }
        prop_assert!(t1 >= 0.0 && t2 >= 0.0 && t3 >= 0.0);
        prop_assert!((f.total_time() - (t1 + t2 + t3)).abs() <= 1e-12 * f.total_time().max(1.0));
        let order = f.execution_order(3, 10);
        prop_assert_eq!(&order, &Fabric::new(n, 1e9, 1e-6, seed).unwrap().execution_order(3, 10));
    }

    #[test]
    fn storage_counters_add_up(reads in prop::collection::vec(0u64..10_000, 0..6)) {
        let mut s = StorageModel::new(1e6, 5e5, 1e7).unwrap();
        let mut t = 0.0;
        for &r in &reads {
            t += s.read(Tier::Pfs, r);
        }
        let c = s.counters(Tier::Pfs);
        prop_assert_eq!(c.bytes_read, reads.iter().sum::<u64>());
        prop_assert!((t - reads.iter().sum::<u64>() as f64 / 1e6).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_matches_serial_reconstruction(
        pr in 1usize..3, pp in 1usize..4, ps in 1usize..4, g in 1usize..3, overlap in any::<bool>(), fuse in any::<bool>(),
        n_spec in 1usize..3, seed in any::<u64>(),
    ) {
        let p = AcquisitionParams::normal(16, 4, 24, 1.0).unwrap();
        let d = VolumeDims::for_acquisition(&p, 24, 24).unwrap();
        let m = generate_microstructure(d, 0.3, 0.05, seed).unwrap();
        let s = tomofuse::phantom::forward_project(&m, &p).unwrap();
        let set = SpecimenSet::new((0..n_spec).map(|i| Specimen { id: format!("s{i}"), params: p, dims: d }).collect()).unwrap();
        let grid = RankGrid::new(pr, pp, ps).unwrap();
        let mut cfg = PipelineConfig::new(grid, g, HuWindow::new(0.0, 6e-4).unwrap());
        cfg.overlap = overlap;
        cfg.fuse_ai = fuse;
        cfg.sap = SapParams { budget: 16, p: 4, ..SapParams::default() };
        let mut fabric = Fabric::new(grid.total(), 1e10, 1e-6, seed).unwrap();
        let mut storage = StorageModel::new(1e9, 1e9, 1e10).unwrap();
        let out = run(&set, &vec![s.clone(); n_spec], &cfg, &mut fabric, &mut storage).unwrap();
        let reference = reconstruct(&s, &d, &cfg.filter_spec(p.n_chan), None).unwrap();
        for v in &out.volumes {
            prop_assert!(v.max_relative_error(&reference) <= 1e-5);
        }
        let dur = out.trace.durations();
        let ms = out.trace.makespan();
        prop_assert!(max_stage_total(&dur) <= ms * (1.0 + 1e-12) && ms <= serial_total(&dur) * (1.0 + 1e-12));
        prop_assert_eq!(out.trace.bytes(Stage::Load), storage.counters(Tier::Pfs).bytes_read);
        prop_assert_eq!(out.trace.bytes(Stage::Store), storage.counters(Tier::Pfs).bytes_written);
    }

    #[test]
    fn fused_inference_is_rank_invariant(ranks in prop::sample::select(vec![1usize, 2, 3, 4, 8]), budget in prop::sample::select(vec![4usize, 16, 64]), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = ThresholdSegmenter::new(16384.0, 32768.0, 49152.0).unwrap();
        let sap = SapParams { budget, p: 4, ..SapParams::default() };
        let tiles = tomofuse::partition::slice_tiles(40, 40, 3);
        let pieces: Vec<SlicePiece> = (0..3)
            .flat_map(|z| tiles.iter().map(move |&t| (z, t)))
            .map(|(z, t): (usize, Tile)| SlicePiece {
                z,
                tile: t,
                owner: rng.random_range(0..ranks),
                data: (0..t.area()).map(|i| if (i / 7 + z) % 3 == 0 { 60000 } else { rng.random_range(0..30000) }).collect(),
            })
            .collect();
        let mut f = Fabric::new(ranks, 1e9, 1e-6, seed).unwrap();
        let (out, _) = fused_infer(&pieces, &sap, &seg, &mut f).unwrap();
        prop_assert_eq!(out.len(), pieces.len());
        for piece in &pieces {
            let o = out.iter().find(|o| o.z == piece.z && o.tile == piece.tile).unwrap();
            prop_assert_eq!(o.owner, piece.owner);
            prop_assert_eq!(&o.labels, &local_infer(piece, &sap, &seg).unwrap());
        }
    }
}

#[test]
fn bitmap_rejects_labels_outside_two_bits() {
    let bad = MaskVolume { nx: 1, ny: 1, nz: 1, labels: vec![4] };
    assert!(encode_bitmap(&bad).is_err());
    assert!(decode_bitmap(&BitmapMask { nx: 3, ny: 1, nz: 1, payload: vec![] }).is_err());
}

#[test]
fn sequence_length_reduction_is_reported() {
    // a 1024² slice at N = 256, p = 16 gives 256 tokens vs 4096 fixed-grid patches
    let e = vec![0.0; 1024 * 1024];
    let t = build_tree_nd(&e, [1024, 1024, 1], 2, 256, SplitScore::Sum).unwrap();
    let fixed = (1024 / 16) * (1024 / 16);
    println!("adaptive tokens {} vs fixed-grid {fixed}", t.n_leaves());
    assert!(t.n_leaves() <= 256);
}

#[test]
fn hotter_regions_get_finer_leaves() {
    let mut e = vec![0.0; 64 * 64];
    for y in 0..32 {
        for x in 0..32 {
            e[y * 64 + x] = 1.0;
        }
    }
    let t = build_tree_nd(&e, [64, 64, 1], 2, 40, SplitScore::Sum).unwrap();
    let regions = t.leaf_regions();
    let hot = regions.iter().filter(|r| r.origin[0] < 32 && r.origin[1] < 32).map(|r| r.side).max().unwrap();
    let cold = regions.iter().filter(|r| r.origin[0] >= 32 || r.origin[1] >= 32).map(|r| r.side).min().unwrap();
    assert!(hot <= cold, "hot leaves up to {hot}, cold leaves down to {cold}");
}
