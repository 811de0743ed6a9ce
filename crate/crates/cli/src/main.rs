use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use tomofuse::config::Config;
use tomofuse::formats::{pgm_slice, read_mask, read_sinogram, write_atomic, write_mask, write_sinogram, write_volume};
use tomofuse::geometry::{Specimen, SpecimenSet, VolumeDims};
use tomofuse::partition::{imbalance, imbalance_csv, map_block, map_cyclic, partition_specimens, Mapping, RankGrid};
use tomofuse::phantom::N_CLASSES;
use tomofuse::pipeline::{io_audit, report_text, run, RunOutput};
use tomofuse::segfuse::{
    connected_components, decode_bitmap, dice_report, encode_bitmap, log_bins, Connectivity,
};
use tomofuse::volume::{MaskVolume, Sinogram};
use tomofuse::{Error, Result};

/// Simulated parallel-beam CT: reconstruction, partitioning, fused
/// segmentation and analysis.
#[derive(Parser)]
#[command(name = "tomofuse", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// key = value configuration file; defaults form the 256³ preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Rank grid "PxQxR" (rows x projections x slice tiles).
    #[arg(long, global = true)]
    ranks: Option<String>,
    /// Row slabs per group.
    #[arg(long, global = true)]
    groups: Option<usize>,
    #[arg(long, global = true, value_parser = ["on", "off"])]
    overlap: Option<String>,
    #[arg(long, global = true, value_parser = ["on", "off"])]
    fuse: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate specimens: degraded sinograms and ground-truth masks.
    Simulate,
    /// Distributed reconstruction to uint16 volumes.
    Reconstruct {
        /// Also dump this slice of every volume as PGM.
        #[arg(long)]
        pgm: Option<usize>,
    },
    /// Partition plan and Block vs Cyclic imbalance.
    Plan,
    /// Reconstruction with fused segmentation, writing 2-bit masks.
    RunFused,
    /// Dice against ground truth and connected-component statistics.
    Analyze,
    /// Model vs executed makespan over grid and group-size sweeps.
    Bench,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOMOFUSE_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tomofuse: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
            other => other,
        })?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(r) = &cli.ranks {
        c.set("grid", r)?;
    }
    if let Some(g) = cli.groups {
        c.groups = g;
    }
    if let Some(v) = &cli.overlap {
        c.set("overlap", v)?;
    }
    if let Some(v) = &cli.fuse {
        c.set("fuse", v)?;
    }
    Ok(c)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| io_at(e, &cli.out))?;
    match &cli.cmd {
        Cmd::Simulate => simulate(&cfg, &cli.out),
        Cmd::Reconstruct { pgm } => reconstruct(&cfg, &cli.out, *pgm),
        Cmd::Plan => plan(&cfg, &cli.out),
        Cmd::RunFused => run_fused(&cfg, &cli.out),
        Cmd::Analyze => analyze(&cfg, &cli.out),
        Cmd::Bench => bench(&cfg, &cli.out),
    }
}

fn io_at(e: std::io::Error, p: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

fn sino_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("specimen{i}.tsin"))
}

fn truth_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("specimen{i}.truth.tmk2"))
}

fn mask_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("specimen{i}.tmk2"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn simulate(cfg: &Config, out: &Path) -> Result<()> {
    for i in 0..cfg.specimens {
        let (m, s) = cfg.simulate(i)?;
        info!(
            "specimen {i}: aggregate {:.3}, pore {:.3} of volume",
            m.fraction(tomofuse::phantom::AGGREGATE),
            m.fraction(tomofuse::phantom::PORE)
        );
        write_sinogram(&sino_path(out, i), &s)?;
        write_mask(&truth_path(out, i), &encode_bitmap(&m.mask())?)?;
        println!("{}\n{}", sino_path(out, i).display(), truth_path(out, i).display());
    }
    Ok(())
}

fn load_inputs(cfg: &Config, out: &Path) -> Result<(SpecimenSet, Vec<Sinogram>)> {
    let mut specs = Vec::new();
    let mut sinos = Vec::new();
    for i in 0..cfg.specimens {
        let s = read_sinogram(&sino_path(out, i))?;
        let dims = VolumeDims::for_acquisition(&s.params, cfg.nx, cfg.ny)?;
        specs.push(Specimen { id: format!("specimen{i}"), params: s.params, dims });
        sinos.push(s);
    }
    Ok((SpecimenSet::new(specs)?, sinos))
}

fn execute_pipeline(cfg: &Config, out: &Path, fuse: bool) -> Result<RunOutput> {
    let (set, sinos) = load_inputs(cfg, out)?;
    let mut p = cfg.pipeline()?;
    p.fuse_ai = fuse;
    run(&set, &sinos, &p, &mut cfg.fabric()?, &mut cfg.storage()?)
}

fn reconstruct(cfg: &Config, out: &Path, pgm: Option<usize>) -> Result<()> {
    let res = execute_pipeline(cfg, out, false)?;
    for (i, v) in res.quantized.iter().enumerate() {
        let path = out.join(format!("specimen{i}.tvol"));
        write_volume(&path, v)?;
        println!("{}", path.display());
        if let Some(z) = pgm {
            write_atomic(&out.join(format!("specimen{i}_z{z}.pgm")), &pgm_slice(v, z)?)?;
        }
    }
    write_text(&out.join("trace.csv"), &res.trace.to_csv())?;
    let text = report_text(&res.report, None);
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn plan(cfg: &Config, out: &Path) -> Result<()> {
    let set = cfg.specimen_set()?;
    let block = partition_specimens(&set, cfg.grid, cfg.groups)?;
    let cyclic = map_cyclic(&block);
    let block = map_block(&block);
    let chosen = if cfg.mapping == Mapping::Cyclic { &cyclic } else { &block };
    write_text(&out.join("plan.json"), &chosen.to_json())?;
    let (rb, rc) = (imbalance(&block)?, imbalance(&cyclic)?);
    write_text(&out.join("imbalance.csv"), &imbalance_csv(&rb, &rc))?;
    println!(
        "groups {}\nranks {}\nblock_max_over_mean {:.6}\ncyclic_max_over_mean {:.6}",
        block.groups.len(),
        block.n_ranks(),
        rb.overall.max_over_mean,
        rc.overall.max_over_mean
    );
    Ok(())
}

fn run_fused(cfg: &Config, out: &Path) -> Result<()> {
    let res = execute_pipeline(cfg, out, cfg.fuse)?;
    let masks: Vec<MaskVolume> = if cfg.fuse {
        res.masks.clone()
    } else {
        // staged baseline: segment the stored volumes afterwards
        let seg = cfg.segmenter()?;
        res.quantized
            .iter()
            .map(|v| MaskVolume::new(v.nx, v.ny, v.nz, seg.classify_all(&v.data)))
            .collect::<Result<_>>()?
    };
    for (i, m) in masks.iter().enumerate() {
        write_mask(&mask_path(out, i), &encode_bitmap(m)?)?;
        println!("{}", mask_path(out, i).display());
    }
    write_text(&out.join("trace.csv"), &res.trace.to_csv())?;
    let audit = io_audit(&res.report, cfg.fuse);
    let text = report_text(&res.report, Some(&audit));
    write_text(&out.join("io_audit.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn analyze(cfg: &Config, out: &Path) -> Result<()> {
    let conn = Connectivity::from_count(cfg.connectivity)?;
    let mut dice_csv = String::from("specimen,class,dice\n");
    let mut comp_csv = String::from("specimen,class,component,size,rank,bin\n");
    for i in 0..cfg.specimens {
        let pred = decode_bitmap(&read_mask(&mask_path(out, i))?)?;
        let truth_file = truth_path(out, i);
        if truth_file.exists() {
            let truth = decode_bitmap(&read_mask(&truth_file)?)?;
            let (per, macro_avg) = dice_report(&pred, &truth)?;
            for (c, d) in per.iter().enumerate() {
                let v = d.map_or(String::from("nan"), |d| format!("{d:.6}"));
                dice_csv.push_str(&format!("{i},{c},{v}\n"));
            }
            dice_csv.push_str(&format!("{i},macro,{macro_avg:.6}\n"));
            println!("specimen{i} macro_dice {macro_avg:.6}");
        } else {
            warn!("no ground truth at {}; skipping Dice", truth_file.display());
        }
        for class in 0..N_CLASSES as u8 {
            let comps = connected_components(&pred, class, conn)?;
            let edges = log_bins(comps.sizes.iter().copied().max().unwrap_or(1));
            let bins = comps.bins(&edges);
            let mut rank = vec![0usize; comps.count()];
            for (r, id) in comps.ranking().into_iter().enumerate() {
                rank[id as usize - 1] = r + 1;
            }
            for (k, (size, bin)) in comps.sizes.iter().zip(&bins).enumerate() {
                comp_csv.push_str(&format!("{i},{class},{},{size},{},{bin}\n", k + 1, rank[k]));
            }
            println!("specimen{i} class{class} components {}", comps.count());
        }
    }
    write_text(&out.join("dice.csv"), &dice_csv)?;
    write_text(&out.join("components.csv"), &comp_csv)?;
    Ok(())
}

fn bench(cfg: &Config, out: &Path) -> Result<()> {
    let (set, sinos) = load_inputs(cfg, out)?;
    let mut csv = String::from(
        "p_row,p_proj,p_slice,groups,overlap,model_makespan,executed_makespan,relative_gap,max_stage_total,serial_sum\n",
    );
    println!("{:>6} {:>7} {:>6} {:>14} {:>14} {:>8}", "grid", "groups", "ovl", "model_s", "executed_s", "gap");
    for p_proj in [1, 2, 4] {
        for p_slice in [1, 2, 4] {
            for groups in [1, 2, 4] {
                let grid = RankGrid::new(cfg.grid.p_row, p_proj, p_slice)?;
                let c = Config { grid, groups, ..cfg.clone() };
                let p = c.pipeline()?;
                let res = match run(&set, &sinos, &p, &mut c.fabric()?, &mut c.storage()?) {
                    Ok(r) => r,
                    Err(e @ Error::Partition(_)) => {
                        warn!("skipping {grid} with {groups} groups: {e}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let r = &res.report;
                let gap = if r.model_makespan > 0.0 { (r.makespan - r.model_makespan) / r.model_makespan } else { 0.0 };
                csv.push_str(&format!(
                    "{},{p_proj},{p_slice},{groups},{},{:.9e},{:.9e},{gap:.6},{:.9e},{:.9e}\n",
                    grid.p_row,
                    if c.overlap { "on" } else { "off" },
                    r.model_makespan,
                    r.makespan,
                    r.max_stage_total,
                    r.serial_time
                ));
                println!(
                    "{:>6} {groups:>7} {:>6} {:>14.6e} {:>14.6e} {:>7.2}%",
                    grid.to_string(),
                    if c.overlap { "on" } else { "off" },
                    r.model_makespan,
                    r.makespan,
                    100.0 * gap
                );
            }
        }
    }
    write_text(&out.join("bench.csv"), &csv)
}
