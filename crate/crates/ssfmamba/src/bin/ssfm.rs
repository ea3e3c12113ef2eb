//! Command-line front end: data synthesis, training, evaluation, and
//! self-checks for the spectral and gradient machinery.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use ssfmamba::blocks::{self, MdifSpec, ParamStore};
use ssfmamba::diffcore::{finite_difference_check, NdArray, Tape};
use ssfmamba::harness::{eval, train};
use ssfmamba::network;
use ssfmamba::rng::SplitMix64;
use ssfmamba::scan::{build_order, OrderKind};
use ssfmamba::ssm::{self, SsmCoreParams};
use ssfmamba::{data, fft3d};
use ssfmamba::{Error, Result};

#[derive(Parser)]
#[command(name = "ssfm", about = "3D segmentation with spatial/frequency selective scans")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic phantom cases as image+label file pairs.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Grid extents as H,W,D.
        #[arg(long)]
        size: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of cases (consecutive seeds).
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Train from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Spectral transform self-verification.
    FftSelftest,
    /// Print a scan ordering as sequence-position -> voxel lines.
    InspectOrder {
        #[arg(long)]
        kind: String,
        /// Grid extents as H,W,D.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 2)]
        block: usize,
    },
}

fn parse_triple(s: &str, what: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{what} must be H,W,D integers, got {s:?}")))?;
    match parts[..] {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::Config(format!("{what} must have three extents, got {s:?}"))),
    }
}

fn cmd_synth(seed: u64, size: &str, out: &PathBuf, count: u64) -> Result<()> {
    let extents = parse_triple(size, "--size")?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    for s in seed..seed + count {
        let case = data::synth_case(s, extents)?;
        data::save_case(out, &case)?;
        println!(
            "wrote {} and {}",
            data::image_path(out, &case.id).display(),
            data::labels_path(out, &case.id).display()
        );
    }
    Ok(())
}

fn cmd_train(config_path: &PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let config: train::TrainConfig = serde_json::from_str(&text)?;
    let report = train::train(&config, |line| println!("{line}"))?;
    println!(
        "done: initial_loss={} final_loss={} checkpoint={}",
        report.initial_loss,
        report.final_loss,
        report.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &PathBuf, data_dir: &PathBuf) -> Result<()> {
    let (model, step, _) = network::load_checkpoint(ckpt)?;
    println!("checkpoint step={step} config={}", serde_json::to_string(&model.config)?);
    let report = eval::evaluate(&model, data_dir)?;
    print!("{}", report.text_table());
    for line in report.machine_lines() {
        println!("{line}");
    }
    Ok(())
}

struct Check {
    name: &'static str,
    rel_err: f64,
    tol: f64,
}

fn gradcheck_ssm() -> Result<Vec<Check>> {
    // oracle agreement first, then FD through the full block
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = SplitMix64::new(seed);
        let d_inner = 1 + rng.below(4);
        let l = 1 + rng.below(24);
        let core = SsmCoreParams::init(d_inner, 1 + rng.below(6), &mut rng);
        let u = NdArray::random_uniform(&[d_inner, l], -1.0, 1.0, &mut rng);
        let fast = ssm::selective_scan(&u, &core)?;
        let slow = ssm::selective_scan_reference(&u, &core)?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(0);
    blocks::store_mamba(&mut store, "m", 4, 2, 4, &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.input("x", NdArray::random_uniform(&[4, 16], -1.0, 1.0, &mut rng));
    let ids = blocks::mamba_ids(&mut tape, &store, "m")?;
    let y = ssm::mamba_block(&mut tape, x, &ids)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.mean(sq)?;
    let err = finite_difference_check(&mut tape, loss, 1e-4)?;
    Ok(vec![
        Check { name: "ssm.scan_vs_reference", rel_err: worst, tol: 1e-12 },
        Check { name: "ssm.mamba_block_fd", rel_err: err, tol: 1e-4 },
    ])
}

fn gradcheck_blocks() -> Result<Vec<Check>> {
    let spec = MdifSpec {
        channels: 2,
        expansion: 2,
        d_state: 4,
        local3d_block: 2,
        freq_dirs: vec![OrderKind::InSlice, OrderKind::CrossSlice, OrderKind::Local3D],
        spatial_dirs: vec![OrderKind::InSlice],
    };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(0);
    blocks::store_mdif(&mut store, "blk", &spec, &mut rng)?;
    // the fusion tail is zero-initialized (identity block); randomize it so
    // every upstream parameter actually reaches the loss
    *store.get_mut("blk.fuse.c2.w")? = NdArray::random_uniform(&[2, 2], -0.5, 0.5, &mut rng);
    let mut tape = Tape::new();
    let x = tape.input("x", NdArray::random_uniform(&[2, 4, 4, 4], -0.5, 0.5, &mut rng));
    let y = blocks::mdif_block(&mut tape, &store, "blk", &spec, x)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.mean(sq)?;
    let err = finite_difference_check(&mut tape, loss, 1e-4)?;
    Ok(vec![Check { name: "blocks.mdif_fd", rel_err: err, tol: 1e-3 }])
}

fn gradcheck_network() -> Result<Vec<Check>> {
    let cfg = network::ModelConfig {
        in_channels: 2,
        base_channels: 2,
        num_stages: 2,
        mdif_blocks_per_stage: 1,
        d_state: 4,
        ..Default::default()
    };
    let model = network::build_model(&cfg, 13)?;
    let mut rng = SplitMix64::new(7);
    let mut tape = Tape::new();
    let x = tape.input(
        "volume",
        NdArray::random_uniform(&[2, 8, 8, 8], -0.5, 0.5, &mut rng),
    );
    let labels: Vec<u8> = (0..512).map(|_| rng.below(4) as u8).collect();
    let (_, loss) = network::build_loss(&mut tape, &model, x, Arc::new(labels))?;
    let err = finite_difference_check(&mut tape, loss, 1e-4)?;
    Ok(vec![Check { name: "network.end_to_end_fd", rel_err: err, tol: 1e-3 }])
}

fn cmd_gradcheck(module: &str) -> Result<()> {
    let mut checks = Vec::new();
    match module {
        "ssm" => checks.extend(gradcheck_ssm()?),
        "blocks" => checks.extend(gradcheck_blocks()?),
        "network" => checks.extend(gradcheck_network()?),
        "all" => {
            checks.extend(gradcheck_ssm()?);
            checks.extend(gradcheck_blocks()?);
            checks.extend(gradcheck_network()?);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck module {other:?} (want all|ssm|blocks|network)"
            )))
        }
    }
    let mut failed = false;
    for c in &checks {
        let ok = c.rel_err < c.tol;
        failed |= !ok;
        println!(
            "{}: rel_err={:.3e} tol={:.0e} {}",
            c.name,
            c.rel_err,
            c.tol,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Config("gradcheck failed".into()));
    }
    Ok(())
}

fn cmd_fft_selftest() -> Result<()> {
    let shapes = [(2, 2, 2), (4, 4, 4), (3, 5, 7), (8, 8, 8)];
    let mut rng = SplitMix64::new(0);
    let mut failed = false;
    for (h, w, d) in shapes {
        let x = NdArray::random_uniform(&[h, w, d], -1.0, 1.0, &mut rng);
        let half = fft3d::rfft3(&x)?;
        let full = fft3d::hermitian_complete(&half);
        let reference = fft3d::dft3_reference(&x)?;
        let mut dft_dev = 0.0f64;
        for (a, b) in full.data.iter().zip(&reference.data) {
            dft_dev = dft_dev.max((a - b).norm());
        }
        let sym_dev = fft3d::check_conjugate_symmetry(&full);
        let n = (h * w * d) as f64;
        let energy_spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let energy_spectral: f64 = full.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
        let parseval = (energy_spectral - energy_spatial).abs() / energy_spatial;
        let roundtrip = fft3d::irfft3(&half).max_abs_diff(&x);
        let ok =
            dft_dev < 1e-9 && sym_dev < 1e-10 && parseval < 1e-9 && roundtrip < 1e-10;
        failed |= !ok;
        println!(
            "{h}x{w}x{d}: dft_dev={dft_dev:.3e} sym_dev={sym_dev:.3e} parseval={parseval:.3e} roundtrip={roundtrip:.3e} {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Config("fft-selftest failed".into()));
    }
    Ok(())
}

fn cmd_inspect_order(kind: &str, shape: &str, block: usize) -> Result<()> {
    let grid = parse_triple(shape, "--shape")?;
    let kind = match kind {
        "in-slice" => OrderKind::InSlice,
        "cross-slice" => OrderKind::CrossSlice,
        "local3d" => OrderKind::Local3D,
        other => {
            return Err(Error::Config(format!(
                "unknown order kind {other:?} (want in-slice|cross-slice|local3d)"
            )))
        }
    };
    let order = build_order(kind, grid, block)?;
    let (_, w, d) = grid;
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for (i, &v) in order.forward.iter().enumerate() {
        // a closed pipe (e.g. | head) is not an error for a listing command
        if writeln!(out, "pos={i} voxel=({},{},{})", v / (w * d), (v / d) % w, v % d).is_err() {
            break;
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { seed, size, out, count } => cmd_synth(seed, &size, &out, count),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Cmd::Gradcheck { module } => cmd_gradcheck(&module),
        Cmd::FftSelftest => cmd_fft_selftest(),
        Cmd::InspectOrder { kind, shape, block } => cmd_inspect_order(&kind, &shape, block),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
