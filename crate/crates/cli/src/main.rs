use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use visreg::config::{data_root, ExperimentConfig};
use visreg::network::{checkpoint, LayerKind, NetworkModel};
use visreg::trainer::{self, BenchTimes, METRICS_HEADER, TIMING_HEADER};
use visreg::verify;
use visreg::visualize::{self, ImageFormat};
use visreg::{Error, RelKernel};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "visreg", version, about = "Visualization-regularized network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per an experiment config; writes metrics, timings and checkpoints.
    Train {
        config: PathBuf,
        /// Dataset root for relative paths (default: $VISREG_DATA_DIR, else the config's directory).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle and finite-difference self-checks.
    Verify {
        #[arg(long, default_value_t = verify::Options::default().seed)]
        seed: u64,
        /// Use the unflipped kernel in the gradient paths (the suites must fail).
        #[arg(long)]
        inject_flip_mutation: bool,
    },
    /// Export first-layer visualizations, kernel responses and a loss table.
    Visualize {
        checkpoint: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value = "laplacian")]
        kernel: String,
        /// Number of nodes, taken in order of decreasing incoming-weight norm.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Format::Pgm)]
        format: Format,
    },
    /// Time VR, L2' and backprop gradients; fit width and batch-size scaling.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 31)]
        reps: usize,
        /// fc widths for the scaling fit.
        #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 400, 800])]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 1000])]
        batches: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pgm,
    Png,
}

impl From<Format> for ImageFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Pgm => ImageFormat::Pgm,
            Format::Png => ImageFormat::Png,
        }
    }
}

/// Marks a failed run whose report was already printed.
#[derive(Debug)]
struct ChecksFailed;

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("one or more checks failed")
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Diverged { .. }) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, data_dir, output } => train(&config, data_dir, output),
        Command::Verify {
            seed,
            inject_flip_mutation,
        } => run_verify(seed, inject_flip_mutation),
        Command::Visualize {
            checkpoint,
            out_dir,
            kernel,
            count,
            format,
        } => run_visualize(&checkpoint, &out_dir, &kernel, count, format.into()),
        Command::Bench {
            config,
            reps,
            widths,
            batches,
        } => bench(&config, reps, &widths, &batches),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<ChecksFailed>() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Reads a config, reporting an unreadable file as a config error.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).with_context(|| format!("in config {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn train(cfg_path: &Path, data_dir: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(cfg_path)?;
    let root = data_dir.unwrap_or_else(|| data_root(cfg_path.parent().unwrap_or(Path::new("."))));
    let (train_data, test_data) = cfg.load_data(&root)?;
    let mut model = cfg.build_model(&train_data)?;
    let tc = cfg.train_config()?;
    let out = output.unwrap_or_else(|| cfg.output.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.cfg"), cfg.serialize())?;

    println!("seed {}", cfg.seed);
    println!(
        "train {} samples, test {}, {} parameters, VR layer {:?}",
        train_data.len(),
        test_data.as_ref().map_or(0, |d| d.len()),
        model.param_count(),
        model.vr_layer()
    );
    let mut metrics = create(&out.join("metrics.csv"))?;
    let mut timing = create(&out.join("timing.csv"))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(timing, "{TIMING_HEADER}")?;
    let every = cfg.trainer.checkpoint_every;
    let epochs = tc.epochs;
    let rows = trainer::train(&tc, &train_data, test_data.as_ref(), &mut model, |row, m| {
        let io = |e: std::io::Error| Error::io(&out, e);
        writeln!(metrics, "{}", row.csv()).and_then(|_| metrics.flush()).map_err(io)?;
        writeln!(timing, "{},{}", row.epoch, row.seconds).and_then(|_| timing.flush()).map_err(io)?;
        println!(
            "epoch {:>4}/{epochs} lr={:.3e} loss={:.5} train_acc={:.4} test_acc={} vl2={:.4}",
            row.epoch + 1,
            row.lr,
            row.train_loss,
            row.train_acc,
            row.test_acc.map_or("-".into(), |a| format!("{a:.4}")),
            row.vl2
        );
        if every > 0 && (row.epoch + 1) % every == 0 && row.epoch + 1 < epochs {
            checkpoint::save(m, &out.join(format!("epoch-{:04}.ckpt", row.epoch + 1)))?;
        }
        Ok(())
    })?;
    checkpoint::save(&model, &out.join("final.ckpt"))?;
    let last = rows.last().expect("at least one epoch");
    match last.test_acc {
        Some(a) => println!("final test accuracy: {a:.4} (seed {})", cfg.seed),
        None => println!("final test accuracy: n/a, no test set (seed {})", cfg.seed),
    }
    Ok(())
}

fn run_verify(seed: u64, inject_flip_mutation: bool) -> Result<()> {
    let opts = verify::Options {
        seed,
        inject_flip_mutation,
        ..Default::default()
    };
    println!("seed {seed}{}", if inject_flip_mutation { " (flip mutation injected)" } else { "" });
    let reports = verify::run_all(&opts)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} suites passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(ChecksFailed.into());
    }
    Ok(())
}

/// Nodes of `layer` ranked by decreasing incoming-weight norm (ties by index).
fn ranked_nodes(model: &NetworkModel, layer: usize) -> Vec<usize> {
    let w = &model.params()[layer].as_ref().expect("dense layer").weights;
    let norms: Vec<f64> = w.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx
}

fn run_visualize(ckpt: &Path, out_dir: &Path, kernel: &str, count: usize, format: ImageFormat) -> Result<()> {
    let ker = RelKernel::by_name(kernel)?;
    let model = checkpoint::load(ckpt)?;
    let first_is_fc = matches!(model.layers()[0].kind, LayerKind::Dense { .. });
    let layer = if first_is_fc {
        0
    } else {
        model
            .vr_layer()
            .context("first layer is not fully connected and the model has no VR layer")?
    };
    let width = model.layer_output_shape(layer).len();
    if count == 0 || count > width {
        return Err(Error::Config(format!("--count must be in 1..={width} (width of layer {layer})")).into());
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut images = Vec::new();
    for node in ranked_nodes(&model, layer).into_iter().take(count) {
        let channels = if first_is_fc {
            visualize::vis_first_layer(&model, node)?
        } else {
            visualize::vr_node_image(&model, node)?
        };
        let single = channels.len() == 1;
        for (c, img) in channels.into_iter().enumerate() {
            let id = if single { format!("node{node:04}") } else { format!("node{node:04}_c{c}") };
            images.push((id, img));
        }
    }
    let rows = visualize::loss_table(&images, &ker, Some((out_dir, format)))?;
    std::fs::write(out_dir.join("loss_table.csv"), visualize::loss_table_csv(&rows))?;
    print!("{}", visualize::loss_table_text(&rows));
    let n = rows.len() as f64;
    println!(
        "layer {layer}, kernel {kernel}: mean VL1 {:.4}, mean VL2 {:.4} over {} images",
        rows.iter().map(|r| r.vl1).sum::<f64>() / n,
        rows.iter().map(|r| r.vl2).sum::<f64>() / n,
        rows.len()
    );
    Ok(())
}

fn print_times(label: &str, times: &[BenchTimes]) {
    println!("{label:>8} {:>10} {:>6} {:>12} {:>12} {:>12}", "vr_weights", "batch", "t_vr", "t_l2", "t_backprop");
    for t in times {
        println!(
            "{:>8} {:>10} {:>6} {:>12.3e} {:>12.3e} {:>12.3e}",
            "",
            t.vr_weights,
            t.batch,
            t.t_vr,
            t.t_l2,
            t.t_backprop
        );
    }
}

fn bench(cfg_path: &Path, reps: usize, widths: &[usize], batches: &[usize]) -> Result<()> {
    let cfg = load_config(cfg_path)?;
    let kernel = cfg.kernel()?;
    let arch = cfg.arch()?;
    let shape = cfg.dataset.kind.shape();
    if widths.len() < 2 || batches.is_empty() {
        bail!("need at least two widths and one batch size");
    }
    println!("seed {}, median of {reps} round-robin reps", cfg.seed);

    let sweep = trainer::bench_widths(&arch, shape, widths, cfg.trainer.batch_size, &kernel, reps, cfg.seed)?;
    println!("\nwidth sweep (batch {})", cfg.trainer.batch_size);
    print_times("", &sweep);
    let ratios: Vec<f64> = sweep.windows(2).map(|w| w[1].t_vr / w[0].t_vr).collect();
    let points: Vec<(f64, f64)> = sweep.iter().map(|t| (t.vr_weights as f64, t.t_vr)).collect();
    println!(
        "t_vr ratio per weight-count step: {}",
        ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
    );
    println!("log-log slope of t_vr vs VR weight count: {:.3}", trainer::log_log_slope(&points));
    let worst = sweep.iter().map(|t| t.t_vr / t.t_l2).fold(0.0, f64::max);
    println!("max t_vr / t_l2: {worst:.2}");

    let model = cfg.model_for_shape(shape)?;
    let bsweep = trainer::bench_batches(&model, batches, &kernel, reps, cfg.seed)?;
    println!("\nbatch sweep");
    print_times("", &bsweep);
    let lo = bsweep.iter().map(|t| t.t_vr).fold(f64::INFINITY, f64::min);
    let hi = bsweep.iter().map(|t| t.t_vr).fold(0.0, f64::max);
    println!("t_vr spread across batch sizes: {:.1}%", (hi / lo - 1.0) * 100.0);
    Ok(())
}
