use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pom_core::bench::{self, BenchConfig, Mechanism, Pass};
use pom_core::check;
use pom_core::config::KeyValues;
use pom_core::diffusion::{self, ablation, train::SampleSettings, Checkpoint, DatasetKind, TrainConfig};
use pom_core::gradcheck::{self, GradModule};
use pom_core::tensor::fault::{self, Fault};
use pom_core::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "pom", version, about = "Polynomial Mixer correctness suites, benchmarks and toy training")]
struct Cli {
    /// Seed for every random draw; overrides a config file's `seed`.
    #[arg(long, global = true, env = "POM_SEED")]
    seed: Option<u64>,

    #[arg(long, global = true, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SelectSign,
    SigmoidBackward,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Pom,
    ImageBlock,
    VideoBlock,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Pom,
    Mha,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum PassArg {
    Forward,
    ForwardBackward,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites (equivariance, streaming, masks, deletion, distinctness).
    Check,
    /// Compare reverse-mode gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
    },
    /// Time PoM and attention over a sequence-length sweep.
    Bench {
        #[arg(long, value_enum, default_value = "both")]
        mechanism: MechanismArg,
        #[arg(long, value_enum, default_value = "forward-backward")]
        pass: PassArg,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 384)]
        d: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 1 unless the slope contract holds.
        #[arg(long)]
        assert: bool,
        /// Worker threads; the kernels are single-threaded, so only 1 is accepted.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train a toy model; writes checkpoint.pom and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Draw samples from a checkpoint (CSV for 2D data, PGM grid for patterns).
    Sample {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model per (degree, expand) pair at a fixed budget.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Outcome {
    Ok,
    Failed(String),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::ConfigParse { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(f) = cli.inject_fault {
        fault::arm(match f {
            FaultArg::SelectSign => Fault::SelectSign,
            FaultArg::SigmoidBackward => Fault::SigmoidBackward,
        });
    }
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Check => cmd_check(seed),
        Command::Gradcheck { module } => cmd_gradcheck(*module, seed),
        Command::Bench {
            mechanism,
            pass,
            seq_lens,
            batch,
            d,
            heads,
            repeats,
            warmup,
            out,
            assert,
            threads,
        } => {
            if *threads != 1 {
                return Err(Error::Config(format!(
                    "--threads {threads}: the kernels run on one thread, only 1 is supported"
                )));
            }
            let cfg = BenchConfig {
                mechanisms: match mechanism {
                    MechanismArg::Pom => vec![Mechanism::Pom],
                    MechanismArg::Mha => vec![Mechanism::Mha],
                    MechanismArg::Both => vec![Mechanism::Pom, Mechanism::Mha],
                },
                passes: match pass {
                    PassArg::Forward => vec![Pass::Forward],
                    PassArg::ForwardBackward => vec![Pass::ForwardBackward],
                    PassArg::Both => vec![Pass::Forward, Pass::ForwardBackward],
                },
                seq_lens: seq_lens.clone(),
                batch: *batch,
                d: *d,
                heads: *heads,
                repeats: *repeats,
                warmup: *warmup,
                seed,
                ..BenchConfig::default()
            };
            cmd_bench(&cfg, out.as_deref(), *assert)
        }
        Command::Train { config, out_dir } => cmd_train(config, out_dir, cli.seed),
        Command::Sample { config } => cmd_sample(config, cli.seed),
        Command::Ablate { config, out } => cmd_ablate(config, out, cli.seed),
    }
}

fn cmd_check(seed: u64) -> Result<Outcome> {
    println!("property suites, seed {seed}");
    let results = check::run_all(seed)?;
    for r in &results {
        println!("{}", r.summary());
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Ok(Outcome::Failed(format!("{} suite failed: {}", r.name, r.detail))),
        None => Ok(Outcome::Ok),
    }
}

fn cmd_gradcheck(module: ModuleArg, seed: u64) -> Result<Outcome> {
    let modules = match module {
        ModuleArg::Pom => vec![GradModule::Pom],
        ModuleArg::ImageBlock => vec![GradModule::ImageBlock],
        ModuleArg::VideoBlock => vec![GradModule::VideoBlock],
        ModuleArg::All => GradModule::ALL.to_vec(),
    };
    let mut failure = None;
    for m in modules {
        let report = gradcheck::gradcheck(m, seed)?;
        println!("{}", report.summary());
        if !report.passed && failure.is_none() {
            failure = Some(format!(
                "{} gradient check failed at parameter {} (relative error {:.3e})",
                m, report.worst, report.max_rel_error
            ));
        }
    }
    Ok(failure.map_or(Outcome::Ok, Outcome::Failed))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

fn cmd_bench(cfg: &BenchConfig, out: Option<&Path>, assert: bool) -> Result<Outcome> {
    println!("{}", bench::CSV_HEADER);
    let records = bench::run_sweep(cfg, |r| println!("{}", r.csv_row()))?;
    if let Some(path) = out {
        let mut f = create(path)?;
        bench::write_csv(&records, &mut f).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))?;
    }
    let verdicts = bench::check_slopes(&records)?;
    for v in &verdicts {
        println!(
            "slope {:<24} {:.3} (r2 {:.4}, {} points) {}",
            v.label,
            v.fit.slope,
            v.fit.r2,
            v.fit.n_points,
            if v.pass { "ok" } else { "OUT OF RANGE" }
        );
    }
    for &pass in &cfg.passes {
        if cfg.mechanisms.len() == 2 {
            match bench::crossover(&records, pass) {
                Some(n) => println!("crossover {pass}: attention slower than PoM from n = {n}"),
                None => println!("crossover {pass}: none in sweep"),
            }
        }
    }
    if assert {
        if let Some(v) = verdicts.iter().find(|v| !v.pass) {
            return Ok(Outcome::Failed(format!("slope assertion failed for {}: {:.3}", v.label, v.fit.slope)));
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_train(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = create(&metrics_path)?;
    writeln!(metrics, "{}", diffusion::train::METRICS_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    let log_every = (cfg.steps / 20).max(1);
    let mut io_err = None;
    let outcome = diffusion::train(&cfg, |row| {
        if let Err(e) = writeln!(metrics, "{}", row.csv_row()) {
            io_err.get_or_insert(e);
        }
        if row.step % log_every == 0 || row.step == cfg.steps {
            println!("step {:>6}  loss {:.5}  lr {:.3e}", row.step, row.loss, row.lr);
        }
    });
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if let Some(e) = io_err {
        return Err(Error::io(&metrics_path, e));
    }
    let outcome = outcome?;
    let ck_path = out_dir.join("checkpoint.pom");
    outcome.checkpoint(&cfg).save(&ck_path)?;
    println!("wrote {} and {}", ck_path.display(), metrics_path.display());
    Ok(Outcome::Ok)
}

/// Which labels to condition on when sampling.
enum ClassChoice {
    Balanced,
    One(usize),
    Unconditional,
}

fn cmd_sample(config: &Path, seed: Option<u64>) -> Result<Outcome> {
    let mut kv = KeyValues::load(config)?;
    let checkpoint: PathBuf = kv
        .take("checkpoint")?
        .ok_or_else(|| Error::Config(format!("{}: missing `checkpoint`", config.display())))?;
    let out: PathBuf = kv
        .take("out")?
        .ok_or_else(|| Error::Config(format!("{}: missing `out`", config.display())))?;
    let settings = SampleSettings::read(&mut kv)?;
    let file_seed: Option<u64> = kv.take("seed")?;
    let class = match kv.take::<String>("class")?.as_deref() {
        None | Some("balanced") => ClassChoice::Balanced,
        Some("none") => ClassChoice::Unconditional,
        Some(v) => ClassChoice::One(
            v.parse()
                .map_err(|_| Error::Config(format!("class must be an index, balanced or none, got {v:?}")))?,
        ),
    };
    kv.finish()?;

    let (cfg, model) = diffusion::train::restore(&Checkpoint::load(&checkpoint)?)?;
    let labels: Option<Vec<usize>> = match class {
        ClassChoice::Balanced => Some((0..settings.samples).map(|i| i % cfg.classes).collect()),
        ClassChoice::One(c) if c < cfg.classes => Some(vec![c; settings.samples]),
        ClassChoice::One(c) => {
            return Err(Error::Config(format!("class {c} out of range for {} classes", cfg.classes)))
        }
        ClassChoice::Unconditional => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.or(file_seed).unwrap_or(0));
    let samples = diffusion::generate(
        &model,
        cfg.loss,
        labels.as_deref(),
        settings.samples,
        &settings.sampler(cfg.loss),
        &mut rng,
    )?;
    match cfg.dataset {
        DatasetKind::GaussianMixture2D => write_text(&out, &points_csv(samples.data(), labels.as_deref()))?,
        DatasetKind::Patterns8x8 => {
            let mut f = create(&out)?;
            f.write_all(&pgm_grid(samples.data(), 8, 8)).and_then(|_| f.flush()).map_err(|e| Error::io(&out, e))?;
        }
    }
    println!("wrote {} samples to {}", settings.samples, out.display());
    Ok(Outcome::Ok)
}

fn points_csv(data: &[f64], labels: Option<&[usize]>) -> String {
    let mut s = String::from("x,y,label\n");
    for (i, p) in data.chunks_exact(2).enumerate() {
        let label = labels.map_or(String::new(), |l| l[i].to_string());
        s.push_str(&format!("{:.17e},{:.17e},{label}\n", p[0], p[1]));
    }
    s
}

/// Binary PGM with the images tiled on a square grid and a 1 pixel gap;
/// values in `[-1, 1]` map linearly onto `[0, 255]`.
fn pgm_grid(data: &[f64], h: usize, w: usize) -> Vec<u8> {
    let count = data.len() / (h * w);
    let cols = (count as f64).sqrt().ceil().max(1.0) as usize;
    let rows = count.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut pixels = vec![0u8; gw * gh];
    for (k, img) in data.chunks_exact(h * w).enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let v = ((img[y * w + x].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                pixels[(oy + y) * gw + ox + x] = v;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

fn cmd_ablate(config: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg = ablation::AblationConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let rows = ablation::degree_ablation(&cfg, |msg| eprintln!("{msg}"))?;
    write_text(out, &ablation::ablation_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(Outcome::Ok)
}
