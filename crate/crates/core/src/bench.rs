//! Sequence-length scaling benchmarks for the mixer and the attention
//! baseline, with log-log slope fits.
//!
//! Token counts stand in for image resolutions: an `r x r` image cut into
//! `p x p` patches gives `(r / p)^2` tokens.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{mha_forward_on, MHAParams};
use crate::error::{Error, Result};
use crate::pom::{pom_forward_on, MaskSpec, PoMParams};
use crate::tensor::{Tape, Tensor};

pub const CSV_HEADER: &str = "mechanism,pass,seq_len,batch,d,repeats,mean_seconds,std_seconds";

/// Timed calls must last at least this many timer ticks on average.
pub const MIN_TICKS: f64 = 50.0;

/// Accepted PoM forward+backward slope window.
pub const POM_SLOPE_RANGE: (f64, f64) = (0.8, 1.3);
/// Minimum MHA forward+backward slope.
pub const MHA_MIN_SLOPE: f64 = 1.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Pom,
    Mha,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Pom => "pom",
            Mechanism::Mha => "mha",
        })
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward",
            Pass::ForwardBackward => "forward_backward",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pom" => Ok(Mechanism::Pom),
            "mha" => Ok(Mechanism::Mha),
            other => Err(Error::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

impl FromStr for Pass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Pass::Forward),
            "forward_backward" => Ok(Pass::ForwardBackward),
            other => Err(Error::Config(format!("unknown pass {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mechanisms: Vec<Mechanism>,
    pub passes: Vec<Pass>,
    pub seq_lens: Vec<usize>,
    pub batch: usize,
    pub d: usize,
    pub heads: usize,
    pub degree: usize,
    pub expand: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mechanisms: vec![Mechanism::Pom, Mechanism::Mha],
            passes: vec![Pass::ForwardBackward],
            seq_lens: vec![256, 512, 1024, 2048, 4096, 8192],
            batch: 4,
            d: 384,
            heads: 6,
            degree: 2,
            expand: 2,
            repeats: 100,
            warmup: 3,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_lens.len() < 4 {
            return Err(Error::Config("at least 4 sequence lengths are needed for a slope fit".into()));
        }
        if self.seq_lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sequence lengths must be strictly ascending".into()));
        }
        if self.repeats < 10 || self.warmup < 3 {
            return Err(Error::Config("need at least 3 warmup and 10 measured repeats".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d {} is not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub pass: Pass,
    pub seq_len: usize,
    pub batch: usize,
    pub d: usize,
    pub repeats: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.9},{:.9}",
            self.mechanism,
            self.pass,
            self.seq_len,
            self.batch,
            self.d,
            self.repeats,
            self.mean_seconds,
            self.std_seconds
        )
    }
}

/// Least-squares line through `(ln seq_len, ln mean_seconds)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 4 {
        return Err(Error::Config(format!("slope fit needs at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| *x <= 0.0 || *y <= 0.0) {
        return Err(Error::Config("slope fit needs positive coordinates".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        n_points: logs.len(),
    })
}

/// Smallest observable non-zero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

enum Workload {
    Pom(PoMParams<f32>),
    Mha(MHAParams<f32>),
}

impl Workload {
    fn run(&self, x: &Tensor<f32>, pass: Pass) -> Result<()> {
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(x.clone());
        let out = match self {
            Workload::Pom(p) => {
                let vars = match pass {
                    Pass::Forward => p.bind_frozen(&mut tape),
                    Pass::ForwardBackward => p.bind(&mut tape),
                };
                pom_forward_on(&mut tape, input, None, &vars, &MaskSpec::None)?
            }
            Workload::Mha(p) => {
                let vars = match pass {
                    Pass::Forward => p.bind_frozen(&mut tape),
                    Pass::ForwardBackward => p.bind(&mut tape),
                };
                mha_forward_on(&mut tape, input, None, &vars, &MaskSpec::None)?
            }
        };
        if pass == Pass::ForwardBackward {
            let loss = tape.mean_all(out)?;
            std::hint::black_box(tape.backward(loss)?);
        }
        std::hint::black_box(tape.value(out));
        Ok(())
    }
}

/// Time one (mechanism, pass, length) case: `warmup` untimed calls, then
/// `repeats` timed calls on the same synthetic batch.
pub fn run_case(cfg: &BenchConfig, mechanism: Mechanism, pass: Pass, seq_len: usize, tick: Duration) -> Result<BenchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (seq_len as u64) << 8);
    let workload = match mechanism {
        Mechanism::Pom => Workload::Pom(PoMParams::init(cfg.d, cfg.degree, cfg.expand, true, 0.02, &mut rng)?),
        Mechanism::Mha => Workload::Mha(MHAParams::init(cfg.d, cfg.heads, 0.02, &mut rng)?),
    };
    let x = Tensor::<f32>::randn(vec![cfg.batch, seq_len, cfg.d], 1.0, &mut rng);

    for _ in 0..cfg.warmup {
        workload.run(&x, pass)?;
    }
    let mut repeats = cfg.repeats;
    loop {
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            workload.run(&x, pass)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if mean < MIN_TICKS * tick.as_secs_f64() && repeats < 1 << 20 {
            repeats *= 2;
            continue;
        }
        return Ok(BenchRecord {
            mechanism,
            pass,
            seq_len,
            batch: cfg.batch,
            d: cfg.d,
            repeats,
            mean_seconds: mean.max(f64::MIN_POSITIVE),
            std_seconds: var.sqrt(),
        });
    }
}

/// Run the whole sweep, calling `progress` after every record.
pub fn run_sweep(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let tick = timer_resolution();
    let mut records = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &pass in &cfg.passes {
            for &n in &cfg.seq_lens {
                let rec = run_case(cfg, mechanism, pass, n, tick)?;
                progress(&rec);
                records.push(rec);
            }
        }
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn fit_records(records: &[BenchRecord], mechanism: Mechanism, pass: Pass) -> Result<SlopeFit> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mechanism == mechanism && r.pass == pass)
        .map(|r| (r.seq_len as f64, r.mean_seconds))
        .collect();
    fit_loglog(&points)
}

/// First sequence length where attention is slower than the mixer.
pub fn crossover(records: &[BenchRecord], pass: Pass) -> Option<usize> {
    let mut lens: Vec<usize> = records.iter().map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    let time = |m: Mechanism, n: usize| {
        records
            .iter()
            .find(|r| r.mechanism == m && r.pass == pass && r.seq_len == n)
            .map(|r| r.mean_seconds)
    };
    lens.into_iter().find(|&n| match (time(Mechanism::Pom, n), time(Mechanism::Mha, n)) {
        (Some(p), Some(m)) => m > p,
        _ => false,
    })
}

/// Slope contract verdicts, one line each.
#[derive(Clone, Debug)]
pub struct SlopeVerdict {
    pub label: String,
    pub fit: SlopeFit,
    pub pass: bool,
}

pub fn check_slopes(records: &[BenchRecord]) -> Result<Vec<SlopeVerdict>> {
    let mut verdicts = Vec::new();
    let mut passes: Vec<Pass> = records.iter().map(|r| r.pass).collect();
    passes.dedup();
    for pass in passes {
        for mechanism in [Mechanism::Pom, Mechanism::Mha] {
            if !records.iter().any(|r| r.mechanism == mechanism && r.pass == pass) {
                continue;
            }
            let fit = fit_records(records, mechanism, pass)?;
            let ok = match mechanism {
                Mechanism::Pom => fit.slope >= POM_SLOPE_RANGE.0 && fit.slope <= POM_SLOPE_RANGE.1,
                Mechanism::Mha => fit.slope >= MHA_MIN_SLOPE,
            };
            verdicts.push(SlopeVerdict {
                label: format!("{mechanism} {pass}"),
                fit,
                pass: ok,
            });
        }
    }
    Ok(verdicts)
}
