use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};

use super::train::{evaluate_model, train, SampleSettings, TrainConfig};

pub const ABLATION_HEADER: &str = "degree,expand,pom_params,final_loss,energy_distance";

/// Degrees tried by default; with a budget of 12 they pair with expansion
/// factors 12, 6, 4, 3 and 2.
pub const DEFAULT_DEGREES: [usize; 5] = [1, 2, 3, 4, 6];
pub const DEFAULT_BUDGET: usize = 12;

/// Training losses averaged into the reported final loss.
pub const FINAL_LOSS_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Base run; `degree` and `expand` are overridden per row.
    pub train: TrainConfig,
    /// Fixed product `degree * expand`.
    pub budget: usize,
    pub degrees: Vec<usize>,
    pub eval: SampleSettings,
    /// Seed of the held-out reference set and the sampling noise.
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            budget: DEFAULT_BUDGET,
            degrees: DEFAULT_DEGREES.to_vec(),
            eval: SampleSettings::default(),
            eval_seed: 1,
        }
    }
}

impl AblationConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let train = TrainConfig::read(&mut kv)?;
        let eval = SampleSettings::read(&mut kv)?;
        let mut c = AblationConfig {
            train,
            eval,
            ..AblationConfig::default()
        };
        kv.take_into("budget", &mut c.budget)?;
        kv.take_into("eval_seed", &mut c.eval_seed)?;
        if let Some(list) = kv.take::<String>("degrees")? {
            c.degrees = list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("degrees: {v:?} is not a positive integer")))
                })
                .collect::<Result<_>>()?;
        }
        kv.finish()?;
        if c.budget == 0 || c.degrees.is_empty() || c.degrees.contains(&0) {
            return Err(Error::Config("budget and degrees must be positive".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    /// `(degree, expand)` for every degree dividing the budget, plus the
    /// degrees that had to be skipped.
    pub fn pairs(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        let (mut ok, mut skipped) = (Vec::new(), Vec::new());
        for &k in &self.degrees {
            if self.budget.is_multiple_of(k) {
                ok.push((k, self.budget / k));
            } else {
                skipped.push(k);
            }
        }
        (ok, skipped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub degree: usize,
    pub expand: usize,
    pub pom_params: usize,
    pub final_loss: f64,
    pub energy_distance: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9}",
            self.degree, self.expand, self.pom_params, self.final_loss, self.energy_distance
        )
    }
}

/// Train and score one model per accepted pair. `notice` receives one
/// message per skipped degree and one progress line per finished row.
pub fn degree_ablation(cfg: &AblationConfig, mut notice: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let (pairs, skipped) = cfg.pairs();
    for k in skipped {
        notice(&format!("skipping degree {k}: it does not divide the budget {}", cfg.budget));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (degree, expand) in pairs {
        let run = TrainConfig {
            degree,
            expand,
            ..cfg.train.clone()
        };
        let out = train(&run, |_| {})?;
        let tail = &out.metrics[out.metrics.len().saturating_sub(FINAL_LOSS_WINDOW)..];
        let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        let report = evaluate_model(&out.model, &run, &cfg.eval, cfg.eval_seed)?;
        let row = AblationRow {
            degree,
            expand,
            pom_params: out.model.pom_params(),
            final_loss,
            energy_distance: report.energy_distance,
        };
        notice(&format!("finished {}", row.csv_row()));
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
