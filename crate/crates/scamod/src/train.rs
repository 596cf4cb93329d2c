//! Joint training of a modular network with epoch-end guessing-entropy
//! evaluation on the weight-shared truncated view.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::forge::TraceSet;
use crate::network::ModularNetwork;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::sca::{GeStopper, GeVector, LeakageModel, StopPolicy};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub model: LeakageModel,
    /// When set, training halts once the GE convergence point stops
    /// improving on the held-out split.
    pub stop: Option<StopPolicy>,
    /// Shuffled experiments per GE evaluation.
    pub n_experiments: usize,
    /// Trailing fraction of the profiling set held out for GE evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            model: LeakageModel::identity(0),
            stop: Some(StopPolicy::default()),
            n_experiments: 40,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean losses; `total = gamma * ce + omega * mse` holds per batch
    /// and therefore for the means.
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub ge: GeVector,
    pub converged_at: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch index at which the stopper fired, if it did.
    pub stopped_epoch: Option<usize>,
    /// Epoch with the best (smallest) convergence trace count.
    pub best_epoch: Option<usize>,
}

impl TrainingReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// `epoch,total,ce,mse,converged_at` rows.
    pub fn write_losses_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,total,ce,mse,converged_at")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch,
                e.total,
                e.ce,
                e.mse,
                e.converged_at.map_or(String::new(), |t| t.to_string())
            )?;
        }
        Ok(())
    }

    /// Long-format GE curves: `epoch,traces,mean_rank`.
    pub fn write_ge_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,traces,mean_rank")?;
        for e in &self.epochs {
            for (i, r) in e.ge.ranks.iter().enumerate() {
                writeln!(w, "{},{},{}", e.epoch, i + 1, r)?;
            }
        }
        Ok(())
    }
}

/// Trains `net` on the profiling set: per epoch, shuffle, minibatch
/// forward/backward on the combined loss, optimizer step; at epoch end the
/// truncated view (never the full network) is evaluated on the held-out
/// split, and the stopper may halt training.
pub fn fit(net: &mut ModularNetwork, profiling: &TraceSet, config: &TrainConfig) -> Result<TrainingReport> {
    if profiling.n_traces == 0 {
        return Err(Error::Data("profiling set is empty".to_string()));
    }
    if profiling.trace_len != net.encoder.input_len {
        return Err(Error::dimension(format!(
            "network expects {}-sample traces, set has {}",
            net.encoder.input_len, profiling.trace_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".to_string()));
    }
    let mut report = TrainingReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }

    let (train, holdout) = profiling.split(1.0 - config.holdout_fraction)?;
    let labels = train.labels(&config.model)?;
    let mut adam = Adam::new(config.optimizer);
    let mut stopper = GeStopper::new(
        config.stop.unwrap_or_default(),
        config.n_experiments,
        rng::derive_seed(config.seed, 0x6745),
    );

    let mut indices: Vec<usize> = (0..train.n_traces).collect();
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng::child(config.seed, epoch as u64));
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // batch norm cannot standardize a single trace
                continue;
            }
            let batch = train.batch(chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = net.train_step(&batch, &batch_labels, &mut adam)?;
            sums.0 += loss.total;
            sums.1 += loss.ce;
            sums.2 += loss.mse;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Data(
                "training split yields no usable batches".to_string(),
            ));
        }

        let (ge, decision) = stopper.observe(epoch, &net.truncated(), &holdout, &config.model)?;
        report.epochs.push(EpochRecord {
            epoch,
            total: sums.0 / batches as f64,
            ce: sums.1 / batches as f64,
            mse: sums.2 / batches as f64,
            converged_at: decision.converged_at,
            ge,
        });
        if config.stop.is_some() && decision.stop {
            report.stopped_epoch = Some(epoch);
            break;
        }
    }
    report.best_epoch = stopper.best_epoch();
    Ok(report)
}
