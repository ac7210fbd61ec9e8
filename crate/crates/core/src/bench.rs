//! Encoder throughput measurement over memory-resident wedges.

use std::time::Instant;

use serde::Serialize;

use crate::data::LogWedge;
use crate::error::{Error, Result};
use crate::model::Bcae;
use crate::parallel::map_ordered;
use crate::tensor::Precision;

/// Fewer timed iterations than this are refused.
pub const MIN_TIMED_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub precision: Precision,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub threads: usize,
    /// Also time decoding of every code.
    pub full_pipeline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub model_id: String,
    pub precision: Precision,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub threads: usize,
    pub full_pipeline: bool,
    pub wedges_per_second_mean: f64,
    pub wedges_per_second_std: f64,
    pub encoder_parameters: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "model_id,precision,batch_size,warmup_iters,timed_iters,threads,full_pipeline,wedges_per_second_mean,wedges_per_second_std,encoder_parameters";

    pub fn csv_row(&self) -> String {
        let precision = match self.precision {
            Precision::Full32 => "full32",
            Precision::Half16 => "half16",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model_id,
            precision,
            self.batch_size,
            self.warmup_iters,
            self.timed_iters,
            self.threads,
            self.full_pipeline,
            self.wedges_per_second_mean,
            self.wedges_per_second_std,
            self.encoder_parameters
        )
    }
}

/// Time `timed_iters` batches of encoder forward passes after
/// `warmup_iters` untimed ones. Batches cycle through `wedges`, which must
/// already be padded; no file I/O happens inside the timed region.
pub fn run_bench(model: &Bcae, wedges: &[LogWedge], options: &BenchOptions) -> Result<BenchReport> {
    if options.timed_iters < MIN_TIMED_ITERS {
        return Err(Error::config(format!(
            "at least {MIN_TIMED_ITERS} timed iterations are required, got {}",
            options.timed_iters
        )));
    }
    if options.batch_size == 0 || wedges.is_empty() {
        return Err(Error::config("bench needs a positive batch size and at least one wedge"));
    }
    let encoder = model.encoder.cast(options.precision);
    let batch: Vec<&LogWedge> = wedges.iter().cycle().take(options.batch_size).collect();
    let run = || -> Result<()> {
        for r in map_ordered(&batch, options.threads, |w| {
            let code = model.encode_with(&encoder, w, options.precision)?;
            if options.full_pipeline {
                model.decode(&code)?;
            }
            Ok::<_, Error>(())
        }) {
            r?;
        }
        Ok(())
    };
    for _ in 0..options.warmup_iters {
        run()?;
    }
    let mut rates = Vec::with_capacity(options.timed_iters);
    for _ in 0..options.timed_iters {
        let start = Instant::now();
        run()?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(options.batch_size as f64 / secs);
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BenchReport {
        model_id: model.spec.model_id(),
        precision: options.precision,
        batch_size: options.batch_size,
        warmup_iters: options.warmup_iters,
        timed_iters: options.timed_iters,
        threads: options.threads,
        full_pipeline: options.full_pipeline,
        wedges_per_second_mean: mean,
        wedges_per_second_std: var.sqrt(),
        encoder_parameters: model.encoder_parameters(),
    })
}
