//! Single-image latency of a detector at 32-bit precision.

use std::fmt::Write as _;
use std::time::Instant;

use edgenav_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{count_params_flops, DetectorModel};
use crate::error::{Error, Result};

pub const MIN_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    pub flops: u64,
    pub input_size: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Inferences per second at the mean latency.
    pub throughput: f64,
    pub threads: usize,
    pub precision: String,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl BenchReport {
    pub fn from_latencies(model: &str, params: usize, flops: u64, input_size: usize, latencies_ms: Vec<f64>) -> Self {
        let mut sorted = latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mean_ms = latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64;
        BenchReport {
            model: model.to_string(),
            params,
            flops,
            input_size,
            mean_ms,
            p50_ms: percentile(&sorted, 50.0),
            p95_ms: percentile(&sorted, 95.0),
            throughput: 1000.0 / mean_ms,
            latencies_ms,
            threads: 1,
            precision: "f32".into(),
        }
    }

    pub const CSV_HEADER: &'static str = "model,params,flops,input_size,runs,mean_ms,p50_ms,p95_ms,throughput,threads,precision";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.3},{},{}",
            self.model,
            self.params,
            self.flops,
            self.input_size,
            self.latencies_ms.len(),
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.throughput,
            self.threads,
            self.precision
        )
    }

    /// Aligned text table of several reports.
    pub fn table(reports: &[BenchReport]) -> String {
        let mut s = format!(
            "{:<10} {:>10} {:>8} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
            "model", "params", "GFLOPs", "input", "mean ms", "p50 ms", "p95 ms", "img/s"
        );
        for r in reports {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>8.3} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                r.model,
                r.params,
                r.flops as f64 / 1e9,
                r.input_size,
                r.mean_ms,
                r.p50_ms,
                r.p95_ms,
                r.throughput
            );
        }
        s
    }
}

/// Times `runs` single-image forwards after `warmup` discarded ones.
/// Input generation is outside the timed region.
pub fn bench_latency(model: &DetectorModel, name: &str, runs: usize, warmup: usize) -> Result<BenchReport> {
    if warmup < MIN_WARMUP {
        return Err(Error::config(format!("warmup must be at least {MIN_WARMUP}, got {warmup}")));
    }
    if runs == 0 {
        return Err(Error::config("runs must be positive"));
    }
    let s = model.cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::new((0..3 * s * s).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), &[1, 3, s, s])?;
    for _ in 0..warmup {
        std::hint::black_box(model.infer(&x)?);
    }
    let mut lat = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = model.infer(&x)?;
        lat.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let (params, flops) = count_params_flops(model);
    Ok(BenchReport::from_latencies(name, params, flops, s, lat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_percentiles_equal_mean() {
        let r = BenchReport::from_latencies("m", 1, 2, 32, vec![4.0]);
        assert_eq!((r.p50_ms, r.p95_ms, r.mean_ms), (4.0, 4.0, 4.0));
        assert_eq!(r.throughput, 250.0);
    }

    #[test]
    fn percentiles_are_ordered() {
        let r = BenchReport::from_latencies("m", 1, 2, 32, (1..=100).rev().map(f64::from).collect());
        assert_eq!((r.p50_ms, r.p95_ms), (50.0, 95.0));
        assert!((r.throughput - 1000.0 / r.mean_ms).abs() < 1e-12);
    }
}
