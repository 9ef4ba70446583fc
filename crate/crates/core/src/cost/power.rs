//! Power-log ingestion and measured efficiency (FPS, J/img, GFLOP/s).
//!
//! Logs are CSV with header `timestamp_s,power_w`, one sample per row,
//! nominally every 100 ms.

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{CostError, CostReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_s: f64,
    pub power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerLog {
    samples: Vec<PowerSample>,
}

impl PowerLog {
    /// Checks timestamps strictly increase and wattages are finite and >= 0.
    pub fn new(samples: Vec<PowerSample>) -> Result<Self, CostError> {
        for (i, s) in samples.iter().enumerate() {
            if !s.power_w.is_finite() || s.power_w < 0.0 || !s.timestamp_s.is_finite() {
                return Err(CostError::BadLog(format!("sample {i}: invalid value {s:?}")));
            }
            if i > 0 && s.timestamp_s <= samples[i - 1].timestamp_s {
                return Err(CostError::BadLog(format!("sample {i}: timestamp {} not increasing", s.timestamp_s)));
            }
        }
        Ok(PowerLog { samples })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, CostError> {
        Self::new(pairs.iter().map(|&(timestamp_s, power_w)| PowerSample { timestamp_s, power_w }).collect())
    }

    /// A constant-wattage log sampled every 100 ms.
    pub fn constant(power_w: f64, samples: usize) -> Result<Self, CostError> {
        Self::new((0..samples).map(|i| PowerSample { timestamp_s: i as f64 * 0.1, power_w }).collect())
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| CostError::BadLog(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["timestamp_s", "power_w"] {
            return Err(CostError::BadLog(format!("expected header timestamp_s,power_w, got {headers:?}")));
        }
        let samples = rdr
            .deserialize::<PowerSample>()
            .map(|r| r.map_err(|e| CostError::BadLog(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(samples)
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Arithmetic mean of the sampled wattages.
pub fn average_power(log: &PowerLog) -> Result<f64, CostError> {
    if log.is_empty() {
        return Err(CostError::EmptyLog);
    }
    Ok(log.samples.iter().map(|s| s.power_w).sum::<f64>() / log.samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub images: u64,
    pub wall_seconds: f64,
    pub flops_per_image: f64,
    pub fps: f64,
    pub avg_power_w: f64,
    pub joules_per_image: f64,
    pub gflops_per_second: f64,
}

/// FPS, J/img (`avg_power / fps`) and GFLOP/s from a per-image FLOP count.
pub fn efficiency_from_flops(flops_per_image: f64, images: u64, wall_seconds: f64, log: &PowerLog) -> Result<EfficiencyReport, CostError> {
    if images == 0 {
        return Err(CostError::NonPositive { what: "images" });
    }
    if wall_seconds.is_nan() || wall_seconds <= 0.0 {
        return Err(CostError::NonPositiveTime("wall_seconds"));
    }
    let avg_power_w = average_power(log)?;
    let fps = images as f64 / wall_seconds;
    let seconds_per_image = wall_seconds / images as f64;
    Ok(EfficiencyReport {
        images,
        wall_seconds,
        flops_per_image,
        fps,
        avg_power_w,
        joules_per_image: avg_power_w / fps,
        gflops_per_second: flops_per_image / seconds_per_image / 1e9,
    })
}

pub fn efficiency_metrics(report: &CostReport, images: u64, wall_seconds: f64, log: &PowerLog) -> Result<EfficiencyReport, CostError> {
    efficiency_from_flops(report.flops_per_image(), images, wall_seconds, log)
}
