use std::time::Instant;

use serde::Serialize;

use crate::data_io::Image;
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::memory::{difference_all, MemoryPool};
use crate::network::SegModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over `times` (seconds). Empty input gives
    /// all zeros.
    pub fn from_samples(times: &[f64]) -> Self {
        if times.is_empty() {
            return LatencyStats {
                samples: 0,
                mean: 0.0,
                p50: 0.0,
                p95: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        let mut v = times.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats {
            samples: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            min: v[0],
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardwareInfo {
    pub cpu: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_owned())
            })
            .unwrap_or_else(|| "unknown".into());
        HardwareInfo {
            cpu,
            threads: rayon::current_num_threads(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub memory_size: usize,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub image_size: usize,
    pub warmup: usize,
    pub latency: LatencyStats,
    /// Raw per-image timings in seconds.
    pub timings: Vec<f64>,
    pub hardware: HardwareInfo,
    pub memory_scaling: Vec<ScalingPoint>,
}

/// End-to-end single-image forward latency. Images are cycled; `reps`
/// timed runs follow `warmup` untimed ones.
pub fn benchmark(model: &SegModel, images: &[Image], warmup: usize, reps: usize) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(Error::NotEnoughItems { needed: 1, got: 0 });
    }
    for i in 0..warmup {
        model.predict(&images[i % images.len()])?;
    }
    let mut timings = Vec::with_capacity(reps);
    for i in 0..reps {
        let img = &images[i % images.len()];
        let t0 = Instant::now();
        model.predict(img)?;
        timings.push(t0.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        image_size: model.config().image_size,
        warmup,
        latency: LatencyStats::from_samples(&timings),
        timings,
        hardware: HardwareInfo::detect(),
        memory_scaling: Vec::new(),
    })
}

/// Mean time of `difference_all` against pools of each size in `sizes`.
/// Pools are built from `image` with slight per-item offsets so the work is
/// realistic without needing many images.
pub fn memory_scaling(enc: &Encoder, image: &Image, sizes: &[usize], reps: usize) -> Result<Vec<ScalingPoint>> {
    let base = enc.extract_pyramid(&image.to_tensor())?;
    let max = sizes.iter().copied().max().unwrap_or(0);
    let items: Vec<FeaturePyramid> = (0..max)
        .map(|i| FeaturePyramid {
            levels: base.levels.each_ref().map(|t| t.map(|v| v + i as f64 * 1e-3)),
        })
        .collect();
    let mut out = Vec::new();
    for &n in sizes {
        let pool = MemoryPool::new(items[..n].to_vec(), (0..n).map(|i| i.to_string()).collect(), 0)?;
        let t0 = Instant::now();
        for _ in 0..reps.max(1) {
            std::hint::black_box(difference_all(&pool, &base)?);
        }
        out.push(ScalingPoint {
            memory_size: n,
            mean_seconds: t0.elapsed().as_secs_f64() / reps.max(1) as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let s = LatencyStats::from_samples(&[0.3, 0.1, 0.2, 0.4]);
        assert_eq!(s.samples, 4);
        assert_eq!(s.min, 0.1);
        assert_eq!(s.p50, 0.2);
        assert_eq!(s.p95, 0.4);
        assert!((s.mean - 0.25).abs() < 1e-12);
        assert!(s.mean >= s.min && s.min >= 0.0);
    }
}
