//! Stage timings of the post-processing chain, in seconds per 1000 frames.
//!
//! Workload generation (simulation) is excluded from every timed region.
//! Network inference is not part of this chain, so the numbers are not
//! comparable with end-to-end timings that include it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageShape, LabelMap};
use crate::metrics::{evaluate, Annotated, EvalConfig};
use crate::segmenter::segment_stack;
use crate::simulator::{simulate, SimConfig};
use crate::tracker::{drop_small_regions, track_stack, PipelineConfig};
use crate::truth_maps::{truth_maps, CategoryMap, DisplacementMap, DistanceMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub frames: usize,
    pub shape: ImageShape,
    pub seed: u64,
    pub repetitions: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 1000, shape: ImageShape::new(256, 32), seed: 1, repetitions: 3, threads: 1 }
    }
}

pub const STAGES: [&str; 4] = ["edm", "watershed", "tracking", "evaluate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub median_seconds: f64,
    pub seconds_per_1000_frames: f64,
    pub samples: Vec<f64>,
}

impl StageTiming {
    fn new(samples: Vec<f64>, frames: usize) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let median_seconds = sorted[sorted.len() / 2];
        let scale = if frames == 0 { 0.0 } else { 1000.0 / frames as f64 };
        Self { median_seconds, seconds_per_1000_frames: median_seconds * scale, samples }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub shape: ImageShape,
    pub repetitions: usize,
    pub threads: usize,
    pub stages: BTreeMap<String, StageTiming>,
    /// Median time of all stages run back to back.
    pub end_to_end: StageTiming,
    pub machine: String,
}

impl BenchReport {
    pub fn stage_sum_per_1000(&self) -> f64 {
        self.stages.values().map(|s| s.seconds_per_1000_frames).sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>14} {:>18}", "stage", "median (s)", "s / 1000 frames");
        for name in STAGES {
            let t = &self.stages[name];
            let _ = writeln!(s, "{:<12} {:>14.4} {:>18.4}", name, t.median_seconds, t.seconds_per_1000_frames);
        }
        let e = &self.end_to_end;
        let _ = writeln!(s, "{:<12} {:>14.4} {:>18.4}", "end-to-end", e.median_seconds, e.seconds_per_1000_frames);
        let _ = writeln!(s, "{} frames of {}x{}, {} thread(s), {}", self.frames, self.shape.height, self.shape.width, self.threads, self.machine);
        s
    }
}

pub fn machine_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{} ({cores} cores)", std::env::consts::OS, std::env::consts::ARCH)
}

struct Workload {
    gt_labels: Vec<LabelMap>,
    gt: crate::geometry::Lineage,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

struct StageOutputs {
    edms: Vec<DistanceMap>,
    displacements: Vec<DisplacementMap>,
    categories: Vec<CategoryMap>,
}

fn one_pass(w: &Workload, pipeline: &PipelineConfig, eval: &EvalConfig) -> Result<[f64; 4]> {
    let (maps, t_edm) = timed(|| {
        let maps = truth_maps(&w.gt_labels, &w.gt)?;
        let mut out = StageOutputs { edms: Vec::new(), displacements: Vec::new(), categories: Vec::new() };
        for m in maps {
            out.edms.push(m.edm);
            out.displacements.push(m.displacement);
            out.categories.push(m.categories);
        }
        Ok(out)
    })?;
    let (labels, t_ws) = timed(|| {
        let raw = segment_stack(&maps.edms, &pipeline.watershed)?;
        Ok(raw.iter().map(|l| drop_small_regions(l, pipeline.min_region_pixels)).collect::<Vec<_>>())
    })?;
    let ((_, lineage), t_track) = timed(|| track_stack(&labels, &maps.displacements, Some(&maps.categories)))?;
    let (report, t_eval) = timed(|| {
        evaluate(
            Annotated { labels: &w.gt_labels, lineage: &w.gt },
            Annotated { labels: &labels, lineage: &lineage },
            eval,
        )
    })?;
    std::hint::black_box(report);
    Ok([t_edm, t_ws, t_track, t_eval])
}

/// Median-of-repetitions timings on a fixed-seed simulated workload.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions < 3 {
        return Err(Error::InvalidConfig("at least 3 repetitions are required".into()));
    }
    let sim = SimConfig { shape: cfg.shape, frames: cfg.frames, seed: cfg.seed, render_noise: None, ..SimConfig::default() };
    let seq = simulate(&sim)?;
    let workload = Workload { gt_labels: seq.labels, gt: seq.lineage };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let pipeline = PipelineConfig::default();
    let eval = EvalConfig::default();
    let mut samples = vec![Vec::new(); STAGES.len()];
    let mut totals = Vec::new();
    pool.install(|| -> Result<()> {
        for _ in 0..cfg.repetitions {
            let start = Instant::now();
            let t = one_pass(&workload, &pipeline, &eval)?;
            totals.push(start.elapsed().as_secs_f64());
            for (s, v) in samples.iter_mut().zip(t) {
                s.push(v);
            }
        }
        Ok(())
    })?;
    let stages = STAGES
        .iter()
        .zip(samples)
        .map(|(name, s)| (name.to_string(), StageTiming::new(s, cfg.frames)))
        .collect();
    Ok(BenchReport {
        frames: cfg.frames,
        shape: cfg.shape,
        repetitions: cfg.repetitions,
        threads: pool.current_num_threads(),
        stages,
        end_to_end: StageTiming::new(totals, cfg.frames),
        machine: machine_descriptor(),
    })
}
