use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames run before the clock starts.
pub const WARMUP_FRAMES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub worker_threads: usize,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        HardwareInfo {
            cpu,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            worker_threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub fps: f64,
    pub frames: usize,
    pub seconds: f64,
    pub warmup: usize,
    pub hardware: HardwareInfo,
}

pub fn fps_from(frames: usize, seconds: f64) -> f64 {
    if seconds > 0.0 {
        frames as f64 / seconds
    } else {
        f64::INFINITY
    }
}

/// Times `f` over every input once after `warmup` untimed calls, which
/// cycle through the inputs.
pub fn measure_fps<I, F, R>(inputs: &[I], warmup: usize, mut f: F) -> Result<Throughput>
where
    F: FnMut(&I) -> Result<R>,
{
    if inputs.is_empty() {
        return Err(Error::Parameter("timing needs at least one image".into()));
    }
    for i in 0..warmup {
        std::hint::black_box(f(&inputs[i % inputs.len()])?);
    }
    let start = Instant::now();
    for x in inputs {
        std::hint::black_box(f(x)?);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Throughput {
        fps: fps_from(inputs.len(), seconds),
        frames: inputs.len(),
        seconds,
        warmup,
        hardware: HardwareInfo::detect(),
    })
}
