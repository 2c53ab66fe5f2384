//! Wall-time comparison of the direct pair-wise PDC against its rewrite into
//! vanilla convolution. Output equality is asserted before any timing.

use std::time::Instant;

use pdcvit_core::pdc::{PairKind, PdcKernel, PixelPairSet};
use pdcvit_core::rng::{seeded, uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BenchCase {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl BenchCase {
    /// Parses "CxHxW", e.g. "3x64x64".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::Usage(format!("bad size '{s}', expected CxHxW")));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Usage(format!("bad size '{s}', expected CxHxW")))?;
        if nums.contains(&0) {
            return Err(Error::Usage(format!("bad size '{s}': zero dimension")));
        }
        Ok(BenchCase { channels: nums[0], height: nums[1], width: nums[2] })
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: &'static str,
    pub case: BenchCase,
    pub direct_ms: f64,
    pub converted_ms: f64,
    pub speedup: f64,
    pub max_diff: f64,
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Times both execution paths over the case grid; errors if any case
/// violates the 1e-10 equivalence precondition.
pub fn run(cases: &[BenchCase], trials: usize, out_channels: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for kind in [PairKind::Angular, PairKind::Radial] {
        let pair_set = PixelPairSet::for_kind(kind);
        let padding = (pair_set.kernel_size() - 1) / 2;
        for case in cases {
            let mut rng = seeded(seed ^ (kind as u64) << 8);
            let input = uniform(&[case.channels, case.height, case.width], -1.0, 1.0, &mut rng);
            let weights = uniform(&[out_channels, case.channels, 8], -1.0, 1.0, &mut rng);
            let kernel = PdcKernel::new(pair_set.clone(), weights)?;

            let direct = kernel.forward_direct(&input, 1, padding)?;
            let converted = kernel.forward_converted(&input, 1, padding)?;
            let max_diff = direct.max_abs_diff(&converted)?;
            if max_diff >= 1e-10 {
                return Err(Error::Contract(format!(
                    "equivalence precondition violated: {max_diff:.3e} on {case:?} {kind:?}"
                )));
            }

            let mut direct_samples = Vec::with_capacity(trials);
            let mut converted_samples = Vec::with_capacity(trials);
            for _ in 0..trials {
                let t0 = Instant::now();
                let _ = kernel.forward_direct(&input, 1, padding)?;
                direct_samples.push(t0.elapsed().as_secs_f64() * 1e3);
                let t1 = Instant::now();
                let _ = kernel.forward_converted(&input, 1, padding)?;
                converted_samples.push(t1.elapsed().as_secs_f64() * 1e3);
            }
            let direct_ms = median_ms(&mut direct_samples);
            let converted_ms = median_ms(&mut converted_samples);
            rows.push(BenchRow {
                variant: kind.name(),
                case: *case,
                direct_ms,
                converted_ms,
                speedup: direct_ms / converted_ms,
                max_diff,
            });
        }
    }
    Ok(rows)
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "variant        size  direct_ms  converted_ms  speedup   max_diff\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<7} {:>4}x{:<3}x{:<3} {:>9.3} {:>13.3} {:>8.2} {:>10.2e}\n",
            r.variant,
            r.case.channels,
            r.case.height,
            r.case.width,
            r.direct_ms,
            r.converted_ms,
            r.speedup,
            r.max_diff
        ));
    }
    out
}
