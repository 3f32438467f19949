//! Approximation quality of binarization schemes on Gaussian tensors.

use std::fmt;
use std::str::FromStr;

use hbnn_core::binarize::{hetero_binarize, residual_binarize};
use hbnn_core::bitalloc::{dist_from_avg, grid_distributions, mask_from_order, sort_indices, BitDistribution};
use hbnn_core::{DistPolicy, SortHeuristic, Tensor};
use serde::Serialize;

/// How the bench picks a bit distribution for each average bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchPolicy {
    Fixed(DistPolicy),
    /// Best distance over every distribution on a grid of fractions (step
    /// `step`) over bitwidths `1..=max_bits`, chosen per heuristic.
    GridBest { max_bits: u8, step: f64 },
}

impl fmt::Display for BenchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchPolicy::Fixed(p) => write!(f, "{p}"),
            BenchPolicy::GridBest { max_bits, step } => write!(f, "grid-best({max_bits},{step})"),
        }
    }
}

impl FromStr for BenchPolicy {
    type Err = hbnn_core::Error;

    /// `grid-best`, `grid-best(3,0.05)`, or any distribution policy.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "grid-best" {
            return Ok(BenchPolicy::GridBest { max_bits: 3, step: 0.05 });
        }
        if let Some(args) = s.strip_prefix("grid-best(").and_then(|r| r.strip_suffix(')')) {
            let bad = || hbnn_core::Error::InvalidDistribution(format!("bad grid policy '{s}'"));
            let (b, st) = args.split_once(',').ok_or_else(bad)?;
            let max_bits: u8 = b.trim().parse().map_err(|_| bad())?;
            let step: f64 = st.trim().parse().map_err(|_| bad())?;
            if !(1..=hbnn_core::MAX_BITS).contains(&max_bits) || !(step > 0.0 && step <= 1.0) {
                return Err(bad());
            }
            return Ok(BenchPolicy::GridBest { max_bits, step });
        }
        s.parse().map(BenchPolicy::Fixed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    pub seeds: Vec<u64>,
    pub avg_bits: Vec<f64>,
    pub heuristics: Vec<SortHeuristic>,
    pub policy: BenchPolicy,
    /// Integer bitwidths reported as homogeneous reference points.
    pub homogeneous: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub heuristic: String,
    pub avg_bits: f64,
    pub distribution: String,
    pub seed: u64,
    pub normalized_distance: f64,
}

fn distance_for(t: &Tensor, order: &[usize], dist: &BitDistribution) -> hbnn_core::Result<f64> {
    let mask = mask_from_order(t.shape().to_vec(), order, dist)?;
    t.normalized_distance(&hetero_binarize(t, &mask)?.reconstruct())
}

/// Runs the bench; `random` heuristics are reseeded with each tensor seed
/// so every seed draws its own permutation.
pub fn run(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> hbnn_core::Result<Vec<BenchRow>> {
    if cfg.n == 0 {
        return Err(hbnn_core::Error::EmptyInput("tensor size"));
    }
    let mut rows = Vec::new();
    let mut emit = |row: BenchRow, rows: &mut Vec<BenchRow>| {
        on_row(&row);
        rows.push(row);
    };
    for &seed in &cfg.seeds {
        let t = Tensor::gaussian(vec![cfg.n], seed)?;
        for &bits in &cfg.homogeneous {
            let d = t.normalized_distance(&residual_binarize(&t, bits)?.reconstruct())?;
            let row = BenchRow {
                heuristic: "homogeneous".into(),
                avg_bits: bits as f64,
                distribution: format!("{bits}:1"),
                seed,
                normalized_distance: d,
            };
            emit(row, &mut rows);
        }
        for &h in &cfg.heuristics {
            let h = match h {
                SortHeuristic::Random { .. } => SortHeuristic::Random { seed },
                other => other,
            };
            let order = sort_indices(&t, h)?;
            for &avg in &cfg.avg_bits {
                let candidates = match &cfg.policy {
                    BenchPolicy::Fixed(p) => vec![dist_from_avg(avg, p)?],
                    BenchPolicy::GridBest { max_bits, step } => {
                        let widths: Vec<u8> = (1..=*max_bits).collect();
                        let grid = grid_distributions(avg, &widths, *step)?;
                        if grid.is_empty() {
                            return Err(hbnn_core::Error::InvalidDistribution(format!(
                                "no grid distribution averages {avg}"
                            )));
                        }
                        grid
                    }
                };
                let mut best: Option<(f64, &BitDistribution)> = None;
                for dist in &candidates {
                    let d = distance_for(&t, &order, dist)?;
                    if best.map_or(true, |(b, _)| d < b) {
                        best = Some((d, dist));
                    }
                }
                let (d, dist) = best.expect("at least one candidate");
                let row = BenchRow {
                    heuristic: h.short_name().to_string(),
                    avg_bits: avg,
                    distribution: dist.label(),
                    seed,
                    normalized_distance: d,
                };
                emit(row, &mut rows);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parsing() {
        assert_eq!("grid-best".parse::<BenchPolicy>().unwrap(), BenchPolicy::GridBest { max_bits: 3, step: 0.05 });
        assert_eq!(
            "grid-best(4, 0.1)".parse::<BenchPolicy>().unwrap(),
            BenchPolicy::GridBest { max_bits: 4, step: 0.1 }
        );
        assert_eq!("adjacent".parse::<BenchPolicy>().unwrap(), BenchPolicy::Fixed(DistPolicy::Adjacent));
        assert!("grid-best(0,0.1)".parse::<BenchPolicy>().is_err());
        assert!("sideways".parse::<BenchPolicy>().is_err());
    }

    #[test]
    fn small_bench_rows() {
        let cfg = BenchConfig {
            n: 2000,
            seeds: vec![1, 2],
            avg_bits: vec![1.4],
            heuristics: vec![SortHeuristic::MiddleOut, SortHeuristic::Random { seed: 0 }],
            policy: BenchPolicy::Fixed(DistPolicy::Adjacent),
            homogeneous: vec![1],
        };
        let rows = run(&cfg, |_| {}).unwrap();
        assert_eq!(rows.len(), 2 * (1 + 2));
        assert_eq!(rows[0].heuristic, "homogeneous");
        let mo = &rows[1];
        let r = &rows[2];
        assert_eq!(mo.distribution, r.distribution);
        assert!(mo.normalized_distance < r.normalized_distance);
        assert!(run(&BenchConfig { n: 0, ..cfg }, |_| {}).is_err());
    }
}
