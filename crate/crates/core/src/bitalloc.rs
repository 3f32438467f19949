//! Turning an average bitwidth into a per-element mask.
//!
//! A [`BitDistribution`] says what fraction of elements gets each bitwidth; a
//! [`SortHeuristic`] orders elements so that the earliest ones receive the
//! fewest bits. [`generate_mask`] walks the distribution in ascending bitwidth
//! order and hands out consecutive slices of that ordering.

use std::fmt;
use std::str::FromStr;

use crate::binarize::{BitMask, MAX_BITS};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BitDistribution {
    entries: Vec<(u8, f64)>,
}

impl BitDistribution {
    /// Validates `entries` (any order) against a declared average bitwidth.
    pub fn new(mut entries: Vec<(u8, f64)>, declared_avg: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        entries.sort_by_key(|&(b, _)| b);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidDistribution(format!(
                    "bitwidth {} listed twice",
                    w[0].0
                )));
            }
        }
        for &(b, p) in &entries {
            if b == 0 || b > MAX_BITS {
                return Err(Error::InvalidDistribution(format!(
                    "bitwidth {b} outside 1..={MAX_BITS}"
                )));
            }
            if !(p > 0.0 && p <= 1.0 + SUM_TOL) {
                return Err(Error::InvalidDistribution(format!(
                    "fraction {p} for {b}-bit outside (0, 1]"
                )));
            }
        }
        let dist = Self { entries };
        let total: f64 = dist.entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        if (dist.average() - declared_avg).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "fractions average {} bits, expected {declared_avg}",
                dist.average()
            )));
        }
        Ok(dist)
    }

    pub fn entries(&self) -> &[(u8, f64)] {
        &self.entries
    }

    pub fn average(&self) -> f64 {
        self.entries.iter().map(|&(b, p)| b as f64 * p).sum()
    }

    pub fn max_bits(&self) -> u8 {
        self.entries.last().map(|e| e.0).unwrap_or(0)
    }

    /// Element counts per entry for a tensor of `n` elements.
    ///
    /// Bucket boundaries are the cumulative fractions scaled by `n` and
    /// rounded half-to-even; the last boundary is `n`, so whatever rounding
    /// leaves over lands in the largest bitwidth.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.entries.len());
        let mut cumulative = 0.0;
        let mut prev = 0usize;
        for (i, &(_, p)) in self.entries.iter().enumerate() {
            cumulative += p;
            let boundary = if i + 1 == self.entries.len() {
                n
            } else {
                round_half_even(cumulative * n as f64).min(n)
            };
            let boundary = boundary.max(prev);
            counts.push(boundary - prev);
            prev = boundary;
        }
        counts
    }

    /// Compact label, e.g. `1:0.6/2:0.4`.
    pub fn label(&self) -> String {
        self.entries
            .iter()
            .map(|(b, p)| format!("{b}:{}", trim_float(*p)))
            .collect::<Vec<_>>()
            .join("/")
    }
}

impl fmt::Display for BitDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{:.6}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Rounds to the nearest integer, ties to even. Values within 1e-9 of an
/// integer or of a half-integer are snapped first so that `0.6 * 5` counts as
/// exactly 3.
pub fn round_half_even(x: f64) -> usize {
    let twice = x * 2.0;
    let snapped = if (twice - twice.round()).abs() < 1e-9 {
        twice.round() / 2.0
    } else {
        x
    };
    snapped.round_ties_even().max(0.0) as usize
}

/// How `dist_from_avg` picks fractions for an average bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub enum DistPolicy {
    /// Mix of the two integers bracketing the average.
    Adjacent,
    /// Explicit `(bitwidth, fraction)` list.
    Preset(Vec<(u8, f64)>),
    /// 70% 1-bit, 20% 2-bit, 10% 3-bit; only valid for an average of 1.4.
    Tiered14,
}

impl Default for DistPolicy {
    fn default() -> Self {
        DistPolicy::Adjacent
    }
}

impl fmt::Display for DistPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistPolicy::Adjacent => f.write_str("adjacent"),
            DistPolicy::Tiered14 => f.write_str("tiered-1.4"),
            DistPolicy::Preset(entries) => {
                let parts: Vec<String> = entries
                    .iter()
                    .map(|(b, p)| format!("{b}:{}", trim_float(*p)))
                    .collect();
                write!(f, "preset({})", parts.join(","))
            }
        }
    }
}

impl FromStr for DistPolicy {
    type Err = Error;

    /// Accepts `adjacent`, `tiered-1.4`, or `preset(1:0.8,3:0.2)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "adjacent" => return Ok(DistPolicy::Adjacent),
            "tiered-1.4" | "tiered14" => return Ok(DistPolicy::Tiered14),
            _ => {}
        }
        let inner = s
            .strip_prefix("preset(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidDistribution(format!("unknown policy '{s}'")))?;
        let mut entries = Vec::new();
        for part in inner.split(',').filter(|p| !p.trim().is_empty()) {
            let (b, p) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidDistribution(format!("bad preset entry '{part}'")))?;
            let b: u8 = b
                .trim()
                .parse()
                .map_err(|_| Error::InvalidDistribution(format!("bad bitwidth '{b}'")))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidDistribution(format!("bad fraction '{p}'")))?;
            entries.push((b, p));
        }
        Ok(DistPolicy::Preset(entries))
    }
}

fn check_avg(avg: f64) -> Result<()> {
    if !(avg.is_finite() && (1.0..=MAX_BITS as f64).contains(&avg)) {
        return Err(Error::InvalidDistribution(format!(
            "average bitwidth {avg} outside [1, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Distribution over bitwidths averaging `avg`, chosen by `policy`.
pub fn dist_from_avg(avg: f64, policy: &DistPolicy) -> Result<BitDistribution> {
    check_avg(avg)?;
    match policy {
        DistPolicy::Adjacent => {
            let lo = avg.floor();
            let frac_hi = avg - lo;
            if frac_hi < SUM_TOL {
                return BitDistribution::new(vec![(lo as u8, 1.0)], avg);
            }
            if 1.0 - frac_hi < SUM_TOL {
                return BitDistribution::new(vec![(lo as u8 + 1, 1.0)], avg);
            }
            BitDistribution::new(
                vec![(lo as u8, 1.0 - frac_hi), (lo as u8 + 1, frac_hi)],
                avg,
            )
        }
        DistPolicy::Tiered14 => BitDistribution::new(vec![(1, 0.7), (2, 0.2), (3, 0.1)], avg),
        DistPolicy::Preset(entries) => BitDistribution::new(entries.clone(), avg),
    }
}

/// Every distribution over `bitwidths` whose fractions are multiples of
/// `step` and whose average is `avg`.
pub fn grid_distributions(avg: f64, bitwidths: &[u8], step: f64) -> Result<Vec<BitDistribution>> {
    check_avg(avg)?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidInput(format!("grid step {step}")));
    }
    let units = (1.0 / step).round() as usize;
    let mut widths = bitwidths.to_vec();
    widths.sort_unstable();
    widths.dedup();
    let mut out = Vec::new();
    let mut counts = vec![0usize; widths.len()];
    fn recurse(
        idx: usize,
        remaining: usize,
        counts: &mut Vec<usize>,
        widths: &[u8],
        units: usize,
        avg: f64,
        out: &mut Vec<BitDistribution>,
    ) {
        if idx + 1 == widths.len() {
            counts[idx] = remaining;
            let entries: Vec<(u8, f64)> = widths
                .iter()
                .zip(counts.iter())
                .filter(|(_, &c)| c > 0)
                .map(|(&b, &c)| (b, c as f64 / units as f64))
                .collect();
            if let Ok(d) = BitDistribution::new(entries, avg) {
                out.push(d);
            }
            return;
        }
        for c in 0..=remaining {
            counts[idx] = c;
            recurse(idx + 1, remaining - c, counts, widths, units, avg, out);
        }
    }
    if !widths.is_empty() {
        recurse(0, units, &mut counts, &widths, units, avg, &mut out);
    }
    Ok(out)
}

/// Element ordering strategy; earlier positions receive fewer bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SortHeuristic {
    /// Largest magnitudes first.
    TopDown,
    /// Magnitudes closest to the mean magnitude first.
    MiddleOut,
    /// Signed deviation `|t| - mean|t|` ascending. Orders exactly like
    /// [`SortHeuristic::BottomUp`]; kept for comparison.
    MiddleOutSigned,
    /// Smallest magnitudes first.
    BottomUp,
    /// Fixed seeded permutation.
    Random { seed: u64 },
}

impl SortHeuristic {
    pub const ALL_DEFAULT: [SortHeuristic; 4] = [
        SortHeuristic::TopDown,
        SortHeuristic::MiddleOut,
        SortHeuristic::BottomUp,
        SortHeuristic::Random { seed: 0 },
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            SortHeuristic::TopDown => "td",
            SortHeuristic::MiddleOut => "mo",
            SortHeuristic::MiddleOutSigned => "mo-signed",
            SortHeuristic::BottomUp => "bu",
            SortHeuristic::Random { .. } => "random",
        }
    }
}

impl fmt::Display for SortHeuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SortHeuristic::Random { seed } => write!(f, "random:{seed}"),
            h => f.write_str(h.short_name()),
        }
    }
}

impl FromStr for SortHeuristic {
    type Err = Error;

    /// `td`, `mo`, `mo-signed`, `bu`, `random` or `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "td" | "top-down" => SortHeuristic::TopDown,
            "mo" | "middle-out" => SortHeuristic::MiddleOut,
            "mo-signed" => SortHeuristic::MiddleOutSigned,
            "bu" | "bottom-up" => SortHeuristic::BottomUp,
            "r" | "random" => SortHeuristic::Random { seed: 0 },
            other => {
                let seed = other
                    .strip_prefix("random:")
                    .or_else(|| other.strip_prefix("r:"))
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown heuristic '{s}'")))?;
                SortHeuristic::Random { seed }
            }
        })
    }
}

/// Permutation of `0..t.len()` under `heuristic`. Ties keep ascending index
/// order.
pub fn sort_indices(t: &Tensor, heuristic: SortHeuristic) -> Result<Vec<usize>> {
    sort_values(t.data(), heuristic)
}

pub fn sort_values(values: &[f64], heuristic: SortHeuristic) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("sort_indices"));
    }
    let n = values.len();
    if let SortHeuristic::Random { seed } = heuristic {
        return Ok(RngStream::new(seed).permutation(n));
    }
    let keys: Vec<f64> = match heuristic {
        SortHeuristic::TopDown => values.iter().map(|x| -x.abs()).collect(),
        SortHeuristic::BottomUp => values.iter().map(|x| x.abs()).collect(),
        SortHeuristic::MiddleOut | SortHeuristic::MiddleOutSigned => {
            let mean = values.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
            if heuristic == SortHeuristic::MiddleOut {
                values.iter().map(|x| (x.abs() - mean).abs()).collect()
            } else {
                values.iter().map(|x| x.abs() - mean).collect()
            }
        }
        SortHeuristic::Random { .. } => unreachable!(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal keys stay in index order
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    Ok(order)
}

/// Assigns bitwidths along `order` in ascending-bitwidth buckets sized by
/// [`BitDistribution::counts`].
pub fn mask_from_order(shape: Vec<usize>, order: &[usize], dist: &BitDistribution) -> Result<BitMask> {
    let n = order.len();
    let mut widths = vec![0u8; n];
    let mut pos = 0;
    for (&(bits, _), count) in dist.entries().iter().zip(dist.counts(n)) {
        for &idx in &order[pos..pos + count] {
            widths[idx] = bits;
        }
        pos += count;
    }
    debug_assert_eq!(pos, n);
    BitMask::new(shape, widths)
}

/// Mask for `t` averaging `avg` bits (within `1/N` for distributions over
/// bitwidths at most two apart).
pub fn generate_mask(
    t: &Tensor,
    avg: f64,
    heuristic: SortHeuristic,
    policy: &DistPolicy,
) -> Result<BitMask> {
    let dist = dist_from_avg(avg, policy)?;
    generate_mask_with(t, &dist, heuristic)
}

pub fn generate_mask_with(
    t: &Tensor,
    dist: &BitDistribution,
    heuristic: SortHeuristic,
) -> Result<BitMask> {
    let order = sort_indices(t, heuristic)?;
    mask_from_order(t.shape().to_vec(), &order, dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex() -> Tensor {
        Tensor::from_vec(vec![0.1, -0.5, 0.9, -0.2])
    }

    #[test]
    fn adjacent_distribution() {
        let d = dist_from_avg(1.4, &DistPolicy::Adjacent).unwrap();
        assert_eq!(d.entries().len(), 2);
        assert_eq!(d.entries()[0].0, 1);
        assert!((d.entries()[0].1 - 0.6).abs() < 1e-12);
        assert!((d.entries()[1].1 - 0.4).abs() < 1e-12);
        let one = dist_from_avg(1.0, &DistPolicy::Adjacent).unwrap();
        assert_eq!(one.entries(), &[(1, 1.0)]);
        let three = dist_from_avg(3.0, &DistPolicy::Adjacent).unwrap();
        assert_eq!(three.entries(), &[(3, 1.0)]);
        let eight = dist_from_avg(8.0, &DistPolicy::Adjacent).unwrap();
        assert_eq!(eight.entries(), &[(8, 1.0)]);
    }

    #[test]
    fn tiered_and_preset_distributions() {
        let d = dist_from_avg(1.4, &DistPolicy::Tiered14).unwrap();
        assert_eq!(d.entries(), &[(1, 0.7), (2, 0.2), (3, 0.1)]);
        assert!(dist_from_avg(1.5, &DistPolicy::Tiered14).is_err());
        let p = DistPolicy::Preset(vec![(3, 0.2), (1, 0.8)]);
        assert_eq!(dist_from_avg(1.4, &p).unwrap().entries(), &[(1, 0.8), (3, 0.2)]);
        assert!(dist_from_avg(1.5, &p).is_err());
        assert!(dist_from_avg(1.4, &DistPolicy::Preset(vec![(1, 0.5), (2, 0.4)])).is_err());
        assert!(dist_from_avg(0.5, &DistPolicy::Adjacent).is_err());
        assert!(dist_from_avg(8.5, &DistPolicy::Adjacent).is_err());
        assert!(dist_from_avg(f64::NAN, &DistPolicy::Adjacent).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("adjacent".parse::<DistPolicy>().unwrap(), DistPolicy::Adjacent);
        assert_eq!("tiered-1.4".parse::<DistPolicy>().unwrap(), DistPolicy::Tiered14);
        assert_eq!(
            "preset(1:0.8,3:0.2)".parse::<DistPolicy>().unwrap(),
            DistPolicy::Preset(vec![(1, 0.8), (3, 0.2)])
        );
        assert!("bogus".parse::<DistPolicy>().is_err());
        let p = DistPolicy::Preset(vec![(1, 0.8), (3, 0.2)]);
        assert_eq!(p.to_string().parse::<DistPolicy>().unwrap(), p);
    }

    #[test]
    fn heuristic_parsing() {
        assert_eq!("MO".parse::<SortHeuristic>().unwrap(), SortHeuristic::MiddleOut);
        assert_eq!(
            "random:17".parse::<SortHeuristic>().unwrap(),
            SortHeuristic::Random { seed: 17 }
        );
        assert!("sideways".parse::<SortHeuristic>().is_err());
    }

    #[test]
    fn sort_examples() {
        let t = ex();
        assert_eq!(sort_indices(&t, SortHeuristic::MiddleOut).unwrap(), vec![1, 3, 0, 2]);
        assert_eq!(sort_indices(&t, SortHeuristic::TopDown).unwrap(), vec![2, 1, 3, 0]);
        assert_eq!(sort_indices(&t, SortHeuristic::BottomUp).unwrap(), vec![0, 3, 1, 2]);
        assert_eq!(
            sort_indices(&t, SortHeuristic::MiddleOutSigned).unwrap(),
            sort_indices(&t, SortHeuristic::BottomUp).unwrap()
        );
        assert!(sort_values(&[], SortHeuristic::TopDown).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let t = Tensor::from_vec(vec![1.0, -1.0, 1.0, 0.5]);
        assert_eq!(sort_indices(&t, SortHeuristic::TopDown).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(sort_indices(&t, SortHeuristic::BottomUp).unwrap(), vec![3, 0, 1, 2]);
    }

    #[test]
    fn random_is_reproducible() {
        let t = Tensor::gaussian(vec![100], 1).unwrap();
        let a = sort_indices(&t, SortHeuristic::Random { seed: 4 }).unwrap();
        assert_eq!(a, sort_indices(&t, SortHeuristic::Random { seed: 4 }).unwrap());
        assert_ne!(a, sort_indices(&t, SortHeuristic::Random { seed: 5 }).unwrap());
    }

    #[test]
    fn mask_examples() {
        let t = ex();
        let half = DistPolicy::Preset(vec![(1, 0.5), (2, 0.5)]);
        let mo = generate_mask(&t, 1.5, SortHeuristic::MiddleOut, &half).unwrap();
        assert_eq!(mo.widths(), &[2, 1, 2, 1]);
        let td = generate_mask(&t, 1.5, SortHeuristic::TopDown, &half).unwrap();
        assert_eq!(td.widths(), &[2, 1, 1, 2]);
        for h in SortHeuristic::ALL_DEFAULT {
            let g = Tensor::gaussian(vec![37], 2).unwrap();
            let m1 = generate_mask(&g, 1.0, h, &DistPolicy::Adjacent).unwrap();
            assert!(m1.widths().iter().all(|&w| w == 1));
            let m3 = generate_mask(&g, 3.0, h, &DistPolicy::Adjacent).unwrap();
            assert!(m3.widths().iter().all(|&w| w == 3));
        }
    }

    #[test]
    fn counts_round_half_even_and_fill_last() {
        let d = dist_from_avg(1.5, &DistPolicy::Adjacent).unwrap();
        // 0.5 * 5 = 2.5 -> 2
        assert_eq!(d.counts(5), vec![2, 3]);
        // 0.5 * 7 = 3.5 -> 4
        assert_eq!(d.counts(7), vec![4, 3]);
        let p = dist_from_avg(1.4, &DistPolicy::Tiered14).unwrap();
        assert_eq!(p.counts(10), vec![7, 2, 1]);
        // boundaries 1.4 -> 1, 1.8 -> 2
        assert_eq!(p.counts(2), vec![1, 1, 0]);
        assert_eq!(round_half_even(0.6 * 5.0), 3);
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
    }

    #[test]
    fn grid_enumeration() {
        let g = grid_distributions(1.4, &[1, 2, 3], 0.05).unwrap();
        // p3 in {0, .05, .1, .15, .2}
        assert_eq!(g.len(), 5);
        assert!(g.iter().all(|d| (d.average() - 1.4).abs() < 1e-9));
        assert!(g.iter().any(|d| d.entries() == [(1, 0.8), (3, 0.2)]));
        assert!(g.iter().any(|d| d.entries() == [(1, 0.6), (2, 0.4)]));
        let one = grid_distributions(1.0, &[1, 2, 3], 0.05).unwrap();
        assert_eq!(one.len(), 1);
    }
}
