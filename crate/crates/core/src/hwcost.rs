//! FPGA / ASIC cost extrapolation from measured baselines.
//!
//! Two scaling laws, both read off published implementation tables:
//!
//! - FPGA: occupancy and power grow linearly with the average bitwidth and
//!   with the unfolding factor; throughput falls with bitwidth and grows with
//!   unfolding. Occupancy saturates at 100%.
//! - ASIC: area and power scale with the bit product `bits_in · bits_w`;
//!   throughput is held at the baseline.
//!
//! FPGA baselines carry the same bitwidth for inputs and weights, and a
//! single `bits` query value applies to both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Baselines shipped with the crate (CSV, see [`parse_baselines`]).
pub const BUNDLED_BASELINES: &str = include_str!("../data/table2_baselines.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Fpga,
    Asic,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Fpga => "fpga",
            Platform::Asic => "asic",
        })
    }
}

impl FromStr for Platform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fpga" => Ok(Platform::Fpga),
            "asic" => Ok(Platform::Asic),
            other => Err(Error::InvalidInput(format!("unknown platform '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBaseline {
    pub id: String,
    pub platform: Platform,
    pub device: String,
    pub model: String,
    /// Compute-unit replication factor; `None` on ASIC rows.
    pub unfolding: Option<u32>,
    pub bits_in: f64,
    pub bits_w: f64,
    /// Percent of LUTs (FPGA) or mm² (ASIC).
    pub occupancy: f64,
    pub kfps: f64,
    pub power_w: f64,
    pub top1: Option<f64>,
}

impl CostBaseline {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bits_in", self.bits_in),
            ("bits_w", self.bits_w),
            ("occupancy", self.occupancy),
            ("kfps", self.kfps),
            ("power_w", self.power_w),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("baseline {}: {name} = {v}", self.id)));
            }
        }
        match self.platform {
            Platform::Fpga => {
                if self.occupancy > 100.0 {
                    return Err(Error::InvalidInput(format!(
                        "baseline {}: occupancy {}% above 100%",
                        self.id, self.occupancy
                    )));
                }
                if self.unfolding.unwrap_or(0) == 0 {
                    return Err(Error::InvalidInput(format!(
                        "baseline {}: fpga rows need a positive unfolding",
                        self.id
                    )));
                }
            }
            Platform::Asic => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub baseline: String,
    pub platform: Platform,
    pub model: String,
    pub unfolding: Option<u32>,
    pub bits_in: f64,
    pub bits_w: f64,
    pub occupancy: f64,
    pub kfps: f64,
    pub power_w: f64,
    /// Set when the FPGA occupancy was capped at 100%.
    pub saturated: bool,
    pub note: String,
}

#[derive(Debug, Deserialize)]
struct BaselineRow {
    id: String,
    platform: String,
    device: String,
    model: String,
    unfolding: Option<u32>,
    bits_in: f64,
    bits_w: f64,
    occupancy: f64,
    kfps: f64,
    power_w: f64,
    top1: Option<f64>,
}

/// Parses the baseline table: comma-separated with a header row, `#` lines
/// are comments.
pub fn parse_baselines(text: &str) -> Result<Vec<CostBaseline>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out: Vec<CostBaseline> = Vec::new();
    for row in reader.deserialize::<BaselineRow>() {
        let row = row.map_err(|e| Error::InvalidInput(format!("baseline table: {e}")))?;
        let b = CostBaseline {
            platform: row.platform.parse()?,
            id: row.id,
            device: row.device,
            model: row.model,
            unfolding: row.unfolding,
            bits_in: row.bits_in,
            bits_w: row.bits_w,
            occupancy: row.occupancy,
            kfps: row.kfps,
            power_w: row.power_w,
            top1: row.top1,
        };
        b.validate()?;
        if out.iter().any(|o| o.id == b.id) {
            return Err(Error::InvalidInput(format!("duplicate baseline id {}", b.id)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn bundled_baselines() -> Vec<CostBaseline> {
    parse_baselines(BUNDLED_BASELINES).expect("bundled baseline table is valid")
}

fn check_bits(bits: f64) -> Result<()> {
    if !(bits.is_finite() && bits > 0.0) {
        return Err(Error::InvalidInput(format!("bitwidth must be positive, got {bits}")));
    }
    Ok(())
}

pub fn fpga_estimate(base: &CostBaseline, bits: f64, unfolding: u32) -> Result<CostEstimate> {
    if base.platform != Platform::Fpga {
        return Err(Error::InvalidInput(format!("baseline {} is not an fpga row", base.id)));
    }
    check_bits(bits)?;
    if unfolding == 0 {
        return Err(Error::InvalidInput("unfolding must be positive".into()));
    }
    let base_unfold = base.unfolding.unwrap_or(1) as f64;
    let bit_ratio = bits / base.bits_w;
    let unfold_ratio = unfolding as f64 / base_unfold;
    let raw_occupancy = base.occupancy * bit_ratio * unfold_ratio;
    let saturated = raw_occupancy > 100.0;
    Ok(CostEstimate {
        baseline: base.id.clone(),
        platform: Platform::Fpga,
        model: base.model.clone(),
        unfolding: Some(unfolding),
        bits_in: bits,
        bits_w: bits,
        occupancy: raw_occupancy.min(100.0),
        kfps: base.kfps / bit_ratio * unfold_ratio,
        power_w: base.power_w * bit_ratio * unfold_ratio,
        saturated,
        note: format!(
            "{}: linear in bits (x{bit_ratio:.4}) and unfolding (x{unfold_ratio:.4}){}",
            base.id,
            if saturated {
                format!("; occupancy {raw_occupancy:.1}% capped at 100%")
            } else {
                String::new()
            }
        ),
    })
}

pub fn asic_estimate(base: &CostBaseline, bits_in: f64, bits_w: f64) -> Result<CostEstimate> {
    if base.platform != Platform::Asic {
        return Err(Error::InvalidInput(format!("baseline {} is not an asic row", base.id)));
    }
    check_bits(bits_in)?;
    check_bits(bits_w)?;
    let ratio = (bits_in * bits_w) / (base.bits_in * base.bits_w);
    Ok(CostEstimate {
        baseline: base.id.clone(),
        platform: Platform::Asic,
        model: base.model.clone(),
        unfolding: None,
        bits_in,
        bits_w,
        occupancy: base.occupancy * ratio,
        kfps: base.kfps,
        power_w: base.power_w * ratio,
        saturated: false,
        note: format!("{}: area and power scale with bit product (x{ratio:.4})", base.id),
    })
}

/// Re-expresses an estimate as a baseline so it can be extrapolated again.
pub fn rebaseline(est: &CostEstimate, id: &str) -> CostBaseline {
    CostBaseline {
        id: id.to_string(),
        platform: est.platform,
        device: String::new(),
        model: est.model.clone(),
        unfolding: est.unfolding,
        bits_in: est.bits_in,
        bits_w: est.bits_w,
        occupancy: est.occupancy,
        kfps: est.kfps,
        power_w: est.power_w,
        top1: None,
    }
}

/// One candidate in a trade-off comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub accuracy: f64,
    pub power_w: f64,
    pub occupancy: f64,
}

/// `a` dominates `b`: no worse on accuracy (higher), power and occupancy
/// (lower), strictly better on at least one.
pub fn dominates(a: &TradeoffPoint, b: &TradeoffPoint) -> bool {
    let no_worse = a.accuracy >= b.accuracy && a.power_w <= b.power_w && a.occupancy <= b.occupancy;
    let better = a.accuracy > b.accuracy || a.power_w < b.power_w || a.occupancy < b.occupancy;
    no_worse && better
}

/// Indices of the non-dominated points, in input order.
pub fn pareto_front(points: &[TradeoffPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|q| dominates(q, &points[i])))
        .collect()
}

/// Accuracy for a `(model, bits)` configuration, from training runs or
/// published annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub model: String,
    pub bits: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub estimates: Vec<CostEstimate>,
    /// `(estimate index, accuracy)` for estimates with a known accuracy.
    pub ranked: Vec<(usize, f64)>,
    /// Estimate indices on the Pareto front, computed per platform.
    pub pareto: Vec<usize>,
}

fn lookup_accuracy(table: &[AccuracyEntry], model: &str, bits: f64) -> Option<f64> {
    table
        .iter()
        .find(|e| e.model == model && (e.bits - bits).abs() < 1e-9)
        .map(|e| e.top1)
}

/// Estimates every baseline at every bitwidth in `bits_grid` (at the
/// baseline's own unfolding), attaches accuracies, and marks the Pareto
/// front under (accuracy ↑, power ↓, occupancy ↓) within each platform.
pub fn pareto_report(
    baselines: &[CostBaseline],
    bits_grid: &[f64],
    accuracy: &[AccuracyEntry],
) -> Result<ParetoReport> {
    if baselines.is_empty() || bits_grid.is_empty() {
        return Err(Error::EmptyInput("pareto_report"));
    }
    let mut estimates = Vec::new();
    for base in baselines {
        for &bits in bits_grid {
            estimates.push(match base.platform {
                Platform::Fpga => fpga_estimate(base, bits, base.unfolding.unwrap_or(1))?,
                Platform::Asic => asic_estimate(base, bits, bits)?,
            });
        }
    }
    let ranked: Vec<(usize, f64)> = estimates
        .iter()
        .enumerate()
        .filter_map(|(i, e)| lookup_accuracy(accuracy, &e.model, e.bits_w).map(|a| (i, a)))
        .collect();
    let mut pareto = Vec::new();
    for platform in [Platform::Fpga, Platform::Asic] {
        let group: Vec<(usize, f64)> = ranked
            .iter()
            .copied()
            .filter(|&(i, _)| estimates[i].platform == platform)
            .collect();
        let points: Vec<TradeoffPoint> = group
            .iter()
            .map(|&(i, acc)| TradeoffPoint {
                label: estimates[i].baseline.clone(),
                accuracy: acc,
                power_w: estimates[i].power_w,
                occupancy: estimates[i].occupancy,
            })
            .collect();
        pareto.extend(pareto_front(&points).into_iter().map(|k| group[k].0));
    }
    pareto.sort_unstable();
    Ok(ParetoReport {
        estimates,
        ranked,
        pareto,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(id: &str) -> CostBaseline {
        bundled_baselines().into_iter().find(|b| b.id == id).unwrap()
    }

    fn within(actual: f64, printed: f64, tol: f64) -> bool {
        ((actual - printed) / printed).abs() <= tol
    }

    #[test]
    fn bundled_table_parses() {
        let b = bundled_baselines();
        assert_eq!(b.len(), 6);
        assert_eq!(b[2].platform, Platform::Asic);
        assert_eq!(b[2].unfolding, None);
    }

    #[test]
    fn fpga_rows() {
        let e = fpga_estimate(&base("row1"), 1.2, 1).unwrap();
        assert!(within(e.occupancy, 25.4, 0.03) && within(e.kfps, 18.25, 0.03) && within(e.power_w, 4.3, 0.03));
        let e = fpga_estimate(&base("row1"), 1.4, 1).unwrap();
        assert!(within(e.occupancy, 29.7, 0.03) && within(e.kfps, 15.6, 0.03) && within(e.power_w, 5.0, 0.03));
        let e = fpga_estimate(&base("row9"), 1.4, 1).unwrap();
        assert!(within(e.occupancy, 28.0, 0.03) && within(e.kfps, 0.32, 0.03) && within(e.power_w, 4.76, 0.03));
    }

    #[test]
    fn fpga_saturation() {
        let e = fpga_estimate(&base("row2"), 1.2, 4).unwrap();
        assert_eq!(e.occupancy, 100.0);
        assert!(e.saturated);
        assert!(within(e.kfps, 73.0, 0.03));
        assert!(within(e.power_w, 17.0, 0.03));
    }

    #[test]
    fn fpga_identity_at_baseline() {
        let b = base("row2");
        let e = fpga_estimate(&b, 1.0, 4).unwrap();
        assert_eq!((e.occupancy, e.kfps, e.power_w), (b.occupancy, b.kfps, b.power_w));
        assert!(!e.saturated);
    }

    #[test]
    fn asic_rows() {
        let e = asic_estimate(&base("row3"), 1.2, 1.2).unwrap();
        assert!(within(e.occupancy, 2.18, 0.03) && within(e.power_w, 0.14, 0.03));
        assert_eq!(e.kfps, 3.4);
        let e = asic_estimate(&base("row3"), 1.4, 1.4).unwrap();
        assert!(within(e.occupancy, 2.96, 0.03));
        // the printed 0.18 W sits 3.4% below the rule's 0.1862 W
        assert!((e.power_w - 0.38 * 1.96 / 4.0).abs() < 1e-12);
        let e = asic_estimate(&base("row12"), 1.4, 1.4).unwrap();
        assert!(within(e.occupancy, 145.5, 0.03) && within(e.power_w, 9.1, 0.03));
    }

    #[test]
    fn asic_is_multiplicative() {
        let b = base("row3");
        let step = asic_estimate(&b, 1.5, 1.2).unwrap();
        let again = asic_estimate(&rebaseline(&step, "tmp"), 1.4, 1.1).unwrap();
        let direct = asic_estimate(&b, 1.4, 1.1).unwrap();
        assert!((again.occupancy - direct.occupancy).abs() < 1e-12);
        assert!((again.power_w - direct.power_w).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(fpga_estimate(&base("row1"), 0.0, 1).is_err());
        assert!(fpga_estimate(&base("row1"), -1.0, 1).is_err());
        assert!(fpga_estimate(&base("row3"), 1.0, 1).is_err());
        assert!(asic_estimate(&base("row1"), 1.0, 1.0).is_err());
        assert!(asic_estimate(&base("row3"), 1.0, 0.0).is_err());
        assert!(parse_baselines("id,platform\nx,gpu").is_err());
    }

    #[test]
    fn pareto_examples() {
        let p = |label: &str, accuracy, power_w, occupancy| TradeoffPoint {
            label: label.into(),
            accuracy,
            power_w,
            occupancy,
        };
        // rows 1, 4, 5
        let pts = vec![
            p("row1", 80.9, 3.6, 21.2),
            p("row4", 85.8, 4.3, 25.4),
            p("row5", 89.4, 5.0, 29.7),
        ];
        assert_eq!(pareto_front(&pts), vec![0, 1, 2]);
        let pts = vec![p("a", 80.0, 1.0, 1.0), p("b", 79.0, 1.0, 1.0)];
        assert_eq!(pareto_front(&pts), vec![0]);
        assert_eq!(pareto_front(&[p("solo", 1.0, 1.0, 1.0)]), vec![0]);
    }

    #[test]
    fn report_over_grid() {
        let acc = vec![
            AccuracyEntry { model: "VGG-8".into(), bits: 1.0, top1: 80.9 },
            AccuracyEntry { model: "VGG-8".into(), bits: 1.2, top1: 85.8 },
            AccuracyEntry { model: "VGG-8".into(), bits: 1.4, top1: 89.4 },
        ];
        let r = pareto_report(&[base("row1")], &[1.0, 1.2, 1.4], &acc).unwrap();
        assert_eq!(r.estimates.len(), 3);
        assert_eq!(r.pareto, vec![0, 1, 2]);
        assert!(pareto_report(&[], &[1.0], &acc).is_err());
    }
}
