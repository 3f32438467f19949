//! Sweep point syntax: whitespace-separated `key=value` pairs.
//!
//! | key      | meaning                                   |
//! |----------|-------------------------------------------|
//! | `id`     | row label (defaults to the point text)    |
//! | `w`      | average weight bits                       |
//! | `a`      | average input (activation) bits           |
//! | `h`      | sort heuristic for both (default `mo`)    |
//! | `policy` | distribution policy (default `adjacent`)  |
//! | `layers` | homogeneous per-layer weight bits `1-2-2` |
//!
//! `full` alone is the full-precision control.

use hbnn_core::{DistPolicy, SortHeuristic};
use hbnn_train::{Precision, SweepPoint};

use crate::UsageError;

pub fn parse_point(text: &str) -> Result<SweepPoint, UsageError> {
    let text = text.trim();
    let bad = |msg: String| UsageError(format!("point '{text}': {msg}"));
    let mut id = None;
    let (mut w, mut a, mut layers) = (None, None, None);
    let mut heuristic = SortHeuristic::MiddleOut;
    let mut policy = DistPolicy::Adjacent;
    for tok in text.split_whitespace() {
        if tok == "full" {
            continue;
        }
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{tok}'")))?;
        let bits = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad bitwidth '{v}'")));
        match k {
            "id" => id = Some(v.to_string()),
            "w" => w = Some(bits(v)?),
            "a" => a = Some(bits(v)?),
            "h" => heuristic = v.parse().map_err(|e: hbnn_core::Error| bad(e.to_string()))?,
            "policy" => policy = v.parse().map_err(|e: hbnn_core::Error| bad(e.to_string()))?,
            "layers" => {
                let b = v
                    .split('-')
                    .map(|x| x.parse::<u8>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad layer bits '{v}'")))?;
                layers = Some(b);
            }
            _ => return Err(bad(format!("unknown key '{k}'"))),
        }
    }
    let hetero = |bits: f64| -> Result<Precision, UsageError> {
        hbnn_core::bitalloc::dist_from_avg(bits, &policy).map_err(|e| bad(e.to_string()))?;
        Ok(Precision::Hetero { bits, heuristic, policy: policy.clone() })
    };
    let weights = match (w, layers) {
        (Some(_), Some(_)) => return Err(bad("use either w= or layers=".into())),
        (Some(b), None) => hetero(b)?,
        (None, Some(l)) => Precision::LayerMix(l),
        (None, None) => Precision::Full,
    };
    let inputs = match a {
        Some(b) => hetero(b)?,
        None => Precision::Full,
    };
    Ok(SweepPoint {
        id: id.unwrap_or_else(|| text.replace(char::is_whitespace, "_")),
        inputs,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_points() {
        let p = parse_point("full").unwrap();
        assert_eq!((p.inputs, p.weights), (Precision::Full, Precision::Full));
        let p = parse_point("w=1.4 policy=tiered-1.4 id=p14").unwrap();
        assert_eq!(p.id, "p14");
        assert_eq!(
            p.weights,
            Precision::Hetero { bits: 1.4, heuristic: SortHeuristic::MiddleOut, policy: DistPolicy::Tiered14 }
        );
        let p = parse_point("a=2 w=1 h=td").unwrap();
        assert_eq!(p.id, "a=2_w=1_h=td");
        assert!(matches!(p.inputs, Precision::Hetero { heuristic: SortHeuristic::TopDown, .. }));
        assert_eq!(parse_point("layers=1-2-2-3").unwrap().weights, Precision::LayerMix(vec![1, 2, 2, 3]));
        for bad in ["w", "w=x", "q=1", "w=1.5 policy=tiered-1.4", "w=1 layers=1-1", "w=9"] {
            assert!(parse_point(bad).is_err(), "{bad}");
        }
    }
}
