use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use super::results::ResultRecord;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Self {
            n,
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

/// `(coordinate, metric)` → summary over seeds.
pub type Aggregate = BTreeMap<(String, String), Summary>;

pub fn aggregate(records: &[ResultRecord]) -> Aggregate {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.coordinate.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
        .collect()
}

pub const VARIANTS: [&str; 4] = ["gates_off", "gates_on", "learned_soft", "learned_discretized"];

pub fn render(agg: &Aggregate) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<26} {:<40} {:>4} {:>10} {:>10} {:>10} {:>10}",
        "coordinate", "metric", "n", "mean", "median", "min", "max"
    );
    for ((coord, metric), s) in agg {
        let _ = writeln!(
            out,
            "{coord:<26} {metric:<40} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.n, s.mean, s.median, s.min, s.max
        );
    }

    let coords: Vec<&String> = {
        let mut c: Vec<&String> = agg.keys().map(|(c, _)| c).collect();
        c.dedup();
        c
    };
    let mut variants = String::new();
    for coord in coords {
        for v in VARIANTS {
            let get = |m: &str| agg.get(&(coord.clone(), format!("variant.{v}.{m}")));
            if let (Some(acc), Some(ratio)) = (get("test_acc"), get("ratio")) {
                let _ = writeln!(
                    variants,
                    "{coord:<26} {v:<20} {:>12.6} {:>10.4}",
                    ratio.mean, acc.mean
                );
            }
        }
    }
    if !variants.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<26} {:<20} {:>12} {:>10}", "coordinate", "variant", "param_ratio", "test_acc");
        out.push_str(&variants);
    }
    out
}

pub fn write_csv<W: Write>(agg: &Aggregate, mut out: W) -> Result<()> {
    writeln!(out, "coordinate,metric,n,mean,median,min,max")?;
    for ((coord, metric), s) in agg {
        writeln!(
            out,
            "\"{coord}\",{metric},{},{},{},{},{}",
            s.n, s.mean, s.median, s.min, s.max
        )?;
    }
    out.flush()?;
    Ok(())
}
