use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 5] = ["experiment", "system", "speaker", "metric", "value"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub experiment: String,
    pub system: String,
    pub speaker: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(experiment: &str, system: &str, speaker: &str, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            system: system.into(),
            speaker: speaker.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Nine significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn metrics_to_string(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.experiment.as_str(),
            &r.system,
            &r.speaker,
            &r.metric,
            &format_value(r.value),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("metrics csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::format(
            "metrics csv",
            format!("expected header {}", METRICS_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let value = rec[4]
            .parse::<f64>()
            .map_err(|_| Error::format("metrics csv", format!("bad value `{}`", &rec[4])))?;
        out.push(MetricRecord::new(&rec[0], &rec[1], &rec[2], &rec[3], value));
    }
    Ok(out)
}

pub fn export_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vote {
    pub question_id: String,
    pub system_a: String,
    pub system_b: String,
    pub winner: String,
}

/// Win counts for one unordered system pair, names in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairTally {
    pub system_a: String,
    pub system_b: String,
    pub wins_a: u64,
    pub wins_b: u64,
}

pub fn read_votes(path: &Path) -> Result<Vec<Vote>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format("votes csv", format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for v in r.deserialize() {
        out.push(v?);
    }
    Ok(out)
}

pub fn tally_votes(votes: &[Vote]) -> Result<Vec<PairTally>> {
    let mut pairs: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
    for v in votes {
        if v.system_a == v.system_b {
            return Err(Error::format(
                "votes csv",
                format!("question `{}` compares a system with itself", v.question_id),
            ));
        }
        let a_first = v.system_a < v.system_b;
        let key = if a_first {
            (v.system_a.clone(), v.system_b.clone())
        } else {
            (v.system_b.clone(), v.system_a.clone())
        };
        let entry = pairs.entry(key.clone()).or_default();
        if v.winner == key.0 {
            entry.0 += 1;
        } else if v.winner == key.1 {
            entry.1 += 1;
        } else {
            return Err(Error::format(
                "votes csv",
                format!("question `{}`: winner `{}` is neither system", v.question_id, v.winner),
            ));
        }
    }
    Ok(pairs
        .into_iter()
        .map(|((system_a, system_b), (wins_a, wins_b))| PairTally {
            system_a,
            system_b,
            wins_a,
            wins_b,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_is_header_only() {
        assert_eq!(metrics_to_string(&[]).unwrap(), "experiment,system,speaker,metric,value\n");
        assert!(parse_metrics("experiment,system,speaker,metric,value\n").unwrap().is_empty());
    }

    #[test]
    fn write_parse_write_is_idempotent() {
        let recs = vec![
            MetricRecord::new("vc", "welded", "B00", "similarity", 0.123456789123),
            MetricRecord::new("tts", "a,b", "B00", "distortion", -3.5e-12),
        ];
        let s = metrics_to_string(&recs).unwrap();
        let back = parse_metrics(&s).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert!((a.value - b.value).abs() <= 1e-9 * a.value.abs().max(1e-300));
            assert_eq!(a.system, b.system);
        }
        assert_eq!(metrics_to_string(&back).unwrap(), s);
        assert!(parse_metrics("a,b\n1,2\n").is_err());
    }

    #[test]
    fn tally_normalizes_pairs() {
        let v = |q: &str, a: &str, b: &str, w: &str| Vote {
            question_id: q.into(),
            system_a: a.into(),
            system_b: b.into(),
            winner: w.into(),
        };
        let t = tally_votes(&[v("1", "tts", "vc", "tts"), v("2", "vc", "tts", "tts"), v("3", "vc", "tts", "vc")]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].wins_a, t[0].wins_b), (2, 1));
        assert!(tally_votes(&[v("1", "tts", "vc", "x")]).is_err());
    }
}
