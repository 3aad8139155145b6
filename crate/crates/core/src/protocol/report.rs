use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    /// `<phase>/<split>/<term>`, e.g. `acoustic/heldout/tie_gap`.
    pub term: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(step: u64, term: &str, value: f64) -> Self {
        Self {
            step,
            term: term.into(),
            value,
        }
    }
}

/// Loss curves of one stage. Everything except `wall_clock_secs` is a
/// deterministic function of the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub rows: Vec<ReportRow>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn new(stage: &str, rows: Vec<ReportRow>) -> Self {
        Self {
            stage: stage.into(),
            rows,
            wall_clock_secs: 0.0,
        }
    }

    /// Values of `term` in step order.
    pub fn series(&self, term: &str) -> Vec<(u64, f64)> {
        self.rows.iter().filter(|r| r.term == term).map(|r| (r.step, r.value)).collect()
    }

    pub fn first(&self, term: &str) -> Option<f64> {
        self.series(term).first().map(|r| r.1)
    }

    pub fn last(&self, term: &str) -> Option<f64> {
        self.series(term).last().map(|r| r.1)
    }

    /// First and last value of every term.
    pub fn summary(&self) -> BTreeMap<String, (f64, f64)> {
        let mut out: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.term.clone()).and_modify(|e| e.1 = r.value).or_insert((r.value, r.value));
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry {
            first: f64,
            last: f64,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            stage: &'a str,
            summary: BTreeMap<String, Entry>,
            rows: &'a [ReportRow],
        }
        let summary = self
            .summary()
            .into_iter()
            .map(|(k, (first, last))| (k, Entry { first, last }))
            .collect();
        serde_json::to_string_pretty(&Out {
            stage: &self.stage,
            summary,
            rows: &self.rows,
        })
        .expect("report serializes")
    }

    /// `step,term,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,term,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.8e}\n", r.step, r.term, r.value));
        }
        s
    }
}
