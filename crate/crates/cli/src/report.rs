//! Machine-readable run reports. Floats are serialized with 17 significant
//! digits so a persisted report re-parses to bit-identical values.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub command: String,
    /// Echo of the resolved configuration; re-running it reproduces every
    /// estimate bit-exactly.
    pub config: ExperimentConfig,
    pub checks: Vec<CheckResult>,
    pub diagnostics: Vec<String>,
    /// Named per-term breakdowns of estimator outputs.
    pub terms: Vec<(String, f64)>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// JSON with every f64 printed to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = Vec::new();
        let mut ser =
            serde_json::Serializer::with_formatter(&mut out, SignificantDigitsFormatter);
        self.serialize(&mut ser).expect("report serializes");
        String::from_utf8(out).expect("json is utf8")
    }

    /// CSV of the per-term breakdown plus the headline estimates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,value\n");
        for c in &self.checks {
            s.push_str(&format!("check,{},{:.16e}\n", csv_escape(&c.name), c.estimate));
            s.push_str(&format!(
                "std_error,{},{:.16e}\n",
                csv_escape(&c.name),
                c.std_error
            ));
        }
        for (name, value) in &self.terms {
            s.push_str(&format!("term,{},{value:.16e}\n", csv_escape(name)));
        }
        s
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `serde_json` formatter printing floats as `{:.16e}` (17 significant
/// digits, enough to round-trip any finite f64 exactly).
struct SignificantDigitsFormatter;

impl serde_json::ser::Formatter for SignificantDigitsFormatter {
    fn write_f64<W: Write + ?Sized>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }
}
