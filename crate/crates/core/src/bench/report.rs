use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Ablation,
    Sweep,
}

/// A table of [`RunReport`] rows as written by `ablate` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: ReportKind,
    pub manifest: String,
    pub rows: Vec<RunReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::Parameter(format!(
                "unknown report format {other:?} (json, csv, md)"
            ))),
        }
    }
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self)?;
                s.push('\n');
                Ok(s)
            }
            ReportFormat::Csv => Ok(self.to_csv()),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }

    fn to_csv(&self) -> String {
        let mut s = String::from("config_id,k,seed,accuracy\n");
        for r in &self.rows {
            for (seed, acc) in r.seeds.iter().zip(&r.per_seed) {
                let _ = writeln!(s, "{},{},{},{}", r.config_id, r.k, seed, acc);
            }
            let _ = writeln!(s, "{},{},mean,{}", r.config_id, r.k, r.mean);
        }
        s
    }

    fn to_markdown(&self) -> String {
        let seeds = self
            .rows
            .first()
            .map(|r| r.seeds.clone())
            .unwrap_or_default();
        let mut s = String::from("| config | K |");
        for seed in &seeds {
            let _ = write!(s, " seed {seed} |");
        }
        s.push_str(" mean |\n|---|---|");
        for _ in &seeds {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {} |", r.config_id, r.k);
            for acc in &r.per_seed {
                let _ = write!(s, " {:.2} |", 100.0 * acc);
            }
            let _ = writeln!(s, " {:.2} |", 100.0 * r.mean);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        Report {
            kind: ReportKind::Ablation,
            manifest: "m.json".into(),
            rows: vec![RunReport {
                config_id: "full".into(),
                k: 16,
                seeds: vec![0, 1],
                per_seed: vec![0.5, 0.75],
                mean: 0.625,
            }],
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            sample().render(ReportFormat::Csv).unwrap(),
            "config_id,k,seed,accuracy\nfull,16,0,0.5\nfull,16,1,0.75\nfull,16,mean,0.625\n"
        );
    }

    #[test]
    fn markdown_layout() {
        let md = sample().render(ReportFormat::Markdown).unwrap();
        assert_eq!(
            md,
            "| config | K | seed 0 | seed 1 | mean |\n|---|---|---|---|---|\n| full | 16 | 50.00 | 75.00 | 62.50 |\n"
        );
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let text = r.render(ReportFormat::Json).unwrap();
        assert_eq!(Report::from_json(&text).unwrap(), r);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
