//! Training log: one record per iteration, stored as JSON lines and
//! exportable to CSV.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub total: f64,
    pub color: Option<f64>,
    pub tv: Option<f64>,
    pub landmark: Option<f64>,
    pub mask: Option<f64>,
    pub laplacian: Option<f64>,
    pub scale: f64,
    /// Seconds since the start of the run.
    pub wall_time: f64,
    /// Set when the iteration triggered a rollback.
    #[serde(default)]
    pub rolled_back: bool,
}

impl LogRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &LogRecord) -> bool {
        LogRecord {
            wall_time: 0.0,
            ..self.clone()
        } == LogRecord {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: LogRecord) {
        if let Some(last) = self.records.last() {
            if last.stage == record.stage && record.iteration <= last.iteration && !last.rolled_back
            {
                log::warn!("log iteration went backwards in stage {}", record.stage);
            }
        }
        self.records.push(record);
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn last(&self, stage: Stage) -> Option<&LogRecord> {
        self.stage(stage).last()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<TrainLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::parse(path, e.to_string());
        w.write_record([
            "stage",
            "iteration",
            "total",
            "color",
            "tv",
            "landmark",
            "mask",
            "laplacian",
            "scale",
            "wall_time",
            "rolled_back",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.stage.label().to_string(),
                r.iteration.to_string(),
                r.total.to_string(),
                opt(r.color),
                opt(r.tv),
                opt(r.landmark),
                opt(r.mask),
                opt(r.laplacian),
                r.scale.to_string(),
                format!("{:.3}", r.wall_time),
                r.rolled_back.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: Stage, iteration: usize) -> LogRecord {
        LogRecord {
            stage,
            iteration,
            total: 0.1 * iteration as f64,
            color: Some(0.25),
            tv: None,
            landmark: None,
            mask: None,
            laplacian: Some(3.0),
            scale: 2.0,
            wall_time: 1.5,
            rolled_back: false,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let log = TrainLog {
            records: vec![record(Stage::Appearance, 0), record(Stage::Joint, 1)],
        };
        let back = TrainLog::from_jsonl(&log.to_jsonl(), Path::new("x")).unwrap();
        assert_eq!(back, log);
        assert!(TrainLog::from_jsonl("{nope", Path::new("x")).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainLog {
            records: vec![record(Stage::Landmarks, 0)],
        };
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("stage,iteration"));
        assert!(lines[1].starts_with("1a,0,0,0.25,,,,3,2,1.500,false"));
    }
}
