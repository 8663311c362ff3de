//! Report serialization: the JSON summary, per-sample CSV and per-epoch
//! metrics CSV, all written atomically.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::robustness::CertificationReport;
use crate::training::EpochMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsAccuracy {
    pub eps: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub iterations: usize,
    /// Step size as a multiple of eps.
    pub step_factor: f64,
    pub random_start: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub clean_accuracy: f64,
    pub certified: Vec<EpsAccuracy>,
    pub attack: Vec<EpsAccuracy>,
    pub lipschitz_lower_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_settings: Option<AttackSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Samples certified at some eps yet misclassified by the attack at that eps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soundness_violations: Option<usize>,
}

impl Summary {
    pub fn from_certification(report: &CertificationReport) -> Self {
        Summary {
            clean_accuracy: report.clean_accuracy,
            certified: report
                .eps
                .iter()
                .zip(&report.certified_accuracy)
                .map(|(&eps, &accuracy)| EpsAccuracy { eps, accuracy })
                .collect(),
            lipschitz_bound: Some(report.lipschitz_bound),
            samples: Some(report.samples.len()),
            ..Summary::default()
        }
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing CSV to memory");
    w.into_inner().expect("flushing CSV to memory")
}

/// `index,label,predicted,margin,radius,certified@<eps>...`
pub fn samples_csv(report: &CertificationReport) -> Vec<u8> {
    csv_string(|w| {
        let mut header = vec![
            "index".to_string(),
            "label".into(),
            "predicted".into(),
            "margin".into(),
            "radius".into(),
        ];
        header.extend(report.eps.iter().map(|e| format!("certified@{e}")));
        w.write_record(&header)?;
        for (i, s) in report.samples.iter().enumerate() {
            let mut row = vec![
                i.to_string(),
                s.label.to_string(),
                s.predicted.to_string(),
                format!("{:.9}", s.margin),
                format!("{:.9}", s.radius),
            ];
            row.extend(
                report
                    .eps
                    .iter()
                    .map(|&e| u8::from(s.certified_at(e, report.lipschitz_bound)).to_string()),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "loss", "accuracy", "lr", "max_sigma", "max_grad_norm"];

/// Per-epoch metrics. Wall time is kept out so reruns are byte-identical.
pub fn metrics_csv(rows: &[EpochMetrics]) -> Vec<u8> {
    csv_string(|w| {
        w.write_record(METRICS_HEADER)?;
        for m in rows {
            w.write_record([
                m.epoch.to_string(),
                format!("{:.9e}", m.loss),
                format!("{:.9}", m.accuracy),
                format!("{:.9e}", m.lr),
                format!("{:.9}", m.max_sigma),
                format!("{:.9e}", m.max_grad_norm),
            ])?;
        }
        Ok(())
    })
}

/// `epoch,wall_time_s`
pub fn timing_csv(rows: &[EpochMetrics]) -> Vec<u8> {
    csv_string(|w| {
        w.write_record(["epoch", "wall_time_s"])?;
        for m in rows {
            w.write_record([m.epoch.to_string(), format!("{:.3}", m.wall_time)])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robustness::SampleCertificate;

    #[test]
    fn summary_json_has_schema_keys() {
        let report = CertificationReport {
            samples: vec![SampleCertificate {
                predicted: 0,
                label: 0,
                margin: 1.0,
                radius: 1.0 / 2f64.sqrt(),
            }],
            eps: vec![0.5, 1.0],
            clean_accuracy: 1.0,
            certified_accuracy: vec![1.0, 0.0],
            lipschitz_bound: 1.0,
        };
        let v: serde_json::Value = serde_json::to_value(Summary::from_certification(&report)).unwrap();
        for key in ["clean_accuracy", "certified", "attack", "lipschitz_lower_bound"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let csv = String::from_utf8(samples_csv(&report)).unwrap();
        assert!(csv.starts_with("index,label,predicted,margin,radius,certified@0.5,certified@1\n"));
        assert!(csv.lines().nth(1).unwrap().ends_with(",1,0"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
