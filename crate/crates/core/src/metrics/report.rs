//! Combined report in the layout of the published comparison tables
//! (method x metric), plus per-metric rows for a radar chart.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::metrics::MetricsReport;

/// Metric values for one method on one evaluation setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricValues {
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub precision: Option<f64>,
    #[serde(default)]
    pub auc: Option<f64>,
    #[serde(default)]
    pub eer: Option<f64>,
}

impl From<&MetricsReport> for MetricValues {
    fn from(r: &MetricsReport) -> Self {
        MetricValues {
            accuracy: Some(r.accuracy),
            precision: r.precision,
            auc: Some(r.auc),
            eer: Some(r.eer),
        }
    }
}

/// Either inline values or a path to a metrics JSON written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricSource {
    File { file: PathBuf },
    Values(MetricValues),
}

impl MetricSource {
    fn resolve(&self, base: &Path) -> Result<MetricValues> {
        match self {
            MetricSource::Values(v) => Ok(v.clone()),
            MetricSource::File { file } => {
                let path = base.join(file);
                let text = std::fs::read_to_string(&path).map_err(|e| DfaError::io(&path, e))?;
                let r: MetricsReport = serde_json::from_str(&text)?;
                Ok(MetricValues::from(&r))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: String,
    /// Frame level on the mixed dataset.
    #[serde(default)]
    pub mixed_frame: Option<MetricSource>,
    /// Frame level on a held-out dataset.
    #[serde(default)]
    pub cross_frame: Option<MetricSource>,
    /// Video level on a held-out dataset.
    #[serde(default)]
    pub cross_video: Option<MetricSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub global_on: bool,
    pub local_on: bool,
    pub ifc_on: bool,
    pub auc: f64,
    pub eer: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportInput {
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub ablation: Option<Vec<AblationRow>>,
}

impl ReportInput {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DfaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Text(String),
    Flag(bool),
    Number(Option<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub caption: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    pub setting: String,
    pub metric: String,
    pub values: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub table_1: Table,
    pub table_2: Table,
    pub table_3: Table,
    pub table_4: Option<Table>,
    pub radar: Vec<RadarRow>,
}

/// Mean of accuracy, precision and AUC; absent if any of them is.
pub fn average_score(v: &MetricValues) -> Option<f64> {
    Some((v.accuracy? + v.precision? + v.auc?) / 3.0)
}

fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Builds the report; file sources are resolved relative to `base`.
pub fn build_report(input: &ReportInput, base: &Path) -> Result<Report> {
    let resolve = |s: &Option<MetricSource>| -> Result<MetricValues> {
        s.as_ref().map(|s| s.resolve(base)).transpose().map(Option::unwrap_or_default)
    };
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut t3 = Vec::new();
    let mut radar_sets: Vec<(String, MetricValues, MetricValues, MetricValues)> = Vec::new();
    for m in &input.methods {
        let (mixed, cf, cv) = (resolve(&m.mixed_frame)?, resolve(&m.cross_frame)?, resolve(&m.cross_video)?);
        let name = Cell::Text(m.method.clone());
        t1.push(vec![
            name.clone(),
            Cell::Number(mixed.accuracy),
            Cell::Number(mixed.precision),
            Cell::Number(mixed.auc),
            Cell::Number(average_score(&mixed)),
        ]);
        t2.push(vec![name.clone(), Cell::Number(cf.auc), Cell::Number(cf.eer)]);
        t3.push(vec![name, Cell::Number(cv.auc), Cell::Number(cv.eer)]);
        radar_sets.push((m.method.clone(), mixed, cf, cv));
    }
    let table_4 = input.ablation.as_ref().map(|rows| Table {
        caption: "Module ablation, frame level".into(),
        columns: columns(&["global", "local", "ifc", "auc", "eer"]),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Flag(r.global_on),
                    Cell::Flag(r.local_on),
                    Cell::Flag(r.ifc_on),
                    Cell::Number(Some(r.auc)),
                    Cell::Number(Some(r.eer)),
                ]
            })
            .collect(),
    });

    type Pick = fn(&MetricValues) -> Option<f64>;
    let metric_rows: [(&str, &str, usize, Pick); 7] = [
        ("mixed_frame", "accuracy", 0, |v| v.accuracy),
        ("mixed_frame", "precision", 0, |v| v.precision),
        ("mixed_frame", "auc", 0, |v| v.auc),
        ("cross_frame", "auc", 1, |v| v.auc),
        ("cross_frame", "eer", 1, |v| v.eer),
        ("cross_video", "auc", 2, |v| v.auc),
        ("cross_video", "eer", 2, |v| v.eer),
    ];
    let radar = metric_rows
        .iter()
        .map(|&(setting, metric, slot, pick)| RadarRow {
            setting: setting.into(),
            metric: metric.into(),
            values: radar_sets
                .iter()
                .map(|(name, a, b, c)| (name.clone(), pick([a, b, c][slot])))
                .collect(),
        })
        .collect();

    Ok(Report {
        table_1: Table {
            caption: "Frame level, mixed dataset".into(),
            columns: columns(&["method", "acc", "precision", "auc", "avg"]),
            rows: t1,
        },
        table_2: Table {
            caption: "Frame level, cross-dataset".into(),
            columns: columns(&["method", "auc", "eer"]),
            rows: t2,
        },
        table_3: Table {
            caption: "Video level, cross-dataset".into(),
            columns: columns(&["method", "auc", "eer"]),
            rows: t3,
        },
        table_4,
        radar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(acc: f64, prec: f64, auc: f64) -> MetricValues {
        MetricValues {
            accuracy: Some(acc),
            precision: Some(prec),
            auc: Some(auc),
            eer: None,
        }
    }

    #[test]
    fn avg_column_matches_published_rows() {
        // (acc, precision, auc, avg) rows of the mixed-dataset comparison
        let rows = [
            (0.955, 0.897, 0.962, 0.938),
            (0.967, 0.931, 0.960, 0.953),
            (0.941, 0.868, 0.959, 0.923),
            (0.968, 0.932, 0.954, 0.951),
            (0.983, 0.963, 0.976, 0.974),
        ];
        for (a, p, u, avg) in rows {
            let got = average_score(&values(a, p, u)).unwrap();
            assert!((got - avg).abs() <= 0.0005 + 1e-9, "{got} vs {avg}");
        }
    }

    #[test]
    fn report_shape() {
        let input = ReportInput {
            methods: vec![
                MethodEntry {
                    method: "a".into(),
                    mixed_frame: Some(MetricSource::Values(values(0.9, 0.8, 0.95))),
                    cross_frame: None,
                    cross_video: None,
                },
                MethodEntry {
                    method: "b".into(),
                    mixed_frame: None,
                    cross_frame: None,
                    cross_video: None,
                },
            ],
            ablation: None,
        };
        let r = build_report(&input, Path::new(".")).unwrap();
        assert_eq!(r.table_1.columns.len(), 5);
        assert_eq!(r.table_1.rows.len(), 2);
        assert_eq!(r.table_2.columns, ["method", "auc", "eer"]);
        assert_eq!(r.table_1.rows[1][4], Cell::Number(None));
        assert_eq!(r.radar.len(), 7);
        assert!(r.table_4.is_none());
    }

    #[test]
    fn untagged_sources_parse() {
        let json = r#"{"methods":[{"method":"m","mixed_frame":{"file":"x.json"},"cross_frame":{"auc":0.8,"eer":0.2}}]}"#;
        let input: ReportInput = serde_json::from_str(json).unwrap();
        assert!(matches!(input.methods[0].mixed_frame, Some(MetricSource::File { .. })));
        assert!(matches!(input.methods[0].cross_frame, Some(MetricSource::Values(_))));
    }
}
