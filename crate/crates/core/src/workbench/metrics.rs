//! Metrics CSV with a fixed column order and a JSON summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{ClaspError, Result};
use crate::trainer::MetricsRow;

/// Column names for a model with `stages` MoE stages.
pub fn header(stages: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["step", "lr", "dino", "part", "attribute", "balancing", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..stages).map(|i| format!("cv2_imp_s{i}")));
    cols.extend(["gcr", "ead_01", "ead_02", "ead_12", "wall_time"].iter().map(|s| s.to_string()));
    cols
}

/// Row values in header order; absent diagnostics are `None`.
pub fn row_values(row: &MetricsRow) -> Vec<Option<f64>> {
    let mut v = vec![
        Some(row.step as f64),
        Some(row.lr),
        Some(row.loss.dino),
        Some(row.loss.part),
        Some(row.loss.attribute),
        Some(row.loss.balancing),
        Some(row.loss.total),
    ];
    v.extend(row.cv2_importance.iter().map(|c| Some(*c)));
    v.push(row.gcr);
    match row.ead {
        Some(e) => v.extend(e.iter().map(|x| Some(*x))),
        None => v.extend([None, None, None]),
    }
    v.push(Some(row.wall_time));
    v
}

fn check_history(history: &[MetricsRow]) -> Result<usize> {
    let first = history
        .first()
        .ok_or_else(|| ClaspError::Usage("cannot export an empty history".into()))?;
    let stages = first.cv2_importance.len();
    for w in history.windows(2) {
        if w[1].step <= w[0].step {
            return Err(ClaspError::Invariant(format!("steps not increasing at {}", w[1].step)));
        }
    }
    if history.iter().any(|r| r.cv2_importance.len() != stages) {
        return Err(ClaspError::Structural("rows disagree on stage count".into()));
    }
    Ok(stages)
}

pub fn metrics_csv(history: &[MetricsRow]) -> Result<String> {
    let stages = check_history(history)?;
    let mut out = header(stages).join(",");
    out.push('\n');
    for row in history {
        let cells: Vec<String> = row_values(row)
            .into_iter()
            .enumerate()
            .map(|(i, v)| match (i, v) {
                (0, _) => row.step.to_string(),
                (_, Some(x)) => format!("{x:e}"),
                (_, None) => String::new(),
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub final_value: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Final, min and max per column over the rows where the column is present.
pub fn summarize(history: &[MetricsRow]) -> Result<BTreeMap<String, ColumnSummary>> {
    let stages = check_history(history)?;
    let names = header(stages);
    let rows: Vec<Vec<Option<f64>>> = history.iter().map(row_values).collect();
    let mut out = BTreeMap::new();
    for (c, name) in names.into_iter().enumerate() {
        let present: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
        out.insert(
            name,
            ColumnSummary {
                final_value: present.last().copied(),
                min: present.iter().copied().reduce(f64::min),
                max: present.iter().copied().reduce(f64::max),
            },
        );
    }
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.summary.json` into `dir`.
pub fn export_metrics(history: &[MetricsRow], dir: &Path, stem: &str) -> Result<()> {
    let csv = metrics_csv(history)?;
    let summary = summarize(history)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(dir.join(format!("{stem}.summary.json")), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    fn row(step: u64, total: f64, gcr: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            lr: 1e-3,
            loss: LossBreakdown {
                dino: total,
                part: 0.0,
                attribute: 0.0,
                balancing: 0.0,
                total,
            },
            cv2_importance: vec![0.1, 0.2],
            gcr,
            ead: gcr.map(|g| [g, 0.5, 0.7]),
            wall_time: 0.0,
        }
    }

    #[test]
    fn one_row_gives_two_lines() {
        let csv = metrics_csv(&[row(1, 2.0, None)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "step,lr,dino,part,attribute,balancing,total,cv2_imp_s0,cv2_imp_s1,gcr,ead_01,ead_02,ead_12,wall_time"
        );
        assert_eq!(lines[1].split(',').count(), 14);
        assert!(lines[1].starts_with("1,1e-3,2e0,"));
    }

    #[test]
    fn summary_bounds_every_value() {
        let h = vec![row(1, 3.0, None), row(2, 1.0, Some(0.25)), row(3, 2.0, None)];
        let s = summarize(&h).unwrap();
        assert_eq!(s["total"].min, Some(1.0));
        assert_eq!(s["total"].max, Some(3.0));
        assert_eq!(s["total"].final_value, Some(2.0));
        assert_eq!(s["gcr"].final_value, Some(0.25));
        for r in &h {
            for (name, v) in header(2).iter().zip(row_values(r)) {
                if let Some(v) = v {
                    assert!(s[name].min.unwrap() <= v && v <= s[name].max.unwrap());
                }
            }
        }
    }

    #[test]
    fn export_is_byte_stable() {
        let h = vec![row(1, 3.0, None), row(2, 1.0, Some(0.25))];
        let dir = tempfile::tempdir().unwrap();
        export_metrics(&h, dir.path(), "m").unwrap();
        let a = (fs::read(dir.path().join("m.csv")).unwrap(), fs::read(dir.path().join("m.summary.json")).unwrap());
        export_metrics(&h, dir.path(), "m").unwrap();
        let b = (fs::read(dir.path().join("m.csv")).unwrap(), fs::read(dir.path().join("m.summary.json")).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_and_unordered() {
        assert!(metrics_csv(&[]).is_err());
        assert!(metrics_csv(&[row(2, 1.0, None), row(2, 1.0, None)]).is_err());
    }
}
