//! CSV tables exchanged between pipeline stages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossval::FeatureRow;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, RelativeF1};
use crate::quality::{PredictionRecord, QualityEval};
use crate::segnet::MarkerSet;

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_eval_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_records(path: &Path) -> Result<Vec<EvalRecord>> {
    reader(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    patch_id: String,
    combo_mask: u32,
    fold: usize,
    q_true: f64,
    q_pred: f64,
    regressor_name: String,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(PredictionRow {
            patch_id: r.patch_id.clone(),
            combo_mask: r.availability.bits(),
            fold: r.fold,
            q_true: r.q_true,
            q_pred: r.q_pred,
            regressor_name: r.regressor.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    reader(path)?
        .deserialize()
        .map(|row| {
            let r: PredictionRow = row?;
            Ok(PredictionRecord {
                patch_id: r.patch_id,
                availability: MarkerSet::from_bits(r.combo_mask),
                fold: r.fold,
                q_true: r.q_true,
                q_pred: r.q_pred,
                regressor: r.regressor_name,
            })
        })
        .collect()
}

/// Feature columns, then `target_f1`, `patch_id`, `fold`.
pub fn write_features(path: &Path, names: &[String], rows: &[FeatureRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.extend(["target_f1", "patch_id", "fold"]);
    w.write_record(&header)?;
    for r in rows {
        if r.values.len() != names.len() {
            return Err(Error::shape(format!("feature row of {} values for {} columns", r.values.len(), names.len())));
        }
        let mut rec: Vec<String> = r.values.iter().map(f64::to_string).collect();
        rec.extend([r.target.to_string(), r.patch_id.clone(), r.fold.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the feature column names and the rows.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Vec<FeatureRow>)> {
    let mut r = reader(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[header.len() - 3..] != ["target_f1", "patch_id", "fold"] {
        return Err(Error::format(path, "feature table must end with target_f1, patch_id, fold"));
    }
    let p = header.len() - 3;
    let bad = |e: String| Error::format(path, e);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        rows.push(FeatureRow {
            values: rec.iter().take(p).map(num).collect::<Result<_>>()?,
            target: num(&rec[p])?,
            patch_id: rec[p + 1].to_string(),
            fold: rec[p + 2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        });
    }
    Ok((header[..p].to_vec(), rows))
}

pub fn write_deltas(path: &Path, rel: &RelativeF1) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["patch_id", "availability", "fold", "delta_f1"])?;
    for (id, a, fold, d) in &rel.deltas {
        w.write_record([id.clone(), a.to_string(), fold.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_per_combination(path: &Path, evals: &BTreeMap<String, QualityEval>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["regressor", "combination", "folds", "mean_pred", "sd_pred", "mean_true", "sd_true"])?;
    for (name, e) in evals {
        for c in &e.per_combination {
            w.write_record([
                name.clone(),
                c.combination.to_string(),
                c.folds.to_string(),
                c.mean_pred.to_string(),
                c.sd_pred.to_string(),
                c.mean_true.to_string(),
                c.sd_true.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_and_eval_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![PredictionRecord {
            patch_id: "s7_p001".into(),
            availability: "m135".parse().unwrap(),
            fold: 2,
            q_true: 0.123456789012345,
            q_pred: -0.01,
            regressor: "rf_both".into(),
        }];
        let p = dir.path().join("p.csv");
        write_predictions(&p, &preds).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), preds);
        let head = fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("patch_id,combo_mask,fold,q_true,q_pred,regressor_name\ns7_p001,21,"));
        let recs = vec![EvalRecord {
            patch_id: "s8_p000".into(),
            availability: MarkerSet::all(5),
            fold: 0,
            model: "mc_dropout".into(),
            f1: 2.0 / 3.0,
        }];
        let e = dir.path().join("e.csv");
        write_eval_records(&e, &recs).unwrap();
        assert_eq!(read_eval_records(&e).unwrap(), recs);
        assert!(read_predictions(&dir.path().join("none.csv")).unwrap_err().is_missing_input());
    }

    #[test]
    fn feature_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let rows = vec![FeatureRow {
            values: vec![0.1, 1.0 / 3.0],
            target: 0.75,
            patch_id: "x".into(),
            fold: 1,
        }];
        let p = dir.path().join("f.csv");
        write_features(&p, &names, &rows).unwrap();
        assert_eq!(read_features(&p).unwrap(), (names, rows));
    }
}
