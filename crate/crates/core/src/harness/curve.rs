use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const CURVE_HEADER: &str = "iteration,train_accuracy,val_accuracy,loss";
pub const AGGREGATE_HEADER: &str = "iteration,mean,min,max";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: u64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub loss: f64,
}

impl CurveRow {
    fn line(&self) -> String {
        format!(
            "{},{},{},{}\n",
            self.iteration, self.train_accuracy, self.val_accuracy, self.loss
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curve {
    pub rows: Vec<CurveRow>,
}

impl Curve {
    pub fn read(path: &Path) -> Result<Curve, HarnessError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        let header = reader.headers().map_err(|e| HarnessError::Data(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>().join(",") != CURVE_HEADER {
            return Err(HarnessError::Data(format!("{}: unexpected header", path.display())));
        }
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<CurveRow>, _>>()
            .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        Ok(Curve { rows })
    }

    /// Rewrites the whole file.
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for r in &self.rows {
            text.push_str(&r.line());
        }
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_accuracy)
    }

    /// Grid and range invariants: strictly increasing iterations and
    /// accuracies in `[0, 1]`.
    pub fn is_well_formed(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].iteration < w[1].iteration)
            && self.rows.iter().all(|r| {
                (0.0..=1.0).contains(&r.train_accuracy) && (0.0..=1.0).contains(&r.val_accuracy)
            })
    }
}

/// Append-only curve file; each row is written with one call and flushed.
pub struct CurveWriter {
    file: File,
}

impl CurveWriter {
    /// Opens for appending, writing the header to a new file.
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            file.write_all(format!("{CURVE_HEADER}\n").as_bytes())?;
            file.flush()?;
        }
        Ok(CurveWriter { file })
    }

    pub fn append(&mut self, row: &CurveRow) -> Result<(), HarnessError> {
        self.file.write_all(row.line().as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iteration: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Row-wise mean, minimum and maximum of validation accuracy over seeds.
pub fn aggregate_runs(curves: &[Curve]) -> Result<Vec<AggregateRow>, HarnessError> {
    let Some(first) = curves.first() else {
        return Err(HarnessError::Config("no curves to aggregate".into()));
    };
    for c in curves {
        if c.rows.len() != first.rows.len()
            || c.rows.iter().zip(&first.rows).any(|(a, b)| a.iteration != b.iteration)
        {
            return Err(HarnessError::Data("curves have different iteration grids".into()));
        }
    }
    Ok((0..first.rows.len())
        .map(|i| {
            let vals: Vec<f64> = curves.iter().map(|c| c.rows[i].val_accuracy).collect();
            AggregateRow {
                iteration: first.rows[i].iteration,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from(AGGREGATE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.iteration, r.mean, r.min, r.max));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<AggregateRow>, _>>()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(vals: &[f64]) -> Curve {
        Curve {
            rows: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| CurveRow {
                    iteration: (i as u64 + 1) * 250,
                    train_accuracy: v,
                    val_accuracy: v,
                    loss: 1.0 - v,
                })
                .collect(),
        }
    }

    #[test]
    fn aggregation_arithmetic() {
        let rows = aggregate_runs(&[curve(&[0.6]), curve(&[0.7]), curve(&[0.8])]).unwrap();
        assert!((rows[0].mean - 0.7).abs() < 1e-12);
        assert_eq!((rows[0].min, rows[0].max), (0.6, 0.8));
        let same = aggregate_runs(&vec![curve(&[0.5, 0.9]); 3]).unwrap();
        assert!(same.iter().all(|r| r.mean == r.min && r.min == r.max));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        assert!(aggregate_runs(&[curve(&[0.5, 0.6]), curve(&[0.5])]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let c = curve(&[0.51, 0.625, 0.8125]);
        let mut w = CurveWriter::open(&path).unwrap();
        for r in &c.rows {
            w.append(r).unwrap();
        }
        assert_eq!(Curve::read(&path).unwrap(), c);
        assert!(c.is_well_formed());
        let agg = aggregate_runs(&[c.clone()]).unwrap();
        let ap = dir.path().join("a.csv");
        write_aggregate(&agg, &ap).unwrap();
        assert_eq!(read_aggregate(&ap).unwrap(), agg);
    }
}
