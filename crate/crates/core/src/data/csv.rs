//! Header-less CSV: `label, feature_1, …, feature_d` per row.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::Data(format!("row {}: needs a label and a feature", line + 1)));
        }
        let d = *dim.get_or_insert(record.len() - 1);
        if record.len() - 1 != d {
            return Err(Error::Data(format!(
                "row {}: {} features, expected {d}",
                line + 1,
                record.len() - 1
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad label {:?}", line + 1, &record[0])))?;
        labels.push(label);
        for cell in record.iter().skip(1) {
            data.push(
                cell.parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {}: non-numeric cell {cell:?}", line + 1)))?,
            );
        }
    }
    let Some(d) = dim else {
        return Err(Error::Data(format!("{} is empty", path.display())));
    };
    Dataset::new(Tensor::new(vec![labels.len(), d], data)?, labels, num_classes)
}

/// Writes flattened samples in the format read by [`load_csv`].
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = ::csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Data(e.to_string()))?;
    for (row, y) in dataset.inputs().rows().zip(dataset.labels()) {
        let mut fields = vec![y.to_string()];
        fields.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn three_rows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "0,1.5,2\n1,0,-1\n2,3,4\n").unwrap();
        let d = load_csv(&p, 3).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.inputs().shape(), &[3, 2]);

        fs::write(&p, "").unwrap();
        assert!(load_csv(&p, 3).is_err());
        fs::write(&p, "0,1,2\n1,0\n").unwrap();
        assert!(load_csv(&p, 3).is_err());
        fs::write(&p, "0,1,x\n").unwrap();
        assert!(load_csv(&p, 3).is_err());
        fs::write(&p, "3,1,2\n").unwrap();
        assert!(load_csv(&p, 3).is_err());
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = crate::data::generate_gaussian_mixture(3, 4, 5, 2.0, 1).unwrap();
        write_csv(&d, &p).unwrap();
        assert_eq!(load_csv(&p, 3).unwrap(), d);
    }
}
