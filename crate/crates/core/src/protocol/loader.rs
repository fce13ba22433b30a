//! Feature-vector dataset readers and writers.
//!
//! Three sources are supported:
//! - a directory tree `<root>/<class_id>/<file>` where each file holds one
//!   feature vector as whitespace- or comma-separated numbers
//! - CSV with columns `label, f0, f1, ...` and an optional header row
//! - a binary feature file: magic `S2CFEAT\0`, u32 version, u64 count,
//!   u64 dim, then `count` records of `u32 label` + `dim` f64, all LE

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;

use super::{ClassId, LabeledDataset};
use crate::{Error, Result};

const FEATURE_MAGIC: &[u8; 8] = b"S2CFEAT\0";
const FEATURE_VERSION: u32 = 1;

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format("feature vector", format!("not a number: {t:?}")))
        })
        .collect()
}

fn check_dim(dim: &mut Option<usize>, got: usize) -> Result<()> {
    match *dim {
        None if got == 0 => Err(Error::format("feature vector", "empty vector")),
        None => {
            *dim = Some(got);
            Ok(())
        }
        Some(d) if d == got => Ok(()),
        Some(d) => Err(Error::ShapeMismatch { expected: d, got }),
    }
}

pub fn load_directory(root: impl AsRef<Path>) -> Result<LabeledDataset<Array1<f64>>> {
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root.as_ref())? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let id: u32 = name
            .parse()
            .map_err(|_| Error::format("dataset directory", format!("class dir {name:?} is not an integer")))?;
        class_dirs.push((id, entry.path()));
    }
    class_dirs.sort();

    let mut dim = None;
    let mut samples = Vec::new();
    for (id, dir) in class_dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        files.sort();
        for file in files {
            let v = parse_vector(&fs::read_to_string(&file)?)?;
            check_dim(&mut dim, v.len())?;
            samples.push((Array1::from(v), ClassId(id)));
        }
    }
    Ok(LabeledDataset::new(samples))
}

pub fn load_csv(reader: impl Read) -> Result<LabeledDataset<Array1<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut dim = None;
    let mut samples = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::format("feature csv", e.to_string()))?;
        let mut fields = record.iter();
        let label = fields.next().unwrap_or("");
        let label: u32 = match label.parse() {
            Ok(v) => v,
            Err(_) if row == 0 => continue, // header
            Err(_) => return Err(Error::format("feature csv", format!("row {row}: bad label {label:?}"))),
        };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("feature csv", format!("row {row}: {e}")))?;
        check_dim(&mut dim, values.len())?;
        samples.push((Array1::from(values), ClassId(label)));
    }
    Ok(LabeledDataset::new(samples))
}

pub fn write_csv(dataset: &LabeledDataset<Array1<f64>>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = dataset.samples().first().map_or(0, |(x, _)| x.len());
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (x, y) in dataset.samples() {
        let mut row = vec![y.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("feature csv", e.to_string())
}

pub fn write_feature_binary(dataset: &LabeledDataset<Array1<f64>>, mut w: impl Write) -> Result<()> {
    let dim = dataset.samples().first().map_or(0, |(x, _)| x.len());
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    for (x, y) in dataset.samples() {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        w.write_all(&y.0.to_le_bytes())?;
        for v in x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_feature_binary(mut r: impl Read) -> Result<LabeledDataset<Array1<f64>>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("feature file", "bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_VERSION {
        return Err(Error::format("feature file", format!("unsupported version {version}")));
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8) as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let label = ClassId(u32::from_le_bytes(b4));
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b8)?;
            v.push(f64::from_le_bytes(b8));
        }
        samples.push((Array1::from(v), label));
    }
    Ok(LabeledDataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> LabeledDataset<Array1<f64>> {
        LabeledDataset::new(vec![
            (array![1.0, -2.5, 0.125], ClassId(3)),
            (array![0.1, 0.2, 0.3], ClassId(1)),
            (array![1e-9, 4.0, -0.0], ClassId(3)),
        ])
    }

    #[test]
    fn csv_round_trip() {
        let d = sample();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert!(buf.starts_with(b"label,f0,f1,f2\n"));
        assert_eq!(load_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn csv_without_header_and_ragged_rows() {
        let d = load_csv("0, 1.0, 2.0\n1, 3.0, 4.0\n".as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        let err = load_csv("0,1,2\n1,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format { .. } | Error::ShapeMismatch { .. }));
    }

    #[test]
    fn binary_round_trip() {
        let d = sample();
        let mut buf = Vec::new();
        write_feature_binary(&d, &mut buf).unwrap();
        assert_eq!(load_feature_binary(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (class, files) in [(7u32, vec!["1 2", "3,4"]), (2, vec!["5\t6\n"])] {
            let cdir = dir.path().join(class.to_string());
            std::fs::create_dir(&cdir).unwrap();
            for (i, body) in files.iter().enumerate() {
                std::fs::write(cdir.join(format!("s{i}.txt")), body).unwrap();
            }
        }
        let d = load_directory(dir.path()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels().collect::<Vec<_>>(), vec![ClassId(2), ClassId(7)]);
        assert_eq!(d.sample(0).0, array![5.0, 6.0]);
        assert_eq!(d.class_size(ClassId(7)), 2);
    }
}
