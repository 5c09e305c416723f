//! On-disk dataset format: a features CSV, a GloVe-style semantics text file
//! and a split CSV. Class ids are assigned in split-file order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassId, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::semantics::SemanticStore;

/// The three files that make up a dataset on disk.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub features: PathBuf,
    pub semantics: PathBuf,
    pub split: PathBuf,
}

impl DataFiles {
    /// Conventional file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.csv"),
            semantics: dir.join("semantics.txt"),
            split: dir.join("split.csv"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn save_csv(ds: &Dataset, store: &SemanticStore, files: &DataFiles) -> Result<()> {
    let mut split = String::new();
    for (i, name) in ds.class_names().iter().enumerate() {
        writeln!(split, "{name},{}", ds.split_of(ClassId(i)).as_str()).unwrap();
    }

    let mut sem = String::new();
    for (i, name) in ds.class_names().iter().enumerate() {
        let v = store
            .vector(ClassId(i))
            .ok_or_else(|| Error::MissingClass(name.clone()))?;
        sem.push_str(name);
        for x in v {
            write!(sem, " {x}").unwrap();
        }
        sem.push('\n');
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend((0..ds.d_x()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut rec = vec![ds.class_name(s.class).to_string()];
        rec.extend(s.features.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    let features = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv buffer: {e}")))?;

    write(&files.split, &split)?;
    write(&files.semantics, &sem)?;
    fs::write(&files.features, features).map_err(|e| Error::io(&files.features, e))
}

fn parse_f64(token: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| {
        Error::Data(format!(
            "{}: line {line}: `{token}` is not a number",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!(
            "{}: line {line}: non-finite value",
            path.display()
        )));
    }
    Ok(v)
}

pub fn load_csv(files: &DataFiles) -> Result<(Dataset, SemanticStore)> {
    let mut names = Vec::new();
    let mut splits = Vec::new();
    let mut ids: HashMap<String, ClassId> = HashMap::new();
    for (i, line) in read(&files.split)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Data(format!(
                "{}: line {}: expected `<class>,<base|val|novel>`",
                files.split.display(),
                i + 1
            ))
        };
        let (name, label) = line.split_once(',').ok_or_else(bad)?;
        let split = Split::parse(label.trim()).ok_or_else(bad)?;
        let name = name.trim().to_string();
        if ids.insert(name.clone(), ClassId(names.len())).is_some() {
            return Err(Error::Data(format!(
                "{}: class `{name}` listed twice",
                files.split.display()
            )));
        }
        names.push(name);
        splits.push(split);
    }

    let mut vectors: HashMap<ClassId, Vec<f64>> = HashMap::new();
    let mut d_s = None;
    for (i, line) in read(&files.semantics)?.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let Some(word) = tokens.next() else { continue };
        // Vocabulary entries that are not dataset classes are skipped.
        let Some(&id) = ids.get(word) else { continue };
        let v = tokens
            .map(|t| parse_f64(t, &files.semantics, i + 1))
            .collect::<Result<Vec<f64>>>()?;
        match d_s {
            None => d_s = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::Data(format!(
                    "{}: line {}: vector has {} components, expected {d}",
                    files.semantics.display(),
                    i + 1,
                    v.len()
                )))
            }
            _ => {}
        }
        vectors.insert(id, v);
    }
    let mut store = SemanticStore::new(d_s.unwrap_or(0));
    for (i, name) in names.iter().enumerate() {
        let v = vectors
            .remove(&ClassId(i))
            .ok_or_else(|| Error::MissingClass(name.clone()))?;
        store.insert(ClassId(i), name, v)?;
    }

    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&files.features)?;
    let width = reader.headers()?.len();
    if reader.headers()?.get(0).map(str::trim) != Some("class") {
        return Err(Error::Data(format!(
            "{}: header must start with `class`",
            files.features.display()
        )));
    }
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Data(format!(
                "{}: line {line}: {} fields, header has {width}",
                files.features.display(),
                rec.len()
            )));
        }
        let name = rec[0].trim();
        let class = *ids.get(name).ok_or_else(|| {
            Error::Data(format!(
                "{}: line {line}: class `{name}` not in split file",
                files.features.display()
            ))
        })?;
        let features = rec
            .iter()
            .skip(1)
            .map(|t| parse_f64(t, &files.features, line))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { features, class });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{}: no samples",
            files.features.display()
        )));
    }

    let ds = Dataset::new(samples, names, splits)?;
    for (i, name) in ds.class_names().iter().enumerate() {
        if ds.samples_of(ClassId(i)).is_empty() {
            return Err(Error::Data(format!(
                "class `{name}` has no samples in {}",
                files.features.display()
            )));
        }
    }
    Ok((ds, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_blobs, BlobSpec, SplitCounts};

    fn files(dir: &Path, features: &str, semantics: &str, split: &str) -> DataFiles {
        let f = DataFiles::in_dir(dir);
        fs::write(&f.features, features).unwrap();
        fs::write(&f.semantics, semantics).unwrap();
        fs::write(&f.split, split).unwrap();
        f
    }

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = files(
            dir.path(),
            "class,f0,f1\ncat,1.0,2.0\ndog,3,4\ncat,5,6.5\n",
            "cat 0.1 0.2\ndog -0.3 0.4\nsofa 1 1\n",
            "cat,base\ndog,novel\n",
        );
        let (ds, store) = load_csv(&f).unwrap();
        assert_eq!(ds.samples().len(), 3);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.split_of(ClassId(1)), Split::Novel);
        assert_eq!(ds.sample(2).features, vec![5.0, 6.5]);
        assert_eq!(store.vector(ClassId(1)).unwrap(), &[-0.3, 0.4]);
    }

    #[test]
    fn header_only_is_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        let f = files(dir.path(), "class,f0\n", "cat 1 0\n", "cat,base\n");
        let err = load_csv(&f).unwrap_err().to_string();
        assert!(err.contains("no samples"), "{err}");
    }

    #[test]
    fn missing_semantic_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let f = files(
            dir.path(),
            "class,f0\ncat,1\ndog,2\n",
            "cat 1 0\n",
            "cat,base\ndog,base\n",
        );
        let err = load_csv(&f).unwrap_err().to_string();
        assert!(err.contains("dog"), "{err}");
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = files(
            dir.path(),
            "class,f0,f1\ncat,1,2\ncat,3\n",
            "cat 1 0\n",
            "cat,base\n",
        );
        let err = load_csv(&f).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = BlobSpec {
            split: SplitCounts {
                base: 3,
                val: 1,
                novel: 2,
            },
            samples_per_class: 7,
            ..BlobSpec::default()
        };
        let (ds, store) = generate_blobs(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = DataFiles::in_dir(dir.path());
        save_csv(&ds, &store, &f).unwrap();
        let (ds2, store2) = load_csv(&f).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(store, store2);
    }
}
