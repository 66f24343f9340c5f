use super::{
    GeneratorId, SequentialDataset, SequentialSample, SyntheticBConfig, SyntheticDataset,
    SyntheticSample,
};
use crate::error::{invalid, Result, StedrError};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Covariate matrix with names and an optional treatment column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub treatment: Option<Vec<u8>>,
}

/// Reads a comma-separated table whose first row holds column names.
/// A column named `treatment_column` (if present) becomes the treatment vector.
pub fn read_covariate_csv(path: &Path, treatment_column: &str) -> Result<CovariateTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let t_idx = headers.iter().position(|h| h == treatment_column);
    let names = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != t_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows = Vec::new();
    let mut treatment = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(headers.len());
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                StedrError::InvalidArgument(format!("row {}: cannot parse {field:?}", line + 2))
            })?;
            if !v.is_finite() {
                return invalid(format!("row {}: non-finite value", line + 2));
            }
            if Some(i) == t_idx {
                if v != 0.0 && v != 1.0 {
                    return invalid(format!("row {}: treatment must be 0 or 1", line + 2));
                }
                treatment.push(v as u8);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return invalid("covariate table has no rows");
    }
    Ok(CovariateTable {
        names,
        rows,
        treatment: t_idx.map(|_| treatment),
    })
}

/// Any dataset that can be written as JSON lines.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFile {
    Static(SyntheticDataset),
    Sequential(SequentialDataset),
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        match self {
            DatasetFile::Static(d) => d.samples.len(),
            DatasetFile::Sequential(d) => d.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    generator: String,
    seed: u64,
    n: usize,
    covariate_names: Vec<String>,
    coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence_config: Option<SyntheticBConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Covariates {
    Static(Vec<f64>),
    Sequence(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Line {
    x: Covariates,
    t: u8,
    y: f64,
    mu0: f64,
    mu1: f64,
}

fn generator_name(g: GeneratorId) -> &'static str {
    match g {
        GeneratorId::A => "a",
        GeneratorId::B => "b",
        GeneratorId::ResponseSurfaceB => "response_surface_b",
    }
}

/// Path of the metadata file that accompanies a JSON-lines file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Writes one `{x, t, y, mu0, mu1}` line per sample; generator metadata goes
/// to the `.meta.json` sidecar.
pub fn write_dataset(path: &Path, data: &DatasetFile) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let (header, lines): (Header, Vec<Line>) = match data {
        DatasetFile::Static(d) => (
            Header {
                generator: generator_name(d.generator_id).into(),
                seed: d.seed,
                n: d.samples.len(),
                covariate_names: d.covariate_names.clone(),
                coefficients: d.coefficients.clone(),
                sequence_config: None,
            },
            d.samples
                .iter()
                .map(|s| Line {
                    x: Covariates::Static(s.covariates.clone()),
                    t: s.treatment,
                    y: s.observed_outcome,
                    mu0: s.mu0,
                    mu1: s.mu1,
                })
                .collect(),
        ),
        DatasetFile::Sequential(d) => (
            Header {
                generator: generator_name(GeneratorId::B).into(),
                seed: d.seed,
                n: d.samples.len(),
                covariate_names: d.covariate_names.clone(),
                coefficients: d.coefficients.clone(),
                sequence_config: Some(d.config.clone()),
            },
            d.samples
                .iter()
                .map(|s| Line {
                    x: Covariates::Sequence(s.covariate_history.clone()),
                    t: s.treatment,
                    y: s.observed_outcome,
                    mu0: s.mu0,
                    mu1: s.mu1,
                })
                .collect(),
        ),
    };
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&header)?)?;
    for line in &lines {
        serde_json::to_writer(&mut w, line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let meta = meta_path(path);
    let header: Header = match std::fs::read(&meta) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) => return invalid(format!("cannot read metadata {}: {e}", meta.display())),
    };
    let lines = BufReader::new(std::fs::File::open(path)?).lines();
    let mut parsed = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        if l.t > 1 {
            return invalid("treatment must be 0 or 1");
        }
        parsed.push(l);
    }
    if parsed.len() != header.n {
        return invalid(format!("header announces {} samples, found {}", header.n, parsed.len()));
    }
    let generator = match header.generator.as_str() {
        "a" => GeneratorId::A,
        "b" => GeneratorId::B,
        "response_surface_b" => GeneratorId::ResponseSurfaceB,
        other => return invalid(format!("unknown generator {other:?}")),
    };
    if generator == GeneratorId::B {
        let samples = parsed
            .into_iter()
            .map(|l| match l.x {
                Covariates::Sequence(h) => Ok(SequentialSample {
                    timesteps: h.len(),
                    covariate_history: h,
                    treatment: l.t,
                    observed_outcome: l.y,
                    mu0: l.mu0,
                    mu1: l.mu1,
                    true_effect: l.mu1 - l.mu0,
                }),
                Covariates::Static(_) => invalid("sequential dataset line holds a flat vector"),
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DatasetFile::Sequential(SequentialDataset {
            samples,
            covariate_names: header.covariate_names,
            seed: header.seed,
            coefficients: header.coefficients,
            config: header.sequence_config.unwrap_or_default(),
        }));
    }
    let samples = parsed
        .into_iter()
        .map(|l| match l.x {
            Covariates::Static(x) => Ok(SyntheticSample::new(x, l.t, l.y, l.mu0, l.mu1)),
            Covariates::Sequence(_) => invalid("static dataset line holds a sequence"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetFile::Static(SyntheticDataset {
        samples,
        covariate_names: header.covariate_names,
        generator_id: generator,
        seed: header.seed,
        coefficients: header.coefficients,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_a, generate_synthetic_b};

    #[test]
    fn static_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let ds = generate_synthetic_a(50, 1).unwrap();
        write_dataset(&path, &DatasetFile::Static(ds.clone())).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 50);
        assert_eq!(read_dataset(&path).unwrap(), DatasetFile::Static(ds));
        std::fs::remove_file(meta_path(&path)).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn sequential_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        let ds = generate_synthetic_b(20, 1).unwrap();
        write_dataset(&path, &DatasetFile::Sequential(ds.clone())).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), DatasetFile::Sequential(ds));
    }

    #[test]
    fn csv_with_treatment_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "a,treatment,b\n1.0,1,2\n3,0,4.5\n").unwrap();
        let t = read_covariate_csv(&path, "treatment").unwrap();
        assert_eq!(t.names, vec!["a", "b"]);
        assert_eq!(t.rows, vec![vec![1.0, 2.0], vec![3.0, 4.5]]);
        assert_eq!(t.treatment, Some(vec![1, 0]));
        std::fs::write(&path, "a,b\n1,nan\n").unwrap();
        assert!(read_covariate_csv(&path, "treatment").is_err());
    }
}
