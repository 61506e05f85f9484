use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use crate::error::{Error, Result};

/// Row-major `len × dim` matrix of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("sample dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        assert!(dim > 0, "dim must be > 0");
        Self {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        assert!(dim > 0, "dim must be > 0");
        Self {
            dim,
            data: Vec::with_capacity(rows * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row length must equal dim");
        self.data.extend_from_slice(row);
    }

    pub fn extend(&mut self, other: &Samples) {
        assert_eq!(other.dim, self.dim, "dimension mismatch");
        self.data.extend_from_slice(&other.data);
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Samples {
        Samples {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Samples {
        let mut out = Samples::with_capacity(self.dim, idx.len());
        for &i in idx {
            out.push_row(self.row(i));
        }
        out
    }

    /// Clamp every coordinate into `[-1, 1]`.
    pub fn clipped_to_cube(&self) -> Samples {
        Samples {
            dim: self.dim,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    /// Fraction of rows with some coordinate of magnitude above `half_width`.
    pub fn fraction_outside(&self, half_width: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let out = self.rows().filter(|r| r.iter().any(|v| v.abs() > half_width)).count();
        out as f64 / self.len() as f64
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Per-coordinate unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for ((a, x), m) in v.iter_mut().zip(r).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
        let n = (self.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|a| *a /= n);
        v
    }
}

/// Header fields written above the rows of a sample CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleHeader {
    pub seed: u64,
    pub spec_hash: String,
    /// Additional `key=value` provenance pairs (checkpoint hash, sampler config).
    pub extra: Vec<(String, String)>,
}

/// Writes `samples` as CSV. Header lines start with `#` and record
/// `dim`, `n`, `seed`, `spec_hash` and any extra provenance.
pub fn write_samples_csv<W: std::io::Write>(mut out: W, samples: &Samples, header: &SampleHeader) -> Result<()> {
    let mut head = String::new();
    writeln!(head, "# dim={}", samples.dim()).unwrap();
    writeln!(head, "# n={}", samples.len()).unwrap();
    writeln!(head, "# seed={}", header.seed).unwrap();
    writeln!(head, "# spec_hash={}", header.spec_hash).unwrap();
    for (k, v) in &header.extra {
        writeln!(head, "# {k}={v}").unwrap();
    }
    let cols: Vec<String> = (0..samples.dim()).map(|j| format!("x{j}")).collect();
    writeln!(head, "{}", cols.join(",")).unwrap();
    out.write_all(head.as_bytes())?;
    let mut line = String::new();
    for r in samples.rows() {
        line.clear();
        for (j, v) in r.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            // `{:?}` prints the shortest representation that round-trips.
            write!(line, "{v:?}").unwrap();
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<(Samples, SampleHeader)> {
    let reader = BufReader::new(input);
    let mut header = SampleHeader::default();
    let mut dim = None;
    let mut expected_n = None;
    let mut data = Vec::new();
    let mut seen_columns = false;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
            match k {
                "dim" => dim = Some(parse_usize(v)?),
                "n" => expected_n = Some(parse_usize(v)?),
                "seed" => header.seed = v.parse().map_err(|_| Error::Format(format!("bad seed `{v}`")))?,
                "spec_hash" => header.spec_hash = v.to_string(),
                _ => header.extra.push((k.to_string(), v.to_string())),
            }
            continue;
        }
        if !seen_columns {
            seen_columns = true;
            continue;
        }
        for tok in line.split(',') {
            data.push(
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value `{tok}`")))?,
            );
        }
    }
    let dim = dim.ok_or_else(|| Error::Format("missing dim header".into()))?;
    let samples = Samples::new(dim, data)?;
    if let Some(n) = expected_n {
        if n != samples.len() {
            return Err(Error::Format(format!(
                "header says n={n} but file has {} rows",
                samples.len()
            )));
        }
    }
    Ok((samples, header))
}

fn parse_usize(v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad integer `{v}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let s = Samples::new(2, vec![0.1, -0.3333333333333333, 1e-300, 0.7]).unwrap();
        let header = SampleHeader {
            seed: 9,
            spec_hash: "abc".into(),
            extra: vec![("checkpoint".into(), "ff00".into())],
        };
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &s, &header).unwrap();
        let (back, h) = read_samples_csv(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert_eq!(h, header);
    }

    #[test]
    fn rejects_ragged_buffers() {
        assert!(Samples::new(3, vec![0.0; 4]).is_err());
    }

    #[test]
    fn outside_fraction_counts_rows() {
        let s = Samples::new(2, vec![0.0, 0.0, 2.0, 0.0, 0.0, -1.6, 1.4, 1.4]).unwrap();
        assert_eq!(s.fraction_outside(1.5), 0.5);
    }
}
