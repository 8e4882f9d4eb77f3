//! Long-format dataset CSV and JSON sidecars.
//!
//! A dataset file has the header `subject,time,y,e1..eq,x1..xp` and one row
//! per observed `(subject, time)` cell. Missing time points are absent rows.
//! Floats are written in shortest round-trip form, so finite values survive
//! a write/read cycle bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datamodel::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::screen::ScreenReport;
use crate::simgen::{ScenarioConfig, TrueCoefficients};

pub fn write_dataset<W: Write>(data: &LongitudinalDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject".to_string(), "time".to_string(), "y".to_string()];
    header.extend((1..=data.q()).map(|u| format!("e{u}")));
    header.extend((1..=data.p()).map(|v| format!("x{v}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        for j in 0..data.k() {
            if !data.is_observed(i, j) {
                continue;
            }
            record.clear();
            record.push(i.to_string());
            record.push(j.to_string());
            record.push(data.y()[(i, j)].to_string());
            record.extend(data.env_row(i, j).iter().map(|x| x.to_string()));
            record.extend(data.gen().row(i).iter().map(|x| x.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn column_count(header: &csv::StringRecord, prefix: char) -> usize {
    header.iter().filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok()).count()
}

/// Reads a long-format dataset. Subject ids may be any strings and are
/// numbered in order of first appearance; `time` is a 0-based index and
/// `k` is one more than the largest time seen.
pub fn read_dataset<R: Read>(input: R) -> Result<LongitudinalDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let q = column_count(&header, 'e');
    let p = column_count(&header, 'x');
    let expected: Vec<String> = ["subject", "time", "y"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=q).map(|u| format!("e{u}")))
        .chain((1..=p).map(|v| format!("x{v}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidInput(format!(
            "dataset header must be subject,time,y,e1..eq,x1..xp; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let parse = |s: &str, line: usize, what: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse {what} value {s:?}")))
    };
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut cells: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    let mut gen_rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let next = ids.len();
        let subject = *ids.entry(rec[0].to_string()).or_insert(next);
        let time: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {line}: time must be a non-negative integer, got {:?}", &rec[1])))?;
        let y = parse(&rec[2], line, "y")?;
        let env = (0..q).map(|u| parse(&rec[3 + u], line, "environment")).collect::<Result<Vec<_>>>()?;
        let gen = (0..p).map(|v| parse(&rec[3 + q + v], line, "genetic")).collect::<Result<Vec<_>>>()?;
        if subject == gen_rows.len() {
            gen_rows.push(gen);
        } else if gen_rows[subject].iter().zip(&gen).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::InvalidInput(format!("line {line}: genetic values change over time for subject {:?}", &rec[0])));
        }
        cells.push((subject, time, y, env));
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput("dataset has no rows".into()));
    }
    let n = gen_rows.len();
    let k = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let mut y = DMatrix::zeros(n, k);
    let mut env = vec![0.0; n * k * q];
    let mut observed = vec![false; n * k];
    for (i, j, value, e) in cells {
        if observed[i * k + j] {
            return Err(Error::InvalidInput(format!("duplicate row for subject {i}, time {j}")));
        }
        observed[i * k + j] = true;
        y[(i, j)] = value;
        env[(i * k + j) * q..(i * k + j + 1) * q].copy_from_slice(&e);
    }
    let gen = DMatrix::from_fn(n, p, |i, v| gen_rows[i][v]);
    LongitudinalDataset::new(y, env, q, gen, observed)
}

pub fn save_dataset(data: &LongitudinalDataset, path: &Path) -> Result<()> {
    write_dataset(data, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<LongitudinalDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Per-SNP table `snp,min_p,kept` with 1-based SNP numbers matching `x1..xp`.
pub fn save_screen_table(report: &ScreenReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["snp", "min_p", "kept"])?;
    for (v, p) in report.min_p.iter().enumerate() {
        w.write_record([format!("x{}", v + 1), p.to_string(), (*p < report.cutoff).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub config: ScenarioConfig,
    pub replicate: u64,
    pub beta_true: Vec<f64>,
    pub true_main: Vec<usize>,
    pub true_inter: Vec<(usize, usize)>,
}

impl TruthSidecar {
    pub fn new(config: &ScenarioConfig, replicate: u64, truth: &TrueCoefficients) -> Self {
        Self {
            config: config.clone(),
            replicate,
            beta_true: truth.beta.clone(),
            true_main: truth.main.iter().copied().collect(),
            true_inter: truth.inter.iter().copied().collect(),
        }
    }

    pub fn coefficients(&self) -> TrueCoefficients {
        TrueCoefficients {
            beta: self.beta_true.clone(),
            main: self.true_main.iter().copied().collect(),
            inter: self.true_inter.iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{drop_time_points, simulate_replicate, stream_rng, Stream};

    fn small() -> ScenarioConfig {
        ScenarioConfig { n: 30, k: 4, p: 6, q: 2, n_true: 5, ..Default::default() }
    }

    fn round_trip(data: &LongitudinalDataset) -> LongitudinalDataset {
        let mut buf = Vec::new();
        write_dataset(data, &mut buf).unwrap();
        read_dataset(buf.as_slice()).unwrap()
    }

    fn same_observed(a: &LongitudinalDataset, b: &LongitudinalDataset) {
        assert_eq!((a.n(), a.k(), a.q(), a.p()), (b.n(), b.k(), b.q(), b.p()));
        assert_eq!(a.observed_mask(), b.observed_mask());
        assert_eq!(a.gen(), b.gen());
        for i in 0..a.n() {
            for j in 0..a.k() {
                if a.is_observed(i, j) {
                    assert_eq!(a.y()[(i, j)].to_bits(), b.y()[(i, j)].to_bits());
                    assert_eq!(a.env_row(i, j), b.env_row(i, j));
                }
            }
        }
    }

    #[test]
    fn balanced_round_trip_is_exact() {
        let rep = simulate_replicate(&small(), 0).unwrap();
        let back = round_trip(&rep.train);
        assert_eq!(back, rep.train);
    }

    #[test]
    fn unbalanced_round_trip_keeps_observed_cells() {
        let rep = simulate_replicate(&small(), 1).unwrap();
        let data = drop_time_points(&rep.train, 0.2, &mut stream_rng(1, 0, Stream::Missing)).unwrap();
        same_observed(&data, &round_trip(&data));
    }

    #[test]
    fn header_is_long_format() {
        let rep = simulate_replicate(&small(), 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&rep.train, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "subject,time,y,e1,e2,x1,x2,x3,x4,x5,x6");
        assert_eq!(text.lines().count(), 1 + 30 * 4);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_dataset("subject,time,y,e1\n0,0,1.0\n".as_bytes()).is_err());
        assert!(read_dataset("subject,time,y\n0,0,abc\n".as_bytes()).is_err());
        assert!(read_dataset("subject,y,time\n0,0,1\n".as_bytes()).is_err());
        assert!(read_dataset("subject,time,y,x1\n0,0,1,1\n0,1,1,2\n".as_bytes()).is_err());
        assert!(read_dataset("subject,time,y\n0,0,1\n0,0,2\n".as_bytes()).is_err());
        assert!(read_dataset("subject,time,y\n".as_bytes()).is_err());
    }

    #[test]
    fn string_subject_ids_are_renumbered() {
        let d = read_dataset("subject,time,y,e1,x1\nb,0,1,0.5,2\na,1,2,0.25,0\nb,1,3,1,2\n".as_bytes()).unwrap();
        assert_eq!((d.n(), d.k()), (2, 2));
        assert!(!d.is_observed(1, 0));
        assert_eq!(d.gen()[(1, 0)], 0.0);
        assert_eq!(d.y()[(0, 1)], 3.0);
    }

    #[test]
    fn truth_sidecar_round_trips() {
        let cfg = small();
        let rep = simulate_replicate(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        save_json(&TruthSidecar::new(&cfg, 2, &rep.coefficients), &path).unwrap();
        let back: TruthSidecar = load_json(&path).unwrap();
        assert_eq!(back.coefficients(), rep.coefficients);
        assert_eq!(back.config, cfg);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(32))]
        #[test]
        fn finite_values_round_trip(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12)) {
            let y = DMatrix::from_column_slice(2, 2, &values[0..4]);
            let env = values[4..8].to_vec();
            let gen = DMatrix::from_column_slice(2, 2, &values[8..12]);
            let data = LongitudinalDataset::balanced(y, env, 1, gen).unwrap();
            let back = round_trip(&data);
            for (a, b) in data.y().iter().zip(back.y().iter()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in data.env_raw().iter().zip(back.env_raw()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in data.gen().iter().zip(back.gen().iter()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
