//! Offline input-output datasets and persistently exciting input design.
//!
//! An [`IoDataset`] is the only thing the learner ever sees: one or more
//! episodes of input/output samples, the lag `l` they were collected for and
//! the excitation order `l + n + 1` the input was designed to. Everything
//! else (plant matrices, states) lives outside this crate.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlib;

/// One experiment: inputs and outputs, column `k` holding the sample at
/// time `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    u: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Episode {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::InvalidDataset(format!(
                "episode has {} input samples but {} output samples",
                u.ncols(),
                y.ncols()
            )));
        }
        if !matlib::all_finite(&u) || !matlib::all_finite(&y) {
            return Err(Error::NonFinite);
        }
        Ok(Episode { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
}

/// Multi-episode input-output dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct IoDataset {
    episodes: Vec<Episode>,
    lag: usize,
    pe_order: usize,
}

impl IoDataset {
    /// Validates shape invariants: consistent channel counts, finite entries,
    /// every episode at least `lag + 1` samples long (so it contributes at
    /// least one usable non-minimal state transition).
    pub fn new(episodes: Vec<Episode>, lag: usize, pe_order: usize) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::InvalidDataset("no episodes".into()));
        }
        if lag == 0 {
            return Err(Error::InvalidDataset("lag must be >= 1".into()));
        }
        if pe_order < lag + 2 {
            return Err(Error::InvalidDataset(format!(
                "excitation order {pe_order} inconsistent with lag {lag}: need lag + n + 1 with n >= 1"
            )));
        }
        let m = episodes[0].u.nrows();
        let p = episodes[0].y.nrows();
        if m == 0 || p == 0 {
            return Err(Error::InvalidDataset("zero input or output channels".into()));
        }
        for (i, e) in episodes.iter().enumerate() {
            if e.u.nrows() != m || e.y.nrows() != p {
                return Err(Error::InvalidDataset(format!(
                    "episode {i} channel counts differ from episode 0"
                )));
            }
            if e.len() < lag + 1 {
                return Err(Error::EpisodeTooShort {
                    episode: i,
                    len: e.len(),
                    min: lag + 1,
                });
            }
        }
        Ok(IoDataset {
            episodes,
            lag,
            pe_order,
        })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    /// Excitation order the input was designed for (`lag + n + 1`).
    pub fn pe_order(&self) -> usize {
        self.pe_order
    }

    /// State order implied by lag and excitation order.
    pub fn state_order(&self) -> usize {
        self.pe_order - self.lag - 1
    }

    pub fn input_dim(&self) -> usize {
        self.episodes[0].u.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.episodes[0].y.nrows()
    }

    /// Usable sample count `N`: transitions with a full lag window behind
    /// them and a successor inside the same episode.
    pub fn usable_len(&self) -> usize {
        self.episodes.iter().map(|e| e.len() - self.lag).sum()
    }

    pub fn input_signals(&self) -> Vec<DMatrix<f64>> {
        self.episodes.iter().map(|e| e.u.clone()).collect()
    }

    /// Largest order at which the inputs are collectively persistently
    /// exciting, scanned up to `cap`.
    pub fn achieved_pe_order(&self, cap: usize) -> usize {
        let signals = self.input_signals();
        let mut achieved = 0;
        for order in 1..=cap {
            if matlib::is_collectively_pe(&signals, order, None) {
                achieved = order;
            } else {
                break;
            }
        }
        achieved
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&DatasetFile::from(self)).expect("dataset serialization")
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &DatasetFile::from(self))
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }

    /// CSV export with columns `episode,k,u_1..u_m,y_1..y_p`. Values are
    /// written in scientific notation with enough digits to round-trip
    /// binary64 exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let m = self.input_dim();
        let p = self.output_dim();
        let mut header = vec!["episode".to_string(), "k".to_string()];
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend((1..=p).map(|i| format!("y_{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (e, ep) in self.episodes.iter().enumerate() {
            for k in 0..ep.len() {
                let mut rec = vec![e.to_string(), k.to_string()];
                rec.extend((0..m).map(|i| format!("{:.17e}", ep.u[(i, k)])));
                rec.extend((0..p).map(|i| format!("{:.17e}", ep.y[(i, k)])));
                wtr.write_record(&rec).map_err(csv_err)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// CSV import; `lag` and `pe_order` are not part of the CSV and must be
    /// supplied by the caller.
    pub fn read_csv<R: Read>(r: R, lag: usize, pe_order: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 4 || names[0] != "episode" || names[1] != "k" {
            return Err(Error::Parse(
                "csv header must start with 'episode,k'".into(),
            ));
        }
        let m = names.iter().filter(|n| n.starts_with("u_")).count();
        let p = names.iter().filter(|n| n.starts_with("y_")).count();
        if m == 0 || p == 0 || 2 + m + p != names.len() {
            return Err(Error::Parse(format!(
                "csv header {names:?} does not match episode,k,u_1..u_m,y_1..y_p"
            )));
        }
        let mut per_episode: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parse = |field: usize| -> Result<f64> {
                rec.get(field)
                    .ok_or_else(|| Error::Parse(format!("row {line}: missing field {field}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {line}, field {field}: {e}")))
            };
            let e = parse(0)? as usize;
            let k = parse(1)? as usize;
            if e == per_episode.len() {
                per_episode.push((Vec::new(), Vec::new()));
            }
            if e >= per_episode.len() {
                return Err(Error::Parse(format!(
                    "row {line}: episode index {e} out of order"
                )));
            }
            if k * m != per_episode[e].0.len() {
                return Err(Error::Parse(format!(
                    "row {line}: sample index {k} out of order in episode {e}"
                )));
            }
            for i in 0..m {
                per_episode[e].0.push(parse(2 + i)?);
            }
            for i in 0..p {
                per_episode[e].1.push(parse(2 + m + i)?);
            }
        }
        let episodes = per_episode
            .into_iter()
            .map(|(us, ys)| {
                let t = us.len() / m;
                // Samples were appended time-major.
                let u = DMatrix::from_fn(m, t, |i, k| us[k * m + i]);
                let y = DMatrix::from_fn(p, t, |i, k| ys[k * p + i]);
                Episode::new(u, y)
            })
            .collect::<Result<Vec<_>>>()?;
        IoDataset::new(episodes, lag, pe_order)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    lag: usize,
    pe_order: usize,
    episodes: Vec<EpisodeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFile {
    /// Time-major: one inner array per sample time.
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl From<&IoDataset> for DatasetFile {
    fn from(ds: &IoDataset) -> Self {
        DatasetFile {
            lag: ds.lag,
            pe_order: ds.pe_order,
            episodes: ds
                .episodes
                .iter()
                .map(|e| EpisodeFile {
                    u: (0..e.len())
                        .map(|k| e.u.column(k).iter().copied().collect())
                        .collect(),
                    y: (0..e.len())
                        .map(|k| e.y.column(k).iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<DatasetFile> for IoDataset {
    type Error = Error;

    fn try_from(file: DatasetFile) -> Result<Self> {
        let episodes = file
            .episodes
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let t = e.u.len();
                if t == 0 || e.y.len() != t {
                    return Err(Error::InvalidDataset(format!(
                        "episode {i}: {} input samples vs {} output samples",
                        t,
                        e.y.len()
                    )));
                }
                let m = e.u[0].len();
                let p = e.y[0].len();
                if e.u.iter().any(|s| s.len() != m) || e.y.iter().any(|s| s.len() != p) {
                    return Err(Error::InvalidDataset(format!(
                        "episode {i}: ragged sample vectors"
                    )));
                }
                let u = DMatrix::from_fn(m, t, |r, k| e.u[k][r]);
                let y = DMatrix::from_fn(p, t, |r, k| e.y[k][r]);
                Episode::new(u, y)
            })
            .collect::<Result<Vec<_>>>()?;
        IoDataset::new(episodes, file.lag, file.pe_order)
    }
}

/// Shortest input length that can be persistently exciting of `order` with
/// `m` channels: the depth-`order` Hankel needs at least `m * order` columns.
pub fn min_pe_length(m: usize, order: usize) -> usize {
    (m + 1) * order - 1
}

/// Draw a uniform `[-1, 1]` input of shape `m x len` and verify it is PE of
/// the requested order, redrawing up to `max_retries` times.
pub fn pe_input(
    m: usize,
    order: usize,
    len: usize,
    seed: u64,
    max_retries: usize,
) -> Result<DMatrix<f64>> {
    if m == 0 || order == 0 {
        return Err(Error::Dimension("pe_input: m and order must be >= 1".into()));
    }
    if len < min_pe_length(m, order) {
        return Err(Error::Excitation(format!(
            "length {len} cannot be PE of order {order} with {m} channels (need >= {})",
            min_pe_length(m, order)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_retries.max(1) {
        let u = DMatrix::from_fn(m, len, |_, _| rng.random_range(-1.0..=1.0));
        if matlib::is_pe(&u, order, None) {
            return Ok(u);
        }
    }
    Err(Error::Excitation(format!(
        "no PE input of order {order} found after {max_retries} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_dataset(seed: u64, episodes: usize, len: usize) -> IoDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = (0..episodes)
            .map(|_| {
                let u = DMatrix::from_fn(2, len, |_, _| rng.random_range(-1.0..=1.0));
                let y = DMatrix::from_fn(3, len, |_, _| rng.random_range(-1.0..=1.0));
                Episode::new(u, y).unwrap()
            })
            .collect();
        IoDataset::new(eps, 2, 6).unwrap()
    }

    #[test]
    fn pe_input_is_verified_and_deterministic() {
        let u = pe_input(1, 2, 5, 7, 10).unwrap();
        assert!(matlib::is_pe(&u, 2, None));
        assert_eq!(u, pe_input(1, 2, 5, 7, 10).unwrap());

        let u = pe_input(2, 7, 25, 1, 10).unwrap();
        let h = matlib::hankel(&u, 7).unwrap();
        assert_eq!(matlib::numeric_rank(&h, None).0, 14);
    }

    #[test]
    fn pe_input_length_precondition() {
        // m=1, order=2 needs at least 3 samples.
        assert!(matches!(pe_input(1, 2, 2, 0, 5), Err(Error::Excitation(_))));
    }

    #[test]
    fn dataset_rejects_short_episode() {
        let u = DMatrix::zeros(1, 2);
        let y = DMatrix::zeros(1, 2);
        let ep = Episode::new(u, y).unwrap();
        assert!(matches!(
            IoDataset::new(vec![ep], 2, 6),
            Err(Error::EpisodeTooShort { .. })
        ));
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let ds = small_dataset(1, 1, 8);
        let mut v: serde_json::Value = serde_json::from_str(&ds.to_json_string()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("a".into(), serde_json::json!([[1.0]]));
        let err = IoDataset::from_json_str(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn csv_round_trip_exact() {
        let ds = small_dataset(2, 2, 7);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = IoDataset::read_csv(buf.as_slice(), ds.lag(), ds.pe_order()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_rejects_malformed_rows() {
        // A record with a missing field.
        let text = "episode,k,u_1,y_1\n0,0,1.0,2.0\n0,1,3.0\n";
        assert!(matches!(
            IoDataset::read_csv(text.as_bytes(), 1, 3),
            Err(Error::Parse(_))
        ));
        // A truncated header.
        let ds = small_dataset(3, 1, 6);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(IoDataset::read_csv(&text.as_bytes()[..10], 2, 6).is_err());
        // A non-numeric field.
        let corrupted = text.replacen('.', "x", 1);
        assert!(IoDataset::read_csv(corrupted.as_bytes(), 2, 6).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..10_000, episodes in 1usize..3, len in 3usize..10) {
            let ds = small_dataset(seed, episodes, len);
            let back = IoDataset::from_json_str(&ds.to_json_string()).unwrap();
            prop_assert_eq!(ds, back);
        }
    }
}
