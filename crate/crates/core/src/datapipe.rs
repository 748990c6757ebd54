//! Corpus storage, windowing, anomaly filtering and training samples.
//!
//! Corpora are newline-delimited JSON records
//! `{"id", "freq", "season_length", "values": [number | null]}` where `null`
//! marks a missing step. Floats are written in shortest round-trip form, so a
//! write followed by a load is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{compute_norm_stats, patchify, prefix_len, ModelConfig, NormStats, SOURCE_FRACTION};
use crate::numerics::Tensor;
use crate::series::{season_length_for, Series};

/// Environment variable naming the default corpus root.
pub const DATA_DIR_ENV: &str = "MOIRAI_DATA_DIR";

/// Largest tolerated share of malformed records.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Default `|z|` threshold for [`zscore_filter`].
pub const ZSCORE_THRESHOLD: f64 = 5.0;

/// A series is rejected once this share of its suffix is anomalous.
pub const ZSCORE_CAP: f64 = 0.01;

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    freq: String,
    #[serde(default)]
    season_length: Option<usize>,
    values: Vec<Option<f64>>,
}

impl Record {
    fn into_series(self) -> Option<Series> {
        let season = self.season_length.unwrap_or_else(|| season_length_for(&self.freq));
        if season == 0 || self.values.iter().flatten().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Series::from_options(self.id, self.freq, &self.values).with_season_length(season))
    }
}

/// Counts accumulated while streaming a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub malformed: usize,
}

impl LoadReport {
    pub fn total(&self) -> usize {
        self.loaded + self.malformed
    }

    /// Fails when malformed records exceed [`MAX_MALFORMED_FRACTION`].
    pub fn check(&self) -> Result<()> {
        if self.malformed as f64 > MAX_MALFORMED_FRACTION * self.total() as f64 {
            return Err(Error::CorpusQuality {
                malformed: self.malformed,
                total: self.total(),
            });
        }
        Ok(())
    }
}

/// Streaming reader; yields series one line at a time and skips malformed
/// records. Call [`CorpusReader::finish`] after iteration for the quality
/// verdict.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    report: LoadReport,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(file), path))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, path: &Path) -> Self {
        Self {
            lines: reader.lines(),
            path: path.to_path_buf(),
            report: LoadReport::default(),
        }
    }

    pub fn report(&self) -> LoadReport {
        self.report
    }

    pub fn finish(self) -> Result<LoadReport> {
        self.report.check()?;
        Ok(self.report)
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Series>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line).ok().and_then(Record::into_series) {
                Some(s) => {
                    self.report.loaded += 1;
                    return Some(Ok(s));
                }
                None => self.report.malformed += 1,
            }
        }
    }
}

/// Resolves relative corpus paths against `$MOIRAI_DATA_DIR` when they do
/// not exist relative to the working directory.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(path),
        None => path.to_path_buf(),
    }
}

/// Streams a corpus file, resolving the path via [`resolve_data_path`].
pub fn load_corpus(path: &Path) -> Result<CorpusReader<BufReader<File>>> {
    CorpusReader::open(&resolve_data_path(path))
}

/// Collects a whole corpus and applies the quality check.
pub fn read_corpus(path: &Path) -> Result<(Vec<Series>, LoadReport)> {
    let mut reader = load_corpus(path)?;
    let series = reader.by_ref().collect::<Result<Vec<_>>>()?;
    let report = reader.finish()?;
    Ok((series, report))
}

pub fn write_series(out: &mut impl Write, s: &Series) -> Result<()> {
    let record = Record {
        id: s.id.clone(),
        freq: s.freq.clone(),
        season_length: Some(s.season_length),
        values: s.as_options(),
    };
    serde_json::to_writer(&mut *out, &record)?;
    out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))
}

pub fn write_corpus<'a>(path: &Path, series: impl IntoIterator<Item = &'a Series>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in series {
        write_series(&mut out, s)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Keeps a series unless more than [`ZSCORE_CAP`] of its observed suffix
/// (the part after the normalization prefix) lies beyond `threshold` under
/// the prefix statistics. Series without usable prefix statistics are
/// rejected.
pub fn zscore_filter(series: &Series, threshold: f64) -> bool {
    let Ok(stats) = compute_norm_stats(series) else {
        return false;
    };
    let start = prefix_len(series.len(), SOURCE_FRACTION);
    let (mut total, mut outliers) = (0usize, 0usize);
    for v in (start..series.len()).filter_map(|i| series.get(i)) {
        total += 1;
        if stats.normalize(v).abs() > threshold {
            outliers += 1;
        }
    }
    total == 0 || (outliers as f64) < ZSCORE_CAP * total as f64
}

/// Uniformly placed window of `len` steps; the whole series when shorter.
pub fn sample_window(series: &Series, len: usize, rng: &mut impl Rng) -> Series {
    if series.len() <= len {
        return series.clone();
    }
    let start = rng.random_range(0..=series.len() - len);
    series.slice(start..start + len)
}

/// One training example: masked model input plus unmasked targets over the
/// same `T·p` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `T × 2·p_in` tokens after patch masking.
    pub context_patches: Tensor,
    /// `T·p_in` normalized values before masking; zero where unobserved.
    pub target: Tensor,
    /// 1 where a target counts toward the loss: observed and past the
    /// normalization prefix.
    pub target_mask: Tensor,
    pub norm: NormStats,
    /// Indices of the masked patches, ascending.
    pub masked: Vec<usize>,
}

impl TrainSample {
    pub fn n_patches(&self) -> usize {
        self.context_patches.rows()
    }
}

/// Normalizes with prefix statistics, patchifies, and blanks
/// `⌊mask_rate·T⌋` randomly chosen patches of the input. Targets are taken
/// before masking.
pub fn make_sample(series: &Series, cfg: &ModelConfig, mask_rate: f64, rng: &mut impl Rng) -> Result<TrainSample> {
    let p = cfg.p_in;
    if series.len().div_ceil(p.max(1)) < 2 {
        return Err(Error::InsufficientLength {
            len: series.len(),
            needed: p + 1,
        });
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    let norm = compute_norm_stats(series)?;
    let mut patches = patchify(series, p, &norm)?;
    let t = patches.n_patches();
    let target = patches.values.clone();
    let mut target_mask = patches.observed.clone();
    let prefix = patches.pad + prefix_len(series.len(), SOURCE_FRACTION);
    target_mask.data_mut()[..prefix].fill(0.0);

    let n_mask = (mask_rate * t as f64 + 1e-9).floor() as usize;
    let mut masked = sample(rng, t, n_mask.min(t)).into_vec();
    masked.sort_unstable();
    for &i in &masked {
        patches.mask_patch(i);
    }
    Ok(TrainSample {
        context_patches: patches.tokens(),
        target: target.reshape(vec![t * p])?,
        target_mask: target_mask.reshape(vec![t * p])?,
        norm,
        masked,
    })
}
