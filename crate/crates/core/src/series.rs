use std::ops::Range;

/// One univariate time series with per-step missing flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub id: String,
    /// Frequency token such as `"H"`, `"D"` or `"W"`.
    pub freq: String,
    pub values: Vec<f64>,
    /// `true` where the value is absent. Same length as `values`.
    pub missing: Vec<bool>,
    /// Seasonal period used by the naive baseline and MASE.
    pub season_length: usize,
}

/// Conventional seasonal period for a frequency token; 1 when unknown.
pub fn season_length_for(freq: &str) -> usize {
    match freq {
        "H" | "h" | "1H" => 24,
        "D" | "d" | "1D" => 7,
        "W" | "w" | "1W" => 52,
        "M" | "MS" | "ME" => 12,
        "15min" | "15T" => 96,
        _ => 1,
    }
}

impl Series {
    /// Builds a series; non-finite values are flagged missing.
    pub fn new(id: impl Into<String>, freq: impl Into<String>, values: Vec<f64>) -> Self {
        let freq = freq.into();
        let missing = values.iter().map(|v| !v.is_finite()).collect();
        Self {
            id: id.into(),
            season_length: season_length_for(&freq),
            freq,
            values,
            missing,
        }
    }

    /// Builds a series where `None` marks a missing step.
    pub fn from_options(id: impl Into<String>, freq: impl Into<String>, values: &[Option<f64>]) -> Self {
        let raw = values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Self::new(id, freq, raw)
    }

    pub fn with_season_length(mut self, season_length: usize) -> Self {
        self.season_length = season_length.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_observed(&self, i: usize) -> bool {
        !self.missing[i] && self.values[i].is_finite()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.is_observed(i).then(|| self.values[i])
    }

    pub fn observed_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_observed(i)).count()
    }

    /// Sub-series over `range`, keeping identity and metadata.
    pub fn slice(&self, range: Range<usize>) -> Series {
        Series {
            id: self.id.clone(),
            freq: self.freq.clone(),
            values: self.values[range.clone()].to_vec(),
            missing: self.missing[range].to_vec(),
            season_length: self.season_length,
        }
    }

    /// Splits into a context and the trailing `horizon` points.
    pub fn split_last(&self, horizon: usize) -> Option<(Series, Series)> {
        if horizon == 0 || horizon >= self.len() {
            return None;
        }
        let cut = self.len() - horizon;
        Some((self.slice(0..cut), self.slice(cut..self.len())))
    }

    pub fn as_options(&self) -> Vec<Option<f64>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}
