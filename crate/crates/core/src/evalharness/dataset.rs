use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::simcore::MetapopContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Day,
    Week,
}

impl Cadence {
    /// Default forecast horizon in steps.
    pub fn default_horizon(self) -> usize {
        match self {
            Cadence::Day => 28,
            Cadence::Week => 8,
        }
    }
}

/// Either the literal string `"identity"` or an inline square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContactSpec {
    Named(String),
    Inline(Vec<Vec<f64>>),
}

impl ContactSpec {
    pub fn identity() -> Self {
        ContactSpec::Named("identity".to_string())
    }
}

/// How the dataset came to be and what was done to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub gap_policy: String,
    pub filled_cells: usize,
    pub window_start: usize,
}

/// Dense signals `D[l, t, f]` with one target feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalDataset {
    values: Tensor,
    pub feature_names: Vec<String>,
    pub target: usize,
    pub cadence: Cadence,
    pub population: Vec<f64>,
    pub contact: ContactSpec,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    feature_names: Vec<String>,
    target_feature: String,
    cadence: Cadence,
    population: Vec<f64>,
    contact_matrix: ContactSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub const GAP_POLICY: &str = "forward-fill then zero-fill";

impl SpatioTemporalDataset {
    /// Validates shapes, the target sign and the contact reference.
    pub fn new(
        values: Tensor,
        feature_names: Vec<String>,
        target: usize,
        cadence: Cadence,
        population: Vec<f64>,
        contact: ContactSpec,
    ) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::Ingest(format!("values must be (L, T, d), got {:?}", s)));
        }
        let (l, _, d) = (s[0], s[1], s[2]);
        if feature_names.len() != d || target >= d {
            return Err(Error::Ingest(format!(
                "{} feature names and target {target} for d={d}",
                feature_names.len()
            )));
        }
        if population.len() != l {
            return Err(Error::Ingest(format!("{} populations for L={l}", population.len())));
        }
        let ds = Self {
            values,
            feature_names,
            target,
            cadence,
            population,
            contact,
            provenance: Provenance::default(),
        };
        ds.context()?;
        for loc in 0..l {
            for t in 0..ds.len() {
                let y = ds.get(loc, t, target);
                if !(y >= 0.0 && y.is_finite()) {
                    return Err(Error::Ingest(format!("target at location {loc}, t={t} is {y}")));
                }
            }
        }
        Ok(ds)
    }

    pub fn num_locations(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, location: usize, t: usize, feature: usize) -> f64 {
        self.values.get(&[location, t, feature])
    }

    pub fn target_name(&self) -> &str {
        &self.feature_names[self.target]
    }

    pub fn target_series(&self, location: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(location, t, self.target)).collect()
    }

    /// Target as `(T, L)`, the layout of simulated observations.
    pub fn target_matrix(&self) -> Tensor {
        let (l, t) = (self.num_locations(), self.len());
        let mut out = Tensor::zeros(&[t, l]);
        for loc in 0..l {
            for s in 0..t {
                out.set(&[s, loc], self.get(loc, s, self.target));
            }
        }
        out
    }

    pub fn context(&self) -> Result<MetapopContext> {
        let l = self.num_locations();
        match &self.contact {
            ContactSpec::Named(name) if name == "identity" => MetapopContext::identity(self.population.clone()),
            ContactSpec::Named(other) => Err(Error::Ingest(format!(
                "contact_matrix must be \"identity\" or an inline matrix, got \"{other}\""
            ))),
            ContactSpec::Inline(rows) => {
                if rows.len() != l || rows.iter().any(|r| r.len() != l) {
                    return Err(Error::Ingest(format!("contact_matrix must be {l}x{l}")));
                }
                MetapopContext::new(Tensor::from_rows(rows)?, Tensor::from_vec(self.population.clone()))
                    .map_err(|e| Error::Ingest(e.to_string()))
            }
        }
    }

    /// Time steps `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Contract(format!(
                "window {start}..{} beyond {} steps",
                start + len,
                self.len()
            )));
        }
        let (l, d) = (self.num_locations(), self.num_features());
        let mut data = Vec::with_capacity(l * len * d);
        for loc in 0..l {
            for t in start..start + len {
                for f in 0..d {
                    data.push(self.get(loc, t, f));
                }
            }
        }
        let mut out = self.clone();
        out.values = Tensor::new(vec![l, len, d], data)?;
        out.provenance.window_start = self.provenance.window_start + start;
        Ok(out)
    }

    /// Reads `meta.json` and long-form `data.csv` from `dir`.
    pub fn ingest(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta_text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Ingest(format!("{}: {e}", meta_path.display())))?;
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Ingest(format!("meta.json: {e}")))?;
        if meta.feature_names.len() != meta.d {
            return Err(Error::Ingest(format!(
                "meta.json declares d={} but lists {} feature names",
                meta.d,
                meta.feature_names.len()
            )));
        }
        let target = meta
            .feature_names
            .iter()
            .position(|f| *f == meta.target_feature)
            .ok_or_else(|| {
                Error::Ingest(format!("target_feature `{}` is not a feature name", meta.target_feature))
            })?;
        let feature_index: BTreeMap<&str, usize> = meta
            .feature_names
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();

        let data_path = dir.join("data.csv");
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&data_path)
            .map_err(|e| Error::Ingest(format!("{}: {e}", data_path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Ingest(format!("data.csv header: {e}")))?
            .clone();
        let expected = ["location", "t", "feature", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Ingest(format!(
                "data.csv columns must be {}, got {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let (l, t_len, d) = (meta.l, meta.t, meta.d);
        let mut cells: Vec<Option<f64>> = vec![None; l * t_len * d];
        let mut seen_row: Vec<usize> = vec![0; l * t_len * d];
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| Error::Ingest(format!("data.csv row {row}: {e}")))?;
            let field = |k: usize| record.get(k).unwrap_or("");
            let loc: usize = field(0)
                .parse()
                .map_err(|_| Error::Ingest(format!("data.csv row {row}: location `{}` is not an index", field(0))))?;
            if loc >= l {
                return Err(Error::Ingest(format!(
                    "data.csv row {row}: location {loc} but meta.json declares L={l}"
                )));
            }
            let t: usize = field(1)
                .parse()
                .map_err(|_| Error::Ingest(format!("data.csv row {row}: t `{}` is not an index", field(1))))?;
            if t >= t_len {
                return Err(Error::Ingest(format!("data.csv row {row}: t={t} but meta.json declares T={t_len}")));
            }
            let f = *feature_index
                .get(field(2))
                .ok_or_else(|| Error::Ingest(format!("data.csv row {row}: unknown feature `{}`", field(2))))?;
            let idx = (loc * t_len + t) * d + f;
            if seen_row[idx] != 0 {
                return Err(Error::Ingest(format!(
                    "data.csv row {row}: duplicate (location {loc}, t {t}, feature {}) first seen at row {}",
                    field(2),
                    seen_row[idx]
                )));
            }
            seen_row[idx] = row;
            let raw = field(3);
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Ingest(format!("data.csv row {row}: value `{raw}` is not numeric")))?;
            if !v.is_finite() {
                return Err(Error::Ingest(format!("data.csv row {row}: value `{raw}` is not finite")));
            }
            if f == target && v < 0.0 {
                return Err(Error::Ingest(format!("data.csv row {row}: negative target {v}")));
            }
            cells[idx] = Some(v);
        }

        // Gap policy: carry the last observation forward, then zero-fill
        // anything before the first observation.
        let mut filled = 0;
        let mut values = vec![0.0; l * t_len * d];
        for loc in 0..l {
            for f in 0..d {
                let mut last = None;
                for t in 0..t_len {
                    let idx = (loc * t_len + t) * d + f;
                    match cells[idx] {
                        Some(v) => {
                            values[idx] = v;
                            last = Some(v);
                        }
                        None => {
                            filled += 1;
                            values[idx] = last.unwrap_or(0.0);
                        }
                    }
                }
            }
        }

        let mut ds = Self::new(
            Tensor::new(vec![l, t_len, d], values)?,
            meta.feature_names,
            target,
            meta.cadence,
            meta.population,
            meta.contact_matrix,
        )?;
        ds.provenance = Provenance {
            source: dir.display().to_string(),
            gap_policy: GAP_POLICY.to_string(),
            filled_cells: filled,
            window_start: 0,
        };
        Ok(ds)
    }

    /// Writes `meta.json` and `data.csv` so that [`Self::ingest`] reads it back.
    pub fn write_files(&self) -> (String, String) {
        let meta = Meta {
            l: self.num_locations(),
            t: self.len(),
            d: self.num_features(),
            feature_names: self.feature_names.clone(),
            target_feature: self.target_name().to_string(),
            cadence: self.cadence,
            population: self.population.clone(),
            contact_matrix: self.contact.clone(),
            provenance: Some(self.provenance.clone()),
        };
        let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        let mut csv_text = String::from("location,t,feature,value\n");
        for loc in 0..self.num_locations() {
            for t in 0..self.len() {
                for (f, name) in self.feature_names.iter().enumerate() {
                    csv_text.push_str(&format!("{loc},{t},{name},{:?}\n", self.get(loc, t, f)));
                }
            }
        }
        (meta_text, csv_text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, meta: &str, csv_body: &str) {
        fs::write(dir.join("meta.json"), meta).unwrap();
        fs::write(dir.join("data.csv"), format!("location,t,feature,value\n{csv_body}")).unwrap();
    }

    const META: &str = r#"{"L": 2, "T": 5, "d": 3, "feature_names": ["cases", "mobility", "temp"],
        "target_feature": "cases", "cadence": "week", "population": [1000, 2000],
        "contact_matrix": "identity"}"#;

    fn full_rows() -> String {
        let mut s = String::new();
        for l in 0..2 {
            for t in 0..5 {
                for f in ["cases", "mobility", "temp"] {
                    s.push_str(&format!("{l},{t},{f},{}\n", l * 100 + t));
                }
            }
        }
        s
    }

    #[test]
    fn well_formed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, &full_rows());
        let ds = SpatioTemporalDataset::ingest(dir.path()).unwrap();
        assert_eq!(ds.values().shape(), &[2, 5, 3]);
        assert_eq!(ds.get(1, 3, 0), 103.0);
        assert_eq!(ds.provenance.filled_cells, 0);
    }

    #[test]
    fn duplicate_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, &(full_rows() + "0,1,cases,5\n"));
        let e = SpatioTemporalDataset::ingest(dir.path()).unwrap_err();
        assert_eq!(e.code(), "INGEST_ERROR");
        assert!(e.to_string().contains("row 32"), "{e}");
    }

    #[test]
    fn extra_location_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, &(full_rows() + "2,0,cases,5\n"));
        assert!(SpatioTemporalDataset::ingest(dir.path()).unwrap_err().to_string().contains("L=2"));
    }

    #[test]
    fn non_numeric_and_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, "0,0,cases,abc\n");
        assert!(SpatioTemporalDataset::ingest(dir.path()).unwrap_err().to_string().contains("row 2"));
        write(dir.path(), r#"{"L": 1}"#, "");
        assert_eq!(SpatioTemporalDataset::ingest(dir.path()).unwrap_err().code(), "INGEST_ERROR");
    }

    #[test]
    fn gaps_forward_then_zero_fill() {
        let dir = tempfile::tempdir().unwrap();
        let rows = "0,1,cases,4\n0,3,cases,\n0,4,cases,9\n";
        write(dir.path(), META, rows);
        let ds = SpatioTemporalDataset::ingest(dir.path()).unwrap();
        assert_eq!(ds.target_series(0), vec![0.0, 4.0, 4.0, 4.0, 9.0]);
        assert_eq!(ds.provenance.gap_policy, GAP_POLICY);
        assert_eq!(ds.provenance.filled_cells, 30 - 2);
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, &full_rows());
        let ds = SpatioTemporalDataset::ingest(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let (meta, data) = ds.write_files();
        fs::write(out.path().join("meta.json"), meta).unwrap();
        fs::write(out.path().join("data.csv"), data).unwrap();
        let again = SpatioTemporalDataset::ingest(out.path()).unwrap();
        assert_eq!(ds.values(), again.values());
    }

    #[test]
    fn windows_slice_time() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), META, &full_rows());
        let ds = SpatioTemporalDataset::ingest(dir.path()).unwrap();
        let w = ds.window(1, 3).unwrap();
        assert_eq!(w.target_series(1), vec![101.0, 102.0, 103.0]);
        assert_eq!(w.provenance.window_start, 1);
        assert!(ds.window(3, 3).is_err());
    }
}
