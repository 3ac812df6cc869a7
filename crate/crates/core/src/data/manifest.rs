use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::{split_windows, Splits};
use super::DataError;

/// Ties a layout, a store and an optional label table together, with the
/// split assignment of every window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub layout: PathBuf,
    pub store: PathBuf,
    pub n_windows: usize,
    pub splits: Option<Splits>,
    pub labels: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn split(&mut self, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
        let s = split_windows(self.n_windows, fractions, seed)?;
        self.splits = Some(s.clone());
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }

    /// Reads a manifest; relative member paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::InvalidManifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        m.layout = resolve(&m.layout);
        m.store = resolve(&m.store);
        m.labels = m.labels.as_deref().map(resolve);
        if let Some(s) = &m.splits {
            if s.total() != m.n_windows {
                return Err(DataError::InvalidManifest(format!(
                    "splits cover {} windows, manifest has {}",
                    s.total(),
                    m.n_windows
                )));
            }
        }
        Ok(m)
    }
}

/// Writes a `window_index,label` table.
pub fn write_labels(labels: &BTreeMap<usize, u8>, path: &Path) -> Result<(), DataError> {
    let mut text = String::from("window_index,label\n");
    for (w, l) in labels {
        text.push_str(&format!("{w},{l}\n"));
    }
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_labels(path: &Path, n_windows: usize) -> Result<BTreeMap<usize, u8>, DataError> {
    let csv_err = |msg: String| DataError::Csv {
        path: path.to_path_buf(),
        message: msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<(usize, u8)>() {
        let (w, l) = row.map_err(|e| csv_err(e.to_string()))?;
        if l > 1 {
            return Err(csv_err(format!("label {l} on window {w} is not binary")));
        }
        if w >= n_windows {
            return Err(csv_err(format!("window {w} outside store of {n_windows} windows")));
        }
        out.insert(w, l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest {
            layout: "layout.csv".into(),
            store: "store.popt".into(),
            n_windows: 50,
            splits: None,
            labels: Some("labels.csv".into()),
        };
        m.split([0.8, 0.1, 0.1], 7).unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.store, dir.path().join("store.popt"));
        assert_eq!(back.splits, m.splits);

        let labels: BTreeMap<usize, u8> = (0..50).map(|w| (w, (w % 3 == 0) as u8)).collect();
        let lp = dir.path().join("labels.csv");
        write_labels(&labels, &lp).unwrap();
        assert_eq!(read_labels(&lp, 50).unwrap(), labels);
        assert!(read_labels(&lp, 10).is_err());
    }
}
