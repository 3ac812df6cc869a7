use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// One recording channel: id, Left/Posterior/Inferior coordinates in mm,
/// optional region label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: String,
    pub coords: [f64; 3],
    pub region: Option<String>,
}

/// The channels of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub subject: String,
    pub channels: Vec<Channel>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    channel_id: String,
    left: f64,
    posterior: f64,
    inferior: f64,
    region: String,
}

impl ElectrodeLayout {
    pub fn new(subject: impl Into<String>, channels: Vec<Channel>) -> Result<Self, DataError> {
        let layout = ElectrodeLayout {
            subject: subject.into(),
            channels,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.id.as_str()) {
                return Err(DataError::InvalidLayout(format!("duplicate channel id `{}`", ch.id)));
            }
            if ch.coords.iter().any(|c| !c.is_finite()) {
                return Err(DataError::InvalidLayout(format!("non-finite coordinate on `{}`", ch.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.id == id)
    }

    /// Writes `channel_id,left,posterior,inferior,region` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let csv_err = |e: csv::Error| DataError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for ch in &self.channels {
            w.serialize(Row {
                channel_id: ch.id.clone(),
                left: ch.coords[0],
                posterior: ch.coords[1],
                inferior: ch.coords[2],
                region: ch.region.clone().unwrap_or_default(),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| DataError::io(path, e))
    }

    /// Reads a layout CSV; an empty region column means no region.
    pub fn read_csv(path: &Path, subject: impl Into<String>) -> Result<Self, DataError> {
        let csv_err = |e: csv::Error| DataError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut channels = Vec::new();
        for row in r.deserialize::<Row>() {
            let row = row.map_err(csv_err)?;
            channels.push(Channel {
                id: row.channel_id,
                coords: [row.left, row.posterior, row.inferior],
                region: (!row.region.is_empty()).then_some(row.region),
            });
        }
        ElectrodeLayout::new(subject, channels)
    }
}
