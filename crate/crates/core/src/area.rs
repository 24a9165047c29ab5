//! Area identifiers and dense area indexing.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a small area (municipality, stratum, ...).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(pub String);

impl AreaId {
    /// Zero-padded numeric id, so lexical and numeric order agree for up to 999 areas.
    pub fn numbered(i: usize) -> Self {
        AreaId(format!("{i:03}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AreaId {
    fn from(s: &str) -> Self {
        AreaId(s.to_owned())
    }
}

impl From<String> for AreaId {
    fn from(s: String) -> Self {
        AreaId(s)
    }
}

/// Maps row labels to dense area indices `0..n_areas`, numbered by first appearance.
#[derive(Clone, Debug)]
pub struct AreaIndex {
    ids: Vec<AreaId>,
    rows: Vec<usize>,
}

impl AreaIndex {
    pub fn from_labels(labels: &[AreaId]) -> Self {
        let mut lookup: HashMap<&AreaId, usize> = HashMap::new();
        let mut ids = Vec::new();
        let rows = labels
            .iter()
            .map(|label| {
                *lookup.entry(label).or_insert_with(|| {
                    ids.push(label.clone());
                    ids.len() - 1
                })
            })
            .collect();
        AreaIndex { ids, rows }
    }

    pub fn n_areas(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[AreaId] {
        &self.ids
    }

    /// Dense area index of every row.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.ids.len()];
        for &a in &self.rows {
            counts[a] += 1;
        }
        counts
    }
}
