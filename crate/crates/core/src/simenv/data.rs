//! Data catalog: content-addressed blobs on disk, one directory per location,
//! with a journaled catalog of where each item lives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::journal::Journal;
use crate::time::Timestamp;

use super::SimError;

/// Location name of the engine's own store.
pub const LOCAL: &str = "local";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataId(String);

impl DataId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DataId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for DataId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataItem {
    pub data_id: DataId,
    pub name: String,
    pub location: String,
    /// Blob path relative to the blob root.
    pub path: String,
    pub size_bytes: u64,
    pub origin: String,
    pub registered_timestamp: Timestamp,
    pub sha256: String,
}

/// Outcome of a move: how long the simulated transfer takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub bytes: u64,
    pub delay: Duration,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum CatalogOp {
    Register(DataItem),
    Move { data_id: DataId, location: String, path: String },
    /// Marks one process lifetime; used to keep job ids unique across restarts.
    Boot,
}

struct Catalog {
    items: BTreeMap<DataId, DataItem>,
    next: u64,
    journal: Journal<CatalogOp>,
}

pub struct DataManager {
    root: PathBuf,
    locations: BTreeSet<String>,
    bytes_per_second: u64,
    epoch: u64,
    catalog: Mutex<Catalog>,
}

impl fmt::Debug for DataManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataManager").field("root", &self.root).finish_non_exhaustive()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_path(location: &str, data_id: &DataId) -> String {
    format!("{location}/{data_id}")
}

impl DataManager {
    /// Open the catalog under `data_dir`, with blobs in `data_dir/blobs`.
    pub fn open(
        data_dir: &Path,
        machines: impl IntoIterator<Item = String>,
        bytes_per_second: u64,
    ) -> Result<Self, SimError> {
        let root = data_dir.join("blobs");
        let mut locations: BTreeSet<String> = machines.into_iter().collect();
        locations.insert(LOCAL.to_owned());
        for loc in &locations {
            fs::create_dir_all(root.join(loc))?;
        }
        let path = data_dir.join("catalog.journal");
        let replay = Journal::<CatalogOp>::replay(&path)?;
        let mut items = BTreeMap::new();
        let mut epoch = 0;
        for op in replay.records {
            match op {
                CatalogOp::Register(item) => {
                    items.insert(item.data_id.clone(), item);
                }
                CatalogOp::Move {
                    data_id,
                    location,
                    path,
                } => {
                    if let Some(item) = items.get_mut(&data_id) {
                        item.location = location;
                        item.path = path;
                    }
                }
                CatalogOp::Boot => epoch += 1,
            }
        }
        epoch += 1;
        let next = items
            .keys()
            .filter_map(|id| id.0.strip_prefix("data-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        let mut ops: Vec<CatalogOp> = (0..epoch).map(|_| CatalogOp::Boot).collect();
        ops.extend(items.values().cloned().map(CatalogOp::Register));
        let journal = Journal::rewrite(&path, ops.iter(), false)?;
        Ok(Self {
            root,
            locations,
            bytes_per_second: bytes_per_second.max(1),
            epoch,
            catalog: Mutex::new(Catalog {
                items,
                next,
                journal,
            }),
        })
    }

    /// How many times this catalog has been opened, this time included.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_location(&self, name: &str) -> bool {
        self.locations.contains(name)
    }

    pub fn register_data(
        &self,
        name: &str,
        content: &[u8],
        location: &str,
        origin: &str,
    ) -> Result<DataId, SimError> {
        if !self.is_location(location) {
            return Err(SimError::UnknownLocation(location.to_owned()));
        }
        let mut catalog = self.catalog.lock();
        let data_id = DataId(format!("data-{:06}", catalog.next));
        let path = blob_path(location, &data_id);
        fs::write(self.root.join(&path), content)?;
        let item = DataItem {
            data_id: data_id.clone(),
            name: name.to_owned(),
            location: location.to_owned(),
            path,
            size_bytes: content.len() as u64,
            origin: origin.to_owned(),
            registered_timestamp: Timestamp::now(),
            sha256: sha256_hex(content),
        };
        catalog.journal.append(&CatalogOp::Register(item.clone()))?;
        catalog.next += 1;
        catalog.items.insert(data_id.clone(), item);
        Ok(data_id)
    }

    pub fn item(&self, data_id: &DataId) -> Result<DataItem, SimError> {
        self.catalog
            .lock()
            .items
            .get(data_id)
            .cloned()
            .ok_or_else(|| SimError::UnknownData(data_id.clone()))
    }

    pub fn items(&self) -> Vec<DataItem> {
        self.catalog.lock().items.values().cloned().collect()
    }

    pub fn read_data(&self, data_id: &DataId) -> Result<Vec<u8>, SimError> {
        let item = self.item(data_id)?;
        Ok(fs::read(self.root.join(&item.path))?)
    }

    /// Relocate an item's blob. Returns the simulated transfer cost; the
    /// caller decides whether to wait it out.
    pub fn move_data(&self, data_id: &DataId, destination: &str) -> Result<Transfer, SimError> {
        if !self.is_location(destination) {
            return Err(SimError::UnknownLocation(destination.to_owned()));
        }
        let mut catalog = self.catalog.lock();
        let item = catalog
            .items
            .get(data_id)
            .cloned()
            .ok_or_else(|| SimError::UnknownData(data_id.clone()))?;
        if item.location == destination {
            return Ok(Transfer {
                bytes: 0,
                delay: Duration::ZERO,
            });
        }
        let path = blob_path(destination, data_id);
        fs::rename(self.root.join(&item.path), self.root.join(&path))?;
        catalog.journal.append(&CatalogOp::Move {
            data_id: data_id.clone(),
            location: destination.to_owned(),
            path: path.clone(),
        })?;
        let entry = catalog.items.get_mut(data_id).expect("present above");
        entry.location = destination.to_owned();
        entry.path = path;
        Ok(Transfer {
            bytes: item.size_bytes,
            delay: Duration::from_secs_f64(item.size_bytes as f64 / self.bytes_per_second as f64),
        })
    }
}
