//! Hash-partitioned primary-key store with an optional secondary index.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::cluster::NodeId;
use crate::dataflow::partition::partition_of_key;
use crate::dataflow::Record;

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    json: String,
    indexed: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    dataset: String,
    index: usize,
    count: usize,
    node: NodeId,
    index_field: Option<String>,
    primary: BTreeMap<String, Stored>,
    secondary: BTreeMap<String, BTreeSet<String>>,
    unindexed: u64,
}

impl DatasetPartition {
    pub fn new(dataset: &str, index: usize, count: usize, node: NodeId, index_field: Option<String>) -> Self {
        DatasetPartition {
            dataset: dataset.to_string(),
            index,
            count,
            node,
            index_field,
            primary: BTreeMap::new(),
            secondary: BTreeMap::new(),
            unindexed: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn secondary_len(&self) -> usize {
        self.secondary.values().map(BTreeSet::len).sum()
    }

    /// Inserts lacking the indexed field.
    pub fn unindexed(&self) -> u64 {
        self.unindexed
    }

    /// Upserts `record` under `key`; the secondary entry of a replaced record
    /// is unlinked first.
    ///
    /// # Panics
    ///
    /// When `key` does not hash to this partition, which is an engine bug.
    pub fn insert(&mut self, record: &Record, key: &str) {
        assert_eq!(
            partition_of_key(key, self.count),
            self.index,
            "key `{key}` routed to wrong partition {} of {}",
            self.index,
            self.dataset
        );
        let indexed = self.index_field.as_deref().and_then(|f| record.key_text(f));
        if let Some(old) = self.primary.get(key) {
            if let Some(v) = &old.indexed {
                if let Some(keys) = self.secondary.get_mut(v) {
                    keys.remove(key);
                    if keys.is_empty() {
                        self.secondary.remove(v);
                    }
                }
            }
        }
        match &indexed {
            Some(v) => {
                self.secondary.entry(v.clone()).or_default().insert(key.to_string());
            }
            None if self.index_field.is_some() => self.unindexed += 1,
            None => {}
        }
        self.primary.insert(key.to_string(), Stored { json: record.to_json(), indexed });
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.primary.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<Record> {
        self.primary.get(key).map(|s| Record::from_json(&s.json).expect("stored records are valid JSON"))
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.primary.values().map(|s| Record::from_json(&s.json).expect("stored records are valid JSON"))
    }

    pub fn lookup(&self, value: &str) -> Vec<&str> {
        self.secondary.get(value).map(|k| k.iter().map(String::as_str).collect()).unwrap_or_default()
    }

    /// Secondary map reconstructed from a primary scan.
    pub fn rebuild_secondary(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        if let Some(field) = &self.index_field {
            for (k, s) in &self.primary {
                let r = Record::from_json(&s.json).expect("stored records are valid JSON");
                if let Some(v) = r.key_text(field) {
                    m.entry(v).or_default().insert(k.clone());
                }
            }
        }
        m
    }

    pub fn secondary(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.secondary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub name: String,
    pub primary_key: String,
    pub index_field: Option<String>,
    pub partitions: Vec<DatasetPartition>,
}

impl StoredDataset {
    pub fn new(name: &str, primary_key: &str, index_field: Option<&str>, nodegroup: &[NodeId]) -> Self {
        let partitions = nodegroup
            .iter()
            .enumerate()
            .map(|(i, n)| DatasetPartition::new(name, i, nodegroup.len(), *n, index_field.map(str::to_string)))
            .collect();
        StoredDataset {
            name: name.to_string(),
            primary_key: primary_key.to_string(),
            index_field: index_field.map(str::to_string),
            partitions,
        }
    }

    pub fn count(&self) -> usize {
        self.partitions.iter().map(DatasetPartition::len).sum()
    }

    pub fn scan(&self, mut pred: impl FnMut(&Record) -> bool) -> Vec<Record> {
        self.partitions.iter().flat_map(|p| p.records()).filter(|r| pred(r)).collect()
    }

    pub fn keys(&self) -> BTreeSet<String> {
        self.partitions.iter().flat_map(|p| p.keys().map(str::to_string)).collect()
    }

    /// Records whose indexed field equals `value`, via the secondary index.
    pub fn scan_indexed(&self, value: &str) -> Vec<Record> {
        self.partitions
            .iter()
            .flat_map(|p| p.lookup(value).into_iter().filter_map(|k| p.get(k)))
            .collect()
    }

    /// Writes `<dir>/<dataset>/<partition>.ndjson`.
    pub fn snapshot(&self, dir: &Path) -> io::Result<()> {
        let base = dir.join(&self.name);
        fs::create_dir_all(&base)?;
        for p in &self.partitions {
            let mut f = io::BufWriter::new(fs::File::create(base.join(format!("{}.ndjson", p.index)))?);
            for s in p.primary.values() {
                writeln!(f, "{}", s.json)?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// All datasets of a run.
#[derive(Debug, Default, Clone)]
pub struct Storage {
    datasets: BTreeMap<String, StoredDataset>,
}

impl Storage {
    pub fn ensure(&mut self, name: &str, primary_key: &str, index_field: Option<&str>, nodegroup: &[NodeId]) {
        self.datasets
            .entry(name.to_string())
            .or_insert_with(|| StoredDataset::new(name, primary_key, index_field, nodegroup));
    }

    pub fn dataset(&self, name: &str) -> Option<&StoredDataset> {
        self.datasets.get(name)
    }

    pub fn dataset_mut(&mut self, name: &str) -> Option<&mut StoredDataset> {
        self.datasets.get_mut(name)
    }

    pub fn count(&self, name: &str) -> usize {
        self.datasets.get(name).map_or(0, StoredDataset::count)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &StoredDataset> {
        self.datasets.values()
    }

    pub fn snapshot(&self, dir: &Path) -> io::Result<()> {
        for d in self.datasets.values() {
            d.snapshot(dir)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn rec(id: &str, tag: Option<&str>) -> Record {
        let mut v = json!({ "id": id });
        if let Some(t) = tag {
            v["tag"] = json!(t);
        }
        Record::from_json(&v.to_string()).unwrap()
    }

    fn ds() -> StoredDataset {
        StoredDataset::new("D", "id", Some("tag"), &[NodeId(0), NodeId(1), NodeId(2)])
    }

    fn put(d: &mut StoredDataset, r: &Record) {
        let k = r.key_text("id").unwrap();
        let p = partition_of_key(&k, d.partitions.len());
        d.partitions[p].insert(r, &k);
    }

    #[test]
    fn upsert_keeps_counts_and_relinks_index() {
        let mut d = ds();
        assert_eq!(d.count(), 0);
        let recs: Vec<Record> = (0..5).map(|i| rec(&i.to_string(), Some("a"))).collect();
        for r in &recs {
            put(&mut d, r);
        }
        assert_eq!(d.count(), 5);
        assert_eq!(d.partitions.iter().map(DatasetPartition::secondary_len).sum::<usize>(), 5);
        for r in &recs {
            put(&mut d, r);
        }
        assert_eq!(d.count(), 5);
        put(&mut d, &rec("0", Some("b")));
        assert_eq!(d.scan_indexed("a").len(), 4);
        assert_eq!(d.scan_indexed("b").len(), 1);
        put(&mut d, &rec("9", None));
        assert_eq!(d.count(), 6);
        assert_eq!(d.partitions.iter().map(DatasetPartition::unindexed).sum::<u64>(), 1);
    }

    #[test]
    #[should_panic(expected = "wrong partition")]
    fn wrong_partition_fails_loudly() {
        let mut d = ds();
        let k = "1";
        let wrong = (partition_of_key(k, 3) + 1) % 3;
        d.partitions[wrong].insert(&rec(k, None), k);
    }

    #[test]
    fn snapshot_writes_ndjson_per_partition() {
        let mut d = ds();
        for i in 0..10 {
            put(&mut d, &rec(&i.to_string(), None));
        }
        let dir = tempfile::tempdir().unwrap();
        d.snapshot(dir.path()).unwrap();
        let lines: usize = (0..3)
            .map(|p| fs::read_to_string(dir.path().join(format!("D/{p}.ndjson"))).unwrap().lines().count())
            .sum();
        assert_eq!(lines, 10);
    }

    proptest! {
        #[test]
        fn secondary_matches_rebuild_and_scans_agree(
            ops in proptest::collection::vec((0u8..30, proptest::option::of(0u8..4)), 0..120),
            probe in 0u8..4,
        ) {
            let mut d = ds();
            for (k, t) in &ops {
                put(&mut d, &rec(&k.to_string(), t.map(|t| format!("t{t}")).as_deref()));
            }
            for p in &d.partitions {
                prop_assert_eq!(p.secondary(), &p.rebuild_secondary());
                for k in p.keys() {
                    prop_assert_eq!(partition_of_key(k, 3), p.index());
                }
            }
            let want = format!("t{probe}");
            let mut via_index: Vec<String> = d.scan_indexed(&want).iter().map(Record::to_json).collect();
            let mut brute: Vec<String> = d.scan(|r| r.key_text("tag").as_deref() == Some(want.as_str())).iter().map(Record::to_json).collect();
            via_index.sort();
            brute.sort();
            prop_assert_eq!(via_index, brute);
            let distinct: BTreeSet<String> = ops.iter().map(|(k, _)| k.to_string()).collect();
            prop_assert_eq!(d.keys(), distinct);
        }
    }
}
