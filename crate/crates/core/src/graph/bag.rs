//! Bags, patch graphs, the binary bag format and the dataset manifest.
//!
//! Bag file layout (little-endian):
//!
//! ```text
//! "SRMB"            4 bytes magic
//! version           u32 (= 1)
//! N                 u32 node count
//! D                 u32 feature width
//! label             u32 bag class
//! has_inst_labels   u8  (0 or 1)
//! features          N·D × f32, row-major
//! grid coords       N × (i32 col, i32 row)
//! instance labels   N × u8 (0/1), only when flagged
//! ```
//!
//! The bag id is not stored in the file; [`load_bag`] takes it from the file stem.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geometry::build_edges;
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 4] = b"SRMB";
pub const BAG_VERSION: u32 = 1;
pub const BAG_EXTENSION: &str = "srmb";

/// One slide surrogate: patch features on an integer grid with a bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub bag_id: String,
    /// Feature width `D`.
    pub dim: usize,
    /// `N × D` row-major features.
    pub features: Vec<f32>,
    /// `(column, row)` in step-size grid units.
    pub coords: Vec<[i32; 2]>,
    pub label: usize,
    pub instance_labels: Option<Vec<bool>>,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::Data(format!("bag {} has no patches", self.bag_id)));
        }
        if self.dim == 0 || self.features.len() != n * self.dim {
            return Err(Error::Data(format!(
                "bag {}: {} feature values for {n} patches of width {}",
                self.bag_id,
                self.features.len(),
                self.dim
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "bag {}: non-finite feature at patch {}",
                self.bag_id,
                i / self.dim
            )));
        }
        if let Some(l) = &self.instance_labels {
            if l.len() != n {
                return Err(Error::Data(format!(
                    "bag {}: {} instance labels for {n} patches",
                    self.bag_id,
                    l.len()
                )));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::Data(format!("bag {}: duplicate coordinate {c:?}", self.bag_id)));
            }
        }
        Ok(())
    }
}

/// A bag together with its spatial edge list; the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph {
    pub bag: PatchBag,
    /// Directed `(source, target)` pairs; self-loops are not stored.
    pub edges: Vec<(usize, usize)>,
    /// Index of the pooling node when attached (always `N`).
    pub global_index: Option<usize>,
}

impl PatchGraph {
    pub fn from_bag(bag: PatchBag) -> Result<Self> {
        bag.validate()?;
        let edges = build_edges(&bag.coords)?;
        Ok(Self {
            bag,
            edges,
            global_index: None,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.bag.len()
    }

    /// Patch nodes plus the global node when present.
    pub fn num_nodes(&self) -> usize {
        self.num_patches() + usize::from(self.global_index.is_some())
    }

    /// Appends the pooling node at index `N` with one incoming edge from every
    /// patch. No edges leave the global node.
    pub fn attach_global_node(mut self) -> Result<Self> {
        if self.global_index.is_some() {
            return Err(Error::Invariant("global node already attached".into()));
        }
        let g = self.num_patches();
        self.edges.extend((0..g).map(|j| (j, g)));
        self.global_index = Some(g);
        Ok(self)
    }

    /// Edges between patch nodes only.
    pub fn patch_edges(&self) -> impl Iterator<Item = &(usize, usize)> {
        let n = self.num_patches();
        self.edges.iter().filter(move |(s, t)| *s < n && *t < n)
    }
}

/// Serializes a bag into the binary bag format.
pub fn encode_bag(bag: &PatchBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let n = bag.len();
    let mut out = Vec::with_capacity(21 + n * (bag.dim * 4 + 9));
    out.extend_from_slice(BAG_MAGIC);
    for v in [BAG_VERSION, n as u32, bag.dim as u32, bag.label as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(bag.instance_labels.is_some()));
    for f in &bag.features {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for [x, y] in &bag.coords {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    if let Some(labels) = &bag.instance_labels {
        out.extend(labels.iter().map(|&b| u8::from(b)));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses the binary bag format; no partial bag is ever returned.
pub fn decode_bag(bytes: &[u8], bag_id: &str) -> Result<PatchBag> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BAG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != BAG_VERSION {
        return Err(Error::Format {
            offset: version_at,
            detail: format!("unsupported version {version}"),
        });
    }
    let n = r.u32("node count")? as usize;
    let dim = r.u32("feature width")? as usize;
    let label = r.u32("label")? as usize;
    let flag_at = r.pos;
    let has_labels = match r.take(1, "instance-label flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: flag_at,
                detail: format!("instance-label flag {other}"),
            })
        }
    };
    let feat_bytes = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: 8,
            detail: "feature block size overflows".into(),
        })?;
    let features = r
        .take(feat_bytes, "features")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let coords = r
        .take(n * 8, "grid coordinates")?
        .chunks_exact(8)
        .map(|c| {
            [
                i32::from_le_bytes(c[..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..].try_into().unwrap()),
            ]
        })
        .collect();
    let instance_labels = if has_labels {
        let start = r.pos;
        let raw = r.take(n, "instance labels")?;
        let mut labels = Vec::with_capacity(n);
        for (i, &b) in raw.iter().enumerate() {
            match b {
                0 => labels.push(false),
                1 => labels.push(true),
                _ => {
                    return Err(Error::Format {
                        offset: start + i,
                        detail: format!("instance label byte {b}"),
                    })
                }
            }
        }
        Some(labels)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let bag = PatchBag {
        bag_id: bag_id.to_string(),
        dim,
        features,
        coords,
        label,
        instance_labels,
    };
    bag.validate().map_err(|e| Error::Format {
        offset: 0,
        detail: e.to_string(),
    })?;
    Ok(bag)
}

pub fn save_bag(bag: &PatchBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bag(path: &Path) -> Result<PatchBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    decode_bag(&bytes, id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Bag fractions per split; they must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.15,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must lie in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Bag counts per split: train and val are rounded half up, test takes the rest.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let round = |f: f64| ((f * n as f64) + 0.5).floor() as usize;
        let train = round(self.train).min(n);
        let val = round(self.val).min(n - train);
        Ok([train, val, n - train - val])
    }
}

/// Seeded random assignment of `n` bags to splits with exact [`SplitFractions::counts`].
pub fn assign_splits(n: usize, fractions: &SplitFractions, rng: &mut impl rand::Rng) -> Result<Vec<Split>> {
    let [train, val, _] = fractions.counts(n)?;
    let mut splits: Vec<Split> = (0..n)
        .map(|i| match i {
            i if i < train => Split::Train,
            i if i < train + val => Split::Val,
            _ => Split::Test,
        })
        .collect();
    rand::seq::SliceRandom::shuffle(splits.as_mut_slice(), rng);
    Ok(splits)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Bag file path, relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Bags of a dataset grouped by split, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PatchBag>,
    pub val: Vec<PatchBag>,
    pub test: Vec<PatchBag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PatchBag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Groups `bags` by their assigned splits, keeping order within each split.
    pub fn from_assignment(bags: Vec<PatchBag>, splits: &[Split]) -> Result<Self> {
        if bags.len() != splits.len() {
            return Err(Error::Argument(format!("{} splits for {} bags", splits.len(), bags.len())));
        }
        let mut ds = Dataset::default();
        for (bag, &split) in bags.into_iter().zip(splits) {
            ds.push(split, bag);
        }
        Ok(ds)
    }

    pub fn push(&mut self, split: Split, bag: PatchBag) {
        match split {
            Split::Train => self.train.push(bag),
            Split::Val => self.val.push(bag),
            Split::Test => self.test.push(bag),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads every bag listed in a manifest, checking labels agree with the files.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ds = Dataset::default();
    for entry in read_manifest(manifest)? {
        let mut bag = load_bag(&base.join(&entry.path))?;
        if bag.label != entry.label {
            return Err(Error::Data(format!(
                "manifest label {} disagrees with bag file label {} for {}",
                entry.label, bag.label, entry.id
            )));
        }
        bag.bag_id = entry.id;
        ds.push(entry.split, bag);
    }
    Ok(ds)
}
