use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default number of active control rigs.
pub const DEFAULT_RIG_COUNT: usize = 116;

/// Facial region a rig deforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Lip,
    Eye,
    Forehead,
    Other,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Lip => "lip",
            Region::Eye => "eye",
            Region::Forehead => "forehead",
            Region::Other => "other",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Registry file layout: `{"names": [...], "regions": {"rig": "lip", ...}}`.
#[derive(Serialize, Deserialize)]
struct RegistryFile {
    names: Vec<String>,
    regions: BTreeMap<String, Region>,
}

/// Ordered set of control rigs with one region tag each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RigRegistry {
    names: Vec<String>,
    regions: Vec<Region>,
    index: HashMap<String, usize>,
}

impl RigRegistry {
    pub fn new(names: Vec<String>, regions: &BTreeMap<String, Region>) -> Result<Self> {
        let mut seen = HashSet::new();
        let dups: Vec<&str> = names
            .iter()
            .filter(|n| !seen.insert(n.as_str()))
            .map(|n| n.as_str())
            .collect();
        if !dups.is_empty() {
            return Err(Error::Schema(format!("duplicate rig names: {}", dups.join(", "))));
        }
        if names.is_empty() {
            return Err(Error::Schema("registry has no rigs".into()));
        }
        let untagged: Vec<&str> = names
            .iter()
            .filter(|n| !regions.contains_key(n.as_str()))
            .map(|n| n.as_str())
            .collect();
        if !untagged.is_empty() {
            return Err(Error::Schema(format!(
                "rigs without region tag: {}",
                untagged.join(", ")
            )));
        }
        let stray: Vec<&str> = regions
            .keys()
            .filter(|k| !seen.contains(k.as_str()))
            .map(|k| k.as_str())
            .collect();
        if !stray.is_empty() {
            return Err(Error::Schema(format!(
                "region tags for unknown rigs: {}",
                stray.join(", ")
            )));
        }
        let tags = names.iter().map(|n| regions[n.as_str()]).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(RigRegistry {
            names,
            regions: tags,
            index,
        })
    }

    /// Synthetic registry with `lip`, `eye`, `forehead` and `other` rigs in
    /// that order, named `<region>_<nn>`.
    pub fn synthetic(lip: usize, eye: usize, forehead: usize, other: usize) -> Self {
        let mut names = Vec::new();
        let mut regions = BTreeMap::new();
        for (region, count) in [
            (Region::Lip, lip),
            (Region::Eye, eye),
            (Region::Forehead, forehead),
            (Region::Other, other),
        ] {
            for i in 0..count {
                let name = format!("{}_{:02}", region.name(), i);
                regions.insert(name.clone(), region);
                names.push(name);
            }
        }
        RigRegistry::new(names, &regions).expect("synthetic registry is valid")
    }

    /// 116 rigs: 40 lip, 16 eye, 16 forehead, 44 other.
    pub fn default_116() -> Self {
        RigRegistry::synthetic(40, 16, 16, 44)
    }

    /// A registry of `rigs` rigs split over the four regions in roughly the
    /// same proportions as [`RigRegistry::default_116`].
    pub fn scaled(rigs: usize) -> Self {
        assert!(rigs >= 4, "need at least one rig per region");
        let lip = (rigs * 40 / 116).max(1);
        let eye = (rigs * 16 / 116).max(1);
        let forehead = (rigs * 16 / 116).max(1);
        RigRegistry::synthetic(lip, eye, forehead, rigs - lip - eye - forehead)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn region(&self, rig: usize) -> Region {
        self.regions[rig]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn indices_in(&self, region: Region) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.regions[i] == region).collect()
    }

    /// Checksum binding curve data to this exact registry (names, order and
    /// tags).
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (n, r) in self.names.iter().zip(&self.regions) {
            h.update(n.as_bytes());
            h.update(b"\t");
            h.update(r.name().as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            names: self.names.clone(),
            regions: self.names.iter().cloned().zip(self.regions.iter().copied()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("registry JSON: {e}")))?;
        RigRegistry::new(file.names, &file.regions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RigRegistry::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl Default for RigRegistry {
    fn default() -> Self {
        RigRegistry::default_116()
    }
}
