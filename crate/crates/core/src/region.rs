//! Hierarchical geographic registry.
//!
//! Regions form a fixed three-level tree (country, division, subdivision).
//! Codes are dash-joined paths such as `US`, `US-NY`, `US-NY-061`. Every
//! non-leaf region may own a single synthetic `<parent>-UNASSIGNED` child
//! that holds cases not yet attributed to any real child.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNASSIGNED_SUFFIX: &str = "-UNASSIGNED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Level {
    Country,
    Division,
    Subdivision,
}

impl Level {
    /// The level directly below this one, if any.
    pub fn child(self) -> Option<Level> {
        match self {
            Level::Country => Some(Level::Division),
            Level::Division => Some(Level::Subdivision),
            Level::Subdivision => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Country => "COUNTRY",
            Level::Division => "DIVISION",
            Level::Subdivision => "SUBDIVISION",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = RegionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "COUNTRY" => Ok(Level::Country),
            "DIVISION" => Ok(Level::Division),
            "SUBDIVISION" => Ok(Level::Subdivision),
            other => Err(RegionError::Invalid(format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: String,
    pub name_en: String,
    pub name_local: String,
    pub level: Level,
    pub parent_id: Option<String>,
    pub population: Option<u64>,
    #[serde(default)]
    pub is_unassigned: bool,
}

impl Region {
    pub fn new(region_id: impl Into<String>, name_en: impl Into<String>, level: Level) -> Self {
        let name_en = name_en.into();
        Self {
            region_id: region_id.into(),
            name_local: name_en.clone(),
            name_en,
            level,
            parent_id: None,
            population: None,
            is_unassigned: false,
        }
    }

    pub fn with_parent(mut self, parent: impl Into<String>) -> Self {
        self.parent_id = Some(parent.into());
        self
    }

    pub fn with_population(mut self, population: u64) -> Self {
        self.population = Some(population);
        self
    }

    pub fn with_local_name(mut self, name: impl Into<String>) -> Self {
        self.name_local = name.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegionError {
    #[error("region `{0}` is already registered")]
    DuplicateCode(String),
    #[error("parent region `{0}` is not registered")]
    UnknownParent(String),
    #[error("region `{child}` at {child_level} cannot sit under `{parent}` at {parent_level}")]
    LevelMismatch {
        child: String,
        child_level: Level,
        parent: String,
        parent_level: Level,
    },
    #[error("subdivision `{0}` cannot have children")]
    LeafParent(String),
    #[error("region `{0}` not found")]
    NotFound(String),
    #[error("invalid region: {0}")]
    Invalid(String),
}

/// Registry of regions plus a parent → children index kept in registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTree {
    regions: BTreeMap<String, Region>,
    children_index: BTreeMap<String, Vec<String>>,
}

impl RegionTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn register_region(&mut self, descriptor: Region) -> Result<Region, RegionError> {
        let code = descriptor.region_id.trim();
        if code.is_empty() || code != descriptor.region_id {
            return Err(RegionError::Invalid(format!(
                "region code `{}` must be non-empty without surrounding whitespace",
                descriptor.region_id
            )));
        }
        if self.regions.contains_key(code) {
            return Err(RegionError::DuplicateCode(code.to_string()));
        }
        if descriptor.is_unassigned {
            let parent = descriptor.parent_id.as_deref().unwrap_or_default();
            if code != unassigned_code(parent) {
                return Err(RegionError::Invalid(format!(
                    "unassigned region `{code}` must be named `{}`",
                    unassigned_code(parent)
                )));
            }
        }
        match (&descriptor.parent_id, descriptor.level) {
            (None, Level::Country) => {}
            (Some(_), Level::Country) => {
                return Err(RegionError::Invalid(format!(
                    "country `{code}` cannot have a parent"
                )))
            }
            (None, _) => return Err(RegionError::UnknownParent(String::new())),
            (Some(parent_id), level) => {
                let parent = self
                    .regions
                    .get(parent_id)
                    .ok_or_else(|| RegionError::UnknownParent(parent_id.clone()))?;
                if parent.level.child() != Some(level) {
                    return Err(RegionError::LevelMismatch {
                        child: code.to_string(),
                        child_level: level,
                        parent: parent_id.clone(),
                        parent_level: parent.level,
                    });
                }
            }
        }

        if let Some(parent) = &descriptor.parent_id {
            self.children_index
                .entry(parent.clone())
                .or_default()
                .push(code.to_string());
        }
        self.regions.insert(code.to_string(), descriptor.clone());
        Ok(descriptor)
    }

    /// Returns the unassigned bucket under `parent_id`, creating it on first use.
    pub fn ensure_unassigned(&mut self, parent_id: &str) -> Result<Region, RegionError> {
        let parent = self
            .regions
            .get(parent_id)
            .ok_or_else(|| RegionError::UnknownParent(parent_id.to_string()))?;
        let level = parent
            .level
            .child()
            .ok_or_else(|| RegionError::LeafParent(parent_id.to_string()))?;
        let code = unassigned_code(parent_id);
        if let Some(existing) = self.regions.get(&code) {
            return Ok(existing.clone());
        }
        let region = Region {
            region_id: code,
            name_en: "Unassigned".to_string(),
            name_local: "Unassigned".to_string(),
            level,
            parent_id: Some(parent_id.to_string()),
            population: None,
            is_unassigned: true,
        };
        self.register_region(region)
    }

    pub fn resolve(&self, code: &str) -> Result<&Region, RegionError> {
        self.regions
            .get(code)
            .ok_or_else(|| RegionError::NotFound(code.to_string()))
    }

    pub fn get(&self, code: &str) -> Option<&Region> {
        self.regions.get(code)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.regions.contains_key(code)
    }

    /// Children of `code` in registration order; empty for unknown codes.
    pub fn children(&self, code: &str) -> Vec<&Region> {
        self.child_ids(code)
            .iter()
            .filter_map(|id| self.regions.get(id))
            .collect()
    }

    pub fn child_ids(&self, code: &str) -> &[String] {
        self.children_index
            .get(code)
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn unassigned_child(&self, code: &str) -> Option<&Region> {
        self.regions.get(&unassigned_code(code))
    }

    pub fn countries(&self) -> Vec<&Region> {
        self.regions
            .values()
            .filter(|r| r.level == Level::Country)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    /// `code` plus every region below it, depth-first in registration order.
    pub fn subtree(&self, code: &str) -> Vec<&Region> {
        let mut out = Vec::new();
        let mut stack = vec![code.to_string()];
        while let Some(id) = stack.pop() {
            if let Some(region) = self.regions.get(&id) {
                out.push(region);
                stack.extend(self.child_ids(&id).iter().rev().cloned());
            }
        }
        out
    }

    /// Loads a registry file and registers every record in file order.
    ///
    /// The file is CSV with the header
    /// `code,name_en,name_local,level,parent,population`. `name_local`,
    /// `parent` and `population` may be empty. Lines starting with `#` are
    /// comments.
    pub fn load_csv<R: Read>(&mut self, reader: R) -> Result<usize, RegionError> {
        let records = parse_registry_csv(reader)?;
        let count = records.len();
        for region in records {
            self.register_region(region)?;
        }
        Ok(count)
    }

    /// Loads records, skipping ones that are already registered with the same content.
    pub fn merge_csv<R: Read>(&mut self, reader: R) -> Result<usize, RegionError> {
        let mut added = 0;
        for region in parse_registry_csv(reader)? {
            match self.regions.get(&region.region_id) {
                Some(existing) if *existing == region => continue,
                Some(_) => return Err(RegionError::DuplicateCode(region.region_id)),
                None => {
                    self.register_region(region)?;
                    added += 1;
                }
            }
        }
        Ok(added)
    }

    /// Full consistency scan of the tree invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for region in self.regions.values() {
            match (&region.parent_id, region.level) {
                (None, Level::Country) => {}
                (Some(p), level) => {
                    let parent = self
                        .regions
                        .get(p)
                        .ok_or_else(|| format!("orphan {}", region.region_id))?;
                    if parent.level.child() != Some(level) {
                        return Err(format!("level skip at {}", region.region_id));
                    }
                    if !self.child_ids(p).contains(&region.region_id) {
                        return Err(format!("{} missing from children index", region.region_id));
                    }
                }
                (None, _) => return Err(format!("non-country root {}", region.region_id)),
            }
        }
        for (parent, kids) in &self.children_index {
            let unassigned = kids.iter().filter(|k| k.ends_with(UNASSIGNED_SUFFIX)).count();
            if unassigned > 1 {
                return Err(format!("{parent} has {unassigned} unassigned children"));
            }
            for kid in kids {
                let parent_of = self.regions.get(kid).and_then(|r| r.parent_id.as_deref());
                if parent_of != Some(parent.as_str()) {
                    return Err(format!("stale index entry {parent} -> {kid}"));
                }
            }
        }
        Ok(())
    }
}

pub fn unassigned_code(parent_id: &str) -> String {
    format!("{parent_id}{UNASSIGNED_SUFFIX}")
}

#[derive(Debug, Deserialize)]
struct RegistryRow {
    code: String,
    name_en: String,
    #[serde(default)]
    name_local: String,
    level: String,
    #[serde(default)]
    parent: String,
    #[serde(default)]
    population: String,
}

/// Parses registry CSV without touching a tree. Used by the loader and fuzzing.
pub fn parse_registry_csv<R: Read>(reader: R) -> Result<Vec<Region>, RegionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<RegistryRow>().enumerate() {
        let row = row.map_err(|e| RegionError::Invalid(format!("record {}: {e}", line + 1)))?;
        let level: Level = row.level.parse()?;
        let population = if row.population.is_empty() {
            None
        } else {
            Some(row.population.parse::<u64>().map_err(|_| {
                RegionError::Invalid(format!(
                    "record {}: population `{}` is not a non-negative integer",
                    line + 1,
                    row.population
                ))
            })?)
        };
        let name_local = if row.name_local.is_empty() {
            row.name_en.clone()
        } else {
            row.name_local
        };
        let parent_id = (!row.parent.is_empty()).then_some(row.parent);
        let is_unassigned = parent_id
            .as_deref()
            .is_some_and(|p| row.code == unassigned_code(p));
        out.push(Region {
            region_id: row.code,
            name_en: row.name_en,
            name_local,
            level,
            parent_id,
            population,
            is_unassigned,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn italy() -> RegionTree {
        let mut tree = RegionTree::new();
        tree.register_region(Region::new("IT", "Italy", Level::Country))
            .unwrap();
        tree.register_region(
            Region::new("IT-25", "Lombardy", Level::Division)
                .with_local_name("Lombardia")
                .with_parent("IT"),
        )
        .unwrap();
        tree
    }

    #[test]
    fn registers_country_and_division() {
        let tree = italy();
        assert_eq!(tree.resolve("IT-25").unwrap().name_local, "Lombardia");
        let kids: Vec<_> = tree.children("IT").iter().map(|r| r.region_id.clone()).collect();
        assert_eq!(kids, vec!["IT-25"]);
        tree.check_invariants().unwrap();
    }

    #[test]
    fn missing_parent_is_rejected() {
        let mut tree = RegionTree::new();
        let err = tree
            .register_region(Region::new("US-NY", "New York", Level::Division).with_parent("US"))
            .unwrap_err();
        assert_eq!(err, RegionError::UnknownParent("US".into()));
    }

    #[test]
    fn duplicate_code_is_rejected() {
        let mut tree = RegionTree::new();
        tree.register_region(Region::new("US", "United States", Level::Country))
            .unwrap();
        let ny = Region::new("US-NY", "New York", Level::Division).with_parent("US");
        tree.register_region(ny.clone()).unwrap();
        assert_eq!(
            tree.register_region(ny).unwrap_err(),
            RegionError::DuplicateCode("US-NY".into())
        );
    }

    #[test]
    fn level_skip_is_rejected() {
        let mut tree = italy();
        let err = tree
            .register_region(Region::new("IT-X", "X", Level::Subdivision).with_parent("IT"))
            .unwrap_err();
        assert!(matches!(err, RegionError::LevelMismatch { .. }));
    }

    #[test]
    fn unassigned_is_idempotent_and_one_level_down() {
        let mut tree = RegionTree::new();
        tree.register_region(Region::new("US", "United States", Level::Country))
            .unwrap();
        tree.register_region(Region::new("US-NY", "New York", Level::Division).with_parent("US"))
            .unwrap();
        let a = tree.ensure_unassigned("US-NY").unwrap();
        let b = tree.ensure_unassigned("US-NY").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.region_id, "US-NY-UNASSIGNED");
        assert_eq!(a.level, Level::Subdivision);
        assert_eq!(tree.children("US-NY").len(), 1);

        let top = tree.ensure_unassigned("US").unwrap();
        assert_eq!(top.level, Level::Division);
        assert!(top.is_unassigned);
        tree.check_invariants().unwrap();
    }

    #[test]
    fn unassigned_errors() {
        let mut tree = italy();
        assert_eq!(
            tree.ensure_unassigned("FR").unwrap_err(),
            RegionError::UnknownParent("FR".into())
        );
        tree.register_region(Region::new("IT-25-MI", "Milano", Level::Subdivision).with_parent("IT-25"))
            .unwrap();
        assert_eq!(
            tree.ensure_unassigned("IT-25-MI").unwrap_err(),
            RegionError::LeafParent("IT-25-MI".into())
        );
    }

    #[test]
    fn resolve_unknown() {
        assert_eq!(
            italy().resolve("XX-99").unwrap_err(),
            RegionError::NotFound("XX-99".into())
        );
        assert!(italy().children("XX-99").is_empty());
    }

    #[test]
    fn loads_registry_csv() {
        let csv = "code,name_en,name_local,level,parent,population\n\
                   # comment line\n\
                   US,United States,,COUNTRY,,331000000\n\
                   US-NY,New York,,DIVISION,US,19450000\n\
                   US-NY-061,New York County,,SUBDIVISION,US-NY,\n";
        let mut tree = RegionTree::new();
        assert_eq!(tree.load_csv(csv.as_bytes()).unwrap(), 3);
        let county = tree.resolve("US-NY-061").unwrap();
        assert_eq!(county.population, None);
        assert_eq!(county.name_local, "New York County");
        assert_eq!(tree.resolve("US").unwrap().population, Some(331_000_000));
        assert_eq!(tree.merge_csv(csv.as_bytes()).unwrap(), 0);
    }

    #[test]
    fn rejects_negative_population() {
        let csv = "code,name_en,name_local,level,parent,population\nUS,United States,,COUNTRY,,-5\n";
        assert!(matches!(
            RegionTree::new().load_csv(csv.as_bytes()),
            Err(RegionError::Invalid(_))
        ));
    }

    #[test]
    fn subtree_walks_depth_first() {
        let mut tree = italy();
        tree.register_region(Region::new("IT-25-MI", "Milano", Level::Subdivision).with_parent("IT-25"))
            .unwrap();
        tree.register_region(Region::new("IT-21", "Piemonte", Level::Division).with_parent("IT"))
            .unwrap();
        let ids: Vec<_> = tree.subtree("IT").iter().map(|r| r.region_id.as_str()).collect();
        assert_eq!(ids, vec!["IT", "IT-25", "IT-25-MI", "IT-21"]);
    }
}
