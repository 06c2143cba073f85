use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use super::SubjectParse;
use crate::error::{Error, Result};

pub const CACHE_VERSION: u32 = 1;

const HEADER_PREFIX: &str = "# guided parse cache v";

/// Parses keyed by the exact class-name string.
///
/// On disk: a `# guided parse cache v1` header line followed by one JSON
/// record per class name, sorted by name.
#[derive(Debug, Default)]
pub struct ParseCache {
    entries: RwLock<BTreeMap<String, SubjectParse>>,
}

impl ParseCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        CACHE_VERSION
    }

    pub fn get(&self, name: &str) -> Option<SubjectParse> {
        self.entries
            .read()
            .expect("parse cache poisoned")
            .get(name)
            .cloned()
    }

    pub fn insert(&self, parse: SubjectParse) {
        self.entries
            .write()
            .expect("parse cache poisoned")
            .insert(parse.input_name.clone(), parse);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("parse cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_text(&self) -> String {
        let entries = self.entries.read().expect("parse cache poisoned");
        let mut out = format!("{HEADER_PREFIX}{CACHE_VERSION}\n");
        for parse in entries.values() {
            out.push_str(&serde_json::to_string(parse).expect("parse serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let version: u32 = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format("parse cache", format!("bad header {header:?}")))?;
        if version != CACHE_VERSION {
            return Err(Error::format(
                "parse cache",
                format!("version {version}, expected {CACHE_VERSION}"),
            ));
        }
        let cache = Self::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse: SubjectParse = serde_json::from_str(line)
                .map_err(|e| Error::format("parse cache", format!("line {}: {e}", i + 2)))?;
            cache.insert(parse);
        }
        Ok(cache)
    }

    /// Loads `path`, or returns an empty cache when it does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_text(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::rule_based_parse;
    use proptest::prelude::*;

    #[test]
    fn keys_are_not_normalized() {
        let cache = ParseCache::new();
        cache.insert(rule_based_parse("Red Chair"));
        assert!(cache.get("Red Chair").is_some());
        assert!(cache.get("red chair").is_none());
        assert!(cache.get("Red  Chair").is_none());
    }

    #[test]
    fn rejects_other_versions() {
        assert!(ParseCache::from_text("# guided parse cache v2\n").is_err());
        assert!(ParseCache::from_text("garbage\n").is_err());
        assert!(ParseCache::from_text("# guided parse cache v1\n").unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn store_then_lookup_is_identity(names in proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,4}", 1..20)) {
            let cache = ParseCache::new();
            let parses: Vec<_> = names.iter().map(|n| rule_based_parse(n)).collect();
            for p in &parses {
                cache.insert(p.clone());
            }
            let reloaded = ParseCache::from_text(&cache.to_text()).unwrap();
            for p in &parses {
                prop_assert_eq!(cache.get(&p.input_name), Some(p.clone()));
                prop_assert_eq!(reloaded.get(&p.input_name), Some(p.clone()));
            }
        }
    }
}
