//! `key=value` configuration text.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` lines in file order. Blank lines and lines starting
/// with `#` are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::parse(i + 1, "empty key"));
            }
            if entries.iter().any(|(_, e, _)| e == k) {
                return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, k, _)| k.as_str())
    }

    /// Parses `key` when present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.iter().find(|(_, k, _)| k == key) {
            None => Ok(None),
            Some((line, _, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(*line, format!("invalid value `{v}` for {key}"))),
        }
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(_, k, _)| !known.contains(&k.as_str())) {
            Some((line, k, _)) => Err(Error::parse(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Overwrites `slot` with the parsed value of `key` when present.
pub fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.get(key)? {
        *slot = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let kv = KeyValues::parse("# comment\nlr = 0.5\n\nsteps=10\n").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(kv.get::<usize>("steps").unwrap(), Some(10));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
        assert!(matches!(kv.get::<usize>("lr"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(kv.reject_unknown(&["lr"]), Err(Error::Parse { line: 4, .. })));
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("=3").is_err());
    }
}
