//! Minimal `key = value` text format with `[section]` headers, shared by the
//! synthetic-data, training, pipeline and plan configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    /// Header text inside the brackets; `None` for the leading block.
    pub header: Option<String>,
    pub line: usize,
    pub entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, origin: &str, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::format(origin, *line, format!("invalid value for '{key}': '{v}'"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, origin: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parse(origin, key)?.unwrap_or(default))
    }

    pub fn require(&self, origin: &str, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(origin, self.line, format!("missing key '{key}'")))
    }

    /// Comma-separated list value.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn parse(text: &str, origin: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        line: 1,
        ..Default::default()
    }];
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let header = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::format(origin, lineno, "unterminated section header"))?;
            sections.push(Section {
                header: Some(header.trim().to_string()),
                line: lineno,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, lineno, "expected 'key = value'"))?;
        let k = k.trim().to_string();
        let section = sections.last_mut().expect("leading section always present");
        if section.entries.contains_key(&k) {
            return Err(Error::format(origin, lineno, format!("duplicate key '{k}'")));
        }
        section.entries.insert(k, (v.trim().to_string(), lineno));
    }
    Ok(sections)
}

/// Writes sections back to text, keys in sorted order.
pub fn render(sections: &[Section]) -> String {
    let mut out = String::new();
    for s in sections {
        if let Some(h) = &s.header {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{h}]\n"));
        }
        for (k, (v, _)) in &s.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}
