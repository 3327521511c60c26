//! Minimal INI reader: `[section]` headers, `key = value` lines, and whole
//! line comments starting with `#` or `;`. Every item keeps its line number
//! so that typed validation can point back into the file.

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Sections in file order. Duplicate sections, duplicate keys within a
/// section and keys before the first header are rejected.
pub fn parse(text: &str, origin: &str) -> Result<Vec<Section>, CliError> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| CliError::config_at(origin, line, msg);
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{s}`")))?
                .trim();
            if name.is_empty() {
                return Err(err("empty section name".into()));
            }
            if let Some(prev) = sections.iter().find(|sec| sec.name == name) {
                return Err(err(format!("section [{name}] already opened on line {}", prev.line)));
            }
            sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{s}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("missing key before `=`".into()));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| err(format!("key `{key}` appears before any section header")))?;
        if let Some(prev) = section.entries.iter().find(|e| e.key == key) {
            return Err(err(format!("key `{key}` already set on line {}", prev.line)));
        }
        section.entries.push(Entry { key: key.to_string(), value: value.to_string(), line });
    }
    Ok(sections)
}
