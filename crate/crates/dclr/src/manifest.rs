//! Versioned `key = value` text files describing stage outputs.
//!
//! The first line is always `format = <kind> <version>`. Keys may repeat;
//! order is preserved.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    kind: String,
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Manifest {
            kind: kind.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let mut out = format!("format = {} {VERSION}\n", self.kind);
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Parses `text`, requiring the header to name `kind` at the supported
    /// version.
    pub fn parse(text: &str, kind: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, reason: String| Error::format(origin, format!("line {}: {reason}", line + 1));
        let (i, header) = lines.next().ok_or_else(|| Error::format(origin, "empty file"))?;
        let expected = format!("{kind} {VERSION}");
        match header.split_once('=') {
            Some((k, v)) if k.trim() == "format" && v.trim() == expected => {}
            Some((k, v)) if k.trim() == "format" => {
                return Err(bad(i, format!("expected format {expected:?}, found {:?}", v.trim())))
            }
            _ => return Err(bad(i, format!("missing `format = {expected}` header"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i, format!("expected `key = value`, got {line:?}")))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Manifest {
            kind: kind.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.to_path_buf(),
                what: "stage manifest",
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, kind, path)
    }

    /// Every value of `key`, in file order.
    pub fn all<'a>(&'a self, key: &str) -> impl Iterator<Item = &'a str> + 'a {
        let key = key.to_string();
        self.entries.iter().filter(move |(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// The single value of `key`.
    pub fn get(&self, key: &str, origin: &Path) -> Result<&str> {
        let mut values = self.all(key);
        match (values.next(), values.next()) {
            (Some(v), None) => Ok(v),
            (None, _) => Err(Error::format(origin, format!("missing key {key}"))),
            (Some(_), Some(_)) => Err(Error::format(origin, format!("key {key} given more than once"))),
        }
    }

    pub fn parse_value<T: FromStr>(&self, key: &str, origin: &Path) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key, origin)?;
        v.parse()
            .map_err(|e| Error::format(origin, format!("key {key}: cannot parse {v:?}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_repeated_keys() {
        let mut m = Manifest::new("dclr-test");
        m.push("a", 1).push("slide", "x").push("slide", "y");
        let back = Manifest::parse(&m.render(), "dclr-test", Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.all("slide").collect::<Vec<_>>(), ["x", "y"]);
        assert_eq!(back.parse_value::<u32>("a", Path::new("m")).unwrap(), 1);
        assert!(back.get("slide", Path::new("m")).is_err());
        assert!(back.get("b", Path::new("m")).is_err());
    }

    #[test]
    fn header_is_checked() {
        let p = Path::new("m");
        assert!(Manifest::parse("format = other 1\n", "dclr-test", p).is_err());
        assert!(Manifest::parse("format = dclr-test 2\n", "dclr-test", p).is_err());
        assert!(Manifest::parse("a = 1\n", "dclr-test", p).is_err());
        assert!(Manifest::parse("", "dclr-test", p).is_err());
    }
}
