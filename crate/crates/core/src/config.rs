//! Flat `key = value` configuration text with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One assignment and the line it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(i + 1, "empty key"));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn format(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

pub fn array<T: FromStr + Copy + Default, const N: usize>(key: &str, raw: &str) -> Result<[T; N]> {
    let v: Vec<T> = list(key, raw)?;
    if v.len() != N {
        return Err(Error::Config(format!("{key} needs {N} comma-separated values, got {}", v.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&v);
    Ok(out)
}

pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let e = parse("# header\n\na = 1 # trailing\n b=x,y \n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("a", "1", 3));
        assert_eq!(e[1].value, "x,y");
        assert!(matches!(parse("a 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn typed_values() {
        assert_eq!(array::<usize, 3>("k", "1, 2,3").unwrap(), [1, 2, 3]);
        assert!(array::<usize, 2>("k", "1,2,3").is_err());
        assert!(value::<f64>("k", "abc").is_err());
        assert_eq!(join(&[0.5, 1.0]), "0.5,1");
    }
}
