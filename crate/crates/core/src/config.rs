//! Flat `key = value` text configuration.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {l:?}", i + 1)))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Looks up `key` in parsed pairs (last occurrence wins).
pub fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn require<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let v = lookup(pairs, key).ok_or_else(|| Error::Config(format!("missing key {key}")))?;
    parse_value(key, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let kv = parse_kv("# run\nepochs = 3\n\nlr=0.001 # fast\nepochs=4\n").unwrap();
        assert_eq!(kv.len(), 3);
        assert_eq!(require::<usize>(&kv, "epochs").unwrap(), 4);
        assert_eq!(require::<f64>(&kv, "lr").unwrap(), 0.001);
        assert!(parse_kv("oops").is_err());
        assert!(require::<usize>(&kv, "lr").is_err());
    }
}
