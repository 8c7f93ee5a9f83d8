//! `key=value` override files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! consumed by the running subcommand; leftovers are reported as unknown.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fgrect::{Error, Result};

#[derive(Debug, Default)]
pub struct Overrides {
    values: BTreeMap<String, (String, usize)>,
}

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", n + 1)))?;
            let k = k.trim().to_string();
            if values.insert(k.clone(), (v.trim().to_string(), n + 1)).is_some() {
                return Err(Error::InvalidArgument(format!("config line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { values })
    }

    /// Remove and parse `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("config line {line}: bad value for `{key}`: {e}"))),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn apply<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::InvalidArgument(format!("config line {line}: unknown key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut o = Overrides::parse("# comment\n\niterations = 12\nlearning_rate=0.5\n").unwrap();
        let mut it = 500usize;
        o.apply("iterations", &mut it).unwrap();
        assert_eq!(it, 12);
        assert!(o.finish().is_err());
    }

    #[test]
    fn bad_lines() {
        assert!(Overrides::parse("novalue").is_err());
        assert!(Overrides::parse("a=1\na=2").is_err());
        let mut o = Overrides::parse("n=abc").unwrap();
        assert!(o.take::<usize>("n").is_err());
    }
}
