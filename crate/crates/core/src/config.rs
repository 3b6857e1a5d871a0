//! Flat `key = value` configuration sections.
//!
//! Every configurable struct implements [`Section`]: it lists its keys with
//! their current values and accepts string assignments, rejecting unknown
//! keys. [`crate::run_config::RunConfig`] stitches sections into an INI file.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub trait Section {
    /// Section name used in INI headers and dotted overrides.
    const NAME: &'static str;

    /// `(key, value)` pairs in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Assigns one key; unknown keys and malformed values are errors whose
    /// path is `section.key`.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Cross-field checks run after all assignments.
    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn from_kv_str(text: &str) -> Result<Self>
    where
        Self: Default + Sized,
    {
        let mut out = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}", Self::NAME, lineno + 1), "expected `key = value`")
            })?;
            out.set(k.trim(), v.trim())?;
        }
        out.validate()?;
        Ok(out)
    }
}

pub(crate) fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("`{value}`: {e}")))
}

pub(crate) fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{section}.{key}"), format!("`{value}` is not a boolean"))),
    }
}

pub(crate) fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn unknown(section: &str, key: &str) -> Error {
    Error::config(format!("{section}.{key}"), "unknown key")
}

pub(crate) fn invalid(section: &str, key: &str, msg: impl Into<String>) -> Error {
    Error::config(format!("{section}.{key}"), msg)
}
