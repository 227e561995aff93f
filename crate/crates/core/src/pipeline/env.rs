use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "DFORGE_";

/// Applies `DFORGE_A__B=value` style overrides to a TOML table: the key
/// path is the lowercased remainder split on `__`, and the value is parsed
/// as a TOML value when possible, otherwise taken as a string. Returns the
/// dotted keys that were set, sorted.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    let mut applied = Vec::new();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(format!("malformed override variable {key}")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let (last, parents) = path.split_last().expect("nonempty path");
        let mut cur = &mut *table;
        for p in parents {
            let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{key}: `{p}` is not a table in the configuration")))?;
        }
        cur.insert(last.clone(), value);
        applied.push(path.join("."));
    }
    Ok(applied)
}

/// Parses a TOML configuration after applying overrides from `vars`.
pub fn parse_with_overrides<T, I>(text: &str, vars: I) -> Result<T>
where
    T: DeserializeOwned,
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("configuration: {e}")))?;
    apply_env_overrides(&mut table, vars)?;
    toml::Value::Table(table).try_into().map_err(|e| Error::config(format!("configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn nested_typed_overrides() {
        let mut t: toml::Table = toml::from_str("seed = 1\n[stage1]\nmax_steps = 10\n").unwrap();
        let applied = apply_env_overrides(
            &mut t,
            vars(&[("DFORGE_STAGE1__MAX_STEPS", "25"), ("DFORGE_NAME", "smoke run"), ("HOME", "/root"), ("DFORGE_NEW__FLAG", "true")]),
        )
        .unwrap();
        assert_eq!(applied, vec!["name", "new.flag", "stage1.max_steps"]);
        assert_eq!(t["stage1"]["max_steps"].as_integer(), Some(25));
        assert_eq!(t["name"].as_str(), Some("smoke run"));
        assert_eq!(t["new"]["flag"].as_bool(), Some(true));
    }

    #[test]
    fn scalar_parent_is_a_config_error() {
        let mut t: toml::Table = toml::from_str("seed = 1").unwrap();
        assert!(matches!(apply_env_overrides(&mut t, vars(&[("DFORGE_SEED__X", "2")])), Err(Error::Config(_))));
        assert!(matches!(apply_env_overrides(&mut t, vars(&[("DFORGE_A____B", "2")])), Err(Error::Config(_))));
    }
}
