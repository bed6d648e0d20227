//! JSON run configs layered under command-line flags.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use phyc_core::error::{Error, Result};
use phyc_core::io;

/// Keys that never go into a lock file: where the run writes, and the
/// config file itself. Neither affects the produced bytes.
const UNLOCKED: [&str; 2] = ["out", "config"];

/// Merges a JSON config under the parsed flags. Flags given on the command
/// line win, then JSON values, then flag defaults. Keys that are not flags
/// of the subcommand are rejected.
pub fn resolve<A>(parsed: &A, matches: &ArgMatches, config: Option<&Path>) -> Result<A>
where
    A: Serialize + DeserializeOwned,
{
    let Value::Object(mut merged) = serde_json::to_value(parsed).expect("flags serialize") else {
        unreachable!("argument structs serialize to objects");
    };
    let Some(path) = config else {
        return Ok(serde_json::from_value(Value::Object(merged)).expect("flags roundtrip"));
    };
    let text = io::read_text(path)?;
    let json: Map<String, Value> = io::parse_json(path, &text)?;
    for (key, value) in json {
        if !merged.contains_key(&key) || UNLOCKED[1] == key {
            return Err(Error::Config(format!(
                "{}: unknown key {key:?}",
                path.display()
            )));
        }
        if !from_command_line(matches, &key) {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn from_command_line(matches: &ArgMatches, id: &str) -> bool {
    matches.try_get_raw(id).is_ok() && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// The resolved config with output locations removed.
pub fn lock_value<A: Serialize>(resolved: &A) -> Value {
    let mut v = serde_json::to_value(resolved).expect("config serializes");
    if let Value::Object(m) = &mut v {
        for k in UNLOCKED {
            m.remove(k);
        }
        m.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
    }
    v
}

/// Writes `config.lock.json` into `dir`.
pub fn write_lock<A: Serialize>(dir: &Path, resolved: &A) -> Result<()> {
    io::create_dir(dir)?;
    io::write_json(&dir.join("config.lock.json"), &lock_value(resolved))
}
