//! Option resolution and the shared run context.
//!
//! Every option can come from three places. Explicit command-line flags win
//! over a JSON config file (`--config`), which wins over the environment
//! (`RPF_OUT_DIR`, `RPF_THREADS`). Config files hold global keys at the top
//! level and per-command keys in a section named after the command, e.g.
//! `{"seed": 3, "gen": {"n_train": 100}}`; a command key missing from its
//! section is also looked up at the top level.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use clap::Args;
use rpf_core::csvio::{Provenance, Table};
use rpf_core::network::{build_network, case9, parse_matpower_case, InjectorConfig, Network};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// A problem with how the tool was invoked; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// JSON config file with global keys and per-command sections.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Base random seed [default: 7].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// MATPOWER case file [default: the bundled IEEE 9-bus case].
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,
    /// JSON generator-injector parameters [default: the 9-bus settings].
    #[arg(long, global = true)]
    pub injectors: Option<PathBuf>,
    /// Output directory [env: RPF_OUT_DIR; default: current directory].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for per-OC work [env: RPF_THREADS; default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub print_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
}

/// A parsed `--config` file.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(usage(format!("config file {} must hold a JSON object", path.display()))),
            Err(e) => Err(usage(format!("config file {}: {e}", path.display()))),
        }
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&Value> {
        self.root
            .get(section)
            .and_then(|s| s.get(key))
            .or_else(|| self.root.get(key).filter(|v| !v.is_object()))
    }

    /// Fills every unset field of `flags` (`null`, or `false` for switches)
    /// from the file.
    pub fn merge<T: Serialize + DeserializeOwned>(&self, flags: &T, section: &str) -> Result<T> {
        let mut value = serde_json::to_value(flags)?;
        if let Value::Object(map) = &mut value {
            for (key, v) in map.iter_mut() {
                if v.is_null() || *v == Value::Bool(false) {
                    if let Some(found) = self.lookup(section, key) {
                        *v = found.clone();
                    }
                }
            }
        }
        serde_json::from_value(value).map_err(|e| usage(format!("config file, `{section}` options: {e}")))
    }
}

fn env_value<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(s) if !s.is_empty() => s
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("environment variable {name} has an invalid value `{s}`"))),
        _ => Ok(None),
    }
}

/// Fully resolved global options.
#[derive(Debug, Clone, Serialize)]
pub struct Globals {
    pub seed: u64,
    pub network: Option<PathBuf>,
    pub injectors: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 7;

impl Globals {
    pub fn resolve(flags: &GlobalArgs, file: &ConfigFile) -> Result<Self> {
        let merged: GlobalArgs = file.merge(flags, "global")?;
        let out_dir = match merged.out_dir {
            Some(p) => p,
            None => env_value::<PathBuf>("RPF_OUT_DIR")?.unwrap_or_else(|| PathBuf::from(".")),
        };
        let threads = match merged.threads {
            Some(t) => Some(t),
            None => env_value("RPF_THREADS")?,
        };
        if threads == Some(0) {
            return Err(usage("thread count must be at least 1"));
        }
        Ok(Self {
            seed: merged.seed.unwrap_or(DEFAULT_SEED),
            network: merged.network,
            injectors: merged.injectors,
            out_dir,
            threads,
        })
    }
}

/// Everything a command needs: resolved globals, the network and output helpers.
pub struct Context {
    pub globals: Globals,
    pub network: Network,
}

impl Context {
    pub fn new(globals: Globals) -> Result<Self> {
        let network = load_network(globals.network.as_deref(), globals.injectors.as_deref())?;
        std::fs::create_dir_all(&globals.out_dir)
            .with_context(|| format!("cannot create output directory {}", globals.out_dir.display()))?;
        Ok(Self { globals, network })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.globals.out_dir.join(name)
    }

    /// Output path: an explicit choice, or `name` inside the output directory.
    pub fn out_or(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out(name))
    }

    pub fn seed(&self, offset: u64) -> u64 {
        self.globals.seed.wrapping_add(offset)
    }

    /// Provenance for outputs of `command` run with `options`. The output
    /// directory and thread count do not affect results and are left out,
    /// so reruns elsewhere or with other parallelism produce identical bytes.
    pub fn provenance(&self, command: &str, options: &impl Serialize) -> Result<Provenance> {
        let global = json!({
            "seed": self.globals.seed,
            "network": self.globals.network,
            "injectors": self.globals.injectors,
        });
        let config = json!({ "command": command, "global": global, "options": options });
        Ok(Provenance::new(&config)?.with_input("network", &self.network.fingerprint()))
    }

    pub fn header(&self, provenance: &Provenance, extra: Value) -> Value {
        let mut h = json!({ "provenance": provenance });
        if let (Value::Object(h), Value::Object(extra)) = (&mut h, extra) {
            h.extend(extra);
        }
        h
    }

    pub fn write(&self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_table(&self, path: &Path, table: &Table) -> Result<()> {
        self.write(path, &table.to_csv())
    }
}

/// Reads a required input file, reporting a missing file as a usage error.
pub fn read_input(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn load_network(path: Option<&Path>, injectors: Option<&Path>) -> Result<Network> {
    let Some(path) = path else {
        if injectors.is_some() {
            return Err(usage("--injectors needs --network"));
        }
        return Ok(case9());
    };
    let spec = parse_matpower_case(&read_input(path, "network file")?)
        .with_context(|| format!("parsing network file {}", path.display()))?;
    let inj = match injectors {
        Some(p) => InjectorConfig::from_json(&read_input(p, "injector config")?)
            .with_context(|| format!("parsing injector config {}", p.display()))?,
        None => InjectorConfig::case9(),
    };
    build_network(&spec, &inj).with_context(|| format!("building network from {}", path.display()))
}

/// Parses `"a,b"` into two numbers.
pub fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got `{s}`"));
    }
    let a = parts[0].trim().parse().map_err(|_| format!("not a number: `{}`", parts[0]))?;
    let b = parts[1].trim().parse().map_err(|_| format!("not a number: `{}`", parts[1]))?;
    Ok((a, b))
}
