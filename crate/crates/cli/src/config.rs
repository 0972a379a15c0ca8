use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use dbdc::backbone::NetworkConfig;
use dbdc::data::SynthConfig;
use dbdc::evaluate::EvalConfig;
use dbdc::losses::LossConfig;
use dbdc::maw::MawConfig;
use dbdc::trainer::{TrainConfig, TrainerConfig};

pub const OUT_ENV: &str = "DBDC_OUT";

/// Everything one invocation needs, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root, read by `train`/`eval` and written by `gen-data`.
    pub dataset: PathBuf,
    /// Run directory for training outputs.
    pub output: PathBuf,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub maw: MawConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/dbdc"),
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            maw: MawConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `KEY=VALUE` overrides, the seed and the
    /// output environment variable, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        let mut table = base.clone();
        let mut parsed = Vec::new();
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_dotted(&mut table, &key, value.clone())?;
            parsed.push((key, value));
        }
        let mut cfg: RunConfig = match Value::Table(table).try_into() {
            Ok(c) => c,
            Err(e) => return Err(blame(&base, &parsed, e)),
        };
        if let Some(s) = seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        if let Some(out) = std::env::var_os(OUT_ENV) {
            cfg.output = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.trainer().validate()?;
        Ok(())
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            network: self.network.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            maw: self.maw.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Points a deserialization failure at the override that caused it, if any.
fn blame(base: &Table, overrides: &[(String, Value)], err: toml::de::Error) -> anyhow::Error {
    for (key, value) in overrides {
        let mut t = base.clone();
        if set_dotted(&mut t, key, value.clone()).is_err() {
            continue;
        }
        if let Err(e) = Value::Table(t).try_into::<RunConfig>() {
            return anyhow!("invalid override `{key}`: {}", e.message());
        }
    }
    anyhow!("invalid config: {}", err.message())
}

/// Splits `a.b=c` and types the value: `on`/`off` are booleans, anything
/// TOML accepts as a literal keeps that type, everything else is a string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{raw}` is not KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{raw}` has an empty key segment");
    }
    let value = value.trim();
    let typed = match value {
        "on" => Value::Boolean(true),
        "off" => Value::Boolean(false),
        _ => format!("v = {value}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(value.to_string())),
    };
    Ok((key.to_string(), typed))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{}` is not a section", parts[..=i].join(".")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_typing() {
        assert_eq!(parse_override("loss.l_pd=off").unwrap().1, Value::Boolean(false));
        assert_eq!(parse_override("train.epochs=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("train.lr=1e-3").unwrap().1, Value::Float(1e-3));
        assert_eq!(
            parse_override("train.proto_update=sinkhorn").unwrap().1,
            Value::String("sinkhorn".into())
        );
        assert!(parse_override("train.epochs").is_err());
        assert!(parse_override("train..epochs=1").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = ["synth.K=3", "loss.l_mc=off", "train.epochs=2", "network.mlmb_placement=encoder_only"]
            .map(String::from);
        let cfg = RunConfig::resolve(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.synth.num_modalities, 3);
        assert!(!cfg.loss.l_mc);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        let echo: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(echo, cfg);
    }

    #[test]
    fn bad_keys_are_named() {
        let err = RunConfig::resolve(None, &["train.epoch=2".into()], None).unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
        let err = RunConfig::resolve(None, &["train.epochs=many".into()], None).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = RunConfig::resolve(None, &["train.epochs=0".into()], None).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }
}
