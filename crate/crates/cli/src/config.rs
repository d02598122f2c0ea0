//! Layered run configuration: defaults, then a TOML file, then `--set`
//! overrides and `--seed`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use t2l_core::experiment::DeskConfig;
use toml::{Table, Value};

/// Environment variable consulted when neither the file nor the flags set a seed.
pub const SEED_ENV: &str = "T2L_SEED";

/// Sources for one resolved configuration, lowest precedence first.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources<'a> {
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub env_seed: Option<String>,
    pub lr_scale: Option<f64>,
}

pub fn load_config(src: &ConfigSources<'_>) -> Result<DeskConfig> {
    let mut layer = match src.file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in src.overrides {
        apply_override(&mut layer, o)?;
    }
    let seed_given = layer.contains_key("seed");
    let mut table = Table::try_from(DeskConfig::default()).context("serializing defaults")?;
    merge(&mut table, layer);
    if let Some(seed) = src.seed {
        table.insert("seed".into(), seed_value(seed)?);
    } else if !seed_given {
        if let Some(env) = src.env_seed.as_deref().filter(|s| !s.trim().is_empty()) {
            let seed: u64 = env
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={env:?} is not an unsigned integer"))?;
            table.insert("seed".into(), seed_value(seed)?);
        }
    }
    let mut cfg = DeskConfig::deserialize(Value::Table(table)).context("config")?;
    if let Some(s) = src.lr_scale {
        if !(s.is_finite() && s > 0.0) {
            bail!("--lr-scale must be positive, got {s}");
        }
        for t in [&mut cfg.pretrain, &mut cfg.lora, &mut cfg.multitask, &mut cfg.recon, &mut cfg.sft] {
            t.max_lr *= s;
        }
    }
    cfg.validate().context("config")?;
    Ok(cfg)
}

/// Recursively overlays `top` onto `base`; sections merge, values replace.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn seed_value(seed: u64) -> Result<Value> {
    i64::try_from(seed)
        .map(Value::Integer)
        .map_err(|_| anyhow::anyhow!("seed {seed} exceeds {}", i64::MAX))
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override {spec:?} has an empty key segment");
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {spec:?}: {p} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Effective config for execution: every stage seed offset by the run seed.
pub fn seeded(cfg: &DeskConfig) -> DeskConfig {
    cfg.with_seed(cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[String], seed: Option<u64>, env: Option<&str>) -> Result<DeskConfig> {
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text)?;
        load_config(&ConfigSources {
            file: Some(&p),
            overrides,
            seed,
            env_seed: env.map(String::from),
            lr_scale: None,
        })
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(load("", &[], None, None).unwrap(), DeskConfig::default());
    }

    #[test]
    fn partial_sections_keep_the_other_defaults() {
        let c = load("[tasks]\nn_train = 10\n", &[], None, None).unwrap();
        assert_eq!(c.tasks.n_train, 10);
        assert_eq!(c.tasks.n_symbols, DeskConfig::default().tasks.n_symbols);
    }

    #[test]
    fn flags_override_file() {
        let c = load("rank = 2\n[lora]\nmax_steps = 10\n", &["lora.max_steps=20".into()], None, None).unwrap();
        assert_eq!(c.rank, 2);
        assert_eq!(c.lora.max_steps, 20);
    }

    #[test]
    fn misspelled_key_is_rejected_with_valid_keys() {
        let e = format!("{:#}", load("rnak = 2\n", &[], None, None).unwrap_err());
        assert!(e.contains("rnak") && e.contains("rank"), "{e}");
        let e = format!("{:#}", load("", &["lora.max_step=3".into()], None, None).unwrap_err());
        assert!(e.contains("max_step") && e.contains("max_steps"), "{e}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let e = format!("{:#}", load("rank = \"four\"\n", &[], None, None).unwrap_err());
        assert!(e.contains("rank") || e.contains("integer"), "{e}");
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(load("", &[], None, Some("7")).unwrap().seed, 7);
        assert_eq!(load("seed = 3\n", &[], None, Some("7")).unwrap().seed, 3);
        assert_eq!(load("seed = 3\n", &[], Some(5), Some("7")).unwrap().seed, 5);
        assert!(load("", &[], None, Some("x")).is_err());
    }

    #[test]
    fn string_overrides_fall_back_to_bare_text() {
        let c = load("", &["held_out=[\"seq:sort:successor\"]".into()], None, None).unwrap();
        assert_eq!(c.held_out, vec!["seq:sort:successor".to_string()]);
        let mut t = Table::new();
        apply_override(&mut t, "a.b=hello world").unwrap();
        assert_eq!(t["a"]["b"].as_str(), Some("hello world"));
        assert!(apply_override(&mut t, "novalue").is_err());
    }
}
