//! Configuration resolution: flags > config file > preset > defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use factsteer::backend::toy::{ToyBackend, ToyConfig};
use factsteer::steer::Variant;

/// Bundled hyperparameter presets, parsed once at startup.
const PRESETS_TOML: &str = include_str!("../presets.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Preset {
    pub layer: usize,
    pub gamma: f64,
    pub tau_h: f64,
    pub tau_m: f64,
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    presets: HashMap<String, Preset>,
}

pub fn lookup_preset(name: &str) -> Result<Preset> {
    let file: PresetFile = toml::from_str(PRESETS_TOML).context("bundled presets.toml")?;
    file.presets
        .get(&name.to_ascii_lowercase())
        .cloned()
        .with_context(|| {
            let mut names: Vec<&String> = file.presets.keys().collect();
            names.sort();
            format!("unknown preset {name}; available: {names:?}")
        })
}

/// Optional config file mirroring the common flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    pub backend: Option<String>,
    pub method: Option<String>,
    pub variant: Option<String>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub layer: Option<usize>,
    pub seed: Option<u64>,
    pub max_new_tokens: Option<usize>,
    pub parallel: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub current_date: Option<String>,
    pub preset: Option<String>,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
        None => Ok(ConfigFile::default()),
    }
}

/// Merge precedence for one optional field.
pub fn resolve<T: Clone>(flag: Option<T>, config: Option<T>, preset: Option<T>, default: T) -> T {
    flag.or(config).or(preset).unwrap_or(default)
}

/// Steering hyperparameters after precedence resolution.
pub struct SteerSettings {
    pub variant: Variant,
    pub tau: f64,
    pub gamma: f64,
    pub layer: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_steer_settings(
    flag_variant: Option<String>,
    flag_tau: Option<f64>,
    flag_gamma: Option<f64>,
    flag_layer: Option<usize>,
    config: &ConfigFile,
    preset_name: Option<&str>,
) -> Result<SteerSettings> {
    let preset = match preset_name.or(config.preset.as_deref()) {
        Some(name) => Some(lookup_preset(name)?),
        None => None,
    };
    let variant_str = resolve(
        flag_variant,
        config.variant.clone(),
        None,
        "M".to_string(),
    );
    let variant = Variant::from_str(&variant_str).map_err(anyhow::Error::from)?;
    let preset_tau = preset.as_ref().map(|p| match variant {
        Variant::Hard => p.tau_h,
        _ => p.tau_m,
    });
    let tau = resolve(flag_tau, config.tau, preset_tau, 0.5);
    let gamma = resolve(
        flag_gamma,
        config.gamma,
        preset.as_ref().map(|p| p.gamma),
        3.0,
    );
    let layer = flag_layer
        .or(config.layer)
        .or(preset.as_ref().map(|p| p.layer));
    Ok(SteerSettings {
        variant,
        tau,
        gamma,
        layer,
    })
}

/// Parse a backend spec: `toy`, `toy:SEED`, or `toy:@config.json`.
pub fn parse_backend(spec: &str) -> Result<ToyBackend> {
    let mut parts = spec.splitn(2, ':');
    let kind = parts.next().unwrap_or_default();
    let rest = parts.next();
    match kind {
        "toy" => {
            let config = match rest {
                None => ToyConfig::default(),
                Some(arg) if arg.starts_with('@') => {
                    let path = &arg[1..];
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading toy config {path}"))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing toy config {path}"))?
                }
                Some(seed) => {
                    let seed: u64 = seed
                        .parse()
                        .with_context(|| format!("backend seed in {spec:?}"))?;
                    ToyConfig::with_seed(seed)
                }
            };
            Ok(ToyBackend::new(config)?)
        }
        other => bail!(
            "unknown backend adapter {other:?}; this build ships the in-process `toy` backend \
             (real models implement the same adapter contract)"
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_lookup() {
        let p = lookup_preset("llama3.1-8b-rag").unwrap();
        assert_eq!(p.layer, 25);
        assert_eq!(p.gamma, 3.0);
        assert_eq!(p.tau_h, 0.4);
        assert_eq!(p.tau_m, 0.5);
        assert!(lookup_preset("nope").is_err());
    }

    #[test]
    fn precedence_flag_beats_config_beats_preset() {
        assert_eq!(resolve(Some(1), Some(2), Some(3), 4), 1);
        assert_eq!(resolve(None, Some(2), Some(3), 4), 2);
        assert_eq!(resolve(None::<i32>, None, Some(3), 4), 3);
        assert_eq!(resolve(None::<i32>, None, None, 4), 4);
    }

    #[test]
    fn steer_settings_pick_variant_specific_tau() {
        let cfg = ConfigFile::default();
        let s = resolve_steer_settings(
            Some("H".into()),
            None,
            None,
            None,
            &cfg,
            Some("qwen2.5-7b-pag"),
        )
        .unwrap();
        assert_eq!(s.variant, Variant::Hard);
        assert_eq!(s.tau, 0.5);
        let s = resolve_steer_settings(
            Some("M".into()),
            None,
            None,
            None,
            &cfg,
            Some("qwen2.5-7b-pag"),
        )
        .unwrap();
        assert_eq!(s.tau, 0.69);
        assert_eq!(s.gamma, 0.1);
        assert_eq!(s.layer, Some(24));
    }

    #[test]
    fn backend_specs_parse() {
        assert!(parse_backend("toy").is_ok());
        let b = parse_backend("toy:11").unwrap();
        assert_eq!(b.config().seed, 11);
        assert!(parse_backend("gpt-4").is_err());
    }
}
