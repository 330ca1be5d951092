//! Effective configuration from preset, config file, overrides and seed.

use std::fs;
use std::path::Path;

use serde_json::Value;

use elsa_core::config::RunConfig;
use elsa_core::{ElsaError, Result};

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then the config file (a possibly partial JSON object layered on
/// top), then each `key=value` override in order, then the seed. The result
/// is not validated; commands do that.
pub fn resolve(preset: &str, config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(preset)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| ElsaError::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)?;
        if !patch.is_object() {
            return Err(ElsaError::invalid(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        }
        let mut tree = serde_json::to_value(&cfg)?;
        merge(&mut tree, patch);
        cfg = serde_json::from_value(tree).map_err(|e| ElsaError::invalid(format!("{}: {e}", path.display())))?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = seed {
        cfg.set_all_seeds(s);
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn layers_apply_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"tau": 0.7, "finetune": {{"epochs": 9}}}}"#).unwrap();
        let cfg = resolve("smoke", Some(f.path()), &["finetune.epochs=4".into()], Some(11)).unwrap();
        assert_eq!(cfg.tau, 0.7);
        assert_eq!(cfg.finetune.epochs, 4);
        // Untouched preset values survive the partial file.
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!((cfg.seed, cfg.data.seed, cfg.scenario.seed), (11, 11, 11));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve("default", None, &["finetune.nope=1".into()], None).is_err());
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"bogus": 1}}"#).unwrap();
        assert!(resolve("default", Some(f.path()), &[], None).is_err());
    }
}
