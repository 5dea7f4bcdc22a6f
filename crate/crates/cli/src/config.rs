//! Flat `key = value` training configuration.
//!
//! ```text
//! # paths are relative to this file
//! data_dir = prepared
//! out_dir = runs/attention-transformer
//! encoder = attention        # mean | max | attention
//! decoder = transformer      # pointwise | lstm | gru | transformer
//! d = 128
//! heads = 2
//! batch_size = 400
//! learning_rate = 0.001
//! dropout = 0.1
//! epsilon = 0.001            # optional, defaults to 1/|I|
//! activation = tanh          # tanh | identity, point-wise head only
//! sequence_smoothing = false
//! seed = 0
//! max_epochs = 100
//! patience = 5
//! valid_limit = 2000         # optional
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use leakaudit::datamodel::AttackConfig;
use leakaudit::model::parse_key_values;
use leakaudit::training::TrainOptions;
use leakaudit::{Activation, DecoderKind, EncoderKind, Error, Result};

const KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "encoder",
    "decoder",
    "m",
    "n",
    "d",
    "heads",
    "batch_size",
    "learning_rate",
    "dropout",
    "epsilon",
    "activation",
    "sequence_smoothing",
    "seed",
    "max_epochs",
    "patience",
    "valid_limit",
];

#[derive(Clone, Debug)]
pub struct TrainFile {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub attack: AttackConfig,
    pub activation: Activation,
    pub sequence_smoothing: bool,
    pub options: TrainOptions,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `text`, resolving relative paths against `base`. Every problem
    /// is reported at once.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut problems: Vec<String> = kv.keys().filter(|k| !KEYS.contains(&k.as_str())).map(|k| format!("unknown key `{k}`")).collect();

        fn field<T: FromStr>(kv: &std::collections::BTreeMap<String, String>, key: &str, default: Option<T>, problems: &mut Vec<String>) -> Option<T> {
            match kv.get(key) {
                Some(v) => match v.parse::<T>() {
                    Ok(x) => Some(x),
                    Err(_) => {
                        problems.push(format!("`{key}` has invalid value `{v}`"));
                        None
                    }
                },
                None if default.is_some() => default,
                None => {
                    problems.push(format!("missing key `{key}`"));
                    None
                }
            }
        }

        let defaults = AttackConfig::default();
        let opts = TrainOptions::default();
        let data_dir: Option<String> = field(&kv, "data_dir", None, &mut problems);
        let out_dir: Option<String> = field(&kv, "out_dir", None, &mut problems);
        let encoder: Option<EncoderKind> = field(&kv, "encoder", None, &mut problems);
        let decoder: Option<DecoderKind> = field(&kv, "decoder", None, &mut problems);
        let m = field(&kv, "m", Some(defaults.m), &mut problems);
        let n = field(&kv, "n", Some(defaults.n), &mut problems);
        let d = field(&kv, "d", Some(defaults.d), &mut problems);
        let heads = field(&kv, "heads", Some(defaults.heads), &mut problems);
        let batch_size = field(&kv, "batch_size", Some(defaults.batch_size), &mut problems);
        let learning_rate = field(&kv, "learning_rate", Some(defaults.learning_rate), &mut problems);
        let dropout = field(&kv, "dropout", Some(defaults.dropout), &mut problems);
        let epsilon = if kv.contains_key("epsilon") { field::<f64>(&kv, "epsilon", None, &mut problems).map(Some) } else { Some(None) };
        let activation = field(&kv, "activation", Some(Activation::Tanh), &mut problems);
        let sequence_smoothing = field(&kv, "sequence_smoothing", Some(false), &mut problems);
        let seed = field(&kv, "seed", Some(defaults.seed), &mut problems);
        let max_epochs = field(&kv, "max_epochs", Some(opts.max_epochs), &mut problems);
        let patience = field(&kv, "patience", Some(opts.patience), &mut problems);
        let valid_limit = if kv.contains_key("valid_limit") { field::<usize>(&kv, "valid_limit", None, &mut problems).map(Some) } else { Some(None) };

        let attack = match (m, n, d, heads, batch_size, learning_rate, dropout, epsilon, seed) {
            (Some(m), Some(n), Some(d), Some(heads), Some(batch_size), Some(learning_rate), Some(dropout), Some(epsilon), Some(seed)) => {
                let a = AttackConfig { m, n, d, batch_size, learning_rate, dropout, heads, epsilon, seed };
                if let Err(Error::Config(msg)) = a.validate() {
                    problems.push(msg);
                }
                Some(a)
            }
            _ => None,
        };
        if max_epochs == Some(0) {
            problems.push("max_epochs must be >= 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        Ok(Self {
            data_dir: resolve(data_dir.expect("checked")),
            out_dir: resolve(out_dir.expect("checked")),
            encoder: encoder.expect("checked"),
            decoder: decoder.expect("checked"),
            attack: attack.expect("checked"),
            activation: activation.expect("checked"),
            sequence_smoothing: sequence_smoothing.expect("checked"),
            options: TrainOptions {
                max_epochs: max_epochs.expect("checked"),
                patience: patience.expect("checked"),
                valid_limit: valid_limit.expect("checked"),
                ..TrainOptions::default()
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = TrainFile::parse("data_dir = data\nout_dir = /tmp/x\nencoder = mean\ndecoder = gru\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("/base/data"));
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.attack, AttackConfig::default());
        assert_eq!(cfg.options.patience, 5);
    }

    #[test]
    fn all_problems_are_listed() {
        let err = TrainFile::parse("encoder = conv\nd = x\ncolour = red\n", Path::new(".")).unwrap_err().to_string();
        for needle in ["colour", "`d`", "encoder", "data_dir", "decoder"] {
            assert!(err.contains(needle), "{err}");
        }
    }
}
