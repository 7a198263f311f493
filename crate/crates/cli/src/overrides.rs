//! One `--<field>` flag per `ModelConfig` field, generated from its key list.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use cmfn_core::ModelConfig;

/// `(key, value)` pairs given on the command line, in key order.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides(pub Vec<(&'static str, String)>);

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl ConfigOverrides {
    /// Applies the flags on top of `cfg`; the caller validates afterwards.
    pub fn apply(&self, cfg: &mut ModelConfig) -> cmfn_core::Result<()> {
        for (k, v) in &self.0 {
            cfg.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.0.iter().position(|(k, _)| *k == key)?;
        Some(self.0.remove(i).1)
    }
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let pairs = ModelConfig::KEYS
            .iter()
            .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
            .collect();
        Ok(Self(pairs))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        ModelConfig::KEYS.iter().fold(cmd, |cmd, &k| {
            let default = ModelConfig::default().get(k).expect("every key has a value");
            let help = if k == "iterations" {
                format!("N, or A..B to train one model per count [default: {default}]")
            } else {
                format!("[default: {default}]")
            };
            cmd.arg(
                Arg::new(k)
                    .long(flag(k))
                    .value_name("VALUE")
                    .overrides_with(k)
                    .allow_negative_numbers(true)
                    .help_heading("Model configuration")
                    .help(help),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
