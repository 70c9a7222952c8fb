//! Run configuration: TOML with variant presets and dotted overrides.

use serde::{Deserialize, Serialize};

use crate::envsim::EnvConfig;
use crate::model::{EncoderKind, Mode, ModelConfig};
use crate::ppo::PpoConfig;
use crate::repr::{Strategy, TripletConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tar,
    TarMlp,
    TarTcn,
    NoPriv,
    NoPrivVel,
    Teacher,
    /// Teacher-anchored triplets with negatives drawn from the whole buffer.
    RandomNegative,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Tar,
        Variant::TarMlp,
        Variant::TarTcn,
        Variant::NoPriv,
        Variant::NoPrivVel,
        Variant::Teacher,
        Variant::RandomNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tar => "tar",
            Variant::TarMlp => "tar_mlp",
            Variant::TarTcn => "tar_tcn",
            Variant::NoPriv => "no_priv",
            Variant::NoPrivVel => "no_priv_vel",
            Variant::Teacher => "teacher",
            Variant::RandomNegative => "random_negative",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    /// Set the architecture and sampling fields that define this variant.
    pub fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        m.encoder = EncoderKind::Recurrent;
        m.teacher = true;
        m.velocity_estimator = true;
        m.critic_velocity = true;
        m.privileged_actor = false;
        cfg.triplet.strategy = Strategy::TeacherAnchored;
        match self {
            Variant::Tar => {}
            Variant::TarMlp => m.encoder = EncoderKind::Mlp,
            Variant::TarTcn => m.encoder = EncoderKind::Tcn,
            Variant::NoPriv => {
                m.teacher = false;
                cfg.triplet.strategy = Strategy::PrivilegeFree;
            }
            Variant::NoPrivVel => {
                m.teacher = false;
                m.velocity_estimator = false;
                m.critic_velocity = false;
                cfg.triplet.strategy = Strategy::PrivilegeFree;
            }
            Variant::Teacher => {
                m.teacher = false;
                m.velocity_estimator = false;
                m.privileged_actor = true;
            }
            Variant::RandomNegative => cfg.triplet.strategy = Strategy::RandomNegative,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub mode: Mode,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub num_agents: usize,
    /// Output directory; the CLI fills it in when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    pub triplet: TripletConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Tar)
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut t = root;
    for p in &parts[..parts.len() - 1] {
        t = match t.get_mut(*p) {
            Some(toml::Value::Table(sub)) => sub,
            Some(_) => return Err(Error::Config(format!("override key '{key}': '{p}' is not a table"))),
            None => return Err(Error::Config(format!("unknown config key '{key}'"))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Split `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override '{s}' is not of the form key=value")))
}

impl RunConfig {
    pub fn for_variant(v: Variant) -> Self {
        let mut c = Self {
            variant: v,
            seed: 0,
            mode: Mode::Privileged,
            iterations: 20_000,
            checkpoint_every: 2_500,
            num_agents: 64,
            out_dir: None,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            ppo: PpoConfig::default(),
            triplet: TripletConfig::default(),
        };
        v.apply(&mut c);
        c
    }

    /// Parse a config document. The variant preset is applied first, then
    /// the document's keys, then the `key=value` overrides in order.
    pub fn parse(doc: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = doc.parse().map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        let mut pairs = Vec::new();
        for o in overrides {
            let (k, v) = split_override(o)?;
            pairs.push((k.to_string(), parse_value(v)));
        }
        let variant_name = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "variant")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("variant").cloned());
        let variant = match variant_name {
            Some(toml::Value::String(s)) => Variant::from_name(&s)?,
            Some(other) => return Err(Error::Config(format!("variant must be a string, got {other}"))),
            None => Variant::Tar,
        };
        let base = Self::for_variant(variant);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
        for (k, v) in pairs {
            set_dotted(&mut table, &k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.triplet.validate()?;
        self.model.validate()?;
        if self.iterations == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("iterations and checkpoint_every must be positive".into()));
        }
        if self.num_agents < 2 {
            return Err(Error::Config(format!("num_agents must be at least 2, got {}", self.num_agents)));
        }
        if self.ppo.minibatches > self.num_agents {
            return Err(Error::Config(format!(
                "{} mini-batches cannot be cut from {} agents",
                self.ppo.minibatches, self.num_agents
            )));
        }
        if !(self.env.dt > 0.0) || self.env.episode_steps() == 0 {
            return Err(Error::Config("env.dt and env.episode_seconds must be positive".into()));
        }
        let needs_teacher = !self.model.privileged_actor && self.triplet.strategy.needs_teacher();
        if needs_teacher && !self.model.teacher && self.mode == Mode::Privileged {
            return Err(Error::Config(format!(
                "triplet strategy {:?} needs model.teacher = true",
                self.triplet.strategy
            )));
        }
        if self.mode == Mode::PrivilegeFree {
            if self.model.privileged_actor {
                return Err(Error::Config("the privileged baseline cannot run in privilege_free mode".into()));
            }
            if self.triplet.strategy != Strategy::PrivilegeFree {
                return Err(Error::Config("privilege_free mode requires triplet.strategy = privilege_free".into()));
            }
            if self.model.teacher {
                return Err(Error::Config("privilege_free mode runs without the teacher encoder".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_tables() {
        let c = RunConfig::default();
        assert_eq!(c.iterations, 20_000);
        assert_eq!(c.checkpoint_every, 2_500);
        assert_eq!(c.ppo.gamma, 0.99);
        assert_eq!(c.ppo.lam, 0.95);
        assert_eq!(c.ppo.epochs * c.ppo.minibatches, 20);
        assert_eq!(c.triplet.coef, 1.0);
        assert_eq!(c.ppo.kl_coef, 0.01);
        assert_eq!((c.ppo.lr_min, c.ppo.lr_max), (5e-5, 1e-3));
        assert_eq!(c.model.latent, 45);
        assert_eq!(c.model.actor_hidden, vec![512, 256, 128]);
        assert_eq!(c.model.dynamics_hidden, vec![64]);
        assert_eq!(c.model.recurrent_hidden, 256);
    }

    #[test]
    fn round_trip_and_overrides() {
        let c = RunConfig::default();
        let doc = c.to_toml();
        assert_eq!(RunConfig::parse(&doc, &[]).unwrap(), c);
        let o =
            RunConfig::parse(&doc, &["ppo.gamma=0.9".into(), "seed=7".into(), "model.cell=\"gru\"".into()]).unwrap();
        assert_eq!(o.ppo.gamma, 0.9);
        assert_eq!(o.seed, 7);
        assert_eq!(o.model.cell, crate::nets::CellKind::Gru);
        // bare strings are accepted for convenience
        let o = RunConfig::parse("", &["model.cell=gru".into()]).unwrap();
        assert_eq!(o.model.cell, crate::nets::CellKind::Gru);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("bogus = 1", &[]).is_err());
        assert!(RunConfig::parse("[ppo]\nbogus = 1", &[]).is_err());
        assert!(RunConfig::parse("", &["ppo.nope=1".into()]).is_err());
        assert!(RunConfig::parse("", &["nokey".into()]).is_err());
        assert!(RunConfig::parse("", &["variant=\"xyz\"".into()]).is_err());
    }

    #[test]
    fn variant_presets() {
        let t = RunConfig::parse("variant = \"tar_tcn\"", &[]).unwrap();
        assert_eq!(t.model.encoder, EncoderKind::Tcn);
        assert_eq!(t.model.tcn.kernels, vec![8, 5, 5]);
        let v = RunConfig::parse("", &["variant=no_priv_vel".into()]).unwrap();
        assert!(!v.model.velocity_estimator && !v.model.critic_velocity && !v.model.teacher);
        assert_eq!(v.triplet.strategy, Strategy::PrivilegeFree);
        let r = RunConfig::for_variant(Variant::RandomNegative);
        assert_eq!(r.triplet.strategy, Strategy::RandomNegative);
    }

    #[test]
    fn inconsistent_modes_rejected() {
        assert!(RunConfig::parse("variant = \"teacher\"\nmode = \"privilege_free\"", &[]).is_err());
        assert!(RunConfig::parse("mode = \"privilege_free\"", &[]).is_err());
        let ok = RunConfig::parse("variant = \"no_priv\"\nmode = \"privilege_free\"", &[]);
        assert!(ok.is_ok(), "{ok:?}");
    }
}
