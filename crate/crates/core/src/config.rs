//! Pipeline configuration: one TOML file with a section per stage. The file
//! shipped in `configs/default.toml` is compiled in and is the source of the
//! defaults.

use serde::{Deserialize, Serialize};

use crate::anim::SamplerConfig;
use crate::error::{Error, Result};
use crate::expansion::ExpansionConfig;
use crate::gaussian::{CanonicalConfig, TrainConfig4D};
use crate::geometry::CameraIntrinsics;
use crate::plugins::synthetic::SyntheticSettings;
use crate::world::SyntheticWorld;

pub const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
            .map_err(|e| Error::Config(format!("camera: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSection {
    /// Number of view-extrapolation iterations.
    pub steps: usize,
    /// Largest yaw of the outward sweep, radians.
    pub max_yaw: f64,
    pub prompt: String,
    pub splat_radius_px: f64,
    pub seed: u64,
}

impl ExpansionSection {
    pub fn stage(&self) -> ExpansionConfig {
        ExpansionConfig {
            prompt: self.prompt.clone(),
            splat_radius_px: self.splat_radius_px,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimationSection {
    /// Videos `K` planned from the expansion steps.
    pub videos: usize,
    /// Frames `T` per video.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySection {
    pub beta: f64,
    pub soft_width_px: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginBackend {
    /// In-process stand-ins driven by the synthetic world.
    Synthetic,
    /// A plugin server on a Unix socket.
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSection {
    pub backend: PluginBackend,
    /// Socket path for the remote backend; `FORGE_PLUGIN_SOCKET` overrides it.
    #[serde(default)]
    pub socket: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub camera: CameraConfig,
    pub expansion: ExpansionSection,
    pub animation: AnimationSection,
    pub sampler: SamplerConfig,
    pub visibility: VisibilitySection,
    pub canonical: CanonicalConfig,
    pub train: TrainConfig4D,
    pub plugins: PluginSection,
    pub synthetic: SyntheticSettings,
    #[serde(default)]
    pub world: SyntheticWorld,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TOML).expect("shipped config parses")
    }
}

impl ForgeConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ForgeConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` over the shipped defaults, then applies `key=value`
    /// overrides with dotted keys such as `train.iterations=500`.
    pub fn layered(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let parse = |s: &str| -> Result<toml::Table> {
            s.parse::<toml::Table>()
                .map_err(|e| Error::Config(e.to_string()))
        };
        let mut table = parse(DEFAULT_TOML)?;
        if let Some(text) = text {
            merge(&mut table, parse(text)?);
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: ForgeConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.intrinsics()?;
        if self.animation.videos == 0 {
            return Err(Error::Config("animation.videos must be at least 1".into()));
        }
        if self.animation.frames < 2 {
            return Err(Error::Config("animation.frames must be at least 2".into()));
        }
        if !(self.expansion.splat_radius_px > 0.0) {
            return Err(Error::Config(
                "expansion.splat_radius_px must be positive".into(),
            ));
        }
        if self.expansion.steps == 0 {
            return Err(Error::Config("expansion.steps must be at least 1".into()));
        }
        if !(self.visibility.beta >= 0.0 && self.visibility.soft_width_px >= 0.0) {
            return Err(Error::Config(
                "visibility.beta and soft_width_px must be non-negative".into(),
            ));
        }
        if self
            .train
            .levels
            .iter()
            .any(|l| l.spatial < 2 || l.temporal < 2)
        {
            return Err(Error::Config(
                "every HexPlane level needs at least 2 nodes per axis".into(),
            ));
        }
        if self.canonical.sh_degree > 3 || self.train.sh_degree > 3 {
            return Err(Error::Config("SH degree is at most 3".into()));
        }
        if self.train.embedding_bound <= 0.0 {
            return Err(Error::Config(
                "train.embedding_bound must be positive".into(),
            ));
        }
        self.sampler
            .validate(self.synthetic.diffusion_steps, self.animation.frames)
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

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_parse_and_round_trip() {
        let cfg = ForgeConfig::default();
        let again = ForgeConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_and_layering() {
        let cfg = ForgeConfig::layered(
            Some("[animation]\nvideos = 3\n"),
            &[
                "train.iterations=500".into(),
                "expansion.prompt=a lake".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.animation.videos, 3);
        assert_eq!(cfg.animation.frames, 25);
        assert_eq!(cfg.train.iterations, 500);
        assert_eq!(cfg.expansion.prompt, "a lake");
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for bad in [
            vec!["sampler.tau_refine=20".to_string()],
            vec!["animation.frames=1".into()],
            vec!["camera.focal=-1".into()],
            vec!["nosuch.key=1".into()],
            vec!["train.iterations".into()],
        ] {
            match ForgeConfig::layered(None, &bad) {
                Err(Error::Config(_)) => {}
                other => panic!("{bad:?}: {other:?}"),
            }
        }
    }
}
