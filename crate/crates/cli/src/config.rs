//! TOML configuration files and flag parsing.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use polguide::backbone::CorruptedOracle;
use polguide::camera::CameraModel;
use polguide::guidance::GuidanceConfig;
use polguide::synth::{CorruptionSpec, SceneSpec};

use crate::error::{CliError, CliResult};

/// Parses `text`, reporting the dotted path of the offending key.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &Path) -> CliResult<T> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{}: at `{path}`: {}", origin.display(), e.inner()))
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, path)
}

pub fn validation(prefix: &str, e: polguide::Error) -> CliError {
    match e.prefixed(prefix) {
        polguide::Error::InvalidParameter { name, reason } => {
            CliError::Config(format!("invalid value at `{name}`: {reason}"))
        }
        other => other.into(),
    }
}

/// Input of `polguide synth`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.scene.validate().map_err(|e| validation("scene.", e))?;
        if !(self.noise.sigma >= 0.0) {
            return Err(CliError::Config(
                "invalid value at `noise.sigma`: must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Optional `--config` of `polguide refine`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub backbone: Option<String>,
}

/// File referenced by `--backbone oracle:<path>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Ground-truth normal map, relative to the config file.
    pub gt: PathBuf,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_gain() -> f64 {
    CorruptedOracle::DEFAULT_GAIN
}

/// Oracle settings inside a sweep config (the ground truth comes from the scene).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOracle {
    #[serde(default)]
    pub corruption: CorruptionSpec,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Input of `polguide sweep`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scene: SceneSpec,
    pub oracle: SweepOracle,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub noise_seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.scene.validate().map_err(|e| validation("scene.", e))?;
        self.guidance
            .validate()
            .map_err(|e| validation("guidance.", e))
    }
}

/// `--backbone` choices.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneArg {
    Smoother { radius: usize },
    Oracle(PathBuf),
    Bridge(String),
}

impl std::str::FromStr for BackboneArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "smoother" {
            return Ok(BackboneArg::Smoother { radius: 2 });
        }
        if let Some(r) = s.strip_prefix("smoother:") {
            let radius = r
                .parse()
                .map_err(|_| format!("bad smoother radius {r:?}"))?;
            return Ok(BackboneArg::Smoother { radius });
        }
        if let Some(p) = s.strip_prefix("oracle:") {
            return Ok(BackboneArg::Oracle(PathBuf::from(p)));
        }
        if let Some(c) = s.strip_prefix("bridge:") {
            return Ok(BackboneArg::Bridge(c.to_string()));
        }
        Err(format!(
            "expected smoother, oracle:<path> or bridge:<command>, got {s:?}"
        ))
    }
}

impl std::fmt::Display for BackboneArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneArg::Smoother { radius } => write!(f, "smoother:{radius}"),
            BackboneArg::Oracle(p) => write!(f, "oracle:{}", p.display()),
            BackboneArg::Bridge(c) => write!(f, "bridge:{c}"),
        }
    }
}

/// `--camera` choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraArg {
    Ortho,
    Fov(f64),
}

impl std::str::FromStr for CameraArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "ortho" {
            return Ok(CameraArg::Ortho);
        }
        if let Some(d) = s.strip_prefix("fov:") {
            let deg = d.parse().map_err(|_| format!("bad field of view {d:?}"))?;
            return Ok(CameraArg::Fov(deg));
        }
        Err(format!("expected ortho or fov:<degrees>, got {s:?}"))
    }
}

impl CameraArg {
    pub fn model(self, height: usize, width: usize) -> CameraModel {
        match self {
            CameraArg::Ortho => CameraModel::Orthographic,
            CameraArg::Fov(fov_deg) => CameraModel::Perspective {
                fov_deg,
                width,
                height,
                principal_point: None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let text =
            "[scene]\nheight = 8\nwidth = 8\n[scene.geometry]\nkind = \"sphere\"\nradius = 3.0\n\
                    [scene.shading]\nlight = [0.0, 0.0, 1.0]\nalbedo = [0.5]\nshine = 2.0\n";
        let err = parse::<SynthConfig>(text, Path::new("s.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("scene.shading"), "{err}");
    }

    #[test]
    fn out_of_range_fov_names_the_key() {
        let text = "[scene]\nheight = 8\nwidth = 8\n[scene.geometry]\nkind = \"sphere\"\nradius = 3.0\n\
                    [scene.shading]\nlight = [0.0, 0.0, 1.0]\nalbedo = [0.5]\n\
                    [scene.camera]\nkind = \"perspective\"\nfov_deg = 200.0\nwidth = 8\nheight = 8\n";
        let cfg = parse::<SynthConfig>(text, Path::new("s.toml")).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("scene.camera.fov_deg"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn flag_parsers() {
        assert_eq!("fov:60".parse::<CameraArg>().unwrap(), CameraArg::Fov(60.0));
        assert_eq!("ortho".parse::<CameraArg>().unwrap(), CameraArg::Ortho);
        assert!("persp".parse::<CameraArg>().is_err());
        assert_eq!(
            "smoother".parse::<BackboneArg>().unwrap(),
            BackboneArg::Smoother { radius: 2 }
        );
        assert_eq!(
            "bridge:python3 serve.py".parse::<BackboneArg>().unwrap(),
            BackboneArg::Bridge("python3 serve.py".into())
        );
        assert!("resnet".parse::<BackboneArg>().is_err());
    }
}
