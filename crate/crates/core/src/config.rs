//! Scenario configuration: TOML schema, presets, and canonical hashing.
//!
//! The file format is a flat tree of sections mirroring the runtime
//! parameter structs. Parsing rejects unknown keys and reports errors with
//! the dotted field path (e.g. `lipm.h`); semantic validation reuses the
//! constructors of the underlying types and prefixes their message with the
//! section name. A config serializes back to TOML with every effective
//! value written out, and `parse(dump(c)) == c` holds exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capturability::RadiusConvention;
use crate::env::{
    DesiredMotion, DisturbanceSpec, DisturbanceTiming, EnvParams, ResidualKind, ResidualSpec,
    RewardWeights,
};
use crate::error::{Error, Result};
use crate::gp::{GpHyper, SubsamplePolicy};
use crate::lipm::{LipmParams, StepTiming};
use crate::ppo::{TrainConfig, TrainSetup};
use crate::safety::SafetyFilterParams;
use crate::tvr::TvrGains;

pub const PRESETS: [&str; 3] = ["draco_walking", "atlas_walking", "atlas_turning"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Preset name this config was derived from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub lipm: LipmSection,
    pub timing: TimingSection,
    pub tvr: TvrSection,
    #[serde(default)]
    pub safe_set: SafeSetSection,
    pub safety_filter: FilterSection,
    #[serde(default)]
    pub gp: GpSection,
    pub reward: RewardSection,
    #[serde(default)]
    pub desired: DesiredSection,
    #[serde(default)]
    pub residual: ResidualSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSection>,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipmSection {
    #[serde(default = "default_g")]
    pub g: f64,
    pub h: f64,
    pub l_max: f64,
}

fn default_g() -> f64 {
    9.81
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub t_lift: f64,
    pub t_land: f64,
    #[serde(default)]
    pub t_ds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvrSection {
    pub t_x: f64,
    pub t_y: f64,
    pub kappa_x: f64,
    pub kappa_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafeSetSection {
    /// Capture polytope horizon enforced by the filter (1 or 2 steps).
    pub capture_steps: usize,
    pub convention: RadiusConvention,
}

impl Default for SafeSetSection {
    fn default() -> Self {
        Self { capture_steps: 1, convention: RadiusConvention::OmegaScaled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub slack_penalty: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub lengthscales: [f64; 6],
    pub signal_var: f64,
    pub noise_var: f64,
    pub k_delta: f64,
    pub capacity: usize,
    pub subsample: SubsamplePolicy,
}

impl Default for GpSection {
    fn default() -> Self {
        let h = GpHyper::default();
        Self {
            lengthscales: h.lengthscales,
            signal_var: h.signal_var,
            noise_var: h.noise_var,
            k_delta: h.k_delta,
            capacity: 512,
            subsample: SubsamplePolicy::Fifo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub alive: f64,
    pub balance: f64,
    pub tracking: f64,
    pub steering: f64,
    pub contact: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesiredSection {
    pub vx: f64,
    pub vy: f64,
    pub turn_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSection {
    pub kind: ResidualKind,
    pub magnitude: [f64; 4],
    pub rng_seed: u64,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self { kind: ResidualKind::Zero, magnitude: [0.0; 4], rng_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub force: f64,
    pub duration: f64,
    pub mass: f64,
    pub timing: DisturbanceTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub horizon: usize,
    pub fall_margin: f64,
    pub reset_noise: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { horizon: 50, fall_margin: 0.1, reset_noise: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub episodes: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub instances: usize,
    pub use_tvr: bool,
    pub use_policy: bool,
    pub use_safety_filter: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            gamma: c.gamma,
            gae_lambda: c.gae_lambda,
            clip_eps: c.clip_eps,
            epochs: c.epochs,
            minibatch: c.minibatch,
            lr_policy: c.lr_policy,
            lr_value: c.lr_value,
            entropy_coef: c.entropy_coef,
            value_coef: c.value_coef,
            episodes: c.episodes,
            batch_size: c.batch_size,
            hidden: c.hidden,
            instances: c.instances,
            use_tvr: c.use_tvr,
            use_policy: c.use_policy,
            use_safety_filter: c.use_safety_filter,
            checkpoint_every: c.checkpoint_every,
        }
    }
}

fn section(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("{name}: {e}"))
}

impl ScenarioConfig {
    /// Parses and validates. Schema errors carry the dotted field path.
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(raw)
            .map_err(|e| Error::Config(e.message().to_string()))?;
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().message();
            if path.is_empty() {
                Error::Config(msg.to_string())
            } else {
                Error::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical dump with every effective value written out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Hex SHA-256 of the canonical dump; recorded in run manifests.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let raw = match name {
            "draco_walking" => include_str!("../presets/draco_walking.toml"),
            "atlas_walking" => include_str!("../presets/atlas_walking.toml"),
            "atlas_turning" => include_str!("../presets/atlas_turning.toml"),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::from_toml_str(raw)
    }

    pub fn validate(&self) -> Result<()> {
        self.build_setup().map(drop)
    }

    pub fn build_lipm(&self) -> Result<LipmParams> {
        LipmParams::new(self.lipm.g, self.lipm.h, self.lipm.l_max).map_err(section("lipm"))
    }

    pub fn build_timing(&self) -> Result<StepTiming> {
        StepTiming::new(self.timing.t_lift, self.timing.t_land, self.timing.t_ds)
            .map_err(section("timing"))
    }

    pub fn build_tvr(&self) -> Result<TvrGains> {
        let gains = TvrGains {
            t_x: self.tvr.t_x,
            t_y: self.tvr.t_y,
            kappa_x: self.tvr.kappa_x,
            kappa_y: self.tvr.kappa_y,
            com_desired: [0.0, 0.0],
        };
        gains.validate().map_err(section("tvr"))?;
        Ok(gains)
    }

    pub fn build_filter_params(&self) -> Result<SafetyFilterParams> {
        if !(1..=2).contains(&self.safe_set.capture_steps) {
            return Err(Error::Config(format!(
                "safe_set.capture_steps must be 1 or 2, got {}",
                self.safe_set.capture_steps
            )));
        }
        let params = SafetyFilterParams {
            eta: self.safety_filter.eta,
            slack_penalty: self.safety_filter.slack_penalty,
            capture_steps: self.safe_set.capture_steps,
            convention: self.safe_set.convention,
        };
        params.validate().map_err(section("safety_filter"))?;
        Ok(params)
    }

    pub fn build_gp_hyper(&self) -> Result<GpHyper> {
        let hyper = GpHyper {
            lengthscales: self.gp.lengthscales,
            signal_var: self.gp.signal_var,
            noise_var: self.gp.noise_var,
            k_delta: self.gp.k_delta,
        };
        hyper.validate().map_err(section("gp"))?;
        if self.gp.capacity == 0 {
            return Err(Error::Config("gp.capacity must be positive".into()));
        }
        Ok(hyper)
    }

    pub fn build_env(&self) -> Result<EnvParams> {
        let reward = RewardWeights {
            r_a: self.reward.alive,
            w_b: self.reward.balance,
            w_t: self.reward.tracking,
            w_s: self.reward.steering,
            w_c: self.reward.contact,
        };
        reward.validate().map_err(section("reward"))?;
        let residual = ResidualSpec {
            kind: self.residual.kind,
            magnitude: self.residual.magnitude,
            rng_seed: self.residual.rng_seed,
        };
        residual.validate().map_err(section("residual"))?;
        let disturbance = match &self.disturbance {
            Some(d) => {
                let spec = DisturbanceSpec {
                    force: d.force,
                    duration: d.duration,
                    mass: d.mass,
                    timing: d.timing,
                };
                spec.validate().map_err(section("disturbance"))?;
                Some(spec)
            }
            None => None,
        };
        let params = EnvParams {
            lipm: self.build_lipm()?,
            timing: self.build_timing()?,
            reward,
            desired: DesiredMotion {
                vx: self.desired.vx,
                vy: self.desired.vy,
                turn_rate: self.desired.turn_rate,
            },
            residual,
            disturbance,
            horizon: self.env.horizon,
            fall_margin: self.env.fall_margin,
            convention: self.safe_set.convention,
            reset_noise: self.env.reset_noise,
        };
        params.validate().map_err(section("env"))?;
        Ok(params)
    }

    pub fn build_train(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            gamma: t.gamma,
            gae_lambda: t.gae_lambda,
            clip_eps: t.clip_eps,
            epochs: t.epochs,
            minibatch: t.minibatch,
            lr_policy: t.lr_policy,
            lr_value: t.lr_value,
            entropy_coef: t.entropy_coef,
            value_coef: t.value_coef,
            episodes: t.episodes,
            batch_size: t.batch_size,
            hidden: t.hidden.clone(),
            instances: t.instances,
            use_tvr: t.use_tvr,
            use_policy: t.use_policy,
            use_safety_filter: t.use_safety_filter,
            gp_capacity: self.gp.capacity,
            gp_policy: self.gp.subsample,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate().map_err(section("train"))?;
        Ok(cfg)
    }

    pub fn build_setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            env: self.build_env()?,
            tvr: self.build_tvr()?,
            filter: self.build_filter_params()?,
            gp_hyper: self.build_gp_hyper()?,
            train: self.build_train()?,
            seed: self.seed,
        })
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &ScenarioConfig) -> Self {
        Self {
            command: command.to_string(),
            preset: config.preset.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [lipm]
        h = 0.9
        l_max = 0.6

        [timing]
        t_lift = 0.2
        t_land = 0.2

        [tvr]
        t_x = 0.2
        t_y = 0.2
        kappa_x = -0.1
        kappa_y = -0.1

        [safety_filter]
        slack_penalty = 1e5
        eta = 0.8

        [reward]
        alive = 5.0
        balance = 3.0
        tracking = 3.0
        steering = 1.0
        contact = 1.0
    "#;

    #[test]
    fn test_minimal_config_fills_defaults() {
        let cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.lipm.g, 9.81);
        assert_eq!(cfg.timing.t_ds, 0.0);
        assert_eq!(cfg.safe_set.capture_steps, 1);
        assert_eq!(cfg.safe_set.convention, RadiusConvention::OmegaScaled);
        assert_eq!(cfg.residual.kind, ResidualKind::Zero);
        assert!(cfg.disturbance.is_none());
        assert_eq!(cfg.env.horizon, 50);
        assert_eq!(cfg.train.hidden, vec![64, 64]);
        assert_eq!(cfg.seed, 0);
        cfg.build_setup().unwrap();
    }

    #[test]
    fn test_presets_reproduce_parameter_table() {
        let draco = ScenarioConfig::preset("draco_walking").unwrap();
        assert_eq!(draco.lipm.h, 0.93);
        assert_eq!(draco.lipm.l_max, 0.7);
        assert_eq!(draco.timing.t_lift, 0.16);
        assert_eq!(draco.timing.t_land, 0.16);
        assert_eq!(
            [draco.tvr.t_x, draco.tvr.t_y, draco.tvr.kappa_x, draco.tvr.kappa_y],
            [0.22, 0.22, -0.18, -0.18]
        );
        assert_eq!(draco.train.hidden, vec![64, 64]);
        assert_eq!(draco.safety_filter.slack_penalty, 1e5);
        assert_eq!(draco.safety_filter.eta, 0.8);
        let r = &draco.reward;
        assert_eq!(
            [r.alive, r.balance, r.tracking, r.steering, r.contact],
            [5.0, 3.0, 3.0, 1.0, 1.0]
        );
        assert_eq!(draco.desired.vx, 0.3);
        assert_eq!(draco.desired.turn_rate, 0.0);

        let walk = ScenarioConfig::preset("atlas_walking").unwrap();
        assert_eq!(walk.lipm.h, 0.82);
        assert_eq!(walk.lipm.l_max, 0.55);
        assert_eq!(walk.timing.t_lift, 0.23);
        assert_eq!(walk.timing.t_land, 0.23);
        assert_eq!(
            [walk.tvr.t_x, walk.tvr.t_y, walk.tvr.kappa_x, walk.tvr.kappa_y],
            [0.15, 0.15, -0.16, -0.16]
        );
        let r = &walk.reward;
        assert_eq!(
            [r.alive, r.balance, r.tracking, r.steering, r.contact],
            [5.0, 3.0, 3.0, 1.0, 1.0]
        );
        assert_eq!(walk.desired.vx, 0.15);

        let turn = ScenarioConfig::preset("atlas_turning").unwrap();
        assert_eq!(turn.lipm.h, 0.82);
        assert_eq!(turn.lipm.l_max, 0.55);
        let r = &turn.reward;
        assert_eq!(
            [r.alive, r.balance, r.tracking, r.steering, r.contact],
            [5.0, 5.0, 5.0, 3.0, 1.0]
        );
        assert_eq!(turn.desired.vx, 0.0);
        assert_eq!(turn.desired.turn_rate, 0.09);
    }

    #[test]
    fn test_round_trip_is_identity() {
        for name in PRESETS {
            let cfg = ScenarioConfig::preset(name).unwrap();
            let dumped = cfg.to_toml_string();
            let reparsed = ScenarioConfig::from_toml_str(&dumped).unwrap();
            assert_eq!(cfg, reparsed, "round trip changed {name}");
            assert_eq!(cfg.hash(), reparsed.hash());
        }
    }

    #[test]
    fn test_missing_field_names_path() {
        let raw = MINIMAL.replace("h = 0.9\n", "");
        let err = ScenarioConfig::from_toml_str(&raw).unwrap_err().to_string();
        assert!(err.contains("lipm") && err.contains('h'), "{err}");
    }

    #[test]
    fn test_unknown_key_rejected_with_path() {
        let raw = format!("{MINIMAL}\n[lipm.extra]\nz = 1.0\n");
        let err = ScenarioConfig::from_toml_str(&raw).unwrap_err().to_string();
        assert!(err.contains("lipm"), "{err}");
        let raw = MINIMAL.replace("l_max = 0.6", "l_max = 0.6\nlmax = 0.6");
        let err = ScenarioConfig::from_toml_str(&raw).unwrap_err().to_string();
        assert!(err.to_lowercase().contains("unknown field"), "{err}");
    }

    #[test]
    fn test_semantic_violation_names_section() {
        let raw = MINIMAL.replace("h = 0.9", "h = -0.9");
        let err = ScenarioConfig::from_toml_str(&raw).unwrap_err().to_string();
        assert!(err.contains("lipm"), "{err}");
        let raw = MINIMAL.replace("eta = 0.8", "eta = 1.5");
        let err = ScenarioConfig::from_toml_str(&raw).unwrap_err().to_string();
        assert!(err.contains("safety_filter"), "{err}");
    }

    #[test]
    fn test_build_setup_wires_sections_through() {
        let cfg = ScenarioConfig::preset("draco_walking").unwrap();
        let setup = cfg.build_setup().unwrap();
        assert_eq!(setup.env.lipm.h(), 0.93);
        assert_eq!(setup.filter.eta, 0.8);
        assert_eq!(setup.filter.capture_steps, cfg.safe_set.capture_steps);
        assert_eq!(setup.train.gp_capacity, cfg.gp.capacity);
        assert_eq!(setup.train.hidden, cfg.train.hidden);
        assert_eq!(setup.seed, cfg.seed);
        setup.validate().unwrap();
    }

    #[test]
    fn test_hash_tracks_content() {
        let a = ScenarioConfig::preset("draco_walking").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn test_train_defaults_match_runtime_defaults() {
        let cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        let built = cfg.build_train().unwrap();
        let reference = TrainConfig {
            gp_capacity: GpSection::default().capacity,
            gp_policy: SubsamplePolicy::Fifo,
            ..TrainConfig::default()
        };
        assert_eq!(built, reference);
    }

    #[test]
    fn test_unknown_preset_is_config_error() {
        let err = ScenarioConfig::preset("nonexistent").unwrap_err().to_string();
        assert!(err.contains("unknown preset") && err.contains("draco_walking"), "{err}");
    }

    #[test]
    fn test_manifest_records_provenance() {
        let cfg = ScenarioConfig::preset("atlas_turning").unwrap();
        let m = RunManifest::new("train", &cfg);
        assert_eq!(m.command, "train");
        assert_eq!(m.preset.as_deref(), Some("atlas_turning"));
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.seed, cfg.seed);
        assert!(!m.code_version.is_empty());
        let json = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }
}
