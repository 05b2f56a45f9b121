//! Experiment configuration: a flat namespaced key-value text format with
//! strict unknown-key rejection, validated against module preconditions at
//! load time.

use crate::envs::{GraspJudgeConfig, TaskKind, TaskSpec};
use crate::nn::Activation;
use crate::policy::{OptSchedule, ScheduleMode};
use crate::pose::{PosEncConfig, PpdConfig, PpdEntry, Representation};
use crate::scene::{Aabb, AnalyticFieldConfig};
use crate::training::{LossConfig, TrainConfig};
use crate::tuner::HyperSpace;
use crate::value::ValueModelConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,

    // scene.*
    pub scene_tau: f64,
    pub scene_corner_beta: f64,
    pub scene_occupancy_width: f64,
    pub scene_m_pos: usize,
    pub scene_m_dir: usize,

    // pose.*
    pub representation: Representation,
    pub gripper_half_width: f64,
    pub fingertip_depth: f64,
    pub ppd_entries: Option<Vec<PpdEntry>>,

    // nn.*
    pub activation: Activation,
    pub agg_width: usize,
    pub agg_blocks: usize,
    pub value_width: usize,
    pub value_blocks: usize,

    // training.*
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aux_enabled: bool,
    pub negatives: usize,
    pub proximal: usize,
    pub sigma_pos: f64,
    pub sigma_rot: f64,
    pub stride: usize,
    pub value_weight: f64,
    pub aux_weight: f64,
    pub orientation_weight: f64,
    pub holdout: usize,

    // policy.*
    pub policy_mode: ScheduleMode,
    pub candidates: usize,
    pub steps_pos: usize,
    pub steps_rot: usize,
    pub steps: usize,
    pub lr_pos: f64,
    pub lr_rot: f64,
    pub decay_pos: f64,
    pub decay_rot: f64,
    pub downward_filter: bool,
    pub cone_half_angle_deg: f64,

    // envs.*
    pub task: TaskKind,
    pub objects_min: usize,
    pub objects_max: usize,
    pub half_xy_min: f64,
    pub half_xy_max: f64,
    pub half_z_min: f64,
    pub half_z_max: f64,
    pub workspace: Aabb,
    pub clearance: f64,
    pub episodes: usize,
    pub repeats: usize,
    pub max_opening: f64,
    pub pos_tolerance: f64,
    pub ang_tolerance_deg: f64,
    pub approach_cone_deg: f64,
    pub finger_length: f64,

    // tuner.*
    pub tuner_budget: usize,
    pub tuner_lr_min: f64,
    pub tuner_lr_max: f64,
    pub tuner_decay_min: f64,
    pub tuner_decay_max: f64,
    pub tuner_steps_min: usize,
    pub tuner_steps_max: usize,
    pub validation_episodes: usize,

    // demo.*
    pub demo_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            threads: 0,
            scene_tau: 0.02,
            scene_corner_beta: 100.0,
            scene_occupancy_width: 0.01,
            scene_m_pos: 6,
            scene_m_dir: 4,
            representation: Representation::Quat,
            gripper_half_width: 0.07,
            fingertip_depth: 0.05,
            ppd_entries: None,
            activation: Activation::Elu,
            agg_width: 64,
            agg_blocks: 2,
            value_width: 64,
            value_blocks: 3,
            epochs: 400,
            batch_size: 16,
            lr: 1e-3,
            aux_enabled: true,
            negatives: 64,
            proximal: 8,
            sigma_pos: 0.02,
            sigma_rot: 0.1,
            stride: 2,
            value_weight: 1.0,
            aux_weight: 1.0,
            orientation_weight: 1.0,
            holdout: 16,
            policy_mode: ScheduleMode::Sequential,
            candidates: 64,
            steps_pos: 16,
            steps_rot: 16,
            steps: 32,
            lr_pos: 0.05,
            lr_rot: 0.05,
            decay_pos: 0.94,
            decay_rot: 0.94,
            downward_filter: true,
            cone_half_angle_deg: 45.0,
            task: TaskKind::Simple,
            objects_min: 1,
            objects_max: 5,
            half_xy_min: 0.015,
            half_xy_max: 0.045,
            half_z_min: 0.02,
            half_z_max: 0.06,
            workspace: Aabb::new([-0.3, -0.3, 0.0], [0.3, 0.3, 0.35]).expect("workspace"),
            clearance: 0.16,
            episodes: 100,
            repeats: 6,
            max_opening: 0.140,
            pos_tolerance: 0.02,
            ang_tolerance_deg: 15.0,
            approach_cone_deg: 45.0,
            finger_length: 0.05,
            tuner_budget: 100,
            tuner_lr_min: 3e-3,
            tuner_lr_max: 0.15,
            tuner_decay_min: 0.85,
            tuner_decay_max: 1.0,
            tuner_steps_min: 8,
            tuner_steps_max: 48,
            validation_episodes: 40,
            demo_count: 512,
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "bool",
        }),
    }
}

fn parse_floats(key: &str, value: &str, n: usize) -> Result<Vec<f64>, ConfigError> {
    let parts: Result<Vec<f64>, _> = value.split(',').map(|p| p.trim().parse()).collect();
    match parts {
        Ok(v) if v.len() == n => Ok(v),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "comma-separated floats",
        }),
    }
}

impl ExperimentConfig {
    /// Parses the flat key-value text; unknown keys are errors and every
    /// value is validated against the module preconditions.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: idx + 1 });
            };
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut take = |key: &str| map.remove(key);

        macro_rules! scalar {
            ($key:literal, $field:ident, $ty:ty, $expected:literal) => {
                if let Some(v) = take($key) {
                    cfg.$field = parse_scalar::<$ty>($key, &v, $expected)?;
                }
            };
        }

        scalar!("seed", seed, u64, "integer");
        scalar!("threads", threads, usize, "integer");
        scalar!("scene.tau", scene_tau, f64, "float");
        scalar!("scene.corner_beta", scene_corner_beta, f64, "float");
        scalar!("scene.occupancy_width", scene_occupancy_width, f64, "float");
        scalar!("scene.m_pos", scene_m_pos, usize, "integer");
        scalar!("scene.m_dir", scene_m_dir, usize, "integer");
        if let Some(v) = take("pose.representation") {
            cfg.representation = Representation::parse(v.trim()).ok_or(ConfigError::BadValue {
                key: "pose.representation".into(),
                value: v,
                expected: "quat | 6d",
            })?;
        }
        scalar!("pose.gripper_half_width", gripper_half_width, f64, "float");
        scalar!("pose.fingertip_depth", fingertip_depth, f64, "float");
        if let Some(v) = take("pose.ppd_entries") {
            let mut entries = Vec::new();
            for part in v.split(';') {
                let nums = parse_floats("pose.ppd_entries", part, 6)?;
                entries.push(PpdEntry {
                    offset: [nums[0], nums[1], nums[2]],
                    direction: [nums[3], nums[4], nums[5]],
                });
            }
            cfg.ppd_entries = Some(entries);
        }
        if let Some(v) = take("nn.activation") {
            cfg.activation = Activation::parse(v.trim()).ok_or(ConfigError::BadValue {
                key: "nn.activation".into(),
                value: v,
                expected: "elu | relu",
            })?;
        }
        scalar!("nn.agg_width", agg_width, usize, "integer");
        scalar!("nn.agg_blocks", agg_blocks, usize, "integer");
        scalar!("nn.value_width", value_width, usize, "integer");
        scalar!("nn.value_blocks", value_blocks, usize, "integer");
        scalar!("training.epochs", epochs, usize, "integer");
        scalar!("training.batch_size", batch_size, usize, "integer");
        scalar!("training.lr", lr, f64, "float");
        if let Some(v) = take("training.aux_enabled") {
            cfg.aux_enabled = parse_bool("training.aux_enabled", &v)?;
        }
        scalar!("training.negatives", negatives, usize, "integer");
        scalar!("training.proximal", proximal, usize, "integer");
        scalar!("training.sigma_pos", sigma_pos, f64, "float");
        scalar!("training.sigma_rot", sigma_rot, f64, "float");
        scalar!("training.stride", stride, usize, "integer");
        scalar!("training.value_weight", value_weight, f64, "float");
        scalar!("training.aux_weight", aux_weight, f64, "float");
        scalar!("training.orientation_weight", orientation_weight, f64, "float");
        scalar!("training.holdout", holdout, usize, "integer");
        if let Some(v) = take("policy.mode") {
            cfg.policy_mode = ScheduleMode::parse(v.trim()).ok_or(ConfigError::BadValue {
                key: "policy.mode".into(),
                value: v,
                expected: "sequential | synchronous",
            })?;
        }
        scalar!("policy.candidates", candidates, usize, "integer");
        scalar!("policy.steps_pos", steps_pos, usize, "integer");
        scalar!("policy.steps_rot", steps_rot, usize, "integer");
        scalar!("policy.steps", steps, usize, "integer");
        scalar!("policy.lr_pos", lr_pos, f64, "float");
        scalar!("policy.lr_rot", lr_rot, f64, "float");
        scalar!("policy.decay_pos", decay_pos, f64, "float");
        scalar!("policy.decay_rot", decay_rot, f64, "float");
        if let Some(v) = take("policy.downward_filter") {
            cfg.downward_filter = parse_bool("policy.downward_filter", &v)?;
        }
        scalar!("policy.cone_half_angle_deg", cone_half_angle_deg, f64, "float");
        if let Some(v) = take("envs.task") {
            cfg.task = TaskKind::parse(v.trim()).ok_or(ConfigError::BadValue {
                key: "envs.task".into(),
                value: v,
                expected: "simple | clutter",
            })?;
        }
        scalar!("envs.objects_min", objects_min, usize, "integer");
        scalar!("envs.objects_max", objects_max, usize, "integer");
        scalar!("envs.half_xy_min", half_xy_min, f64, "float");
        scalar!("envs.half_xy_max", half_xy_max, f64, "float");
        scalar!("envs.half_z_min", half_z_min, f64, "float");
        scalar!("envs.half_z_max", half_z_max, f64, "float");
        if let Some(v) = take("envs.workspace") {
            let nums = parse_floats("envs.workspace", &v, 6)?;
            cfg.workspace = Aabb::new([nums[0], nums[1], nums[2]], [nums[3], nums[4], nums[5]])
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        scalar!("envs.clearance", clearance, f64, "float");
        scalar!("envs.episodes", episodes, usize, "integer");
        scalar!("envs.repeats", repeats, usize, "integer");
        scalar!("envs.max_opening", max_opening, f64, "float");
        scalar!("envs.pos_tolerance", pos_tolerance, f64, "float");
        scalar!("envs.ang_tolerance_deg", ang_tolerance_deg, f64, "float");
        scalar!("envs.approach_cone_deg", approach_cone_deg, f64, "float");
        scalar!("envs.finger_length", finger_length, f64, "float");
        scalar!("tuner.budget", tuner_budget, usize, "integer");
        scalar!("tuner.lr_min", tuner_lr_min, f64, "float");
        scalar!("tuner.lr_max", tuner_lr_max, f64, "float");
        scalar!("tuner.decay_min", tuner_decay_min, f64, "float");
        scalar!("tuner.decay_max", tuner_decay_max, f64, "float");
        scalar!("tuner.steps_min", tuner_steps_min, usize, "integer");
        scalar!("tuner.steps_max", tuner_steps_max, usize, "integer");
        scalar!("tuner.validation_episodes", validation_episodes, usize, "integer");
        scalar!("demo.count", demo_count, usize, "integer");

        if let Some((key, _)) = map.into_iter().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// All module preconditions that can be checked before running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.aux_enabled && self.activation != Activation::Elu {
            return bad("training.aux_enabled requires nn.activation = elu (the auxiliary loss differentiates the pose gradient)");
        }
        if self.scene_m_pos == 0 || self.scene_m_dir == 0 {
            return bad("positional encoding needs at least one frequency");
        }
        if self.scene_tau <= 0.0 || self.scene_corner_beta <= 0.0 || self.scene_occupancy_width <= 0.0 {
            return bad("scene smoothing constants must be positive");
        }
        if self.agg_width == 0 || self.agg_blocks == 0 || self.value_width == 0 || self.value_blocks == 0
        {
            return bad("network widths and block counts must be positive");
        }
        if self.epochs == 0 {
            return bad("training.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be at least 1");
        }
        if self.negatives == 0 || self.proximal == 0 {
            return bad("training.negatives and training.proximal must be at least 1");
        }
        if self.sigma_pos <= 0.0 || self.sigma_rot <= 0.0 {
            return bad("proximity spreads must be positive");
        }
        if self.stride == 0 {
            return bad("training.stride must be at least 1");
        }
        if let Some(entries) = &self.ppd_entries {
            if entries.is_empty() {
                return bad("pose.ppd_entries must be non-empty");
            }
        }
        if self.gripper_half_width <= 0.0 {
            return bad("pose.gripper_half_width must be positive");
        }
        self.schedule().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.task_spec(self.task).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.judge().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hyperspace().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.episodes == 0 || self.repeats == 0 {
            return bad("envs.episodes and envs.repeats must be at least 1");
        }
        if self.demo_count == 0 {
            return bad("demo.count must be at least 1");
        }
        if self.tuner_budget == 0 {
            return bad("tuner.budget must be at least 1");
        }
        Ok(())
    }

    // ── Module-config builders ───────────────────────────────────────

    pub fn field_config(&self) -> AnalyticFieldConfig {
        AnalyticFieldConfig {
            tau: self.scene_tau,
            corner_beta: self.scene_corner_beta,
            occupancy_width: self.scene_occupancy_width,
            enc_pos: PosEncConfig::new(self.scene_m_pos).expect("validated"),
            enc_dir: PosEncConfig::new(self.scene_m_dir).expect("validated"),
        }
    }

    pub fn ppd(&self) -> PpdConfig {
        match &self.ppd_entries {
            Some(entries) => PpdConfig::new(entries.clone()).expect("validated"),
            None => PpdConfig::default_gripper(self.gripper_half_width, self.fingertip_depth),
        }
    }

    pub fn model_config(&self) -> ValueModelConfig {
        ValueModelConfig {
            representation: self.representation,
            activation: self.activation,
            agg_width: self.agg_width,
            agg_blocks: self.agg_blocks,
            value_width: self.value_width,
            value_blocks: self.value_blocks,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            negatives: self.negatives,
            proximal: self.proximal,
            sigma_pos: self.sigma_pos,
            sigma_rot: self.sigma_rot,
            stride: self.stride,
            value_weight: self.value_weight,
            aux_weight: self.aux_weight,
            orientation_weight: self.orientation_weight,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            lr: self.lr,
            aux_enabled: self.aux_enabled,
            representation: self.representation,
            loss: self.loss_config(),
        }
    }

    pub fn schedule(&self) -> OptSchedule {
        OptSchedule {
            mode: self.policy_mode,
            steps_pos: self.steps_pos,
            steps_rot: self.steps_rot,
            steps: self.steps,
            lr_pos: self.lr_pos,
            lr_rot: self.lr_rot,
            decay_pos: self.decay_pos,
            decay_rot: self.decay_rot,
            candidates: self.candidates,
        }
    }

    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            half_xy: (self.half_xy_min, self.half_xy_max),
            half_z: (self.half_z_min, self.half_z_max),
            workspace: self.workspace,
            clearance: self.clearance,
            seed: crate::seeds::derive_seed(self.seed, 0x7a5c),
        }
    }

    pub fn judge(&self) -> GraspJudgeConfig {
        GraspJudgeConfig {
            max_opening: self.max_opening,
            pos_tolerance: self.pos_tolerance,
            ang_tolerance: self.ang_tolerance_deg.to_radians(),
            approach_cone: self.approach_cone_deg.to_radians(),
            finger_length: self.finger_length,
        }
    }

    pub fn hyperspace(&self) -> HyperSpace {
        HyperSpace {
            lr_pos: (self.tuner_lr_min, self.tuner_lr_max),
            lr_rot: (self.tuner_lr_min, self.tuner_lr_max),
            decay_pos: (self.tuner_decay_min, self.tuner_decay_max),
            decay_rot: (self.tuner_decay_min, self.tuner_decay_max),
            steps: match self.policy_mode {
                ScheduleMode::Synchronous => Some((self.tuner_steps_min, self.tuner_steps_max)),
                ScheduleMode::Sequential => None,
            },
        }
    }

    pub fn downward_filter_angle(&self) -> Option<f64> {
        self.downward_filter.then(|| self.cone_half_angle_deg.to_radians())
    }

    /// Resolved configuration as config-file text; commands echo this into
    /// their output directory.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ws = self.workspace;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "scene.tau = {}", self.scene_tau);
        let _ = writeln!(s, "scene.corner_beta = {}", self.scene_corner_beta);
        let _ = writeln!(s, "scene.occupancy_width = {}", self.scene_occupancy_width);
        let _ = writeln!(s, "scene.m_pos = {}", self.scene_m_pos);
        let _ = writeln!(s, "scene.m_dir = {}", self.scene_m_dir);
        let _ = writeln!(s, "pose.representation = {}", self.representation.as_str());
        let _ = writeln!(s, "pose.gripper_half_width = {}", self.gripper_half_width);
        let _ = writeln!(s, "pose.fingertip_depth = {}", self.fingertip_depth);
        if let Some(entries) = &self.ppd_entries {
            let parts: Vec<String> = entries
                .iter()
                .map(|e| {
                    format!(
                        "{},{},{},{},{},{}",
                        e.offset[0], e.offset[1], e.offset[2],
                        e.direction[0], e.direction[1], e.direction[2]
                    )
                })
                .collect();
            let _ = writeln!(s, "pose.ppd_entries = {}", parts.join("; "));
        }
        let _ = writeln!(s, "nn.activation = {}", self.activation.as_str());
        let _ = writeln!(s, "nn.agg_width = {}", self.agg_width);
        let _ = writeln!(s, "nn.agg_blocks = {}", self.agg_blocks);
        let _ = writeln!(s, "nn.value_width = {}", self.value_width);
        let _ = writeln!(s, "nn.value_blocks = {}", self.value_blocks);
        let _ = writeln!(s, "training.epochs = {}", self.epochs);
        let _ = writeln!(s, "training.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "training.lr = {}", self.lr);
        let _ = writeln!(s, "training.aux_enabled = {}", self.aux_enabled);
        let _ = writeln!(s, "training.negatives = {}", self.negatives);
        let _ = writeln!(s, "training.proximal = {}", self.proximal);
        let _ = writeln!(s, "training.sigma_pos = {}", self.sigma_pos);
        let _ = writeln!(s, "training.sigma_rot = {}", self.sigma_rot);
        let _ = writeln!(s, "training.stride = {}", self.stride);
        let _ = writeln!(s, "training.value_weight = {}", self.value_weight);
        let _ = writeln!(s, "training.aux_weight = {}", self.aux_weight);
        let _ = writeln!(s, "training.orientation_weight = {}", self.orientation_weight);
        let _ = writeln!(s, "training.holdout = {}", self.holdout);
        let _ = writeln!(s, "policy.mode = {}", self.policy_mode.as_str());
        let _ = writeln!(s, "policy.candidates = {}", self.candidates);
        let _ = writeln!(s, "policy.steps_pos = {}", self.steps_pos);
        let _ = writeln!(s, "policy.steps_rot = {}", self.steps_rot);
        let _ = writeln!(s, "policy.steps = {}", self.steps);
        let _ = writeln!(s, "policy.lr_pos = {}", self.lr_pos);
        let _ = writeln!(s, "policy.lr_rot = {}", self.lr_rot);
        let _ = writeln!(s, "policy.decay_pos = {}", self.decay_pos);
        let _ = writeln!(s, "policy.decay_rot = {}", self.decay_rot);
        let _ = writeln!(s, "policy.downward_filter = {}", self.downward_filter);
        let _ = writeln!(s, "policy.cone_half_angle_deg = {}", self.cone_half_angle_deg);
        let _ = writeln!(s, "envs.task = {}", self.task.as_str());
        let _ = writeln!(s, "envs.objects_min = {}", self.objects_min);
        let _ = writeln!(s, "envs.objects_max = {}", self.objects_max);
        let _ = writeln!(s, "envs.half_xy_min = {}", self.half_xy_min);
        let _ = writeln!(s, "envs.half_xy_max = {}", self.half_xy_max);
        let _ = writeln!(s, "envs.half_z_min = {}", self.half_z_min);
        let _ = writeln!(s, "envs.half_z_max = {}", self.half_z_max);
        let _ = writeln!(
            s,
            "envs.workspace = {},{},{},{},{},{}",
            ws.min[0], ws.min[1], ws.min[2], ws.max[0], ws.max[1], ws.max[2]
        );
        let _ = writeln!(s, "envs.clearance = {}", self.clearance);
        let _ = writeln!(s, "envs.episodes = {}", self.episodes);
        let _ = writeln!(s, "envs.repeats = {}", self.repeats);
        let _ = writeln!(s, "envs.max_opening = {}", self.max_opening);
        let _ = writeln!(s, "envs.pos_tolerance = {}", self.pos_tolerance);
        let _ = writeln!(s, "envs.ang_tolerance_deg = {}", self.ang_tolerance_deg);
        let _ = writeln!(s, "envs.approach_cone_deg = {}", self.approach_cone_deg);
        let _ = writeln!(s, "envs.finger_length = {}", self.finger_length);
        let _ = writeln!(s, "tuner.budget = {}", self.tuner_budget);
        let _ = writeln!(s, "tuner.lr_min = {}", self.tuner_lr_min);
        let _ = writeln!(s, "tuner.lr_max = {}", self.tuner_lr_max);
        let _ = writeln!(s, "tuner.decay_min = {}", self.tuner_decay_min);
        let _ = writeln!(s, "tuner.decay_max = {}", self.tuner_decay_max);
        let _ = writeln!(s, "tuner.steps_min = {}", self.tuner_steps_min);
        let _ = writeln!(s, "tuner.steps_max = {}", self.tuner_steps_max);
        let _ = writeln!(s, "tuner.validation_episodes = {}", self.validation_episodes);
        let _ = writeln!(s, "demo.count = {}", self.demo_count);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let parsed = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::parse("training.epoochs = 5").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "training.epoochs"));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = ExperimentConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey(_)));
    }

    #[test]
    fn aux_with_relu_rejected_at_load() {
        let err = ExperimentConfig::parse(
            "nn.activation = relu\ntraining.aux_enabled = true",
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(msg) if msg.contains("elu")));
        // Disabling the auxiliary loss makes ReLU acceptable.
        let cfg = ExperimentConfig::parse(
            "nn.activation = relu\ntraining.aux_enabled = false",
        )
        .unwrap();
        assert_eq!(cfg.activation, Activation::Relu);
    }

    #[test]
    fn comments_and_overrides_parse() {
        let cfg = ExperimentConfig::parse(
            "# experiment\nseed = 9\ntraining.epochs = 5 # short run\npolicy.mode = synchronous\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.policy_mode, ScheduleMode::Synchronous);
        assert!(cfg.hyperspace().steps.is_some());
    }

    #[test]
    fn module_precondition_failures_are_load_errors() {
        assert!(ExperimentConfig::parse("training.epochs = 0").is_err());
        assert!(ExperimentConfig::parse("training.negatives = 0").is_err());
        assert!(ExperimentConfig::parse("policy.lr_pos = -0.1").is_err());
        assert!(ExperimentConfig::parse("scene.m_pos = 0").is_err());
        assert!(ExperimentConfig::parse("envs.episodes = 0").is_err());
        assert!(ExperimentConfig::parse("pose.ppd_entries = 1,2").is_err());
    }

    #[test]
    fn ppd_entries_parse() {
        let cfg = ExperimentConfig::parse(
            "pose.ppd_entries = 0,0,0,0,0,1; 0.07,0,0.05,-1,0,0",
        )
        .unwrap();
        let ppd = cfg.ppd();
        assert_eq!(ppd.len(), 2);
        assert_eq!(ppd.entries()[1].offset, [0.07, 0.0, 0.05]);
    }
}
