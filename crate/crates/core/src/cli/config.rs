//! Run configuration: a TOML file, `--set key=value` overrides, then
//! task-dependent defaults for anything still unset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Task, DEFAULT_EPIPOLAR_TAU};
use crate::kernel::KernelShape;
use crate::models::{ModelKind, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub register: RegisterConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Point dimension (line/plane only; reg3d is 6, epipolar 4).
    pub dim: Option<usize>,
    pub points: Option<usize>,
    pub inlier_ratio: Option<f64>,
    /// Quantization resolution (voxel size).
    pub resolution: Option<f64>,
    /// Inlier noise std; lines/planes default to one resolution.
    pub sigma: Option<f64>,
    /// Side of the domain cube.
    pub extent: Option<f64>,
    /// Label threshold; lines/planes `3 sigma`, reg3d `2 resolution`,
    /// epipolar `1e-4`.
    pub label_tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub kernel_shape: Option<KernelShape>,
    pub kernel_size: usize,
    pub levels: usize,
    pub channels: Option<Vec<usize>>,
    pub blocks_per_level: usize,
    pub pool_stride: usize,
    pub max_kernel_volume: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Problem instances per step, collated along a batch axis.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Evaluate on the held-out set every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_instances: usize,
    /// Floating-point precision; only `f64` is implemented.
    pub precision: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterConfig {
    pub scenes: usize,
    pub iterations: usize,
    /// RANSAC consensus threshold; defaults to the label threshold.
    pub inlier_tau: Option<f64>,
    pub rotation_threshold_deg: f64,
    pub translation_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Line,
            seed: 0,
            out_dir: "runs".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            register: RegisterConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Unet,
            kernel_shape: None,
            kernel_size: 3,
            levels: 3,
            channels: None,
            blocks_per_level: 1,
            pool_stride: 2,
            max_kernel_volume: 729,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 1,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            eval_every: 50,
            eval_instances: 4,
            precision: "f64".into(),
        }
    }
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            iterations: 1000,
            inlier_tau: None,
            rotation_threshold_deg: crate::metrics::DEFAULT_ROTATION_THRESHOLD_DEG,
            translation_threshold: crate::metrics::DEFAULT_TRANSLATION_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a `dotted.key=value` override; the value is parsed as a TOML
    /// value, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// Fill every task-dependent default and validate.
    pub fn resolve(&mut self) -> Result<()> {
        let d = &mut self.data;
        match self.task {
            Task::Line | Task::Plane => {
                let res = *d.resolution.get_or_insert(0.02);
                d.dim.get_or_insert(4);
                d.points.get_or_insert(8000);
                d.inlier_ratio.get_or_insert(0.05);
                let sigma = *d.sigma.get_or_insert(res);
                d.extent.get_or_insert(1.0);
                d.label_tau.get_or_insert(if sigma > 0.0 { 3.0 * sigma } else { 1e-9 });
            }
            Task::Reg3d => {
                let res = *d.resolution.get_or_insert(0.05);
                d.dim = Some(6);
                d.points.get_or_insert(500);
                d.inlier_ratio.get_or_insert(0.05);
                d.sigma.get_or_insert(0.25 * res);
                d.extent.get_or_insert(1.0);
                d.label_tau.get_or_insert(2.0 * res);
            }
            Task::Epipolar => {
                d.resolution.get_or_insert(0.02);
                d.dim = Some(4);
                d.points.get_or_insert(1000);
                d.inlier_ratio.get_or_insert(0.3);
                d.sigma.get_or_insert(0.0);
                d.extent.get_or_insert(1.0);
                d.label_tau.get_or_insert(DEFAULT_EPIPOLAR_TAU);
            }
        }
        let m = &mut self.model;
        // Width doubles per level from a task-dependent base.
        let (shape, base) = match self.task {
            Task::Reg3d => (KernelShape::Hypercubic, 16),
            _ => (KernelShape::Cross, 32),
        };
        m.kernel_shape.get_or_insert(shape);
        if m.channels.is_none() {
            m.channels = Some((0..m.levels).map(|l| base << l).collect());
        }
        if self.register.inlier_tau.is_none() {
            self.register.inlier_tau = self.data.label_tau;
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if matches!(self.task, Task::Line | Task::Plane) && d.dim.unwrap_or(0) < 2 {
            return bad(format!("{} task needs dim >= 2", self.task));
        }
        if d.points.unwrap_or(0) == 0 {
            return bad("data.points must be positive".into());
        }
        let ratio = d.inlier_ratio.unwrap_or(0.0);
        if !(ratio > 0.0 && ratio <= 1.0) {
            return bad(format!("data.inlier_ratio must be in (0, 1], got {ratio}"));
        }
        if !(d.resolution.unwrap_or(0.0) > 0.0) || !(d.extent.unwrap_or(0.0) > 0.0) {
            return bad("data.resolution and data.extent must be positive".into());
        }
        if self.train.precision != "f64" {
            return bad(format!("precision `{}` is not supported; only f64 is built", self.train.precision));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        self.network_config()?.validate()
    }

    /// Input dimension of the network for this task.
    pub fn point_dim(&self) -> usize {
        self.data.dim.unwrap_or(match self.task {
            Task::Reg3d => 6,
            Task::Epipolar => 4,
            _ => 4,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let m = &self.model;
        let dim = self.point_dim();
        Ok(NetworkConfig {
            dim,
            kernel_shape: m.kernel_shape.unwrap_or(KernelShape::Cross),
            kernel_size: m.kernel_size,
            levels: m.levels,
            channels: m.channels.clone().ok_or_else(|| Error::Config("config not resolved".into()))?,
            blocks_per_level: m.blocks_per_level,
            in_channels: dim + 1,
            pool_stride: m.pool_stride,
            max_kernel_volume: m.max_kernel_volume,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_per_task() {
        let mut c = RunConfig::default();
        c.resolve().unwrap();
        assert_eq!(c.data.dim, Some(4));
        assert_eq!(c.data.resolution, Some(0.02));
        assert_eq!(c.data.sigma, Some(0.02));
        assert_eq!(c.model.channels, Some(vec![32, 64, 128]));
        let mut r = RunConfig { task: Task::Reg3d, ..Default::default() };
        r.resolve().unwrap();
        assert_eq!(r.model.kernel_shape, Some(KernelShape::Hypercubic));
        assert_eq!(r.data.label_tau, Some(2.0 * r.data.resolution.unwrap()));
    }

    #[test]
    fn file_and_overrides() {
        let mut c = RunConfig::from_toml("task = \"plane\"\nseed = 5\n[data]\ndim = 3\n").unwrap();
        assert_eq!(c.task, Task::Plane);
        c.set("data.dim=5").unwrap();
        c.set("train.steps=7").unwrap();
        c.set("model.kind=mlp").unwrap();
        c.set("model.channels=[4, 8, 16]").unwrap();
        c.resolve().unwrap();
        assert_eq!(c.data.dim, Some(5));
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.model.kind, ModelKind::Mlp);
        assert_eq!(c.seed, 5);
        assert!(c.set("data.nonsense=1").is_err());
        assert!(c.set("nokey").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let mut c = RunConfig { task: Task::Epipolar, ..Default::default() };
        c.resolve().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::default();
        c.set("data.dim=1").unwrap();
        assert!(c.resolve().is_err());
        let mut c = RunConfig::default();
        c.set("train.precision=\"f32\"").unwrap();
        assert!(c.resolve().is_err());
        let mut c = RunConfig { task: Task::Line, ..Default::default() };
        c.set("model.kernel_shape=\"hypercubic\"").unwrap();
        c.set("data.dim=8").unwrap();
        assert!(c.resolve().is_err());
    }
}
