//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the desk-scale defaults:
//!
//! ```toml
//! [mask]
//! student = 0.75
//! teachers = [0.5, 0.4, 0.3]
//!
//! [gating]
//! variant = "full"
//!
//! [train]
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gating::GatingConfig;
use crate::loss::{spatial_side, LossConfig};
use crate::masking::MaskSpec;
use crate::optim::OptimConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub student: ViTConfig,
    /// Architecture shared by every teacher.
    pub teacher: ViTConfig,
    pub teachers: TeachersConfig,
    pub mask: MaskSpec,
    pub gating: GatingConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            student: ViTConfig::desk_student(),
            teacher: ViTConfig::desk_teacher(),
            teachers: TeachersConfig::default(),
            mask: MaskSpec::default(),
            gating: GatingConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherInit {
    Random,
    ToyPretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeachersConfig {
    pub count: usize,
    pub init: TeacherInit,
    /// Teachers whose output is replaced by fresh standard-normal tokens.
    pub noise: Vec<usize>,
    /// Directory holding `teacher_<m>.ckpt`; teachers are built from the
    /// seed when absent.
    pub dir: Option<PathBuf>,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_mask: f64,
}

impl Default for TeachersConfig {
    fn default() -> Self {
        Self {
            count: 3,
            init: TeacherInit::Random,
            noise: Vec::new(),
            dir: None,
            pretrain_steps: 60,
            pretrain_lr: 2e-3,
            pretrain_mask: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Brightness/contrast jitter on the student's pixels only.
    pub student_jitter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Active teacher ids; all teachers when absent.
    pub teacher_subset: Option<Vec<usize>>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            seed: 7,
            teacher_subset: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub class_count: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            count: 320,
            class_count: 8,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Labeled synthetic samples generated for probing.
    pub count: usize,
    pub holdout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Labeled binary dataset to probe on instead of synthetic samples.
    pub path: Option<PathBuf>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            count: 640,
            holdout: 0.25,
            epochs: 200,
            lr: 0.05,
            weight_decay: 1e-4,
            path: None,
        }
    }
}

/// Probe samples start here in the synthetic index space, away from the
/// training samples.
pub const PROBE_FIRST_INDEX: u64 = 1 << 32;

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.teacher.validate()?;
        if self.student.image_size != self.teacher.image_size
            || self.student.patch_size != self.teacher.patch_size
            || self.student.in_channels != self.teacher.in_channels
        {
            return Err(Error::config("student and teacher must share image_size, patch_size and in_channels"));
        }
        spatial_side(self.student.num_patches())?;
        self.gating.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        let m = self.teachers.count;
        if m == 0 {
            return Err(Error::config("teachers.count must be at least 1"));
        }
        if self.mask.teachers.len() < m {
            return Err(Error::config(format!(
                "mask.teachers lists {} ratios for {m} teachers",
                self.mask.teachers.len()
            )));
        }
        self.mask.subset(&self.active_teachers())?.validate()?;
        if let Some(sub) = &self.train.teacher_subset {
            let mut seen = sub.clone();
            seen.sort_unstable();
            seen.dedup();
            if sub.is_empty() || seen.len() != sub.len() || sub.iter().any(|&i| i >= m) {
                return Err(Error::config(format!("invalid teacher_subset {sub:?} for {m} teachers")));
            }
        }
        if let Some(&bad) = self.teachers.noise.iter().find(|&&i| i >= m) {
            return Err(Error::config(format!("noise teacher {bad} out of range for {m} teachers")));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be positive"));
        }
        if self.optim.warmup_steps(self.total_steps()) >= self.total_steps().max(1) && self.optim.warmup_fraction > 0.0 {
            return Err(Error::config("warmup covers the whole run"));
        }
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(Error::config("data.source = \"file\" needs data.path"));
        }
        if self.data.source == DataSource::Synthetic && self.data.count < self.train.batch_size {
            return Err(Error::config(format!(
                "data.count {} is smaller than batch_size {}",
                self.data.count, self.train.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.teachers.pretrain_mask) {
            return Err(Error::config("teachers.pretrain_mask outside [0, 1)"));
        }
        Ok(())
    }

    /// Ids of the teachers taking part in distillation.
    pub fn active_teachers(&self) -> Vec<usize> {
        self.train
            .teacher_subset
            .clone()
            .unwrap_or_else(|| (0..self.teachers.count).collect())
    }

    /// Mask ratios of the active teachers.
    pub fn active_mask(&self) -> Result<MaskSpec> {
        self.mask.subset(&self.active_teachers())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_len() / self.train.batch_size.max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.train.epochs
    }

    /// Sample count of the training set as configured. For a file source
    /// this is only known after loading; see [`Config::with_dataset_len`].
    pub fn dataset_len(&self) -> usize {
        self.data.count
    }

    /// Record the real size of a file-backed dataset.
    pub fn with_dataset_len(mut self, len: usize) -> Self {
        self.data.count = len;
        self
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.student.image_size,
            channels: self.student.in_channels,
            count: self.data.count,
            class_count: self.data.class_count,
            noise: self.data.noise,
            seed: self.data.seed,
            first_index: 0,
        }
    }

    pub fn probe_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            count: self.probe.count,
            first_index: PROBE_FIRST_INDEX,
            ..self.synthetic_spec()
        }
    }

    /// The training set: generated, or read from `data.path`.
    pub fn training_data(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => synthetic(&self.synthetic_spec()),
            DataSource::File => {
                let path = self.data.path.as_deref().ok_or_else(|| Error::config("data.path is not set"))?;
                self.check_images(Dataset::load(path)?)
            }
        }
    }

    /// The labeled probe set: `probe.path` when set, otherwise synthetic
    /// samples disjoint from the training indices.
    pub fn probe_data(&self) -> Result<Dataset> {
        match &self.probe.path {
            Some(path) => self.check_images(Dataset::load(path)?),
            None => synthetic(&self.probe_spec()),
        }
    }

    fn check_images(&self, ds: Dataset) -> Result<Dataset> {
        let s = &self.student;
        if ds.channels != s.in_channels || ds.height != s.image_size || ds.width != s.image_size {
            return Err(Error::config(format!(
                "dataset images are {}x{}x{} but the encoders expect {}x{}x{}",
                ds.channels, ds.height, ds.width, s.in_channels, s.image_size, s.image_size
            )));
        }
        Ok(ds)
    }

    /// SHA-256 over everything that fixes the shapes of a student
    /// checkpoint: both architectures, active teacher count, head width.
    pub fn student_digest(&self) -> [u8; 32] {
        let key = serde_json::json!({
            "student": self.student,
            "teacher": self.teacher,
            "teachers": self.active_teachers().len(),
            "projection_dim": self.loss.projection_dim,
        });
        Sha256::digest(key.to_string().as_bytes()).into()
    }

    /// SHA-256 over the teacher architecture.
    pub fn teacher_digest(&self) -> [u8; 32] {
        let key = serde_json::json!({ "teacher": self.teacher });
        Sha256::digest(key.to_string().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GatingVariant;
    use crate::loss::LossVariant;

    #[test]
    fn defaults_match_desk_scale() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_steps(), 200);
        assert_eq!(cfg.optim.warmup_steps(200), 10);
        assert_eq!(cfg.gating.temperature, 0.1);
        assert_eq!(cfg.optim.lr_peak, 1.5e-4);
        assert_eq!(cfg.optim.weight_decay, 0.05);
        assert_eq!(cfg.mask.student, 0.75);
        assert_eq!(cfg.mask.teachers, vec![0.5, 0.4, 0.3]);
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg = Config::from_toml_str(
            r#"
            gating.variant = "affinity_only"
            loss.variant = "token_only"
            loss.kl_direction = "teacher_first"
            augment.student_jitter = true
            train.teacher_subset = [0, 2]
            teachers.noise = [1]
            optim.clip_norm = 1.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.gating.variant, GatingVariant::AffinityOnly);
        assert_eq!(cfg.loss.variant, LossVariant::TokenOnly);
        assert!(cfg.augment.student_jitter);
        assert_eq!(cfg.active_mask().unwrap().teachers, vec![0.5, 0.3]);
        assert_eq!(cfg.optim.clip_norm, Some(1.0));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "gating.variant = \"learned\"",
            "gating.temperature = 0.0",
            "mask.student = 0.4",
            "train.teacher_subset = [3]",
            "train.teacher_subset = [0, 0]",
            "unknown.key = 1",
            "train.batch_size = 0",
            "student.patch_size = 7\nstudent.image_size = 64\nstudent.embed_dim = 32\nstudent.depth = 1\nstudent.num_heads = 2",
        ] {
            assert!(matches!(Config::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trip_and_digest() {
        let cfg = Config::default();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        let mut other = cfg.clone();
        other.gating.variant = GatingVariant::Uniform;
        assert_eq!(cfg.student_digest(), other.student_digest());
        other.loss.projection_dim = 32;
        assert_ne!(cfg.student_digest(), other.student_digest());
    }
}
