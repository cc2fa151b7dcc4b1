use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ConsistencyMode};
use crate::data::{self, Dataset, SplitRegistry, SplitSpec, SyntheticParams};
use crate::error::{Error, Result};
use crate::losses::DistillLossConfig;
use crate::models::ModelConfig;
use crate::optim::OptimConfig;

/// Role of a split in a run; also the `split` column of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Minival,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [
        SplitTag::Train,
        SplitTag::Minival,
        SplitTag::Val,
        SplitTag::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Minival => "minival",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticParams),
    Idx {
        classes: usize,
        /// Base split name → file pair.
        splits: BTreeMap<String, IdxFiles>,
    },
}

/// Where the data comes from and which slice plays which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: SplitSpec,
    #[serde(default)]
    pub minival: Option<SplitSpec>,
    #[serde(default)]
    pub val: Option<SplitSpec>,
    #[serde(default)]
    pub test: Option<SplitSpec>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the split name keeps per-split synthetic streams stable
    // when splits are added or renamed.
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    seed ^ h
}

impl DataConfig {
    pub fn specs(&self) -> Vec<(SplitTag, &SplitSpec)> {
        let mut out = vec![(SplitTag::Train, &self.train)];
        for (tag, spec) in [
            (SplitTag::Minival, &self.minival),
            (SplitTag::Val, &self.val),
            (SplitTag::Test, &self.test),
        ] {
            if let Some(s) = spec {
                out.push((tag, s));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.specs();
        for (i, (ta, a)) in specs.iter().enumerate() {
            for (tb, b) in &specs[i + 1..] {
                if a.overlaps(b) {
                    return Err(Error::Config(format!(
                        "{ta} split `{a}` overlaps {tb} split `{b}`"
                    )));
                }
            }
        }
        let names: Vec<&str> = match &self.source {
            DataSource::Synthetic(p) => p.splits.keys().map(String::as_str).collect(),
            DataSource::Idx { splits, .. } => splits.keys().map(String::as_str).collect(),
        };
        for (tag, s) in &specs {
            if !names.contains(&s.name.as_str()) {
                return Err(Error::UnknownSplit(format!("{} (used as {tag})", s.name)));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<SplitRegistry> {
        let mut reg = SplitRegistry::new();
        match &self.source {
            DataSource::Synthetic(p) => {
                for (name, &n) in &p.splits {
                    let ds =
                        data::gen_synthetic(name_seed(p.seed, name), n, p.classes, p.resolution)?;
                    reg.insert(name.clone(), ds);
                }
            }
            DataSource::Idx { classes, splits } => {
                for (name, files) in splits {
                    reg.insert(
                        name.clone(),
                        data::load_idx(&files.images, &files.labels, *classes)?,
                    );
                }
            }
        }
        Ok(reg)
    }

    /// Every configured role resolved to its dataset view.
    pub fn load(&self) -> Result<BTreeMap<SplitTag, Dataset>> {
        self.validate()?;
        let reg = self.registry()?;
        self.specs()
            .into_iter()
            .map(|(tag, spec)| Ok((tag, reg.resolve(spec)?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherMember {
    pub checkpoint: PathBuf,
    pub resolution: usize,
}

/// Either a single teacher (`checkpoint` + `resolution`) or an `ensemble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble: Vec<TeacherMember>,
}

impl TeacherConfig {
    pub fn single(checkpoint: impl Into<PathBuf>, resolution: usize) -> Self {
        TeacherConfig {
            checkpoint: Some(checkpoint.into()),
            resolution: Some(resolution),
            ensemble: Vec::new(),
        }
    }

    pub fn ensemble(members: Vec<TeacherMember>) -> Self {
        TeacherConfig {
            checkpoint: None,
            resolution: None,
            ensemble: members,
        }
    }

    /// Members in order, plus whether this is the plain single-teacher form.
    pub fn members(&self) -> Result<(Vec<TeacherMember>, bool)> {
        match (&self.checkpoint, self.resolution, self.ensemble.is_empty()) {
            (Some(c), Some(r), true) => Ok((
                vec![TeacherMember {
                    checkpoint: c.clone(),
                    resolution: r,
                }],
                true,
            )),
            (None, None, false) => Ok((self.ensemble.clone(), false)),
            (None, None, true) => Err(Error::Config("teacher ensemble is empty".into())),
            _ => Err(Error::Config(
                "teacher needs either `checkpoint` and `resolution`, or a non-empty `ensemble`"
                    .into(),
            )),
        }
    }
}

fn default_batch() -> usize {
    64
}
fn default_central() -> f64 {
    0.875
}
fn default_selection() -> SplitTag {
    SplitTag::Val
}

/// Declarative description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub data: DataConfig,
    /// Absent for training from labels.
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    /// The network being trained: the student when distilling, the teacher
    /// when training from labels.
    pub student: ModelConfig,
    /// Initialize the trained network from this checkpoint instead of seed.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    pub mode: ConsistencyMode,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub loss: DistillLossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: usize,
    /// Checkpoint every this many steps; the final checkpoint is always kept.
    #[serde(default)]
    pub checkpoint_interval: usize,
    /// Mix inputs and one-hot labels when training from labels.
    #[serde(default)]
    pub label_mixup: bool,
    /// Area fraction of the deterministic evaluation center crop.
    #[serde(default = "default_central")]
    pub eval_crop_area: f64,
    #[serde(default = "default_selection")]
    pub selection_split: SplitTag,
    /// Record real elapsed seconds; off by default so CSVs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Stop early (at a step boundary) once this much wall time has elapsed.
    #[serde(default)]
    pub max_wall_seconds: Option<f64>,
    /// Continue from the newest checkpoint in the run directory.
    #[serde(default)]
    pub resume: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id.starts_with('.')
        {
            return Err(Error::Config(format!(
                "run_id `{}` is not a plain directory name",
                self.run_id
            )));
        }
        self.data.validate()?;
        self.student.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0 < self.eval_crop_area && self.eval_crop_area <= 1.0) {
            return Err(Error::Config(format!(
                "eval_crop_area {} not in (0, 1]",
                self.eval_crop_area
            )));
        }
        if self.selection_split == SplitTag::Test {
            return Err(Error::Config(
                "the test split cannot be used for selection".into(),
            ));
        }
        if let Some(t) = &self.teacher {
            t.members()?;
        }
        Ok(())
    }

    pub fn selection_spec(&self) -> Option<&SplitSpec> {
        match self.selection_split {
            SplitTag::Minival => self.data.minival.as_ref(),
            SplitTag::Val => self.data.val.as_ref(),
            SplitTag::Train => Some(&self.data.train),
            SplitTag::Test => None,
        }
    }
}

/// Hyperparameter grid in the layout of the temperature/lr/wd tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub sweep_id: String,
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub temperature: Vec<f64>,
    /// Epoch budgets; each budget gets its own best triple.
    pub epochs: Vec<usize>,
    #[serde(default = "default_selection")]
    pub selection_split: SplitTag,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("lr", self.lr.is_empty()),
            ("weight_decay", self.weight_decay.is_empty()),
            ("temperature", self.temperature.is_empty()),
            ("epochs", self.epochs.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("sweep grid `{name}` is empty")));
            }
        }
        if self.selection_split == SplitTag::Test {
            return Err(Error::Config(
                "the test split cannot be used for selection".into(),
            ));
        }
        Ok(())
    }
}

/// Base run plus the grid, as read from a sweep config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub base: RunConfig,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatienceFile {
    pub base: RunConfig,
    pub patience_id: String,
    pub epochs: Vec<usize>,
    /// Optional grid; when present each budget uses its best hyperparameters.
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
