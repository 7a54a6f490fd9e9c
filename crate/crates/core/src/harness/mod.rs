//! Experiment plans, the search and comparison procedures, and report output.

mod report;
mod run;

pub use report::{
    best_row, emit_report, format_gain, mark_top, median_row, render, EvalReport, EvalRow, ReportFormat, ReportKind, TOP_MARKS,
};
pub use run::{run_hparam_search, run_model_bench, run_transfer_comparison, stratified_eval, Artifacts, Comparison};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TileSet;
use crate::datagen::DatasetConfig;
use crate::losses::DistillConfig;
use crate::models::{Family, ModelSpec, DEFAULT_INPUT};
use crate::trainers::{DmlConfig, TrainConfig};
use crate::{Error, Result};

/// Dataset roles a tile set can come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    T,
    S,
    Ev,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::T => "T",
            Role::S => "S",
            Role::Ev => "Ev",
        }
    }
}

/// Train-validate pairing, written `<train>-<val>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    TT,
    TS,
    TEv,
    SS,
    SEv,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::TT, Setting::TS, Setting::TEv, Setting::SS, Setting::SEv];

    pub fn train_role(self) -> Role {
        match self {
            Setting::TT | Setting::TS | Setting::TEv => Role::T,
            Setting::SS | Setting::SEv => Role::S,
        }
    }

    pub fn val_role(self) -> Role {
        match self {
            Setting::TT => Role::T,
            Setting::TS | Setting::SS => Role::S,
            Setting::TEv | Setting::SEv => Role::Ev,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::TT => "T-T",
            Setting::TS => "T-S",
            Setting::TEv => "T-Ev",
            Setting::SS => "S-S",
            Setting::SEv => "S-Ev",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = Setting::ALL.into_iter().find(|k| k.name() == s) {
            return Ok(k);
        }
        if s.starts_with("Ev-") {
            return Err(Error::Settings(format!("{s}: the Ev dataset has no training samples")));
        }
        Err(Error::Config(format!("unknown setting {s:?}")))
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Sda,
    Kd,
    Dml,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Sda, Method::Kd, Method::Dml];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Sda => "sda",
            Method::Kd => "kd",
            Method::Dml => "dml",
        }
    }

    /// Block heading used in the comparison table.
    pub fn title(self) -> &'static str {
        match self {
            Method::Baseline => "Student's baseline scores (trained alone on S)",
            Method::Sda => "Supervised domain adaptation (SDA)",
            Method::Kd => "Knowledge distillation (KD)",
            Method::Dml => "Deep mutual learning (DML)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the tiles come from. With neither field set the root is read from
/// `OFFNADIR_DATA_ROOT`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// Directory holding the `T`, `S` and `Ev` datasets.
    pub root: Option<PathBuf>,
    /// Generate the triple in memory instead of reading it.
    pub synthetic: Option<DatasetConfig>,
}

pub const DATA_ROOT_ENV: &str = "OFFNADIR_DATA_ROOT";

/// The five splits used by the experiments.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub t_train: TileSet,
    pub t_val: TileSet,
    pub s_train: TileSet,
    pub s_val: TileSet,
    pub ev: TileSet,
}

impl Datasets {
    pub fn load(root: &Path) -> Result<Datasets> {
        let get = |role: &str, split: &str| TileSet::load(&root.join(role), split, None);
        Ok(Datasets { t_train: get("T", "train")?, t_val: get("T", "val")?, s_train: get("S", "train")?, s_val: get("S", "val")?, ev: get("Ev", "val")? })
    }

    pub fn synthesize(cfg: &DatasetConfig) -> Result<Datasets> {
        cfg.validate()?;
        let get = |role: &str, split: &str| TileSet::synthesize(cfg, role, split);
        Ok(Datasets { t_train: get("T", "train")?, t_val: get("T", "val")?, s_train: get("S", "train")?, s_val: get("S", "val")?, ev: get("Ev", "val")? })
    }

    pub fn from_source(src: &DataSource) -> Result<Datasets> {
        if let Some(cfg) = &src.synthetic {
            return Datasets::synthesize(cfg);
        }
        let root = match &src.root {
            Some(r) => r.clone(),
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("no dataset given: set data.root, data.synthetic or {DATA_ROOT_ENV}")))?,
        };
        Datasets::load(&root)
    }

    pub fn train_split(&self, role: Role) -> Result<&TileSet> {
        match role {
            Role::T => Ok(&self.t_train),
            Role::S => Ok(&self.s_train),
            Role::Ev => Err(Error::Settings("the Ev dataset has no training samples".into())),
        }
    }

    pub fn val_split(&self, role: Role) -> &TileSet {
        match role {
            Role::T => &self.t_val,
            Role::S => &self.s_val,
            Role::Ev => &self.ev,
        }
    }
}

/// A named network in the experiment roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub spec: ModelSpec,
}

impl RosterEntry {
    /// Default spec of a shipped family at the given input size.
    pub fn preset(family: Family, input_size: usize) -> RosterEntry {
        RosterEntry { name: family.name().to_string(), spec: ModelSpec::new(family).with_input(input_size) }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RosterItem {
    Preset(String),
    Full(RosterEntry),
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawPlan {
    name: String,
    input_size: usize,
    data: DataSource,
    roster: Vec<RosterItem>,
    teacher: Option<String>,
    settings: Vec<Setting>,
    methods: Vec<Method>,
    dml_pairs: Vec<(String, String)>,
    seeds: Vec<u64>,
    train: TrainConfig,
    pretrain: TrainConfig,
    distill: DistillConfig,
    dml: DmlConfig,
}

impl Default for RawPlan {
    fn default() -> Self {
        let p = ExperimentPlan::default();
        RawPlan {
            name: p.name,
            input_size: p.input_size,
            data: p.data,
            roster: Vec::new(),
            teacher: p.teacher,
            settings: p.settings,
            methods: p.methods,
            dml_pairs: p.dml_pairs,
            seeds: p.seeds,
            train: p.train,
            pretrain: p.pretrain,
            distill: p.distill,
            dml: p.dml,
        }
    }
}

/// Everything needed to run one search, benchmark or comparison.
///
/// Roster entries in JSON are either a family name (built at `input_size`)
/// or a full `{name, spec}` object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlan")]
pub struct ExperimentPlan {
    pub name: String,
    pub input_size: usize,
    pub data: DataSource,
    pub roster: Vec<RosterEntry>,
    /// Roster name of the network distilled from in KD and DML.
    pub teacher: Option<String>,
    pub settings: Vec<Setting>,
    pub methods: Vec<Method>,
    pub dml_pairs: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    /// Schedule for every run on S.
    pub train: TrainConfig,
    /// Schedule for pretraining on T.
    pub pretrain: TrainConfig,
    pub distill: DistillConfig,
    pub dml: DmlConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            name: "plan".into(),
            input_size: DEFAULT_INPUT,
            data: DataSource::default(),
            roster: Family::ALL.iter().map(|&f| RosterEntry::preset(f, DEFAULT_INPUT)).collect(),
            teacher: Some(Family::VggLike.name().to_string()),
            settings: vec![Setting::SS, Setting::SEv],
            methods: Method::ALL.to_vec(),
            dml_pairs: Vec::new(),
            seeds: vec![0],
            train: TrainConfig::student(),
            pretrain: TrainConfig::teacher(),
            distill: DistillConfig::default(),
            dml: DmlConfig::default(),
        }
    }
}

impl TryFrom<RawPlan> for ExperimentPlan {
    type Error = Error;
    fn try_from(raw: RawPlan) -> Result<Self> {
        let input = raw.input_size;
        let roster = if raw.roster.is_empty() {
            Family::ALL.iter().map(|&f| RosterEntry::preset(f, input)).collect()
        } else {
            raw.roster
                .into_iter()
                .map(|item| match item {
                    RosterItem::Preset(name) => Ok(RosterEntry::preset(name.parse::<Family>()?, input)),
                    RosterItem::Full(e) => Ok(e),
                })
                .collect::<Result<Vec<_>>>()?
        };
        let plan = ExperimentPlan {
            name: raw.name,
            input_size: input,
            data: raw.data,
            roster,
            teacher: raw.teacher,
            settings: raw.settings,
            methods: raw.methods,
            dml_pairs: raw.dml_pairs,
            seeds: raw.seeds,
            train: raw.train,
            pretrain: raw.pretrain,
            distill: raw.distill,
            dml: raw.dml,
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::Config("the roster is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::Config("at least one setting is required".into()));
        }
        for e in &self.roster {
            e.spec.validate()?;
            if e.spec.input_size != self.input_size {
                return Err(Error::Config(format!("{}: input size {} differs from the plan's {}", e.name, e.spec.input_size, self.input_size)));
            }
        }
        let mut names: Vec<&str> = self.roster.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("roster names must be unique".into()));
        }
        if let Some(t) = &self.teacher {
            self.entry(t)?;
        }
        for (a, b) in &self.dml_pairs {
            self.entry(a)?;
            self.entry(b)?;
        }
        self.train.validate()?;
        self.pretrain.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&RosterEntry> {
        self.roster.iter().find(|e| e.name == name).ok_or_else(|| Error::Config(format!("{name} is not in the roster")))
    }

    pub fn load(path: &Path) -> Result<ExperimentPlan> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
