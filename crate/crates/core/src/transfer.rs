//! The three experiment configurations: transfer learning, frozen weights
//! and random initialisation.
//!
//! Each configuration is a [`TransferStrategy`] registered by name in a
//! [`StrategyRegistry`]; experiment descriptors select one at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::hourglass::{layer_inventory, unit_of, HourglassArch, NetError, StackedHourglassNet};
use crate::keypoints::{builtin_split, JointId, JointSubsetSplit, KeypointError};
use crate::rng;
use crate::training::{run_training, EpochObserver, TrainError, TrainingConfig, TrainingJob, TrainingOutcome};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("unknown transfer mode `{name}` (known: {known})")]
    UnknownMode { name: String, known: String },
    #[error("mode `{0}` needs a stage-1 network")]
    MissingStage1(String),
    #[error("stage-1 network does not fit the experiment: {}", .0.join("; "))]
    ArchMismatch(Vec<String>),
    #[error("invalid supervision plan: {0}")]
    Plan(String),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Split(#[from] KeypointError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    TransferLearning,
    FrozenWeights,
    RandomInit,
}

impl TransferMode {
    pub const ALL: [TransferMode; 3] = [
        TransferMode::TransferLearning,
        TransferMode::FrozenWeights,
        TransferMode::RandomInit,
    ];

    /// Registry key.
    pub fn name(self) -> &'static str {
        match self {
            TransferMode::TransferLearning => "transfer_learning",
            TransferMode::FrozenWeights => "frozen_weights",
            TransferMode::RandomInit => "random_init",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            TransferMode::TransferLearning => "Transfer learning",
            TransferMode::FrozenWeights => "Frozen weights",
            TransferMode::RandomInit => "Random initialization",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    S1,
    S2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlan {
    /// `None`: the unit contributes no loss term.
    pub target: Option<Domain>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionPlan {
    pub units: Vec<UnitPlan>,
}

impl SupervisionPlan {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.units.iter().all(|u| u.target.is_none()) {
            return Err(TransferError::Plan("no unit is supervised".into()));
        }
        if self.units.last().and_then(|u| u.target).is_none() {
            return Err(TransferError::Plan("the final unit must be supervised".into()));
        }
        Ok(())
    }

    /// Target joints per unit.
    pub fn unit_targets(&self, split: &JointSubsetSplit) -> Vec<Option<Vec<JointId>>> {
        self.units
            .iter()
            .map(|u| {
                u.target.map(|d| match d {
                    Domain::S1 => split.s1().to_vec(),
                    Domain::S2 => split.s2().to_vec(),
                })
            })
            .collect()
    }
}

/// How transfer mode supervises the transplanted units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Keep the stage-1 heads and keep supervising them on S1.
    #[default]
    S1Targets,
    /// Replace the transplanted heads with fresh S2 heads.
    ReheadS2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledExperiment {
    /// Registry name of the strategy that built this experiment.
    pub strategy: String,
    pub split: JointSubsetSplit,
    pub net: StackedHourglassNet<f32>,
    /// Parameters that training must leave untouched.
    pub frozen: BTreeSet<String>,
    pub plan: SupervisionPlan,
    /// Identifier of the transplanted stage-1 network.
    pub stage1_id: Option<String>,
}

impl AssembledExperiment {
    pub fn validate(&self) -> Result<(), TransferError> {
        self.plan.validate()?;
        if self.plan.units.len() != self.net.arch().num_stacks {
            return Err(TransferError::Plan(format!(
                "{} unit plans for {} stacks",
                self.plan.units.len(),
                self.net.arch().num_stacks
            )));
        }
        if let Some(n) = self.frozen.iter().find(|n| !self.net.params().contains_key(*n)) {
            return Err(TransferError::Invalid(format!("frozen parameter `{n}` does not exist")));
        }
        Ok(())
    }

    pub fn job(&self) -> TrainingJob {
        TrainingJob {
            net: self.net.clone(),
            unit_targets: self.plan.unit_targets(&self.split),
            frozen: self.frozen.clone(),
        }
    }

    /// SHA-256 over the names and values of the frozen parameters.
    pub fn frozen_digest(&self, net: &StackedHourglassNet<f32>) -> [u8; 32] {
        param_digest(net, &self.frozen)
    }
}

/// SHA-256 over `names` (sorted) and the raw bytes of those parameters.
pub fn param_digest(net: &StackedHourglassNet<f32>, names: &BTreeSet<String>) -> [u8; 32] {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        if let Some(t) = net.params().get(n) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

/// A stage-1 network offered for transplanting.
#[derive(Clone, Copy, Debug)]
pub struct Stage1<'a> {
    pub net: &'a StackedHourglassNet<f32>,
    pub id: &'a str,
}

#[derive(Clone, Copy, Debug)]
pub struct AssemblyInput<'a> {
    pub split: &'a JointSubsetSplit,
    pub stage1: Option<Stage1<'a>>,
    /// Stage-2 architecture; `num_output_channels` is ignored (heads are
    /// sized from the split).
    pub arch: &'a HourglassArch,
    pub seed: u64,
    pub head_policy: HeadPolicy,
}

pub trait TransferStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn label(&self) -> &str;
    fn requires_stage1(&self) -> bool;
    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<AssembledExperiment, TransferError>;
}

fn stage2_arch(input: &AssemblyInput<'_>) -> HourglassArch {
    HourglassArch {
        num_output_channels: input.split.s2().len(),
        ..input.arch.clone()
    }
}

fn init_seed(seed: u64) -> u64 {
    rng::labelled(seed, "stage2-init")
}

/// Checks that `stage1` can seed the first units of `arch`.
fn check_fit(stage1: &StackedHourglassNet<f32>, arch: &HourglassArch, s1_len: usize) -> Result<(), TransferError> {
    let a = stage1.arch();
    let mut problems = Vec::new();
    for (name, got, want) in [
        ("depth", a.depth, arch.depth),
        ("base_channels", a.base_channels, arch.base_channels),
        ("input_resolution", a.input_resolution, arch.input_resolution),
        ("heatmap_resolution", a.heatmap_resolution, arch.heatmap_resolution),
    ] {
        if got != want {
            problems.push(format!("{name}: checkpoint {got} vs experiment {want}"));
        }
    }
    if a.num_stacks >= arch.num_stacks {
        problems.push(format!(
            "num_stacks: checkpoint {} must be below experiment {}",
            a.num_stacks, arch.num_stacks
        ));
    }
    if let Some(&c) = stage1.head_channels().iter().find(|&&c| c != s1_len) {
        problems.push(format!("head channels: checkpoint {c} vs |S1| {s1_len}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TransferError::ArchMismatch(problems))
    }
}

/// Builds the stage-2 network and copies every stage-1 parameter and
/// batchnorm buffer into it by name. Returns the net and the copied names.
fn transplant(
    input: &AssemblyInput<'_>,
    strategy: &str,
) -> Result<(StackedHourglassNet<f32>, BTreeSet<String>, String), TransferError> {
    let stage1 = input
        .stage1
        .ok_or_else(|| TransferError::MissingStage1(strategy.to_string()))?;
    let arch = stage2_arch(input);
    let s1 = input.split.s1().len();
    check_fit(stage1.net, &arch, s1)?;
    let k = stage1.net.arch().num_stacks;
    let heads: Vec<usize> = (0..arch.num_stacks)
        .map(|u| if u < k { s1 } else { input.split.s2().len() })
        .collect();
    let mut net = StackedHourglassNet::build_with_heads(&arch, &heads, init_seed(input.seed))?;
    let mut copied = BTreeSet::new();
    for (name, t) in stage1.net.params() {
        let slot = net
            .params_mut()
            .get_mut(name)
            .ok_or_else(|| TransferError::ArchMismatch(vec![format!("parameter `{name}` has no counterpart")]))?;
        if slot.shape() != t.shape() {
            return Err(TransferError::ArchMismatch(vec![format!(
                "parameter `{name}`: checkpoint {:?} vs experiment {:?}",
                t.shape(),
                slot.shape()
            )]));
        }
        *slot = t.clone();
        copied.insert(name.clone());
    }
    for (name, t) in stage1.net.buffers() {
        if let Some(slot) = net.buffers_mut().get_mut(name) {
            *slot = t.clone();
        }
    }
    Ok((net, copied, stage1.id.to_string()))
}

fn plan(n: usize, k: usize, early: Option<Domain>, early_trainable: bool) -> SupervisionPlan {
    SupervisionPlan {
        units: (0..n)
            .map(|u| {
                if u < k {
                    UnitPlan {
                        target: early,
                        trainable: early_trainable,
                    }
                } else {
                    UnitPlan {
                        target: Some(Domain::S2),
                        trainable: true,
                    }
                }
            })
            .collect(),
    }
}

pub struct TransferLearning;
pub struct FrozenWeights;
pub struct RandomInit;

impl TransferStrategy for TransferLearning {
    fn name(&self) -> &str {
        TransferMode::TransferLearning.name()
    }

    fn label(&self) -> &str {
        TransferMode::TransferLearning.label()
    }

    fn requires_stage1(&self) -> bool {
        true
    }

    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<AssembledExperiment, TransferError> {
        let (mut net, _, id) = transplant(input, self.name())?;
        let k = input.stage1.map_or(0, |s| s.net.arch().num_stacks);
        let early = match input.head_policy {
            HeadPolicy::S1Targets => Domain::S1,
            HeadPolicy::ReheadS2 => {
                let seed = rng::labelled(input.seed, "rehead");
                for u in 0..k {
                    net.replace_head(u, input.split.s2().len(), seed)?;
                }
                Domain::S2
            }
        };
        let n = net.arch().num_stacks;
        Ok(AssembledExperiment {
            strategy: self.name().into(),
            split: input.split.clone(),
            net,
            frozen: BTreeSet::new(),
            plan: plan(n, k, Some(early), true),
            stage1_id: Some(id),
        })
    }
}

impl TransferStrategy for FrozenWeights {
    fn name(&self) -> &str {
        TransferMode::FrozenWeights.name()
    }

    fn label(&self) -> &str {
        TransferMode::FrozenWeights.label()
    }

    fn requires_stage1(&self) -> bool {
        true
    }

    /// Freezes the stem and every layer of the transplanted units, heads and
    /// remap layers included. The remap layers of the last transplanted unit
    /// have no stage-1 counterpart; they keep their fresh initialisation.
    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<AssembledExperiment, TransferError> {
        let (net, _, id) = transplant(input, self.name())?;
        let k = input.stage1.map_or(0, |s| s.net.arch().num_stacks);
        let n = net.arch().num_stacks;
        let frozen = early_unit_params(&net, k);
        Ok(AssembledExperiment {
            strategy: self.name().into(),
            split: input.split.clone(),
            net,
            frozen,
            plan: plan(n, k, None, false),
            stage1_id: Some(id),
        })
    }
}

impl TransferStrategy for RandomInit {
    fn name(&self) -> &str {
        TransferMode::RandomInit.name()
    }

    fn label(&self) -> &str {
        TransferMode::RandomInit.label()
    }

    fn requires_stage1(&self) -> bool {
        false
    }

    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<AssembledExperiment, TransferError> {
        let arch = stage2_arch(input);
        let net = StackedHourglassNet::build(&arch, init_seed(input.seed))?;
        Ok(AssembledExperiment {
            strategy: self.name().into(),
            split: input.split.clone(),
            net,
            frozen: BTreeSet::new(),
            plan: plan(arch.num_stacks, 0, None, true),
            stage1_id: None,
        })
    }
}

/// Strategies by name.
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Box<dyn TransferStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    /// The three built-in configurations.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(TransferLearning));
        r.register(Box::new(FrozenWeights));
        r.register(Box::new(RandomInit));
        r
    }

    /// Adds or replaces a strategy under its own name.
    pub fn register(&mut self, s: Box<dyn TransferStrategy>) {
        self.strategies.insert(s.name().to_string(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TransferStrategy, TransferError> {
        self.strategies
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| TransferError::UnknownMode {
                name: name.into(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.strategies.keys().cloned().collect()
    }
}

/// Assembles a built-in configuration.
pub fn assemble(mode: TransferMode, input: &AssemblyInput<'_>) -> Result<AssembledExperiment, TransferError> {
    let exp = StrategyRegistry::builtin().get(mode.name())?.assemble(input)?;
    exp.validate()?;
    Ok(exp)
}

/// Trains the stage-1 network on S1 targets at every unit.
pub fn train_stage1(
    split: &JointSubsetSplit,
    arch: &HourglassArch,
    train: &Dataset,
    val: &Dataset,
    config: &TrainingConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingOutcome, TransferError> {
    if arch.num_output_channels != split.s1().len() {
        return Err(TransferError::Invalid(format!(
            "stage-1 network has {} output channels but |S1| = {}",
            arch.num_output_channels,
            split.s1().len()
        )));
    }
    let net = StackedHourglassNet::build(arch, rng::labelled(config.seed, "stage1-init"))?;
    let job = TrainingJob {
        net,
        unit_targets: vec![Some(split.s1().to_vec()); arch.num_stacks],
        frozen: BTreeSet::new(),
    };
    Ok(run_training(job, train, val, config, observer)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityEntry {
    pub strategy: String,
    pub count: usize,
    /// Closed-form count from the layer inventory for this head layout.
    pub expected: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityReport {
    pub entries: Vec<ParityEntry>,
    /// Largest difference explained by head widths alone.
    pub allowed_delta: usize,
    pub max_delta: usize,
    pub problems: Vec<String>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

fn inventory_count(arch: &HourglassArch, heads: &[usize]) -> usize {
    layer_inventory(arch, heads).iter().map(|l| l.parameter_count()).sum()
}

/// Compares parameter counts across experiments. Counts may differ only by
/// the head/remap size difference between |S1|- and |S2|-wide heads, which is
/// computed from the layer inventory.
pub fn parity_check(experiments: &[&AssembledExperiment]) -> ParityReport {
    let mut problems = Vec::new();
    let mut entries = Vec::new();
    let mut allowed = 0usize;
    let base = experiments.first().map(|e| e.net.arch().clone());
    for e in experiments {
        let arch = e.net.arch();
        if let Some(b) = &base {
            let structural = |a: &HourglassArch| {
                (
                    a.num_stacks,
                    a.depth,
                    a.base_channels,
                    a.input_resolution,
                    a.heatmap_resolution,
                )
            };
            if structural(arch) != structural(b) {
                problems.push(format!(
                    "`{}` uses a different architecture: {:?} vs {:?}",
                    e.strategy, arch, b
                ));
            }
        }
        let expected = inventory_count(arch, e.net.head_channels());
        let count = e.net.parameter_count();
        if count != expected {
            problems.push(format!(
                "`{}` has {count} parameters, layer arithmetic gives {expected} (delta {})",
                e.strategy,
                count.abs_diff(expected)
            ));
        }
        let s1 = e.split.s1().len();
        let s2 = e.split.s2().len();
        let all_s2 = vec![s2; arch.num_stacks];
        let mixed = head_layout_mixed(arch, s1, s2);
        allowed = allowed.max(inventory_count(arch, &all_s2).abs_diff(inventory_count(arch, &mixed)));
        entries.push(ParityEntry {
            strategy: e.strategy.clone(),
            count,
            expected,
        });
    }
    let max_delta = entries
        .iter()
        .flat_map(|a| entries.iter().map(move |b| a.count.abs_diff(b.count)))
        .max()
        .unwrap_or(0);
    if max_delta > allowed {
        problems.push(format!(
            "parameter counts differ by {max_delta}, more than the head-width delta {allowed}"
        ));
    }
    ParityReport {
        entries,
        allowed_delta: allowed,
        max_delta,
        problems,
    }
}

/// Head layout of a transplanted network: the first half of the units carry
/// |S1| heads.
fn head_layout_mixed(arch: &HourglassArch, s1: usize, s2: usize) -> Vec<usize> {
    let k = arch.num_stacks / 2;
    (0..arch.num_stacks).map(|u| if u < k { s1 } else { s2 }).collect()
}

/// Names of the parameters owned by the stem and the first `k` units.
pub fn early_unit_params(net: &StackedHourglassNet<f32>, k: usize) -> BTreeSet<String> {
    net.params()
        .keys()
        .filter(|n| unit_of(n).is_none_or(|u| u < k))
        .cloned()
        .collect()
}

/// Where the split of an experiment comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitRef {
    Tag(String),
    File { file: PathBuf },
}

impl SplitRef {
    pub fn resolve(&self) -> Result<JointSubsetSplit, TransferError> {
        match self {
            SplitRef::Tag(t) => Ok(builtin_split(t)?),
            SplitRef::File { file } => {
                let text = std::fs::read_to_string(file)
                    .map_err(|e| TransferError::Invalid(format!("{}: {e}", file.display())))?;
                JointSubsetSplit::from_json(&text)
                    .map_err(|e| TransferError::Invalid(format!("{}: {e}", file.display())))
            }
        }
    }

    /// Short tag for logs and tables.
    pub fn tag(&self) -> String {
        match self {
            SplitRef::Tag(t) => t.clone(),
            SplitRef::File { file } => file
                .file_stem()
                .map_or_else(|| "custom".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

/// Stage-1 training settings inside an experiment descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    #[serde(default = "default_stage1_stacks")]
    pub num_stacks: usize,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_stage1_stacks() -> usize {
    2
}

/// Everything needed to reproduce one stage-2 run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDescriptor {
    pub mode: TransferMode,
    pub split: SplitRef,
    /// Pre-trained stage-1 checkpoint. Takes precedence over `stage1`.
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub stage1: Option<Stage1Section>,
    /// Stage-2 architecture; `num_output_channels` is ignored.
    pub arch: HourglassArch,
    #[serde(default)]
    pub head_policy: HeadPolicy,
    #[serde(default)]
    pub training: TrainingConfig,
    pub seed: u64,
}

impl ExperimentDescriptor {
    pub fn validate(&self) -> Result<JointSubsetSplit, TransferError> {
        let split = self.split.resolve()?;
        self.arch.validate()?;
        if self.mode != TransferMode::RandomInit && self.stage1_checkpoint.is_none() && self.stage1.is_none() {
            return Err(TransferError::MissingStage1(self.mode.name().into()));
        }
        if let Some(s) = &self.stage1 {
            if s.num_stacks == 0 || s.num_stacks >= self.arch.num_stacks {
                return Err(TransferError::Invalid(format!(
                    "stage-1 num_stacks {} must be between 1 and {}",
                    s.num_stacks,
                    self.arch.num_stacks - 1
                )));
            }
        }
        Ok(split)
    }

    /// Architecture of the stage-1 network described by `stage1`.
    pub fn stage1_arch(&self, split: &JointSubsetSplit) -> Option<HourglassArch> {
        self.stage1.as_ref().map(|s| HourglassArch {
            num_stacks: s.num_stacks,
            num_output_channels: split.s1().len(),
            ..self.arch.clone()
        })
    }

    /// Stage-2 training settings with the descriptor seed applied.
    pub fn stage2_training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    /// Stage-1 training settings with the descriptor seed applied.
    pub fn stage1_training(&self) -> Option<TrainingConfig> {
        self.stage1.as_ref().map(|s| TrainingConfig {
            seed: self.seed,
            ..s.training.clone()
        })
    }
}
