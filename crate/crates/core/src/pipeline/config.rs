use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asr::FinetuneConfig;
use crate::audio::synth::SpeechSynthConfig;
use crate::encoder::{EncoderConfig, FusionConfig, MaskingConfig};
use crate::error::{Error, Result};
use crate::frontends::{Family, FrontendSpec, FrontendTrainConfig};
use crate::rng::{derive_seed, tag};
use crate::targets::{KMeansConfig, MfccConfig};
use crate::training::{BaselineInput, FatConfig, ImstConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Run directory, relative to the config file.
    pub dir: PathBuf,
    /// Seed of the data, front-ends and targets.
    pub seed: u64,
    /// Seed of model init, pretraining and fine-tuning; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,
    /// `baseline`, `imst`, or fusion labels such as `OA_first`.
    pub systems: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub train_utterances: usize,
    pub frontend_train_utterances: usize,
    pub frontend_val_utterances: usize,
    pub test_utterances: usize,
    pub noise_clips: usize,
    pub noise_seconds: f64,
    pub synth: SpeechSynthConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            train_utterances: 200,
            frontend_train_utterances: 200,
            frontend_val_utterances: 40,
            test_utterances: 50,
            noise_clips: 6,
            noise_seconds: 3.0,
            synth: SpeechSynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Noisy test bands as `[low, high]` dB.
    pub test_bands: Vec<[f64; 2]>,
    /// Also evaluate on the clean test utterances.
    pub clean_test: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            test_bands: vec![[5.0, 10.0], [0.0, 5.0], [-5.0, 0.0]],
            clean_test: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetsSection {
    pub k: usize,
    pub max_iters: usize,
    pub mfcc: MfccConfig,
    /// Cluster hidden states of this checkpoint (stem, relative to the config
    /// file) instead of MFCCs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features_from: Option<PathBuf>,
    /// Block whose output is clustered; defaults to the middle block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
}

impl Default for TargetsSection {
    fn default() -> Self {
        Self {
            k: 32,
            max_iters: 100,
            mfcc: MfccConfig::default(),
            features_from: None,
            layer: None,
        }
    }
}

/// Step schedule of one pretraining phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ScheduleSection {
    pub fn with_seed(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            seed,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub input: BaselineInput,
    #[serde(flatten)]
    pub schedule: ScheduleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_encoder_steps: usize,
    pub freeze_feature_extractor: bool,
    pub warmup_steps: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            freeze_encoder_steps: d.freeze_encoder_steps,
            freeze_feature_extractor: d.freeze_feature_extractor,
            warmup_steps: d.warmup_steps,
        }
    }
}

/// Every setting of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub frontend_training: FrontendTrainConfig,
    #[serde(default)]
    pub targets: TargetsSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub fat: FatConfig,
    #[serde(default)]
    pub imst: ImstConfig,
    pub baseline: BaselineSection,
    pub pretrain: ScheduleSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    pub frontends: Vec<FrontendSpec>,
}

/// A pretrained system named in `run.systems`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum System {
    Baseline,
    /// Mixed-style inputs, single branch.
    Imst,
    /// FAT with IMST on the aux branch and layer-wise fusion.
    Fused(FusionConfig),
}

impl System {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(System::Baseline),
            "imst" => Ok(System::Imst),
            _ => FusionConfig::grid()
                .into_iter()
                .find(|f| f.label() == name)
                .map(System::Fused)
                .ok_or_else(|| Error::Config(format!("unknown system `{name}` in run.systems"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            System::Baseline => "baseline".into(),
            System::Imst => "imst".into(),
            System::Fused(f) => f.label(),
        }
    }

    pub fn fusion(&self) -> Option<FusionConfig> {
        match self {
            System::Fused(f) => Some(*f),
            _ => None,
        }
    }
}

/// Systems of the full fusion ablation: baseline, IMST only, and the
/// nine variant and placement combinations.
pub fn fusion_sweep() -> Vec<String> {
    ["baseline".to_string(), "imst".to_string()]
        .into_iter()
        .chain(FusionConfig::grid().iter().map(FusionConfig::label))
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `run.dir` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.run.dir.is_relative() {
            cfg.run.dir = base.join(&cfg.run.dir);
        }
        if let Some(p) = &cfg.targets.features_from {
            if p.is_relative() {
                cfg.targets.features_from = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        self.masking.validate()?;
        self.fat.validate()?;
        self.imst.validate()?;
        if self.targets.k != self.encoder.k {
            return bad(format!("targets.k = {} but encoder.k = {}", self.targets.k, self.encoder.k));
        }
        if self.run.systems.is_empty() {
            return bad("run.systems is empty".into());
        }
        let mut seen = Vec::new();
        for s in &self.run.systems {
            System::parse(s)?;
            if seen.contains(&s) {
                return bad(format!("run.systems lists `{s}` twice"));
            }
            seen.push(s);
        }
        for (i, f) in self.frontends.iter().enumerate() {
            if f.family == Family::Identity || f.id.is_empty() || f.id.contains(['/', ',', ' ']) {
                return bad(format!("frontends[{i}]: invalid trained front-end `{}`", f.id));
            }
            if self.frontends[..i].iter().any(|o| o.id == f.id) {
                return bad(format!("frontends: duplicate id `{}`", f.id));
            }
        }
        for id in &self.fat.pool {
            match self.frontends.iter().find(|f| &f.id == id) {
                None => return bad(format!("fat.pool names `{id}`, which is not in [[frontends]]")),
                Some(f) if !f.seen_in_training => {
                    return bad(format!("fat.pool contains `{id}`, which is marked seen_in_training = false"))
                }
                Some(_) => {}
            }
        }
        for b in &self.simulation.test_bands {
            if !(b[0] <= b[1]) || !b[0].is_finite() || !b[1].is_finite() {
                return bad(format!("simulation.test_bands entry {b:?} is not a valid interval"));
            }
        }
        let c = &self.corpus;
        if c.train_utterances < self.baseline.schedule.batch_size.max(1) || c.test_utterances == 0 || c.noise_clips == 0 {
            return bad("corpus sizes must be positive and cover one batch".into());
        }
        for (name, s) in [("baseline", &self.baseline.schedule), ("pretrain", &self.pretrain)] {
            s.with_seed(0).validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.finetune_config(0).validate()?;
        Ok(())
    }

    pub fn systems(&self) -> Vec<System> {
        self.run
            .systems
            .iter()
            .map(|s| System::parse(s).expect("validated"))
            .collect()
    }

    pub fn train_seed(&self) -> u64 {
        self.run.train_seed.unwrap_or(self.run.seed)
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.targets.k,
            max_iters: self.targets.max_iters,
            seed: derive_seed(self.run.seed, &[tag("kmeans")]),
        }
    }

    /// Seed shared by every model's initialisation.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.train_seed(), &[tag("init")])
    }

    pub fn baseline_config(&self) -> PretrainConfig {
        self.baseline
            .schedule
            .with_seed(derive_seed(self.train_seed(), &[tag("baseline")]))
    }

    /// All continued systems share one seed, so they see the same batches,
    /// mixtures and front-end draws.
    pub fn continual_config(&self) -> PretrainConfig {
        self.pretrain.with_seed(derive_seed(self.train_seed(), &[tag("continual")]))
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            steps: f.steps,
            batch_size: f.batch_size,
            lr: f.lr,
            freeze_encoder_steps: f.freeze_encoder_steps,
            freeze_feature_extractor: f.freeze_feature_extractor,
            warmup_steps: f.warmup_steps,
            seed,
        }
    }
}
