//! The experiment as a chain of resumable stages under one run directory.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved.toml   manifest.json
//! data/      clean/, noise_train/, noise_test/, mix/   (simulate)
//! frontends/<id>/                                      (train-frontends)
//! targets/   codebook.*, ids/<utt>.bin                 (make-targets)
//! pretrain/<system>/                                   (pretrain)
//! finetune/<system>/                                   (finetune)
//! eval/<system>/report.csv                             (evaluate)
//! report/    eval.csv, table.md, averages.csv          (report)
//! ```

mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

pub use config::{
    fusion_sweep, BaselineSection, CorpusSection, FinetuneSection, RunConfig, RunSection, ScheduleSection, SimulationSection,
    System, TargetsSection,
};
pub use manifest::{list_files, sha256_file, sha256_hex, RunManifest, UnitRecord, MANIFEST_FILE};

use crate::asr::{
    ctc_finetune, evaluate_system, EvalInputs, EvalReport, FrontendColumn, LabeledUtterance, SnrBand, TestSet, TestUtterance,
    Vocab,
};
use crate::audio::synth::SymbolInventory;
use crate::audio::{
    build_noise_corpus, build_speech_corpus, load_wav, read_manifest, resolve, synth_dataset, write_manifest, ManifestEntry,
    NoiseBank, SimulationConfig, Waveform,
};
use crate::encoder::{Provenance, SslModel};
use crate::error::{Error, Result};
use crate::frontends::{train_frontend, Frontend};
use crate::rng::{derive_seed, tag};
use crate::targets::{fit_targets, load_targets, mfcc_features, save_targets, FeatureSequence};
use crate::training::{baseline_pretrain, pretrain, PretrainData, PretrainOutput, Utterance};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    TrainFrontends,
    MakeTargets,
    Pretrain,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::TrainFrontends,
        Stage::MakeTargets,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainFrontends => "train-frontends",
            Stage::MakeTargets => "make-targets",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One resumable piece of a stage, e.g. `pretrain:OA_first`.
#[derive(Clone, Debug)]
pub struct Unit {
    pub name: String,
    pub stage: Stage,
    /// Units that must be complete and current first.
    pub deps: Vec<String>,
    /// Units used when available (front-ends at evaluation time).
    pub optional: Vec<String>,
    /// Settings that affect this unit's outputs.
    pub params: serde_json::Value,
    /// Output directory, relative to the run directory.
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnitStatus {
    Current,
    Pending,
    Blocked { needs: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanLine {
    pub unit: String,
    pub status: UnitStatus,
}

impl fmt::Display for PlanLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            UnitStatus::Current => write!(f, "{:<28} up to date", self.unit),
            UnitStatus::Pending => write!(f, "{:<28} will run", self.unit),
            UnitStatus::Blocked { needs } => write!(f, "{:<28} blocked: needs {needs}", self.unit),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageSummary {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

/// Paths of the simulated data inside a run directory.
#[derive(Clone, Debug)]
pub struct DataPaths {
    root: PathBuf,
}

impl DataPaths {
    pub fn clean(&self, split: &str) -> PathBuf {
        self.root.join("clean").join(format!("{split}.jsonl"))
    }

    pub fn noise_train(&self) -> PathBuf {
        self.root.join("noise_train").join("noise.jsonl")
    }

    pub fn noise_test(&self) -> PathBuf {
        self.root.join("noise_test").join("noise.jsonl")
    }

    pub fn mix(&self, name: &str) -> PathBuf {
        self.root.join("mix").join(format!("{name}.jsonl"))
    }

    pub fn test_band(&self, band: SnrBand) -> PathBuf {
        if band.is_clean() {
            self.mix("test_clean")
        } else {
            self.mix(&format!("test_{}_{}", band.low, band.high))
        }
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    dir: PathBuf,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let dir = cfg.run.dir.clone();
        Self { cfg, dir, force: false }
    }

    /// Rerun units even when their records are current.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn data(&self) -> DataPaths {
        DataPaths {
            root: self.dir.join("data"),
        }
    }

    pub fn bands(&self) -> Vec<SnrBand> {
        let s = &self.cfg.simulation;
        s.clean_test
            .then_some(SnrBand::CLEAN)
            .into_iter()
            .chain(s.test_bands.iter().map(|b| SnrBand::new(b[0], b[1])))
            .collect()
    }

    /// Every unit of the run in execution order.
    pub fn units(&self) -> Result<Vec<Unit>> {
        let c = &self.cfg;
        let mut out = Vec::new();
        let unit = |name: String, stage: Stage, deps: Vec<String>, params: serde_json::Value, output: PathBuf| Unit {
            name,
            stage,
            deps,
            optional: Vec::new(),
            params,
            output,
        };
        out.push(unit(
            "simulate".into(),
            Stage::Simulate,
            vec![],
            json!({
                "seed": c.run.seed,
                "corpus": c.corpus,
                "simulation": c.simulation,
                "frontend_snr": c.frontend_training.snr_range,
                "train_snr": c.fat.snr_range,
            }),
            "data".into(),
        ));
        for f in &c.frontends {
            out.push(unit(
                format!("frontend:{}", f.id),
                Stage::TrainFrontends,
                vec!["simulate".into()],
                json!({ "spec": f, "training": c.frontend_training }),
                Path::new("frontends").join(&f.id),
            ));
        }
        let features_from = match &c.targets.features_from {
            Some(stem) => Some(json!({
                "params": sha256_file(&stem.with_extension("fatl"))?,
                "sidecar": sha256_file(&stem.with_extension("json"))?,
            })),
            None => None,
        };
        let mut targets = c.targets.clone();
        targets.features_from = None;
        out.push(unit(
            "targets".into(),
            Stage::MakeTargets,
            vec!["simulate".into()],
            json!({ "targets": targets, "kmeans": c.kmeans(), "features_from": features_from, "encoder": c.encoder }),
            "targets".into(),
        ));
        let base_deps = vec!["simulate".to_string(), "targets".to_string()];
        for sys in self.pretrained_systems() {
            let name = sys.name();
            let (deps, params) = match sys {
                System::Baseline => (
                    base_deps.clone(),
                    json!({
                        "encoder": c.encoder,
                        "masking": c.masking,
                        "init_seed": c.init_seed(),
                        "input": c.baseline.input,
                        "snr_range": c.fat.snr_range,
                        "schedule": c.baseline_config(),
                    }),
                ),
                _ => {
                    let mut deps = base_deps.clone();
                    deps.push("pretrain:baseline".into());
                    deps.extend(c.fat.pool.iter().map(|id| format!("frontend:{id}")));
                    (
                        deps,
                        json!({
                            "system": name,
                            "fat": c.fat,
                            "imst": c.imst,
                            "schedule": c.continual_config(),
                        }),
                    )
                }
            };
            out.push(unit(
                format!("pretrain:{name}"),
                Stage::Pretrain,
                deps,
                params,
                Path::new("pretrain").join(&name),
            ));
        }
        for sys in c.systems() {
            let name = sys.name();
            out.push(unit(
                format!("finetune:{name}"),
                Stage::Finetune,
                vec!["simulate".into(), format!("pretrain:{name}")],
                json!({ "finetune": c.finetune_config(c.train_seed()) }),
                Path::new("finetune").join(&name),
            ));
        }
        for sys in c.systems() {
            let name = sys.name();
            let mut u = unit(
                format!("evaluate:{name}"),
                Stage::Evaluate,
                vec!["simulate".into(), format!("finetune:{name}")],
                json!({
                    "bands": self.bands().iter().map(|b| [b.low, b.high]).collect::<Vec<_>>(),
                    "columns": c.frontends.iter().map(|f| (&f.id, f.seen_in_training)).collect::<Vec<_>>(),
                }),
                Path::new("eval").join(&name),
            );
            u.optional = c.frontends.iter().map(|f| format!("frontend:{}", f.id)).collect();
            out.push(u);
        }
        out.push(unit(
            "report".into(),
            Stage::Report,
            c.run.systems.iter().map(|s| format!("evaluate:{s}")).collect(),
            json!({ "systems": c.run.systems }),
            "report".into(),
        ));
        Ok(out)
    }

    /// Systems with a pretraining unit: the requested ones plus the baseline
    /// every continued system starts from.
    fn pretrained_systems(&self) -> Vec<System> {
        let mut v = vec![System::Baseline];
        v.extend(self.cfg.systems().into_iter().filter(|s| *s != System::Baseline));
        v
    }

    fn find<'a>(units: &'a [Unit], name: &str) -> &'a Unit {
        units
            .iter()
            .find(|u| u.name == name)
            .expect("dependency names come from the plan")
    }

    /// Input hash of `unit` given the manifest, or `Err(dep)` naming the
    /// first dependency that is not current.
    fn input_hash(&self, units: &[Unit], unit: &Unit, m: &RunManifest) -> std::result::Result<String, String> {
        let mut deps = serde_json::Map::new();
        for d in &unit.deps {
            if self.status(units, Self::find(units, d), m) != UnitStatus::Current {
                return Err(d.clone());
            }
            deps.insert(d.clone(), json!(m.get(d).expect("current").digest()));
        }
        for d in &unit.optional {
            let v = match self.status(units, Self::find(units, d), m) {
                UnitStatus::Current => json!(m.get(d).expect("current").digest()),
                _ => json!("absent"),
            };
            deps.insert(d.clone(), v);
        }
        let body = json!({ "unit": unit.name, "params": unit.params, "deps": deps });
        Ok(sha256_hex(body.to_string().as_bytes()))
    }

    fn status(&self, units: &[Unit], unit: &Unit, m: &RunManifest) -> UnitStatus {
        match self.input_hash(units, unit, m) {
            Err(dep) => UnitStatus::Blocked { needs: dep },
            Ok(h) if m.is_current(&self.dir, &unit.name, &h) => UnitStatus::Current,
            Ok(_) => UnitStatus::Pending,
        }
    }

    /// What running `stages` in order would do, without touching the disk.
    /// Units downstream of one that will run are reported as running too.
    pub fn plan(&self, stages: &[Stage]) -> Result<Vec<(Stage, Vec<PlanLine>)>> {
        let m = RunManifest::load(&self.dir)?;
        let units = self.units()?;
        let mut will_run: Vec<&str> = Vec::new();
        let mut out = Vec::new();
        for &stage in stages {
            let mut lines = Vec::new();
            for u in units.iter().filter(|u| u.stage == stage) {
                let upstream_runs = u.deps.iter().chain(&u.optional).any(|d| will_run.contains(&d.as_str()));
                let status = match self.status(&units, u, &m) {
                    _ if upstream_runs => UnitStatus::Pending,
                    UnitStatus::Current if self.force => UnitStatus::Pending,
                    s => s,
                };
                if status == UnitStatus::Pending {
                    will_run.push(&u.name);
                }
                lines.push(PlanLine {
                    unit: u.name.clone(),
                    status,
                });
            }
            out.push((stage, lines));
        }
        Ok(out)
    }

    /// Writes the resolved config and records it, so every file in the run
    /// directory belongs to a manifest entry.
    fn write_resolved_config(&self, m: &mut RunManifest) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(RESOLVED_CONFIG);
        let mut cfg = self.cfg.clone();
        cfg.run.dir = PathBuf::from(".");
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        m.record(&self.dir, "config", "config", String::new(), &[], &[path])
    }

    /// Runs every unit of `stage` that is not current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary> {
        let mut m = RunManifest::load(&self.dir)?;
        self.write_resolved_config(&mut m)?;
        m.save(&self.dir)?;
        let units = self.units()?;
        let mut summary = StageSummary::default();
        let mut eval_inputs = None;
        for u in units.iter().filter(|u| u.stage == stage) {
            let hash = self.input_hash(&units, u, &m).map_err(|dep| {
                let st = Self::find(&units, &dep).stage;
                Error::MissingStage {
                    stage: st.name().into(),
                    detail: format!("`{}` needs `{dep}`; run `fatlab {st}` first", u.name),
                }
            })?;
            if !self.force && m.is_current(&self.dir, &u.name, &hash) {
                log::info!("{}: up to date", u.name);
                summary.skipped.push(u.name.clone());
                continue;
            }
            let out = self.dir.join(&u.output);
            if out.exists() {
                fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            }
            m.units.remove(&u.name);
            m.save(&self.dir)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            log::info!("{}: running", u.name);
            let t0 = std::time::Instant::now();
            self.run_unit(u, &out, &m, &mut eval_inputs)?;
            m.record(&self.dir, &u.name, stage.name(), hash, &[out], &[])?;
            m.save(&self.dir)?;
            log::info!("{}: done in {:.1?}", u.name, t0.elapsed());
            summary.ran.push(u.name.clone());
        }
        Ok(summary)
    }

    /// Runs all stages in order.
    pub fn run_all(&self) -> Result<Vec<StageSummary>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn run_unit(&self, u: &Unit, out: &Path, m: &RunManifest, eval_inputs: &mut Option<EvalInputs>) -> Result<()> {
        let (_, arg) = u.name.split_once(':').unwrap_or((&u.name, ""));
        match u.stage {
            Stage::Simulate => self.simulate(),
            Stage::TrainFrontends => self.train_frontend(arg, out),
            Stage::MakeTargets => self.make_targets(out),
            Stage::Pretrain => self.pretrain(&System::parse(arg)?, out),
            Stage::Finetune => self.finetune(arg, out),
            Stage::Evaluate => {
                if eval_inputs.is_none() {
                    *eval_inputs = Some(self.eval_inputs(m)?);
                }
                self.evaluate(arg, out, eval_inputs.as_ref().expect("set above"))
            }
            Stage::Report => self.report(out),
        }
    }

    // ------------------------------------------------------------- stages

    fn inventory(&self) -> SymbolInventory {
        SymbolInventory::new(self.cfg.corpus.synth.num_symbols)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.inventory().symbols)
    }

    fn simulate(&self) -> Result<()> {
        let c = &self.cfg;
        let d = self.data();
        let seed = c.run.seed;
        let inv = self.inventory();
        let sr = c.corpus.synth.sample_rate;
        let speech_seed = derive_seed(seed, &[tag("speech")]);
        for (split, n) in [
            ("train", c.corpus.train_utterances),
            ("fe_train", c.corpus.frontend_train_utterances),
            ("fe_val", c.corpus.frontend_val_utterances),
            ("test", c.corpus.test_utterances),
        ] {
            build_speech_corpus(&d.clean(split), split, n, &inv, &c.corpus.synth, speech_seed)?;
        }
        let clips = c.corpus.noise_clips;
        build_noise_corpus(
            &d.noise_train(),
            clips,
            c.corpus.noise_seconds,
            sr,
            derive_seed(seed, &[tag("noise-train")]),
        )?;
        build_noise_corpus(
            &d.noise_test(),
            clips,
            c.corpus.noise_seconds,
            sr,
            derive_seed(seed, &[tag("noise-test")]),
        )?;

        let mix = |split: &str, name: &str, band: [f64; 2], noise: PathBuf| -> Result<()> {
            let summary = synth_dataset(
                &d.clean(split),
                &SimulationConfig {
                    snr_low_db: band[0],
                    snr_high_db: band[1],
                    seed: derive_seed(seed, &[tag("mix"), tag(name)]),
                    noise_corpus: noise,
                    output_manifest: d.mix(name),
                },
            )?;
            if !summary.is_complete() {
                return Err(Error::invalid(format!("simulate `{name}`: skipped {:?}", summary.skipped)));
            }
            Ok(())
        };
        let fe_band = c.frontend_training.snr_range;
        mix("fe_train", "fe_train", fe_band, d.noise_train())?;
        mix("fe_val", "fe_val", fe_band, d.noise_train())?;
        mix("train", "train", c.fat.snr_range, d.noise_train())?;
        for band in self.bands() {
            let path = d.test_band(band);
            if band.is_clean() {
                // clean band: the clean utterances themselves, rebased
                let src = d.clean("test");
                let entries: Vec<ManifestEntry> = read_manifest(&src)?
                    .into_iter()
                    .map(|mut e| {
                        let abs = resolve(&src, &e.audio);
                        e.audio = crate::audio::dataset::pathdiff(path.parent().expect("in mix/"), &abs);
                        e.clean_path = Some(e.audio.clone());
                        e
                    })
                    .collect();
                write_manifest(&path, &entries)?;
            } else {
                let name = path.file_stem().expect("named").to_string_lossy().into_owned();
                mix("test", &name, [band.low, band.high], d.noise_test())?;
            }
        }
        Ok(())
    }

    fn train_frontend(&self, id: &str, out: &Path) -> Result<()> {
        let spec = self
            .cfg
            .frontends
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| Error::Config(format!("no front-end `{id}`")))?;
        let d = self.data();
        let (_, log) = train_frontend(
            spec.clone(),
            &d.mix("fe_train"),
            &d.mix("fe_val"),
            &self.cfg.frontend_training,
            out,
        )?;
        log::info!(
            "front-end {id}: best validation SI-SNR improvement {:.2} dB",
            log.best_val_improvement_db
        );
        Ok(())
    }

    /// `(id, clean waveform, transcript)` of the pretraining split.
    fn clean_train(&self) -> Result<Vec<(String, Waveform, String)>> {
        let path = self.data().clean("train");
        read_manifest(&path)?
            .into_iter()
            .map(|e| {
                let w = load_wav(&resolve(&path, &e.audio))?;
                let t = e
                    .transcript
                    .ok_or_else(|| Error::invalid(format!("`{}` has no transcript", e.id)))?;
                Ok((e.id, w, t))
            })
            .collect()
    }

    fn make_targets(&self, out: &Path) -> Result<()> {
        let c = &self.cfg;
        let train = self.clean_train()?;
        let waves: Vec<(String, Waveform)> = train.into_iter().map(|(id, w, _)| (id, w)).collect();
        let (features, source) = match &c.targets.features_from {
            None => (
                mfcc_features(&waves, &c.targets.mfcc, |n| c.encoder.frames(n))?,
                "mfcc".to_string(),
            ),
            Some(stem) => {
                let (model, _) = SslModel::load(stem)?;
                let layer = c.targets.layer.unwrap_or_else(|| model.config.middle_layer());
                let feats = hidden_features(&model, &waves, layer, |n| c.encoder.frames(n))?;
                (feats, format!("layer{layer}"))
            }
        };
        let (codebook, targets) = fit_targets(&features, &c.kmeans(), &source)?;
        codebook.save(&out.join("codebook"))?;
        for t in &targets {
            save_targets(&out.join("ids"), t)?;
        }
        log::info!("k-means ({source}): final inertia {:.4}", codebook.final_inertia());
        Ok(())
    }

    fn pretrain(&self, sys: &System, out: &Path) -> Result<()> {
        let c = &self.cfg;
        let d = self.data();
        let ids_dir = self.dir.join("targets").join("ids");
        let utterances: Vec<Utterance> = self
            .clean_train()?
            .into_iter()
            .map(|(id, clean, _)| {
                let targets = load_targets(&ids_dir, &id)?.ids;
                Ok(Utterance { id, clean, targets })
            })
            .collect::<Result<_>>()?;
        let noise = NoiseBank::from_manifest(&d.noise_train())?;
        let data = PretrainData {
            utterances: &utterances,
            noise: Some(&noise),
            manifest_hash: sha256_file(&d.clean("train"))?,
        };
        let sink = PretrainOutput {
            dir: out.to_path_buf(),
            system: sys.name(),
            codebook: Some("targets/codebook".into()),
        };
        let outcome = match sys {
            System::Baseline => {
                let mut model = SslModel::new(c.encoder.clone(), None, c.init_seed())?;
                baseline_pretrain(
                    &mut model,
                    &data,
                    c.baseline.input,
                    c.fat.snr_range,
                    &c.masking,
                    &c.baseline_config(),
                    Some(&sink),
                )?
            }
            _ => {
                let (base, _) = SslModel::load(&self.dir.join("pretrain").join("baseline").join("final"))?;
                let mut model = SslModel::new(c.encoder.clone(), sys.fusion(), c.init_seed())?;
                model.inherit(&base)?;
                let pool = c.fat.build_pool(&self.load_frontends(&c.fat.pool)?)?;
                pretrain(
                    &mut model,
                    &data,
                    &c.fat,
                    &pool,
                    Some(&c.imst),
                    &c.masking,
                    &c.continual_config(),
                    Some(&sink),
                )?
            }
        };
        if outcome.skipped_updates > 0 {
            log::warn!(
                "{}: {} updates skipped for non-finite gradients",
                sys.name(),
                outcome.skipped_updates
            );
        }
        Ok(())
    }

    fn load_frontends(&self, ids: &[String]) -> Result<Vec<Arc<Frontend>>> {
        ids.iter()
            .map(|id| Ok(Arc::new(Frontend::load(&self.dir.join("frontends").join(id), id)?)))
            .collect()
    }

    fn finetune(&self, system: &str, out: &Path) -> Result<()> {
        let vocab = self.vocab()?;
        let data: Vec<LabeledUtterance> = self
            .clean_train()?
            .into_iter()
            .map(|(id, w, t)| LabeledUtterance::new(id, w, &t, &vocab))
            .collect::<Result<_>>()?;
        let (mut model, side) = SslModel::load(&self.dir.join("pretrain").join(system).join("final"))?;
        let cfg = self.cfg.finetune_config(self.cfg.train_seed());
        let outcome = ctc_finetune(&mut model, &data, &vocab, &cfg)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l:e}\n"));
        }
        let path = out.join("loss.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let prov = Provenance {
            steps: side.provenance.steps + cfg.steps,
            ..side.provenance
        };
        model.save(
            &out.join("model"),
            &side.masking,
            side.codebook,
            prov,
            Some(vocab.symbols().to_vec()),
        )?;
        Ok(())
    }

    fn eval_inputs(&self, m: &RunManifest) -> Result<EvalInputs> {
        let vocab = self.vocab()?;
        let d = self.data();
        let sets = self
            .bands()
            .into_iter()
            .map(|band| {
                let path = d.test_band(band);
                let utterances = read_manifest(&path)?
                    .into_iter()
                    .map(|e| {
                        let words: Vec<String> = e
                            .transcript
                            .as_deref()
                            .unwrap_or("")
                            .split_whitespace()
                            .map(str::to_string)
                            .collect();
                        for w in &words {
                            vocab.class_of(w)?;
                        }
                        Ok(TestUtterance {
                            noisy: load_wav(&resolve(&path, &e.audio))?,
                            id: e.id,
                            words,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(TestSet { band, utterances })
            })
            .collect::<Result<Vec<_>>>()?;
        let units = self.units()?;
        let columns = self
            .cfg
            .frontends
            .iter()
            .map(|f| {
                let unit = format!("frontend:{}", f.id);
                let current = self.status(&units, Self::find(&units, &unit), m) == UnitStatus::Current;
                let frontend = if current {
                    match Frontend::load(&self.dir.join("frontends").join(&f.id), &f.id) {
                        Ok(fe) => Some(Arc::new(fe)),
                        Err(e) => {
                            log::warn!("front-end `{}` unavailable: {e}", f.id);
                            None
                        }
                    }
                } else {
                    log::warn!("front-end `{}` has not been trained; its cells are absent", f.id);
                    None
                };
                FrontendColumn {
                    id: f.id.clone(),
                    seen: f.seen_in_training,
                    frontend,
                }
            })
            .collect();
        EvalInputs::new(sets, columns)
    }

    fn evaluate(&self, system: &str, out: &Path, inputs: &EvalInputs) -> Result<()> {
        let (model, _) = SslModel::load(&self.dir.join("finetune").join(system).join("model"))?;
        let cells = evaluate_system(&model, system, &self.vocab()?, inputs)?;
        let path = out.join("report.csv");
        fs::write(&path, EvalReport { cells }.to_csv()).map_err(|e| Error::io(&path, e))
    }

    fn report(&self, out: &Path) -> Result<()> {
        let mut report = EvalReport::default();
        for s in &self.cfg.run.systems {
            let path = self.dir.join("eval").join(s).join("report.csv");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            report.extend(EvalReport::from_csv(&text)?);
        }
        let write = |name: &str, body: String| {
            let p = out.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("eval.csv", report.to_csv())?;
        write("averages.csv", report.averages_csv())?;
        write("table.md", report.markdown_table())
    }
}

/// Hidden states of block `layer` for each waveform, truncated to
/// `frames(len)` like the MFCC path.
pub fn hidden_features(
    model: &SslModel,
    waves: &[(String, Waveform)],
    layer: usize,
    frames: impl Fn(usize) -> Option<usize> + Sync,
) -> Result<Vec<(String, FeatureSequence)>> {
    use rayon::prelude::*;
    waves
        .par_iter()
        .map(|(id, w)| {
            let mut f = model.extract_layer(w.samples(), layer)?;
            let n = frames(w.len()).ok_or_else(|| Error::invalid(format!("utterance `{id}` is too short for the encoder")))?;
            if n > f.frames {
                return Err(Error::Shape(format!(
                    "utterance `{id}`: {} hidden frames for {n} target frames",
                    f.frames
                )));
            }
            f.truncate(n);
            Ok((id.clone(), f))
        })
        .collect()
}
