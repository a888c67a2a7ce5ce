//! Speech-enhancement front-ends: one time-domain and one TF-domain family,
//! an identity pass-through, and the pool FAT samples from.

mod metrics;
mod tf_domain;
mod time_domain;
mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use metrics::{neg_si_snr_loss, si_snr, SI_SNR_CLAMP_DB};
pub use tf_domain::{apply_mask, ideal_amplitude_mask, TfDomainEnhancer, TfDomainHyper};
pub use time_domain::{TimeDomainEnhancer, TimeDomainHyper};
pub use train::{
    frontend_loss, load_pairs, mean_improvement, train_frontend, train_frontend_pairs, EpochRecord, FrontendTrainConfig,
    NoisyPair, TrainLog, TrainOutcome,
};

use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{Graph, ParamStore, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TimeDomain,
    TfDomain,
    Identity,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::TimeDomain => "time_domain",
            Family::TfDomain => "tf_domain",
            Family::Identity => "identity",
        }
    }
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSpec {
    pub id: String,
    pub family: Family,
    #[serde(default)]
    pub seen_in_training: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub time_domain: TimeDomainHyper,
    #[serde(default)]
    pub tf_domain: TfDomainHyper,
}

impl FrontendSpec {
    pub fn new(id: impl Into<String>, family: Family, seed: u64) -> Self {
        Self {
            id: id.into(),
            family,
            seen_in_training: false,
            seed,
            sample_rate: DEFAULT_SAMPLE_RATE,
            time_domain: TimeDomainHyper::default(),
            tf_domain: TfDomainHyper::default(),
        }
    }

    pub fn identity() -> Self {
        Self::new("identity", Family::Identity, 0)
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        match self.family {
            Family::TimeDomain => serde_json::to_value(&self.time_domain),
            Family::TfDomain => serde_json::to_value(&self.tf_domain),
            Family::Identity => Ok(serde_json::Value::Object(Default::default())),
        }
        .expect("hyperparameters serialise")
    }
}

#[derive(Clone, Debug)]
enum Model {
    TimeDomain(TimeDomainEnhancer),
    TfDomain(TfDomainEnhancer),
    Identity,
}

/// A front-end with its weights. Immutable once trained; `enhance` is
/// reentrant.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub spec: FrontendSpec,
    pub(crate) store: ParamStore,
    model: Model,
    /// Epochs trained so far (0 = initialisation).
    pub trained_epochs: usize,
}

/// JSON stored next to a front-end checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSidecar {
    pub id: String,
    pub family: Family,
    pub hyperparameters: serde_json::Value,
    pub training_snr_range: Option<[f64; 2]>,
    pub seed: u64,
    pub seen_in_training: bool,
    pub sample_rate: u32,
    pub trained_epochs: usize,
}

impl Frontend {
    /// Freshly initialised front-end, seeded from `spec.seed`.
    pub fn new(spec: FrontendSpec) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(spec.seed, &[rng::tag("frontend-init")]);
        let model = match spec.family {
            Family::TimeDomain => Model::TimeDomain(TimeDomainEnhancer::new(&mut store, spec.time_domain.clone(), &mut r)?),
            Family::TfDomain => Model::TfDomain(TfDomainEnhancer::new(&mut store, spec.tf_domain.clone(), &mut r)?),
            Family::Identity => Model::Identity,
        };
        Ok(Self {
            spec,
            store,
            model,
            trained_epochs: 0,
        })
    }

    pub fn identity() -> Self {
        Self::new(FrontendSpec::identity()).expect("identity front-end")
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.model, Model::Identity)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.spec.sample_rate {
            return Err(Error::invalid(format!(
                "front-end `{}` expects {} Hz input, got {} Hz",
                self.spec.id, self.spec.sample_rate, w.sample_rate
            )));
        }
        Ok(())
    }

    /// Enhanced waveform with the same length and sample rate.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        self.check_rate(noisy)?;
        let out = match &self.model {
            Model::Identity => return Ok(noisy.clone()),
            Model::TimeDomain(m) => {
                let mut g = Graph::inference();
                let y = m.forward(&mut g, &self.store, noisy.samples())?;
                g.value(y).data().to_vec()
            }
            Model::TfDomain(m) => {
                let spec = m.analyse(noisy.samples())?;
                let mut g = Graph::inference();
                let mask = m.mask(&mut g, &self.store, TfDomainEnhancer::features(&spec)?)?;
                apply_mask(&spec, g.value(mask).data())?
            }
        };
        Waveform::new(out, noisy.sample_rate)
    }

    /// The TF mask for `noisy` (TF-domain front-ends only).
    pub fn tf_mask(&self, noisy: &Waveform) -> Result<Vec<f64>> {
        match &self.model {
            Model::TfDomain(m) => {
                let spec = m.analyse(noisy.samples())?;
                let mut g = Graph::inference();
                let mask = m.mask(&mut g, &self.store, TfDomainEnhancer::features(&spec)?)?;
                Ok(g.value(mask).data().to_vec())
            }
            _ => Err(Error::invalid(format!("front-end `{}` has no TF mask", self.spec.id))),
        }
    }

    /// Training loss for one (noisy, clean) pair on `g`.
    pub(crate) fn loss(&self, g: &mut Graph, store: &ParamStore, noisy: &[f64], clean: &[f64]) -> Result<Var> {
        match &self.model {
            Model::Identity => Err(Error::invalid("the identity front-end is not trainable")),
            Model::TimeDomain(m) => {
                let y = m.forward(g, store, noisy)?;
                neg_si_snr_loss(g, y, clean)
            }
            Model::TfDomain(m) => {
                let ns = m.analyse(noisy)?;
                let cs = m.analyse(clean)?;
                let target = ideal_amplitude_mask(&cs, &ns)?;
                let mask = m.mask(g, store, TfDomainEnhancer::features(&ns)?)?;
                let t = g.constant(target);
                let d = g.sub(mask, t)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean(sq))
            }
        }
    }

    pub fn sidecar(&self, training_snr_range: Option<[f64; 2]>) -> FrontendSidecar {
        FrontendSidecar {
            id: self.spec.id.clone(),
            family: self.spec.family,
            hyperparameters: self.spec.hyperparameters(),
            training_snr_range,
            seed: self.spec.seed,
            seen_in_training: self.spec.seen_in_training,
            sample_rate: self.spec.sample_rate,
            trained_epochs: self.trained_epochs,
        }
    }

    /// Writes `<dir>/<id>.fatl` and `<dir>/<id>.json`; returns the checkpoint path.
    pub fn save(&self, dir: &Path, training_snr_range: Option<[f64; 2]>) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(format!("{}.fatl", self.spec.id));
        save_params(&self.store, &ckpt)?;
        let side = dir.join(format!("{}.json", self.spec.id));
        let json = serde_json::to_string_pretty(&self.sidecar(training_snr_range))?;
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
        Ok(ckpt)
    }

    /// Loads the front-end saved under `dir` with the given id.
    pub fn load(dir: &Path, id: &str) -> Result<Self> {
        let side = dir.join(format!("{id}.json"));
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: FrontendSidecar = serde_json::from_str(&text)?;
        let mut spec = FrontendSpec::new(sc.id, sc.family, sc.seed);
        spec.seen_in_training = sc.seen_in_training;
        spec.sample_rate = sc.sample_rate;
        match sc.family {
            Family::TimeDomain => spec.time_domain = serde_json::from_value(sc.hyperparameters)?,
            Family::TfDomain => spec.tf_domain = serde_json::from_value(sc.hyperparameters)?,
            Family::Identity => {}
        }
        let mut fe = Frontend::new(spec)?;
        if !fe.is_identity() {
            load_params(&mut fe.store, &dir.join(format!("{id}.fatl")))?;
        }
        fe.trained_epochs = sc.trained_epochs;
        Ok(fe)
    }
}

/// Uniform index in `0..n` from exactly one 64-bit draw.
pub fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Ordered set of trained front-ends that FAT samples from.
#[derive(Clone, Debug, Default)]
pub struct FrontendPool {
    entries: Vec<Arc<Frontend>>,
}

impl FrontendPool {
    pub fn new(entries: Vec<Arc<Frontend>>) -> Result<Self> {
        for (i, a) in entries.iter().enumerate() {
            if entries[..i].iter().any(|b| b.id() == a.id()) {
                return Err(Error::Config(format!("duplicate front-end id `{}` in pool", a.id())));
            }
        }
        Ok(Self { entries })
    }

    pub fn identity() -> Self {
        Self {
            entries: vec![Arc::new(Frontend::identity())],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Arc<Frontend>] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|f| f.id()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Frontend>> {
        self.entries.iter().find(|f| f.id() == id)
    }

    /// Uniform draw; consumes exactly one RNG output.
    pub fn sample(&self, rng: &mut impl RngCore) -> Result<&Arc<Frontend>> {
        if self.entries.is_empty() {
            return Err(Error::invalid("cannot sample from an empty front-end pool"));
        }
        Ok(&self.entries[uniform_index(rng, self.entries.len())])
    }
}

/// Id of a uniformly drawn pool entry.
pub fn pool_sample(pool: &FrontendPool, rng: &mut impl RngCore) -> Result<String> {
    pool.sample(rng).map(|f| f.id().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn noisy(n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (i as f64 * 0.07).sin() * 0.3 + ((i * 17) % 11) as f64 * 0.005)
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn enhance_preserves_length_and_rate() {
        for family in [Family::TimeDomain, Family::TfDomain, Family::Identity] {
            let fe = Frontend::new(FrontendSpec::new("x", family, 3)).unwrap();
            for n in [700, 1601] {
                let w = noisy(n);
                let y = fe.enhance(&w).unwrap();
                assert_eq!(y.len(), n, "{family:?}");
                assert_eq!(y.sample_rate, 16000);
            }
        }
    }

    #[test]
    fn rate_mismatch_fails() {
        let fe = Frontend::new(FrontendSpec::new("x", Family::TfDomain, 3)).unwrap();
        let w = Waveform::new(vec![0.1; 800], 8000).unwrap();
        assert!(fe.enhance(&w).is_err());
    }

    #[test]
    fn tf_mask_in_unit_interval() {
        let fe = Frontend::new(FrontendSpec::new("x", Family::TfDomain, 5)).unwrap();
        let m = fe.tf_mask(&noisy(2000)).unwrap();
        assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fe = Frontend::new(FrontendSpec::new("td", Family::TimeDomain, 9)).unwrap();
        fe.save(dir.path(), Some([0.0, 5.0])).unwrap();
        let back = Frontend::load(dir.path(), "td").unwrap();
        let w = noisy(900);
        assert_eq!(fe.enhance(&w).unwrap(), back.enhance(&w).unwrap());
    }

    #[test]
    fn pool_of_one_and_empty() {
        let pool = FrontendPool::identity();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(pool_sample(&pool, &mut r).unwrap(), "identity");
        }
        assert!(pool_sample(&FrontendPool::default(), &mut r).is_err());
    }
}
