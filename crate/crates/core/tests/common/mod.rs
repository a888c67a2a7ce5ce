//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fatlab::encoder::EncoderConfig;
use fatlab::numerics::{grad_check, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};
use fatlab::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// A short tone-plus-noise test signal.
pub fn signal(r: &mut impl Rng, len: usize) -> Vec<f64> {
    let f = r.random_range(80.0..900.0);
    (0..len)
        .map(|i| 0.3 * (i as f64 * f * 2.0 * std::f64::consts::PI / 16000.0).sin() + r.random_range(-0.05..0.05))
        .collect()
}

/// Two-block encoder small enough for exhaustive finite differences.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        conv_channels: 8,
        num_blocks: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        k: 5,
        max_frames: 64,
        ..EncoderConfig::default()
    }
}

/// Finite-difference check of `f` with respect to `inputs` and to every
/// parameter in `params`, whose values are replaced by random draws.
pub fn check_with_params<F>(
    f: F,
    inputs: Vec<Tensor>,
    store: &ParamStore,
    params: &[ParamId],
    r: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs;
    for &id in params {
        all.push(uniform(r, store.value(id).shape(), 0.5));
    }
    grad_check(
        |g, vars| {
            for (i, &id) in params.iter().enumerate() {
                g.bind_param(id, vars[n + i]);
            }
            f(g, store, &vars[..n])
        },
        &all,
        1e-5,
    )
}

/// A complete run small enough to finish in seconds: one seen and one
/// unseen front-end, one block, a handful of steps per stage.
pub fn tiny_run_toml(dir: &std::path::Path) -> String {
    format!(
        r#"[run]
dir = "{dir}"
seed = 7
systems = ["baseline", "imst", "OA_first"]

[corpus]
train_utterances = 12
frontend_train_utterances = 6
frontend_val_utterances = 3
test_utterances = 5
noise_clips = 3
noise_seconds = 1.0

[simulation]
test_bands = [[0.0, 5.0]]

[frontend_training]
epochs = 1

[targets]
k = 6
max_iters = 20

[encoder]
num_blocks = 1
model_dim = 16
num_heads = 2
ffn_dim = 32
conv_channels = 8
k = 6

[fat]
pool = ["td"]

[imst]
segment_length_s = 0.2

[baseline]
input = "clean"
steps = 4
batch_size = 2
lr = 1e-3

[pretrain]
steps = 3
batch_size = 2
lr = 1e-3

[finetune]
steps = 4
batch_size = 2
freeze_encoder_steps = 1
warmup_steps = 1

[[frontends]]
id = "td"
family = "time_domain"
seen_in_training = true
seed = 1
time_domain = {{ filters = 8, bottleneck = 8, blocks = 1 }}

[[frontends]]
id = "tf"
family = "tf_domain"
seed = 2
tf_domain = {{ hidden = 8, recurrent = false }}
"#,
        dir = dir.display()
    )
}
