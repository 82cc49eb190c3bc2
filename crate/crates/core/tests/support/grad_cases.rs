// Finite-difference gradient cases shared by the layer tests and the
// acceptance suite. Every case builds its inputs from `seed` and checks all
// differentiable operands (inputs included) in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackvet::attention::{self, CbamParams, CbamVars};
use stackvet::models::{build_model, Mode, ModelId, ModelSpec};
use stackvet::tensor::{finite_diff_check, CheckCoords, GradCheckReport, PoolMode, ReduceScope};
use stackvet::{Graph, Parameter, Result, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const SEEDS: u64 = 20;

pub type Case = fn(u64) -> Result<GradCheckReport>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn param(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Parameter<f64> {
    Parameter::new(name, random(dims, rng))
}

/// `sum(y ⊙ r)` for a fixed random `r`: every output element contributes
/// with its own weight.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.input(r.clone());
    let prod = g.mul(y, rv)?;
    Ok(g.sum(prod))
}

fn load(g: &mut Graph<f64>, p: &[Parameter<f64>]) -> Vec<Var> {
    p.iter().enumerate().map(|(i, q)| g.param(q, i)).collect()
}

fn check(params: &mut [Parameter<f64>], f: impl FnMut(&mut Graph<f64>, &[Parameter<f64>]) -> Result<Var>) -> Result<GradCheckReport> {
    finite_diff_check(params, f, STEP, CheckCoords::All)
}

pub fn conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let k = [1, 3, 5][seed as usize % 3];
    let pad = (seed as usize / 3) % (k / 2 + 1);
    let mut p = vec![
        param("x", &[2, 2, 5, 6], &mut r),
        param("w", &[3, 2, k, k], &mut r),
        param("b", &[3], &mut r),
    ];
    let probe = g_dims_conv(&p, pad);
    let proj = random(&probe, &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let y = g.conv2d(v[0], v[1], Some(v[2]), pad)?;
        project(g, y, &proj)
    })
}

fn g_dims_conv(p: &[Parameter<f64>], pad: usize) -> Vec<usize> {
    let mut g = Graph::new();
    let v = load(&mut g, p);
    let y = g.conv2d(v[0], v[1], Some(v[2]), pad).expect("valid conv");
    g.value(y).dims().to_vec()
}

fn pool_case(seed: u64, mode: PoolMode) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![param("x", &[2, 3, 6, 4], &mut r)];
    let proj = random(&[2, 3, 3, 2], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let y = g.pool2d(v[0], mode)?;
        project(g, y, &proj)
    })
}

pub fn max_pool(seed: u64) -> Result<GradCheckReport> {
    pool_case(seed, PoolMode::Max)
}

pub fn avg_pool(seed: u64) -> Result<GradCheckReport> {
    pool_case(seed, PoolMode::Avg)
}

pub fn affine(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![
        param("x", &[4, 7], &mut r),
        param("w", &[3, 7], &mut r),
        param("b", &[3], &mut r),
    ];
    let proj = random(&[4, 3], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let y = g.affine(v[0], v[1], Some(v[2]))?;
        project(g, y, &proj)
    })
}

pub fn batch_norm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![
        param("x", &[3, 4, 3, 3], &mut r),
        param("gamma", &[4], &mut r),
        param("beta", &[4], &mut r),
    ];
    let proj = random(&[3, 4, 3, 3], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(g, y, &proj)
    })
}

pub fn batch_norm_infer(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![
        param("x", &[2, 3, 2, 2], &mut r),
        param("gamma", &[3], &mut r),
        param("beta", &[3], &mut r),
    ];
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
    let proj = random(&[2, 3, 2, 2], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let y = g.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        project(g, y, &proj)
    })
}

pub fn activations(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![param("x", &[2, 3, 4, 4], &mut r)];
    let proj = random(&[2, 3, 4, 4], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let a = g.relu(v[0]);
        let s = g.sigmoid(v[0]);
        let d = g.dropout(s, 0.25, &mut rng(seed ^ 0xD0), true)?;
        let y = g.add(a, d)?;
        project(g, y, &proj)
    })
}

pub fn reductions(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![param("x", &[2, 3, 4, 5], &mut r), param("s", &[2, 1, 4, 5], &mut r)];
    let proj = random(&[2, 4, 4, 5], &mut r);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let cmax = g.reduce(v[0], ReduceScope::Channel, PoolMode::Max)?;
        let cavg = g.reduce(v[0], ReduceScope::Channel, PoolMode::Avg)?;
        let smax = g.reduce(v[0], ReduceScope::Spatial, PoolMode::Max)?;
        let savg = g.reduce(v[0], ReduceScope::Spatial, PoolMode::Avg)?;
        let gate = g.add(smax, savg)?;
        let scaled = g.mul(v[0], gate)?;
        let spatial = g.add(cmax, cavg)?;
        let spatial = g.mul(spatial, v[1])?;
        let y = g.concat_channels(scaled, spatial)?;
        project(g, y, &proj)
    })
}

fn cbam_params(seed: u64, c: usize, ratio: usize) -> (Vec<Parameter<f64>>, Tensor<f64>, ChaCha8Rng) {
    let mut r = rng(seed);
    let x = param("x", &[2, c, 5, 5], &mut r);
    let cb = CbamParams::<f64>::init(c, ratio, &mut r);
    let proj = random(&[2, c, 5, 5], &mut r);
    let mut p = vec![x];
    p.extend(cb.into_params());
    (p, proj, r)
}

pub fn channel_attention(seed: u64) -> Result<GradCheckReport> {
    let (mut p, proj, _) = cbam_params(seed, 6, 2);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let m = attention::channel_attention(g, v[0], v[1], v[2])?;
        let y = g.mul(v[0], m)?;
        project(g, y, &proj)
    })
}

pub fn spatial_attention(seed: u64) -> Result<GradCheckReport> {
    let (mut p, proj, _) = cbam_params(seed, 3, 1);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let m = attention::spatial_attention(g, v[0], v[3])?;
        let y = g.mul(v[0], m)?;
        project(g, y, &proj)
    })
}

pub fn cbam_block(seed: u64) -> Result<GradCheckReport> {
    let (mut p, proj, _) = cbam_params(seed, 4, 2);
    check(&mut p, |g, p| {
        let v = load(g, p);
        let y = attention::cbam(
            g,
            v[0],
            CbamVars {
                w0: v[1],
                w1: v[2],
                conv7: v[3],
            },
        )?;
        project(g, y, &proj)
    })
}

pub fn bce_head(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = vec![
        param("x", &[6, 5], &mut r),
        param("w", &[1, 5], &mut r),
        param("b", &[1], &mut r),
    ];
    let labels: Vec<f64> = (0..6).map(|i| ((seed as usize + i) % 2) as f64).collect();
    check(&mut p, |g, p| {
        let v = load(g, p);
        let z = g.affine(v[0], v[1], Some(v[2]))?;
        let prob = g.sigmoid(z);
        let prob = g.reshape(prob, &[6])?;
        g.bce(prob, &labels)
    })
}

/// Whole CNN3 with attention in train mode (batch statistics, a fixed
/// dropout mask) under the BCE loss. Samples coordinates of every tensor.
pub fn cnn3_cbam(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let spec = ModelSpec::new(ModelId::Cnn3, 2, true);
    let model = build_model::<f64, _>(&spec, &mut r)?;
    let x = random(&[4, 2, 20, 20], &mut r);
    let labels = vec![1.0, 0.0, 1.0, 0.0];
    let mut params = model.params.clone();
    finite_diff_check(
        &mut params,
        |g, p| {
            let xv = g.input(x.clone());
            let f = model.forward_with(p, g, xv, Mode::Train, &mut rng(seed ^ 0xD0))?;
            g.bce(f.probs, &labels)
        },
        STEP,
        CheckCoords::Sample {
            per_param: 3,
            seed,
        },
    )
}

#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv as Case),
        ("max_pool", max_pool),
        ("avg_pool", avg_pool),
        ("affine", affine),
        ("batch_norm_train", batch_norm),
        ("batch_norm_infer", batch_norm_infer),
        ("relu_sigmoid_dropout", activations),
        ("reductions_concat_mul", reductions),
        ("cbam_channel", channel_attention),
        ("cbam_spatial", spatial_attention),
        ("cbam_block", cbam_block),
        ("bce_head", bce_head),
        ("cnn3_cbam_composite", cnn3_cbam),
    ]
}

pub struct Sweep {
    pub max_rel_error: f64,
    pub seed: u64,
    pub at: Option<(String, usize)>,
    pub checked: usize,
    pub below_floor: usize,
    pub kinks: usize,
}

/// Worst relative error over `SEEDS` seeds and where it happened.
pub fn sweep(case: Case) -> Result<Sweep> {
    let mut out = Sweep {
        max_rel_error: 0.0,
        seed: 0,
        at: None,
        checked: 0,
        below_floor: 0,
        kinks: 0,
    };
    for seed in 0..SEEDS {
        let rep = case(seed)?;
        out.checked += rep.checked;
        out.below_floor += rep.below_floor;
        out.kinks += rep.kinks;
        if out.at.is_none() || rep.max_rel_error > out.max_rel_error {
            out.max_rel_error = rep.max_rel_error;
            out.seed = seed;
            out.at = rep.worst;
        }
    }
    Ok(out)
}
