//! Registry of finite-difference gradient checks and RoPE property checks,
//! shared by the test suite and the `grad-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{degree_of_anisotropy, Spacing};
use crate::mim::{mim_loss_graph, sample_mask, VitConfig, VitModel};
use crate::rope::{rope_inner, rope_rotate, RopeParams};
use crate::spad_conv::{adapt_conv, apply_adapted, BaseConvSpec, EncoderHistory};
use crate::tensor::{
    analytic_gradients, check_gradients_at, compare_gradients, numeric_gradients, ConvGeometry,
    GradCheckOutcome, Graph, Tensor, Var,
};
use crate::tokenizer::{
    dual_pdr_loss_graph, reconstruction_loss_graph, PdrConfig, Tokenizer, TokenizerConfig,
};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
pub const ROPE_TRIALS: usize = 100;
pub const ROPE_TOLERANCE: f64 = 1e-9;
/// Coordinates sampled per parameter tensor in model-level checks.
const MODEL_COORDS: usize = 4;

pub const MODULES: [&str; 6] = [
    "tensor",
    "spad_conv",
    "tokenizer",
    "mim",
    "rope",
    "selftest",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Module(String),
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            m if MODULES.contains(&m) => Ok(Scope::Module(m.to_string())),
            other => Err(Error::Config(format!(
                "unknown scope {other:?}; expected all or one of {MODULES:?}"
            ))),
        }
    }
}

impl Scope {
    fn includes(&self, module: &str) -> bool {
        match self {
            // The sign-error double fails by design and only runs when asked for.
            Scope::All => module != "selftest",
            Scope::Module(m) => m == module,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gradient,
    Property,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub module: String,
    pub kind: CheckKind,
    pub instances: usize,
    pub tolerance: f64,
    pub max_error: f64,
    /// Parameter path with the largest error over all instances.
    pub worst_param: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub scope: String,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random gradient-check instance.
pub struct Instance {
    pub params: Vec<(String, Tensor<f64>)>,
    pub build: Build,
    /// Coordinates to difference per parameter; all when `None`.
    pub coords: Option<Vec<Vec<usize>>>,
}

struct GradCase {
    name: &'static str,
    module: &'static str,
    make: fn(&mut ChaCha8Rng) -> Result<Instance>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Entries with magnitude in `[0.2, 1]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape).map(|x| 0.85 + 0.65 * x)
}

/// Scalar readout `Σ c_i y_i` with fixed non-degenerate weights.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let c = Tensor::from_fn(&shape, |i| (1.7 * i as f64 + 0.3).sin() + 0.1);
    let c = g.constant(c);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn named(params: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    params
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t))
        .collect()
}

fn inst(
    params: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Instance {
    Instance {
        params: named(params),
        build: Box::new(build),
        coords: None,
    }
}

macro_rules! unary {
    ($name:ident, $init:ident, $shape:expr, |$g:ident, $x:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng) -> Result<Instance> {
            Ok(inst(vec![$init(rng, &$shape)], |$g, v| {
                let $x = v[0];
                let y = $body;
                readout($g, y)
            }))
        }
    };
}

unary!(case_scale, uniform, [3, 4], |g, x| g.scale(x, 1.7));
unary!(case_add_scalar, uniform, [3, 4], |g, x| g
    .add_scalar(x, -0.4));
unary!(case_exp, uniform, [3, 4], |g, x| g.exp(x));
unary!(case_log_floored, positive, [3, 4], |g, x| g
    .log_floored(x, 1e-12));
unary!(case_xlogx, positive, [3, 4], |g, x| g.xlogx(x));
unary!(case_abs, away_from_zero, [3, 4], |g, x| g.abs(x));
unary!(case_silu, uniform, [3, 4], |g, x| g.silu(x));
unary!(case_gelu, uniform, [3, 4], |g, x| g.gelu(x));
unary!(case_sum, uniform, [3, 4], |g, x| {
    let s = g.sum(x);
    g.mul(s, s)?
});
unary!(case_mean, uniform, [3, 4], |g, x| {
    let s = g.mean(x);
    g.mul(s, s)?
});
unary!(case_sum_axis, uniform, [2, 3, 4], |g, x| g
    .sum_axis(x, 1)?);
unary!(case_reshape, uniform, [2, 3, 4], |g, x| g
    .reshape(x, &[6, 4])?);
unary!(case_permute, uniform, [2, 3, 4], |g, x| g
    .permute(x, &[2, 0, 1])?);
unary!(case_softmax, uniform, [3, 5], |g, x| g.softmax(x));

fn case_add(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[3, 4]), uniform(rng, &[3, 4])],
        |g, v| {
            let y = g.add(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[3, 4]), uniform(rng, &[3, 4])],
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[3, 4]), uniform(rng, &[3, 4])],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[3, 4]), uniform(rng, &[4, 5])],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_batched_matmul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[2, 4, 5])],
        |g, v| {
            let y = g.batched_matmul(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let params = vec![
        uniform(rng, &[3, 6]),
        positive(rng, &[6]),
        uniform(rng, &[6]),
    ];
    Ok(inst(params, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        readout(g, y)
    }))
}

fn case_add_row(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[3, 4]), uniform(rng, &[4])],
        |g, v| {
            let y = g.add_row(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn case_add_channel_bias(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[2, 3, 2, 2, 2]), uniform(rng, &[3])],
        |g, v| {
            let y = g.add_channel_bias(v[0], v[1])?;
            readout(g, y)
        },
    ))
}

fn random_geometry(rng: &mut ChaCha8Rng) -> ConvGeometry {
    let mut k = [0; 3];
    let mut s = [0; 3];
    let mut p = [0; 3];
    for a in 0..3 {
        k[a] = rng.random_range(1..=3);
        s[a] = rng.random_range(1..=2);
        p[a] = rng.random_range(0..k[a]);
    }
    ConvGeometry::new(k, s, p)
}

fn case_conv3d(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let geom = random_geometry(rng);
    let k = geom.kernel;
    let params = vec![
        uniform(rng, &[2, 2, 4, 5, 5]),
        uniform(rng, &[3, 2, k[0], k[1], k[2]]),
    ];
    Ok(inst(params, move |g, v| {
        let y = g.conv3d(v[0], v[1], geom)?;
        readout(g, y)
    }))
}

fn case_conv3d_transposed(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let geom = random_geometry(rng);
    let k = geom.kernel;
    let params = vec![
        uniform(rng, &[2, 2, 2, 3, 3]),
        uniform(rng, &[2, 3, k[0], k[1], k[2]]),
    ];
    Ok(inst(params, move |g, v| {
        let y = g.conv3d_transposed(v[0], v[1], geom)?;
        readout(g, y)
    }))
}

fn case_rotate_pairs(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let angles: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
    Ok(inst(vec![uniform(rng, &[2, 3, 4])], move |g, v| {
        let y = g.rotate_pairs(v[0], cos.clone(), sin.clone())?;
        readout(g, y)
    }))
}

fn case_replace_rows(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mask: Vec<bool> = (0..5).map(|_| rng.random_bool(0.5)).collect();
    Ok(inst(
        vec![uniform(rng, &[5, 3]), uniform(rng, &[3])],
        move |g, v| {
            let y = g.replace_rows(v[0], v[1], &mask)?;
            readout(g, y)
        },
    ))
}

fn case_select_rows(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rows: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    Ok(inst(vec![uniform(rng, &[4, 3])], move |g, v| {
        let y = g.select_rows(v[0], &rows)?;
        readout(g, y)
    }))
}

fn case_sum_pool_depth(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let window = [2, 4][rng.random_range(0..2)];
    Ok(inst(vec![uniform(rng, &[2, 2, 4, 3, 3])], move |g, v| {
        let y = g.sum_pool_depth(v[0], window)?;
        readout(g, y)
    }))
}

fn aniso(da: u32) -> Spacing {
    Spacing::new((1u32 << da) as f64, 1.0, 1.0).expect("valid spacing")
}

fn case_adapted_conv(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let da = rng.random_range(0..=3u32);
    let spacing = aniso(da);
    let (spec, history, x_shape) = match rng.random_range(0..3) {
        0 => (BaseConvSpec::k3s1(2, 2)?, None, [1, 2, 4, 4, 4]),
        1 => (BaseConvSpec::downsample(2, 2, 3)?, None, [1, 2, 4, 4, 4]),
        _ => (
            BaseConvSpec::upsample(2, 2, 2)?,
            Some(EncoderHistory::DepthResampled(da == 0)),
            [1, 2, 2, 2, 2],
        ),
    };
    let a = adapt_conv(&spec, degree_of_anisotropy(&spacing), history, &spacing)?;
    let params = vec![uniform(rng, &x_shape), uniform(rng, &spec.weight_shape())];
    Ok(inst(params, move |g, v| {
        let y = apply_adapted(g, v[0], v[1], &spec, &a)?;
        readout(g, y)
    }))
}

fn case_reconstruction(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let x = uniform(rng, &[1, 1, 2, 3, 3]);
    let offset = away_from_zero(rng, x.shape());
    let x_hat = x.zip_map(&offset, |a, b| a + b)?;
    Ok(inst(vec![x_hat], move |g, v| {
        let xc = g.constant(x.clone());
        reconstruction_loss_graph(g, xc, v[0])
    }))
}

fn case_dual_pdr(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = PdrConfig {
        lambda1: rng.random_range(0.1..2.0),
        lambda2: rng.random_range(0.0..1.0),
    };
    Ok(inst(
        vec![uniform(rng, &[6, 5]).map(|x| 2.0 * x)],
        move |g, v| {
            let p = g.softmax(v[0]);
            dual_pdr_loss_graph(g, p, &cfg)
        },
    ))
}

fn case_soft_quantize(rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(inst(
        vec![uniform(rng, &[4, 5]), uniform(rng, &[5, 3])],
        |g, v| {
            let p = g.softmax(v[0]);
            let e = g.matmul(p, v[1])?;
            readout(g, e)
        },
    ))
}

fn sampled_coords(rng: &mut ChaCha8Rng, params: &[(String, Tensor<f64>)]) -> Vec<Vec<usize>> {
    params
        .iter()
        .map(|(_, t)| {
            let n = MODEL_COORDS.min(t.len());
            rand::seq::index::sample(rng, t.len(), n).into_vec()
        })
        .collect()
}

/// Full objective of a 2-channel toy tokenizer, all parameter tensors.
/// Width 4 keeps every gradient well above finite-difference roundoff; at
/// width 2 the deep stages fall to ~1e-9, where a 1e-5 step cannot resolve
/// four significant digits.
fn case_tokenizer_model(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = TokenizerConfig {
        in_channels: 2,
        widths: vec![4, 4, 4, 4],
        codebook_size: 4,
        code_dim: 2,
        logit_init_gain: 1.0,
        ..Default::default()
    };
    let model = Tokenizer::<f64>::new(cfg, rng.random())?;
    let da = rng.random_range(2..=4u32);
    let spacing = aniso(da);
    let depth = 1usize << (4 - da);
    let x = uniform(rng, &[1, 2, depth, 16, 16]);
    // Keep the target away from the initial reconstruction so a finite
    // difference step never crosses a kink of the absolute error.
    let recon = {
        let mut g = Graph::new();
        let vars = model.params.bind_frozen(&mut g);
        let xc = g.constant(x.clone());
        let f = model.forward(&mut g, &vars, xc, &spacing)?;
        g.value(f.recon).clone()
    };
    let target = recon.zip_map(&away_from_zero(rng, recon.shape()), |a, b| a + b)?;
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let coords = sampled_coords(rng, &params);
    Ok(Instance {
        params,
        build: Box::new(move |g, v| {
            let xc = g.constant(x.clone());
            let tc = g.constant(target.clone());
            Ok(model.objective_with_target(g, v, xc, tc, &spacing)?.0)
        }),
        coords: Some(coords),
    })
}

fn case_mim_loss(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let teacher = uniform(rng, &[6, 5]).map(|x| x.exp());
    let teacher = normalise_rows(teacher, 5);
    let mask = sample_mask([1, 2, 3], 0.55, rng.random())?;
    Ok(inst(
        vec![uniform(rng, &[6, 5]).map(|x| 2.0 * x)],
        move |g, v| {
            let p = g.softmax(v[0]);
            mim_loss_graph(g, p, &teacher, &mask.masked)
        },
    ))
}

fn normalise_rows(mut t: Tensor<f64>, width: usize) -> Tensor<f64> {
    for row in t.data_mut().chunks_mut(width) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Masked cross-entropy through a small ViT, all parameter tensors.
fn case_vit_model(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = VitConfig {
        patch_k: 2,
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_hidden: 8,
        head_hidden: 8,
        vocab: 4,
        ..Default::default()
    };
    let model = VitModel::<f64>::new(cfg, rng.random())?;
    let spacing = aniso(2);
    let x = uniform(rng, &[1, 1, 2, 8, 8]);
    let dims = model.grid_for([2, 8, 8], &spacing)?.0;
    let mask = sample_mask(dims, 0.55, rng.random())?;
    let cells: usize = dims.iter().product();
    let teacher = normalise_rows(uniform(rng, &[cells, 4]).map(|x| x.exp()), 4);
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let coords = sampled_coords(rng, &params);
    Ok(Instance {
        params,
        build: Box::new(move |g, v| {
            let xc = g.constant(x.clone());
            let f = model.forward(g, v, xc, &spacing, std::slice::from_ref(&mask))?;
            mim_loss_graph(g, f.probs, &teacher, &mask.masked)
        }),
        coords: Some(coords),
    })
}

const GRAD_CASES: &[GradCase] = &[
    GradCase {
        name: "add",
        module: "tensor",
        make: case_add,
    },
    GradCase {
        name: "sub",
        module: "tensor",
        make: case_sub,
    },
    GradCase {
        name: "mul",
        module: "tensor",
        make: case_mul,
    },
    GradCase {
        name: "scale",
        module: "tensor",
        make: case_scale,
    },
    GradCase {
        name: "add_scalar",
        module: "tensor",
        make: case_add_scalar,
    },
    GradCase {
        name: "exp",
        module: "tensor",
        make: case_exp,
    },
    GradCase {
        name: "log_floored",
        module: "tensor",
        make: case_log_floored,
    },
    GradCase {
        name: "xlogx",
        module: "tensor",
        make: case_xlogx,
    },
    GradCase {
        name: "abs",
        module: "tensor",
        make: case_abs,
    },
    GradCase {
        name: "silu",
        module: "tensor",
        make: case_silu,
    },
    GradCase {
        name: "gelu",
        module: "tensor",
        make: case_gelu,
    },
    GradCase {
        name: "sum",
        module: "tensor",
        make: case_sum,
    },
    GradCase {
        name: "mean",
        module: "tensor",
        make: case_mean,
    },
    GradCase {
        name: "sum_axis",
        module: "tensor",
        make: case_sum_axis,
    },
    GradCase {
        name: "reshape",
        module: "tensor",
        make: case_reshape,
    },
    GradCase {
        name: "permute",
        module: "tensor",
        make: case_permute,
    },
    GradCase {
        name: "matmul",
        module: "tensor",
        make: case_matmul,
    },
    GradCase {
        name: "batched_matmul",
        module: "tensor",
        make: case_batched_matmul,
    },
    GradCase {
        name: "softmax",
        module: "tensor",
        make: case_softmax,
    },
    GradCase {
        name: "layer_norm",
        module: "tensor",
        make: case_layer_norm,
    },
    GradCase {
        name: "add_row",
        module: "tensor",
        make: case_add_row,
    },
    GradCase {
        name: "add_channel_bias",
        module: "tensor",
        make: case_add_channel_bias,
    },
    GradCase {
        name: "conv3d",
        module: "tensor",
        make: case_conv3d,
    },
    GradCase {
        name: "conv3d_transposed",
        module: "tensor",
        make: case_conv3d_transposed,
    },
    GradCase {
        name: "rotate_pairs",
        module: "tensor",
        make: case_rotate_pairs,
    },
    GradCase {
        name: "replace_rows",
        module: "tensor",
        make: case_replace_rows,
    },
    GradCase {
        name: "select_rows",
        module: "tensor",
        make: case_select_rows,
    },
    GradCase {
        name: "sum_pool_depth",
        module: "spad_conv",
        make: case_sum_pool_depth,
    },
    GradCase {
        name: "adapted_conv",
        module: "spad_conv",
        make: case_adapted_conv,
    },
    GradCase {
        name: "reconstruction_loss",
        module: "tokenizer",
        make: case_reconstruction,
    },
    GradCase {
        name: "dual_pdr_loss",
        module: "tokenizer",
        make: case_dual_pdr,
    },
    GradCase {
        name: "soft_quantize",
        module: "tokenizer",
        make: case_soft_quantize,
    },
    GradCase {
        name: "tokenizer_objective",
        module: "tokenizer",
        make: case_tokenizer_model,
    },
    GradCase {
        name: "mim_loss",
        module: "mim",
        make: case_mim_loss,
    },
    GradCase {
        name: "vit_masked_ce",
        module: "mim",
        make: case_vit_model,
    },
];

/// Names of all registered gradient checks with their modules.
pub fn gradient_checks() -> Vec<(&'static str, &'static str)> {
    GRAD_CASES.iter().map(|c| (c.name, c.module)).collect()
}

fn instance_rng(seed: u64, name: &str, i: usize) -> ChaCha8Rng {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ h ^ ((i as u64) << 32))
}

fn fold(
    name: &str,
    module: &str,
    kind: CheckKind,
    tolerance: f64,
    outcomes: &[GradCheckOutcome],
) -> CheckResult {
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    CheckResult {
        name: name.to_string(),
        module: module.to_string(),
        kind,
        instances: outcomes.len(),
        tolerance,
        max_error: worst.map_or(0.0, |w| w.max_rel_error),
        worst_param: worst.and_then(|w| w.worst.clone()),
        passed: outcomes.iter().all(|o| o.passed),
    }
}

fn run_grad_case(case: &GradCase, seed: u64, instances: usize) -> Result<CheckResult> {
    let mut outcomes = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut rng = instance_rng(seed, case.name, i);
        let inst = (case.make)(&mut rng)?;
        outcomes.push(check_gradients_at(
            &inst.params,
            &inst.build,
            FD_STEP,
            GRAD_TOLERANCE,
            inst.coords.as_deref(),
        )?);
    }
    Ok(fold(
        case.name,
        case.module,
        CheckKind::Gradient,
        GRAD_TOLERANCE,
        &outcomes,
    ))
}

/// Gradient check of a test double whose analytic gradient for
/// `double.weight` has its sign flipped. It must fail and name that path.
pub fn sign_error_self_test(seed: u64) -> Result<CheckResult> {
    let mut rng = instance_rng(seed, "sign_error", 0);
    let params = vec![
        ("double.input".to_string(), uniform(&mut rng, &[3, 4])),
        ("double.weight".to_string(), uniform(&mut rng, &[4, 2])),
    ];
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let y = g.matmul(v[0], v[1])?;
        let y = g.silu(y);
        readout(g, y)
    };
    let mut analytic = analytic_gradients(&params, build)?;
    analytic[1] = analytic[1].map(|x| -x);
    let numeric = numeric_gradients(&params, build, FD_STEP, None);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let outcome = compare_gradients(&names, &analytic, &numeric, GRAD_TOLERANCE);
    Ok(fold(
        "injected_sign_error",
        "selftest",
        CheckKind::Gradient,
        GRAD_TOLERANCE,
        &[outcome],
    ))
}

fn random_position(rng: &mut ChaCha8Rng) -> [i64; 3] {
    [
        rng.random_range(-50..50),
        rng.random_range(-50..50),
        rng.random_range(-50..50),
    ]
}

fn property(name: &str, max_error: f64, tolerance: f64, instances: usize) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        module: "rope".to_string(),
        kind: CheckKind::Property,
        instances,
        tolerance,
        max_error,
        worst_param: None,
        passed: max_error <= tolerance,
    }
}

/// `<R(p)q, R(p')k>` is unchanged when both positions shift by one offset.
pub fn rope_relativity(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = instance_rng(seed, "rope_relativity", 0);
    let params = RopeParams::with_defaults(64)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let q: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (p1, p2, t) = (
            random_position(&mut rng),
            random_position(&mut rng),
            random_position(&mut rng),
        );
        let shift = |p: [i64; 3]| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        let a = rope_inner(&q, p1, &k, p2, &params)?;
        let b = rope_inner(&q, shift(p1), &k, shift(p2), &params)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Rotations preserve the Euclidean norm.
fn rope_norm(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = instance_rng(seed, "rope_norm", 0);
    let params = RopeParams::with_defaults(32)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rope_rotate(&v, random_position(&mut rng), &params)?;
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max((n(&v) - n(&r)).abs());
    }
    Ok(worst)
}

/// Attention scores through the graph's table rotation are unchanged when
/// every cell position is translated.
fn rope_attention_relativity(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = instance_rng(seed, "rope_attention", 0);
    let params = RopeParams::with_defaults(16)?;
    let cells = 6;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let q = uniform(&mut rng, &[cells, 16]);
        let k = uniform(&mut rng, &[cells, 16]);
        let positions: Vec<[i64; 3]> = (0..cells).map(|_| random_position(&mut rng)).collect();
        let t = random_position(&mut rng);
        let shifted: Vec<[i64; 3]> = positions
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        let scores = |pos: &[[i64; 3]]| -> Result<Tensor<f64>> {
            let (c, s) = params.tables(pos);
            let mut g = Graph::<f64>::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let qr = g.rotate_pairs(qv, c.clone(), s.clone())?;
            let kr = g.rotate_pairs(kv, c, s)?;
            let kt = g.permute(kr, &[1, 0])?;
            let out = g.matmul(qr, kt)?;
            Ok(g.value(out).clone())
        };
        let (a, b) = (scores(&positions)?, scores(&shifted)?);
        worst = worst.max(a.zip_map(&b, |x, y| (x - y).abs())?.max_abs());
        // The table rotation must agree with the reference rotation.
        let (c, s) = params.tables(&positions);
        let mut g = Graph::<f64>::new();
        let qv = g.constant(q.clone());
        let qr = g.rotate_pairs(qv, c, s)?;
        for (i, p) in positions.iter().enumerate() {
            let reference = rope_rotate(&q.data()[i * 16..(i + 1) * 16], *p, &params)?;
            let row = &g.value(qr).data()[i * 16..(i + 1) * 16];
            worst = worst.max(
                row.iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
        }
    }
    Ok(worst)
}

/// Run every check in `scope`. Instances are seeded from `seed`.
pub fn run_checks(scope: &Scope, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    for case in GRAD_CASES.iter().filter(|c| scope.includes(c.module)) {
        checks.push(run_grad_case(case, seed, INSTANCES)?);
    }
    if scope.includes("rope") {
        checks.push(property(
            "rope_relativity",
            rope_relativity(seed, ROPE_TRIALS)?,
            ROPE_TOLERANCE,
            ROPE_TRIALS,
        ));
        checks.push(property(
            "rope_norm_preservation",
            rope_norm(seed, ROPE_TRIALS)?,
            1e-12,
            ROPE_TRIALS,
        ));
        checks.push(property(
            "rope_attention_relativity",
            rope_attention_relativity(seed, INSTANCES)?,
            ROPE_TOLERANCE,
            INSTANCES,
        ));
    }
    if scope.includes("selftest") {
        checks.push(sign_error_self_test(seed)?);
    }
    let scope_name = match scope {
        Scope::All => "all".to_string(),
        Scope::Module(m) => m.clone(),
    };
    Ok(VerifyReport {
        scope: scope_name,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse() {
        assert_eq!("all".parse::<Scope>().unwrap(), Scope::All);
        assert_eq!(
            "rope".parse::<Scope>().unwrap(),
            Scope::Module("rope".into())
        );
        assert!("nope".parse::<Scope>().is_err());
    }

    #[test]
    fn rope_scope_runs_only_properties() {
        let r = run_checks(&Scope::Module("rope".into()), 1).unwrap();
        assert!(r
            .checks
            .iter()
            .all(|c| c.kind == CheckKind::Property && c.module == "rope"));
        assert!(r.passed, "{r:#?}");
    }

    #[test]
    fn sign_error_is_caught_and_named() {
        let r = sign_error_self_test(3).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_param.as_deref(), Some("double.weight"));
    }

    #[test]
    fn tensor_primitives_pass() {
        let r = run_checks(&Scope::Module("tensor".into()), 5).unwrap();
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
