//! Central finite-difference checks for every differentiable op, the full
//! output-guided attention block, both losses and a miniature network.

use ognet::attention::{AttentionBlock, AttentionKind, Guidance};
use ognet::layers::{Ctx, Mode};
use ognet::losses::{iaf_loss, side_cross_entropy, total_loss, LossWeights, BETA_SQ};
use ognet::network::{Architecture, DecoderLayerSpec, NetworkConfig, SaliencyOutputs, StageSpec};
use ognet::params::{Init, ParamKind, ParamSet};
use ognet::tensor::gradcheck::{grad_check_resampled, GradCheckReport, STEP};
use ognet::tensor::{Graph, ScaleAxis, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{binary, rand_t, Check};

/// Limit for op graphs without normalization; batch statistics amplify
/// finite-difference round-off.
pub const LINEAR_TOL: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

fn to_check(name: &str, tol: f64, r: ognet::Result<GradCheckReport>) -> Check {
    match r {
        Ok(rep) => {
            let mut c = Check::new(name, rep.max_rel_error, tol);
            c.note = Some(format!("({} elements)", rep.checked));
            c
        }
        Err(e) => Check::failed(name, tol, e),
    }
}

fn check(
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> ognet::Result<Var>,
    tol: f64,
) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let r = grad_check_resampled(&mut rng, |r| shapes.iter().map(|s| rand_t(r, s)).collect(), build, STEP, 20);
    to_check(name, tol, r)
}

/// Reduces a map to a scalar through fixed random weights so that every
/// output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> ognet::Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let w = g.constant(Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn ops() -> Vec<Check> {
    let mut out = Vec::new();
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 1, 3)] {
        out.push(check(
            &format!("conv2d k{k} s{s} p{p}"),
            11,
            &[&[2, 2, 5, 5], &[3, 2, k, k], &[3]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), s, p)?;
                weighted_sum(g, y, 1)
            },
            LINEAR_TOL,
        ));
    }
    for &(o, k, p) in &[(1, 7, 3), (2, 3, 1), (1, 3, 0)] {
        out.push(check(
            &format!("conv2d narrow o{o} k{k}"),
            25,
            &[&[2, 3, 6, 5], &[o, 3, k, k], &[o]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, p)?;
                weighted_sum(g, y, 14)
            },
            LINEAR_TOL,
        ));
    }
    out.push(check(
        "linear+sigmoid",
        12,
        &[&[3, 4], &[2, 4], &[2]],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let s = g.sigmoid(y)?;
            weighted_sum(g, s, 2)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "batchnorm train",
        13,
        &[&[2, 3, 3, 3], &[3], &[3]],
        |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 3)
        },
        TOL,
    ));
    out.push(check(
        "batchnorm eval",
        14,
        &[&[2, 3, 3, 3], &[3], &[3]],
        |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            weighted_sum(g, y, 4)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "relu",
        15,
        &[&[1, 2, 4, 4]],
        |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 5)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "max_pool",
        16,
        &[&[2, 2, 4, 6]],
        |g, v| {
            let y = g.max_pool(v[0], 2)?;
            weighted_sum(g, y, 6)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "avg_pool",
        17,
        &[&[2, 2, 5, 4]],
        |g, v| {
            let y = g.avg_pool(v[0], 2)?;
            weighted_sum(g, y, 7)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "global max+avg pool",
        18,
        &[&[2, 3, 3, 4]],
        |g, v| {
            let a = g.global_max_pool(v[0])?;
            let b = g.global_avg_pool(v[0])?;
            let s = g.add(a, b)?;
            weighted_sum(g, s, 8)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "bilinear resize",
        19,
        &[&[1, 2, 3, 4]],
        |g, v| {
            let y = g.bilinear_resize(v[0], 7, 5)?;
            weighted_sum(g, y, 9)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "concat+slice",
        20,
        &[&[2, 1, 3, 3], &[2, 2, 3, 3]],
        |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let s = g.slice_channels(c, 1, 2)?;
            let y = g.mul(s, s)?;
            weighted_sum(g, y, 10)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "channel max/mean planes",
        21,
        &[&[2, 3, 3, 3]],
        |g, v| {
            let y = g.channel_stats(v[0])?;
            weighted_sum(g, y, 11)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "broadcast scale",
        22,
        &[&[2, 3, 2, 3], &[2, 3, 1, 1], &[2, 1, 2, 3], &[2, 3]],
        |g, v| {
            let a = g.broadcast_scale(v[0], v[1], ScaleAxis::Channel)?;
            let b = g.broadcast_scale(a, v[2], ScaleAxis::Spatial)?;
            let c = g.broadcast_scale(b, v[3], ScaleAxis::Scalar)?;
            weighted_sum(g, c, 12)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "elementwise and reductions",
        23,
        &[&[2, 3], &[2, 3]],
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[0])?;
            let s = g.mul_scalar(m, -1.5)?;
            let r = g.reshape(s, &[3, 2])?;
            let mean = g.mean(r)?;
            let sum = g.sum(r)?;
            g.add(mean, sum)
        },
        LINEAR_TOL,
    ));
    out.push(check(
        "fan-out accumulation",
        24,
        &[&[1, 2, 3, 3], &[2, 2, 3, 3]],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let s = g.sigmoid(y)?;
            // `s` feeds two branches that rejoin
            let a = g.mul(s, s)?;
            let b = g.add(a, s)?;
            weighted_sum(g, b, 13)
        },
        LINEAR_TOL,
    ));
    out
}

/// Output-guided attention at layer 3 of 5 on a 4-channel 8×8 map, with
/// respect to its parameters, the feature map and both guidance inputs.
pub fn ogam() -> Check {
    let mut structure = ParamSet::<f64>::new();
    let block = AttentionBlock::new(&mut structure, &mut Init::new(10), "att", AttentionKind::Ogam, 4, &[4, 4]).unwrap();
    let n_params = structure.trainable_ids().len();
    let mut rng = StdRng::seed_from_u64(11);
    let r = grad_check_resampled(
        &mut rng,
        |r| {
            let mut leaves: Vec<Tensor<f64>> = structure
                .trainable_ids()
                .iter()
                .map(|&id| rand_t(r, structure.value(id).shape()).map(|v| v * 0.5))
                .collect();
            for s in [&[2, 4, 8, 8][..], &[2, 1, 4, 4], &[2, 1, 2, 2], &[2, 4, 4, 4], &[2, 4, 2, 2]] {
                leaves.push(rand_t(r, s));
            }
            leaves
        },
        |g, v| {
            let bound = structure.bind_with(g, &v[..n_params])?;
            let mut ctx = Ctx::new(g, &structure, &bound, Mode::Eval);
            let out = block.forward(
                &mut ctx,
                v[n_params],
                Guidance {
                    logits: &v[n_params + 1..n_params + 3],
                    maps: &v[n_params + 3..n_params + 5],
                },
            )?;
            weighted_sum(ctx.g, out, 99)
        },
        STEP,
        30,
    );
    to_check("ogam block", TOL, r)
}

fn loss_check(name: &str, seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> ognet::Result<Var>) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let r = grad_check_resampled(
        &mut rng,
        |r| vec![Tensor::from_fn(&[2, 1, 4, 4], |_| r.gen_range(-2.0..2.0))],
        build,
        STEP,
        5,
    );
    to_check(name, TOL, r)
}

pub fn losses() -> Vec<Check> {
    let mut rng = StdRng::seed_from_u64(7);
    let gt8 = binary(&mut rng, &[2, 1, 8, 8]);
    let gt = binary(&mut rng, &[2, 1, 4, 4]);
    let mask: Vec<bool> = (0..32).map(|_| rng.gen_bool(0.6)).collect();
    let weights = LossWeights {
        alpha: vec![2.0, 0.5],
        beta_w: 3.0,
        beta_sq: BETA_SQ,
    };
    vec![
        loss_check("side cross-entropy (upsampled)", 8, |g, v| side_cross_entropy(g, v[0], &gt8)),
        loss_check("intractable-area F loss", 10, |g, v| {
            let p = g.sigmoid(v[0])?;
            Ok(iaf_loss(g, p, &gt, &mask, BETA_SQ)?.unwrap())
        }),
        loss_check("total loss", 12, |g, v| {
            let deep = g.max_pool(v[0], 2)?;
            let logits = vec![v[0], deep];
            let probs = vec![g.sigmoid(v[0])?, g.sigmoid(deep)?];
            let out = SaliencyOutputs { logits, probs };
            Ok(total_loss(g, &out, &gt, Some(&mask), &weights)?.total)
        }),
    ]
}

/// Two layers with 4-channel stages, small enough for finite differences.
pub fn miniature_config(attention: AttentionKind) -> NetworkConfig {
    let row = DecoderLayerSpec {
        conv_e: 2,
        conv_d: 2,
        conv_1: 4,
        conv_2: 4,
    };
    NetworkConfig {
        in_channels: 3,
        backbone: vec![StageSpec { channels: 4, convs: 1 }; 2],
        decoder: vec![row; 2],
        residual: true,
        attention,
        conv_e_size: 3,
    }
}

/// Total training loss of the miniature network in train mode, with
/// respect to every trainable parameter and the input image.
pub fn miniature(attention: AttentionKind) -> Check {
    let cfg = miniature_config(attention);
    let mut structure = ParamSet::<f64>::new();
    let arch = Architecture::build(&cfg, &mut structure, 1).unwrap();
    let ids = structure.trainable_ids();
    let n_params = ids.len();
    let mut rng = StdRng::seed_from_u64(2);
    let gt = Tensor::from_fn(&[2, 1, 8, 8], |i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 });
    let mask: Vec<bool> = (0..128).map(|i| i % 3 != 0).collect();
    let weights = LossWeights {
        alpha: vec![1.0, 0.5],
        beta_w: 0.5,
        beta_sq: 0.3,
    };
    let r = grad_check_resampled(
        &mut rng,
        |r| {
            let mut leaves: Vec<Tensor<f64>> = ids
                .iter()
                .map(|&id| {
                    let p = structure.get(id);
                    match p.kind {
                        ParamKind::NormScale => Tensor::from_fn(p.value.shape(), |_| r.gen_range(0.5..1.5)),
                        _ => Tensor::from_fn(p.value.shape(), |_| r.gen_range(-0.5..0.5)),
                    }
                })
                .collect();
            leaves.push(Tensor::from_fn(&[2, 3, 8, 8], |_| r.gen_range(0.0..1.0)));
            leaves
        },
        |g, v| {
            let bound = structure.bind_with(g, &v[..n_params])?;
            let mut ctx = Ctx::new(g, &structure, &bound, Mode::Train);
            let out = arch.forward(&mut ctx, v[n_params])?;
            Ok(total_loss(ctx.g, &out, &gt, Some(&mask), &weights)?.total)
        },
        STEP,
        40,
    );
    to_check(&format!("miniature network ({attention})"), TOL, r)
}

pub fn suite() -> Vec<Check> {
    let mut all = ops();
    all.push(ogam());
    all.extend(losses());
    all.extend(AttentionKind::ALL.map(miniature));
    all
}
