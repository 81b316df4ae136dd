//! Attention variants and the loss reduced to one another under forced or
//! shared parameters.

use ognet::attention::{AttentionBlock, AttentionKind, Guidance, SpatialAttention};
use ognet::layers::{Ctx, Mode};
use ognet::losses::{relaxed_f, BETA_SQ};
use ognet::params::{Init, ParamSet};
use ognet::tensor::{Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::oracles::iaf_value;
use super::{max_abs_diff, rand_t, Check};

pub const TOL: f64 = 1e-10;
pub const TRIALS: u64 = 50;

/// Runs `f` against a fresh graph holding `ps` as constants.
pub fn with_ctx<R>(ps: &ParamSet<f64>, f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, ps, &bound, Mode::Eval);
    f(&mut ctx)
}

pub fn run_block(
    ps: &ParamSet<f64>,
    block: &AttentionBlock,
    f: &Tensor<f64>,
    logits: &[Tensor<f64>],
    maps: &[Tensor<f64>],
) -> Tensor<f64> {
    with_ctx(ps, |ctx| {
        let fv = ctx.g.constant(f.clone());
        let lv: Vec<Var> = logits.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let mv: Vec<Var> = maps.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let out = block.forward(ctx, fv, Guidance { logits: &lv, maps: &mv }).unwrap();
        ctx.g.value(out).clone()
    })
}

pub struct Fixture {
    pub ps: ParamSet<f64>,
    pub block: AttentionBlock,
    pub f: Tensor<f64>,
    pub logits: Vec<Tensor<f64>>,
    pub maps: Vec<Tensor<f64>>,
}

/// Output-guided attention at layer 3 of 5 on a 4-channel 8×8 map.
pub fn ogam_fixture(seed: u64) -> Fixture {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let block = AttentionBlock::new(&mut ps, &mut Init::new(seed), "att", AttentionKind::Ogam, 4, &[4, 4]).unwrap();
    randomize(&mut ps, &mut rng);
    Fixture {
        f: rand_t(&mut rng, &[2, 4, 8, 8]),
        logits: vec![rand_t(&mut rng, &[2, 1, 4, 4]), rand_t(&mut rng, &[2, 1, 2, 2])],
        maps: vec![rand_t(&mut rng, &[2, 4, 4, 4]), rand_t(&mut rng, &[2, 4, 2, 2])],
        ps,
        block,
    }
}

pub fn randomize(ps: &mut ParamSet<f64>, rng: &mut StdRng) {
    for id in ps.trainable_ids() {
        ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

/// Pushes the spatial gate to 1 within double rounding.
pub fn force_spatial_open(ps: &mut ParamSet<f64>, sa: &SpatialAttention) {
    ps.value_mut(sa.conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    ps.value_mut(sa.conv.bias.unwrap()).data_mut()[0] = 40.0;
}

pub fn se_vs_open_ogam() -> Check {
    let mut rng = StdRng::seed_from_u64(30);
    let mut err = 0.0f64;
    for trial in 0..TRIALS {
        let mut fx = ogam_fixture(100 + trial);
        let sa = fx.block.spatial.clone().unwrap();
        force_spatial_open(&mut fx.ps, &sa);
        let se = AttentionBlock {
            kind: AttentionKind::Se,
            channel: fx.block.channel.clone(),
            spatial: None,
        };
        let f = rand_t(&mut rng, &[2, 4, 8, 8]);
        let a = run_block(&fx.ps, &fx.block, &f, &fx.logits, &fx.maps);
        let b = run_block(&fx.ps, &se, &f, &[], &[]);
        err = err.max(max_abs_diff(a.data(), b.data()));
    }
    Check::new("se == ogam with open spatial gate", err, TOL)
}

pub fn cbam_vs_deepest_ogam() -> Check {
    let mut rng = StdRng::seed_from_u64(31);
    let mut err = 0.0f64;
    for trial in 0..TRIALS {
        let mut ps = ParamSet::new();
        let ogam = AttentionBlock::new(&mut ps, &mut Init::new(trial), "a", AttentionKind::Ogam, 4, &[]).unwrap();
        randomize(&mut ps, &mut rng);
        let cbam = AttentionBlock {
            kind: AttentionKind::Cbam,
            ..ogam.clone()
        };
        let f = rand_t(&mut rng, &[2, 4, 6, 6]);
        let a = run_block(&ps, &ogam, &f, &[], &[]);
        let b = run_block(&ps, &cbam, &f, &[], &[]);
        err = err.max(max_abs_diff(a.data(), b.data()));
    }
    Check::new("cbam == deepest-layer ogam", err, TOL)
}

pub fn full_mask_iaf() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    let mut err = 0.0f64;
    for _ in 0..TRIALS {
        let n = rng.gen_range(4..64);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mask = vec![true; n];
        let v = iaf_value(&p, &g, &mask, BETA_SQ).unwrap();
        err = err.max((v - (1.0 - relaxed_f(&p, &g, &mask, BETA_SQ).unwrap())).abs());
    }
    Check::new("full-mask loss == 1 - relaxed F", err, TOL)
}

pub fn suite() -> Vec<Check> {
    vec![se_vs_open_ogam(), cbam_vs_deepest_ogam(), full_mask_iaf()]
}
