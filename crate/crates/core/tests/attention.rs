use ognet::attention::{hidden_width, AttentionBlock, AttentionKind, ChannelAttention, Guidance, SpatialAttention};
use ognet::layers::{Ctx, Mode};
use ognet::params::{Init, ParamSet};
use ognet::tensor::{Graph, ScaleAxis, Tensor, Var};
use ognet::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_t(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs `f` against a fresh graph holding `ps` as constants.
fn with_ctx<R>(ps: &ParamSet<f64>, f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, ps, &bound, Mode::Eval);
    f(&mut ctx)
}

fn set(ps: &mut ParamSet<f64>, id: ognet::params::ParamId, vals: &[f64]) {
    let t = ps.value_mut(id);
    assert_eq!(t.numel(), vals.len());
    t.data_mut().copy_from_slice(vals);
}

fn zero_all(ps: &mut ParamSet<f64>) {
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    for id in ids {
        ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Pushes the spatial gate of an OGAM block to 1 within double rounding.
fn force_spatial_open(ps: &mut ParamSet<f64>, sa: &SpatialAttention) {
    ps.value_mut(sa.conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    set(ps, sa.conv.bias.unwrap(), &[40.0]);
}

// ------------------------------------------------------- channel attention

#[test]
fn zero_mlp_gives_half_gates() {
    let mut ps = ParamSet::new();
    let ca = ChannelAttention::new(&mut ps, &mut Init::new(1), "ca", 6).unwrap();
    zero_all(&mut ps);
    let mut rng = StdRng::seed_from_u64(2);
    let f = rand_t(&mut rng, &[2, 6, 3, 3]);
    with_ctx(&ps, |ctx| {
        let x = ctx.g.constant(f);
        let w = ca.forward(ctx, x).unwrap();
        assert_eq!(ctx.g.shape(w), &[2, 6, 1, 1]);
        assert!(ctx.g.value(w).data().iter().all(|&v| v == 0.5));
    });
}

#[test]
fn hidden_width_follows_quarter_rule() {
    let mut ps = ParamSet::<f32>::new();
    let ca = ChannelAttention::new(&mut ps, &mut Init::new(1), "ca", 256).unwrap();
    assert_eq!(ps.value(ca.l1.weight).shape(), &[64, 256]);
    assert_eq!(ps.value(ca.l2.weight).shape(), &[256, 64]);
    for k in 1..20 {
        assert_eq!(hidden_width(4 * k), k);
    }
    assert_eq!(hidden_width(3), 1);
    assert_eq!(hidden_width(1), 1);
}

#[test]
fn channel_gates_match_scalar_evaluation() {
    let mut ps = ParamSet::new();
    let ca = ChannelAttention::new(&mut ps, &mut Init::new(1), "ca", 4).unwrap();
    let w1 = [0.5, -0.25, 1.0, 0.75];
    let b1 = [0.1];
    let w2 = [1.0, -2.0, 0.5, 0.25];
    let b2 = [0.0, 0.3, -0.1, 0.2];
    set(&mut ps, ca.l1.weight, &w1);
    set(&mut ps, ca.l1.bias, &b1);
    set(&mut ps, ca.l2.weight, &w2);
    set(&mut ps, ca.l2.bias, &b2);
    let f: Vec<f64> = vec![
        1.0, 2.0, 3.0, 4.0, //
        -1.0, 0.5, 0.0, 2.0, //
        0.2, 0.2, 0.9, -3.0, //
        5.0, -5.0, 1.0, 1.0,
    ];
    let mlp = |p: &[f64]| -> Vec<f64> {
        let h: f64 = (0..4).map(|c| w1[c] * p[c]).sum::<f64>() + b1[0];
        let h = h.max(0.0);
        (0..4).map(|c| w2[c] * h + b2[c]).collect()
    };
    let maxes: Vec<f64> = f.chunks(4).map(|c| c.iter().cloned().fold(f64::MIN, f64::max)).collect();
    let means: Vec<f64> = f.chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
    let (a, b) = (mlp(&maxes), mlp(&means));
    let expected: Vec<f64> = (0..4).map(|c| sig(a[c] + b[c])).collect();
    with_ctx(&ps, |ctx| {
        let x = ctx.g.constant(Tensor::from_f64(&[1, 4, 2, 2], &f).unwrap());
        let w = ca.forward(ctx, x).unwrap();
        for (got, want) in ctx.g.value(w).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    });
}

// ------------------------------------------------------- spatial attention

#[test]
fn spatial_plane_counts_follow_layer_depth() {
    let mut ps = ParamSet::<f64>::new();
    let mut init = Init::new(1);
    let deepest = SpatialAttention::new(&mut ps, &mut init, "s5", 8, &[]).unwrap();
    assert_eq!(ps.value(deepest.conv.weight).shape(), &[1, 2, 7, 7]);
    assert!(deepest.selector.is_none());
    // layer 3 of 5 is guided by layers 4 and 5
    let s3 = SpatialAttention::new(&mut ps, &mut init, "s3", 8, &[8, 4]).unwrap();
    assert_eq!(ps.value(s3.conv.weight).shape(), &[1, 4, 7, 7]);
    let sel = s3.selector.as_ref().unwrap();
    assert_eq!(ps.value(sel.l1.weight).shape(), &[5, 20]);
    assert_eq!(ps.value(sel.l2.weight).shape(), &[2, 5]);
}

#[test]
fn zero_spatial_conv_gives_half_gate() {
    let mut ps = ParamSet::new();
    let sa = SpatialAttention::new(&mut ps, &mut Init::new(1), "s", 3, &[3]).unwrap();
    ps.value_mut(sa.conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rng = StdRng::seed_from_u64(4);
    let (f, o, m) = (
        rand_t(&mut rng, &[2, 3, 4, 4]),
        rand_t(&mut rng, &[2, 1, 2, 2]),
        rand_t(&mut rng, &[2, 3, 2, 2]),
    );
    with_ctx(&ps, |ctx| {
        let (f, o, m) = (ctx.g.constant(f), ctx.g.constant(o), ctx.g.constant(m));
        let t = sa.forward(ctx, f, Guidance { logits: &[o], maps: &[m] }).unwrap();
        assert_eq!(ctx.g.shape(t.gate), &[2, 1, 4, 4]);
        assert!(ctx.g.value(t.gate).data().iter().all(|&v| v == 0.5));
        assert_eq!(ctx.g.shape(t.v.unwrap()), &[2, 1]);
    });
}

#[test]
fn guidance_count_must_match_depth() {
    let mut ps = ParamSet::new();
    let sa = SpatialAttention::new(&mut ps, &mut Init::new(1), "s", 3, &[3, 3]).unwrap();
    with_ctx(&ps, |ctx| {
        let f = ctx.g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let o = ctx.g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let m = ctx.g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let r = sa.forward(ctx, f, Guidance { logits: &[o], maps: &[m] });
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    });
}

// -------------------------------------------------------------- full OGAM

struct Fixture {
    ps: ParamSet<f64>,
    block: AttentionBlock,
    f: Tensor<f64>,
    logits: Vec<Tensor<f64>>,
    maps: Vec<Tensor<f64>>,
}

/// OGAM at layer 3 of 5 on a 4-channel 8×8 map.
fn ogam_fixture(seed: u64) -> Fixture {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let block = AttentionBlock::new(&mut ps, &mut Init::new(seed), "att", AttentionKind::Ogam, 4, &[4, 4]).unwrap();
    let ids: Vec<_> = ps.trainable_ids();
    for id in ids {
        let t = ps.value_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    Fixture {
        f: rand_t(&mut rng, &[2, 4, 8, 8]),
        logits: vec![rand_t(&mut rng, &[2, 1, 4, 4]), rand_t(&mut rng, &[2, 1, 2, 2])],
        maps: vec![rand_t(&mut rng, &[2, 4, 4, 4]), rand_t(&mut rng, &[2, 4, 2, 2])],
        ps,
        block,
    }
}

fn run_block(
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

#[test]
fn ogam_output_matches_compositional_oracle() {
    let fx = ogam_fixture(7);
    with_ctx(&fx.ps, |ctx| {
        let f = ctx.g.constant(fx.f.clone());
        let lv: Vec<Var> = fx.logits.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let mv: Vec<Var> = fx.maps.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let tr = fx.block.trace(ctx, f, Guidance { logits: &lv, maps: &mv }).unwrap();
        let wc = tr.channel_gate.unwrap();
        let ws = tr.spatial.unwrap().gate;
        let a = ctx.g.broadcast_scale(f, wc, ScaleAxis::Channel).unwrap();
        let b = ctx.g.broadcast_scale(a, ws, ScaleAxis::Spatial).unwrap();
        assert_eq!(ctx.g.value(b), ctx.g.value(tr.output));
        assert_eq!(ctx.g.shape(tr.output), &[2, 4, 8, 8]);
        for v in [wc, ws, tr.spatial.unwrap().v.unwrap()] {
            assert!(ctx.g.value(v).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    });
}

#[test]
fn forced_gates_give_identity_and_quarter() {
    let mut fx = ogam_fixture(8);
    let ca = fx.block.channel.clone().unwrap();
    let sa = fx.block.spatial.clone().unwrap();
    // gates at exactly 0.5
    zero_all(&mut fx.ps);
    let out = run_block(&fx.ps, &fx.block, &fx.f, &fx.logits, &fx.maps);
    for (o, i) in out.data().iter().zip(fx.f.data()) {
        assert_eq!(*o, i / 4.0);
    }
    // gates pushed to 1
    ps_force_channel_open(&mut fx.ps, &ca);
    force_spatial_open(&mut fx.ps, &sa);
    let out = run_block(&fx.ps, &fx.block, &fx.f, &fx.logits, &fx.maps);
    for (o, i) in out.data().iter().zip(fx.f.data()) {
        assert!((o - i).abs() < 1e-10);
    }
}

fn ps_force_channel_open(ps: &mut ParamSet<f64>, ca: &ChannelAttention) {
    ps.value_mut(ca.l2.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    // both pooled paths add the bias, so each gets half of the logit
    ps.value_mut(ca.l2.bias).data_mut().iter_mut().for_each(|v| *v = 20.0);
}

#[test]
fn none_is_identity_and_rejects_guidance() {
    let mut ps = ParamSet::new();
    let block = AttentionBlock::new(&mut ps, &mut Init::new(1), "a", AttentionKind::None, 3, &[3]).unwrap();
    assert!(ps.is_empty());
    let mut rng = StdRng::seed_from_u64(1);
    let f = rand_t(&mut rng, &[1, 3, 4, 4]);
    assert_eq!(run_block(&ps, &block, &f, &[], &[]), f);
    for kind in [AttentionKind::None, AttentionKind::Se, AttentionKind::Cbam] {
        let mut ps = ParamSet::new();
        let block = AttentionBlock::new(&mut ps, &mut Init::new(1), "a", kind, 3, &[3]).unwrap();
        with_ctx(&ps, |ctx| {
            let fv = ctx.g.constant(f.clone());
            let o = ctx.g.constant(Tensor::zeros(&[1, 1, 2, 2]));
            let m = ctx.g.constant(Tensor::zeros(&[1, 3, 2, 2]));
            let r = block.forward(ctx, fv, Guidance { logits: &[o], maps: &[m] });
            assert!(matches!(r, Err(Error::InvalidArgument(_))), "{kind}");
        });
    }
}

#[test]
fn cbam_and_deepest_ogam_share_parameter_layout() {
    let mut p1 = ParamSet::<f64>::new();
    let mut p2 = ParamSet::<f64>::new();
    AttentionBlock::new(&mut p1, &mut Init::new(5), "a", AttentionKind::Ogam, 4, &[]).unwrap();
    AttentionBlock::new(&mut p2, &mut Init::new(5), "a", AttentionKind::Cbam, 4, &[]).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn scaling_one_guide_changes_only_its_plane() {
    let fx = ogam_fixture(9);
    let planes = |logits: &[Tensor<f64>]| {
        with_ctx(&fx.ps, |ctx| {
            let f = ctx.g.constant(fx.f.clone());
            let lv: Vec<Var> = logits.iter().map(|t| ctx.g.constant(t.clone())).collect();
            let mv: Vec<Var> = fx.maps.iter().map(|t| ctx.g.constant(t.clone())).collect();
            let tr = fx.block.trace(ctx, f, Guidance { logits: &lv, maps: &mv }).unwrap();
            ctx.g.value(tr.spatial.unwrap().planes).clone()
        })
    };
    let base = planes(&fx.logits);
    let mut scaled = fx.logits.clone();
    scaled[1] = scaled[1].map(|v| v * 3.0);
    let after = planes(&scaled);
    let plane = 64;
    for n in 0..2 {
        for c in 0..4 {
            let r = (n * 4 + c) * plane..(n * 4 + c + 1) * plane;
            for i in r {
                match c {
                    3 => assert!((after.data()[i] - 3.0 * base.data()[i]).abs() < 1e-12),
                    _ => assert_eq!(after.data()[i], base.data()[i]),
                }
            }
        }
    }
}

#[test]
fn attention_kind_parses() {
    for k in AttentionKind::ALL {
        assert_eq!(k.name().parse::<AttentionKind>().unwrap(), k);
    }
    assert!("sa".parse::<AttentionKind>().is_err());
}
