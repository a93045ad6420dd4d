use proptest::prelude::*;

use super::*;
use crate::gradcheck::{grad_check, grad_check_with_params};
use crate::seeded_rng;
use crate::testutil::{concat0, hadamard, l2_channels, naive_conv2d};

fn conv_ref(x: &Tensor, conv: &Conv2d) -> Tensor {
    naive_conv2d(x, &conv.spec, conv.weight.value(), conv.bias.as_ref().map(|b| b.value()))
}

fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (_, h, w) = x.chw().unwrap();
    Tensor::new([len, h, w], x.data()[start * h * w..(start + len) * h * w].to_vec()).unwrap()
}

fn dak_ref(a: f64) -> f64 {
    if a >= 0.0 {
        a + 1.0
    } else {
        a.exp()
    }
}

/// MKOI composed from plain tensor arithmetic and the nested-loop conv.
fn mkoi_ref(a: &Tensor, v: &Tensor, p: &MkoiParams) -> Tensor {
    let expanded = conv_ref(a, &p.expand);
    let mut start = 0;
    let mut prods = Vec::new();
    for (m, &width) in mkoi_group_widths(p.channels).iter().enumerate() {
        let grp = slice_channels(&expanded, start, width);
        start += width;
        let vb = conv_ref(v, &p.branches[m]);
        prods.push(hadamard(&grp.map(dak_ref), &vb));
    }
    conv_ref(&concat0(&prods), &p.fuse)
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let out = f(&mut g).unwrap();
    g.value(out).clone()
}

#[test]
fn qkv_projection_splits_channels() {
    let mut rng = seeded_rng(1);
    let x = Tensor::randn([4, 3, 5], &mut rng);
    let proj = Conv2d::new(ConvSpec::new(4, 12, 1), &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x);
    let t = project_qkv(&mut g, xv, &proj).unwrap();
    for v in [t.q, t.k, t.v] {
        assert_eq!(g.shape(v), &[4, 3, 5]);
    }
}

#[test]
fn qkv_projection_of_zero_input_is_zero() {
    let mut rng = seeded_rng(2);
    let proj = Conv2d::new(ConvSpec::new(4, 12, 1), &mut rng);
    let mut g = Graph::new();
    let xv = g.input(Tensor::zeros([4, 2, 2]));
    let t = project_qkv(&mut g, xv, &proj).unwrap();
    for v in [t.q, t.k, t.v] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn stacked_identity_projection_copies_input() {
    let mut rng = seeded_rng(3);
    let c = 4;
    let x = Tensor::randn([c, 3, 3], &mut rng);
    let mut proj = Conv2d::zeroed(ConvSpec::new(c, 3 * c, 1));
    for o in 0..3 * c {
        proj.weight.value_mut().data_mut()[o * c + o % c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let t = project_qkv(&mut g, xv, &proj).unwrap();
    for v in [t.q, t.k, t.v] {
        assert_eq!(g.value(v), &x);
    }
}

#[test]
fn projection_with_wrong_width_is_rejected() {
    let mut rng = seeded_rng(4);
    let proj = Conv2d::new(ConvSpec::new(4, 8, 1), &mut rng);
    let mut g = Graph::new();
    let xv = g.input(Tensor::ones([4, 2, 2]));
    assert!(project_qkv(&mut g, xv, &proj).is_err());
}

#[test]
fn hadamard_attention_matches_brute_force() {
    let mut rng = seeded_rng(5);
    for _ in 0..10 {
        let q = Tensor::randn([6, 4, 5], &mut rng);
        let k = Tensor::randn([6, 4, 5], &mut rng);
        let got = eval(|g| {
            let (q, k) = (g.input(q.clone()), g.input(k.clone()));
            hadamard_attention(g, q, k)
        });
        let want = hadamard(&l2_channels(&q), &l2_channels(&k));
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }
}

#[test]
fn hadamard_attention_of_equal_inputs_is_non_negative() {
    let mut rng = seeded_rng(6);
    let q = Tensor::randn([4, 3, 3], &mut rng);
    let got = eval(|g| {
        let (a, b) = (g.input(q.clone()), g.input(q.clone()));
        hadamard_attention(g, a, b)
    });
    assert!(got.data().iter().all(|&x| x >= 0.0));
    // Squared unit vectors sum to one over channels.
    let (c, h, w) = got.chw().unwrap();
    for p in 0..h * w {
        let s: f64 = (0..c).map(|k| got.data()[k * h * w + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn hadamard_attention_with_zero_key_is_zero() {
    let mut rng = seeded_rng(7);
    let got = eval(|g| {
        let q = g.input(Tensor::randn([4, 2, 3], &mut rng));
        let k = g.input(Tensor::zeros([4, 2, 3]));
        hadamard_attention(g, q, k)
    });
    assert!(got.data().iter().all(|&x| x == 0.0));
}

#[test]
fn hadamard_attention_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let q = g.input(Tensor::ones([4, 2, 3]));
    let k = g.input(Tensor::ones([4, 3, 2]));
    assert!(hadamard_attention(&mut g, q, k).is_err());
}

#[test]
fn dak_values() {
    let got = eval(|g| {
        let a = g.input(Tensor::new([3], vec![0.0, 1.5, -1.0]).unwrap());
        dak(g, a)
    });
    assert_eq!(got.data()[0], 1.0);
    assert_eq!(got.data()[1], 2.5);
    assert!((got.data()[2] - (-1.0f64).exp()).abs() < 1e-15);
}

#[test]
fn dak_is_continuous_at_zero() {
    for eps in [1e-3, 1e-6, 1e-9] {
        assert!((Unary::Dak.eval(eps) - 1.0).abs() <= 2.0 * eps);
        assert!((Unary::Dak.eval(-eps) - 1.0).abs() <= 2.0 * eps);
    }
}

proptest! {
    #[test]
    fn dak_is_strictly_positive(a in -700.0f64..700.0) {
        prop_assert!(Unary::Dak.eval(a) > 0.0);
    }

    #[test]
    fn decoupling_identity_holds_pointwise(a in -30.0f64..30.0, v in -10.0f64..10.0) {
        let lhs = Unary::Dak.eval(a) * v;
        let rhs = v + Unary::Elu.eval(a) * v;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}

#[test]
fn softmax_kernel_normalises_each_channel() {
    let mut rng = seeded_rng(8);
    let got = eval(|g| {
        let a = g.input(Tensor::randn([3, 4, 5], &mut rng));
        apply_kernel(g, a, AttentionKernel::Softmax)
    });
    for c in 0..3 {
        let s: f64 = got.data()[c * 20..(c + 1) * 20].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mkoi_widths_for_eight_channels() {
    assert_eq!(mkoi_group_widths(8), [8, 4, 2]);
    assert_eq!(mkoi_group_widths(8).iter().sum::<usize>(), 14);
    assert_eq!((0..3).map(mkoi_kernel_size).collect::<Vec<_>>(), vec![3, 5, 7]);
    let p = MkoiParams::new(8, AttentionKernel::Dak, &mut seeded_rng(9)).unwrap();
    assert_eq!(p.expand.spec.out_channels, 14);
    assert_eq!(p.fuse.spec.in_channels, 14);
}

#[test]
fn mkoi_rejects_channels_not_divisible_by_four() {
    assert!(MkoiParams::new(6, AttentionKernel::Dak, &mut seeded_rng(10)).is_err());
}

#[test]
fn mkoi_matches_composed_reference() {
    let mut rng = seeded_rng(11);
    let p = MkoiParams::new(8, AttentionKernel::Dak, &mut rng).unwrap();
    let a = Tensor::randn([8, 5, 6], &mut rng);
    let v = Tensor::randn([8, 5, 6], &mut rng);
    let got = eval(|g| {
        let (a, v) = (g.input(a.clone()), g.input(v.clone()));
        mkoi(g, a, v, &p)
    });
    assert!(got.max_abs_diff(&mkoi_ref(&a, &v, &p)).unwrap() <= 1e-10);
}

#[test]
fn mkoi_of_zero_values_is_zero() {
    let mut rng = seeded_rng(12);
    let p = MkoiParams::new(8, AttentionKernel::Dak, &mut rng).unwrap();
    let mut p0 = p.clone();
    // Fuse bias is the only non-vanishing path; it starts at zero.
    p0.fuse.bias.as_mut().unwrap().fill(0.0);
    let got = eval(|g| {
        let a = g.input(Tensor::randn([8, 3, 4], &mut rng));
        let v = g.input(Tensor::zeros([8, 3, 4]));
        mkoi(g, a, v, &p0)
    });
    assert!(got.data().iter().all(|&x| x == 0.0));
}

#[test]
fn decoupled_mkoi_matches_product_form() {
    let mut rng = seeded_rng(13);
    for _ in 0..5 {
        let p = MkoiParams::new(8, AttentionKernel::Dak, &mut rng).unwrap();
        let a = Tensor::randn([8, 4, 4], &mut rng).map(|x| 3.0 * x);
        let v = Tensor::randn([8, 4, 4], &mut rng);
        let (x, y) = {
            let mut g = Graph::new();
            let (av, vv) = (g.input(a), g.input(v));
            let x = mkoi(&mut g, av, vv, &p).unwrap();
            let y = mkoi_decoupled(&mut g, av, vv, &p).unwrap();
            (g.value(x).clone(), g.value(y).clone())
        };
        assert!(x.max_abs_diff(&y).unwrap() <= 1e-12);
    }
}

#[test]
fn decoupled_form_requires_dak() {
    let mut rng = seeded_rng(14);
    let p = MkoiParams::new(4, AttentionKernel::Softmax, &mut rng).unwrap();
    let mut g = Graph::new();
    let a = g.input(Tensor::ones([4, 2, 2]));
    let v = g.input(Tensor::ones([4, 2, 2]));
    assert!(mkoi_decoupled(&mut g, a, v, &p).is_err());
}

#[test]
fn hpsa_matches_composed_reference() {
    let mut rng = seeded_rng(15);
    let p = MkoiParams::new(4, AttentionKernel::Dak, &mut rng).unwrap();
    let (q, k, v) = (
        Tensor::randn([4, 3, 5], &mut rng),
        Tensor::randn([4, 3, 5], &mut rng),
        Tensor::randn([4, 3, 5], &mut rng),
    );
    let got = eval(|g| {
        let t = QkvTriple {
            q: g.input(q.clone()),
            k: g.input(k.clone()),
            v: g.input(v.clone()),
        };
        hpsa(g, &t, &p)
    });
    let a = hadamard(&l2_channels(&q), &l2_channels(&k));
    assert!(got.max_abs_diff(&mkoi_ref(&a, &v, &p)).unwrap() <= 1e-10);
}

#[test]
fn hpsa_of_zero_inputs_is_zero() {
    let mut rng = seeded_rng(16);
    let p = MkoiParams::new(4, AttentionKernel::Dak, &mut rng).unwrap();
    let got = eval(|g| {
        let z = Tensor::zeros([4, 3, 3]);
        let t = QkvTriple {
            q: g.input(z.clone()),
            k: g.input(z.clone()),
            v: g.input(z),
        };
        hpsa(g, &t, &p)
    });
    assert!(got.data().iter().all(|&x| x == 0.0));
}

#[test]
fn hpsa_adjoint_matches_finite_differences() {
    let mut rng = seeded_rng(17);
    let p = MkoiParams::new(8, AttentionKernel::Dak, &mut rng).unwrap();
    let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn([8, 5, 5], &mut rng)).collect();
    let r = grad_check_with_params("hpsa", &p, &inputs, 1e-4, |g, p, xs| {
        let t = QkvTriple { q: xs[0], k: xs[1], v: xs[2] };
        let o = hpsa(g, &t, p)?;
        g.sum(o)
    })
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn sgff_matches_composed_reference() {
    let mut rng = seeded_rng(18);
    let p = SgffParams::new(4, &mut rng);
    let x = Tensor::randn([4, 4, 5], &mut rng);
    let got = eval(|g| {
        let xv = g.input(x.clone());
        sgff(g, xv, &p)
    });
    let u = conv_ref(&x, &p.proj_in);
    let a = conv_ref(&u, &p.gate).map(|a| 0.5 * a * (1.0 + libm::erf(a / std::f64::consts::SQRT_2)));
    let b = conv_ref(&u, &p.value);
    let want = conv_ref(&hadamard(&a, &b), &p.proj_out);
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
}

#[test]
fn sgff_of_zero_is_zero_and_keeps_shape() {
    let p = SgffParams::new(8, &mut seeded_rng(19));
    let got = eval(|g| {
        let x = g.input(Tensor::zeros([8, 3, 7]));
        sgff(g, x, &p)
    });
    assert_eq!(got.shape(), &[8, 3, 7]);
    assert!(got.data().iter().all(|&x| x == 0.0));
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let mut rng = seeded_rng(20);
    let mut p = BlockParams::new(8, AttentionKernel::Dak, &mut rng).unwrap();
    p.zero_output_projections();
    let x = Tensor::randn([8, 4, 6], &mut rng);
    let got = eval(|g| {
        let xv = g.input(x.clone());
        transformer_block(g, xv, &p)
    });
    assert_eq!(got, x);
}

#[test]
fn block_preserves_shape() {
    let mut rng = seeded_rng(21);
    let p = BlockParams::new(12, AttentionKernel::Softmax, &mut rng).unwrap();
    let got = eval(|g| {
        let x = g.input(Tensor::randn([12, 5, 3], &mut rng));
        transformer_block(g, x, &p)
    });
    assert_eq!(got.shape(), &[12, 5, 3]);
}

#[test]
fn block_adjoint_matches_finite_differences() {
    let mut rng = seeded_rng(22);
    let p = BlockParams::new(4, AttentionKernel::Dak, &mut rng).unwrap();
    let x = Tensor::randn([4, 4, 4], &mut rng);
    let r = grad_check_with_params("transformer_block", &p, &[x], 1e-4, |g, p, xs| {
        let o = transformer_block(g, xs[0], p)?;
        g.sum(o)
    })
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradient_reaches_every_input_element() {
    for blocks in [1, 2, 4] {
        let mut rng = seeded_rng(23 + blocks as u64);
        let stack: Vec<BlockParams> = (0..blocks)
            .map(|_| BlockParams::new(4, AttentionKernel::Dak, &mut rng).unwrap())
            .collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::ones([4, 4, 4]).with_requires_grad(true));
        let mut cur = x;
        for b in &stack {
            cur = transformer_block(&mut g, cur, b).unwrap();
        }
        let loss = g.sum(cur).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!(gx.is_finite());
        assert!(gx.data().iter().all(|&v| v != 0.0), "B={blocks}: zero gradient entry");
    }
}

#[test]
fn single_scale_encoder_reduces_to_one_block() {
    let cfg = EncoderConfig {
        in_channels: 8,
        scales: vec![(8, 1)],
        blocks_per_scale: 1,
        kernel: AttentionKernel::Dak,
    };
    let enc = EncoderParams::new(cfg, &mut seeded_rng(30)).unwrap();
    assert!(enc.stages[0].downsample.is_empty());
    let x = Tensor::randn([8, 4, 4], &mut seeded_rng(31));
    let a = eval(|g| {
        let xv = g.input(x.clone());
        Ok(encoder_forward(g, xv, &enc)?[0])
    });
    let b = eval(|g| {
        let xv = g.input(x.clone());
        transformer_block(g, xv, &enc.stages[0].blocks[0])
    });
    assert_eq!(a, b);
}

#[test]
fn default_encoder_output_shapes() {
    let cfg = EncoderConfig {
        blocks_per_scale: 1,
        ..EncoderConfig::default()
    };
    let enc = EncoderParams::new(cfg, &mut seeded_rng(32)).unwrap();
    let mut g = Graph::inference();
    let x = g.input(Tensor::randn([3, 64, 128], &mut seeded_rng(33)));
    let outs = encoder_forward(&mut g, x, &enc).unwrap();
    let shapes: Vec<Vec<usize>> = outs.iter().map(|&o| g.shape(o).to_vec()).collect();
    assert_eq!(shapes, vec![vec![64, 16, 32], vec![128, 8, 16], vec![192, 4, 8]]);
}

#[test]
fn encoder_is_deterministic_under_seed() {
    let cfg = EncoderConfig {
        in_channels: 1,
        scales: vec![(8, 2), (12, 4)],
        blocks_per_scale: 1,
        kernel: AttentionKernel::Dak,
    };
    let run = || {
        let enc = EncoderParams::new(cfg.clone(), &mut seeded_rng(34)).unwrap();
        let x = Tensor::randn([1, 8, 8], &mut seeded_rng(35));
        eval(|g| {
            let xv = g.input(x);
            Ok(*encoder_forward(g, xv, &enc)?.last().unwrap())
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn encoder_rejects_indivisible_input() {
    let enc = EncoderParams::new(
        EncoderConfig {
            in_channels: 1,
            scales: vec![(4, 4)],
            blocks_per_scale: 1,
            kernel: AttentionKernel::Dak,
        },
        &mut seeded_rng(36),
    )
    .unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::ones([1, 6, 8]));
    assert!(encoder_forward(&mut g, x, &enc).is_err());
}

#[test]
fn encoder_config_rejects_bad_scales() {
    let mut cfg = EncoderConfig::default();
    cfg.scales = vec![(64, 4), (128, 6)];
    assert!(cfg.validate().is_err());
    cfg.scales = vec![(64, 4), (30, 8)];
    assert!(cfg.validate().is_err());
    cfg.scales = vec![];
    assert!(cfg.validate().is_err());
}

#[test]
fn vanilla_attention_matches_explicit_matrices() {
    let mut rng = seeded_rng(40);
    for (h, w) in [(1, 4), (2, 2), (4, 4)] {
        let (c, heads) = (4, 2);
        let n = h * w;
        let dk = c / heads;
        let q = Tensor::randn([c, h, w], &mut rng);
        let k = Tensor::randn([c, h, w], &mut rng);
        let v = Tensor::randn([c, h, w], &mut rng);
        let got = vanilla_sa_forward(&q, &k, &v, heads).unwrap();
        for hd in 0..heads {
            let ch = |t: &Tensor, d: usize, i: usize| t.data()[(hd * dk + d) * n + i];
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dk).map(|d| ch(&q, d, i) * ch(&k, d, j)).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for d in 0..dk {
                    let want: f64 = (0..n).map(|j| scores[j].exp() / z * ch(&v, d, j)).sum();
                    assert!((got.data()[(hd * dk + d) * n + i] - want).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn attention_maps_are_probed_per_block() {
    let mut rng = seeded_rng(41);
    let blocks: Vec<BlockParams> = (0..2)
        .map(|_| BlockParams::new(4, AttentionKernel::Dak, &mut rng).unwrap())
        .collect();
    let mut probe = AttentionProbe::default();
    let mut g = Graph::inference();
    let mut x = g.input(Tensor::randn([4, 3, 3], &mut rng));
    for b in &blocks {
        x = transformer_block_probed(&mut g, x, b, Some(&mut probe)).unwrap();
    }
    assert_eq!(probe.maps.len(), 2);
    assert_eq!(probe.maps[0].shape(), &[7, 3, 3]);
    assert!(probe.maps.iter().all(|m| m.data().iter().all(|&v| v > 0.0)));
}

#[test]
fn hpsa_input_adjoint_with_projection_loss() {
    let mut rng = seeded_rng(42);
    let p = MkoiParams::new(4, AttentionKernel::Softmax, &mut rng).unwrap();
    let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn([4, 3, 4], &mut rng)).collect();
    let proj = Tensor::randn([4, 3, 4], &mut rng);
    let r = grad_check("hpsa_softmax", &inputs, 1e-4, |g, xs| {
        let t = QkvTriple { q: xs[0], k: xs[1], v: xs[2] };
        let o = hpsa(g, &t, &p)?;
        g.weighted_sum(o, &proj)
    })
    .unwrap();
    assert!(r.passed, "{r:?}");
}
