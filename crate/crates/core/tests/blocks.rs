mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pom_core::blocks::{
    gated_residual, image_dip_block, modulation, polymorpher_block, video_dip_block, BlockConfig, ConditionHead,
    ImageBlockParams, LinearParams, PolymorpherParams, VideoBlockParams,
};
use pom_core::pom::{MaskSpec, PoMParams};
use pom_core::Tensor;

fn slice(t: &Tensor<f64>, s: usize) -> &[f64] {
    let len = t.len() / t.dim(0);
    &t.data()[s * len..(s + 1) * len]
}

#[test]
fn modulation_and_gate_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (b, n, d) = (3, 4, 5);
    let x = Tensor::<f64>::randn(vec![b, n, d], 1.0, &mut rng);
    let f = Tensor::<f64>::randn(vec![b, n, d], 1.0, &mut rng);
    let s = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
    let sh = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);

    let m = modulation(&x, &s, &sh).unwrap();
    let g = gated_residual(&x, &f, &s).unwrap();
    for bi in 0..b {
        for i in 0..n {
            for c in 0..d {
                let at = (bi * n + i) * d + c;
                let (xv, sv, bv) = (x.data()[at], s.data()[bi * d + c], sh.data()[bi * d + c]);
                assert_eq!(m.data()[at], xv * (1.0 + sv) + bv);
                assert_eq!(g.data()[at], xv + (1.0 + sv) * f.data()[at]);
            }
        }
    }

    let one = Tensor::<f64>::full(vec![1, 1, 1], 1.0);
    let out = modulation(&one, &Tensor::full(vec![1, 1], 1.0), &Tensor::full(vec![1, 1], -1.0)).unwrap();
    assert_eq!(out.data(), &[1.0]);
    let minus_one = Tensor::<f64>::full(vec![b, d], -1.0);
    assert_eq!(gated_residual(&x, &f, &minus_one).unwrap(), x);
}

#[test]
fn polymorpher_block_is_equivariant_and_matches_its_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = BlockConfig::new(6, 2, 2, 2);
    let p = PolymorpherParams::<f64>::init(cfg, 0.4, &mut rng).unwrap();
    let n = 9;
    let x = Tensor::<f64>::randn(vec![1, n, 6], 1.0, &mut rng);
    let y = polymorpher_block(&x, &p, &MaskSpec::None).unwrap();
    assert_eq!(y.shape(), x.shape());

    let mixed = common::pom_self(&p.pom, x.data());
    let h: Vec<f64> = x.data().iter().zip(&mixed).map(|(a, b)| a + b).collect();
    let mut expected = Vec::new();
    for row in h.chunks(6) {
        let hidden: Vec<f64> = common::affine(&p.ffw.fc1.w, Some(&p.ffw.fc1.b), row).into_iter().map(common::gelu).collect();
        let ff = common::affine(&p.ffw.fc2.w, Some(&p.ffw.fc2.b), &hidden);
        expected.extend(row.iter().zip(&ff).map(|(a, b)| a + b));
    }
    assert!(common::max_abs_diff(y.data(), &expected) <= 1e-12);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(0, 7);
    perm.swap(2, 5);
    let y_perm = polymorpher_block(&x.permute_rows(&perm).unwrap(), &p, &MaskSpec::None).unwrap();
    assert!(y_perm.max_abs_diff(&y.permute_rows(&perm).unwrap()).unwrap() <= 1e-9);
}

#[test]
fn image_block_matches_transcription_for_several_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for (d, k, e, f) in [(4, 1, 1, 1), (6, 2, 3, 2), (8, 4, 1, 4)] {
        let p = ImageBlockParams::<f64>::init_random(BlockConfig::new(d, k, e, f), 0.3, &mut rng).unwrap();
        let (b, n) = (2, rng.random_range(1..10));
        let x = Tensor::<f64>::randn(vec![b, n, d], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let y = image_dip_block(&x, &c, &p).unwrap();
        for s in 0..b {
            let expected = common::image_block_ref(&p, slice(&x, s), slice(&c, s));
            assert!(common::max_abs_diff(slice(&y, s), &expected) <= 1e-10, "d={d} k={k} e={e}");
        }
    }
}

#[test]
fn image_block_output_depends_on_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let p = ImageBlockParams::<f64>::init_random(BlockConfig::new(4, 2, 1, 2), 0.3, &mut rng).unwrap();
    let x = Tensor::<f64>::randn(vec![1, 5, 4], 1.0, &mut rng);
    let c1 = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut rng);
    let c2 = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut rng);
    let y1 = image_dip_block(&x, &c1, &p).unwrap();
    let y2 = image_dip_block(&x, &c2, &p).unwrap();
    assert!(y1.max_abs_diff(&y2).unwrap() > 1e-3);
}

#[test]
fn zero_initialised_heads_still_apply_the_branches() {
    // With zero condition heads every modulation and gate is zero, so the
    // block is x + PoM(LN x) followed by the feed-forward residual.
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let p = ImageBlockParams::<f64>::init(BlockConfig::new(4, 2, 1, 2), 0.3, &mut rng).unwrap();
    let x = Tensor::<f64>::randn(vec![1, 6, 4], 1.0, &mut rng);
    let c = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut rng);
    let y = image_dip_block(&x, &c, &p).unwrap();
    let expected = common::image_block_ref(&p, x.data(), c.data());
    assert!(common::max_abs_diff(y.data(), &expected) <= 1e-10);
    assert!(y.max_abs_diff(&x).unwrap() > 1e-3);
}

fn video_inputs(rng: &mut ChaCha8Rng, b: usize, n: usize, n_text: usize, d: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        Tensor::randn(vec![b, n, d], 1.0, rng),
        Tensor::randn(vec![b, d], 1.0, rng),
        Tensor::randn(vec![b, n_text, d], 1.0, rng),
    )
}

#[test]
fn video_block_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let (b, n, n_text, d) = (2, 8, 4, 6);
    let p = VideoBlockParams::<f64>::init_random(BlockConfig::new(d, 2, 2, 2), 0.3, &mut rng).unwrap();
    let (x, t, text) = video_inputs(&mut rng, b, n, n_text, d);
    let valid = [1u8, 0, 1, 1, 1, 1, 1, 0];
    let text_mask = MaskSpec::padding(b, n_text, &valid).unwrap();
    for k in [1, 2, 3] {
        let y = video_dip_block(&x, &t, &text, &text_mask, &MaskSpec::BlockCausal(k), &p).unwrap();
        let vis = common::block_causal(k);
        for s in 0..b {
            let tv: Vec<bool> = valid[s * n_text..(s + 1) * n_text].iter().map(|&v| v == 1).collect();
            let expected = common::video_block_ref(&p, slice(&x, s), slice(&t, s), slice(&text, s), &tv, Some(&vis));
            assert!(common::max_abs_diff(slice(&y, s), &expected) <= 1e-10, "K = {k}");
        }
    }
    let y = video_dip_block(&x, &t, &text, &MaskSpec::None, &MaskSpec::Causal, &p).unwrap();
    let all = vec![true; n_text];
    let expected = common::video_block_ref(&p, slice(&x, 0), slice(&t, 0), slice(&text, 0), &all, Some(&|i, j| j <= i));
    assert!(common::max_abs_diff(slice(&y, 0), &expected) <= 1e-10);
}

#[test]
fn video_block_causal_output_ignores_later_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (n, n_text, d, k) = (12, 3, 4, 4);
    let p = VideoBlockParams::<f64>::init_random(BlockConfig::new(d, 2, 1, 2), 0.4, &mut rng).unwrap();
    let (x, t, text) = video_inputs(&mut rng, 1, n, n_text, d);
    let temporal = MaskSpec::BlockCausal(k);
    let y = video_dip_block(&x, &t, &text, &MaskSpec::None, &temporal, &p).unwrap();
    for block in 0..n / k - 1 {
        let mut data = x.data().to_vec();
        let cut = (block + 1) * k * d;
        for v in &mut data[cut..] {
            *v += rng.random_range(-2.0..2.0);
        }
        let perturbed = Tensor::new(vec![1, n, d], data).unwrap();
        let y2 = video_dip_block(&perturbed, &t, &text, &MaskSpec::None, &temporal, &p).unwrap();
        assert!(common::max_abs_diff(&y.data()[..cut], &y2.data()[..cut]) <= 1e-10, "block {block}");
        assert!(common::max_abs_diff(&y.data()[cut..], &y2.data()[cut..]) > 1e-6);
    }
}

/// Rows `[from, to)` of a stacked condition head, as its own head.
fn head_rows(head: &ConditionHead<f64>, d: usize, parts: &[usize]) -> ConditionHead<f64> {
    let w: Vec<f64> = parts.iter().flat_map(|&p| head.linear.w.data()[p * d * d..(p + 1) * d * d].to_vec()).collect();
    let b: Vec<f64> = parts.iter().flat_map(|&p| head.linear.b.data()[p * d..(p + 1) * d].to_vec()).collect();
    ConditionHead {
        parts: parts.len(),
        linear: LinearParams {
            w: Tensor::new(vec![parts.len() * d, d], w).unwrap(),
            b: Tensor::new(vec![parts.len() * d], b).unwrap(),
        },
    }
}

#[test]
fn silent_text_branch_reduces_video_block_to_image_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let (n, n_text, d) = (5, 3, 4);
    let mut p = VideoBlockParams::<f64>::init_random(BlockConfig::new(d, 2, 2, 2), 0.3, &mut rng).unwrap();
    p.c_pom = PoMParams {
        w_out: Tensor::zeros(p.c_pom.w_out.shape().to_vec()),
        b_out: p.c_pom.b_out.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
        ..p.c_pom.clone()
    };
    let (x, t, _) = video_inputs(&mut rng, 1, n, n_text, d);
    let text = Tensor::zeros(vec![1, n_text, d]);
    let y = video_dip_block(&x, &t, &text, &MaskSpec::None, &MaskSpec::None, &p).unwrap();

    // Video modulation order is sx, bx, sc, bc, s1, b1, s2, b2; gates gc, g1, g2.
    let image = ImageBlockParams {
        pom: p.pom.clone(),
        ffw: p.ffw.clone(),
        cond: head_rows(&p.cond, d, &[4, 5, 6, 7]),
        gate: head_rows(&p.gate, d, &[1, 2]),
    };
    let expected = image_dip_block(&x, &t, &image).unwrap();
    assert!(y.max_abs_diff(&expected).unwrap() <= 1e-12);
}
