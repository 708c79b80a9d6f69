mod common;

use common::*;
use tokenlearner::data::{generate, SyntheticTaskSpec};
use tokenlearner::model::pooling_reduction;
use tokenlearner::nn::mhsa_forward;
use tokenlearner::tokenfuser::{fuse_remap, tokenwise_mix};
use tokenlearner::tokenlearner::{alt_tokenize, learn_tokens, learn_tokens_video, AltTokenizer, TokenizerKind};
use tokenlearner::vector_attention::vector_attention;
use tokenlearner::{Graph, ParamStore, Tensor, TokenLearnerVariant};

#[test]
fn every_operation_matches_its_loop_oracle() {
    for (name, worst) in oracle_suite(ORACLE_INSTANCES) {
        assert!(worst <= ORACLE_TOL, "{name}: {worst:e}");
    }
}

#[test]
fn conv3x3_matches_direct_loops() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor::randn([5, 5, 2], 1.0, &mut r);
        let k = Tensor::randn([3, 3, 2, 3], 1.0, &mut r);
        let b = Tensor::randn([3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.leaf(x.clone()), g.leaf(k.clone()), g.leaf(b.clone()));
        let y = g.conv3x3(xv, kv, bv).unwrap();
        let want = conv3x3(&rows(&x), 5, 5, &k, &b);
        assert!(max_diff(g.value(y), &want) < 1e-12);
    }
}

#[test]
fn mhsa_three_tokens_two_heads() {
    let (store, m) = mhsa_fixture(4, 2, 17);
    let z = Tensor::randn([3, 4], 1.0, &mut rng(18));
    let got = mhsa_forward(&z, &m, &store).unwrap();
    assert!(max_diff(&got, &mhsa_oracle(&z, &m, &store)) < 1e-12);
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let (store, m) = mhsa_fixture(6, 3, 2);
    let z = Tensor::randn([5, 6], 1.0, &mut rng(3));
    let perm = [3, 0, 4, 1, 2];
    let zr = rows(&z);
    let zp = Tensor::new([5, 6], perm.iter().flat_map(|&i| zr[i].clone()).collect()).unwrap();
    let y = rows(&mhsa_forward(&z, &m, &store).unwrap());
    let yp = rows(&mhsa_forward(&zp, &m, &store).unwrap());
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..6 {
            assert!((yp[k][c] - y[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn vector_attention_equals_one_head_per_channel() {
    for seed in 0..20 {
        let (store, va, m) = vattn_as_mhsa(4, seed);
        let z = Tensor::randn([4, 4], 1.0, &mut rng(seed + 100));
        let a = vector_attention(&z, &va, &store).unwrap();
        let b = mhsa_forward(&z, &m, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "seed {seed}");
    }
}

#[test]
fn vector_attention_with_projection() {
    let (store, va) = vattn_fixture(5, 3, 9);
    assert!(va.proj.is_some());
    let z = Tensor::randn([4, 5], 1.0, &mut rng(10));
    let got = vector_attention(&z, &va, &store).unwrap();
    assert!(max_diff(&got, &vector_attention_oracle(&z, &va, &store)) < 1e-12);
}

#[test]
fn fuse_remap_two_tokens_on_two_by_two() {
    let (store, tf) = fuser_fixture(2, 1, 3, 4);
    let mut r = rng(5);
    let y = Tensor::randn([2, 3], 1.0, &mut r);
    let x = Tensor::randn([2, 2, 3], 1.0, &mut r);
    let got = fuse_remap(&y, &x, &tf, &store).unwrap();
    assert_eq!(got.shape(), &[2, 2, 3]);
    assert!(max_diff(&got, &fuse_remap_oracle(&y, &x, &tf, &store)) < 1e-12);
}

#[test]
fn tokenwise_mix_random_case() {
    let (store, tf) = fuser_fixture(3, 2, 4, 6);
    let y = Tensor::randn([6, 4], 1.0, &mut rng(7));
    let got = tokenwise_mix(&y, &tf, &store).unwrap();
    assert!(max_diff(&got, &tokenwise_mix_oracle(&y, &tf, &store)) < 1e-12);
}

#[test]
fn saturated_indicator_map_picks_one_pixel() {
    // mlp maps with zero weights and a bias far below zero everywhere except
    // through an input channel that is only set at pixel (0, 0)
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let tl = tokenlearner::TokenLearnerLayer::new(&mut store, "tl", TokenLearnerVariant::Mlp, 1, 2, &mut r);
    let mlp = tl.mlp_params().unwrap().clone();
    let hidden = mlp.fc1.out_dim;
    let mut w1 = Tensor::zeros([2, hidden]);
    w1.set(&[1, 0], 1.0);
    *store.get_mut(mlp.fc1.weight) = w1;
    let mut w2 = Tensor::zeros([hidden, 1]);
    w2.set(&[0, 0], 100.0);
    *store.get_mut(mlp.fc2.weight) = w2;
    *store.get_mut(mlp.fc2.bias) = Tensor::full([1], -50.0);

    let (h, w) = (3, 4);
    let mut x = Tensor::randn([h, w, 2], 1.0, &mut r);
    for y in 0..h {
        for xx in 0..w {
            x.set(&[y, xx, 1], if (y, xx) == (0, 0) { 1.0 } else { 0.0 });
        }
    }
    let z = learn_tokens(&x, &tl, &store).unwrap();
    let oracle = learn_tokens_oracle(&x, &tl, &store);
    assert!(max_diff(&z, &oracle) < 1e-9);
    let expect = x.at(&[0, 0, 0]) / (h * w) as f64;
    assert!((z.at(&[0, 0]) - expect).abs() < 1e-9);
}

#[test]
fn duplicated_frame_duplicates_token_block() {
    let (store, tl) = tl_fixture(TokenLearnerVariant::Conv4, 3, 2, 8);
    let frame = Tensor::randn([4, 3, 2], 1.0, &mut rng(9));
    let mut data = frame.data().to_vec();
    data.extend_from_slice(frame.data());
    let video = Tensor::new([2, 4, 3, 2], data).unwrap();
    let z = learn_tokens_video(&video, &tl, &store).unwrap();
    assert_eq!(z.shape(), &[6, 2]);
    assert_eq!(&z.data()[..6], &z.data()[6..]);
}

#[test]
fn pooling_and_fixed_grid_agree_with_cell_means() {
    let grid = Tensor::new([16, 1], (1..=16).map(f64::from).collect()).unwrap();
    let pooled = pooling_reduction(&grid, 4, 4, 2).unwrap();
    assert_eq!(pooled.data(), &[3.5, 5.5, 11.5, 13.5]);

    let mut r = rng(2);
    let mut store = ParamStore::new();
    let fixed = AltTokenizer::new(&mut store, "fg", TokenizerKind::FixedGrid, 4, 3, 4, 6, &mut r).unwrap();
    let x = Tensor::randn([4, 6, 3], 1.0, &mut r);
    let got = alt_tokenize(&x, &fixed, &store).unwrap();
    // 2x2 cells of 2x3 pixels each
    let mut want = vec![vec![0.0; 3]; 4];
    for y in 0..4 {
        for xx in 0..6 {
            let cell = (y / 2) * 2 + xx / 3;
            for c in 0..3 {
                want[cell][c] += x.at(&[y, xx, c]) / 6.0;
            }
        }
    }
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn noiseless_locate_patch_label_is_brightest_quadrant() {
    let data = generate(&SyntheticTaskSpec::locate_patch(16, 0.0, 4), 50).unwrap();
    for i in 0..data.len() {
        let s = data.sample(i);
        let mut mean = [0.0; 4];
        for y in 0..16 {
            for x in 0..16 {
                let q = 2 * (y / 8) + x / 8;
                for c in 0..3 {
                    mean[q] += s.at(&[y, x, c]);
                }
            }
        }
        let best = (0..4).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(best, data.label(i), "sample {i}");
    }
}
