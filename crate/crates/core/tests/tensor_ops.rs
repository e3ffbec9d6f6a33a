use std::rc::Rc;

use proptest::prelude::*;
use spatial_attn::relpos::{RelPosEncoder, DEFAULT_BASE};
use spatial_attn::tensor::finite_diff_check;
use spatial_attn::{Layout, Rng, Tape, Tensor, Var};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut Rng::new(seed))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> spatial_attn::Result<Var>, params: &[Tensor]) {
    let err = finite_diff_check(f, params).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>()) {
        let x = Tensor::uniform([rows, cols], 50.0, &mut Rng::new(seed));
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v, None).unwrap();
        for r in 0..rows {
            let row = t.value(s).row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn matrix_ops_gradients(m in 1usize..=6, k in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        let (a, b, bt) = (rand(&[m, k], seed), rand(&[k, n], seed ^ 1), rand(&[n, k], seed ^ 2));
        check(|t, v| t.matmul(v[0], v[1]), &[a.clone(), b]);
        check(|t, v| t.matmul_nt(v[0], v[1]), &[a.clone(), bt]);
        let (c, row) = (rand(&[m, k], seed ^ 3), rand(&[1, k], seed ^ 4));
        check(|t, v| { let s = t.add(v[0], v[1])?; let d = t.sub(s, v[2])?; t.mul(d, v[0]) }, &[a.clone(), c.clone(), rand(&[m, k], seed ^ 5)]);
        check(|t, v| t.add_row(v[0], v[1]), &[a.clone(), row]);
        check(|t, v| { let s = t.scale(v[0], -1.7); t.scale_by(s, v[1]) }, &[a.clone(), Tensor::scalar(0.4)]);
        check(|t, v| Ok(t.sigmoid(v[0])), std::slice::from_ref(&a));
        check(|t, v| t.mean_rows(v[0]), std::slice::from_ref(&a));
        check(|t, v| Ok(t.sum(v[0])), std::slice::from_ref(&a));
        check(|t, v| { let r = t.reshape(v[0], [k, m])?; t.matmul(r, v[1]) }, &[a.clone(), rand(&[m, 2], seed ^ 6)]);
        let mask: Rc<[bool]> = (0..m * k).map(|i| i % k != k - 1 || k == 1).collect();
        check(move |t, v| t.softmax(v[0], Some(mask.clone())), std::slice::from_ref(&a));
        let start = k / 2;
        check(move |t, v| { let s = t.slice_cols(v[0], start, k - start)?; t.concat_cols(&[s, v[1], s]) }, &[a, c]);
    }

    #[test]
    fn gather_ops_gradients(nq in 1usize..=5, nk in 1usize..=5, d in 1usize..=6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let nr = nq + nk - 1;
        let index: Rc<[usize]> = (0..nq * nk).map(|i| (i % nk) + (nq - 1 - i / nk)).collect();
        check(|t, v| t.pair_dot_gather(v[0], v[1], index.clone(), nq, nk), &[rand(&[nq, d], seed), rand(&[nr, d], seed ^ 1)]);
        check(|t, v| t.pair_dot_gather(v[0], v[1], index.clone(), nq, nk), &[rand(&[1, d], seed), rand(&[nr, d], seed ^ 1)]);
        let slots = 2;
        let sidx: Rc<[Option<usize>]> = (0..nq * slots).map(|i| if i % 3 == 2 { None } else { Some(rng.below(nk)) }).collect();
        let sw: Rc<[f64]> = (0..nq * slots).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check(|t, v| t.sparse_aggregate(v[0], sidx.clone(), sw.clone(), slots), &[rand(&[nk, d], seed ^ 2)]);
        let targets: Rc<[usize]> = (0..nq).map(|_| rng.below(d)).collect();
        check(|t, v| t.cross_entropy(v[0], targets.clone()), &[rand(&[nq, d], seed ^ 3)]);
    }

    #[test]
    fn window_and_bilinear_gradients(n in 3usize..=6, groups in 1usize..=2, seed in any::<u64>()) {
        let c = 2 * groups;
        let nk = 3;
        let layout = Layout::seq(n);
        let taps: Rc<[Option<usize>]> = (0..n).flat_map(|q| (0..nk).map(move |j| layout.shifted(q, [j as i64 - 1, 0]))).collect();
        check(|t, v| t.depthwise_window(v[0], v[1], taps.clone(), groups), &[rand(&[n, c], seed), rand(&[n, groups * nk], seed ^ 1)]);
        // fractional locations kept away from integers
        let g = Layout::grid(n, 3);
        let mut rng = Rng::new(seed);
        let loc: Vec<f64> = (0..4 * 2).map(|i| {
            let hi = if i % 2 == 0 { n as f64 } else { 3.0 };
            rng.below(hi as usize + 1) as f64 - 0.5 + rng.uniform(-0.4, 0.4)
        }).collect();
        let loc = Tensor::new([4, 2], loc).unwrap();
        check(|t, v| t.bilinear_sample(v[0], v[1], g), &[rand(&[3 * n, c], seed ^ 2), loc]);
    }

    #[test]
    fn encodings_bounded(offset in -40i64..40, half in 1usize..8) {
        let e = RelPosEncoder::new(4 * half, DEFAULT_BASE, 24).unwrap();
        prop_assert!(e.encode_1d(offset).iter().all(|v| v.abs() <= 1.0));
        prop_assert!(e.encode_2d(offset, -offset).unwrap().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn encodings_injective_within_clip() {
    for dim in [4, 8, 16] {
        let clip = 23;
        let e = RelPosEncoder::new(dim, DEFAULT_BASE, clip).unwrap();
        let all: Vec<Vec<f64>> = (-(clip as i64)..=clip as i64)
            .map(|d| e.encode_1d(d))
            .collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "dim {dim}: offsets collide");
            }
        }
    }
}

#[test]
fn equal_seeds_equal_forward() {
    let run = |seed| {
        let mut rng = Rng::new(seed);
        let a = Tensor::uniform([4, 5], 1.0, &mut rng);
        let b = Tensor::uniform([5, 3], 1.0, &mut rng);
        let mut t = Tape::new();
        let (a, b) = (t.constant(a), t.constant(b));
        let y = t.matmul(a, b).unwrap();
        let s = t.softmax(y, None).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}
