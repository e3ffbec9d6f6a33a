use proptest::prelude::*;
use spatial_attn::attention::{
    attention_weights, energy_terms, AttentionConfig, AttentionMode, Beta, Region,
    TransformerAttention,
};
use spatial_attn::{Layout, Rng, Tape, Tensor};

fn module(
    beta: Beta,
    heads: usize,
    c: usize,
    layouts: &[Layout],
    seed: u64,
) -> TransformerAttention {
    let mut cfg = AttentionConfig::uniform(heads, c).unwrap();
    cfg.beta = beta;
    TransformerAttention::init(cfg, layouts, &mut Rng::new(seed)).unwrap()
}

/// Per-head `[Nq, Nk]` weight matrices.
fn weights(
    m: &TransformerAttention,
    z: &Tensor,
    x: &Tensor,
    queries: Layout,
    keys: Layout,
    region: Region,
) -> Vec<Tensor> {
    let table = m.offset_table(queries, keys).unwrap();
    let mut t = Tape::new();
    let vars = m.params.bind(&mut t, false);
    let (zv, xv) = (t.constant(z.clone()), t.constant(x.clone()));
    let terms = energy_terms(&mut t, &m.config, &vars, zv, xv, &table).unwrap();
    let mask = region.mask(queries, keys).unwrap();
    attention_weights(&mut t, &m.config, &terms, mask)
        .unwrap()
        .into_iter()
        .map(|w| t.value(w).clone())
        .collect()
}

fn region_of(code: u8) -> Region {
    match code {
        0 => Region::Full,
        1 => Region::Window { radius: 1 },
        _ => Region::Causal,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weight_rows_are_distributions(beta in 0u8..16, nq in 1usize..7, nk in 1usize..7,
                                     region in 0u8..3, seed in any::<u64>()) {
        let beta = Beta::all().nth(beta as usize).unwrap();
        let (ql, kl) = if region == 0 { (Layout::seq(nq), Layout::seq(nk)) } else { (Layout::seq(nk), Layout::seq(nk)) };
        let m = module(beta, 2, 8, &[ql, kl], seed);
        let mut rng = Rng::new(seed ^ 9);
        let z = Tensor::uniform([ql.len(), 8], 3.0, &mut rng);
        let x = Tensor::uniform([kl.len(), 8], 3.0, &mut rng);
        let region = region_of(region);
        let keep = region.mask(ql, kl).unwrap();
        for w in weights(&m, &z, &x, ql, kl, region) {
            for q in 0..ql.len() {
                let row = w.row(q);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for (k, &p) in row.iter().enumerate() {
                    prop_assert!(p >= 0.0);
                    if let Some(keep) = &keep {
                        if !keep[q * kl.len() + k] {
                            prop_assert_eq!(p, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn query_content_is_ignored_without_query_terms(perm_seed in any::<u64>(), seed in any::<u64>()) {
        let (ql, kl) = (Layout::grid(3, 2), Layout::grid(3, 3));
        let m = module("0011".parse().unwrap(), 2, 8, &[ql, kl], seed);
        let mut rng = Rng::new(seed ^ 5);
        let z = Tensor::uniform([6, 8], 1.0, &mut rng);
        let x = Tensor::uniform([9, 8], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..6).collect();
        let mut prng = Rng::new(perm_seed);
        for i in (1..6).rev() {
            order.swap(i, prng.below(i + 1));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| z.row(i).to_vec()).collect();
        let zp = Tensor::from_rows(&rows).unwrap();
        let a = weights(&m, &z, &x, ql, kl, Region::Full);
        let b = weights(&m, &zp, &x, ql, kl, Region::Full);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn position_only_weights_depend_on_offset(seed in any::<u64>()) {
        let l = Layout::grid(5, 5);
        let m = module("0001".parse().unwrap(), 2, 8, &[l], seed);
        let x = Tensor::uniform([25, 8], 1.0, &mut Rng::new(seed ^ 3));
        let region = Region::Window { radius: 1 };
        let ws = weights(&m, &x, &x, l, l, region);
        let interior: Vec<usize> = (0..25).filter(|&q| { let [a, b] = l.coords(q); (1..4).contains(&a) && (1..4).contains(&b) }).collect();
        for w in ws {
            let by_offset = |q: usize| -> Vec<f64> {
                let mut v = Vec::new();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        v.push(w.at(q, l.shifted(q, [dx, dy]).unwrap()));
                    }
                }
                v
            };
            let first = by_offset(interior[0]);
            for &q in &interior[1..] {
                prop_assert_eq!(&by_offset(q), &first);
            }
        }
    }
}

#[test]
fn all_off_is_mean_pooling() {
    let (ql, kl) = (Layout::seq(4), Layout::seq(6));
    let m = module(Beta::NONE, 2, 8, &[ql, kl], 1);
    let mut rng = Rng::new(2);
    let z = Tensor::uniform([4, 8], 1.0, &mut rng);
    let x = Tensor::uniform([6, 8], 1.0, &mut rng);
    for w in weights(&m, &z, &x, ql, kl, Region::Full) {
        assert!(w.data().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }
    // the layer output is the same projected mean for every query
    let mut t = Tape::new();
    let vars = m.params.bind(&mut t, false);
    let (zv, xv) = (t.constant(z), t.constant(x));
    let y = m
        .forward(&mut t, &vars, zv, xv, ql, kl, AttentionMode::EncoderDecoder)
        .unwrap();
    let y = t.value(y);
    for q in 1..4 {
        for c in 0..8 {
            assert!((y.at(q, c) - y.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_seeds_give_identical_outputs() {
    let l = Layout::grid(3, 3);
    let run = || {
        let m = module(Beta::FULL, 2, 8, &[l], 11);
        let x = Tensor::uniform([9, 8], 1.0, &mut Rng::new(12));
        let mut t = Tape::new();
        let vars = m.params.bind(&mut t, false);
        let xv = t.constant(x);
        let y = m
            .forward(&mut t, &vars, xv, xv, l, l, AttentionMode::SelfAttention)
            .unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}
