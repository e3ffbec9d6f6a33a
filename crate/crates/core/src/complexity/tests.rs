use super::*;

const SIZES: [usize; 4] = [64, 128, 256, 512];

fn shape(layout: Layout) -> MechanismShape {
    MechanismShape {
        layout,
        dim: 8,
        n_k: if layout.dims() == 1 { 3 } else { 9 },
        n_g: 4,
        heads: 2,
    }
}

#[test]
fn e1_pairwise_quadruples_when_doubling() {
    let a = count_term(Term::E1, &AttentionShape::self_seq(40, 16, 8));
    let b = count_term(Term::E1, &AttentionShape::self_seq(80, 16, 8));
    assert_eq!(b.pairwise, 4 * a.pairwise);
    assert_eq!(b.projection, 2 * a.projection);
}

#[test]
fn e3_doubles_when_doubling() {
    let a = count_term(Term::E3, &AttentionShape::self_seq(40, 16, 8));
    let b = count_term(Term::E3, &AttentionShape::self_seq(80, 16, 8));
    assert_eq!(b.total(), 2 * a.total());
}

#[test]
fn closed_form_terms_match_instrumented_counts() {
    for (q, k) in [
        (Layout::seq(5), Layout::seq(7)),
        (Layout::seq(6), Layout::seq(6)),
        (Layout::grid(3, 2), Layout::grid(4, 3)),
    ] {
        for (dim, heads) in [(8, 2), (8, 8), (12, 3)] {
            if q.dims() == 2 && dim % 4 != 0 {
                continue;
            }
            let s = AttentionShape::between(q, k, dim, heads).unwrap();
            for t in Term::ALL {
                let got = measure_term(t, q, k, dim, heads, 1).unwrap();
                assert_eq!(
                    got.macs,
                    count_term(t, &s).total(),
                    "{t} {q:?} {k:?} C={dim} M={heads}"
                );
            }
            for beta in Beta::all() {
                let (e, a) = measure_attention(beta, q, k, dim, heads, 2).unwrap();
                assert_eq!(e.macs, count_combined(beta, &s).total(), "{beta}");
                assert_eq!(a.macs, count_aggregation(&s));
                assert_eq!(a.exps, (heads * q.len() * k.len()) as u64);
            }
        }
    }
}

#[test]
fn offset_counts_match_table() {
    for (q, k) in [
        (Layout::seq(4), Layout::seq(9)),
        (Layout::grid(3, 5), Layout::grid(2, 2)),
    ] {
        let enc = crate::relpos::RelPosEncoder::for_layouts(8, &[q, k]).unwrap();
        let table = OffsetTable::build(&enc, q, k).unwrap();
        assert_eq!(
            AttentionShape::between(q, k, 8, 2).unwrap().n_offsets,
            table.len()
        );
    }
}

#[test]
fn mechanisms_match_instrumented_counts() {
    for layout in [Layout::seq(11), Layout::grid(5, 4)] {
        let s = shape(layout);
        for m in [
            Mechanism::Regular,
            Mechanism::Deformable,
            Mechanism::Dynamic,
            Mechanism::Transformer(Beta::FULL),
            Mechanism::Transformer("0110".parse().unwrap()),
            Mechanism::Transformer(Beta::NONE),
        ] {
            assert_eq!(
                measure_mechanism(m, &s, 3).unwrap().macs,
                count_mechanism(m, &s),
                "{m} {layout:?}"
            );
        }
    }
}

#[test]
fn sharing_is_reported_separately() {
    let s = AttentionShape::self_seq(10, 8, 2);
    assert_eq!(sharing_savings(Term::E1.only(), &s), 0);
    // 1100 shares the query embedding, 1111 also shares keys and positions
    assert_eq!(sharing_savings("1100".parse().unwrap(), &s), 10 * 64);
    assert_eq!(sharing_savings(Beta::FULL, &s), 10 * 64 + 10 * 64 + 19 * 64);
}

#[test]
fn regular_linear_in_kernel_size() {
    let mut s = shape(Layout::seq(20));
    let base = count_mechanism(Mechanism::Regular, &s);
    s.n_k = 9;
    assert_eq!(count_mechanism(Mechanism::Regular, &s), 3 * base);
}

#[test]
fn dynamic_group_term_doubles_alone() {
    let mut s = shape(Layout::seq(20));
    let (n, c, nk) = (20u64, 8u64, 3u64);
    let a = count_mechanism(Mechanism::Dynamic, &s);
    s.n_g = 8;
    let b = count_mechanism(Mechanism::Dynamic, &s);
    assert_eq!(b - a, n * c * 4 * nk);
}

#[test]
fn slopes_against_sequence_length() {
    let slope = |f: &dyn Fn(usize) -> u64| {
        let pts: Vec<(f64, f64)> = SIZES.iter().map(|&n| (n as f64, f(n) as f64)).collect();
        log_log_slope(&pts)
    };
    for t in [Term::E1, Term::E2, Term::E4] {
        let s = slope(&|n| count_term(t, &AttentionShape::self_seq(n, 16, 8)).pairwise);
        assert!((s - 2.0).abs() <= 0.05, "{t}: {s}");
    }
    let s = slope(&|n| count_term(Term::E3, &AttentionShape::self_seq(n, 16, 8)).total());
    assert!((s - 1.0).abs() <= 0.05);
    for m in [
        Mechanism::Deformable,
        Mechanism::Dynamic,
        Mechanism::Regular,
    ] {
        let s = slope(&|n| count_mechanism(m, &shape(Layout::seq(n))));
        assert!((s - 1.0).abs() <= 0.05, "{m}: {s}");
    }
}

#[test]
fn table_flags_follow_the_comparison() {
    let ledger = emit_table(&shape(Layout::grid(4, 4)));
    let flags = |mech: &str, term: &str| {
        ledger
            .iter()
            .find(|(k, _)| k.mechanism == mech && k.term == term)
            .and_then(|(_, e)| e.factors)
            .unwrap()
            .to_string()
    };
    assert_eq!(
        flags("transformer", "E1"),
        "spatial=dense-global;query=1;key=1;relpos=0"
    );
    assert_eq!(
        flags("transformer", "E2"),
        "spatial=dense-global;query=1;key=0;relpos=1"
    );
    assert_eq!(
        flags("transformer", "E3"),
        "spatial=dense-global;query=0;key=1;relpos=0"
    );
    assert_eq!(
        flags("transformer", "E4"),
        "spatial=dense-global;query=0;key=0;relpos=1"
    );
    assert_eq!(
        flags("regular", "-"),
        "spatial=sparse-local;query=0;key=0;relpos=1"
    );
    assert_eq!(
        flags("deformable", "-"),
        "spatial=sparse-global;query=1;key=0;relpos=1"
    );
    assert_eq!(
        flags("dynamic", "-"),
        "spatial=sparse-local;query=1;key=0;relpos=1"
    );
}

#[test]
fn ledger_csv_columns() {
    let ledger = emit_table(&shape(Layout::seq(16)));
    let mut buf = Vec::new();
    ledger.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mechanism,term,N_s,C,N_k,N_g,M,macs,flags"
    );
    assert_eq!(lines.count(), ledger.len());
}
