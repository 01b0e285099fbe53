use hyperpeft::codec::Tag;
use hyperpeft::eval::{average_f1, micro_f1, Counts};
use proptest::prelude::*;

/// Spans read by a direct left-to-right scan, kept as (start, end, label) triples.
fn brute_spans(tags: &[Tag]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if let Tag::Type(t) = &tags[i] {
            let mut j = i + 1;
            while j < tags.len() && tags[j] == Tag::Inside {
                j += 1;
            }
            out.push((i, j, t.clone()));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

fn brute_f1(preds: &[Vec<Tag>], golds: &[Vec<Tag>]) -> (f64, f64, f64) {
    let (mut c, mut p, mut g) = (0usize, 0usize, 0usize);
    for (pr, go) in preds.iter().zip(golds) {
        let ps = brute_spans(pr);
        let gs = brute_spans(go);
        c += ps.iter().filter(|s| gs.contains(s)).count();
        p += ps.len();
        g += gs.len();
    }
    if p == 0 && g == 0 {
        return (1.0, 1.0, 1.0);
    }
    let prec = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let rec = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    let f = if c == 0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    (prec, rec, f)
}

fn tag() -> impl Strategy<Value = Tag> {
    prop_oneof![Just(Tag::Outside), Just(Tag::Inside), Just(Tag::Type("A".into())), Just(Tag::Type("B".into()))]
}

fn instance() -> impl Strategy<Value = (Vec<Vec<Tag>>, Vec<Vec<Tag>>)> {
    proptest::collection::vec(1..8usize, 1..6).prop_flat_map(|lens| {
        let p: Vec<_> = lens.iter().map(|&l| proptest::collection::vec(tag(), l)).collect();
        let g: Vec<_> = lens.iter().map(|&l| proptest::collection::vec(tag(), l)).collect();
        (p, g)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn micro_f1_matches_brute_force((preds, golds) in instance()) {
        let prf = micro_f1(&preds, &golds).unwrap();
        let (p, r, f) = brute_f1(&preds, &golds);
        prop_assert_eq!((prf.precision, prf.recall, prf.f1), (p, r, f));
    }

    #[test]
    fn adding_a_correct_prediction_never_lowers_f1((mut preds, golds) in instance()) {
        let before = micro_f1(&preds, &golds).unwrap().f1;
        // copy one gold span that the prediction lacks, if its tokens are free
        for (pr, go) in preds.iter_mut().zip(&golds) {
            let have = brute_spans(pr);
            if let Some((s, e, l)) = brute_spans(go).into_iter().find(|g| !have.contains(g)) {
                let free = (s..e).all(|k| pr[k] == Tag::Outside) && pr.get(e) != Some(&Tag::Inside);
                if free {
                    pr[s] = Tag::Type(l);
                    for t in &mut pr[s + 1..e] {
                        *t = Tag::Inside;
                    }
                    let after = micro_f1(&preds, &golds).unwrap().f1;
                    prop_assert!(after >= before, "{after} < {before}");
                    return Ok(());
                }
            }
        }
    }
}

#[test]
fn hand_counted_two_gold_one_correct_one_spurious() {
    let gold = vec![vec![Tag::Type("PER".into()), Tag::Outside, Tag::Type("LOC".into())]];
    let pred = vec![vec![Tag::Type("PER".into()), Tag::Type("ORG".into()), Tag::Outside]];
    let c = Counts::of_sentence(&pred[0], &gold[0]);
    assert_eq!((c.n_correct, c.n_pred, c.n_gold), (1, 2, 2));
    let prf = micro_f1(&pred, &gold).unwrap();
    assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
}

#[test]
fn published_average() {
    let per_task = [0.7140, 0.8745, 0.7965, 0.9599, 0.9592, 0.8983, 0.9652];
    let avg = average_f1(&per_task);
    assert_eq!(format!("{avg:.4}"), "0.8811");
}
