use hyperpeft::codec::{
    decode_output, decode_output_with, encode_input, encode_output, sbio_to_spans, spans_to_sbio, Sentinels, Span, Tag,
};
use proptest::prelude::*;

fn tag() -> impl Strategy<Value = Tag> {
    prop_oneof![
        3 => Just(Tag::Outside),
        2 => Just(Tag::Inside),
        2 => "[A-Z][A-Z_]{0,8}".prop_filter("not a reserved symbol", |s| s != "I" && s != "O").prop_map(Tag::Type),
    ]
}

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9'.,-]{1,8}"
}

/// Non-overlapping spans over `len` tokens.
fn spans(len: usize) -> impl Strategy<Value = (usize, Vec<Span>)> {
    proptest::collection::vec((any::<bool>(), 1..4usize, "[A-Z]{1,5}"), len).prop_map(move |cuts| {
        let mut out = Vec::new();
        let mut i = 0;
        for (open, width, label) in cuts {
            if i >= len {
                break;
            }
            if open && label != "I" && label != "O" {
                let end = (i + width).min(len);
                out.push(Span::new(i, end, label));
                i = end;
            } else {
                i += 1;
            }
        }
        (len, out)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn output_round_trip(labels in proptest::collection::vec(tag(), 1..60)) {
        let s = Sentinels::default();
        let text = encode_output(&labels, &s).unwrap();
        prop_assert_eq!(decode_output(&text, labels.len()), labels);
    }

    #[test]
    fn input_interleaves_every_token(tokens in proptest::collection::vec(word(), 1..99)) {
        let s = Sentinels::default();
        let text = encode_input(&tokens, &s).unwrap();
        let parts: Vec<&str> = text.split(' ').collect();
        prop_assert_eq!(parts.len(), 2 * tokens.len() + 1);
        for (i, p) in parts.iter().enumerate() {
            if i % 2 == 0 {
                prop_assert_eq!(s.parse(p), Some(i / 2));
            } else {
                prop_assert_eq!(*p, tokens[i / 2].as_str());
            }
        }
    }

    #[test]
    fn span_round_trip((len, sp) in (1..30usize).prop_flat_map(spans)) {
        let tags = spans_to_sbio(&sp, len).unwrap();
        prop_assert_eq!(sbio_to_spans(&tags), sp);
    }

    #[test]
    fn decode_is_total(text in "(<extra_id_[0-9]{1,2}>|[A-Z]{1,3}|I|O| ){0,80}", len in 1..40usize) {
        let d = decode_output_with(&text, len, &Sentinels::default(), None);
        prop_assert_eq!(d.labels.len(), len);
        prop_assert!(d.malformed_slots <= len);
    }

    #[test]
    fn decode_of_clean_output_has_no_malformed_slots(labels in proptest::collection::vec(tag(), 1..40)) {
        let s = Sentinels::default();
        let text = encode_output(&labels, &s).unwrap();
        prop_assert_eq!(decode_output_with(&text, labels.len(), &s, None).malformed_slots, 0);
    }
}

#[test]
fn capacity_is_enforced() {
    let s = Sentinels::t5(4);
    assert!(encode_input(&["a", "b", "c"], &s).is_ok());
    assert!(matches!(
        encode_input(&["a", "b", "c", "d"], &s),
        Err(hyperpeft::Error::Capacity { needed: 5, capacity: 4 })
    ));
}

#[test]
fn truncated_and_noisy_outputs() {
    let s = Sentinels::default();
    let d = decode_output_with("<extra_id_0> A <extra_id_1> I", 4, &s, None);
    assert_eq!(d.labels, vec![Tag::Type("A".into()), Tag::Inside, Tag::Outside, Tag::Outside]);
    assert_eq!(d.malformed_slots, 2);

    let d = decode_output_with("<extra_id_0> A B <extra_id_1> O <extra_id_2>", 2, &s, None);
    assert_eq!(d.labels, vec![Tag::Outside, Tag::Outside]);
    assert_eq!(d.malformed_slots, 1);

    let d = decode_output_with("<extra_id_0> <extra_id_0> A <extra_id_1>", 1, &s, None);
    assert_eq!(d.malformed_slots, 1);
}
