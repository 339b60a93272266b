use std::path::{Path, PathBuf};

use biasaudit_core::interchange::{
    list_datasets, load_dataset, parse_records, read_records_file, write_records, AttentionRecord, Catalog,
    CompletionRecord, DatasetRows, EmbeddingRecord, MaskedSlotRecord, PllRecord, Record, Variant,
};
use biasaudit_core::{Error, Matrix, Vector};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn catalog() -> Catalog {
    Catalog::load(fixture("datasets/catalog.json")).unwrap()
}

#[test]
fn fixture_files_round_trip() {
    for name in [
        "weat_2d.ndjson",
        "pll_pairs.ndjson",
        "lpbs_slots.ndjson",
        "cbs_slots.ndjson",
        "generations.ndjson",
        "honest_completions.ndjson",
        "pair_embeddings.ndjson",
    ] {
        let records = read_records_file(fixture(name)).unwrap();
        let mut bytes = Vec::new();
        write_records(&records, &mut bytes).unwrap();
        assert_eq!(parse_records(bytes.as_slice()).unwrap(), records, "{name}");
    }
}

#[test]
fn empty_list_writes_nothing() {
    let mut bytes = Vec::new();
    write_records(&[], &mut bytes).unwrap();
    assert!(bytes.is_empty());
}

#[test]
fn reports_line_of_bad_record() {
    let text =
        "{\"kind\":\"completion\",\"prompt_id\":\"p\",\"completions\":[\"a\"]}\n\n{\"kind\":\"pll\",\"id\":\"x\"}\n";
    match parse_records(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn non_stochastic_attention_rejected() {
    let text = r#"{"kind":"attention","layer":0,"head":0,"weights":[[0.5,0.4]]}"#;
    let err = parse_records(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("weights"), "{err}");
}

#[test]
fn positive_logprob_rejected() {
    let text = r#"{"kind":"masked_slot","template_id":"t","target_word":"he","group_index":0,"logp_target":0.1,"logp_prior":-1}"#;
    let err = parse_records(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("logp_target"), "{err}");
}

#[test]
fn catalog_listing() {
    let c = catalog();
    assert_eq!(
        list_datasets(&c, None).unwrap(),
        ["BBQ", "BUG", "CrowS-Pairs", "Empty", "Missing"]
    );
    assert_eq!(list_datasets(&c, Some("BUG")).unwrap(), ["full", "gold"]);
    assert!(matches!(list_datasets(&c, Some("nope")), Err(Error::UnknownDataset(_))));
}

#[test]
fn loads_counterfactual_csv() {
    let rows = load_dataset(&catalog(), "CrowS-Pairs", "default").unwrap();
    assert_eq!(
        rows,
        DatasetRows::CounterfactualPairs(vec![
            (
                "He fixed the engine, as usual.".into(),
                "She fixed the engine as usual.".into()
            ),
            (
                "The old man forgot the keys.".into(),
                "The young man forgot the keys.".into()
            ),
        ])
    );
}

#[test]
fn loads_annotated_and_prompt_rows() {
    let c = catalog();
    match load_dataset(&c, "BUG", "full").unwrap() {
        DatasetRows::AnnotatedSentences(rows) => {
            assert_eq!(rows.len(), 3);
            assert_eq!(rows[1], ("The engineer said she was tired.".into(), "-1".into()));
        }
        other => panic!("unexpected rows {other:?}"),
    }
    assert_eq!(
        load_dataset(&c, "BBQ", "default").unwrap(),
        DatasetRows::Prompts(vec![
            "The man and the woman walked in.".into(),
            "Two friends met for lunch.".into()
        ])
    );
}

#[test]
fn empty_file_gives_no_rows() {
    let rows = load_dataset(&catalog(), "Empty", "default").unwrap();
    assert!(rows.is_empty());
}

#[test]
fn missing_column_is_schema_error() {
    match load_dataset(&catalog(), "BUG", "gold") {
        Err(Error::Schema { row, message, .. }) => {
            assert_eq!(row, 0);
            assert!(message.contains("sentence"), "{message}");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn missing_file_and_unknown_config() {
    let c = catalog();
    assert!(matches!(
        load_dataset(&c, "Missing", "default"),
        Err(Error::File { .. })
    ));
    assert!(matches!(
        load_dataset(&c, "BUG", "silver"),
        Err(Error::UnknownConfig { .. })
    ));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(0.1),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn nonpositive() -> impl Strategy<Value = f64> {
    prop_oneof![-50.0..=0.0f64, Just(-0.0), Just(-1e-300)]
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.'\"\\\\é\u{1F600}-]{0,12}"
}

fn embedding() -> impl Strategy<Value = Record> {
    (text(), text(), text(), prop::collection::vec(finite(), 1..6)).prop_map(|(id, group, text, v)| {
        Record::Embedding(EmbeddingRecord {
            id,
            group,
            text,
            vector: Vector::new(v).unwrap(),
        })
    })
}

fn pll() -> impl Strategy<Value = Record> {
    (
        text(),
        text(),
        any::<bool>(),
        prop::collection::vec((text(), nonpositive(), any::<bool>()), 0..5),
    )
        .prop_map(|(id, pair_id, stereo, tokens)| {
            Record::Pll(PllRecord {
                id,
                pair_id,
                variant: if stereo { Variant::Stereo } else { Variant::Anti },
                tokens: tokens.iter().map(|t| t.0.clone()).collect(),
                logprobs: tokens.iter().map(|t| t.1).collect(),
                modified: tokens.iter().map(|t| t.2).collect(),
            })
        })
}

fn slot() -> impl Strategy<Value = Record> {
    (text(), text(), 0u32..5, nonpositive(), nonpositive()).prop_map(|(template_id, target_word, group_index, t, p)| {
        Record::MaskedSlot(MaskedSlotRecord {
            template_id,
            target_word,
            group_index,
            logp_target: t,
            logp_prior: p,
        })
    })
}

fn completion() -> impl Strategy<Value = Record> {
    (text(), prop::collection::vec(text(), 1..4))
        .prop_map(|(prompt_id, completions)| Record::Completion(CompletionRecord { prompt_id, completions }))
}

fn attention() -> impl Strategy<Value = Record> {
    (0u32..12, 0u32..12, 1usize..4, 1usize..5).prop_flat_map(|(layer, head, rows, cols)| {
        prop::collection::vec(prop::collection::vec(0.01..1.0f64, cols), rows).prop_map(move |raw| {
            let rows: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect();
            Record::Attention(AttentionRecord {
                layer,
                head,
                weights: Matrix::from_rows(&rows).unwrap(),
            })
        })
    })
}

fn record() -> impl Strategy<Value = Record> {
    prop_oneof![embedding(), pll(), slot(), completion(), attention()]
}

proptest! {
    #[test]
    fn write_then_parse_is_identity(records in prop::collection::vec(record(), 0..20)) {
        let mut bytes = Vec::new();
        write_records(&records, &mut bytes).unwrap();
        prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), records.len());
        let back = parse_records(bytes.as_slice()).unwrap();
        // Bitwise float comparison, so -0.0 and 0.0 are told apart.
        let again = {
            let mut b = Vec::new();
            write_records(&back, &mut b).unwrap();
            b
        };
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(again, bytes);
    }
}
