use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn sketch_log_q_matches_counts_for_a_wide_sketch() {
    let v = parse(&seqrec_demo::sketch_stream(1 << 16, 4, 100, 1.2, 10_000, 5, 9));
    assert_eq!(v["max_overestimate"], 0, "{v}");
    for r in v["rows"].as_array().unwrap() {
        assert_eq!(r["log_q"], r["true_log_q"]);
    }
}

#[test]
fn time_features_are_on_the_unit_circle() {
    let v = parse(&seqrec_demo::time_features(1_600_000_000.0));
    for p in v["periods"].as_array().unwrap() {
        let (c, s) = (p["cos"].as_f64().unwrap(), p["sin"].as_f64().unwrap());
        assert!((c * c + s * s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn hnsw_rejects_oversized_corpora() {
    let v = parse(&seqrec_demo::hnsw_recall(seqrec_demo::MAX_PINS + 1, 8, 8, 10, 5, 1, 0));
    assert!(v["error"].as_str().unwrap().contains("pins"));
}

#[test]
fn page_references_every_export() {
    let html = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/index.html")).unwrap();
    for f in ["time_features", "sketch_stream", "hnsw_recall"] {
        assert!(html.contains(f), "{f}");
    }
}
