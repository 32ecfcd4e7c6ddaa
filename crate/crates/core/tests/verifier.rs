use std::path::Path;

use vulaug_core::generator::{GenerationRecord, GenerationStatus};
use vulaug_core::verifier::{filter_generated, verify, Reason, Verifier};

fn valid_functions() -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/valid_functions.c");
    std::fs::read_to_string(path)
        .unwrap()
        .split("//----\n")
        .map(|s| s.trim_end().to_owned())
        .collect()
}

fn ok_record(id: String, code: String) -> GenerationRecord {
    GenerationRecord {
        prompt_id: id,
        attempts: 1,
        raw_response: None,
        extracted_code: Some(code),
        input_tokens: 0,
        output_tokens: 0,
        status: GenerationStatus::Ok,
    }
}

#[test]
fn fixture_has_fifty_functions() {
    assert_eq!(valid_functions().len(), 50);
}

#[test]
fn accepts_every_valid_fixture_without_errors() {
    for (i, code) in valid_functions().iter().enumerate() {
        let v = verify(code);
        assert!(v.accepted, "fixture {i} rejected: {v:?}\n{code}");
        assert_eq!(v.error_count, 0, "fixture {i}\n{code}");
    }
}

#[test]
fn rejects_degenerate_outputs() {
    assert_eq!(verify("").reasons, vec![Reason::Empty]);
    assert_eq!(verify("Sure! Here is the code you asked for.").reasons, vec![Reason::NoFunction]);
    assert!(verify("int f(){ if (x { return 1; }").reasons.contains(&Reason::UnbalancedDelimiters));
    assert!(verify("int f(void) { return g(1]; }").reasons.contains(&Reason::UnbalancedDelimiters));
    assert!(verify("int f(void) { return 0; }}").reasons.contains(&Reason::UnbalancedDelimiters));
}

#[test]
fn fixtures_stay_accepted_at_any_looser_threshold() {
    for code in valid_functions() {
        for t in [0.0, 1.0, 10.0, 100.0, f64::INFINITY] {
            assert!(Verifier::new(t).verify(&code).accepted);
        }
    }
}

#[test]
fn exactly_the_malformed_records_are_rejected() {
    let fixtures = valid_functions();
    let malformed = [7usize, 23, 41, 66, 98];
    let records: Vec<_> = (0..100)
        .map(|i| {
            let mut code = fixtures[i % fixtures.len()].clone();
            if malformed.contains(&i) {
                code.truncate(code.rfind('}').unwrap());
            }
            ok_record(format!("p{i}"), code)
        })
        .collect();
    let out = filter_generated(&records);
    let rejected: Vec<&str> = out.rejected.iter().map(|(r, _)| r.prompt_id.as_str()).collect();
    assert_eq!(rejected, vec!["p7", "p23", "p41", "p66", "p98"]);
    assert_eq!(out.rejection_rate(), 0.05);
    assert_eq!(out.accepted.len(), 95);
    let mut ids: Vec<_> = out.accepted.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 95);
}
