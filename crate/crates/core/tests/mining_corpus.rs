mod common;

#[test]
fn corpus_yields_exactly_the_positives() {
    common::pattern_oracle().unwrap();
}
