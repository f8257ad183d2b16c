mod common;

#[test]
fn funnel_balances_with_drops() {
    common::ledger_conservation().unwrap();
}

#[test]
fn interrupted_stages_resume_to_the_same_store() {
    common::kill_and_resume().unwrap();
}
