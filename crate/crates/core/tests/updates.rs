use tracenet_core::contract::Contract;
use tracenet_core::explorer::{build_rg, ExploreOptions, ReachabilityGraph};
use tracenet_core::properties::{update_safety, UpdateReport};

fn load(name: &str) -> (Contract, ReachabilityGraph) {
    let c = Contract::load(format!(
        "{}/../../contracts/{name}.json",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap();
    let rg = build_rg(
        &c.model,
        &c.model.initial_state(),
        &ExploreOptions::default(),
    )
    .unwrap();
    (c, rg)
}

fn update(old: &str, new: &str) -> UpdateReport {
    let (a, ra) = load(old);
    let (b, rb) = load(new);
    update_safety((&a.model, &ra), (&b.model, &rb), &a.policy).unwrap()
}

#[test]
fn cooperative_close_is_a_safe_update() {
    let r = update("atomic_swap_htlc", "update_coop_close");
    assert!(r.new_holds);
    assert!(r.lost.is_empty());
    assert!(r.safe);
}

#[test]
fn dropping_the_abort_path_loses_outcomes() {
    let r = update("atomic_swap_htlc", "update_no_abort");
    assert!(
        r.new_holds,
        "the reduced contract is still trustless on its own"
    );
    assert!(!r.lost.is_empty());
    assert!(!r.safe);
}

#[test]
fn identity_update_changes_nothing() {
    let r = update("update_no_abort", "update_no_abort");
    assert!(r.safe && r.lost.is_empty() && r.gained.is_empty());
}
