mod common;

use common::gradcheck::{run_check, MAX_REL, PER_LAYER};

#[test]
fn gradients_match_central_differences() {
    let c = run_check(7, None);
    assert!(c.checked.iter().all(|&n| n == PER_LAYER), "{:?}", c.checked);
    assert!(c.worst < MAX_REL, "max relative error {}", c.worst);
}

#[test]
fn gradients_match_with_fixed_dropout_mask() {
    let mask = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
    let c = run_check(8, Some(mask));
    assert!(c.checked.iter().all(|&n| n == PER_LAYER), "{:?}", c.checked);
    assert!(c.worst < MAX_REL, "max relative error {}", c.worst);
}
