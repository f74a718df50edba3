use denergy_bench::{random_features, random_rows};

#[test]
fn fixtures_have_requested_shapes() {
    let rows = random_rows(7, 5, 1);
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.classes() == 5 && r.values().iter().all(|v| v.abs() <= 1.0)));
    let f = random_features(6, 4, 2);
    assert_eq!((f.rows(), f.dim()), (6, 4));
    assert!(f.is_normalized());
}

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(random_rows(3, 4, 9), random_rows(3, 4, 9));
    assert_eq!(random_features(3, 4, 9), random_features(3, 4, 9));
}
