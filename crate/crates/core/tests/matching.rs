mod common;

use tritemp_core::pair_decoder::hungarian;

#[test]
fn two_by_two_example() {
    let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    assert_eq!(m.assignment, vec![(0, 0), (1, 1)]);
    assert_eq!(m.total_cost, 2.0);
}

#[test]
fn rectangular_and_degenerate() {
    let m = hungarian(&[vec![5.0, 1.0, 3.0]]).unwrap();
    assert_eq!(m.assignment, vec![(0, 1)]);
    let m = hungarian(&[vec![4.0], vec![2.0], vec![3.0]]).unwrap();
    assert_eq!(m.assignment, vec![(1, 0)]);
    assert!(hungarian(&[]).unwrap().assignment.is_empty());
    assert!(hungarian(&[vec![1.0, f64::NAN]]).is_err());
    assert!(hungarian(&[vec![1.0, 2.0], vec![1.0]]).is_err());
}

#[test]
fn hungarian_equals_brute_force() {
    let mut r = common::rng(17);
    for _ in 0..1000 {
        common::hungarian_trial(&mut r).unwrap();
    }
}
