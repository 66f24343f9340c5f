mod common;

use stedr::metrics::bh_adjust;

#[test]
fn metrics_match_brute_force_definitions() {
    common::check_metrics_against_oracles(1000, 20, 1e-9).unwrap();
}

#[test]
fn bh_worked_example_is_exact() {
    assert_eq!(bh_adjust(&[0.01, 0.04, 0.03]).unwrap(), vec![0.03, 0.04, 0.04]);
    assert_eq!(common::oracle::bh(&[0.01, 0.04, 0.03]), vec![0.03, 0.04, 0.04]);
}

#[test]
fn oracles_agree_with_hand_values() {
    assert_eq!(common::oracle::pehe(&[1.0, 2.0], &[0.0, 1.0]), 1.0);
    assert_eq!(common::oracle::eps_ate(&[1.0, 2.0], &[0.0, 1.0]), 1.0);
    assert_eq!(common::oracle::v_within_across(&[0.0, 0.0, 2.0, 2.0], &[0, 0, 2, 2], 3), (0.0, 1.0));
    let auc = common::oracle::weighted_auc(&[1, 1, 0, 0], &[0.9, 0.2, 0.8, 0.1], &[1.0; 4]);
    assert_eq!(auc, 0.75);
}
