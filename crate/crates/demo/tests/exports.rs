use migrate_rum_demo::{choice_outcome, distance_curve, icc_values};

#[test]
fn symmetric_cities_split_movers_evenly() {
    let out = choice_outcome(&[1.0; 3], &[0.0; 3], 0.0, 2.0, 0.9, 0, 0).unwrap();
    assert!((out.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((out.probabilities[1] - out.probabilities[2]).abs() < 1e-12);
    // Staying saves the moving cost: odds of staying versus one destination are e².
    assert!((out.probabilities[0] / out.probabilities[1] - 2f64.exp()).abs() < 1e-9);
}

#[test]
fn better_trend_attracts_movers() {
    let out = choice_outcome(&[1.0; 3], &[0.0, 0.0, 1.0], 0.5, 2.0, 0.9, 0, 0).unwrap();
    assert!(out.probabilities[2] > out.probabilities[1]);
    assert!(choice_outcome(&[1.0; 2], &[0.0], 0.5, 2.0, 0.9, 0, 0).is_err());
    assert!(choice_outcome(&[1.0; 2], &[0.0; 2], 0.5, 2.0, 0.9, 5, 0).is_err());
}

#[test]
fn distance_curve_reproduces_textbook_ratios() {
    let pts = distance_curve(0.0, 1.0, 9.0, 9, 1.0).unwrap();
    assert_eq!(pts.len(), 9);
    assert!((pts[0].log_distance - 2f64.ln()).abs() < 1e-12);
    assert!((pts[8].distance - 9.0).abs() < 1e-12);
    assert!(distance_curve(0.0, 1.0, 1.0, 5, 1.0).is_err());
}

#[test]
fn icc_export_matches_core() {
    let v = icc_values(&[1.6046, 0.2416]).unwrap();
    assert!((v[1] - 0.3595).abs() < 5e-5);
    assert!(icc_values(&[-1.0]).is_err());
}
