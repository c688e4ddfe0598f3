//! Regression checks on the bundled Adult census file.

use pfl::data::{load_adult, partition};

const ADULT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/adult.csv");

#[test]
fn adult_partition_shape() {
    let rows = load_adult(ADULT).unwrap();
    assert_eq!(rows.len(), 48_842);
    assert_eq!(rows.iter().filter(|r| r.label == 1).count(), 11_687);

    let ds = partition(&rows, 16, 3052, 0).unwrap();
    assert_eq!(ds.feature_dim, 108);
    for d in &ds.devices {
        assert_eq!((d.train.len(), d.test.len(), d.val.len()), (2441, 305, 306));
    }

    let train = ds.train_union();
    for k in 0..6 {
        let mean = train.iter().map(|e| e.features[k]).sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|e| (e.features[k] - mean).powi(2)).sum::<f64>() / train.len() as f64;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9, "column {k}");
    }
    // one indicator per categorical column
    for e in &train {
        assert_eq!(e.features[6..].iter().sum::<f64>(), 8.0);
    }

    assert_eq!(partition(&rows, 16, 3052, 0).unwrap(), ds);
    assert_ne!(partition(&rows, 16, 3052, 1).unwrap().devices[0], ds.devices[0]);
}
