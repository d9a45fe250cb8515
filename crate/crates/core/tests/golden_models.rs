use eigendistort::tensor::Grid2;
use eigendistort::zoo::{onoff_model, OnOffParams};

#[derive(serde::Deserialize)]
struct Golden {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

/// Reference values come from an independent array-library implementation
/// with mirror boundaries.
#[test]
fn onoff_forward_matches_golden() {
    let text = include_str!("golden/onoff_forward_9x7.json");
    let g: Golden = serde_json::from_str(text).unwrap();
    let data = (0..g.height)
        .flat_map(|i| {
            (0..g.width).map(move |j| {
                let (i, j) = (i as f64, j as f64);
                0.5 + 0.3 * (0.7 * i + 0.3 * j).sin() * (0.4 * j).cos()
            })
        })
        .collect();
    let x = Grid2::from_vec(g.height, g.width, data).unwrap();
    let m = onoff_model(&OnOffParams::default(), g.height, g.width).unwrap();
    let y = m.forward(&x).unwrap();
    assert_eq!(y.channels(), g.channels);
    for (k, (a, b)) in y.data().iter().zip(&g.values).enumerate() {
        assert!((a - b).abs() < 1e-12, "value {k}: {a} vs {b}");
    }
}
