use super::*;
use crate::diffmodel::{directional_fd, default_fd_step};
use crate::fixtures::fixture_image;
use crate::tensor::{gaussian_noise, gaussian_noise2, Grid2, Grid3};

fn small_channel() -> LgnChannel {
    LgnChannel {
        sigma_center: 0.6,
        sigma_surround: 1.6,
        lum_amplitude: 1.2,
        lum_sigma: 1.1,
        con_amplitude: 3.0,
        con_sigma: 0.9,
    }
}

fn all_models(h: usize, w: usize) -> Vec<(ModelKind, ModelChain)> {
    let c = small_channel();
    let mut off = c;
    off.sigma_center = 0.8;
    off.con_amplitude = 1.5;
    vec![
        (ModelKind::Mse, mse_model(h, w)),
        (ModelKind::Ln, ln_model(&c, h, w).unwrap()),
        (ModelKind::Lg, lg_model(&c, h, w).unwrap()),
        (ModelKind::Lgg, lgg_model(&c, h, w).unwrap()),
        (
            ModelKind::OnOff,
            onoff_model(&OnOffParams { on: c, off }, h, w).unwrap(),
        ),
    ]
}

fn max_diff(a: &Grid3, b: &Grid3) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn constant_image_through_ln_is_log_two() {
    let x = Grid2::filled(12, 12, 0.37);
    let y = ln_model(&small_channel(), 12, 12).unwrap().forward(&x).unwrap();
    assert!(y
        .data()
        .iter()
        .all(|v| (v - std::f64::consts::LN_2).abs() < 1e-10));
}

#[test]
fn reduction_chain_with_zero_gains() {
    let mut c = small_channel();
    c.lum_amplitude = 0.0;
    c.con_amplitude = 0.0;
    let x = fixture_image(4, 12, 10);
    let ln = ln_model(&c, 12, 10).unwrap().forward(&x).unwrap();
    let lg = lg_model(&c, 12, 10).unwrap().forward(&x).unwrap();
    let lgg = lgg_model(&c, 12, 10).unwrap().forward(&x).unwrap();
    assert!(max_diff(&ln, &lg) <= 1e-12);
    // the contrast stage keeps 1 + a_C sqrt(.) with a_C = 0, so it is exact too
    assert!(max_diff(&lg, &lgg) <= 1e-12);
}

#[test]
fn onoff_on_channel_matches_lgg() {
    let c = small_channel();
    let x = fixture_image(5, 12, 12);
    let lgg = lgg_model(&c, 12, 12).unwrap().forward(&x).unwrap();
    let oo = onoff_model(&OnOffParams::symmetric(c), 12, 12)
        .unwrap()
        .forward(&x)
        .unwrap();
    assert_eq!(oo.channels(), 2);
    let d = lgg
        .plane(0)
        .iter()
        .zip(oo.plane(0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d <= 1e-12);
}

#[test]
fn onoff_pre_softplus_is_odd() {
    let c = small_channel();
    let chain = onoff_model(&OnOffParams::symmetric(c), 12, 12).unwrap();
    let x = fixture_image(6, 12, 12);
    let mut z = x.to_grid3();
    let stages = chain.stages();
    for s in &stages[..stages.len() - 1] {
        z = s.forward(&z);
    }
    let d = z
        .plane(0)
        .iter()
        .zip(z.plane(1))
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    assert!(d <= 1e-12, "{d}");
}

#[test]
fn onoff_has_twelve_trainable_parameters() {
    let chain = onoff_model(&OnOffParams::default(), 8, 8).unwrap();
    assert_eq!(chain.param_count(), TRAINABLE_ONOFF_PARAMS);
    let spec = ModelSpec::onoff(&OnOffParams::default()).unwrap();
    assert_eq!(spec.theta.len(), 12);
}

#[test]
fn invalid_lgn_parameters_are_rejected() {
    let mut c = small_channel();
    c.sigma_center = 2.0;
    assert!(matches!(ln_model(&c, 8, 8), Err(Error::ParamDomain(_))));
    let mut c = small_channel();
    c.lum_amplitude = -1.0;
    assert!(matches!(lg_model(&c, 8, 8), Err(Error::ParamDomain(_))));
    assert!(ln_model(&c, 8, 8).is_ok());
}

#[test]
fn cnn_weight_count_and_reconciliation() {
    let p = CnnParams::zeros();
    assert_eq!(p.weight_count(), CNN_CONV_WEIGHTS);
    assert_eq!(
        CNN_CONV_WEIGHTS,
        25 * (4 + 4 * 16 + 16 * 64 + 64 * 256)
    );
    assert_eq!(
        CNN_CONV_WEIGHTS + CNN_FROZEN_STATS_PER_LAYER * p.layers.len(),
        CNN_REPORTED_PARAMS
    );
}

#[test]
fn cnn_output_dims_and_zero_weights() {
    let chain = cnn_model(&CnnParams::zeros(), 64, 64).unwrap();
    assert_eq!(chain.output_shape(), crate::tensor::Shape::new(256, 4, 4));
    let y = chain.forward(&fixture_image(1, 64, 64)).unwrap();
    assert!(y
        .data()
        .iter()
        .all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    assert!(matches!(
        cnn_model(&CnnParams::zeros(), 15, 64),
        Err(Error::Shape(_))
    ));
}

#[test]
fn cnn_layer_one_translation_covariance() {
    let p = CnnParams::random(3, 1.0);
    let layer = ConvLayer::new(p.layers[0].clone(), CNN_STRIDE, 1.0).unwrap();
    let x = fixture_image(9, 32, 32);
    let shifted = Grid2::from_fn(32, 32, |i, j| x.get(i, (j + 30) % 32));
    let a = layer.raw(&x.to_grid3());
    let b = layer.raw(&shifted.to_grid3());
    // interior only: mirror effects reach 5 pixels in from each border
    for o in 0..a.channels() {
        for i in 3..13 {
            for j in 3..12 {
                let va = a.plane(o)[i * 16 + j];
                let vb = b.plane(o)[i * 16 + j + 1];
                assert!((va - vb).abs() < 1e-12, "({o},{i},{j})");
            }
        }
    }
}

#[test]
fn calibrated_divisors_normalize_layer_one() {
    let mut p = CnnParams::random(5, 1.0);
    let imgs: Vec<Grid2> = (0..3).map(|s| fixture_image(s, 32, 32)).collect();
    p.calibrate_divisors(&imgs).unwrap();
    let layer = ConvLayer::new(p.layers[0].clone(), CNN_STRIDE, p.divisors[0]).unwrap();
    let outs: Vec<f64> = imgs
        .iter()
        .flat_map(|x| layer.forward(&x.to_grid3()).into_vec())
        .collect();
    let n = outs.len() as f64;
    let mean = outs.iter().sum::<f64>() / n;
    let var = outs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn every_model_passes_adjoint_and_fd() {
    let (h, w) = (10, 9);
    let x = fixture_image(11, h, w);
    let mut models = all_models(h, w);
    models.push((
        ModelKind::Cnn,
        cnn_model(&CnnParams::random(2, 1.0), 16, 16).unwrap(),
    ));
    for (kind, chain) in &models {
        let (ch, cw) = (chain.input_shape().height, chain.input_shape().width);
        let x = if ch == h { x.clone() } else { fixture_image(11, ch, cw) };
        let lin = chain.linearize(&x).unwrap();
        for k in 0..20 {
            let v = gaussian_noise2(100 + k, ch, cw);
            let u = gaussian_noise(200 + k, chain.output_shape());
            let jv = lin.jvp(&v).unwrap();
            let lhs = u.dot(&jv);
            let rhs = lin.vjp(&u).unwrap().dot(&v);
            assert!(
                (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()),
                "{kind}: {lhs} vs {rhs}"
            );
        }
        let v = gaussian_noise2(7, ch, cw).scaled(0.1);
        let jv = lin.jvp(&v).unwrap();
        let fd = directional_fd(chain, &x, &v, default_fd_step(&x)).unwrap();
        let err = fd.add_scaled(-1.0, &jv).norm() / jv.norm();
        assert!(err <= 1e-4, "{kind}: fd rel err {err}");
    }
}

#[test]
fn spec_round_trip_and_build() {
    for kind in ModelKind::ALL {
        let spec = ModelSpec::default_for(kind, 1).unwrap();
        let chain = spec.build(16, 16).unwrap();
        assert_eq!(chain.param_count(), spec.theta.len(), "{kind}");
        assert_eq!(ModelKind::parse(kind.as_str()).unwrap(), kind);
    }
    let c = small_channel();
    let spec = ModelSpec::lgg(&c).unwrap();
    let back = spec.lgn_channels().unwrap()[0];
    for (a, b) in [
        (c.sigma_center, back.sigma_center),
        (c.sigma_surround, back.sigma_surround),
        (c.lum_amplitude, back.lum_amplitude),
        (c.con_sigma, back.con_sigma),
    ] {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(ModelKind::parse("vgg").is_err());
    assert!(ModelSpec::ln(&c).unwrap().with_theta(vec![0.0; 3]).build(8, 8).is_err());
}

#[test]
fn onoff_layout_matches_chain_param_order() {
    let on = small_channel();
    let mut off = on;
    off.sigma_center = 0.9;
    off.lum_sigma = 2.0;
    let spec = ModelSpec::onoff(&OnOffParams { on, off }).unwrap();
    let p = spec.constrained().unwrap();
    assert_eq!(p[2], 0.9);
    assert!((p[5] - 1.1).abs() < 1e-12 && (p[7] - 2.0).abs() < 1e-12);
}
