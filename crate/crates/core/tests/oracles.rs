//! Loss and gradient values frozen from an independent 50-digit evaluation
//! of the same small models.

use pfl::model::{self, Example, ModelParams};

fn examples() -> Vec<Example> {
    (0..5)
        .map(|j| {
            let jf = j as f64;
            Example::new(vec![(jf + 1.0).cos(), jf / 2.0 - 1.0, (j % 3) as f64 - 1.0], j % 2)
        })
        .collect()
}

fn params(shape: Vec<usize>, scale: f64) -> ModelParams {
    let d: usize = shape.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    ModelParams::new(shape, (0..d).map(|k| scale * ((k + 1) as f64).sin()).collect()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= 1e-13 + 1e-12 * w.abs(), "coordinate {k}: {g} vs {w}");
    }
}

const MLP_GRAD: [f64; 26] = [
    0.015865890119158222, 0.10882833175898848, -0.12058572194191636, -0.003989738145459131,
    -0.018202004436271527, -0.026896033984189615, 0.02980177700913759, -0.003042688122696987,
    -0.02259609071020758, -0.031417891720397224, 0.034812158688485514, -0.003930536734173156,
    0.013807918162335474, 0.06392603950374766, -0.07083236046949878, -0.001077419755610409,
    -0.1297198976885928, 0.1297198976885928, -0.24491930210715365, 0.24491930210715365,
    -0.09262009094185178, 0.09262009094185178, 0.040910226237139, -0.040910226237139,
    -0.2500148295792096, 0.2500148295792096,
];

const MLP_CLIPPED_GRAD: [f64; 26] = [
    0.005375708873513496, 0.036986385221685396, -0.040982250594964124, -0.0013605985033157528,
    -0.00041863502506035, 0.011088577512683793, -0.012286544349839643, -0.0009806637693108948,
    -0.00417029937719466, 0.002368701864979408, -0.002624607212451498, -0.0013607236745669907,
    -0.0033330293270739594, -0.008226982939457155, 0.00911579421574964, -0.0003003019320273994,
    -0.008582546958764183, 0.008582546958764183, -0.02764494085645473, 0.02764494085645473,
    -0.0062720228260023415, 0.0062720228260023415, 0.014758963784821683, -0.014758963784821683,
    -0.05530860105845595, 0.05530860105845595,
];

#[test]
fn mlp_loss_and_gradient() {
    let theta = params(vec![3, 4, 2], 0.7);
    let ex = examples();
    let loss = model::loss(&theta, &ex).unwrap();
    assert!((loss - 0.885_879_413_795_481_1).abs() < 1e-14);
    assert_close(&model::gradient(&theta, &ex).unwrap(), &MLP_GRAD);
}

#[test]
fn mlp_clipped_gradient() {
    let theta = params(vec![3, 4, 2], 0.7);
    let g = model::clipped_gradient(&theta, &examples(), Some(0.5)).unwrap();
    assert!((g.loss - 0.885_879_413_795_481_1).abs() < 1e-14);
    assert_close(&g.gradient, &MLP_CLIPPED_GRAD);
}

#[test]
fn saturated_logits_stay_exact() {
    let theta = params(vec![3, 2], 300.0);
    let ex = examples();
    let loss = model::loss(&theta, &ex).unwrap();
    assert!((loss - 142.355_856_895_417_676).abs() < 1e-11 * 142.4);
    let want = [-0.040790686026261236, 0.040790686026261236, 0.3, -0.3, -0.2, 0.2, -0.2, 0.2];
    assert_close(&model::gradient(&theta, &ex).unwrap(), &want);
}
