//! Finite-difference and explicit-inverse checks shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use uota::evalsuite::softmax_objective;
use uota::geometry::{instance_means, mahalanobis_sq, pooled_covariance, CovMode, FeatureMatrix, MeanSource, Ridge};
use uota::losses::{info_nce_with_grad, pairwise_l2_with_grad};
use uota::trainer::EncoderState;

pub const FD_STEP: f64 = 1e-5;

pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + FD_STEP;
            let up = f(&p);
            p[k] = x[k] - FD_STEP;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, floored so exact zeros compare as equal.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(1e-8)
}

pub fn gauss<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn pairwise_case(a: &[f64], b: &[f64]) -> f64 {
    let bv = Array1::from(b.to_vec());
    let (_, g) = pairwise_l2_with_grad(ArrayView1::from(a), bv.view()).unwrap();
    let fd = central_diff(|x| pairwise_l2_with_grad(ArrayView1::from(x), bv.view()).unwrap().0, a);
    rel_err(g.as_slice().unwrap(), &fd)
}

pub fn info_nce_case(q: &[f64], pos: &[f64], negs: &[Vec<f64>], temp: f64) -> f64 {
    let p = Array1::from(pos.to_vec());
    let ns: Vec<Array1<f64>> = negs.iter().map(|v| Array1::from(v.clone())).collect();
    let views: Vec<ArrayView1<'_, f64>> = ns.iter().map(|v| v.view()).collect();
    let (_, g) = info_nce_with_grad(ArrayView1::from(q), p.view(), &views, temp).unwrap();
    let fd = central_diff(|x| info_nce_with_grad(ArrayView1::from(x), p.view(), &views, temp).unwrap().0, q);
    rel_err(g.as_slice().unwrap(), &fd)
}

/// Gradient of `Σ C ⊙ encode(x)` w.r.t. every encoder parameter.
pub fn encoder_case(state: &EncoderState, x: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    let (_, cache) = state.forward(x.view()).unwrap();
    let g = state.backward(&cache, upstream).flat();
    let mut probe = state.clone();
    let fd = central_diff(
        |p| {
            probe.set_params_flat(p);
            (&probe.encode(x.view()).unwrap() * upstream).sum()
        },
        &state.params_flat(),
    );
    rel_err(&g, &fd)
}

pub fn random_encoder_case<R: Rng>(rng: &mut R) -> f64 {
    let input = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
    let out = rng.random_range(2..=5);
    let n = rng.random_range(1..=5);
    let state = EncoderState::init(input, &hidden, out, rng);
    let x = Array2::from_shape_vec((n, input), gauss(rng, n * input)).unwrap();
    let c = Array2::from_shape_vec((n, out), gauss(rng, n * out)).unwrap();
    encoder_case(&state, &x, &c)
}

/// Softmax probe objective: gradient w.r.t. weights and biases together.
pub fn probe_case(w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>, y: &[usize], l2: f64) -> f64 {
    let (_, gw, gb) = softmax_objective(w.view(), b.view(), x.view(), y, l2);
    let analytic: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
    let (d, k) = w.dim();
    let params: Vec<f64> = w.iter().chain(b.iter()).copied().collect();
    let fd = central_diff(
        |p| {
            let wp = Array2::from_shape_vec((d, k), p[..d * k].to_vec()).unwrap();
            let bp = Array1::from(p[d * k..].to_vec());
            softmax_objective(wp.view(), bp.view(), x.view(), y, l2).0
        },
        &params,
    );
    rel_err(&analytic, &fd)
}

pub fn random_probe_case<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.random_range(1..=5);
    let k = rng.random_range(2..=4);
    let n = rng.random_range(2..=12);
    let w = Array2::from_shape_vec((d, k), gauss(rng, d * k)).unwrap();
    let b = Array1::from(gauss(rng, k));
    let x = Array2::from_shape_vec((n, d), gauss(rng, n * d)).unwrap();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let l2 = rng.random_range(0.0..0.1);
    probe_case(&w, &b, &x, &y, l2)
}

pub fn random_pairwise_case<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.random_range(2..=8);
    pairwise_case(&gauss(rng, d), &gauss(rng, d))
}

pub fn random_info_nce_case<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.random_range(2..=8);
    let k = rng.random_range(1..=6);
    let negs: Vec<Vec<f64>> = (0..k).map(|_| gauss(rng, d)).collect();
    let temp = rng.random_range(0.1..1.0);
    info_nce_case(&gauss(rng, d), &gauss(rng, d), &negs, temp)
}

/// Inverse of a 1×1, 2×2 or 3×3 matrix by cofactors.
pub fn explicit_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    match n {
        1 => Array2::from_elem((1, 1), 1.0 / a[[0, 0]]),
        2 => {
            let det = a[[0, 0]] * a[[1, 1]] - a[[0, 1]] * a[[1, 0]];
            ndarray::array![[a[[1, 1]], -a[[0, 1]]], [-a[[1, 0]], a[[0, 0]]]] / det
        }
        3 => {
            let c = |r: usize, s: usize| {
                let rows: Vec<usize> = (0..3).filter(|&i| i != r).collect();
                let cols: Vec<usize> = (0..3).filter(|&j| j != s).collect();
                let minor = a[[rows[0], cols[0]]] * a[[rows[1], cols[1]]] - a[[rows[0], cols[1]]] * a[[rows[1], cols[0]]];
                if (r + s) % 2 == 0 {
                    minor
                } else {
                    -minor
                }
            };
            let det: f64 = (0..3).map(|s| a[[0, s]] * c(0, s)).sum();
            Array2::from_shape_fn((3, 3), |(i, j)| c(j, i) / det)
        }
        _ => panic!("explicit inverse only for D <= 3"),
    }
}

/// Largest relative gap between the triangular-solve distance and `dᵀ Σ⁻¹ d`
/// with an explicit inverse, over every row of a random batch.
///
/// Scatter matrices are full rank here: on a rank-deficient scatter only the
/// ridge keeps Σ invertible, and the cofactor inverse loses more digits than
/// the factorization it is meant to check.
pub fn random_inverse_oracle_case<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.random_range(1..=3);
    let local = rng.random_bool(0.5);
    let (n, m) = if local {
        (rng.random_range(1..=4), rng.random_range(d + 2..=d + 4))
    } else {
        (rng.random_range(d + 2..=8), rng.random_range(2..=4))
    };
    let mix = Array2::from_shape_vec((d, d), gauss(rng, d * d)).unwrap() + Array2::<f64>::eye(d) * 2.0;
    let raw = Array2::from_shape_vec((n * m, d), gauss(rng, n * m * d)).unwrap().dot(&mix);
    let batch = FeatureMatrix::from_layout(raw, m).unwrap();
    let means = instance_means(&batch, MeanSource::ViewAverage, None).unwrap();
    let mode = if local { CovMode::Local } else { CovMode::Global };
    let cov = pooled_covariance(&batch, &means, mode, Ridge::Auto).unwrap();
    let mut worst = 0.0f64;
    for r in 0..batch.num_rows() {
        let i = batch.instance_index()[r];
        let got = mahalanobis_sq(batch.row(r), means.means.row(i), &cov, i).unwrap();
        let diff = &batch.row(r) - &means.means.row(i);
        let want = diff.dot(&explicit_inverse(cov.matrix_for(i)).dot(&diff));
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    worst
}
