use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;

fn meta(i: usize) -> Arc<CellMeta> {
    Arc::new(
        CellMeta::new(
            format!("C{i}"),
            format!("S{}", i / 3),
            format!("S{}-A", i / 3),
            (i as f64 * 10.0, 0.0),
            i % 8,
            8 + i % 7,
        )
        .unwrap(),
    )
}

pub(crate) fn random_sample(k: usize, t1: usize, l: usize, seed: u64) -> GraphSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut series = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.5..4.0)).collect() };
    let context_target = series(t1);
    let pred_target = series(l);
    let context_neighbors = (0..k).map(|_| series(t1)).collect();
    let pred_neighbors = (0..k).map(|_| series(l)).collect();
    GraphSample {
        target: meta(0),
        neighbors: (1..=k).map(meta).collect(),
        anchor: 1000,
        context_target,
        context_neighbors,
        pred_neighbors,
        pred_target,
        target_context_mask: vec![true; t1],
        target_pred_mask: vec![true; l],
    }
}

fn dims(t: usize, l: usize, k: usize) -> Dims {
    Dims {
        lookback: t,
        horizon: l,
        k,
        attr_width: ATTR_WIDTH,
    }
}

fn small(variant: Variant, seed: u64) -> PredictorParams {
    let hyper = Hyper {
        scale_hidden: 12,
        embed_hidden: 8,
        d_k: 6,
        readout_hidden: 8,
        score: AttentionScore::QueryKey,
    };
    PredictorParams::new(dims(8, 3, 4), hyper, variant, seed).unwrap()
}

fn force_scale(p: &mut PredictorParams, sc: f64, sh: f64) {
    let nn = p.scale_nn.as_mut().unwrap();
    nn.output.w.iter_mut().for_each(|v| *v = 0.0);
    nn.output.b = vec![sc, sh];
}

fn force_uniform_attention(p: &mut PredictorParams) {
    p.key_embed.output.w.iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn cell_vector_widths() {
    let m = meta(1);
    assert_eq!(cell_vector(&m, &[0.0; 168], &dims(167, 24, 200)).unwrap().len(), 183);
    assert_eq!(cell_vector(&m, &[0.0; 48], &dims(47, 12, 20)).unwrap().len(), 63);
    assert!(matches!(
        cell_vector(&m, &[0.0; 47], &dims(47, 12, 20)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn cell_vector_of_zeros_is_zero() {
    let mut m = (*meta(1)).clone();
    m.attrs = [0; ATTR_WIDTH];
    let v = cell_vector(&m, &[0.0; 9], &dims(8, 3, 4)).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn cell_vector_appends_attributes() {
    let m = meta(3);
    let ctx: Vec<f64> = (0..9).map(f64::from).collect();
    let v = cell_vector(&m, &ctx, &dims(8, 3, 4)).unwrap();
    assert_eq!(&v[..9], ctx.as_slice());
    assert_eq!(&v[9..], m.attrs_f64().as_slice());
}

#[test]
fn auto_scale_identity_when_forced() {
    let mut p = small(Variant::Full, 1);
    force_scale(&mut p, 1.0, 0.0);
    let s = random_sample(4, 9, 3, 2);
    let d = p.dims;
    let ct = cell_vector(&s.target, &s.context_target, &d).unwrap();
    let cj = cell_vector(&s.neighbors[0], &s.context_neighbors[0], &d).unwrap();
    let a = auto_scale(&p, &ct, &cj).unwrap();
    assert_eq!((a.sc, a.sh), (1.0, 0.0));
    assert_eq!(a.scaled, cj);
}

#[test]
fn auto_scale_affine_example() {
    let mut p = PredictorParams::new(dims(2, 1, 1), Hyper::default(), Variant::Full, 5).unwrap();
    force_scale(&mut p, 2.0, -1.0);
    let m = meta(1);
    let ct = cell_vector(&m, &[1.0, 1.0, 1.0], &p.dims).unwrap();
    let cj = cell_vector(&m, &[0.0, 0.5, 1.0], &p.dims).unwrap();
    let a = auto_scale(&p, &ct, &cj).unwrap();
    assert_eq!(&a.scaled[..3], &[-1.0, 0.0, 1.0]);
    assert_eq!(&a.scaled[3..], &cj[3..]);
}

#[test]
fn auto_scale_random_matches_outside_affine() {
    let p = small(Variant::Full, 11);
    let s = random_sample(4, 9, 3, 12);
    let d = p.dims;
    let ct = cell_vector(&s.target, &s.context_target, &d).unwrap();
    for j in 0..4 {
        let cj = cell_vector(&s.neighbors[j], &s.context_neighbors[j], &d).unwrap();
        let a = auto_scale(&p, &ct, &cj).unwrap();
        // plain forward over the concatenated pair, independent of the split first layer
        let mut pair = cj.clone();
        pair.extend_from_slice(&ct);
        let out = p.scale_nn.as_ref().unwrap().forward(&pair);
        assert_abs_diff_eq!(a.sc, out[0], epsilon = 1e-12);
        assert_abs_diff_eq!(a.sh, out[1], epsilon = 1e-12);
        for t in 0..9 {
            assert_abs_diff_eq!(a.scaled[t], cj[t] * a.sc + a.sh, epsilon = 1e-15);
        }
        assert_eq!(&a.scaled[9..], &cj[9..]);
    }
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[3.7]).unwrap(), vec![1.0]);
    let a = softmax(&[0.0, 3f64.ln()]).unwrap();
    assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-12);
    assert!(matches!(softmax(&[]), Err(Error::EmptyNeighborhood)));
    let big = softmax(&[1000.0, 999.0]).unwrap();
    assert!(big.iter().all(|v| v.is_finite()));
}

#[test]
fn attention_examples() {
    let p = small(Variant::Full, 3);
    let s = random_sample(4, 9, 3, 4);
    let ct = cell_vector(&s.target, &s.context_target, &p.dims).unwrap();
    let cj = cell_vector(&s.neighbors[0], &s.context_neighbors[0], &p.dims).unwrap();
    assert_eq!(attention(&p, &ct, &[cj.clone()]).unwrap(), vec![1.0]);
    let a = attention(&p, &ct, &vec![cj; 4]).unwrap();
    for v in a {
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
    }
    assert!(matches!(attention(&p, &ct, &[]), Err(Error::EmptyNeighborhood)));
}

#[test]
fn readout_examples() {
    let (x, s) = readout(&[0.5, 0.5], &[1.0, 1.0], &[0.0, 0.0], &[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
    assert_eq!(x, vec![1.0, 1.0]);
    for v in s {
        assert_abs_diff_eq!(v, 2f64.sqrt(), epsilon = 1e-12);
    }
    let (x, s) = readout(
        &[0.2, 0.3, 0.5],
        &[1.0; 3],
        &[0.0; 3],
        &[vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]],
    )
    .unwrap();
    assert_abs_diff_eq!(x[0], 1.5, epsilon = 1e-15);
    assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-15);
    assert!(s.iter().all(|&v| v.abs() < 1e-7));
    assert!(matches!(
        readout(&[1.0], &[1.0], &[0.0], &[vec![1.0]]),
        Err(Error::DegenerateContext)
    ));
}

#[test]
fn readout_uses_each_neighbors_own_transform() {
    let (x, _) = readout(&[0.5, 0.5], &[2.0, 1.0], &[0.0, 1.0], &[vec![1.0], vec![1.0]]).unwrap();
    assert_eq!(x, vec![2.0]);
}

proptest! {
    #[test]
    fn weighted_std_matches_scalar_formula(
        k in 2usize..=8,
        l in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = softmax(&scores).unwrap();
        let xs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..l).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let st = weighted_stats(&alpha, &refs).unwrap();
        let v1: f64 = alpha.iter().sum();
        let v2: f64 = alpha.iter().map(|a| a * a).sum();
        for t in 0..l {
            let mut mean = 0.0;
            for j in 0..k {
                mean += alpha[j] * xs[j][t];
            }
            let mut num = 0.0;
            for j in 0..k {
                num += alpha[j] * (xs[j][t] - mean) * (xs[j][t] - mean);
            }
            let sigma = (num / (v1 - v2 / v1)).sqrt();
            prop_assert!((st.std[t] - sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_is_permutation_equivariant(seed in 0u64..200, rot in 1usize..4) {
        let p = small(Variant::Full, seed);
        let s = random_sample(4, 9, 3, seed + 1);
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let a = predict(&p, &s).unwrap();
        let b = predict(&p, &s.permuted(&perm)).unwrap();
        for t in 0..3 {
            prop_assert!((a.x_hat[t] - b.x_hat[t]).abs() < 1e-12);
            prop_assert!((a.sigma_hat[t] - b.sigma_hat[t]).abs() < 1e-12);
        }
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((b.alpha[i] - a.alpha[j]).abs() < 1e-14);
            prop_assert_eq!(b.sc[i], a.sc[j]);
            prop_assert_eq!(b.sh[i], a.sh[j]);
        }
    }

    #[test]
    fn predict_output_contracts(seed in 0u64..200) {
        let p = small(Variant::Full, seed);
        let s = random_sample(4, 9, 3, seed + 7);
        let out = predict(&p, &s).unwrap();
        prop_assert!((out.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.alpha.iter().all(|&a| a > 0.0));
        prop_assert!(out.sigma_hat.iter().all(|&v| v >= 0.0));
        let xs = out.scaled_prediction(&s);
        for t in 0..3 {
            let recon: f64 = (0..4).map(|j| out.alpha[j] * xs[j][t]).sum();
            prop_assert!((recon - out.x_hat[t]).abs() < 1e-12);
            let lo = xs.iter().map(|x| x[t]).fold(f64::INFINITY, f64::min);
            let hi = xs.iter().map(|x| x[t]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.x_hat[t] >= lo - 1e-12 && out.x_hat[t] <= hi + 1e-12);
        }
    }
}

#[test]
fn identity_scale_and_uniform_attention_give_neighbor_mean() {
    let mut p = small(Variant::Full, 21);
    force_scale(&mut p, 1.0, 0.0);
    force_uniform_attention(&mut p);
    let s = random_sample(4, 9, 3, 22);
    let out = predict(&p, &s).unwrap();
    for t in 0..3 {
        let mean = s.pred_neighbors.iter().map(|x| x[t]).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(out.x_hat[t], mean, epsilon = 1e-12);
    }
}

#[test]
fn predict_is_pure() {
    let p = small(Variant::Full, 5);
    let s = random_sample(4, 9, 3, 6);
    let a = predict(&p, &s).unwrap();
    let b = predict(&small(Variant::Full, 5), &s.clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predict_rejects_mismatched_sample() {
    let p = small(Variant::Full, 5);
    assert!(matches!(predict(&p, &random_sample(4, 10, 3, 1)), Err(Error::Shape(_))));
    assert!(matches!(predict(&p, &random_sample(4, 9, 2, 1)), Err(Error::Shape(_))));
    assert!(matches!(
        predict(&p, &random_sample(1, 9, 3, 1)),
        Err(Error::DegenerateContext)
    ));
}

#[test]
fn no_autoscaler_reports_identity_coefficients() {
    let p = small(Variant::NoAutoscaler, 5);
    assert!(p.scale_nn.is_none());
    let out = predict(&p, &random_sample(4, 9, 3, 8)).unwrap();
    assert!(out.sc.iter().all(|&v| v == 1.0));
    assert!(out.sh.iter().all(|&v| v == 0.0));
    assert!(out.interpretable);
}

#[test]
fn no_linear_combination_is_flagged() {
    let p = small(Variant::NoLinearCombination, 5);
    let out = predict(&p, &random_sample(4, 9, 3, 8)).unwrap();
    assert!(!out.interpretable);
    assert!(out.sigma_hat.iter().all(|&v| v >= 0.0));
    assert!((out.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // a single neighbour is fine without the weighted-spread readout
    assert!(predict(&p, &random_sample(1, 9, 3, 8)).is_ok());
}

#[test]
fn key_key_score_ignores_query() {
    let mut p = small(Variant::Full, 9);
    p.hyper.score = AttentionScore::KeyKey;
    let s = random_sample(4, 9, 3, 10);
    let a = predict(&p, &s).unwrap();
    p.query_embed.output.b.iter_mut().for_each(|v| *v += 3.0);
    let b = predict(&p, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn model_file_round_trips_exactly() {
    for v in Variant::ALL {
        let p = small(v, 31);
        let back = PredictorParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let s = random_sample(4, 9, 3, 32);
        assert_eq!(predict(&back, &s).unwrap(), predict(&p, &s).unwrap());
    }
    let p = PredictorParams::new(dims(167, 24, 200), Hyper::default(), Variant::Full, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    p.save(&path).unwrap();
    assert_eq!(PredictorParams::load(&path).unwrap(), p);
}

#[test]
fn model_file_rejects_bad_documents() {
    let p = small(Variant::Full, 1);
    let text = p.to_json().unwrap();
    assert!(PredictorParams::from_json(&text.replace(MODEL_FORMAT, "other")).is_err());
    assert!(PredictorParams::from_json(&text.replace("\"full\"", "\"no_autoscaler\"")).is_err());
    assert!(PredictorParams::from_json("{").is_err());
    let mut bad = p.clone();
    bad.key_embed.hidden.w[0] = f64::NAN;
    assert!(bad.to_json().is_err());
}

#[test]
fn default_scale_parameter_shapes() {
    let p = PredictorParams::new(dims(167, 24, 200), Hyper::default(), Variant::Full, 1).unwrap();
    let nn = p.scale_nn.as_ref().unwrap();
    assert_eq!((nn.inp(), nn.hidden.out, nn.out()), (366, 183, 2));
    assert_eq!((p.query_embed.inp(), p.query_embed.out()), (183, 6));
    assert_eq!((p.key_embed.inp(), p.key_embed.out()), (183, 6));
    let expected = (366 * 183 + 183 + 183 * 2 + 2) + 2 * (183 * 32 + 32 + 32 * 6 + 6);
    assert_eq!(p.num_params(), expected);
}
