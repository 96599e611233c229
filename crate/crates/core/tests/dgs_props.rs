use gradshield::dgs::{approx_invert, effective_z_gradient, invert_reorient, reorient, DgsConfig, PMatrix};
use gradshield::tensor::Tensor;
use proptest::prelude::*;

const SIDE: usize = 4;
const DIM: usize = SIDE * SIDE;

fn mark(data: Vec<f32>) -> Tensor {
    Tensor::new(vec![1, 1, SIDE, SIDE], data).unwrap()
}

fn config(w: Vec<f32>, lambdas: Vec<f64>) -> DgsConfig {
    DgsConfig::protected(
        PMatrix::from_lambdas(lambdas).unwrap(),
        mark(w),
        Tensor::ones(vec![1, 1, SIDE, SIDE]),
    )
    .unwrap()
}

fn pixels() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, DIM)
}

/// Eigenvalues drawn log-uniformly from `[1e-8, 1]`.
fn lambdas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8.0f64..=0.0).prop_map(|e| 10f64.powf(e)), DIM)
}

/// A mark with at least one pixel off the blank value, so the true gradient
/// at `Z = W` is non-zero.
fn nonblank_mark() -> impl Strategy<Value = Vec<f32>> {
    (pixels(), 0..DIM).prop_map(|(mut w, i)| {
        w[i] = 0.0;
        w
    })
}

fn batch64(rows: &[Vec<f32>]) -> Tensor<f64> {
    let data = rows.iter().flatten().map(|&v| v as f64).collect();
    Tensor::new(vec![rows.len(), 1, SIDE, SIDE], data).unwrap()
}

proptest! {
    #[test]
    fn inversion_undoes_reorientation(w in pixels(), l in lambdas(), z in prop::collection::vec(pixels(), 1..4)) {
        let cfg = config(w, l);
        let z = batch64(&z);
        let back = invert_reorient(&reorient(&z, &cfg).unwrap(), &cfg).unwrap();
        for (a, b) in z.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn the_mark_is_a_fixed_point(w in pixels(), l in lambdas()) {
        let cfg = config(w, l);
        prop_assert_eq!(reorient(cfg.w(), &cfg).unwrap(), cfg.w().clone());
    }

    #[test]
    fn unit_eigenvalues_reflect_through_the_mark(w in pixels(), z in pixels()) {
        let cfg = config(w.clone(), vec![1.0; DIM]);
        let out = reorient(&mark(z.clone()), &cfg).unwrap();
        for ((&o, &wv), &zv) in out.data().iter().zip(&w).zip(&z) {
            prop_assert_eq!(o, (2.0 * wv as f64 - zv as f64) as f32);
        }
    }

    #[test]
    fn gradient_at_the_mark_is_obtuse_and_damped(w in nonblank_mark(), l in lambdas()) {
        let lmax = l.iter().cloned().fold(0.0, f64::max);
        let cfg = config(w.clone(), l);
        let z = batch64(&[w]);
        let eff = effective_z_gradient(&z, &cfg, None).unwrap();
        let truth: Vec<f64> = z.data().iter().map(|v| 2.0 * (v - 1.0)).collect();
        let dot: f64 = eff.data().iter().zip(&truth).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(dot < 0.0);
        prop_assert!(norm(eff.data()) <= lmax * norm(&truth) * (1.0 + 1e-12));
    }

    #[test]
    fn approx_inversion_misses_by_one_minus_lambda(w in pixels(), l in lambdas(), z in pixels()) {
        let cfg = config(w.clone(), l.clone());
        let w = batch64(&[w]);
        let z = batch64(&[z]);
        let est = approx_invert(&reorient(&z, &cfg).unwrap(), &w).unwrap();
        for (((&e, &zv), &wv), &lv) in est.data().iter().zip(z.data()).zip(w.data()).zip(&l) {
            prop_assert!((e - (zv + (1.0 - lv) * (wv - zv))).abs() < 1e-12);
        }
    }
}
