use proptest::prelude::*;
use sms_core::model::{harden, mm_energy_stack, pc_energy, total_energy};
use sms_core::simplex::{simplex_project, tangent_project};
use sms_core::{
    Exact, ExactField, Field, ModelParams, Ownerships, Patch, PatternStack, ScalarField, Stack,
    Supervision,
};

fn stack_from(k: usize, w: usize, h: usize, raw: &[f64]) -> Ownerships {
    let mut p = Stack::filled(k, w, h, 0.0);
    for idx in 0..w * h {
        let cell = &raw[idx * k..(idx + 1) * k];
        let s: f64 = cell.iter().sum();
        let v: Vec<f64> = cell.iter().map(|c| c / s).collect();
        p.set_pixel(idx, &v);
    }
    p
}

fn stack_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..5, 2usize..9, 2usize..9).prop_flat_map(|(k, w, h)| {
        (
            Just(k),
            Just(w),
            Just(h),
            prop::collection::vec(0.01f64..1.0, k * w * h),
            prop::collection::vec(0.0f64..1.0, w * h),
        )
    })
}

proptest! {
    #[test]
    fn energy_terms_nonnegative_and_consistent((k, w, h, raw, img) in stack_strategy(),
                                               lambda in 0.1f64..20.0, eps in 0.3f64..4.0) {
        let p = stack_from(k, w, h, &raw);
        let image = Stack::from_field(Field::new(w, h, img).unwrap());
        let means: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64 / k as f64]).collect();
        let params = ModelParams { k, lambda, alpha: 1.0, epsilon: eps };
        let e = pc_energy(&p, &means, &image, &params).unwrap();
        prop_assert!(e.data_term >= 0.0 && e.mm_term >= 0.0);
        prop_assert_eq!(e.sobolev_term, 0.0);
        prop_assert!((e.total - (e.data_term + e.mm_term)).abs() <= 1e-12 * e.total.max(1.0));
        let u = PatternStack::constant(&means, w, h);
        let full = total_energy(&p, &u, &image, &params).unwrap();
        prop_assert!((full.total - e.total).abs() <= 1e-10 * e.total.max(1.0));
    }

    #[test]
    fn hardening_picks_an_argmax_and_prefers_the_last((k, w, h, raw, _img) in stack_strategy()) {
        let p = stack_from(k, w, h, &raw);
        let labels = harden(&p);
        for idx in 0..w * h {
            let v = p.pixel(idx);
            let l = labels.labels()[idx] as usize - 1;
            prop_assert!(v.iter().all(|&x| x <= v[l]));
            prop_assert!(v[l + 1..].iter().all(|&x| x < v[l]));
        }
    }

    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 2..8)) {
        let p = simplex_project(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let t = tangent_project(&v);
        prop_assert!(t.iter().sum::<f64>().abs() <= 1e-12);
        let tt = tangent_project(&t);
        for (a, b) in t.iter().zip(&tt) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn neumann_laplacian_integrates_to_zero_exactly(
        w in 1usize..7, h in 1usize..7, seed in prop::collection::vec(-20i64..20, 49)
    ) {
        let f = ExactField::from_fn(w, h, |x, y| Exact::new(seed[y * 7 + x], 3));
        prop_assert_eq!(f.laplacian_neumann().integrate(), Exact::from_integer(0));
    }

    #[test]
    fn permuted_supervision_matches_permuted_mask(sigma_seed in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let sigma = perms[sigma_seed];
        let sup = Supervision::new(vec![
            Patch { channel: 1, x: 0, y: 0, w: 2, h: 2 },
            Patch { channel: 3, x: 4, y: 4, w: 2, h: 1 },
        ]);
        let p = Stack::<f64>::indicator(3, 6, 6, |x, y| sup.mask(6, 6).owner(y * 6 + x).unwrap_or(1));
        let permuted = sup.permute(&sigma);
        let q = Stack::<f64>::indicator(3, 6, 6, |x, y| permuted.mask(6, 6).owner(y * 6 + x).unwrap_or(
            sigma.iter().position(|&s| s == 1).unwrap()));
        prop_assert_eq!(p.permute(&sigma).unwrap(), q);
    }
}

/// With `p_1 = (1 - z)/2`, `p_2 = (1 + z)/2` the two-channel energy is the
/// symmetric single-field phase model in `z`.
#[test]
fn two_channel_energy_equals_z_model() {
    let (w, h) = (13, 9);
    let z = ScalarField::from_fn(w, h, |x, y| ((x as f64 * 0.7 + y as f64 * 1.3).sin()).clamp(-1.0, 1.0));
    let image = ScalarField::from_fn(w, h, |x, y| ((x * y) % 5) as f64 / 4.0);
    let p = Stack::new(vec![z.map(|v| (1.0 - v) / 2.0), z.map(|v| (1.0 + v) / 2.0)]).unwrap();
    let (m1, m2, lambda, eps) = (0.1, 0.9, 7.0, 1.7);
    let params = ModelParams { k: 2, lambda, alpha: 1.0, epsilon: eps };
    let e = pc_energy(&p, &[vec![m1], vec![m2]], &Stack::from_field(image.clone()), &params)
        .unwrap()
        .total;

    let mut data = 0.0;
    let mut well = 0.0;
    for (&zv, &iv) in z.values().iter().zip(image.values()) {
        data += lambda * ((m1 - iv).powi(2) * (1.0 - zv) / 2.0 + (m2 - iv).powi(2) * (1.0 + zv) / 2.0);
        well += (1.0 - zv * zv).powi(2) / (8.0 * eps);
    }
    let z_energy = data + 4.5 * eps * z.dirichlet_energy() + well;
    assert!((e - z_energy).abs() <= 1e-10 * e, "{e} vs {z_energy}");
    assert!((mm_energy_stack(&p, eps) - (4.5 * eps * z.dirichlet_energy() + well)).abs() < 1e-10);
}
