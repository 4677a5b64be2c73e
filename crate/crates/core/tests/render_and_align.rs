use gsvox::alignment::{info_nce_pair, retrieval_topk, triplet_loss, EmbeddingBatch, Modality};
use gsvox::losses::{chamfer_distance, mse};
use gsvox::raster::render;
use gsvox::{Camera, Gaussian, GaussianCloud};
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;

fn camera() -> Camera {
    Camera::look_at(Vector3::new(0.4, 0.3, -3.0), Vector3::zeros(), Vector3::y(), 30.0, 24, 20).unwrap()
}

prop_compose! {
    fn gaussian()(
        p in prop::array::uniform3(-1.0f64..1.0),
        q in prop::array::uniform4(-1.0f64..1.0),
        s in prop::array::uniform3(0.02f64..0.5),
        o in 0.0f64..1.0,
        c in prop::array::uniform3(0.0f64..1.0),
    ) -> Gaussian {
        // keep the quaternion away from zero
        let q = [q[0] + 2.0, q[1], q[2], q[3]];
        Gaussian::new(p.into(), q, s.into(), o, c.into()).unwrap()
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn unit_rows(raw: &[f64], dim: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(Modality::S, dim, raw.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn render_outputs_stay_in_range(gs in prop::collection::vec(gaussian(), 0..24)) {
        let out = render(&GaussianCloud::new(gs), &camera());
        prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(out.depth.iter().all(|d| *d >= 0.0 && d.is_finite()));
        prop_assert!(out.color.iter().chain(&out.normal).all(|v| v.is_finite()));
    }

    #[test]
    fn render_ignores_input_order(gs in prop::collection::vec(gaussian(), 1..24), rot in 0usize..24) {
        let a = render(&GaussianCloud::new(gs.clone()), &camera());
        let mut shuffled = gs;
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = render(&GaussianCloud::new(shuffled), &camera());
        prop_assert_eq!(bits(&a.color), bits(&b.color));
        prop_assert_eq!(bits(&a.alpha), bits(&b.alpha));
        prop_assert_eq!(bits(&a.depth), bits(&b.depth));
    }

    #[test]
    fn embedding_rows_are_unit(raw in prop::collection::vec(-5.0f64..5.0, 4 * 6)) {
        prop_assume!(raw.chunks(6).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let b = unit_rows(&raw, 6);
        for i in 0..b.len() {
            let n: f64 = b.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn retrieval_survives_a_common_rotation(
        q in prop::collection::vec(-1.0f64..1.0, 8 * 5),
        g in prop::collection::vec(-1.0f64..1.0, 8 * 5),
        m in prop::collection::vec(-1.0f64..1.0, 25),
    ) {
        let norms_ok = |v: &[f64]| v.chunks(5).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(norms_ok(&q) && norms_ok(&g));
        let qr = DMatrix::from_fn(5, 5, |i, j| m[5 * i + j]).qr();
        prop_assume!(qr.r().diagonal().iter().all(|d| d.abs() > 1e-3));
        let rot = qr.q();
        let turn = |v: &[f64]| -> Vec<f64> {
            v.chunks(5).flat_map(|r| (&rot * nalgebra::DVector::from_column_slice(r)).iter().copied().collect::<Vec<_>>()).collect()
        };
        let ks = [1, 3];
        let before = retrieval_topk(&unit_rows(&q, 5), &unit_rows(&g, 5), &ks).unwrap();
        let after = retrieval_topk(&unit_rows(&turn(&q), 5), &unit_rows(&turn(&g), 5), &ks).unwrap();
        // a rotation may only reorder exact ties, which random rows do not have
        prop_assert_eq!(before, after);
    }

    #[test]
    fn contrastive_losses_are_non_negative(
        a in prop::collection::vec(-1.0f64..1.0, 6 * 4),
        b in prop::collection::vec(-1.0f64..1.0, 6 * 4),
        tau in 0.05f64..2.0,
        margin in 0.0f64..1.0,
    ) {
        let norms_ok = |v: &[f64]| v.chunks(4).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(norms_ok(&a) && norms_ok(&b));
        let (a, b) = (unit_rows(&a, 4), EmbeddingBatch::new(Modality::P, 4, b).unwrap());
        let nce = info_nce_pair(&a, &b, tau).unwrap();
        prop_assert!(nce >= 0.0 && nce.is_finite());
        prop_assert!((nce - info_nce_pair(&b, &a, tau).unwrap()).abs() < 1e-12);
        prop_assert!(triplet_loss(&a, &b, margin).unwrap() >= 0.0);
    }

    #[test]
    fn chamfer_is_a_symmetric_non_negative_distance(
        a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
        b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
    ) {
        let ab = chamfer_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, chamfer_distance(&b, &a).unwrap());
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        prop_assert!(mse(&a.concat(), &a.concat()).unwrap() == 0.0);
    }
}
