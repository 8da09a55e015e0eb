use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rhvae::data::{encode_idx, parse_idx, split, synth_shapes, IdxArray, ImageDataset, ShapesConfig, SplitSpec};
use rhvae::dynamics::{generalized_leapfrog_step, tempering_schedule, FixedPoint, Hamiltonian, MetricSource, PhaseState, Quadratic};
use rhvae::evalaug::score;
use rhvae::generate::{hmc_chain, GenTarget, HmcConfig};
use rhvae::geometry::{geodesic, GeodesicConfig};
use rhvae::metric::MetricField;
use rhvae::model::{elbo_terms, log_mean_exp, ElboNoise, Mode, ModelConfig, RhvaeModel};
use rhvae::numcore::{linalg, Activation, Mlp, Tensor};

/// A field of `n` kernels in `dim` dimensions built from a flat pool of draws.
fn field_from(dim: usize, n: usize, pool: &[f64], temperature: f64, lambda: f64) -> MetricField<f64> {
    let mut it = pool.iter().cycle().copied();
    let centroids: Vec<f64> = (0..n * dim).map(|_| it.next().unwrap()).collect();
    let mut factors = vec![0.0; n * dim * dim];
    for l in factors.chunks_mut(dim * dim) {
        for r in 0..dim {
            for c in 0..=r {
                let u = it.next().unwrap();
                l[r * dim + c] = if r == c { 0.3 + u.abs() } else { 0.3 * u };
            }
        }
    }
    MetricField::new(dim, centroids, factors, temperature, lambda).unwrap()
}

fn field_strategy(max_dim: usize) -> impl Strategy<Value = MetricField<f64>> {
    (1..=max_dim, 0usize..6, prop::collection::vec(-1.5f64..1.5, 64), 0.4f64..1.2, 1e-3f64..1.0)
        .prop_map(|(d, n, pool, t, l)| field_from(d, n, &pool, t, l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlp_forward_is_bitwise_deterministic(seed in any::<u64>(), x in prop::collection::vec(-2.0f64..2.0, 12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::<f64>::new(&[4, 5, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng).unwrap();
        let x = Tensor::new(&[3, 4], x).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn inverse_metric_eigenvalues_are_floored(field in field_strategy(5), z in prop::collection::vec(-3.0f64..3.0, 5)) {
        let d = field.dim();
        let ginv = field.inverse_metric(&z[..d]).unwrap();
        let lambda = field.lambda();
        // G^{-1} - (lambda - tol) I stays positive definite
        let mut shifted = ginv.clone();
        for i in 0..d {
            shifted[i * d + i] -= lambda * (1.0 - 1e-9);
        }
        prop_assert!(linalg::cholesky(&shifted, d).is_ok());
    }

    #[test]
    fn far_field_is_lambda_identity(field in field_strategy(4), dir in prop::collection::vec(-1.0f64..1.0, 4)) {
        let d = field.dim();
        let norm = dir[..d].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-3);
        // every kernel exponent is far below -40 at this distance
        let z: Vec<f64> = dir[..d].iter().map(|a| 100.0 * a / norm).collect();
        let ginv = field.inverse_metric(&z).unwrap();
        let mut frob = 0.0;
        for r in 0..d {
            for c in 0..d {
                let e = ginv[r * d + c] - if r == c { field.lambda() } else { 0.0 };
                frob += e * e;
            }
        }
        prop_assert!(frob.sqrt() < 1e-12);
    }

    #[test]
    fn inverse_metric_derivative_is_consistent(field in field_strategy(3), z in prop::collection::vec(-1.5f64..1.5, 3)) {
        let d = field.dim();
        let z = &z[..d];
        let slabs = field.grad_z_inverse_metric(z).unwrap();
        let h = 1e-3;
        for i in 0..d {
            let at = |k: f64| {
                let mut p = z.to_vec();
                p[i] += k * h;
                field.inverse_metric(&p).unwrap()
            };
            let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
            for e in 0..d * d {
                let fd = (m2[e] - 8.0 * m1[e] + 8.0 * p1[e] - p2[e]) / (12.0 * h);
                let an = slabs[i * d * d + e];
                prop_assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn leapfrog_preserves_volume_and_reverses(
        field in field_strategy(3),
        zv in prop::collection::vec(-0.8f64..0.8, 6),
        stiffness in 0.2f64..2.0,
    ) {
        let d = field.dim();
        let tight = FixedPoint::converged(1e-14, 500);
        let h = Hamiltonian::new(Quadratic::isotropic(d, stiffness), MetricSource::Field(&field), d).unwrap();
        let eps = 0.02;
        let step = |x: &[f64]| {
            let s = PhaseState::new(x[..d].to_vec(), x[d..].to_vec()).unwrap();
            let o = generalized_leapfrog_step(&h, &s, eps, &tight).unwrap();
            [o.z, o.v].concat()
        };
        let x0: Vec<f64> = [&zv[..d], &zv[3..3 + d]].concat();
        let m = 2 * d;
        let fd = 1e-6;
        let mut j = nalgebra::DMatrix::<f64>::zeros(m, m);
        for c in 0..m {
            let (mut up, mut dn) = (x0.clone(), x0.clone());
            up[c] += fd;
            dn[c] -= fd;
            let (yu, yd) = (step(&up), step(&dn));
            for r in 0..m {
                j[(r, c)] = (yu[r] - yd[r]) / (2.0 * fd);
            }
        }
        prop_assert!((j.determinant() - 1.0).abs() < 1e-4);

        let y = step(&x0);
        let flipped: Vec<f64> = y[..d].iter().copied().chain(y[d..].iter().map(|v| -v)).collect();
        let back = step(&flipped);
        for i in 0..d {
            prop_assert!((back[i] - x0[i]).abs() < 1e-8);
            prop_assert!((-back[d + i] - x0[d + i]).abs() < 1e-8);
        }
    }

    #[test]
    fn tempering_is_monotone(beta0 in 0.01f64..0.99, steps in 1usize..16) {
        let s = tempering_schedule(beta0, steps);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((s[steps] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idx_round_trip(dims in prop::collection::vec(1usize..6, 1..4), fill in any::<u64>()) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(fill);
        let data: Vec<u8> = (0..n).map(|_| rand::Rng::random(&mut rng)).collect();
        let a = IdxArray::new(dims, data).unwrap();
        prop_assert_eq!(parse_idx(&encode_idx(&a)).unwrap(), a);
    }

    #[test]
    fn balanced_accuracy_equals_accuracy_on_balanced_sets(
        per_class in 1usize..20,
        classes in 2usize..5,
        preds in prop::collection::vec(0usize..5, 100),
    ) {
        let truth: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let predicted: Vec<usize> = preds.iter().cycle().take(truth.len()).map(|p| p % classes).collect();
        let m = score(&predicted, &truth).unwrap();
        prop_assert!((m.accuracy - m.balanced_accuracy).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_are_disjoint_and_cover(n0 in 2usize..30, n1 in 2usize..30, fraction in 0.1f64..0.9, seed in any::<u64>()) {
        let n = n0 + n1;
        // pixel value encodes the row index
        let pixels: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i >= n0) as usize).collect();
        let ds = ImageDataset::new(n, 1, 1, pixels, labels, "p").unwrap();
        let (a, b) = split(&ds, &SplitSpec { train_fraction: fraction, seed }).unwrap();
        let mut ids: Vec<usize> = a.pixels.iter().chain(&b.pixels).map(|p| (p * n as f64).round() as usize).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        let again = split(&ds, &SplitSpec { train_fraction: fraction, seed }).unwrap();
        prop_assert_eq!(again, (a, b));
    }

    #[test]
    fn shapes_are_deterministic(seed in any::<u64>()) {
        let cfg = ShapesConfig { n_disks: 3, n_rings: 3, size: 16, seed, ..ShapesConfig::default() };
        prop_assert_eq!(synth_shapes(&cfg).unwrap(), synth_shapes(&cfg).unwrap());
    }

    #[test]
    fn elbo_is_below_the_importance_estimate(seed in any::<u64>(), mode_ix in 0usize..3) {
        let mode = [Mode::Vae, Mode::Hvae, Mode::Rhvae][mode_ix];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::shapes_preset(9).with_mode(mode);
        cfg.hidden = 6;
        let mut m = RhvaeModel::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::new(&[2, 9], (0..18).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
        m.refresh_field(&x).unwrap();
        for r in 0..2 {
            let rows = x.select_rows(&[r; 100]);
            let noise = ElboNoise::draw(&mut rng, 100, 2);
            let (w, _) = elbo_terms(&m, &rows, &noise).unwrap();
            let elbo = w.iter().sum::<f64>() / 100.0;
            prop_assert!(elbo <= log_mean_exp(&w) + 1e-12);
        }
    }

    #[test]
    fn zero_step_identity_flow_is_the_vae(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::shapes_preset(9);
        cfg.hidden = 6;
        let vae = RhvaeModel::<f64>::new(cfg.clone().with_mode(Mode::Vae), &mut rng).unwrap();
        let mut zero = cfg;
        zero.steps = 0;
        let mut r = RhvaeModel::<f64>::new(zero, &mut rng).unwrap();
        r.encoder = vae.encoder.clone();
        r.decoder = vae.decoder.clone();
        r.field = MetricField::empty(2, 1.0, 1.0).unwrap();
        let x = Tensor::new(&[4, 9], (0..36).map(|i| ((i * 5) % 4 == 0) as u8 as f64).collect()).unwrap();
        let noise = ElboNoise::draw(&mut rng, 4, 2);
        let (a, _) = elbo_terms(&vae, &x, &noise).unwrap();
        let (b, _) = elbo_terms(&r, &x, &noise).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn hmc_latents_stay_in_the_ball(field in field_strategy(3), seed in any::<u64>()) {
        prop_assume!(!field.is_empty());
        let target = GenTarget::new(&field).unwrap();
        let cfg = HmcConfig { samples: 50, burn_in: 20, thinning: 2, seed, ..HmcConfig::default() };
        let out = hmc_chain(&target, &cfg, None).unwrap();
        prop_assert!(out.samples.iter().all(|z| target.contains(z)));
    }

    #[test]
    fn geodesic_energy_falls_and_distances_obey_the_triangle_inequality(
        field in field_strategy(2),
        pts in prop::collection::vec(-1.5f64..1.5, 6),
    ) {
        prop_assume!(field.dim() == 2);
        let cfg = GeodesicConfig { segments: 24, ..GeodesicConfig::default() };
        let (a, b, c) = (&pts[0..2], &pts[2..4], &pts[4..6]);
        let ab = geodesic(&field, a, b, &cfg).unwrap();
        let bc = geodesic(&field, b, c, &cfg).unwrap();
        let ac = geodesic(&field, a, c, &cfg).unwrap();
        for g in [&ab, &bc, &ac] {
            prop_assert!(g.energies.windows(2).all(|w| w[1] <= w[0]));
        }
        prop_assert!(ac.length <= ab.length + bc.length + 1e-3);
    }
}

#[test]
fn seeded_chains_agree_in_moments() {
    let field = MetricField::<f64>::empty(2, 0.8, 0.5).unwrap();
    let target = GenTarget::with_radius(&field, 1.0).unwrap();
    let n = 2000;
    let run = |seed| {
        let cfg = HmcConfig { samples: n, thinning: 20, seed, ..HmcConfig::default() };
        hmc_chain(&target, &cfg, None).unwrap().samples
    };
    let (sa, sb) = (run(1), run(2));
    let nf = n as f64;
    // uniform unit disk: Var z_i = 1/4, Var z_i^2 = E z^4 - (E z^2)^2 = 1/8 - 1/16
    let se_m = (2.0 * 0.25 / nf).sqrt();
    let se_q = (2.0 / 16.0 / nf).sqrt();
    for i in 0..2 {
        let m = |s: &[Vec<f64>]| s.iter().map(|z| z[i]).sum::<f64>() / nf;
        let q = |s: &[Vec<f64>]| s.iter().map(|z| z[i] * z[i]).sum::<f64>() / nf;
        assert!((m(&sa) - m(&sb)).abs() < 3.0 * se_m, "mean {} vs {}", m(&sa), m(&sb));
        assert!((q(&sa) - q(&sb)).abs() < 3.0 * se_q, "second moment {} vs {}", q(&sa), q(&sb));
    }
}
