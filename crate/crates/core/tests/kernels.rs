use capsib_core::autodiff::grad_check_inputs;
use capsib_core::capsule::{
    kl_gaussian, information_penalty, margin_loss, one_hot, reconstruction_loss, routing_softmax, squash, GaussianMoments,
    OpsError,
};
use capsib_core::rng::{normal_tensor, SplitRng};
use capsib_core::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-3;

type Kernel = fn(&mut Tape<f64>, &[Var]) -> Result<Var, capsib_core::AutodiffError>;

fn ad(e: OpsError) -> capsib_core::AutodiffError {
    match e {
        OpsError::Autodiff(e) => e,
        e => panic!("{e}"),
    }
}

/// Random weights make the scalar probe sensitive to every output entry.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, capsib_core::AutodiffError> {
    let w = normal_tensor(&mut SplitRng::new(seed).stream(77), tape.shape(y), 0.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn inputs(name: &str, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = SplitRng::new(seed).stream(3);
    match name {
        "squash" => vec![normal_tensor(&mut rng, &[4, 3, 5], 0.0, 1.0)],
        "routing_softmax" => vec![normal_tensor(&mut rng, &[3, 6, 4], 0.0, 2.0)],
        "margin_loss" => {
            // keep clear of the hinge corners at 0.1 and 0.9
            let v: Vec<f64> = (0..30)
                .map(|_| loop {
                    let l: f64 = rng.random_range(0.0..1.0);
                    if (l - 0.1).abs() > 1e-2 && (l - 0.9).abs() > 1e-2 {
                        break l;
                    }
                })
                .collect();
            vec![Tensor::new(vec![3, 10], v)]
        }
        "reconstruction_loss" => {
            vec![normal_tensor(&mut rng, &[3, 1, 4, 4], 0.5, 0.3), normal_tensor(&mut rng, &[3, 1, 4, 4], 0.5, 0.3)]
        }
        "kl_gaussian" => {
            let mu = normal_tensor(&mut rng, &[4, 6], 0.0, 1.0);
            let s2 = Tensor::from_fn(&[4, 6], |_| rng.random_range(0.2..3.0));
            vec![mu, s2]
        }
        "information_penalty" => vec![normal_tensor(&mut rng, &[5, 8], 0.0, 0.3)],
        _ => unreachable!(),
    }
}

fn kernels() -> Vec<(&'static str, Kernel)> {
    vec![
        ("squash", |tp, v| {
            let y = squash(tp, v[0], 2).map_err(ad)?;
            probe(tp, y, 1)
        }),
        ("routing_softmax", |tp, v| {
            let y = routing_softmax(tp, v[0], 1).map_err(ad)?;
            probe(tp, y, 2)
        }),
        ("margin_loss", |tp, v| margin_loss(tp, v[0], &one_hot(&[0, 4, 9], 10)).map_err(ad)),
        ("reconstruction_loss", |tp, v| reconstruction_loss(tp, v[0], v[1]).map_err(ad)),
        ("kl_gaussian", |tp, v| kl_gaussian(tp, &GaussianMoments { mu: v[0], sigma2: v[1] }).map_err(ad)),
        ("information_penalty", |tp, v| information_penalty(tp, v[0]).map_err(ad)),
    ]
}

#[test]
fn kernels_pass_gradient_check_on_ten_seeds() {
    for (name, f) in kernels() {
        for seed in 0..10 {
            let report = grad_check_inputs(f, &inputs(name, seed), STEP, TOL).unwrap();
            assert!(report.passed, "{name} seed {seed}: rel error {:.3e} at {:?}", report.max_rel_error, report.worst);
        }
    }
}

/// Monte-Carlo KL(N(μ, σ²) ‖ N(0, 1)) and its standard error.
fn kl_monte_carlo(mu: f64, s2: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = SplitRng::new(seed).stream(11);
    let dist = Normal::new(mu, s2.sqrt()).unwrap();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let x: f64 = dist.sample(&mut rng);
        // log q(x) − log p(x) with q = N(μ, σ²), p = N(0, 1)
        let r = -0.5 * s2.ln() - (x - mu).powi(2) / (2.0 * s2) + x * x / 2.0;
        sum += r;
        sq += r * r;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

fn kl_closed(mu: f64, s2: f64) -> f64 {
    let mut tape = Tape::new();
    let m = GaussianMoments {
        mu: tape.constant(Tensor::new(vec![1, 1], vec![mu])),
        sigma2: tape.constant(Tensor::new(vec![1, 1], vec![s2])),
    };
    let kl = kl_gaussian(&mut tape, &m).unwrap();
    tape.value(kl).item()
}

#[test]
fn kl_agrees_with_monte_carlo_on_a_grid() {
    let mut k = 0;
    for mu in [-2.0, -1.0, 0.0, 0.3, 1.5] {
        for s2 in [0.1, 0.5, 0.7, 1.0, 4.0] {
            let (est, se) = kl_monte_carlo(mu, s2, 1_000_000, k);
            let exact = kl_closed(mu, s2);
            assert!((est - exact).abs() <= 3.0 * se, "μ={mu} σ²={s2}: closed {exact}, MC {est} ± {se}");
            k += 1;
        }
    }
}

#[test]
fn kl_is_zero_only_at_the_prior() {
    for i in 0..=20 {
        for j in 0..=20 {
            let mu = -2.0 + 0.2 * i as f64;
            let s2 = 0.1 + 0.195 * j as f64;
            let kl = kl_closed(mu, s2);
            if mu.abs() < 1e-12 && (s2 - 1.0).abs() < 1e-12 {
                assert_eq!(kl, 0.0);
            } else {
                assert!(kl > 0.0, "μ={mu} σ²={s2}: {kl}");
            }
        }
    }
    assert_eq!(kl_closed(0.0, 1.0), 0.0);
    assert!((kl_closed(1.0, 1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn squashed_capsules_stay_inside_the_unit_ball() {
    let mut rng = SplitRng::new(4).stream(5);
    for scale in [1e-4, 0.1, 1.0, 10.0, 1e4] {
        let x: Tensor<f64> = normal_tensor(&mut rng, &[50, 8], 0.0, scale);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = squash(&mut tape, v, 1).unwrap();
        for (row, orig) in tape.value(s).data().chunks(8).zip(x.data().chunks(8)) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(orig).map(|(a, b)| a * b).sum();
            assert!(norm < 1.0 && dot >= 0.0);
        }
    }
}
