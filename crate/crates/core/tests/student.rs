mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use trajdistill::dataenv::SampleSet;
use trajdistill::ndgrad::{Activation, AdamConfig, Mat, NetworkParams, NodeId, Tape};
use trajdistill::oracle::{wasserstein_1d, GaussianMixture};
use trajdistill::reward::TapeReward;
use trajdistill::rng;
use trajdistill::schedule::{
    default_huber_c, pseudo_huber, Denoiser, NfeMeter, Preconditioner, ScheduleConfig,
    TrainingSigma,
};
use trajdistill::student::{
    ctm_loss, distill, intermediate_levels, multi_step_sample, one_step_sample, reward_term,
    sample_triple, student_dsm_loss_at, CtmDraw, DistillConfig, DistillMetrics, Distiller,
    LossWeights, StudentModel, TimeGrid, TimestepTriple,
};
use trajdistill::teacher::{draw_dsm_noise, sample_prior, solve_pfode, TeacherModel};
use trajdistill::Result;

use common::{relative_error, EPS};

fn none(rows: usize) -> Mat {
    Mat::zeros(rows, 0)
}

fn random_student(x_dim: usize, cond_dim: usize, hidden: &[usize], seed: u64) -> StudentModel {
    let topo = StudentModel::topology(&TeacherModel::topology(
        x_dim,
        cond_dim,
        hidden,
        Activation::Silu,
    ));
    StudentModel {
        params: NetworkParams::init(topo, &mut rng::seeded(seed)),
        precond: Preconditioner::default(),
    }
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        rng::normal_vec(&mut rng::seeded(seed), rows * cols),
    )
    .unwrap()
}

/// Data concentrated at the origin: the ideal denoiser is identically 0.
struct OriginDenoiser;

impl Denoiser for OriginDenoiser {
    fn denoise(&self, x: &Mat, _sigma: f64, _condition: &Mat, _meter: &NfeMeter) -> Result<Mat> {
        Ok(Mat::zeros(x.rows(), x.cols()))
    }
}

/// `-||a||^2` on the first `dim` columns of the sample.
struct NegSquaredAction {
    dim: usize,
}

impl TapeReward for NegSquaredAction {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        _condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        let a = tape.slice(x0, 0, self.dim)?;
        let zero = tape.constant(Mat::zeros(tape.value(a).rows(), self.dim));
        let d = tape.squared_distance(a, zero)?;
        Ok(tape.scale(d, -1.0))
    }
}

/// Constant reward that still touches the sample through a zero scale.
struct ConstantReward(f64);

impl TapeReward for ConstantReward {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        _condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        let rows = tape.value(x0).rows();
        let first = tape.slice(x0, 0, 1)?;
        let zeroed = tape.scale(first, 0.0);
        let c = tape.constant(Mat::from_vec(rows, 1, vec![self.0; rows]).unwrap());
        tape.add(zeroed, c)
    }
}

/// Small fixed MLP scoring `[condition, first action]`, frozen on the tape.
struct MlpReward {
    params: NetworkParams,
    action_dim: usize,
}

impl TapeReward for MlpReward {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        let src = tape.register(&self.params, false);
        let a = tape.slice(x0, 0, self.action_dim)?;
        let c = tape.constant(condition.clone());
        let input = tape.concat(&[c, a])?;
        let none = tape.constant(Mat::zeros(condition.rows(), 0));
        tape.mlp(src, input, none)
    }
}

#[test]
fn triple_frequencies_match_their_combinatorial_probabilities() {
    let grid = TimeGrid::from_ascending(vec![0.0, 0.1, 0.5, 1.0, 2.0, 4.0]).unwrap();
    let n = grid.len();
    let draws = 100_000;
    let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut r = rng::seeded(21);
    for _ in 0..draws {
        let tr = sample_triple(&mut r, &grid, None);
        assert!(tr.k_pos < tr.u_pos && tr.u_pos < tr.t_pos);
        *counts.entry((tr.t_pos, tr.u_pos, tr.k_pos)).or_default() += 1;
    }
    let mut admissible = 0;
    for t in 2..n {
        for u in 1..t {
            for k in 0..u {
                admissible += 1;
                let p = 1.0 / (n - 2) as f64 / (t - 1) as f64 / u as f64;
                let se = (p * (1.0 - p) / draws as f64).sqrt();
                let f = *counts.get(&(t, u, k)).unwrap_or(&0) as f64 / draws as f64;
                assert!((f - p).abs() < 3.0 * se, "triple ({t},{u},{k}): {f} vs {p}");
            }
        }
    }
    assert_eq!(counts.len(), admissible);
}

#[test]
fn three_point_grid_draws_its_single_triple() {
    let grid = TimeGrid::from_ascending(vec![0.0, 0.5, 2.0]).unwrap();
    let mut r = rng::seeded(22);
    for _ in 0..100 {
        let tr = sample_triple(&mut r, &grid, None);
        assert_eq!((tr.t, tr.u, tr.k), (2.0, 0.5, 0.0));
    }
}

#[test]
fn ctm_loss_vanishes_for_the_exact_student() {
    // with zero data scale the student's jump is (s/t) x, which is exactly
    // the flow of data concentrated at the origin
    let mut student = random_student(3, 0, &[8], 23);
    student.precond = Preconditioner { sigma_data: 0.0 };
    let grid = TimeGrid::new(&ScheduleConfig::default().with_bins(6)).unwrap();
    let rows = 16;
    let x0 = Mat::zeros(rows, 3);
    let mut r = rng::seeded(24);
    for draw in [
        CtmDraw {
            triples: vec![triple(&grid, 2, 1, 0); rows],
            noise: random_mat(rows, 3, 25),
        },
        CtmDraw::sample(rows, 3, &grid, None, &mut r),
    ] {
        let mut tape = Tape::new();
        let live = tape.register(&student.params, true);
        let loss = ctm_loss(
            &mut tape,
            live,
            &student,
            &student,
            &OriginDenoiser,
            &grid,
            &x0,
            &none(rows),
            &draw,
            1e-3,
        )
        .unwrap();
        assert!(
            tape.scalar(loss).abs() < 1e-12,
            "loss {}",
            tape.scalar(loss)
        );
    }
}

fn triple(grid: &TimeGrid, t: usize, u: usize, k: usize) -> TimestepTriple {
    TimestepTriple {
        t: grid.sigma(t),
        u: grid.sigma(u),
        k: grid.sigma(k),
        t_pos: t,
        u_pos: u,
        k_pos: k,
    }
}

/// CTM loss as a plain function of the live and stop-gradient parameters.
fn ctm_value(
    live: &StudentModel,
    frozen: &StudentModel,
    teacher: &GaussianMixture,
    draw: &CtmDraw,
    x0: &Mat,
) -> f64 {
    let grid = TimeGrid::new(&ScheduleConfig::default().with_bins(6)).unwrap();
    let mut tape = Tape::new();
    let src = tape.register(&live.params, true);
    let n = ctm_loss(
        &mut tape,
        src,
        live,
        frozen,
        teacher,
        &grid,
        x0,
        &none(x0.rows()),
        draw,
        0.05,
    )
    .unwrap();
    tape.scalar(n)
}

#[test]
fn stop_gradient_branches_carry_no_gradient() {
    let teacher = GaussianMixture::one_d(&[(0.5, -1.0, 0.3), (0.5, 1.0, 0.3)]).unwrap();
    let student = random_student(1, 0, &[6], 26);
    let grid = TimeGrid::new(&ScheduleConfig::default().with_bins(6)).unwrap();
    let rows = 8;
    let x0 = random_mat(rows, 1, 27);
    let draw = CtmDraw::sample(rows, 1, &grid, None, &mut rng::seeded(28));
    let mut tape = Tape::new();
    let live = tape.register(&student.params, true);
    let loss = ctm_loss(
        &mut tape,
        live,
        &student,
        &student,
        &teacher,
        &grid,
        &x0,
        &none(rows),
        &draw,
        0.05,
    )
    .unwrap();
    let ad = tape.backward(loss).unwrap().take_params(live).unwrap();

    // differentiate with the stop-gradient copy pinned, then with both moving
    let mut live_only = Vec::new();
    let mut joint = Vec::new();
    for i in 0..student.params.len() {
        let shifted = |d: f64| {
            let mut s = student.clone();
            s.params.weights_mut()[i] += d;
            s
        };
        let (p, m) = (shifted(EPS), shifted(-EPS));
        live_only.push(
            (ctm_value(&p, &student, &teacher, &draw, &x0)
                - ctm_value(&m, &student, &teacher, &draw, &x0))
                / (2.0 * EPS),
        );
        joint.push(
            (ctm_value(&p, &p, &teacher, &draw, &x0) - ctm_value(&m, &m, &teacher, &draw, &x0))
                / (2.0 * EPS),
        );
    }
    assert!(
        relative_error(&ad, &live_only) < 1e-5,
        "{}",
        relative_error(&ad, &live_only)
    );
    // the pinned copy does shape the loss, so its gradient is genuinely dropped
    assert!(relative_error(&ad, &joint) > 1e-3);
}

#[test]
fn student_dsm_is_the_teacher_objective_with_the_jump_substituted() {
    let student = random_student(2, 1, &[8], 29);
    let rows = 32;
    let x0 = random_mat(rows, 2, 30);
    let cond = random_mat(rows, 1, 31);
    let (sigmas, noise) = draw_dsm_noise(rows, 2, &Default::default(), &mut rng::seeded(32));
    let c = 0.01;
    let mut tape = Tape::new();
    let live = tape.register(&student.params, true);
    let n = student_dsm_loss_at(&mut tape, live, &student, &x0, &cond, &sigmas, &noise, c).unwrap();
    let mut expected = 0.0;
    for i in 0..rows {
        let xs: Vec<f64> = x0
            .row(i)
            .iter()
            .zip(noise.row(i))
            .map(|(x, e)| x + sigmas[i] * e)
            .collect();
        let d = student
            .jump(
                &Mat::row_vector(xs),
                sigmas[i],
                0.0,
                &cond.select_rows(&[i]),
                &NfeMeter::new(),
            )
            .unwrap();
        expected += pseudo_huber(x0.row(i), d.data(), c).unwrap();
    }
    expected /= rows as f64;
    assert!((tape.scalar(n) - expected).abs() < 1e-12 * expected.max(1.0));

    // vanishing noise leaves the clean sample in place
    let tiny = vec![1e-9; rows];
    let mut tape = Tape::new();
    let live = tape.register(&student.params, true);
    let n = student_dsm_loss_at(&mut tape, live, &student, &x0, &cond, &tiny, &noise, c).unwrap();
    assert!(tape.scalar(n) < 1e-6, "{}", tape.scalar(n));
}

#[test]
fn constant_reward_gives_zero_gradient() {
    let student = random_student(4, 2, &[8], 33);
    let reward = ConstantReward(3.5);
    let rows = 16;
    let cond = random_mat(rows, 2, 34);
    let xt = sample_prior(rows, 4, 80.0, &mut rng::seeded(35));
    let mut tape = Tape::new();
    let live = tape.register(&student.params, true);
    let n = reward_term(&mut tape, live, &student, &reward, &cond, &xt, 80.0).unwrap();
    assert_eq!(tape.scalar(n), -3.5);
    let g = tape
        .backward(n)
        .unwrap()
        .take_params(live)
        .unwrap_or_default();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn reward_gradient_matches_finite_differences_through_the_jump() {
    let student = random_student(4, 2, &[8, 8], 36);
    let rtopo = trajdistill::ndgrad::Topology::new(2 + 2, 0, vec![6], 1, Activation::Mish);
    let reward = MlpReward {
        params: NetworkParams::init(rtopo, &mut rng::seeded(37)),
        action_dim: 2,
    };
    let rows = 6;
    let cond = random_mat(rows, 2, 38);
    let xt = sample_prior(rows, 4, 80.0, &mut rng::seeded(39));
    let value = |s: &StudentModel| {
        let mut tape = Tape::new();
        let live = tape.register(&s.params, true);
        let n = reward_term(&mut tape, live, s, &reward, &cond, &xt, 80.0).unwrap();
        tape.scalar(n)
    };
    let mut tape = Tape::new();
    let live = tape.register(&student.params, true);
    let n = reward_term(&mut tape, live, &student, &reward, &cond, &xt, 80.0).unwrap();
    let ad = tape.backward(n).unwrap().take_params(live).unwrap();
    let fd: Vec<f64> = (0..student.params.len())
        .map(|i| {
            let mut p = student.clone();
            p.params.weights_mut()[i] += EPS;
            let mut m = student.clone();
            m.params.weights_mut()[i] -= EPS;
            (value(&p) - value(&m)) / (2.0 * EPS)
        })
        .collect();
    let err = relative_error(&ad, &fd);
    assert!(err < 1e-4, "relative error {err}");
}

fn first_action_norm(student: &StudentModel, cond: &Mat) -> f64 {
    let (x, _) = one_step_sample(student, cond, 80.0, &mut rng::seeded(40)).unwrap();
    (0..x.rows())
        .map(|i| x.row(i)[..2].iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / x.rows() as f64
}

#[test]
fn negative_action_norm_reward_drives_actions_to_zero() {
    let mut student = random_student(4, 2, &[16, 16], 41);
    // start from a student whose one-step actions sit far from zero
    let last_bias = student.params.len() - 4;
    for v in &mut student.params.weights_mut()[last_bias..last_bias + 2] {
        *v += 3.0;
    }
    let rows = 64;
    let cond = random_mat(rows, 2, 42);
    let before = first_action_norm(&student, &cond);
    let reward = NegSquaredAction { dim: 2 };
    let teacher = GaussianMixture::one_d(&[(1.0, 0.0, 1.0)]).unwrap();
    let cfg = DistillConfig {
        weights: LossWeights {
            alpha: 0.0,
            beta: 0.0,
            reward: 1.0,
        },
        adam: AdamConfig::with_lr(1e-2),
        ..DistillConfig::default()
    };
    let mut d = Distiller::new(student, &teacher, Some(&reward), cfg).unwrap();
    let x0 = Mat::zeros(rows, 4);
    for step in 0..500 {
        d.step(&x0, &cond, 43, step).unwrap();
    }
    let after = first_action_norm(&d.student, &cond);
    assert!(before > 1.0, "before {before}");
    assert!(after < 0.05 * before, "before {before}, after {after}");
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let student = random_student(2, 0, &[8], 44);
    let teacher = GaussianMixture::one_d(&[(1.0, 0.0, 1.0)]).unwrap();
    let reward = NegSquaredAction { dim: 1 };
    let cfg = DistillConfig {
        weights: LossWeights {
            alpha: 0.0,
            beta: 0.0,
            reward: 0.0,
        },
        ..DistillConfig::default()
    };
    let mut d = Distiller::new(student.clone(), &teacher, Some(&reward), cfg).unwrap();
    let x0 = random_mat(8, 2, 45);
    for step in 0..3 {
        let m = d.step(&x0, &none(8), 46, step).unwrap();
        assert_eq!(m.total, 0.0);
    }
    assert_eq!(d.student.params.weights(), student.params.weights());
}

#[test]
fn zero_reward_weight_matches_a_ctd_only_update_bit_for_bit() {
    let teacher = GaussianMixture::one_d(&[(0.5, -1.0, 0.3), (0.5, 1.0, 0.3)]).unwrap();
    let student = random_student(1, 0, &[8], 47);
    let data = SampleSet {
        x: random_mat(64, 1, 48),
        cond: none(64),
    };
    let base = DistillConfig {
        steps: 5,
        batch_size: 16,
        grid: ScheduleConfig::default().with_bins(6),
        ..DistillConfig::default()
    };
    let reward = NegSquaredAction { dim: 1 };
    let ctd = distill(student.clone(), &teacher, None, &data, &base, 49, |_, _| {
        Ok(())
    })
    .unwrap();
    let ractd0 = distill(
        student.clone(),
        &teacher,
        Some(&reward),
        &data,
        &base,
        49,
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(
        ctd.student.params.weights(),
        ractd0.student.params.weights()
    );
    assert!(ractd0.log.iter().all(|m| m.reward == 0.0));

    // and a positive weight leaves the CTM and DSM draws untouched
    let mut with_reward = base.clone();
    with_reward.weights.reward = 0.5;
    let mut a = Distiller::new(student.clone(), &teacher, None, base.clone()).unwrap();
    let mut b = Distiller::new(student, &teacher, Some(&reward), with_reward).unwrap();
    let ma = a
        .step(&data.x.select_rows(&[0, 1, 2, 3]), &none(4), 50, 0)
        .unwrap();
    let mb = b
        .step(&data.x.select_rows(&[0, 1, 2, 3]), &none(4), 50, 0)
        .unwrap();
    assert_eq!((ma.ctm, ma.dsm), (mb.ctm, mb.dsm));
    assert!(mb.reward != 0.0);
}

/// Bayes risk of the pseudo-Huber DSM loss for Gaussian data of variance
/// `v`: the posterior-mean residual at level `sigma` is `N(0, v sigma^2 / (v + sigma^2))`.
fn gaussian_dsm_bayes_risk(law: &TrainingSigma, v: f64, c: f64) -> f64 {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (nz, ne) = (400, 400);
    let (mut total, mut mass) = (0.0, 0.0);
    for i in 0..nz {
        let z = -6.0 + 12.0 * (i as f64 + 0.5) / nz as f64;
        let sigma = (law.p_mean + law.p_std * z)
            .exp()
            .clamp(law.sigma_min, law.sigma_max);
        let sd = (v * sigma * sigma / (v + sigma * sigma)).sqrt();
        let inner: f64 = (0..ne)
            .map(|j| {
                let e = -8.0 + 16.0 * (j as f64 + 0.5) / ne as f64;
                let d = sd * e;
                phi(e) * ((d * d + c * c).sqrt() - c) * 16.0 / ne as f64
            })
            .sum();
        total += phi(z) * inner;
        mass += phi(z);
    }
    total / mass
}

#[test]
fn oracle_distilled_student_matches_the_teacher_and_its_losses_fall() {
    let (mean, sd) = (0.3, 0.7);
    let teacher = GaussianMixture::one_d(&[(1.0, mean, sd)]).unwrap();
    let n = 4096;
    let mut r = rng::seeded(51);
    let data = SampleSet {
        x: Mat::from_vec(n, 1, (0..n).map(|_| teacher.sample(&mut r)[0]).collect()).unwrap(),
        cond: none(n),
    };
    let mut student = random_student(1, 0, &[32, 32], 52);
    // a badly biased start, so both objectives have room to fall
    let last = student.params.len() - 1;
    student.params.weights_mut()[last] += 2.0;
    let cfg = DistillConfig {
        steps: 1500,
        batch_size: 64,
        adam: AdamConfig::with_lr(1e-3),
        ..DistillConfig::default()
    };
    let run = distill(student, &teacher, None, &data, &cfg, 53, |_, _| Ok(())).unwrap();
    let smooth = |f: fn(&DistillMetrics) -> f64| -> Vec<f64> {
        run.log
            .chunks(100)
            .map(|c| c.iter().map(f).sum::<f64>() / c.len() as f64)
            .collect()
    };
    let ctm = smooth(|m| m.ctm);
    let dsm = smooth(|m| m.dsm);
    assert!(ctm[0] > 0.0);
    assert!(ctm.last().unwrap() < &(0.25 * ctm[0]), "ctm {ctm:?}");
    let bayes = gaussian_dsm_bayes_risk(&cfg.training_sigma, sd * sd, default_huber_c(1));
    let tail = dsm[dsm.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < dsm[0], "dsm {dsm:?}");
    assert!(
        tail > 0.95 * bayes && tail < 1.15 * bayes,
        "dsm {tail} vs Bayes {bayes}"
    );

    let m = 4000;
    let (ys, nfe) = one_step_sample(&run.student, &none(m), 80.0, &mut rng::seeded(54)).unwrap();
    assert_eq!(nfe, 1);
    let xt = sample_prior(m, 1, 80.0, &mut rng::seeded(55));
    let sched = ScheduleConfig::default().with_bins(40).build().unwrap();
    let (yt, _) = solve_pfode(&teacher, &xt, &sched, &none(m)).unwrap();
    let w = wasserstein_1d(ys.data(), yt.data()).unwrap();
    assert!(w < 0.05, "W1 {w}");
}

#[test]
fn multi_step_sampling_costs_one_evaluation_per_step() {
    let student = random_student(3, 1, &[8], 56);
    let cond = random_mat(5, 1, 57);
    let grid = DistillConfig::default().grid;
    let (one, n1) = one_step_sample(&student, &cond, 80.0, &mut rng::seeded(58)).unwrap();
    let (same, m1) = multi_step_sample(
        &student,
        &cond,
        80.0,
        &intermediate_levels(&grid, 1).unwrap(),
        &mut rng::seeded(58),
    )
    .unwrap();
    assert_eq!((n1, m1), (1, 1));
    assert_eq!(one, same);
    for m in 2..=4 {
        let lv = intermediate_levels(&grid, m).unwrap();
        assert_eq!(lv.len(), m - 1);
        assert!(lv.windows(2).all(|w| w[0] < w[1]));
        let (_, nfe) = multi_step_sample(&student, &cond, 80.0, &lv, &mut rng::seeded(59)).unwrap();
        assert_eq!(nfe, m as u64);
    }
}

#[test]
fn one_step_sampling_is_deterministic_per_seed() {
    let student = random_student(3, 1, &[8], 60);
    let cond = random_mat(5, 1, 61);
    let a = one_step_sample(&student, &cond, 80.0, &mut rng::seeded(62)).unwrap();
    let b = one_step_sample(&student, &cond, 80.0, &mut rng::seeded(62)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jumping_to_the_same_time_is_exact(x in prop::collection::vec(-50.0f64..50.0, 3), t in 1e-3f64..80.0) {
        let student = random_student(3, 0, &[8], 63);
        let out = student.jump(&Mat::row_vector(x.clone()), t, t, &none(1), &NfeMeter::new()).unwrap();
        prop_assert_eq!(out.data(), &x[..]);
    }

    #[test]
    fn sampled_triples_are_ordered(seed in 0u64..10_000, bins in 2usize..30) {
        let grid = TimeGrid::new(&ScheduleConfig::default().with_bins(bins)).unwrap();
        let tr = sample_triple(&mut rng::seeded(seed), &grid, None);
        prop_assert!(tr.k < tr.u && tr.u < tr.t && tr.t <= 80.0);
        prop_assert!(tr.k >= 0.0);
    }
}
