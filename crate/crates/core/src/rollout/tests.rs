use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{generate_split, DatasetConfig};
use crate::model::{Architecture, ModelConfig, Normalizer};
use crate::temporal::TemporalConfig;

fn data(trajs: usize, steps: usize) -> Vec<Trajectory> {
    let cfg = DatasetConfig {
        nodes: 60,
        steps,
        train_trajectories: trajs,
        test_trajectories: 0,
        seed: 9,
        ..Default::default()
    };
    generate_split(&cfg).unwrap().train
}

fn small_model(data: &[Trajectory], arch: Architecture) -> Model {
    let cfg = ModelConfig {
        architecture: arch,
        layers: 2,
        width: 8,
        heads: 2,
        ..Default::default()
    };
    Model::new(
        cfg,
        FieldSchema::advection_diffusion(),
        2,
        Normalizer::fit(data, false).unwrap(),
    )
    .unwrap()
}

/// Random small parameters so predictions are nontrivial but stable.
fn perturb(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-scale..scale));
    }
}

fn roles() -> BcComponents {
    BcComponents::from_schema(&FieldSchema::advection_diffusion())
}

#[test]
fn roles_follow_schema_names() {
    let r = roles();
    assert_eq!(r.velocity, vec![0, 1]);
    assert_eq!(r.scalar, vec![2]);
    assert_eq!(r.forcing, vec![3]);
}

#[test]
fn enforcement_by_node_type() {
    let pred: Vec<f64> = (0..20).map(|x| x as f64).collect();
    let truth: Vec<f64> = (0..20).map(|x| -(x as f64) - 1.0).collect();
    let normal = vec![NodeType::Normal; 5];
    let out = enforce_bc(&pred, &truth, &normal, &roles());
    for i in 0..5 {
        assert_eq!(&out[i * 4..i * 4 + 3], &pred[i * 4..i * 4 + 3]);
        assert_eq!(out[i * 4 + 3], truth[i * 4 + 3]);
    }
    let wall = vec![NodeType::Wall; 5];
    let out = enforce_bc(&pred, &truth, &wall, &roles());
    for i in 0..5 {
        assert_eq!(&out[i * 4..i * 4 + 2], &truth[i * 4..i * 4 + 2]);
        assert_eq!(out[i * 4 + 2], pred[i * 4 + 2]);
    }
    let mixed = [
        NodeType::Normal,
        NodeType::Inflow,
        NodeType::Outflow,
        NodeType::Wall,
        NodeType::Obstacle,
    ];
    let out = enforce_bc(&pred, &truth, &mixed, &roles());
    for (i, t) in mixed.iter().enumerate() {
        let v_truth = !matches!(t, NodeType::Normal | NodeType::Outflow);
        let s_truth = *t == NodeType::Inflow;
        for k in 0..2 {
            assert_eq!(
                out[i * 4 + k],
                if v_truth {
                    truth[i * 4 + k]
                } else {
                    pred[i * 4 + k]
                }
            );
        }
        assert_eq!(
            out[i * 4 + 2],
            if s_truth {
                truth[i * 4 + 2]
            } else {
                pred[i * 4 + 2]
            }
        );
    }
}

proptest! {
    #[test]
    fn enforcement_is_idempotent(types in prop::collection::vec(0u8..5, 1..12), seed in 0u64..1000) {
        let nt: Vec<NodeType> = types.iter().map(|&t| NodeType::from_index(t).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = nt.len() * 4;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let once = enforce_bc(&pred, &truth, &nt, &roles());
        prop_assert_eq!(enforce_bc(&once, &truth, &nt, &roles()), once);
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_match(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let schema = FieldSchema::advection_diffusion();
        prop_assert!(state_mse(&a, &b, &schema) > 0.0);
        prop_assert_eq!(state_mse(&a, &a, &schema), 0.0);
    }
}

#[test]
fn constant_offset_gives_its_magnitude() {
    let schema = FieldSchema::advection_diffusion();
    let truth: Vec<f64> = (0..40).map(|x| x as f64 * 0.1).collect();
    let pred: Vec<f64> = truth.iter().map(|x| x + 0.37).collect();
    assert!((state_mse(&pred, &truth, &schema).sqrt() - 0.37).abs() < 1e-14);
}

#[test]
fn identity_model_matches_persistence() {
    let d = data(2, 6);
    let m = small_model(&d, Architecture::Transformer);
    let ctxs = contexts(&m, &d).unwrap();
    let report = evaluate(&m, &ctxs, &d).unwrap();
    let oracle = persistence_rmse(&d, 0);
    assert!(
        (report.rollout_rmse - oracle).abs() < 1e-12 * oracle,
        "{} {}",
        report.rollout_rmse,
        oracle
    );
    assert_eq!(report.diverged, 0);
}

#[test]
fn stationary_truth_gives_zero_error() {
    let d = data(1, 3);
    let s = d[0].state(0).to_vec();
    let frozen =
        vec![
            Trajectory::new(d[0].mesh.clone(), s.repeat(4), 4, 0.01, d[0].schema.clone()).unwrap(),
        ];
    let m = small_model(&d, Architecture::Mgn);
    let ctxs = contexts(&m, &frozen).unwrap();
    let r = evaluate(&m, &ctxs, &frozen).unwrap();
    assert_eq!(r.rollout_rmse, 0.0);
    assert_eq!(r.one_step_rmse, 0.0);
}

#[test]
fn metrics_match_quadruple_loop() {
    let d = data(2, 5);
    let mut m = small_model(&d, Architecture::Transformer);
    perturb(&mut m, 0.05, 1);
    let ctxs = contexts(&m, &d).unwrap();
    let report = evaluate(&m, &ctxs, &d).unwrap();
    let mut roll = 0.0;
    let mut one = 0.0;
    for (k, traj) in d.iter().enumerate() {
        let r = rollout(&m, &ctxs[k], traj, 0, traj.num_steps - 1).unwrap();
        let (n, c) = (traj.num_nodes(), traj.num_components());
        let steps = traj.num_steps - 1;
        let mut acc_r = 0.0;
        let mut acc_o = 0.0;
        for t in 1..=steps {
            let truth = traj.state_f64(t);
            let one_step =
                predict_step(&m, &ctxs[k], traj, &traj.state_f64(t - 1), None, &truth).unwrap();
            let mut sr = 0.0;
            let mut so = 0.0;
            for i in 0..n {
                let mut vr = 0.0;
                let mut vo = 0.0;
                for v in 0..3 {
                    vr += (r.states[t][i * c + v] - truth[i * c + v]).powi(2);
                    vo += (one_step[i * c + v] - truth[i * c + v]).powi(2);
                }
                sr += vr / 3.0;
                so += vo / 3.0;
            }
            acc_r += sr / n as f64;
            acc_o += so / n as f64;
        }
        roll += acc_r / steps as f64;
        one += acc_o / steps as f64;
    }
    let (roll, one) = ((roll / 2.0).sqrt(), (one / 2.0).sqrt());
    assert!(
        (report.rollout_rmse - roll).abs() < 1e-12 * roll,
        "{} {roll}",
        report.rollout_rmse
    );
    assert!((report.one_step_rmse - one).abs() < 1e-12 * one);
    assert!(report.rollout_rmse > 0.0);
}

#[test]
fn horizon_one_equals_one_step() {
    let d = data(1, 4);
    let mut m = small_model(&d, Architecture::Transolver);
    perturb(&mut m, 0.05, 2);
    let ctx = m.context(&d[0].mesh).unwrap();
    let r = rollout(&m, &ctx, &d[0], 2, 1).unwrap();
    let truth = d[0].state_f64(3);
    let p = predict_step(&m, &ctx, &d[0], &d[0].state_f64(2), None, &truth).unwrap();
    assert_eq!(r.rmse(), state_mse(&p, &truth, &d[0].schema).sqrt());
}

#[test]
fn continuation_equals_direct_rollout() {
    let d = data(1, 6);
    let mut cfg = ModelConfig {
        layers: 2,
        width: 8,
        heads: 2,
        history: true,
        ..Default::default()
    };
    cfg.mnp.enabled = false;
    let mut m = Model::new(
        cfg,
        FieldSchema::advection_diffusion(),
        2,
        Normalizer::fit(&d, true).unwrap(),
    )
    .unwrap();
    perturb(&mut m, 0.05, 3);
    let ctx = m.context(&d[0].mesh).unwrap();
    let direct = rollout(&m, &ctx, &d[0], 1, 5).unwrap();
    let part = rollout(&m, &ctx, &d[0], 1, 2).unwrap();
    let cont =
        continue_rollout(&m, &ctx, &d[0], 1, part.states, Some(d[0].state_f64(0)), 5).unwrap();
    assert_eq!(cont.states, direct.states);
    assert_eq!(cont.step_rmse, direct.step_rmse);
    assert!(rollout(&m, &ctx, &d[0], 0, 2).is_err());
    assert!(rollout(&m, &ctx, &d[0], 1, 6).is_err());
}

#[test]
fn blow_up_is_flagged() {
    let d = data(1, 4);
    let mut m = small_model(&d, Architecture::Mgn);
    let id = m.params.find("decoder.1.b").unwrap();
    m.params
        .get_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = 1e12);
    let ctx = m.context(&d[0].mesh).unwrap();
    let r = rollout(&m, &ctx, &d[0], 0, 4).unwrap();
    assert_eq!(r.diverged, Some(1));
    assert_eq!(r.rmse(), f64::INFINITY);
}

#[test]
fn latent_distance_with_identity_processor_is_flat() {
    let d = data(1, 3);
    let cfg = ModelConfig {
        architecture: Architecture::Mgn,
        layers: 3,
        width: 8,
        heads: 2,
        temporal: TemporalConfig {
            enabled: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut m = Model::new(
        cfg,
        FieldSchema::advection_diffusion(),
        2,
        Normalizer::fit(&d, false).unwrap(),
    )
    .unwrap();
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.name(id).starts_with("mgn") {
            let t = m.params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }
    let ctx = m.context(&d[0].mesh).unwrap();
    let dist = latent_distance_probe(&m, &ctx, &d[0], 1).unwrap();
    assert_eq!(dist.len(), 4);
    assert!(dist.iter().all(|&x| x == dist[0]));
    assert!(dist[0] > 0.0);
}

#[test]
fn latent_distance_matches_recomputation() {
    let d = data(1, 3);
    let mut m = small_model(&d, Architecture::Transformer);
    perturb(&mut m, 0.1, 4);
    let ctx = m.context(&d[0].mesh).unwrap();
    let dist = latent_distance_probe(&m, &ctx, &d[0], 0).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_constant(&tape);
    let f0 = crate::data::node_features(&d[0], 0, false).unwrap();
    let f1 = crate::data::node_features(&d[0], 1, false).unwrap();
    let lat = m.forward(&p, &ctx, &f0).unwrap().latents;
    let target = m.encode(&p, &ctx, &f1).unwrap().value();
    for (l, z) in lat.iter().enumerate() {
        let z = z.value();
        let mut acc = 0.0;
        for i in 0..z.rows() {
            let mut s = 0.0;
            for c in 0..z.cols() {
                s += (z.get(i, c) - target.get(i, c)).powi(2);
            }
            acc += s.sqrt();
        }
        assert!((dist[l] - acc / z.rows() as f64).abs() < 1e-12);
    }
    // Identical input and target at layer 0 with a frozen state.
    let s = d[0].state(0).to_vec();
    let frozen =
        Trajectory::new(d[0].mesh.clone(), s.repeat(2), 2, 0.01, d[0].schema.clone()).unwrap();
    assert_eq!(latent_distance_probe(&m, &ctx, &frozen, 0).unwrap()[0], 0.0);
}

#[test]
fn probes_fit_inputs_and_fail_on_shuffled_targets() {
    let d = data(2, 4);
    let mut m = small_model(&d, Architecture::Transformer);
    perturb(&mut m, 0.1, 5);
    let ctxs = contexts(&m, &d).unwrap();
    let samples: Vec<(usize, usize)> = (0..2).flat_map(|k| (0..4).map(move |t| (k, t))).collect();
    let cfg = ProbeConfig {
        steps: 300,
        ..Default::default()
    };
    let tasks = [
        ProbeTask::Input,
        ProbeTask::Velocity,
        ProbeTask::Pressure,
        ProbeTask::GradientMagnitude,
    ];
    let r = subtask_probe(&m, &ctxs, &d, &samples, &tasks, &cfg).unwrap();
    assert_eq!(r.loss.len(), 4);
    assert!(r.loss.iter().all(|l| l.len() == 3));
    assert!(
        r.loss[0][0] < 0.1 * r.variance[0],
        "{:?} {:?}",
        r.loss[0],
        r.variance
    );
    let again = subtask_probe(&m, &ctxs, &d, &samples, &tasks, &cfg).unwrap();
    assert_eq!(r, again);

    let shuffled = subtask_probe(
        &m,
        &ctxs,
        &d,
        &samples,
        &[ProbeTask::Pressure],
        &ProbeConfig {
            shuffle_targets: true,
            ..cfg
        },
    )
    .unwrap();
    let v = shuffled.variance[0];
    for l in &shuffled.loss[0] {
        assert!((l - v).abs() < 0.3 * v, "{l} vs {v}");
    }
}

#[test]
fn ground_truth_surrogate_has_zero_error() {
    let d = data(2, 5);
    let r = evaluate_with(&GroundTruth, &d, None).unwrap();
    assert_eq!(r.one_step_rmse, 0.0);
    assert_eq!(r.rollout_rmse, 0.0);
    assert!(r.step_rmse.iter().all(|&x| x == 0.0));
    let short = evaluate_with(&GroundTruth, &d, Some(2)).unwrap();
    assert_eq!(short.step_rmse.len(), 2);
}
