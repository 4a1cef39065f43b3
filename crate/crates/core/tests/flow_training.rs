use std::thread;

use ddm_core::datagen::{self, GenParams};
use ddm_core::flow::{self, ArmKind, TrainArmConfig, EXPERT_HIDDEN};
use ddm_core::harness::experiment;
use ddm_core::harness::config::hex_digest;
use ddm_core::harness::ExperimentConfig;
use ddm_core::nn::{self, AdamConfig, OptState};
use ddm_core::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn overfits_a_single_item() {
    let p = GenParams::default();
    let widths = flow::velocity_widths(&p, &EXPERT_HIDDEN);
    let ds = datagen::build_dataset(&p, 1, 4).unwrap();
    let item = &ds.items[0];
    let mut r = rng::stream(4, 0);
    let x0 = item.clip.as_slice();
    let eps: Vec<f64> = (0..x0.len()).map(|_| r.sample(StandardNormal)).collect();
    let t = 0.37;
    let x_t = flow::interpolate_path(x0, &eps, t).unwrap();
    let target = flow::target_velocity(x0, &eps).unwrap();
    let sample = nn::VelocitySample {
        x_t,
        t,
        cond: item.cond.full.clone(),
        target,
    };
    let mut net = nn::init_params(&widths, 4).unwrap();
    let mut opt = OptState::new(&net, AdamConfig::default());
    let mut last = f64::INFINITY;
    for _ in 0..3000 {
        let (loss, g) = nn::loss_and_gradients(&net, std::slice::from_ref(&sample)).unwrap();
        last = loss;
        if loss < 1e-4 {
            break;
        }
        (net, opt) = nn::adam_update(net, &g, opt).unwrap();
    }
    assert!(last < 1e-4, "loss after 3000 steps: {last}");
}

#[test]
fn loss_halves_over_two_thousand_steps() {
    let config = ExperimentConfig::with_seed(0);
    let ds = datagen::build_dataset(&config.data, config.n_train_per_cluster, 0).unwrap();
    let init = nn::init_params(&experiment::expert_widths(&config), 0).unwrap();
    let out = flow::train_arm(&TrainArmConfig::new(ArmKind::Monolithic, 2000, 0), &ds, init).unwrap();
    let first: f64 = out.losses[..100].iter().sum::<f64>() / 100.0;
    let last: f64 = out.losses[1900..].iter().sum::<f64>() / 100.0;
    assert!(last < 0.5 * first, "first {first}, last {last}");
}

#[test]
fn training_is_deterministic() {
    let ds = datagen::build_dataset(&GenParams::default(), 20, 1).unwrap();
    let widths = flow::velocity_widths(&ds.params, &[16]);
    let run = || {
        let init = nn::init_params(&widths, 3).unwrap();
        flow::train_arm(&TrainArmConfig::new(ArmKind::Expert(1), 40, 3), &ds, init).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
}

fn checkpoint_hash(config: &ExperimentConfig, ds: &datagen::Dataset, k: usize) -> String {
    let out = experiment::train_expert(config, ds, k).unwrap();
    let bytes = nn::checkpoint_bytes(&out.params, &out.opt, "expert");
    hex_digest(&bytes)
}

#[test]
fn expert_checkpoint_ignores_other_experts() {
    let config = ExperimentConfig::with_seed(11);
    let ds = datagen::build_dataset(&config.data, config.n_train_per_cluster, 11).unwrap();

    let alone = checkpoint_hash(&config, &ds, 1);
    let after_others = {
        checkpoint_hash(&config, &ds, 0);
        checkpoint_hash(&config, &ds, 2);
        checkpoint_hash(&config, &ds, 1)
    };
    let concurrent = thread::scope(|s| {
        let others: Vec<_> = [2, 0]
            .into_iter()
            .map(|k| {
                let (config, ds) = (&config, &ds);
                s.spawn(move || checkpoint_hash(config, ds, k))
            })
            .collect();
        let mine = s.spawn(|| checkpoint_hash(&config, &ds, 1)).join().unwrap();
        for h in others {
            h.join().unwrap();
        }
        mine
    });
    assert_eq!(alone, after_others);
    assert_eq!(alone, concurrent);
}

#[test]
fn iso_data_accounting_balances() {
    let mut config = ExperimentConfig::with_seed(2);
    config.total_steps = 90;
    config.expert_hidden = vec![8];
    let ds = datagen::build_dataset(&config.data, 30, 2).unwrap();
    let mono = experiment::train_monolithic(&config, &ds).unwrap();
    let experts: Vec<_> = (0..3).map(|k| experiment::train_expert(&config, &ds, k).unwrap()).collect();
    let total: usize = experts.iter().map(|e| e.items_consumed).sum();
    assert_eq!(total, mono.items_consumed);
    for (k, e) in experts.iter().enumerate() {
        for (c, &n) in e.cluster_audit.iter().enumerate() {
            assert!(c == k || n == 0, "expert {k} consumed cluster {c}");
        }
    }
    // The union arm sees every cluster.
    assert!(mono.cluster_audit.iter().all(|&n| n > 0));
}

#[test]
fn divergence_reports_the_step() {
    let ds = datagen::build_dataset(&GenParams::default(), 5, 1).unwrap();
    let widths = flow::velocity_widths(&ds.params, &[4]);
    let mut init = nn::init_params(&widths, 1).unwrap();
    init.set_param(0, 1e308);
    init.set_param(1, 1e308);
    let cfg = TrainArmConfig {
        adam: AdamConfig {
            lr: 1e300,
            ..AdamConfig::default()
        },
        ..TrainArmConfig::new(ArmKind::Monolithic, 10, 1)
    };
    match flow::train_arm(&cfg, &ds, init) {
        Err(ddm_core::Error::Divergence { step, .. }) => assert!(step < 10),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
    }
}

#[test]
fn batch_matrices_line_up_with_items() {
    let ds = datagen::build_dataset(&GenParams::default(), 3, 5).unwrap();
    let batch = flow::make_flow_batch(&ds.items, 6, 0.5, flow::TimeSampling::Uniform, &mut rng::stream(5, 3)).unwrap();
    let (inputs, targets): (Array2<f64>, Array2<f64>) = flow::batch_matrices(&batch).unwrap();
    assert_eq!(inputs.nrows(), 6);
    for (i, item) in batch.iter().enumerate() {
        assert_eq!(&inputs.row(i).as_slice().unwrap()[..32], &item.x_t[..]);
        assert_eq!(targets.row(i).as_slice().unwrap(), &item.target[..]);
    }
}
