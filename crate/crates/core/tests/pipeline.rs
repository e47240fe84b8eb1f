//! Pretrain, fine-tune and evaluate through the public API.

use std::time::Duration;

use flowrl::autodiff::checkpoint;
use flowrl::flow::task::{dist_sq, Task, MODE_CENTERS, MODE_STD};
use flowrl::reward::remote::{spawn_mock, RemoteScorer};
use flowrl::reward::AnalyticScorer;
use flowrl::train::{
    evaluate, held_out, pretrain_run, read_metrics, sample_finals, train, Algo, RunConfig, Sampling,
};

fn quick() -> RunConfig {
    RunConfig {
        steps: 4,
        k: 2,
        group: 4,
        batch: 2,
        iterations: 8,
        dataset_size: 256,
        pretrain_epochs: 2,
        hidden: vec![16],
        encoder_dim: 8,
        encoder_ff: 8,
        lr: 1e-3,
        ..RunConfig::default()
    }
}

#[test]
fn pretrained_ode_samples_land_in_the_instructed_mode() {
    let cfg = RunConfig::default();
    let (store, report) = pretrain_run(&cfg).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());
    let inst = held_out(&cfg, 1000).unwrap();
    let finals = sample_finals(&cfg.model(), &store, &cfg.sde().unwrap(), &inst, Sampling::Ode, 0).unwrap();
    let radius = 3.0 * MODE_STD;
    let inside = finals
        .iter()
        .zip(&inst)
        .filter(|(x, i)| dist_sq(**x, MODE_CENTERS[i.instruction.code]) < radius * radius)
        .count();
    assert!(inside >= 900, "{inside}/1000 within {radius} of the instructed mode");
}

#[test]
fn grpo_raises_mean_reward_over_200_iterations() {
    let cfg = RunConfig {
        pretrain_epochs: 4,
        iterations: 200,
        lr: 4e-4,
        ..RunConfig::default()
    };
    let (pretrained, _) = pretrain_run(&cfg).unwrap();
    let out = train(&cfg, Algo::Grpo, &pretrained, &mut AnalyticScorer, None).unwrap();
    let r: Vec<f64> = out.metrics.iter().map(|m| m.mean_reward).collect();
    let window = 25;
    let first = r[..window].iter().sum::<f64>() / window as f64;
    let last = r[r.len() - window..].iter().sum::<f64>() / window as f64;
    assert!(last >= first + 0.5, "first {first:.3}, last {last:.3}");
    let per_iter = (cfg.batch * cfg.group) as u64;
    assert_eq!(out.metrics.last().unwrap().reward_queries, 200 * per_iter);
    assert_eq!(out.skipped, 0);
}

#[test]
fn remote_scoring_trains_identically_to_analytic_scoring() {
    let cfg = quick();
    let (pretrained, _) = pretrain_run(&cfg).unwrap();
    let addr = spawn_mock("127.0.0.1:0", Task::MoveToMode).unwrap();
    let mut remote = RemoteScorer::new(&addr.to_string(), Duration::from_secs(5)).unwrap();
    for algo in [Algo::Grpo, Algo::Dense] {
        let a = train(&cfg, algo, &pretrained, &mut AnalyticScorer, None).unwrap();
        let b = train(&cfg, algo, &pretrained, &mut remote, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.store.flat_values(), b.store.flat_values());
    }
}

#[test]
fn streamed_metrics_and_checkpoints_round_trip() {
    let cfg = quick();
    let (pretrained, _) = pretrain_run(&cfg).unwrap();
    let mut csv = Vec::new();
    let out = train(&cfg, Algo::Dense, &pretrained, &mut AnalyticScorer, Some(&mut csv)).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("iteration,mean_reward,objective,kl,reward_queries,step_evals,wall_ms,r,k\n"));
    assert_eq!(read_metrics(&text).unwrap(), out.metrics);
    let evals = (cfg.batch * cfg.group * (cfg.steps + cfg.k)) as u64;
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step_evals, (i as u64 + 1) * evals);
        let (starts, k) = m.dense.as_ref().unwrap();
        assert_eq!(*k, cfg.k);
        assert!(starts.iter().all(|r| (cfg.k..=cfg.steps).contains(r)));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    checkpoint::save(&out.store, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let bits = |s: &flowrl::autodiff::ParameterStore| s.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&out.store));

    // Evaluation of the reloaded policy is reproducible and in range.
    let inst = held_out(&cfg, 50).unwrap();
    let sde = cfg.sde().unwrap();
    let e1 = evaluate(&cfg.model(), &back, &sde, &inst, Sampling::Sde, 3, &mut AnalyticScorer).unwrap();
    let e2 = evaluate(&cfg.model(), &out.store, &sde, &inst, Sampling::Sde, 3, &mut AnalyticScorer).unwrap();
    assert_eq!(e1, e2);
    assert!((0.0..=15.0).contains(&e1.total));
    assert!((e1.alignment + e1.coherence + e1.consistency - e1.total).abs() < 1e-12);
}
