use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lowrank_q::agent::{Agent, AgentConfig, Variant};
use lowrank_q::completion::SoftImputeConfig;
use lowrank_q::envs::{EnvConfig, Lqr, LqrConfig, ReplayBuffer, Transition};
use lowrank_q::exec::Execution;
use lowrank_q::harness::{complete, rank_scan, sample_grids};
use lowrank_q::Matrix;

fn lqr_buffer(steps: usize, seed: u64) -> ReplayBuffer {
    let mut env = EnvConfig::Lqr(LqrConfig::default()).build().unwrap();
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(10_000, spec.state_dim, spec.action_dim).unwrap();
    let mut s = env.reset(&mut rng);
    for _ in 0..steps {
        let a = vec![0.5 * s[0].sin() - 0.3 * s[0]];
        let o = env.step(&a).unwrap();
        buf.push(Transition {
            state: s.clone(),
            action: a,
            reward: o.reward,
            next_state: o.next_state.clone(),
            terminal: o.terminal,
        })
        .unwrap();
        s = if o.terminal { env.reset(&mut rng) } else { o.next_state };
    }
    buf
}

fn agent(variant: Variant) -> Agent {
    let spec = EnvConfig::Lqr(LqrConfig::default()).build().unwrap().spec().clone();
    let cfg = AgentConfig {
        variant,
        batch_size: 12,
        hidden_sizes: vec![16, 16],
        ensemble_size: 3,
        track_uncertainty: true,
        ..AgentConfig::default()
    };
    Agent::new(cfg, spec, 5).unwrap()
}

#[test]
fn resumed_checkpoint_continues_identically() {
    let buf = lqr_buffer(400, 1);
    let mut a = agent(Variant::UalqeTCb);
    for _ in 0..20 {
        a.train_step(&buf).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let mut b = Agent::load(dir.path()).unwrap();
    assert!(a.same_state(&b));
    for _ in 0..20 {
        a.train_step(&buf).unwrap();
        b.train_step(&buf).unwrap();
    }
    assert!(a.same_state(&b));
}

#[test]
fn sequential_and_parallel_training_agree() {
    let buf = lqr_buffer(400, 2);
    let mut seq = agent(Variant::UalqeEBb).with_execution(Execution::Sequential);
    let mut par = agent(Variant::UalqeEBb).with_execution(Execution::Parallel);
    for _ in 0..15 {
        let ms = seq.train_step(&buf).unwrap();
        let mp = par.train_step(&buf).unwrap();
        assert_eq!(ms, mp);
    }
    assert!(seq.same_state(&par));
}

#[test]
fn buffer_round_trips_and_feeds_oracle_scan() {
    let buf = lqr_buffer(300, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buffer.bin");
    buf.save(&path).unwrap();
    let back = ReplayBuffer::load(&path).unwrap();
    assert_eq!(back.len(), buf.len());

    let oracle = Lqr::new(&LqrConfig::default()).unwrap();
    let grids = sample_grids(&back, 8, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let scan = rank_scan(&oracle, &grids, 0.01, Execution::default()).unwrap();
    assert!(scan.aranks.iter().all(|&r| (1..=3).contains(&r)), "{:?}", scan.aranks);
}

#[test]
fn completion_restores_a_rank_two_matrix() {
    let m = Matrix::from_fn(12, 10, |i, j| {
        (i as f64 + 1.0) * (j as f64 - 4.5) + 3.0 * (i as f64).cos() * (j as f64).sin()
    })
    .unwrap();
    let removed = [(0, 3), (2, 7), (5, 1), (7, 9), (11, 4)];
    let cfg = SoftImputeConfig {
        zeta: 1000.0,
        epsilon: 1e-9,
        max_iterations: 5000,
    };
    let (out, report) = complete(&m, &removed, &cfg).unwrap();
    assert!(report.converged);
    let (mut num, mut den) = (0.0, 0.0);
    for &(i, j) in &removed {
        num += (out.get(i, j) - m.get(i, j)).powi(2);
        den += m.get(i, j).powi(2);
    }
    assert!((num / den).sqrt() < 0.02, "relative error {}", (num / den).sqrt());
    for i in 0..12 {
        for j in 0..10 {
            if !removed.contains(&(i, j)) {
                assert_eq!(out.get(i, j), m.get(i, j));
            }
        }
    }
}
