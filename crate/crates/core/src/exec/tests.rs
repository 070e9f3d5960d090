use proptest::prelude::*;

use super::*;
use crate::sim::EnvParams;
use crate::verifier::VerifierConfig;
use crate::wam::{ToyWam, WamConfig};

/// Predicts an open gripper that never moves.
struct IdleWam;

impl WorldActionModel for IdleWam {
    fn horizon(&self) -> usize {
        32
    }

    fn ratio(&self) -> usize {
        4
    }

    fn predict(&self, obs: &Latent, task: TaskId, origin_step: usize) -> Result<PredictedRollout, WamError> {
        Ok(PredictedRollout {
            task,
            origin_step,
            ratio: 4,
            conditioning: obs.clone(),
            actions: vec![[0.0, 0.0, -1.0]; 32],
            latents: vec![obs.clone(); 8],
            semantic_tokens: vec![obs.clone(); 2],
            kv_cache: None,
        })
    }

    fn semantic_tokens(&self, _: TaskId) -> Vec<Latent> {
        Vec::new()
    }
}

fn task_spec(t_max: usize) -> TaskSpec {
    let params = EnvParams { t_max, ..EnvParams::default() };
    TaskSpec::new(TaskId::TransportEasy, 0, &params)
}

const ADAPTIVE: ExecPolicy = ExecPolicy::Adaptive { tau: 0.5, k: 8, c: 4 };

#[test]
fn accepting_oracle_calls_once_per_chunk() {
    let v = ConstVerifier { score: 1.0, k: 8 };
    let tr = run_episode(&ADAPTIVE, &task_spec(90), &IdleWam, Some(&v)).unwrap();
    assert_eq!(tr.steps, 90);
    assert_eq!(tr.wam_calls, 3);
    assert_eq!(tr.replans, 0);
    // Checks at offsets 4, 8, .., 24 of each chunk; the last chunk stops at 26.
    assert_eq!(tr.verifier_checks, 6 + 6 + 6);
}

#[test]
fn rejecting_oracle_replans_every_c_steps() {
    let v = ConstVerifier { score: 0.0, k: 8 };
    let tr = run_episode(&ADAPTIVE, &task_spec(90), &IdleWam, Some(&v)).unwrap();
    assert_eq!(tr.wam_calls, 90usize.div_ceil(4));
    assert_eq!(tr.replans, tr.wam_calls - 1);
    assert!(tr.checks.iter().all(|c| c.t_off == 4 && c.replan));
}

#[test]
fn threshold_score_executes() {
    let v = ConstVerifier { score: 0.5, k: 8 };
    let tr = run_episode(&ADAPTIVE, &task_spec(90), &IdleWam, Some(&v)).unwrap();
    assert_eq!(tr.wam_calls, 3);
    assert!(tr.checks.iter().all(|c| !c.replan));
}

#[test]
fn always_failing_policy_runs_to_timeout() {
    let params = EnvParams::default();
    let cfg = BenchmarkConfig { episodes_per_task: 5, policies: vec![ExecPolicy::Fixed { n: 16 }], ..Default::default() };
    let out = run_benchmark(&IdleWam, None::<&ConstVerifier>, &params, &cfg, 2).unwrap();
    assert!(out.episodes.iter().all(|r| !r.success && r.steps == params.t_max));
    assert!(out.summary.iter().all(|s| s.sr == 0.0));
}

#[test]
fn counting_wrapper_matches_trace() {
    let wam = ToyWam::new(WamConfig::default(), 2).unwrap();
    let counted = CountingWam::new(&wam);
    let v = ScriptedVerifier::new(vec![0.9, 0.2, 0.7, 0.4, 0.1], 8);
    let tr = run_episode(&ADAPTIVE, &task_spec(120), &counted, Some(&v)).unwrap();
    assert_eq!(tr.wam_calls, counted.calls());
    assert_eq!(tr.wam_flops, tr.wam_calls as u64 * wam.forward_flops());
}

#[test]
fn accepting_gate_equals_fixed_horizon() {
    let wam = ToyWam::new(WamConfig::default(), 4).unwrap();
    let v = ConstVerifier { score: 1.0, k: 8 };
    for task in TaskId::ALL {
        for seed in 0..3 {
            let s = TaskSpec::new(task, seed, &EnvParams::default());
            let a = run_episode(&ADAPTIVE, &s, &wam, Some(&v)).unwrap();
            let b = run_episode(&ExecPolicy::Fixed { n: 32 }, &s, &wam, None::<&ConstVerifier>).unwrap();
            let acts = |t: &ExecutionTrace| t.records.iter().map(|r| r.action).collect::<Vec<_>>();
            assert_eq!(acts(&a), acts(&b));
            assert_eq!(a.wam_calls, b.wam_calls);
        }
    }
}

#[test]
fn learned_verifier_gates_through_cache() {
    let wam = ToyWam::new(WamConfig::default(), 4).unwrap();
    let v = Verifier::new(VerifierConfig::default(), 1).unwrap();
    let tr = run_episode(&ADAPTIVE, &task_spec(60), &wam, Some(&v)).unwrap();
    assert!(tr.verifier_checks > 0);
    assert!(tr.checks.iter().all(|c| (0.0..=1.0).contains(&c.score)));
    assert!(tr.verifier_flops > 0);
}

#[test]
fn policy_validation() {
    assert!(ExecPolicy::Fixed { n: 33 }.validate(32).is_err());
    assert!(ExecPolicy::Fixed { n: 0 }.validate(32).is_err());
    assert!(ExecPolicy::Adaptive { tau: 1.0, k: 8, c: 4 }.validate(32).is_err());
    assert!(ExecPolicy::Adaptive { tau: 0.5, k: 8, c: 0 }.validate(32).is_err());
    let v = ConstVerifier { score: 1.0, k: 4 };
    assert!(matches!(run_episode(&ADAPTIVE, &task_spec(10), &IdleWam, Some(&v)), Err(ExecError::CheckHorizon { policy: 8, verifier: 4 })));
    assert!(run_episode(&ADAPTIVE, &task_spec(10), &IdleWam, None::<&ConstVerifier>).is_err());
}

#[test]
fn checks_start_after_c_steps() {
    let due: Vec<usize> = (0..32).filter(|&e| check_due(e, 32, 8, 4)).collect();
    assert_eq!(due, vec![4, 8, 12, 16, 20, 24]);
    assert!(!check_due(0, 32, 8, 1));
    assert!(check_due(1, 32, 8, 1));
}

#[test]
fn shorter_chunks_call_more() {
    let wam = ToyWam::new(WamConfig::default(), 4).unwrap();
    let cfg = BenchmarkConfig {
        episodes_per_task: 3,
        policies: vec![ExecPolicy::Fixed { n: 16 }, ExecPolicy::Fixed { n: 32 }],
        ..Default::default()
    };
    let out = run_benchmark(&wam, None::<&ConstVerifier>, &EnvParams::default(), &cfg, 1).unwrap();
    for task in TaskId::ALL {
        let calls = |p: &str| out.summary.iter().find(|s| s.policy == p && s.task == task).unwrap().mean_calls;
        assert!(calls("fixed-16") >= calls("fixed-32"));
    }
}

#[test]
fn benchmark_is_order_stable_across_thread_counts() {
    let wam = ToyWam::new(WamConfig::default(), 4).unwrap();
    let v = Verifier::new(VerifierConfig::default(), 1).unwrap();
    let cfg = BenchmarkConfig { episodes_per_task: 3, policies: vec![ExecPolicy::Fixed { n: 8 }, ADAPTIVE], ..Default::default() };
    let a = run_benchmark(&wam, Some(&v), &EnvParams::default(), &cfg, 1).unwrap();
    let b = run_benchmark(&wam, Some(&v), &EnvParams::default(), &cfg, 3).unwrap();
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(benchmark::summary_csv(&a.summary), benchmark::summary_csv(&b.summary));
}

#[test]
fn episodes_roundtrip_to_identical_report() {
    let cfg = BenchmarkConfig { episodes_per_task: 2, ..Default::default() };
    let v = ConstVerifier { score: 0.3, k: 8 };
    let out = run_benchmark(&IdleWam, Some(&v), &EnvParams { t_max: 40, ..Default::default() }, &cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &out).unwrap();
    let f = std::fs::File::open(dir.path().join(EPISODES_FILE)).unwrap();
    let rows = read_episodes(std::io::BufReader::new(f)).unwrap();
    assert_eq!(rows, out.episodes);
    let svg = std::fs::read_to_string(dir.path().join(FRONTIER_FILE)).unwrap();
    assert_eq!(compare_report(&summarize(&rows)).svg, svg);
}

fn row(policy: &str, task: TaskId, sr: f64, steps: f64) -> SummaryRow {
    SummaryRow {
        policy: policy.into(),
        task,
        episodes: 10,
        sr,
        mean_steps: steps,
        mean_calls: 3.0,
        mean_checks: 0.0,
        mean_replans: 0.0,
        mean_flops: 0.0,
    }
}

#[test]
fn single_policy_report() {
    let r = compare_report(&[row("fixed-16", TaskId::TransportEasy, 90.0, 60.0)]);
    assert_eq!(r.svg.matches("<circle").count(), 2, "marker plus legend swatch");
    assert!(r.svg.contains(">SR(%)<") && r.svg.contains(">steps<"));
    assert!(r.table.contains("fixed-16"));
}

#[test]
fn identical_policies_overlap_in_report() {
    let rows = [row("a", TaskId::InsertHard, 50.0, 80.0), row("b", TaskId::InsertHard, 50.0, 80.0)];
    let r = compare_report(&rows);
    let rects: Vec<&str> = r.svg.lines().filter(|l| l.starts_with("<rect") && l.contains("height=\"10\"")).collect();
    assert_eq!(rects.len(), 2);
    let pos = |l: &str| l.split(" fill=").next().unwrap().to_string();
    assert_eq!(pos(rects[0]), pos(rects[1]));
    assert!(r.svg.contains(">a<") && r.svg.contains(">b<"));
}

proptest! {
    /// Replaying a fixed score sequence: a stricter threshold never needs
    /// fewer model calls.
    #[test]
    fn gate_monotone_in_tau(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
        steps in 1usize..200,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(replay_gate(&scores, lo, steps, 32, 8, 4) <= replay_gate(&scores, hi, steps, 32, 8, 4));
    }
}
