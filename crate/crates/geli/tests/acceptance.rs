//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use geli_core::baselines::*;
use geli_core::corpus::{Corpus, Speaker, Trajectory, Turn};
use geli_core::decompose::*;
use geli_core::descriptors::{affect_index, describe_trajectory, undescribed, Affect, AffectIndex, BinEdges};
use geli_core::metrics::{global_loss, local_difference, pair_consistency, AssignmentReplay};
use geli_core::reward_model::*;
use geli_core::rl::{run_alignment, RewardModelScorer, RlConfig};
use geli_core::synthetic::*;
use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

fn mock_assignments(corpus: &Corpus, truth: &HiddenTruth, variant: PromptVariant, sigma: f64, seed: u64) -> Vec<RewardAssignment> {
    let mut oracle = MockOracle::new(truth, sigma, 0);
    let edges = BinEdges::from_corpus(corpus);
    let opts = DecomposeOptions {
        variant,
        project: false,
        seed,
    };
    corpus
        .trajectories
        .iter()
        .map(|t| {
            let described = match variant {
                PromptVariant::Multimodal => describe_trajectory(t, corpus.frames_for(&t.id), &edges),
                PromptVariant::TextOnly => undescribed(t),
            };
            decompose(t, &described, opts, &OracleConfig::default(), &mut oracle).expect("mock decomposition")
        })
        .collect()
}

fn stable_argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(1..60);
        let turns = (0..n).map(|i| Turn::new(Speaker::Agent, "x", i as f64, i as f64 + 1.0)).collect();
        let global = rng.random_range(0.0..=100.0);
        let t = Trajectory::new(format!("c{case}"), turns, global, Speaker::User).map_err(|e| e.to_string())?;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let a = RewardAssignment::new(
            &t,
            Method::Llm,
            raw.iter().copied().enumerate().collect(),
            Provenance {
                model_id: "acceptance".into(),
                sample_seed: case,
                projected: false,
            },
        )
        .map_err(|e| e.to_string())?;
        let p = project_to_constraint(&a, global).map_err(|e| e.to_string())?;
        let err = (p.total() - global).abs() / global.abs().max(1.0);
        worst = worst.max(err);
        check(err <= 1e-9, format!("case {case}: relative error {err:e}"))?;
        let after: Vec<f64> = p.rewards.values().copied().collect();
        check(stable_argsort(&raw) == stable_argsort(&after), format!("case {case}: order changed"))?;
    }
    within(start, Duration::from_secs(1))?;
    Ok(format!("1000 cases, worst relative error {worst:.1e}, order kept in all"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (corpus, truth) = generate(&SyntheticSpec {
        n_trajectories: 200,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let assignments = mock_assignments(&corpus, &truth, PromptVariant::TextOnly, 0.0, 0);
    let mut max_err: f64 = 0.0;
    for a in &assignments {
        let tt = truth.get(&a.trajectory_id).ok_or("missing truth")?;
        check(a.rewards.len() == tt.rewards.len(), "turn sets differ")?;
        for (i, r) in &tt.rewards {
            max_err = max_err.max((a.rewards.get(i).copied().unwrap_or(f64::NAN) - r).abs());
        }
    }
    check(max_err == 0.0, format!("max abs error {max_err}"))?;
    let unclamped: Vec<Trajectory> = corpus.trajectories.iter().filter(|t| truth.is_unclamped(&t.id)).cloned().collect();
    let loss = global_loss(&AssignmentReplay::new(&assignments), &unclamped).map_err(|e| e.to_string())?;
    check(loss == 0.0, format!("replayed L_GE {loss}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("max abs error 0, L_GE 0 on {} unclamped trajectories", unclamped.len()))
}

fn criterion_3() -> Outcome {
    let (corpus, _) = generate(&SyntheticSpec {
        n_trajectories: 80,
        seed: 3,
        turns_min: 4,
        turns_max: 16,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let ts = &corpus.trajectories;
    let err = |e: geli_core::Error| e.to_string();

    let uniform: Vec<_> = ts.iter().map(uniform_decompose).collect::<Result<_, _>>().map_err(err)?;
    let l_uniform = global_loss(&AssignmentReplay::new(&uniform), ts).map_err(err)?;
    check(l_uniform == 0.0, format!("uniform L_GE {l_uniform}"))?;

    let g = train_return_predictor(
        &corpus,
        &ReturnPredictorConfig {
            epochs: 5,
            ..ReturnPredictorConfig::default()
        },
    )
    .map_err(err)?;
    let mut worst_rudder: f64 = 0.0;
    for t in ts {
        let a = rudder_decompose(t, &g).map_err(err)?;
        let full = g.predict(t);
        worst_rudder = worst_rudder.max((a.total() - full).abs());
    }
    check(worst_rudder <= 1e-9, format!("RUDDER telescoping error {worst_rudder:e}"))?;

    let mut model = RewardModel::affine(Featurizer {
        hash_dim: 64,
        ..Featurizer::default()
    });
    model.params.iter_mut().enumerate().for_each(|(i, p)| *p = ((i * 7) % 13) as f64 * 0.05 - 0.3);
    let k = ts.iter().map(Trajectory::agent_turn_count).max().unwrap_or(1);
    let rrd = rrd_surrogate_loss(&model, &corpus, k, 0).map_err(err)?;
    let exact = global_loss(&model, ts).map_err(err)?;
    check((rrd - exact).abs() <= 1e-9 * exact.max(1.0), format!("RRD {rrd} vs L_GE {exact}"))?;

    let mean = constant_baseline(&corpus, ConstantKind::Mean).map_err(err)?;
    let mean_assign: Vec<_> = ts.iter().map(|t| mean.assign(t)).collect::<Result<_, _>>().map_err(err)?;
    let l_mean = global_loss(&AssignmentReplay::new(&mean_assign), ts).map_err(err)?;
    let rs: Vec<f64> = ts.iter().map(|t| t.global_reward).collect();
    let m = rs.iter().sum::<f64>() / rs.len() as f64;
    let var = rs.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rs.len() as f64;
    check((l_mean - var).abs() <= 1e-6 * var, format!("Mean L_GE {l_mean} vs variance {var}"))?;
    Ok(format!(
        "uniform L_GE 0; RUDDER error {worst_rudder:.1e}; RRD(K=T) - L_GE = {:.1e}; Mean L_GE {l_mean:.6} = var {var:.6}",
        rrd - exact
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let featurizer = Featurizer {
        hash_dim: 32,
        ..Featurizer::default()
    };
    let (corpus, truth) = generate(&SyntheticSpec {
        n_trajectories: 120,
        seed: 4,
        true_reward_rule: RewardRule::LinearInFeatures,
        featurizer: featurizer.clone(),
        weight_scale: 0.5,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let assignments = mock_assignments(&corpus, &truth, PromptVariant::TextOnly, 0.0, 0);
    let examples = training_pairs(&featurizer, &corpus, &assignments).map_err(|e| e.to_string())?;
    let d = featurizer.hash_dim;
    let mut x = DMatrix::<f64>::zeros(examples.len(), d + 1);
    let mut y = DVector::<f64>::zeros(examples.len());
    for (row, e) in examples.iter().enumerate() {
        for &(i, v) in &e.features {
            x[(row, i as usize)] = v;
        }
        x[(row, d)] = 1.0;
        y[row] = e.target;
    }
    let xt = x.transpose();
    let oracle = (&xt * &x).cholesky().ok_or("normal matrix is singular")?.solve(&(&xt * &y));
    let cfg = TrainConfig {
        epochs: 400,
        ..TrainConfig::default()
    };
    let trained = train_on_examples(&RewardModel::affine(featurizer), &examples, &cfg).map_err(|e| e.to_string())?;
    let mse = *trained.loss_curve.last().ok_or("empty curve")?;
    let dist = trained.model.params.iter().zip(oracle.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    check(mse < 1e-3, format!("train MSE {mse:e}"))?;
    check(dist < 1e-2, format!("parameter distance {dist:e}"))?;
    within(start, Duration::from_secs(30))?;
    Ok(format!("D={d}, train MSE {mse:.2e}, distance to normal equations {dist:.2e}"))
}

fn criterion_5() -> Outcome {
    let (corpus, truth) = generate(&SyntheticSpec {
        n_trajectories: 30,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let featurizer = Featurizer {
        hash_dim: 256,
        ..Featurizer::default()
    };
    let examples = training_pairs(&featurizer, &corpus, &mock_assignments(&corpus, &truth, PromptVariant::TextOnly, 0.0, 0))
        .map_err(|e| e.to_string())?;
    let mut affine = RewardModel::affine(featurizer.clone());
    affine.params.iter_mut().enumerate().for_each(|(i, p)| *p = ((i * 31) % 17) as f64 * 0.03 - 0.2);
    let mlp = RewardModel::mlp(featurizer, 16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_affine, mut worst_mlp): (f64, f64) = (0.0, 0.0);
    for b in 0..10u64 {
        let batch: Vec<Example> = examples.choose_multiple(&mut rng, 24).cloned().collect();
        worst_affine = worst_affine.max(gradient_check(&affine, &batch, 1e-5, 200, b));
        worst_mlp = worst_mlp.max(gradient_check(&mlp, &batch, 1e-5, 200, b));
    }
    check(worst_affine < 1e-6, format!("affine max relative error {worst_affine:e}"))?;
    check(worst_mlp < 1e-4, format!("MLP max relative error {worst_mlp:e}"))?;
    Ok(format!("10 batches: affine {worst_affine:.1e}, MLP {worst_mlp:.1e}"))
}

fn shuffled(affect: &AffectIndex, seed: u64) -> AffectIndex {
    let mut labels: Vec<Affect> = affect.values().flat_map(|m| m.values().copied()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = labels.into_iter();
    affect
        .iter()
        .map(|(id, m)| (id.clone(), m.keys().map(|&i| (i, it.next().expect("same count"))).collect()))
        .collect()
}

fn criterion_6() -> Outcome {
    let (corpus, truth) = generate(&SyntheticSpec {
        n_trajectories: 500,
        seed: 6,
        affect_gap: 0.2,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let ts = &corpus.trajectories;
    let affect = affect_index(&corpus);
    let err = |e: geli_core::Error| e.to_string();
    for kind in [ConstantKind::Mean, ConstantKind::Mode] {
        let c = constant_baseline(&corpus, kind).map_err(err)?.value;
        let delta = local_difference(&|_: &Trajectory, _: usize| c, ts, &affect).map_err(err)?.delta;
        check(delta == 0.0, format!("{kind:?} constant gives {delta}"))?;
    }
    let replay = AssignmentReplay::new(&mock_assignments(&corpus, &truth, PromptVariant::Multimodal, 0.0, 0));
    let planted = local_difference(&replay, ts, &affect).map_err(err)?;
    check(planted.delta > 0.0, format!("planted delta {}", planted.delta))?;
    let control = local_difference(&replay, ts, &shuffled(&affect, 6)).map_err(err)?;
    check(control.delta.abs() < 0.05, format!("shuffled delta {}", control.delta))?;
    Ok(format!(
        "constants 0 exactly; planted {:.4} > 0; shuffled |{:.4}| < 0.05 (n=500, {}+{} turns)",
        planted.delta, control.delta, planted.positive_turns, planted.non_positive_turns
    ))
}

fn criterion_7() -> Outcome {
    let (corpus, truth) = generate(&SyntheticSpec {
        n_trajectories: 10,
        seed: 7,
        base_reward: 0.25,
        salient_reward: 1.0,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let pairs_at = |sigma: f64| -> Vec<(RewardAssignment, RewardAssignment)> {
        let a = mock_assignments(&corpus, &truth, PromptVariant::TextOnly, sigma, 0);
        let b = mock_assignments(&corpus, &truth, PromptVariant::TextOnly, sigma, 1);
        a.into_iter().zip(b).collect()
    };
    let exact = pair_consistency(&corpus.trajectories, &pairs_at(0.0)).map_err(|e| e.to_string())?.ok_or("no pairs")?;
    check(exact.mean == 1.0, format!("noise-free agreement {}", exact.mean))?;
    let noisy = pair_consistency(&corpus.trajectories, &pairs_at(0.3)).map_err(|e| e.to_string())?.ok_or("no pairs")?;
    let line = format!("{noisy} over {} conversations", noisy.conversations);
    let shape_ok = {
        let parts: Vec<&str> = line.split(' ').collect();
        parts.len() == 6
            && parts[0].ends_with('%')
            && parts[1] == "\u{b1}"
            && parts[2].ends_with('%')
            && parts[0].trim_end_matches('%').split('.').nth(1).map(str::len) == Some(2)
            && parts[2].trim_end_matches('%').split('.').nth(1).map(str::len) == Some(2)
            && parts[4] == "10"
    };
    check(shape_ok, format!("unexpected format `{line}`"))?;
    Ok(format!("noise 0 -> 1.0; noisy -> {line}"))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_trajectories: 200,
        seed: 8,
        ..SyntheticSpec::default()
    };
    let (corpus, truth) = generate(&spec).map_err(|e| e.to_string())?;
    let assignments = mock_assignments(&corpus, &truth, PromptVariant::TextOnly, 0.0, 0);
    let trained = train(&RewardModel::affine(Featurizer::default()), &corpus, &assignments, &TrainConfig::default())
        .map_err(|e| e.to_string())?;
    let scorer = RewardModelScorer {
        model: &trained.model,
        vocab: spec.vocab[..8].to_vec(),
    };
    let mut finals = Vec::new();
    let mut reference = None;
    for gamma in [0.01, 0.05, 0.5] {
        let cfg = RlConfig {
            kl_coefficient: gamma,
            ..RlConfig::default()
        };
        let report = run_alignment(&scorer, &cfg).map_err(|e| e.to_string())?;
        for c in 0..report.policy.context_count() {
            let p = report.policy.probs(c);
            check(
                p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                format!("gamma {gamma}: context {c} is not a distribution"),
            )?;
        }
        check(report.curve.iter().all(|r| r.kl.is_finite()), format!("gamma {gamma}: non-finite KL"))?;
        finals.push((gamma, report.final_kl));
        if gamma == 0.05 {
            reference = Some(report);
        }
    }
    let r = reference.expect("reference run");
    let ratio = r.final_mean_reward / r.initial_mean_reward;
    check(ratio >= 1.2, format!("reward ratio {ratio:.3}"))?;
    check(
        finals.windows(2).all(|w| w[1].1 <= w[0].1),
        format!("final KL not non-increasing in gamma: {finals:?}"),
    )?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "reward {:.3} -> {:.3} (x{ratio:.2}); final KL {}",
        r.initial_mean_reward,
        r.final_mean_reward,
        finals.iter().map(|(g, k)| format!("{g}:{k:.3}")).collect::<Vec<_>>().join(" ")
    ))
}

fn geli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_geli"))
        .args(args)
        .current_dir(dir)
        .env_remove("GELI_LLM_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("geli {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn run_chain(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    geli(dir, &["synth", "--out", "data", "--n", "60", "--test-n", "30", "--seed", "9"])?;
    geli(dir, &["describe", "--corpus", "data/train.jsonl", "--features", "data/train_features.csv", "--out", "desc"])?;
    geli(
        dir,
        &[
            "decompose", "--corpus", "desc/described.jsonl", "--method", "mm-llm", "--endpoint", "mock:data/truth.jsonl",
            "--samples", "2", "--jobs", "3", "--seed", "9", "--out", "dec",
        ],
    )?;
    geli(dir, &["train-reward", "--corpus", "data/train.jsonl", "--assignments", "dec/assignments.jsonl", "--epochs", "10", "--seed", "9", "--out", "model"])?;
    geli(
        dir,
        &[
            "eval", "--corpus", "data/test.jsonl", "--features", "data/test_features.csv", "--model", "model/model.json",
            "--out", "eval",
        ],
    )?;
    ["desc/described.jsonl", "dec/assignments.jsonl", "model/model.json", "eval/report.json", "eval/report.csv"]
        .iter()
        .map(|p| std::fs::read(dir.join(p)).map(|b| (p.to_string(), b)).map_err(|e| format!("{p}: {e}")))
        .collect()
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_chain(a.path())?;
    let second = run_chain(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        check(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("sum-constraint projection", criterion_1),
        ("mock-oracle recovery", criterion_2),
        ("baseline identities", criterion_3),
        ("affine distillation", criterion_4),
        ("gradient correctness", criterion_5),
        ("local difference sanity", criterion_6),
        ("consistency protocol", criterion_7),
        ("RL harness", criterion_8),
        ("pipeline reproducibility", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name} ({took:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({took:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
