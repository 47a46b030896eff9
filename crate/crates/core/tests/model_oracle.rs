//! Forward passes checked against straight-line scalar loops, and gradients
//! checked against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_balance_core::model::{Branch, MixMode, ModelConfig, ModelParams, EXPLAIN_ONLY_TENSORS, TENSOR_NAMES};
use vqa_balance_core::train::{grad_check, grad_check_with, random_problem, GradCheckConfig};
use vqa_balance_core::vocab::{Example, ExplainTarget, FeatureTable};

fn small_config(h: usize, k: usize, answers: usize) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        word_dim: 4,
        hidden_dim: h,
        common_dim: 3,
        answer_embed_dim: 3,
        candidates: k,
        question_vocab: 9,
        answer_vocab: answers,
        normalize_image: false,
        mix: MixMode::Full,
    }
}

fn random_params(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, 0.5, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.7..0.7);
        }
    }
    p
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// --- scalar oracle ---------------------------------------------------------

fn w(p: &[f64], cols: usize, r: usize, c: usize) -> f64 {
    p[r * cols + c]
}

fn oracle_question(p: &ModelParams, tokens: &[usize]) -> Vec<f64> {
    let e = p.config.word_dim;
    let h = p.config.hidden_dim;
    let mut mean = vec![0.0; e];
    for j in 0..e {
        let mut s = 0.0;
        for &t in tokens {
            s += w(&p.word_embeddings.data, e, t, j);
        }
        mean[j] = s / tokens.len() as f64;
    }
    let mut out = vec![0.0; h];
    for i in 0..h {
        let mut z = p.question_proj.bias[i];
        for j in 0..e {
            z += w(&p.question_proj.weight.data, e, i, j) * mean[j];
        }
        out[i] = z.tanh();
    }
    out
}

fn oracle_image(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let d = p.config.feature_dim;
    let mut out = vec![0.0; p.config.hidden_dim];
    for i in 0..out.len() {
        let mut z = p.image_proj.bias[i];
        for j in 0..d {
            z += w(&p.image_proj.weight.data, d, i, j) * x[j];
        }
        out[i] = z.tanh();
    }
    out
}

fn oracle_joint(p: &ModelParams, tokens: &[usize], x: &[f64]) -> Vec<f64> {
    let q = oracle_question(p, tokens);
    let i = oracle_image(p, x);
    (0..q.len()).map(|k| q[k] * i[k]).collect()
}

fn oracle_softmax_head(p: &ModelParams, joint: &[f64]) -> Vec<f64> {
    let h = p.config.hidden_dim;
    let a = p.config.answer_vocab;
    let mut logits = vec![0.0; a];
    for r in 0..a {
        logits[r] = p.answer_head.bias[r];
        for c in 0..h {
            logits[r] += w(&p.answer_head.weight.data, h, r, c) * joint[c];
        }
    }
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}

fn oracle_scores(p: &ModelParams, tokens: &[usize], answer: usize, cands: &[Vec<f64>]) -> Vec<f64> {
    let (h, c, ea, k) = (
        p.config.hidden_dim,
        p.config.common_dim,
        p.config.answer_embed_dim,
        p.config.candidates,
    );
    let mut v = vec![0.0; c];
    for r in 0..c {
        v[r] = p.explain_ans_proj.bias[r];
        for j in 0..ea {
            v[r] += w(&p.explain_ans_proj.weight.data, ea, r, j) * w(&p.answer_embed_table.data, ea, answer, j);
        }
    }
    let mut prods = vec![0.0; k];
    for (i, x) in cands.iter().enumerate() {
        let joint = oracle_joint(p, tokens, x);
        let mut s = 0.0;
        for r in 0..c {
            let mut u = p.explain_qi_proj.bias[r];
            for j in 0..h {
                u += w(&p.explain_qi_proj.weight.data, h, r, j) * joint[j];
            }
            s += u * v[r];
        }
        prods[i] = s;
    }
    (0..k)
        .map(|r| {
            let mut s = p.explain_mix.bias[r];
            for j in 0..k {
                s += w(&p.explain_mix.weight.data, k, r, j) * prods[j];
            }
            s
        })
        .collect()
}

// --- forward checks --------------------------------------------------------

#[test]
fn encode_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let p = random_params(small_config(8, 4, 5), seed);
        let tokens = vec![1, 4, 4, 8];
        let x = random_vec(&mut rng, 6);
        let got = p.encode(&tokens, &x).unwrap().values;
        let want = oracle_joint(&p, &tokens, &x);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() < 1e-12, "{g} vs {o}");
        }
        assert_eq!(p.encode(&tokens, &x).unwrap().values, got, "deterministic");
    }
}

#[test]
fn zero_projections_give_zero_joint() {
    let mut p = random_params(small_config(8, 4, 5), 3);
    for t in [
        &mut p.question_proj.weight.data,
        &mut p.question_proj.bias,
        &mut p.image_proj.weight.data,
        &mut p.image_proj.bias,
    ] {
        t.fill(0.0);
    }
    let j = p.encode(&[1, 2], &[0.3; 6]).unwrap();
    assert!(j.values.iter().all(|v| *v == 0.0));
}

#[test]
fn encode_rejects_wrong_dimension() {
    let p = random_params(small_config(8, 4, 5), 3);
    assert!(p.encode(&[1], &[0.0; 5]).is_err());
}

#[test]
fn answer_forward_matches_oracle_and_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        let p = random_params(small_config(8, 4, 5), seed);
        let x = random_vec(&mut rng, 6);
        let joint = p.encode(&[2, 3], &x).unwrap();
        let got = p.answer_forward(&joint).probabilities;
        let want = oracle_softmax_head(&p, &oracle_joint(&p, &[2, 3], &x));
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(got.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn zero_logits_are_uniform() {
    let mut p = random_params(small_config(8, 4, 5), 1);
    p.answer_head.weight.data.fill(0.0);
    p.answer_head.bias.fill(0.0);
    let d = p.answer_forward(&p.encode(&[1], &[0.1; 6]).unwrap());
    for v in d.probabilities {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn explain_forward_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..5 {
        let p = random_params(small_config(8, 24, 5), seed);
        let cands: Vec<Vec<f64>> = (0..24).map(|_| random_vec(&mut rng, 6)).collect();
        let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
        let got = p.explain_forward(&[3, 1], 2, &refs).unwrap().scores;
        let want = oracle_scores(&p, &[3, 1], 2, &cands);
        assert_eq!(got.len(), 24);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() < 1e-12, "{g} vs {o}");
        }
    }
}

#[test]
fn explain_forward_identity_mix_and_zero_answer() {
    let mut p = random_params(small_config(8, 4, 5), 2);
    // identity mix with zero bias, equal products -> constant scores
    p.explain_mix.weight.data.fill(0.0);
    for i in 0..4 {
        p.explain_mix.weight.data[i * 4 + i] = 1.0;
    }
    p.explain_mix.bias.fill(0.0);
    let same = vec![0.25; 6];
    let refs: Vec<&[f64]> = (0..4).map(|_| same.as_slice()).collect();
    let s = p.explain_forward(&[1], 0, &refs).unwrap().scores;
    assert!(s.iter().all(|v| *v == s[0]));

    // zero answer embedding and zero projection bias -> scores equal the mix bias
    let mut p = random_params(small_config(8, 4, 5), 4);
    p.answer_embed_table.data.fill(0.0);
    p.explain_ans_proj.bias.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cands: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 6)).collect();
    let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
    let s = p.explain_forward(&[1], 3, &refs).unwrap().scores;
    assert_eq!(s, p.explain_mix.bias);

    assert!(p.explain_forward(&[1], 3, &refs[..3]).is_err());
}

#[test]
fn language_only_ignores_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_params(small_config(8, 4, 5), 9);
    let a = p
        .answer_distribution(Branch::LanguageOnly, &[1, 2], &random_vec(&mut rng, 6))
        .unwrap();
    let b = p
        .answer_distribution(Branch::LanguageOnly, &[1, 2], &random_vec(&mut rng, 6))
        .unwrap();
    assert_eq!(a, b);
    // joint = question embedding, so the oracle is the head over the question path alone
    let want = oracle_softmax_head(&p, &oracle_question(&p, &[1, 2]));
    for (g, o) in a.probabilities.iter().zip(&want) {
        assert!((g - o).abs() < 1e-12);
    }
    let mut z = p.clone();
    z.answer_head.weight.data.fill(0.0);
    z.answer_head.bias.fill(0.0);
    let u = z.language_only_forward(&[1]);
    assert!(u.probabilities.iter().all(|v| (v - 0.2).abs() < 1e-15));
}

// --- gradient checks -------------------------------------------------------

#[test]
fn gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let report = grad_check(&GradCheckConfig::small(2024), 20).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked_tensors, TENSOR_NAMES.len());
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn gradients_match_with_shared_mix_and_normalized_images() {
    let mut cfg = GradCheckConfig::small(7);
    cfg.model.mix = MixMode::Shared;
    cfg.model.normalize_image = true;
    let report = grad_check(&cfg, 20).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn language_only_gradients_match() {
    let cfg = GradCheckConfig::small(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (p, ex, table) = random_problem(&cfg.model, &mut rng).unwrap();
        let mut g = p.zeros_like();
        p.loss_and_grad(Branch::LanguageOnly, &ex, &table, 1.0, 1.0, &mut g)
            .unwrap();
        let h = 1e-4;
        for (ti, _) in TENSOR_NAMES.iter().enumerate() {
            let n = p.tensors()[ti].len();
            let mut num = vec![0.0; n];
            for (j, v) in num.iter_mut().enumerate() {
                let mut a = p.clone();
                a.tensors_mut()[ti][j] += h;
                let mut b = p.clone();
                b.tensors_mut()[ti][j] -= h;
                *v = (a.loss(Branch::LanguageOnly, &ex, &table, 1.0, 1.0).unwrap()
                    - b.loss(Branch::LanguageOnly, &ex, &table, 1.0, 1.0).unwrap())
                    / (2.0 * h);
            }
            let err = vqa_balance_core::train::relative_error(g.tensors()[ti], &num);
            assert!(err < 1e-4, "{} {err}", TENSOR_NAMES[ti]);
        }
        // image branch untouched
        assert!(g.image_proj.weight.data.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let cfg = GradCheckConfig::small(5);
    let report = grad_check_with(&cfg, 3, &|p, ex, table, g| {
        let l = p.loss_and_grad(Branch::Joint, ex, table, cfg.lambda, cfg.margin, g)?;
        for v in g.answer_head.weight.data.iter_mut() {
            *v *= 1.01;
        }
        Ok(l.total)
    })
    .unwrap();
    assert!(!report.passed);
    let worst = report.per_tensor.iter().find(|(n, _)| n == "answer_head.weight").unwrap();
    assert!(worst.1 > 1e-3);
}

#[test]
fn satisfied_margin_gives_zero_explain_gradient() {
    let cfg = small_config(5, 4, 4);
    let mut p = random_params(cfg, 8);
    // Make the mix output a pure bias that already separates the pick by more than M.
    p.explain_mix.weight.data.fill(0.0);
    p.explain_mix.bias = vec![0.0, 5.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 6)).collect();
    let table = FeatureTable::from_rows(&rows);
    let ex = Example {
        tokens: vec![1, 2],
        image: 0,
        answer: None,
        explain: Some(ExplainTarget {
            answer: 1,
            candidates: vec![1, 2, 3, 4],
            picked: 1,
        }),
    };
    let mut g = p.zeros_like();
    let l = p.loss_and_grad(Branch::Joint, &ex, &table, 1.0, 0.5, &mut g).unwrap();
    assert_eq!(l.hinge, 0.0);
    for name in EXPLAIN_ONLY_TENSORS {
        let i = TENSOR_NAMES.iter().position(|n| *n == name).unwrap();
        assert!(g.tensors()[i].iter().all(|v| *v == 0.0), "{name}");
    }
}

#[test]
fn small_gradient_step_does_not_increase_loss() {
    let cfg = GradCheckConfig::small(0).model;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let batch: Vec<_> = (0..4).map(|_| random_problem(&cfg, &mut rng).unwrap()).collect();
        // share one parameter set across the batch
        let p = batch[0].0.clone();
        let total = |p: &ModelParams| -> f64 {
            batch
                .iter()
                .map(|(_, ex, t)| p.loss(Branch::Joint, ex, t, 0.5, 1.0).unwrap())
                .sum()
        };
        let mut g = p.zeros_like();
        for (_, ex, t) in &batch {
            p.loss_and_grad(Branch::Joint, ex, t, 0.5, 1.0, &mut g).unwrap();
        }
        let mut q = p.clone();
        q.add_scaled(&g, -1e-5);
        assert!(total(&q) <= total(&p), "seed {seed}");
    }
}
