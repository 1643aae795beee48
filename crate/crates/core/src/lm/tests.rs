use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lm::optim::Sgd;
use crate::tokenizer::TokenSeq;

fn small_cfg(vocab: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, max_seq_len: 12, vocab_size: vocab, tie_embeddings: true }
}

fn randomized(cfg: ModelConfig, seed: u64) -> LanguageModel {
    // Larger-than-init weights so every code path carries signal.
    let mut m = LanguageModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in m.params_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    m
}

/// Plain-loop reimplementation of the forward pass used as an oracle.
mod oracle {
    use super::*;

    fn get(m: &LanguageModel, t: TensorSpec, r: usize, c: usize) -> f64 {
        m.params()[t.offset + r * t.cols + c]
    }

    fn ln(m: &LanguageModel, x: &[f64], g: TensorSpec, b: TensorSpec) -> Vec<f64> {
        let d = x.len() as f64;
        let mu = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * get(m, g, 0, i) + get(m, b, 0, i))
            .collect()
    }

    fn matvec(m: &LanguageModel, x: &[f64], w: TensorSpec, b: TensorSpec) -> Vec<f64> {
        (0..w.cols)
            .map(|j| (0..w.rows).map(|i| x[i] * get(m, w, i, j)).sum::<f64>() + get(m, b, 0, j))
            .collect()
    }

    pub fn next_token_probs(m: &LanguageModel, inputs: &[u32]) -> Vec<Vec<f64>> {
        let cfg = m.config();
        let l = m.layout();
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let mut h: Vec<Vec<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(p, &t)| (0..d).map(|i| get(m, l.tok_emb, t as usize, i) + get(m, l.pos_emb, p, i)).collect())
            .collect();
        for b in &l.blocks {
            let qkv: Vec<Vec<f64>> = h.iter().map(|x| matvec(m, &ln(m, x, b.ln1_g, b.ln1_b), b.w_qkv, b.b_qkv)).collect();
            let mut att = vec![vec![0.0; d]; h.len()];
            for hd in 0..cfg.n_heads {
                for i in 0..h.len() {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..dh).map(|k| qkv[i][hd * dh + k] * qkv[j][d + hd * dh + k]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for k in 0..dh {
                        att[i][hd * dh + k] = (0..=i).map(|j| ex[j] / z * qkv[j][2 * d + hd * dh + k]).sum();
                    }
                }
            }
            for i in 0..h.len() {
                let o = matvec(m, &att[i], b.w_o, b.b_o);
                for k in 0..d {
                    h[i][k] += o[k];
                }
                let f: Vec<f64> = matvec(m, &ln(m, &h[i], b.ln2_g, b.ln2_b), b.w_fc, b.b_fc)
                    .into_iter()
                    .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                    .collect();
                let p = matvec(m, &f, b.w_proj, b.b_proj);
                for k in 0..d {
                    h[i][k] += p[k];
                }
            }
        }
        let out = l.output();
        h.iter()
            .map(|x| {
                let hf = ln(m, x, l.lnf_g, l.lnf_b);
                let z: Vec<f64> = (0..cfg.vocab_size).map(|v| (0..d).map(|k| hf[k] * get(m, out, v, k)).sum()).collect();
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }
}

fn zero_output(m: &mut LanguageModel) {
    let out = m.layout().output();
    m.params_mut()[out.range()].fill(0.0);
}

#[test]
fn zero_output_weights_give_uniform() {
    let mut m = randomized(small_cfg(100), 1);
    zero_output(&mut m);
    let d = m.forward(&[5, 6, 7]).unwrap();
    for j in 0..3 {
        for &p in d.dist(j) {
            assert_abs_diff_eq!(p, 0.01, epsilon = 1e-12);
        }
    }
    let nll = m.nll(&[4], &[9, 10]).unwrap();
    for v in nll {
        assert_abs_diff_eq!(v, 100f64.ln(), epsilon = 1e-9);
    }
    assert_abs_diff_eq!(m.perplexity(&[4], &[9]).unwrap(), 100.0, epsilon = 1e-6);
}

#[test]
fn forward_matches_loop_oracle() {
    for tie in [true, false] {
        let mut cfg = small_cfg(11);
        cfg.tie_embeddings = tie;
        let m = randomized(cfg, 7);
        for x in [vec![4u32, 9], vec![3, 8, 8, 10, 5]] {
            let got = m.forward(&x).unwrap();
            let mut inputs = vec![Vocabulary::BOS_ID];
            inputs.extend_from_slice(&x[..x.len() - 1]);
            let want = oracle::next_token_probs(&m, &inputs);
            for (j, row) in want.iter().enumerate() {
                for (v, &p) in row.iter().enumerate() {
                    assert_abs_diff_eq!(got.dist(j)[v], p, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn distributions_are_normalized() {
    let m = randomized(small_cfg(13), 2);
    let d = m.forward(&[4, 5, 6, 7, 8, 9]).unwrap();
    for j in 0..d.len() {
        assert!((d.dist(j).sum() - 1.0).abs() < 1e-6);
        assert!(d.dist(j).iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn causal_mask() {
    let m = randomized(small_cfg(13), 3);
    let x = [4u32, 5, 6, 7, 8, 9];
    let base = m.forward(&x).unwrap();
    for j in 0..x.len() {
        let mut y = x;
        y[j] = 12;
        let d = m.forward(&y).unwrap();
        // entry i predicts x[i] from x[..i]; changing x[j] can only affect i > j
        for i in 0..=j {
            assert_eq!(base.dist(i), d.dist(i), "position {i} changed when perturbing {j}");
        }
    }
}

#[test]
fn conditional_forward_is_a_slice() {
    let m = randomized(small_cfg(13), 4);
    let prefix = [4u32, 5, 6];
    let cont = [7u32, 8, 9, 10];
    let full: Vec<u32> = prefix.iter().chain(cont.iter()).copied().collect();
    let whole = m.forward(&full).unwrap();
    let cond = m.conditional_forward(&prefix, &cont).unwrap();
    for j in 0..cont.len() {
        assert_eq!(cond.dist(j), whole.dist(prefix.len() + j));
    }
    let no_prefix = m.conditional_forward(&[], &cont).unwrap();
    assert_eq!(no_prefix.probs(), m.forward(&cont).unwrap().probs());
}

#[test]
fn overlong_and_empty_inputs() {
    let m = randomized(small_cfg(13), 5);
    assert!(matches!(m.forward(&[4; 13]), Err(Error::SequenceTooLong { len: 13, max: 12 })));
    assert!(m.forward(&[4; 12]).is_ok());
    assert!(matches!(m.forward(&[]), Err(Error::EmptyInput(_))));
    assert!(matches!(m.nll(&[4], &[]), Err(Error::EmptyInput(_))));
}

#[test]
fn nll_matches_gather_and_log() {
    let m = randomized(small_cfg(13), 6);
    let x = [4u32, 5];
    let y = [6u32, 7, 8];
    let nll = m.nll(&x, &y).unwrap();
    let full = m.forward(&[4, 5, 6, 7, 8]).unwrap();
    for k in 0..3 {
        assert_abs_diff_eq!(nll[k], -full.dist(2 + k)[y[k] as usize].ln(), epsilon = 1e-10);
    }
}

#[test]
fn deterministic_model_has_unit_perplexity() {
    // Token 9 dominates every position via an untied output head.
    let mut cfg = small_cfg(13);
    cfg.tie_embeddings = false;
    let mut m2 = LanguageModel::new(cfg, 8).unwrap();
    let head = m2.layout().head.unwrap();
    let lnf_b = m2.layout().lnf_b;
    m2.params_mut()[head.range()].fill(0.0);
    m2.params_mut()[lnf_b.range()].fill(1.0);
    let row9 = head.offset + 9 * head.cols;
    m2.params_mut()[row9..row9 + head.cols].fill(100.0);
    let ppl = m2.perplexity(&[4], &[9, 9]).unwrap();
    assert_abs_diff_eq!(ppl, 1.0, epsilon = 1e-9);
}

#[test]
fn deep_copy_is_independent() {
    let m = randomized(small_cfg(13), 9);
    let mut c = m.deep_copy(Role::Student);
    assert_eq!(c.role(), Role::Student);
    let x = [4u32, 5, 6];
    assert_eq!(m.forward(&x).unwrap().probs(), c.forward(&x).unwrap().probs());
    let before = m.checksum();
    let (_, g) = c
        .loss_and_grad(&x, |z| Ok(token_cross_entropy(z, &x, 0..3, 3.0)))
        .unwrap();
    c.apply_gradient_step(&g, 1e-2, &mut Sgd::new(), TrainScope::Full).unwrap();
    assert_eq!(m.checksum(), before);
    assert_ne!(c.checksum(), before);
}

#[test]
fn zero_lr_step_is_identity() {
    let mut m = randomized(small_cfg(13), 10);
    let before = m.params().to_vec();
    let x = [4u32, 5, 6];
    let (_, g) = m.loss_and_grad(&x, |z| Ok(token_cross_entropy(z, &x, 0..3, 3.0))).unwrap();
    m.apply_gradient_step(&g, 0.0, &mut Adam::new(), TrainScope::Full).unwrap();
    assert_eq!(m.params(), &before[..]);
}

#[test]
fn non_finite_gradient_aborts() {
    let mut m = randomized(small_cfg(13), 11);
    let before = m.checksum();
    let mut g = Gradients::zeros(m.param_count());
    g.0[3] = f64::NAN;
    assert!(matches!(
        m.apply_gradient_step(&g, 1e-3, &mut Adam::new(), TrainScope::Full),
        Err(Error::NonFinite { .. })
    ));
    assert_eq!(m.checksum(), before);
}

#[test]
fn last_layer_scope_freezes_the_rest() {
    let mut cfg = small_cfg(13);
    cfg.tie_embeddings = false;
    let mut m = randomized(cfg, 12);
    let before = m.params().to_vec();
    let x = [4u32, 5, 6];
    let (_, g) = m.loss_and_grad(&x, |z| Ok(token_cross_entropy(z, &x, 0..3, 3.0))).unwrap();
    m.apply_gradient_step(&g, 1e-2, &mut Sgd::new(), TrainScope::LastLayer).unwrap();
    let trainable = m.trainable_ranges(TrainScope::LastLayer);
    for (i, (&a, &b)) in before.iter().zip(m.params()).enumerate() {
        if !trainable.iter().any(|r| r.contains(&i)) {
            assert_eq!(a, b, "frozen parameter {i} moved");
        }
    }
    assert_ne!(before, m.params());
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = small_cfg(13);
    let a = LanguageModel::new(cfg.clone(), 1).unwrap();
    let b = LanguageModel::new(cfg.clone(), 2).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_eq!(a.param_count(), cfg.param_count());
    let d = 16;
    let per_block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
    assert_eq!(cfg.param_count(), 13 * d + 12 * d + 2 * per_block + 2 * d);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let cfg = ModelConfig { n_layers: 2, d_model: 32, n_heads: 4, max_seq_len: 16, vocab_size: 17, tie_embeddings: true };
    let m = randomized(cfg, 13);
    let x = [4u32, 9, 5, 16, 7, 2];
    let loss = |m: &LanguageModel| {
        m.loss_and_grad(&x, |z| Ok(token_cross_entropy(z, &x, 1..6, 5.0))).unwrap().0
    };
    let (_, g) = m.loss_and_grad(&x, |z| Ok(token_cross_entropy(z, &x, 1..6, 5.0))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    while checked < 40 {
        let i = rng.random_range(0..m.param_count());
        let mut p = m.clone();
        let h = 1e-5;
        p.params_mut()[i] += h;
        let up = loss(&p);
        p.params_mut()[i] -= 2.0 * h;
        let down = loss(&p);
        let fd = (up - down) / (2.0 * h);
        if fd.abs() < 1e-6 && g.0[i].abs() < 1e-6 {
            continue;
        }
        let rel = (fd - g.0[i]).abs() / fd.abs().max(g.0[i].abs());
        assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd} (rel {rel})", g.0[i]);
        checked += 1;
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = randomized(small_cfg(13), 14).with_role(Role::Student);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.role(), Role::Student);
    assert_eq!(back.params(), m.params());
    let x = [4u32, 5, 6, 7];
    assert_eq!(back.forward(&x).unwrap().probs(), m.forward(&x).unwrap().probs());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = randomized(small_cfg(13), 15);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::VersionMismatch { found: 99, .. })));

    let mut bad = good.clone();
    let k = bad.len() / 2;
    bad[k] ^= 0xff;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));

    std::fs::write(&path, &good[..20]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));

    assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
}

#[test]
fn pretrain_zero_steps_is_identity_and_memorizes_one_sentence() {
    let cfg = ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, max_seq_len: 12, vocab_size: 12, tie_embeddings: true };
    let mut m = LanguageModel::new(cfg, 3).unwrap();
    let s = TokenSeq::new(vec![4, 5, 6, 7, 8, 2]);
    let before = m.checksum();
    let tc = TrainConfig { learning_rate: 1e-3, steps: 0, batch_size: 1, seed: 0, warmup: 0 };
    assert!(pretrain(&mut m, &[s.clone()], &tc).unwrap().is_empty());
    assert_eq!(m.checksum(), before);

    let tc = TrainConfig { steps: 800, ..tc };
    let log = pretrain(&mut m, &[s.clone()], &tc).unwrap();
    assert_eq!(log.len(), 800);
    assert!(log.last().unwrap().loss < log[0].loss);
    let nll = m.nll(&[], &s).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!(mean < 0.1, "mean nll {mean}");
}

#[test]
fn pretrain_is_deterministic() {
    let cfg = small_cfg(12);
    let corpus = vec![TokenSeq::new(vec![4, 5, 6, 2]), TokenSeq::new(vec![7, 8, 9, 10, 2])];
    let tc = TrainConfig { learning_rate: 1e-3, steps: 5, batch_size: 2, seed: 4, warmup: 1 };
    let mut a = LanguageModel::new(cfg.clone(), 1).unwrap();
    let mut b = LanguageModel::new(cfg, 1).unwrap();
    pretrain(&mut a, &corpus, &tc).unwrap();
    pretrain(&mut b, &corpus, &tc).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn unseen_token_rows_are_redrawn_from_reference_statistics() {
    let mut cfg = small_cfg(40);
    cfg.tie_embeddings = false;
    let d_model = cfg.d_model;
    let base = randomized(cfg, 11);
    let seen: Vec<bool> = (0..40).map(|i| i < 30).collect();
    let reference: Vec<bool> = (0..40).map(|i| (10..30).contains(&i)).collect();
    let mut m = base.clone();
    assert_eq!(m.initialize_unseen_tokens(&seen, &reference, 3).unwrap(), 10);
    let l = m.layout().clone();
    for t in [l.tok_emb, l.head.unwrap()] {
        for r in 0..40 {
            let row = t.offset + r * t.cols..t.offset + (r + 1) * t.cols;
            if r < 30 {
                assert_eq!(m.params()[row.clone()], base.params()[row]);
            } else {
                assert_ne!(m.params()[row.clone()], base.params()[row]);
            }
        }
    }
    // Everything but the unseen embedding and head rows is untouched.
    let changed = m.params().iter().zip(base.params()).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 2 * 10 * d_model);
    let mut again = base.clone();
    again.initialize_unseen_tokens(&seen, &reference, 3).unwrap();
    assert_eq!(again.checksum(), m.checksum());
    assert!(base.clone().initialize_unseen_tokens(&seen[..5], &reference, 0).is_err());
    let lonely: Vec<bool> = (0..40).map(|i| i == 12).collect();
    assert!(base.clone().initialize_unseen_tokens(&seen, &lonely, 0).is_err());
}
