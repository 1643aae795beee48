//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion straight to stdout, so the lines appear in `cargo test`
//! output without `--nocapture`.
//!
//! The exact checks (1-4, 10) also assert. The end-to-end checks (5-9)
//! report their verdict and measurements and only fail the test on a
//! pipeline error: they measure properties of a trained toy model, and a
//! FAIL there is a finding, not a crash.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use entity_distill::baselines::EditorKind;
use entity_distill::distiller::{self, distill_entity, distill_loss, kl_div, soften, EditConfig, LossReduction};
use entity_distill::evalsuite::{
    compute_delta, eval_specificity, eval_target_ppl, paired_bootstrap, paired_bootstrap_exact, round1, Prepend,
    BOOTSTRAP_RESAMPLES,
};
use entity_distill::lm::{softmax_rows, token_cross_entropy, LanguageModel, ModelConfig, Role};
use entity_distill::pipeline::{sweep, EditMode, EditorRun, Evaluator, RunConfig, RunDir, SweepAxis, SweepRun, Workbench};
use entity_distill::sampler::{nucleus_support, Continuation, EntityTokens, TransferSet};
use entity_distill::tokenizer::TokenSeq;
use entity_distill::world::ProbeExample;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u8, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{id:>2}] {verdict} {name} ({:.1}s): {detail}\n", elapsed.as_secs_f64());
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

/// Serializes the long-running checks so their wall times are not
/// inflated by each other.
fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// World and pretrained base, cached on disk under the target directory
/// keyed by the config hash.
fn bench() -> &'static Workbench {
    static BENCH: OnceLock<Workbench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let cfg = RunConfig::default();
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(cfg.base_hash());
        let start = Instant::now();
        let bench = Workbench::prepare(&cfg, &RunDir::new(&dir)).expect("world and base model");
        let line = format!(
            "[--] shared world ({} entities) and base model ready in {:.1}s at {}\n",
            bench.world.entities.len(),
            start.elapsed().as_secs_f64(),
            dir.display()
        );
        std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
        bench
    })
}

fn seeded(seed: u64, f: impl FnOnce(&mut RunConfig)) -> Workbench {
    let b = bench();
    let mut cfg = b.config.clone();
    cfg.seed = seed;
    f(&mut cfg);
    b.with_config(cfg)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn randomized(cfg: ModelConfig, seed: u64, scale: f64) -> LanguageModel {
    let mut m = LanguageModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in m.params_mut() {
        *v += rng.random_range(-scale..scale);
    }
    m
}

fn cont(tokens: &[u32], ell: usize) -> Continuation {
    Continuation { tokens: TokenSeq::from(tokens), ell, mention_prepended: false }
}

#[test]
fn exact_math() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };
    let kl0 = kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
    let kl1 = kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    let kl2 = kl_div(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    check(kl0.abs() <= 1e-9, "kl(p, p) = 0");
    check((kl1 - 2f64.ln()).abs() <= 1e-9 && (kl1 - 0.6931).abs() < 5e-5, "kl = ln 2");
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    check((kl2 - want).abs() <= 1e-9 && (kl2 - 0.1438).abs() < 5e-5, "kl = 0.1438");
    let s = soften(&[2.0, 0.0], 2.0).unwrap();
    check((s[0] - 0.7311).abs() <= 1e-4 && (s[1] - 0.2689).abs() <= 1e-4, "soften([2, 0], 2)");
    let support = nucleus_support(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap();
    let ids: Vec<u32> = support.iter().map(|(t, _)| *t).collect();
    let renorm = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95];
    check(
        ids == [0, 1, 2] && support.iter().zip(renorm).all(|((_, p), w)| (p - w).abs() < 1e-12),
        "nucleus support {0, 1, 2}",
    );
    check(round1(compute_delta(31.0, 25.3)) == -5.7, "delta 31.0 -> 25.3");
    check(round1(compute_delta(34.1, 65.9)) == 31.8, "delta 34.1 -> 65.9");
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), "time budget");
    let pass = fails.is_empty();
    report(
        1,
        "exact math",
        pass,
        elapsed,
        &format!("kl = [{kl0:.3e}, {kl1:.10}, {kl2:.10}], soften = [{:.4}, {:.4}], nucleus = {ids:?}; failed: {fails:?}", s[0], s[1]),
    );
    assert!(pass, "{fails:?}");
}

/// Mean KL over continuation tokens `ell..` written out from the raw
/// logits: teacher row `|d| + j` against student row `j`.
fn loss_oracle(zt: &Array2<f64>, zs: &Array2<f64>, def_len: usize, ell: usize, tau: f64) -> f64 {
    let softmax = |row: Vec<f64>| {
        let e: Vec<f64> = row.iter().map(|z| (z / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let n = zs.nrows();
    let mut total = 0.0;
    for j in ell..n {
        let p = softmax(zt.row(def_len + j).to_vec());
        let q = softmax(zs.row(j).to_vec());
        total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    total / (n - ell) as f64
}

#[test]
fn loss_and_indexing() {
    let start = Instant::now();
    let tau = 2.0;
    // |d| = 2, |c| = 5, mention ends at 2: three supervised positions.
    let zt = array![
        [9.0, 9.0, 9.0],
        [9.0, 9.0, 9.0],
        [5.0, -5.0, 0.0],
        [-5.0, 5.0, 0.0],
        [1.0, 0.5, -0.5],
        [0.2, 1.4, -1.0],
        [-0.7, 0.0, 2.1]
    ];
    let zs = array![[3.0, 3.0, -3.0], [0.0, 7.0, 1.0], [0.3, 0.1, 0.2], [1.0, -1.0, 0.5], [0.0, 0.0, 1.0]];
    let (def_len, ell) = (2, 2);
    let got = distill_loss(softmax_rows(&zt, tau).view(), softmax_rows(&zs, tau).view(), ell, def_len, LossReduction::Mean)
        .unwrap();
    let oracle = loss_oracle(&zt, &zs, def_len, ell, tau);
    let formula_ok = (got - oracle).abs() <= 1e-9;

    // Student rows before the mention end and teacher rows over the
    // definition and mention can be anything without changing the loss.
    let mut zs2 = zs.clone();
    let mut zt2 = zt.clone();
    for j in 0..ell {
        zs2.row_mut(j).fill(-40.0 * j as f64 + 11.0);
    }
    for j in 0..def_len + ell {
        zt2.row_mut(j).mapv_inplace(|v| v * 3.0 - 1.0);
    }
    let masked = distill_loss(softmax_rows(&zt2, tau).view(), softmax_rows(&zs2, tau).view(), ell, def_len, LossReduction::Mean)
        .unwrap();
    let masked_ok = masked == got;

    // Model level: the teacher target for continuation token j is row
    // |d| + j of an explicit forward pass over d ⧺ c.
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, max_seq_len: 32, vocab_size: 20, tie_embeddings: false };
    let base = randomized(cfg.clone(), 5, 0.3);
    let student = randomized(cfg, 6, 0.3);
    let d = [4u32, 5, 6, 7];
    let c = cont(&[8, 9, 10, 11, 12, 13], 2);
    let (model_loss, _) =
        distiller::continuation_loss_and_grad(&base, &student, &d, &c, tau, LossReduction::Mean).unwrap();
    let joined = TokenSeq::from(&d[..]).concat(&c.tokens);
    let teacher = softmax_rows(&base.logits(&joined).unwrap(), tau);
    let student_probs = softmax_rows(&student.logits(&c.tokens).unwrap(), tau);
    let explicit = distill_loss(teacher.view(), student_probs.view(), c.ell, d.len(), LossReduction::Mean).unwrap();
    let shifted = distill_loss(
        teacher.slice(ndarray::s![..joined.len() - 1, ..]).view(),
        student_probs.view(),
        c.ell,
        d.len() - 1,
        LossReduction::Mean,
    )
    .unwrap();
    let offset_ok = (model_loss - explicit).abs() <= 1e-12 && (model_loss - shifted).abs() > 1e-6;

    let elapsed = start.elapsed();
    let pass = formula_ok && masked_ok && offset_ok && elapsed < Duration::from_secs(60);
    report(
        2,
        "loss and indexing",
        pass,
        elapsed,
        &format!(
            "hand loss {got:.12} vs oracle {oracle:.12}; pre-mention rows inert: {masked_ok}; \
             model loss {model_loss:.12} vs explicit d⧺c {explicit:.12} (off-by-one {shifted:.6})"
        ),
    );
    assert!(pass);
}

/// Largest relative error between analytic and central-difference
/// gradients over `n` randomly sampled parameters.
fn max_relative_error(
    model: &LanguageModel,
    n: usize,
    seed: u64,
    loss_grad: &dyn Fn(&LanguageModel) -> (f64, Vec<f64>),
) -> (f64, usize) {
    let (_, grad) = loss_grad(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..n {
        let i = rng.random_range(0..model.param_count());
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let numeric = (loss_grad(&plus).0 - loss_grad(&minus).0) / (2.0 * h);
        let analytic = grad[i];
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
        nonzero += usize::from(analytic != 0.0);
    }
    (worst, nonzero)
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig { n_layers: 2, d_model: 32, n_heads: 4, max_seq_len: 32, vocab_size: 24, tie_embeddings: false };
    let base = randomized(cfg.clone(), 1, 0.2);
    let student = randomized(cfg, 2, 0.2);
    let d = [3u32, 4, 5, 6, 7];
    let c = cont(&[8, 9, 10, 11, 12, 13, 14], 2);
    let distill = |m: &LanguageModel| {
        let (l, g) = distiller::continuation_loss_and_grad(&base, m, &d, &c, 2.0, LossReduction::Mean).unwrap();
        (l, g.0)
    };
    let seq = [3u32, 9, 4, 17, 5, 21, 6, 2];
    let ce = |m: &LanguageModel| {
        let (l, g) = m.loss_and_grad(&seq, |z| Ok(token_cross_entropy(z, &seq, 0..seq.len(), seq.len() as f64))).unwrap();
        (l, g.0)
    };
    let n = 30;
    let (kl_err, kl_nz) = max_relative_error(&student, n, 11, &distill);
    let (ce_err, ce_nz) = max_relative_error(&student, n, 12, &ce);
    let elapsed = start.elapsed();
    let pass = kl_err < 1e-3 && ce_err < 1e-3 && elapsed < Duration::from_secs(300);
    report(
        3,
        "gradient check",
        pass,
        elapsed,
        &format!(
            "2 layers, d=32, {n} parameters per loss: distillation max rel err {kl_err:.2e} ({kl_nz} nonzero), \
             cross-entropy {ce_err:.2e} ({ce_nz} nonzero)"
        ),
    );
    assert!(pass);
}

#[test]
fn identity_and_noops() {
    let start = Instant::now();
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, max_seq_len: 32, vocab_size: 20, tie_embeddings: false };
    let base = randomized(cfg, 3, 0.3).with_role(Role::Base);
    let e = EntityTokens {
        id: "e".into(),
        name: TokenSeq::from(&[10u32, 11][..]),
        definition: TokenSeq::from(&[10u32, 11, 4, 5, 6][..]),
    };
    let set = TransferSet { entity_id: "e".into(), continuations: vec![cont(&[10, 11, 7, 8, 9], 2), cont(&[3, 10, 11, 12], 3)] };

    let mut student = base.deep_copy(Role::Student);
    distill_entity(&base, &mut student, &e, &set, &EditConfig { epochs: 0, ..EditConfig::default() }).unwrap();
    let k0 = student.params() == base.params();

    let copy = base.deep_copy(Role::Student);
    let x = [10u32, 11, 7, 8, 9, 3, 12];
    let p = base.forward(&x).unwrap();
    let q = copy.forward(&x).unwrap();
    let zero_kl = (0..x.len()).all(|j| {
        kl_div(p.dist(j).as_slice().unwrap(), q.dist(j).as_slice().unwrap()).unwrap() == 0.0
    });

    let probe = ProbeExample {
        id: "e/0".into(),
        entity_id: "e".into(),
        prefix: TokenSeq::from(&[10u32, 11, 12][..]),
        target: TokenSeq::from(&[6u32][..]),
        options: Some(vec![TokenSeq::from(&[6u32][..]), TokenSeq::from(&[7u32][..])]),
        gold: 0,
    };
    let before = base.checksum();
    entity_distill::baselines::prepend_eval(&base, &e.definition, &probe).unwrap();
    eval_target_ppl(&base, std::slice::from_ref(&probe), Prepend::Fixed(&e.definition)).unwrap();
    let untouched = base.checksum() == before;

    let spec_probes = [ProbeExample { id: "p/0".into(), entity_id: "p".into(), ..probe.clone() }];
    let spec_pre = eval_target_ppl(&base, &spec_probes, Prepend::None).unwrap();
    let spec = eval_specificity(&student, &spec_probes, &spec_pre, &["e"]).unwrap();
    let spec_zero = spec.delta == 0.0 && spec.relative == 0.0;

    let elapsed = start.elapsed();
    let pass = k0 && zero_kl && untouched && spec_zero && elapsed < Duration::from_secs(60);
    report(
        4,
        "identity and no-ops",
        pass,
        elapsed,
        &format!(
            "zero-epoch edit bit-identical: {k0}; copy has zero KL: {zero_kl}; prepend leaves checksum: {untouched}; \
             no-op specificity delta: {}",
            spec.delta
        ),
    );
    assert!(pass);
}

struct Propagation {
    distill: Vec<EditorRun>,
    ft_definition: Vec<EditorRun>,
    prepend: Vec<EditorRun>,
    elapsed: Duration,
}

/// Single-entity edits of the default entities under each seed.
fn propagation() -> &'static Propagation {
    static RUNS: OnceLock<Propagation> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let mut out = Propagation { distill: Vec::new(), ft_definition: Vec::new(), prepend: Vec::new(), elapsed: Duration::ZERO };
        for seed in SEEDS {
            let b = seeded(seed, |_| {});
            let evaluator = Evaluator::new(&b, b.edit_items().unwrap()).unwrap();
            let run = |kind: EditorKind| {
                evaluator.run(kind, &b.config.editor_config(kind), EditMode::Single, &mut |_, _, _| Ok(())).unwrap()
            };
            out.distill.push(run(EditorKind::Distill));
            out.ft_definition.push(run(EditorKind::FtDefinitionFull));
            out.prepend.push(run(EditorKind::Prepend));
        }
        out.elapsed = start.elapsed();
        out
    })
}

fn mean_gain(runs: &[EditorRun]) -> f64 {
    mean(runs.iter().map(|r| r.target_gain()))
}

#[test]
fn end_to_end_propagation() {
    let _g = heavy();
    let b = bench();
    let p = propagation();
    let entities: Vec<_> = p.distill.iter().flat_map(|r| &r.entities).collect();
    let improved = entities.iter().filter(|e| e.target_post < e.target_pre).count() as f64 / entities.len() as f64;
    let g_distill = mean_gain(&p.distill);
    let g_ft = mean_gain(&p.ft_definition);
    let g_prepend = mean_gain(&p.prepend);
    let spec: Vec<f64> = p.distill.iter().map(|r| r.specificity_relative()).collect();
    let a = improved >= 0.9;
    let b_ = g_distill >= 0.5 * g_prepend;
    let c = g_distill >= g_ft;
    let d = spec.iter().all(|s| s.abs() <= 0.05);
    let in_time = p.elapsed <= Duration::from_secs(30 * 60);
    let n_popular = b.world.entities.iter().filter(|e| e.tier == entity_distill::world::Tier::Popular).count();
    let ok = |v: bool| if v { "ok" } else { "FAIL" };
    report(
        5,
        "end-to-end propagation",
        a && b_ && c && d && in_time,
        p.elapsed,
        &format!(
            "{} seeds x {} entities, {n_popular} popular; (a) improved {:.1}% [{}]; (b) gain distill {g_distill:.2} vs \
             prepend {g_prepend:.2} = {:.1}% [{}]; (c) vs ft-definition {g_ft:.2} [{}]; (d) specificity {} [{}]",
            SEEDS.len(),
            b.config.eval.n_entities,
            100.0 * improved,
            ok(a),
            100.0 * g_distill / g_prepend,
            ok(b_),
            ok(c),
            spec.iter().map(|s| format!("{:+.2}%", 100.0 * s)).collect::<Vec<_>>().join(" "),
            ok(d),
        ),
    );
}

#[test]
fn definition_internalization() {
    let _g = heavy();
    bench();
    let p = propagation();
    let pre = mean(p.distill.iter().flat_map(|r| r.entities.iter().map(|e| e.definition_ppl_pre)));
    let post = |runs: &[EditorRun]| mean(runs.iter().flat_map(|r| r.entities.iter().map(|e| e.definition_ppl_post.unwrap())));
    let distill = post(&p.distill);
    let ft = post(&p.ft_definition);
    let pass = distill < pre && ft < distill && p.elapsed <= Duration::from_secs(10 * 60);
    report(
        9,
        "definition internalization",
        pass,
        p.elapsed,
        &format!("definition perplexity pre {pre:.3}, after distillation {distill:.3}, after ft-definition {ft:.3}"),
    );
}

#[test]
fn ablation_ordering() {
    let _g = heavy();
    bench();
    let start = Instant::now();
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for seed in SEEDS {
        let rows = sweep::ablate(&seeded(seed, |_| {})).unwrap();
        for (i, r) in rows.iter().enumerate() {
            cells[i].push(r.target_post);
        }
    }
    let [cc, rd, rt, rte]: [f64; 4] = std::array::from_fn(|i| mean(cells[i].iter().copied()));
    let elapsed = start.elapsed();
    let order = cc <= rt && rd > cc && cc <= rte && rte <= rt;
    report(
        6,
        "ablation ordering",
        order && elapsed <= Duration::from_secs(30 * 60),
        elapsed,
        &format!(
            "mean target perplexity after distillation: correct/correct {cc:.2}, random def/correct {rd:.2}, \
             correct/random {rt:.2}, correct/random+entity {rte:.2}"
        ),
    );
}

#[test]
fn multi_entity_scaling() {
    let _g = heavy();
    bench();
    let start = Instant::now();
    let sizes = [10.0, 25.0, 50.0, 100.0, 150.0];
    let b = seeded(0, |c| {
        c.editors = vec![EditorKind::Distill];
        c.sweep.seeds = SEEDS.to_vec();
    });
    let rows = sweep::sweep(&b, SweepAxis::NEntities, &sizes).unwrap();
    let failures: Vec<&SweepRun> = rows.iter().filter(|r| !r.error.is_empty()).collect();
    let at = |n: f64| -> Vec<&SweepRun> { rows.iter().filter(|r| r.value == n && r.error.is_empty()).collect() };

    let mut single = Vec::new();
    for seed in SEEDS {
        let s = seeded(seed, |c| c.eval.n_entities = 50);
        let evaluator = Evaluator::new(&s, s.edit_items().unwrap()).unwrap();
        let r = evaluator
            .run(EditorKind::Distill, &s.config.editor_config(EditorKind::Distill), EditMode::Single, &mut |_, _, _| Ok(()))
            .unwrap();
        single.push(mean(r.entities.iter().map(|e| e.target_gain())));
    }
    let single_gain = mean(single.iter().copied());
    let batch_gain = mean(at(50.0).iter().map(|r| r.target_gain));
    let retention = batch_gain / single_gain;
    let spec150 = mean(at(150.0).iter().map(|r| r.specificity_relative));

    let dir = tempfile::tempdir().unwrap();
    sweep::write_sweep(dir.path(), &rows).unwrap();
    let runs_csv = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    let summary_csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let shape = runs_csv.lines().count() == 1 + sizes.len() * SEEDS.len()
        && summary_csv.lines().count() == 1 + sizes.len()
        && summary_csv.lines().next().unwrap().starts_with("axis,value,editor,runs,failures");

    let elapsed = start.elapsed();
    let pass = failures.is_empty()
        && retention >= 0.7
        && spec150 <= 0.10
        && shape
        && elapsed <= Duration::from_secs(2 * 3600);
    let curve: Vec<String> = sizes
        .iter()
        .map(|&n| {
            let pts = at(n);
            format!(
                "{n}: gain {:.1} spec {:+.1}%",
                mean(pts.iter().map(|r| r.target_gain)),
                100.0 * mean(pts.iter().map(|r| r.specificity_relative))
            )
        })
        .collect();
    report(
        7,
        "multi-entity scaling",
        pass,
        elapsed,
        &format!(
            "retention at 50 = {:.1}% (batch {batch_gain:.1} vs single {single_gain:.1}); specificity at 150 = {:+.1}%; \
             csv shape ok: {shape}; failures {}; per size [{}]",
            100.0 * retention,
            100.0 * spec150,
            failures.len(),
            curve.join("; ")
        ),
    );
}

#[test]
fn transfer_set_size() {
    let _g = heavy();
    bench();
    let start = Instant::now();
    let sizes = [1.0, 2.0, 5.0, 10.0];
    let b = seeded(0, |c| {
        c.editors = vec![EditorKind::Distill];
        c.sweep.seeds = SEEDS.to_vec();
    });
    let rows = sweep::sweep(&b, SweepAxis::NContinuations, &sizes).unwrap();
    let failures = rows.iter().filter(|r| !r.error.is_empty()).count();
    let post: Vec<f64> =
        sizes.iter().map(|&n| mean(rows.iter().filter(|r| r.value == n && r.error.is_empty()).map(|r| r.target_post))).collect();
    let marginal: Vec<String> = post.windows(2).zip(sizes.windows(2)).map(|(p, n)| format!("{}->{}: {:+.2}", n[0], n[1], p[1] - p[0])).collect();
    let elapsed = start.elapsed();
    let pass = failures == 0 && post[3] <= post[0] && elapsed <= Duration::from_secs(30 * 60);
    report(
        8,
        "transfer-set size",
        pass,
        elapsed,
        &format!(
            "{} updates per entity; target perplexity n=1 {:.2}, n=2 {:.2}, n=5 {:.2}, n=10 {:.2}; marginal [{}]",
            b.config.sweep.total_updates,
            post[0],
            post[1],
            post[2],
            post[3],
            marginal.join(", ")
        ),
    );
}

#[test]
fn bootstrap_statistics() {
    let start = Instant::now();
    let a = [1.0, 5.0, 3.0];
    let b = [4.0, 4.0, 2.0];
    let exact = paired_bootstrap_exact(&a, &b).unwrap();
    let p = paired_bootstrap(&a, &b, BOOTSTRAP_RESAMPLES, 0).unwrap();
    let c = [2.5, 0.5, 7.0];
    let d = [1.0, 3.0, 6.0];
    let matches = p == exact && paired_bootstrap(&c, &d, BOOTSTRAP_RESAMPLES, 1).unwrap() == paired_bootstrap_exact(&c, &d).unwrap();
    let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() + 2.0).collect();
    let lower: Vec<f64> = xs.iter().map(|v| v - 1.0).collect();
    let same = paired_bootstrap(&xs, &xs, BOOTSTRAP_RESAMPLES, 0).unwrap();
    let better = paired_bootstrap(&lower, &xs, BOOTSTRAP_RESAMPLES, 0).unwrap();
    let default_n = BOOTSTRAP_RESAMPLES == 10_000 && RunConfig::default().eval.bootstrap_resamples == 10_000;
    let elapsed = start.elapsed();
    let pass = matches && same == 1.0 && better == 0.0 && default_n;
    report(
        10,
        "bootstrap statistics",
        pass,
        elapsed,
        &format!(
            "n=3 p {p} vs exhaustive {exact}; a = b gives {same}; a below b gives {better}; default resamples {}",
            BOOTSTRAP_RESAMPLES
        ),
    );
    assert!(pass);
}
