//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clasp_core::diagnostics::{conflict_ratio, expert_activation_divergence, harmonic_mean, ExpertActivationProfile, GradientTrace};
use clasp_core::encoders::{FeatureMap, OracleEncoder, StageShape, ORACLE_DIM};
use clasp_core::error::ClaspError;
use clasp_core::gradcheck::{check_tree, compare, numeric_slice, TensorCheck, DEFAULT_STEP};
use clasp_core::losses::{
    attribute_loss_logits, balancing_loss_stage, balancing_loss_stage_grad, dino_loss_logits, part_loss_grad,
    DinoState, CV2_EPSILON, BALANCING_ALPHA,
};
use clasp_core::model::ModelConfig;
use clasp_core::nn::{Linear, ParamTree};
use clasp_core::pc_moe::{channel_gate, global_gate, moe_backward, moe_forward, GateRecord, MoeConfig, MoeParams};
use clasp_core::pseudo_labels::{
    select_attribute_label, select_part_label, semantic_passes, AttributeLabel, AttributeLabelSet, AttributeSchema,
    GranularitySet, PartLabelMap, PartOutcome, PartVocabulary, PseudoLabeler, RejectReason, ATTRIBUTE_THRESHOLD,
};
use clasp_core::tensor::Tensor;
use clasp_core::trainer::{
    build_training_set, ema_update, evaluate_batch, make_batch, run_training, step_rng, train_step, ModelState, RunStart,
    TrainConfig,
};
use clasp_core::workbench::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use clasp_core::workbench::synthetic::{generate_synthetic_dataset, SyntheticPersonSpec};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t0: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t0.elapsed();
    ensure(e < limit, format!("{what} took {:.1}s, limit {}s", e.as_secs_f64(), limit.as_secs()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    FeatureMap::from_tokens(c, h, w, 0, Tensor::randn(&[c * h * w], 1.0, &mut rng(seed)).data().to_vec()).unwrap()
}

fn worst(checks: &[TensorCheck]) -> (f64, String) {
    checks
        .iter()
        .map(|c| (c.relative_error(), c.name.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}

// ---------------------------------------------------------------- 1

fn moe_fd(cfg: MoeConfig, seed: u64) -> Vec<TensorCheck> {
    let c = 6;
    let mut p = MoeParams::init(c, &cfg, &mut rng(seed));
    p.fc = Linear::randn(c, c, 0.3, &mut rng(seed + 1));
    p.w_gate = Tensor::randn(&[c, cfg.n_experts], 0.5, &mut rng(seed + 2));
    p.w_channel = Tensor::randn(&[c, c], 0.5, &mut rng(seed + 3));
    p.prompts = Tensor::randn(&[3, c], 0.5, &mut rng(seed + 4));
    let fm = random_map(c, 3, 2, seed + 5);
    let r = Tensor::randn(&[fm.data().len()], 1.0, &mut rng(seed + 6)).data().to_vec();
    let q = Tensor::randn(&[cfg.n_experts], 1.0, &mut rng(seed + 7)).data().to_vec();
    let task = (seed % 3) as usize;
    let loss = |p: &MoeParams, f: &FeatureMap| {
        let (y, cache) = moe_forward(p, f, task, &cfg, true, &mut rng(99)).unwrap();
        let a: f64 = y.data().iter().zip(&r).map(|(a, b)| a * b).sum();
        a + cache.record().gates.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = moe_forward(&p, &fm, task, &cfg, true, &mut rng(99)).unwrap();
    let mut g = p.clone();
    g.zero_();
    let dx = moe_backward(&p, &cache, &r, Some(&q), &mut g).unwrap();
    let mut checks = check_tree(&p, &g, DEFAULT_STEP, |pp| loss(pp, &fm));
    let num = numeric_slice(fm.data(), DEFAULT_STEP, |x| loss(&p, &FeatureMap::from_tokens(c, 3, 2, 0, x.to_vec()).unwrap()));
    checks.push(compare("moe.input", &dx, &num));
    checks.into_iter().map(|mut c| {
        c.name = format!("moe.{}", c.name);
        c
    }).collect()
}

fn loss_fd(seed: u64) -> Vec<TensorCheck> {
    let mut out = Vec::new();
    let mut r = rng(100 + seed);

    // self-distillation, gradient with respect to the student logits
    let d = 7;
    let mut st = DinoState::new(d);
    st.center = Tensor::randn(&[d], 0.3, &mut r).data().to_vec();
    let teacher: Vec<Vec<f64>> = (0..2).map(|_| Tensor::randn(&[d], 1.0, &mut r).data().to_vec()).collect();
    let student: Vec<Vec<f64>> = (0..2).map(|_| Tensor::randn(&[d], 1.0, &mut r).data().to_vec()).collect();
    let (_, g) = dino_loss_logits(&teacher, &student, &st).unwrap();
    for v in 0..2 {
        let num = numeric_slice(&student[v], DEFAULT_STEP, |x| {
            let mut s = student.clone();
            s[v] = x.to_vec();
            dino_loss_logits(&teacher, &s, &st).unwrap().0
        });
        out.push(compare(&format!("dino.student_view{v}"), &g[v], &num));
    }

    // part cross-entropy, features and head
    let (c, h, w) = (5, 4, 2);
    let fm = random_map(c, h, w, 200 + seed);
    let labels = PartLabelMap::new(8, 4, (0..32).map(|_| r.random_range(0..4u8)).collect()).unwrap();
    let head = Linear::randn(c, 4, 0.7, &mut r);
    let mut hg = Linear::zeros(c, 4);
    let (_, dfm) = part_loss_grad(&fm, &labels, &head, Some(&mut hg), 1.0).unwrap();
    let num = numeric_slice(fm.data(), DEFAULT_STEP, |x| {
        let f = FeatureMap::from_tokens(c, h, w, 0, x.to_vec()).unwrap();
        part_loss_grad(&f, &labels, &head, None, 1.0).unwrap().0
    });
    out.push(compare("part.features", &dfm, &num));
    for chk in check_tree(&head, &hg, DEFAULT_STEP, |hh| part_loss_grad(&fm, &labels, hh, None, 1.0).unwrap().0) {
        out.push(TensorCheck { name: format!("part.head.{}", chk.name), ..chk });
    }

    // masked attribute BCE
    let set = AttributeLabelSet {
        attributes: vec![
            AttributeLabel::from_label(1, 2, 0.8).unwrap(),
            AttributeLabel::unknown(2),
            AttributeLabel::from_label(0, 3, 0.9).unwrap(),
        ],
    };
    let logits = Tensor::randn(&[7], 1.5, &mut r).data().to_vec();
    let (_, g) = attribute_loss_logits(&logits, &set).unwrap();
    let num = numeric_slice(&logits, DEFAULT_STEP, |x| attribute_loss_logits(x, &set).unwrap().0);
    out.push(compare("attribute.logits", &g, &num));

    // load balancing, gradient with respect to each record's gates
    let n = 5;
    let recs: Vec<GateRecord> = (0..4)
        .map(|i| {
            let mut gates: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
            gates[(i + seed as usize) % n] = 0.0;
            let selected = (0..n).filter(|&j| gates[j] != 0.0).collect();
            GateRecord { task: i % 3, gates, selected }
        })
        .collect();
    let (_, g) = balancing_loss_stage_grad(&recs, n).unwrap();
    for (i, rec) in recs.iter().enumerate() {
        let live: Vec<usize> = rec.selected.clone();
        let x: Vec<f64> = live.iter().map(|&j| rec.gates[j]).collect();
        let num = numeric_slice(&x, DEFAULT_STEP, |x| {
            let mut rs = recs.clone();
            for (k, &j) in live.iter().enumerate() {
                rs[i].gates[j] = x[k];
            }
            balancing_loss_stage_grad(&rs, n).unwrap().0
        });
        let ana: Vec<f64> = live.iter().map(|&j| g[j]).collect();
        out.push(compare(&format!("balancing.record{i}"), &ana, &num));
    }
    out
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 2,
        dataset_size: 6,
        eval_size: 2,
        model: ModelConfig {
            moe: MoeConfig {
                n_experts: 4,
                k_top: 2,
                noise_enabled: false,
                renormalize_after_topk: false,
            },
            stages: vec![StageShape::new(4, 8, 4), StageShape::new(6, 4, 2)],
            prototypes: 8,
            head_hidden: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// The weighted four-term objective end to end, backbone and heads.
fn objective_fd(seed: u64) -> Vec<TensorCheck> {
    let cfg = tiny_config(seed);
    let data = build_training_set(&cfg).unwrap();
    let mut state = ModelState::init(&cfg).unwrap();
    // move off the initialization so every term has curvature
    for i in 0..3 {
        train_step(&mut state, &data, &cfg, &cfg.weights, cfg.lr_at(i, 3, 1e-2), false).unwrap();
    }
    // spread the gate logits so no top-K boundary sits within a finite-difference step
    for (i, st) in state.student.stages.iter_mut().enumerate() {
        let shape = st.moe.w_gate.shape().to_vec();
        st.moe.w_gate = Tensor::randn(&shape, 2.0, &mut rng(seed * 10 + i as u64 + 300));
    }
    let mut r = step_rng(seed, 77);
    let batch = make_batch(&data, cfg.batch_size, true, &mut r).unwrap();
    let total = |s: &ModelState| {
        evaluate_batch(s, &cfg.model, &cfg.weights, &batch, &mut rng(0), false)
            .unwrap()
            .loss
            .total
    };
    let eval = evaluate_batch(&state, &cfg.model, &cfg.weights, &batch, &mut rng(0), false).unwrap();
    let mut out = Vec::new();
    let mut probe = state.clone();
    for chk in check_tree(&state.student, &eval.grads.student, DEFAULT_STEP, |b| {
        probe.student = b.clone();
        total(&probe)
    }) {
        out.push(TensorCheck { name: format!("objective.student.{}", chk.name), ..chk });
    }
    let mut probe = state.clone();
    for chk in check_tree(&state.heads, &eval.grads.heads, DEFAULT_STEP, |h| {
        probe.heads = h.clone();
        total(&probe)
    }) {
        // the teacher head is frozen: its analytic gradient is zero by design
        if !chk.name.starts_with("teacher.") {
            out.push(TensorCheck { name: format!("objective.heads.{}", chk.name), ..chk });
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let base = MoeConfig {
        n_experts: 5,
        k_top: 3,
        noise_enabled: false,
        renormalize_after_topk: false,
    };
    let checks: Vec<TensorCheck> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                sc.spawn(move || {
                    let mut c = moe_fd(base, seed);
                    c.extend(moe_fd(MoeConfig { renormalize_after_topk: true, ..base }, 10 + seed));
                    c.extend(loss_fd(seed));
                    c.extend(objective_fd(seed));
                    c
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let (err, name) = worst(&checks);
    ensure(err < 1e-4, format!("{name}: relative error {err:.2e}"))?;
    within(t0, Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "{} tensors over 3 seeds, worst relative error {err:.2e} ({name}), {:.1}s",
        checks.len(),
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let (c, n) = (6, 8);
    let mut checked = 0;
    for seed in 0..20u64 {
        let fm = random_map(c, 4, 2, seed);
        let wc = Tensor::randn(&[c, c], 1.0, &mut rng(seed + 50));
        let cw = channel_gate(&fm, &wc).map_err(|e| e.to_string())?;
        for row in cw.chunks(c) {
            let s: f64 = row.iter().sum();
            ensure((s - 1.0).abs() <= 1e-6, format!("channel row sums to {s}"))?;
        }
        let wg = Tensor::randn(&[c, n], 1.0, &mut rng(seed + 60));
        let wn = Tensor::randn(&[c, n], 1.0, &mut rng(seed + 70));
        for k in 1..=n {
            let cfg = MoeConfig {
                n_experts: n,
                k_top: k,
                noise_enabled: false,
                renormalize_after_topk: false,
            };
            let (rec, cache) = global_gate(&fm, &wg, &wn, &cfg, true, &mut rng(1), 0).map_err(|e| e.to_string())?;
            ensure(rec.nonzero() == k, format!("K={k}: {} nonzero gates", rec.nonzero()))?;
            if k == n {
                ensure(rec.gates == cache.probs, "K=N gates differ from the softmax")?;
            }
        }

        // sparse evaluation against the dense, zero-padded sum over all experts
        let cfg = MoeConfig {
            n_experts: n,
            k_top: 3,
            noise_enabled: false,
            renormalize_after_topk: false,
        };
        let mut p = MoeParams::init(c, &cfg, &mut rng(seed + 80));
        p.fc = Linear::randn(c, c, 0.5, &mut rng(seed + 81));
        p.w_gate = Tensor::randn(&[c, n], 1.0, &mut rng(seed + 82));
        p.w_channel = Tensor::randn(&[c, c], 1.0, &mut rng(seed + 83));
        p.prompts = Tensor::randn(&[3, c], 1.0, &mut rng(seed + 84));
        let task = (seed % 3) as usize;
        let (y, cache) = moe_forward(&p, &fm, task, &cfg, true, &mut rng(2)).map_err(|e| e.to_string())?;
        let gates = &cache.record().gates;
        let prompt = p.prompt(task).to_vec();
        let gated: Vec<f64> = (0..fm.num_tokens())
            .flat_map(|t| fm.token(t).iter().zip(&prompt).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let gated = FeatureMap::from_tokens(c, 4, 2, 0, gated).unwrap();
        let cw = channel_gate(&gated, &p.w_channel).unwrap();
        let residual = p.fc.forward(&prompt);
        for t in 0..fm.num_tokens() {
            let x: Vec<f64> = fm.token(t).iter().zip(&cw[t * c..(t + 1) * c]).map(|(a, b)| a * b).collect();
            let mut dense = residual.clone();
            for (j, expert) in p.experts.iter().enumerate() {
                let (e, _) = expert.forward(&x);
                dense.iter_mut().zip(&e).for_each(|(d, v)| *d += gates[j] * v);
            }
            for (a, b) in y.token(t).iter().zip(&dense) {
                ensure((a - b).abs() <= 1e-10, format!("sparse {a} vs dense {b}"))?;
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} random gate configurations, K = 1..{n}"))
}

// ---------------------------------------------------------------- 3

fn brute_cv2(x: &[f64]) -> f64 {
    // variance from pairwise differences: Var = Σ_ij (x_i - x_j)² / (2 n²)
    let n = x.len() as f64;
    let mut pair = 0.0;
    for a in x {
        for b in x {
            pair += (a - b) * (a - b);
        }
    }
    let var = pair / (2.0 * n * n);
    let mean = x.iter().sum::<f64>() / n;
    var / (mean * mean + CV2_EPSILON)
}

fn criterion_3() -> Outcome {
    let rec = |g: Vec<f64>| GateRecord {
        task: 0,
        selected: (0..g.len()).filter(|&j| g[j] != 0.0).collect(),
        gates: g,
    };
    let uniform = vec![rec(vec![0.25; 4]), rec(vec![0.25; 4])];
    let u = balancing_loss_stage(&uniform, 2, 4).map_err(|e| e.to_string())?;
    ensure(u.abs() < 1e-12, format!("uniform gates give {u}"))?;
    let fixture = vec![rec(vec![1.0, 0.0]), rec(vec![1.0, 0.0])];
    let f = balancing_loss_stage(&fixture, 2, 2).map_err(|e| e.to_string())?;
    ensure((f - 0.02).abs() <= 1e-9, format!("B=2/N=2 fixture gives {f}"))?;

    let mut r = rng(3);
    let mut worst_err: f64 = 0.0;
    for _ in 0..100 {
        let b = r.random_range(1..12);
        let n = r.random_range(2..10);
        let k = r.random_range(1..=n);
        let recs: Vec<GateRecord> = (0..b)
            .map(|_| {
                let mut g: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&x, &y| g[y].total_cmp(&g[x]));
                for &j in &order[k..] {
                    g[j] = 0.0;
                }
                rec(g)
            })
            .collect();
        let mut imp = vec![0.0; n];
        let mut load = vec![0.0; n];
        for e in 0..n {
            for rc in &recs {
                imp[e] += rc.gates[e];
                load[e] += if rc.gates[e] > 0.0 { 1.0 } else { 0.0 };
            }
        }
        let want = BALANCING_ALPHA * (brute_cv2(&imp) + brute_cv2(&load));
        let got = balancing_loss_stage(&recs, b, n).map_err(|e| e.to_string())?;
        worst_err = worst_err.max((got - want).abs());
    }
    ensure(worst_err <= 1e-10, format!("brute-force mismatch {worst_err:.2e}"))?;
    Ok(format!("uniform {u:.1e}, fixture {f:.12}, 100 random batches max diff {worst_err:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let oracle = OracleEncoder::person_default(0);
    let vocab = PartVocabulary::default_parts();
    let schema = AttributeSchema::default_schema();
    let spec = SyntheticPersonSpec { seed: 11, ..SyntheticPersonSpec::default() };
    ensure(spec.parts.len() == 3, "default spec should draw 3 parts")?;
    let samples = generate_synthetic_dataset(100, &spec, &oracle, &vocab, &schema).map_err(|e| e.to_string())?;
    let grid = StageShape::new(ORACLE_DIM, spec.grid_height, spec.grid_width);
    let labeler = PseudoLabeler::new(&oracle, &oracle, grid, vocab.clone(), schema.clone()).map_err(|e| e.to_string())?;
    let gran = GranularitySet::new([3]).unwrap();
    let mut r = rng(4);
    let (mut agree, mut pixels, mut rejected) = (0.0, 0.0, 0);
    let (mut attr_ok, mut attr_known) = (0, 0);
    for s in &samples {
        let n = (s.parts.height * s.parts.width) as f64;
        match labeler.generate_part_labels(&s.image, &gran, &mut r).map_err(|e| e.to_string())? {
            PartOutcome::Accepted(res) => agree += res.map.agreement(&s.parts) * n,
            PartOutcome::Rejected(_) => rejected += 1,
        }
        pixels += n;
        let got = labeler.assign_attribute_labels(&s.image).map_err(|e| e.to_string())?;
        for (g, want) in got.attributes.iter().zip(&s.attributes) {
            if let Some(w) = want {
                attr_known += 1;
                if g.label == Some(*w) {
                    attr_ok += 1;
                }
            }
        }
    }
    let pixel_agreement = agree / pixels;
    ensure(pixel_agreement >= 0.95, format!("pixel agreement {pixel_agreement:.4} ({rejected} rejected)"))?;
    ensure(attr_known > 0 && attr_ok == attr_known, format!("attributes {attr_ok}/{attr_known}"))?;

    // exactly half foreground
    let half = SyntheticPersonSpec { background_fraction: 0.5, ..spec.clone() };
    let hs = generate_synthetic_dataset(5, &half, &oracle, &vocab, &schema).map_err(|e| e.to_string())?;
    for s in &hs {
        let out = labeler.generate_part_labels(&s.image, &gran, &mut r).map_err(|e| e.to_string())?;
        ensure(out == PartOutcome::Rejected(RejectReason::Spatial), "50% foreground image was not rejected")?;
    }
    ensure(!semantic_passes(0.9), "similarity exactly 0.9 passed")?;
    ensure(semantic_passes(0.9f64.next_up()), "similarity just above 0.9 failed")?;
    within(t0, Duration::from_secs(60), "pseudo-label recovery")?;
    Ok(format!(
        "pixel agreement {:.2}% over 100 images ({rejected} rejected), attributes {attr_ok}/{attr_known}, edge cases rejected, {:.1}s",
        100.0 * pixel_agreement,
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let vocab = PartVocabulary::default_parts();
    let schema = AttributeSchema::default_schema();
    let row = |pairs: &[(&str, f64)]| {
        let mut v = vec![0.0; vocab.len()];
        for (name, s) in pairs {
            v[vocab.id_of(name).unwrap() as usize - 1] = *s;
        }
        v
    };
    let part = |pairs: &[(&str, f64)]| -> Result<(String, f64), String> {
        let (id, s) = select_part_label(&row(pairs)).map_err(|e| e.to_string())?;
        Ok((vocab.name_of(id).unwrap().to_string(), s))
    };
    let ex1 = part(&[("hair", 0.722), ("face", 0.418), ("arm", 0.303)])?;
    ensure(ex1 == ("hair".into(), 0.722), format!("example 1 gave {ex1:?}"))?;
    let ex2 = part(&[("hair", 0.531), ("face", 0.661)])?;
    ensure(ex2 == ("face".into(), 0.661), format!("example 2 gave {ex2:?}"))?;

    let attr = |name: &str, scores: &[f64]| -> Option<String> {
        let def = schema.attributes.iter().find(|a| a.name == name).unwrap();
        select_attribute_label(scores, ATTRIBUTE_THRESHOLD).map(|(i, _)| def.labels[i].clone())
    };
    let g = attr("gender", &[0.948, 0.052]);
    ensure(g.as_deref() == Some("Female"), format!("gender gave {g:?}"))?;
    let l = attr("lower", &[0.858, 0.142]);
    ensure(l.as_deref() == Some("Trousers"), format!("lower gave {l:?}"))?;
    Ok("hair 0.722, face 0.661, Female 0.948, Trousers 0.858".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut cfg = tiny_config(6);
    cfg.model.moe.noise_enabled = true;
    let data = build_training_set(&cfg).map_err(|e| e.to_string())?;
    let mut s = ModelState::init(&cfg).unwrap();
    let m = cfg.ema_momentum;
    let mut teacher_sq = 0.0;
    for i in 0..50 {
        let before = s.clone();
        let eval = train_step(&mut s, &data, &cfg, &cfg.weights, cfg.lr_at(i, 50, cfg.lr), false).map_err(|e| e.to_string())?;
        teacher_sq += eval.grads.teacher_sq_norm();
        // recompute the EMA from the pre-step teacher and post-step student
        let mut expect = before.clone();
        expect.student = s.student.clone();
        expect.heads.student = s.heads.student.clone();
        ema_update(&mut expect, m).map_err(|e| e.to_string())?;
        let pairs = expect
            .teacher
            .named_tensors()
            .into_iter()
            .zip(s.teacher.named_tensors())
            .chain(expect.heads.teacher.named_tensors().into_iter().zip(s.heads.teacher.named_tensors()));
        for ((n, a), (_, b)) in pairs {
            for ((x, y), (tp, sp)) in a.data().iter().zip(b.data()).zip(
                before
                    .teacher
                    .named_tensors()
                    .into_iter()
                    .chain(before.heads.teacher.named_tensors())
                    .find(|(k, _)| k == &n)
                    .map(|(_, t)| t.data().to_vec())
                    .unwrap_or_default()
                    .iter()
                    .zip(
                        s.student
                            .named_tensors()
                            .into_iter()
                            .chain(s.heads.student.named_tensors())
                            .find(|(k, _)| k == &n)
                            .map(|(_, t)| t.data().to_vec())
                            .unwrap_or_default()
                            .iter(),
                    )
                    .map(|(a, b)| (*a, *b)),
            ) {
                let direct = m * tp + (1.0 - m) * sp;
                ensure(
                    x.to_bits() == y.to_bits() && y.to_bits() == direct.to_bits(),
                    format!("step {i}: teacher {n} differs from m*t+(1-m)*s"),
                )?;
            }
        }
    }
    ensure(teacher_sq == 0.0, format!("teacher gradients accumulated {teacher_sq:e}"))?;
    Ok("EMA bitwise on every teacher tensor for 50 steps, accumulated teacher gradient exactly 0".into())
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let trace = |g: Vec<Vec<f64>>| GradientTrace {
        tasks: (0..g.len()).map(|i| format!("t{i}")).collect(),
        layers: vec!["l".into()],
        gradients: g.into_iter().map(|v| vec![v]).collect(),
    };
    let e = |s: String| s;
    let opposed = conflict_ratio(&trace(vec![vec![1.0, 0.0], vec![-1.0, 0.0]])).map_err(|x| e(x.to_string()))?;
    let ortho = conflict_ratio(&trace(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).map_err(|x| e(x.to_string()))?;
    let three = conflict_ratio(&trace(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]])).map_err(|x| x.to_string())?;
    ensure(opposed == 1.0, format!("opposed {opposed}"))?;
    ensure(ortho == 0.0, format!("orthogonal {ortho}"))?;
    ensure((three - 1.0 / 3.0).abs() < 1e-12, format!("T=3 fixture {three}"))?;

    let p = |v: Vec<f64>| ExpertActivationProfile::new(v).unwrap();
    let ead = |a: Vec<f64>, b: Vec<f64>| expert_activation_divergence(&p(a).probs, &p(b).probs, 2).map_err(|x| x.to_string());
    let same = ead(vec![0.5, 0.5], vec![0.5, 0.5])?;
    let disjoint = ead(vec![1.0, 0.0], vec![0.0, 1.0])?;
    let overlap = ead(vec![0.7, 0.3], vec![0.3, 0.7])?;
    ensure((same - 0.5).abs() < 1e-12, format!("EAD identical {same}"))?;
    ensure(disjoint == 1.0, format!("EAD disjoint {disjoint}"))?;
    ensure((overlap - 0.7).abs() < 1e-12, format!("EAD overlap {overlap}"))?;
    let hm = harmonic_mean(94.6, 61.74).map_err(|x| x.to_string())?;
    ensure((hm - 74.716).abs() <= 1e-3, format!("HM {hm}"))?;
    Ok(format!("GCR {opposed}/{ortho}/{three:.4}, EAD {same}/{disjoint}/{overlap:.1}, HM {hm:.3}"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.model.moe.noise_enabled = false;
    cfg.diagnostics_every = 0;
    let data = build_training_set(&cfg).map_err(|e| e.to_string())?;

    let mut s = ModelState::init(&cfg).unwrap();
    let mut first = 0.0;
    let mut last = 0.0;
    for i in 0..cfg.steps {
        let e = train_step(&mut s, &data, &cfg, &cfg.weights, cfg.lr_at(i, cfg.steps, cfg.lr), false)
            .map_err(|e| e.to_string())?;
        if i == 0 {
            first = e.loss.total;
        }
        last = e.loss.total;
    }
    let ratio = last / first;
    ensure(ratio <= 0.7, format!("total loss {first:.4} -> {last:.4} (ratio {ratio:.3})"))?;

    // stage 1 (DINO only), checkpoint, stage 2 warm start from the file
    let stage1 = run_training(&cfg, &data, RunStart::Fresh, true, None).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("stage1.ckpt");
    save_checkpoint(&stage1.state, &cfg, &ck).map_err(|e| e.to_string())?;
    let cfg2 = TrainConfig {
        steps: 1,
        warm_start_checkpoint: Some(ck.clone()),
        ..cfg.clone()
    };
    let warm = load_checkpoint_for(&cfg2, &ck).map_err(|e| e.to_string())?;
    let stage2 = run_training(&cfg2, &data, RunStart::WarmStart(warm), true, None).map_err(|e| e.to_string())?;
    let (d1, d2) = (stage1.end_eval.dino, stage2.start_eval.dino);
    let rel = (d2 - d1).abs() / d1;
    ensure(rel <= 0.05, format!("stage-2 start DINO {d2:.4} vs stage-1 final {d1:.4}"))?;
    within(t0, Duration::from_secs(300), "descent and warm start")?;
    Ok(format!(
        "total {first:.3} -> {last:.3} ({:.1}% drop); held-out DINO stage-1 end {d1:.4}, stage-2 start {d2:.4} ({:.2}% apart); last training-batch DINO {:.3} vs stage-2 first {:.3}; {:.1}s",
        100.0 * (1.0 - ratio),
        100.0 * rel,
        stage1.history.last().unwrap().loss.dino,
        stage2.history[0].loss.dino,
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 9

fn final_window_cv2(seed: u64, lambda: f64) -> Result<f64, ClaspError> {
    let mut cfg = TrainConfig { seed, steps: 500, ..TrainConfig::default() };
    cfg.weights.balancing = lambda;
    let data = build_training_set(&cfg)?;
    let mut s = ModelState::init(&cfg)?;
    let n = cfg.model.moe.n_experts;
    let mut window = Vec::new();
    for i in 0..cfg.steps {
        let e = train_step(&mut s, &data, &cfg, &cfg.weights, cfg.lr_at(i, cfg.steps, cfg.lr), false)?;
        if i >= cfg.steps - 50 {
            let per: Vec<f64> = e
                .records
                .iter()
                .map(|r| clasp_core::losses::cv2(&clasp_core::losses::importance(r, n)))
                .collect();
            window.push(per.iter().sum::<f64>() / per.len() as f64);
        }
    }
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

fn criterion_9() -> Outcome {
    let runs: Vec<(u64, f64, Result<f64, ClaspError>)> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..3u64)
            .flat_map(|seed| [1.0, 0.0].map(|lam| (seed, lam)))
            .map(|(seed, lam)| sc.spawn(move || (seed, lam, final_window_cv2(seed, lam))))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let get = |lam: f64| -> Result<f64, String> {
            let (_, _, r) = runs.iter().find(|(s, l, _)| *s == seed && *l == lam).unwrap();
            r.as_ref().map(|v| *v).map_err(|e| e.to_string())
        };
        let (on, off) = (get(1.0)?, get(0.0)?);
        if on < off {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {on:.4} vs {off:.4}"));
    }
    ensure(wins >= 2, format!("balancing lowered CV2 in {wins}/3 seeds ({})", detail.join("; ")))?;
    Ok(format!("lower with balancing in {wins}/3 seeds ({})", detail.join("; ")))
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> Result<(), String> {
    let mut v = vec!["clasp"];
    v.extend_from_slice(args);
    match clasp_core::cli::main_with(v) {
        0 => Ok(()),
        code => Err(format!("`clasp {}` exited {code}", args.join(" "))),
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let cfg_path = root.join("cfg.json");
    std::fs::write(&cfg_path, r#"{"steps": 12, "diagnostics_every": 6, "dataset_size": 24}"#).unwrap();

    cli(&["gen-data", "--n", "12", "--seed", "5", "--out", &s(&root.join("data"))])?;
    for run in ["a", "b"] {
        cli(&[
            "pseudo-label",
            "--images",
            &s(&root.join("data/images")),
            "--out",
            &s(&root.join(format!("labels_{run}"))),
            "--seed",
            "9",
        ])?;
        cli(&[
            "pretrain",
            "--config",
            &s(&cfg_path),
            "--deterministic",
            "--seed",
            "3",
            "--out",
            &s(&root.join(format!("run_{run}"))),
        ])?;
    }
    let metrics = |r: &str| std::fs::read(root.join(format!("run_{r}/metrics.csv"))).unwrap();
    ensure(metrics("a") == metrics("b"), "metrics CSV differs between runs")?;
    let labels = |r: &str| dir_bytes(&root.join(format!("labels_{r}/labels")));
    ensure(!labels("a").is_empty(), "no label files written")?;
    ensure(labels("a") == labels("b"), "label files differ between runs")?;
    let attrs = |r: &str| std::fs::read(root.join(format!("labels_{r}/attributes.jsonl"))).unwrap();
    ensure(attrs("a") == attrs("b"), "attribute labels differ between runs")?;
    let ck = |r: &str| std::fs::read(root.join(format!("run_{r}/checkpoint.ckpt"))).unwrap();
    ensure(ck("a") == ck("b"), "checkpoints differ between runs")?;

    // bitwise round trip
    let ck_path = root.join("run_a/checkpoint.ckpt");
    let (state, cfg) = load_checkpoint(&ck_path).map_err(|e| e.to_string())?;
    let again = root.join("again.ckpt");
    save_checkpoint(&state, &cfg, &again).map_err(|e| e.to_string())?;
    let (back, _) = load_checkpoint(&again).map_err(|e| e.to_string())?;
    let bits = |st: &ModelState| -> Vec<u64> {
        st.named_state().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    ensure(bits(&back) == bits(&state), "reloaded tensors differ")?;
    ensure(std::fs::read(&again).unwrap() == ck("a"), "re-saved checkpoint differs")?;

    // flip one payload byte near the end: it lies in the last tensor
    let mut bytes = ck("a");
    let last_name = state.named_state().last().unwrap().0.clone();
    let at = bytes.len() - 4;
    bytes[at] ^= 0x10;
    let corrupt = root.join("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).unwrap();
    match load_checkpoint(&corrupt) {
        Err(e @ ClaspError::Checksum { .. }) if e.to_string().contains(&last_name) => {}
        other => return Err(format!("corrupt checkpoint gave {other:?}")),
    }
    Ok(format!(
        "metrics, labels and checkpoints byte-identical across runs; round trip bitwise; corruption names {last_name:?}"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", criterion_1),
        ("gating invariants", criterion_2),
        ("load-balancing oracle", criterion_3),
        ("pseudo-label recovery", criterion_4),
        ("similarity-row argmax fixtures", criterion_5),
        ("EMA and stop-gradient", criterion_6),
        ("diagnostics fixtures", criterion_7),
        ("training descent and warm start", criterion_8),
        ("balancing pressure", criterion_9),
        ("reproducibility and persistence", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|a| *a == id || name.contains(a.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
