//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foley_core::attention::{apply_rope, deinterleave, interleave_av, RopeConfig, TokenOrigin};
use foley_core::blocks::ConditioningSignal;
use foley_core::cli::OVERFIT_LR;
use foley_core::curation::analysis::WELCH_WINDOW;
use foley_core::curation::synth::{sine, write_labelled_corpus};
use foley_core::curation::{evaluate_chunk, run_pipeline, DiscardReason, PipelineConfig, Verdict};
use foley_core::flow::{
    apply_cfg_dropout, latent_mse, panel_flow_loss, repa_loss, sample, sample_from, train_loop, training_loss, CfgMask, FlowState,
    RunDir, TrainConfig, VelocityField,
};
use foley_core::gradcheck::check_store;
use foley_core::metrics::{frechet_distance, inception_score, kl_divergence};
use foley_core::model::{FoleyModel, ModelConfig};
use foley_core::stubs::{FeatureBundle, StubSuite, ToyCodec};
use foley_core::error::Result;
use foley_core::tensor::{ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn zero_init_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let model = FoleyModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = cfg.hidden_dim;
    let (la, lv, lt) = (50, 8, 5);
    let x = Tensor::randn(&[2, la, d], 1.0, &mut rng);
    let fv = Tensor::randn(&[2, lv, d], 1.0, &mut rng);
    let ft = Tensor::randn(&[2, lt, d], 1.0, &mut rng);
    let ca = ConditioningSignal { c: Tensor::randn(&[2, la, d], 1.0, &mut rng) };
    let cv = ConditioningSignal { c: Tensor::randn(&[2, lv, d], 1.0, &mut rng) };
    let dev = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).fold(0.0f32, |m, (p, q)| m.max((p - q).abs()));
    let mut worst = 0.0f32;
    for block in &model.mmdit {
        let (xa, xv) = block.forward(&model.store, &x, &fv, &ft, &ca, &cv).unwrap();
        worst = worst.max(dev(&xa, &x)).max(dev(&xv, &fv));
    }
    for block in &model.unidit {
        worst = worst.max(dev(&block.forward(&model.store, &x, &ca).unwrap(), &x));
    }
    let blocks = model.mmdit.len() + model.unidit.len();
    outcome(worst == 0.0, format!("{blocks} blocks, max abs deviation {worst}"))
}

fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig {
        hidden_dim: 64,
        mmdit_blocks: 2,
        unidit_blocks: 4,
        latent_dim: 16,
        video_dim: 8,
        text_dim: 8,
        sync_dim: 8,
        repa_dim: 8,
        ..Default::default()
    };
    let mut model = FoleyModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // move zero-initialized weights off zero so every branch carries gradient
    for id in model.modulation_param_ids() {
        let n = model.store.get(id).numel();
        model.store.set(id, Tensor::randn(&[n], 0.05, &mut rng).to_vec()).unwrap();
    }
    let mut bundle = FeatureBundle::random(&cfg, 2, 6, 3, 2, 9, &mut rng);
    // the second row drops every modality so the null embeddings are exercised
    bundle.drop = vec![CfgMask::default(), CfgMask { drop_video: true, drop_text: true, drop_sync: true }];
    let x0 = Tensor::randn(bundle.latent.shape(), 1.0, &mut rng);
    let state = FlowState::new(&x0, &bundle.latent, &[0.3, 0.7]).unwrap();
    let (total, report) = training_loss(&model, &model.store, &bundle, &state, 0.5).unwrap();
    total.backward().unwrap();
    let reference = reference_loss(&model, &model.store, &bundle, &state, 0.5).unwrap();
    let agree = (reference - report.total as f64).abs() <= 1e-5 * reference.abs().max(1.0);
    let checks = check_store(&model.store, |s| reference_loss(&model, s, &bundle, &state, 0.5), 2e-2, 3, 1e-3).unwrap();
    let worst = checks.iter().max_by(|a, b| a.max_err().total_cmp(&b.max_err())).unwrap();
    let failing = checks.iter().filter(|c| c.max_err() >= 2e-2).count();
    outcome(
        agree && failing == 0,
        format!(
            "{} parameter tensors, worst {} at {:.2e}, {failing} over 2e-2, reference loss agrees {agree}",
            checks.len(),
            worst.name,
            worst.max_err()
        ),
    )
}

fn interleaved_rope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut slot_ok = true;
    for _ in 0..50 {
        let (la, lv) = (rng.random_range(1..40usize), rng.random_range(1..40usize));
        // each token carries its own index so slots can be traced
        let audio = Tensor::new((0..la).map(|i| i as f32).collect(), &[1, la, 1, 1]).unwrap();
        let visual = Tensor::new((0..lv).map(|i| 1000.0 + i as f32).collect(), &[1, lv, 1, 1]).unwrap();
        let seq = interleave_av(&audio, &visual).unwrap();
        let len = la.max(lv);
        slot_ok &= seq.aligned_len == len && seq.joint.dim(1) == 2 * len;
        for t in 0..len {
            slot_ok &= seq.joint.data()[2 * t] == (t * la / len) as f32;
            slot_ok &= seq.joint.data()[2 * t + 1] == 1000.0 + (t * lv / len) as f32;
            slot_ok &= seq.origin[2 * t] == TokenOrigin::Audio && seq.origin[2 * t + 1] == TokenOrigin::Visual;
        }
        let (a, v) = deinterleave(&seq).unwrap();
        slot_ok &= a.dim(1) == len && v.dim(1) == len;
    }

    let dh = 16;
    let cfg = RopeConfig::new(dh, 10000.0).unwrap();
    let q = Tensor::randn(&[1, 1, 1, dh], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 1, 1, dh], 1.0, &mut rng);
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let mut worst = 0.0f64;
    for p in 0..8 {
        for delta in 0..8 {
            let rq = apply_rope(&q, &cfg, &[p as f32]).unwrap();
            let rk = apply_rope(&k, &cfg, &[(p + delta) as f32]).unwrap();
            let rel = apply_rope(&k, &cfg, &[delta as f32]).unwrap();
            worst = worst.max((dot(&rq, &rk) - dot(&q, &rel)).abs());
        }
    }
    outcome(slot_ok && worst <= 1e-4, format!("slots {}, relative-position max error {worst:.2e}", if slot_ok { "ok" } else { "wrong" }))
}

fn repa_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::randn(&[2, 6, 8], 1.0, &mut rng);
    let loss = |a: &Tensor, b: &Tensor| repa_loss(a, b).unwrap().0.item().unwrap() as f64;
    let aligned = loss(&h, &h.scale(3.0));
    let anti = loss(&h, &h.scale(-0.5));
    // orthogonal pairs: disjoint channel supports
    let mut ha = vec![0.0f32; 96];
    let mut hb = vec![0.0f32; 96];
    for r in 0..12 {
        for c in 0..4 {
            ha[r * 8 + c] = rng.random_range(-1.0..1.0);
            hb[r * 8 + 4 + c] = rng.random_range(-1.0..1.0);
        }
    }
    let ortho = loss(&Tensor::new(ha, &[2, 6, 8]).unwrap(), &Tensor::new(hb, &[2, 6, 8]).unwrap());
    let mut bounded = true;
    let mut invariant = true;
    for s in 0..20 {
        let a = Tensor::randn(&[1, 5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(100 + s));
        let b = Tensor::randn(&[1, 5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(200 + s));
        let l = loss(&a, &b);
        bounded &= (-1.0..=1.0).contains(&l);
        invariant &= (loss(&a.scale(2.5), &b.scale(0.3)) - l).abs() <= 1e-6;
    }
    let pass = (aligned + 1.0).abs() <= 1e-6 && ortho.abs() <= 1e-6 && (anti - 1.0).abs() <= 1e-6 && bounded && invariant;
    outcome(pass, format!("aligned {aligned:.7}, orthogonal {ortho:.1e}, anti {anti:.7}, bounded {bounded}, scale-invariant {invariant}"))
}

fn overfit_waveform(seconds: f64) -> Vec<f32> {
    let n = (seconds * 48_000.0) as usize;
    (0..n)
        .map(|i| {
            let t = i as f32 / 48_000.0;
            0.5 * (2.0 * std::f32::consts::PI * 440.0 * t).sin() * (-3.0 * (t % 0.5)).exp()
                + 0.2 * (2.0 * std::f32::consts::PI * 97.0 * t).sin()
        })
        .collect()
}

fn overfit() -> Outcome {
    let cfg = ModelConfig::default();
    let suite = StubSuite::new(&cfg, 0).unwrap();
    let wave = overfit_waveform(1.0);
    let bundle = suite.bundle(&wave, "a bell rings twice", 1.0, Some(&wave)).unwrap();
    let mut model = FoleyModel::new(cfg).unwrap();
    let untrained = model.clone();
    let before = panel_flow_loss(&model, &bundle, 16, 99).unwrap();
    let tc = TrainConfig { steps: 500, batch_size: 4, lr: OVERFIT_LR, ..Default::default() };
    train_loop(&mut model, std::slice::from_ref(&bundle), &tc, &RunDir(None), None).unwrap();
    let after = panel_flow_loss(&model, &bundle, 16, 99).unwrap();
    let trained_mse = latent_mse(&sample(&model, &bundle, 32, 1.0, 5).unwrap(), &bundle.latent).unwrap();
    let untrained_mse = latent_mse(&sample(&untrained, &bundle, 32, 1.0, 5).unwrap(), &bundle.latent).unwrap();
    let (loss_ratio, mse_ratio) = (after as f64 / before as f64, trained_mse / untrained_mse);
    outcome(
        loss_ratio < 0.1 && mse_ratio < 0.1,
        format!("flow loss {before:.4} -> {after:.4} (ratio {loss_ratio:.4}), 32-step latent MSE ratio {mse_ratio:.4}"),
    )
}

fn cfg_contract() -> Outcome {
    let cfg = ModelConfig { hidden_dim: 32, mmdit_blocks: 1, unidit_blocks: 2, ..Default::default() };
    let mut model = FoleyModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in model.modulation_param_ids() {
        let n = model.store.get(id).numel();
        model.store.set(id, Tensor::randn(&[n], 0.1, &mut rng).to_vec()).unwrap();
    }
    let bundle = FeatureBundle::random(&cfg, 1, 10, 4, 3, 12, &mut rng);
    let x0 = Tensor::randn(bundle.latent.shape(), 1.0, &mut rng);
    let guided = sample_from(&model, &bundle, &x0, 8, 1.0).unwrap();
    let mut x = x0.clone();
    for k in 0..8 {
        let v = model.velocity(&x, &[k as f32 / 8.0], &bundle.conditional()).unwrap();
        x = x.add(&v.scale(1.0 / 8.0)).unwrap();
    }
    let identical = guided.data() == x.data();

    let single = FeatureBundle::random(&cfg, 1, 2, 2, 2, 2, &mut rng);
    let mut counts = [0usize; 3];
    let draws = 10_000;
    let mut drng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..draws {
        let m = apply_cfg_dropout(&single, &mut drng, 0.1).unwrap().1[0];
        counts[0] += m.drop_video as usize;
        counts[1] += m.drop_text as usize;
        counts[2] += m.drop_sync as usize;
    }
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / draws as f64).collect();
    let in_band = freqs.iter().all(|f| (f - 0.10).abs() <= 0.02);
    outcome(identical && in_band, format!("unit guidance bit-identical {identical}, dropout video/text/sync {freqs:?}"))
}

fn curation_thresholds() -> (Outcome, Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    write_labelled_corpus(dir.path(), 0).unwrap();
    let cfg = PipelineConfig::default();
    let m = run_pipeline(dir.path(), &cfg, &[]).unwrap();
    let mut got: Vec<Verdict> = m.clips().map(|c| c.verdict).collect();
    got.sort_by_key(|v| format!("{v:?}"));
    let mut want = vec![Verdict::Keep, Verdict::Discard(DiscardReason::Silent), Verdict::Discard(DiscardReason::LowBandwidth)];
    want.sort_by_key(|v| format!("{v:?}"));
    let corpus = outcome(got == want, format!("verdicts {got:?}"));

    let tone = sine(8000.0, 0.5, 8.0, 48_000);
    let rec = evaluate_chunk("tone", (0.0, 8.0), &tone, 48_000, &cfg).unwrap();
    let eff = rec.effective_sr_hz.unwrap_or(f64::NAN);
    let bin = 48_000.0 / WELCH_WINDOW as f64;
    let within = (eff - 16_000.0).abs() <= bin;
    let discarded = rec.verdict == Verdict::Discard(DiscardReason::LowBandwidth);
    let tone_out = outcome(
        within && discarded,
        format!("effective_sr {eff:.1} Hz, |error| {:.1} Hz vs one bin {bin:.2} Hz, verdict {:?}", (eff - 16_000.0).abs(), rec.verdict),
    );

    let again = run_pipeline(dir.path(), &cfg, &[]).unwrap();
    let same = m.to_jsonl().unwrap() == again.to_jsonl().unwrap();
    (corpus, tone_out, outcome(same, format!("rerun byte-identical {same}")))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = DMatrix::from_fn(64, 6, |_, _| rng.random_range(-1.0..1.0));
    let fd_self = frechet_distance(&a, &a).unwrap();
    let fd_1d = frechet_distance(&DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]), &DMatrix::from_column_slice(2, 1, &[0.0, 2.0])).unwrap();
    let same = DMatrix::from_fn(7, 5, |_, j| 0.4 * j as f64);
    let is_same = inception_score(&same).unwrap();
    let c = 10;
    let one_hot = DMatrix::from_fn(c, c, |i, j| if i == j { 0.0 } else { f64::NEG_INFINITY });
    let is_hot = inception_score(&one_hot).unwrap();
    let kl = kl_divergence(
        &DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
        &DMatrix::from_row_slice(1, 2, &[0.25f64.ln(), 0.75f64.ln()]),
    )
    .unwrap();
    let pass = fd_self <= 1e-6
        && (fd_1d - 1.0).abs() <= 1e-6
        && is_same == 1.0
        && (is_hot - c as f64).abs() <= 1e-12 * c as f64
        && (kl - 0.1438).abs() <= 1e-4;
    outcome(pass, format!("FD(A,A) {fd_self:.1e}, 1-D FD {fd_1d:.9}, IS same {is_same}, IS one-hot {is_hot}, KL {kl:.6}"))
}

fn codec_contract() -> Outcome {
    let codec = ToyCodec::new(128, 0).unwrap();
    let wave = overfit_waveform(1.0);
    let lat = codec.encode(&wave, 48_000).unwrap();
    let shape_ok = lat.shape() == [50, 128];
    let z = Tensor::randn(&[50, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let in_subspace = codec.decode(&z).unwrap();
    let back = codec.decode(&codec.encode(&in_subspace, 48_000).unwrap()).unwrap();
    let err = in_subspace.iter().zip(&back).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    outcome(shape_ok && err <= 1e-5, format!("latent shape {:?}, round-trip max error {err:.2e}", lat.shape()))
}

fn foley(dir: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_foley")).current_dir(dir).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn end_to_end_run(dir: &Path) -> Vec<u8> {
    foley(dir, &["--seed", "11", "synth-corpus", "corpus"]);
    foley(dir, &["--seed", "11", "curate", "corpus"]);
    foley(dir, &["--seed", "11", "train", "--manifest", "corpus/manifest.jsonl", "--out", "run", "--steps", "100"]);
    foley(
        dir,
        &["--seed", "11", "generate", "--checkpoint", "run/ckpt_000100.hvfw", "--out", "out.wav", "--text", "a bell", "--video-stub"],
    );
    fs::read(dir.join("out.wav")).unwrap()
}

fn end_to_end_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let wa = end_to_end_run(a.path());
    let wb = end_to_end_run(b.path());
    outcome(wa == wb && !wa.is_empty(), format!("{} WAV bytes, identical {}", wa.len(), wa == wb))
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut all = true;
    let mut record = |id: &str, name: &str, limit_s: f64, f: &mut dyn FnMut() -> Vec<Outcome>| {
        let start = Instant::now();
        let outs = f();
        let secs = start.elapsed().as_secs_f64();
        let n = outs.len();
        for (i, o) in outs.into_iter().enumerate() {
            let tag = if n > 1 { format!("{id}{}", (b'a' + i as u8) as char) } else { id.to_string() };
            let timely = secs <= limit_s;
            let pass = o.pass && timely;
            all &= pass;
            let line = format!(
                "{} criterion {tag} {name}: {} [{secs:.1} s, limit {limit_s} s]",
                if pass { "PASS" } else { "FAIL" },
                o.detail
            );
            println!("{line}");
            lines.push(line);
        }
    };
    record("1", "zero-init identity", 5.0, &mut || vec![zero_init_identity()]);
    record("2", "gradient correctness", 600.0, &mut || vec![gradient_correctness()]);
    record("3", "interleaved rope", 5.0, &mut || vec![interleaved_rope()]);
    record("4", "repa bounds", 1.0, &mut || vec![repa_bounds()]);
    record("5", "overfit convergence", 900.0, &mut || vec![overfit()]);
    record("6", "cfg contract", 60.0, &mut || vec![cfg_contract()]);
    record("7", "curation thresholds", 30.0, &mut || {
        let (a, b, c) = curation_thresholds();
        vec![a, b, c]
    });
    record("8", "metric oracles", 10.0, &mut || vec![metric_oracles()]);
    record("9", "codec contract", 10.0, &mut || vec![codec_contract()]);
    record("10", "end-to-end determinism", 600.0, &mut || vec![end_to_end_determinism()]);
    eprintln!("{}", lines.join("\n"));
    assert!(all, "acceptance failures:\n{}", lines.iter().filter(|l| l.starts_with("FAIL")).cloned().collect::<Vec<_>>().join("\n"));
}

/// Total loss from a forward pass, reduced in f64 outside the tensor library.
fn reference_loss(model: &FoleyModel, store: &ParamStore, bundle: &FeatureBundle, state: &FlowState, repa_weight: f64) -> Result<f64> {
    let out = model.forward_with(store, &state.x_t, &state.t, bundle)?;
    let (pred, target) = (out.velocity.data(), state.v_target.data());
    let flow = pred.iter().zip(target.iter()).map(|(p, t)| (*p as f64 - *t as f64).powi(2)).sum::<f64>() / pred.len() as f64;
    let proj = model.repa_head.project(store, &out.repa_hidden)?;
    let feats = bundle.repa_target.as_ref().unwrap();
    let (b, la, d, lr) = (proj.dim(0), proj.dim(1), proj.dim(2), feats.dim(1));
    let (h, f) = (proj.data(), feats.data());
    let mut cos = 0.0;
    for i in 0..b {
        for t in 0..la {
            let hr = &h[(i * la + t) * d..(i * la + t + 1) * d];
            let s = t * lr / la;
            let fr = &f[(i * lr + s) * d..(i * lr + s + 1) * d];
            let dot: f64 = hr.iter().zip(fr).map(|(x, y)| *x as f64 * *y as f64).sum();
            let nh: f64 = hr.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nf: f64 = fr.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if nh > 0.0 && nf > 0.0 {
                cos += dot / (nh * nf);
            }
        }
    }
    Ok(flow - repa_weight * cos / (b * la) as f64)
}
