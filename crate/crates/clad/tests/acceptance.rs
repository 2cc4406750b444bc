//! The project's acceptance gate.
//!
//! One test per shipping criterion, each printing a single pass/fail line
//! (visible with `--nocapture`; the line is also printed on failure before
//! the panic propagates). The desk-scale end-to-end criterion drives the
//! real binary and takes several minutes; everything else is seconds.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use clad::compressor::{compress_window, decompress_window};
use clad::losses::{focal_loss, infonce_loss, supcon_loss};
use clad::model::encoder::{mlstm_mixer_only, mlstm_pairwise_oracle};
use clad::model::pool::{four_way_pool, four_way_pool_backward};
use clad::model::{
    backward, forward, ByteBatch, ConvBlockSpec, ForwardRequest, ModelConfig, ModelParameters,
    CLS_ID, PAD_ID,
};
use clad::optim::lambda_schedule;
use clad::sampler::{build_priority_pool, sample_epoch};
use clad::seeding::derive_rng;
use clad::synthgen::{default_templates, generate_corpus, inject_anomaly, AnomalyKind, CorpusParams};

/// Run one criterion body and print its verdict line.
fn criterion(number: u32, name: &str, body: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("acceptance {number:02} {name}: PASS"),
        Err(cause) => {
            println!("acceptance {number:02} {name}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

/// Small encoder configuration for criteria that need a real model but not
/// the full-size one.
fn small_config() -> ModelConfig {
    ModelConfig {
        window_size: 4,
        embed_dim: 8,
        max_stream_len: 256,
        model_dim: 16,
        cnn_blocks: vec![
            ConvBlockSpec { channels: 8, kernel: 3, stride: 2, dilation: 1 },
            ConvBlockSpec { channels: 12, kernel: 3, stride: 2, dilation: 2 },
            ConvBlockSpec { channels: 16, kernel: 3, stride: 4, dilation: 4 },
        ],
        heads: 4,
        ffn_dim: 32,
        projection_dim: 12,
        ..ModelConfig::default()
    }
}

fn random_array2(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1. Compressor round-trip at scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_compressor_round_trip() {
    criterion(1, "compressor round-trip, 10,000 windows", || {
        let corpus = generate_corpus(&CorpusParams {
            seed: 20_260_818,
            n_windows: 10_000,
            window_size: 8,
            anomaly_ratio: 0.3,
            kinds: AnomalyKind::all().to_vec(),
        })
        .unwrap();
        let started = Instant::now();
        let mut failures = 0usize;
        for window in &corpus.set.windows {
            let compressed = compress_window(window);
            let restored = decompress_window(&compressed).unwrap();
            // Byte-exactness covers everything the stream stores: every
            // payload byte in order, plus the window id and label carried
            // by the record (ordinals are positional bookkeeping).
            let same = restored.window_id == window.window_id
                && restored.label == window.label
                && restored.payloads() == window.payloads();
            if !same {
                failures += 1;
            }
        }
        let elapsed = started.elapsed();
        assert_eq!(failures, 0, "{failures} of 10,000 windows failed to round-trip");
        assert!(
            elapsed.as_secs_f64() < 120.0,
            "round-trip took {:.1}s, budget is 120s",
            elapsed.as_secs_f64()
        );
    });
}

// ---------------------------------------------------------------------------
// 2. Compression-domain anomaly sensitivity
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_anomaly_stream_length_sensitivity() {
    criterion(2, "single anomaly lengthens the stream in ≥99% of cases", || {
        let corpus = generate_corpus(&CorpusParams {
            seed: 77,
            n_windows: 1_000,
            window_size: 20,
            anomaly_ratio: 0.0,
            kinds: Vec::new(),
        })
        .unwrap();
        let templates = default_templates();
        let kinds = AnomalyKind::all();
        let mut increased = 0usize;
        let mut total = 0usize;
        for window in &corpus.set.windows {
            let base_len = compress_window(window).stream.len();
            for (k, &kind) in kinds.iter().enumerate() {
                let (modified, touched) =
                    inject_anomaly(&templates, window, kind, 9_000 + k as u64).unwrap();
                assert!(!touched.is_empty(), "injection must modify at least one entry");
                let new_len = compress_window(&modified).stream.len();
                total += 1;
                if new_len > base_len {
                    increased += 1;
                }
            }
        }
        let rate = increased as f64 / total as f64;
        assert!(
            rate >= 0.99,
            "stream length increased in only {increased}/{total} cases ({rate:.4})"
        );
    });
}

// ---------------------------------------------------------------------------
// 3. Shape and length oracle at full size
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_shape_and_length_oracle() {
    criterion(3, "downsampled length 8191→512 and logits at every length", || {
        let config = ModelConfig::default();
        assert_eq!(config.downsampled_length(8191), 512);
        let params = ModelParameters::init(&config, 42);
        for len in [1usize, 2, 5, 100, 4096, 8191, 20_000] {
            let stream: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            let batch = ByteBatch::from_streams(&[(&stream, 0)], &config);
            let expected_len = len.min(config.max_payload());
            assert_eq!(batch.lengths[0], expected_len, "length {len} capped wrong");
            let out = forward(&config, &params, &batch, ForwardRequest::eval_logits());
            let logits = out.logits.expect("logits requested");
            assert_eq!(logits.dim(), (1, 2), "logit shape wrong at length {len}");
            assert!(
                logits.iter().all(|v| v.is_finite()),
                "non-finite logits at length {len}"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 4. Recurrent memory equals the pairwise oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_mlstm_matches_pairwise_oracle() {
    criterion(4, "mLSTM memory ≡ pairwise oracle over 100 seeds", || {
        let (d, heads, eps) = (16usize, 4usize, 1e-6);
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let mut rng = derive_rng(seed, "mlstm-oracle", 0);
            let s_v = rng.random_range(2..=32);
            let q = random_array2(s_v, d, &mut rng);
            let k = random_array2(s_v, d, &mut rng);
            let v = random_array2(s_v, d, &mut rng);
            let fast = mlstm_mixer_only(&q, &k, &v, heads, eps);
            let slow = mlstm_pairwise_oracle(&q, &k, &v, heads, eps);
            let diff = (&fast - &slow).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            worst = worst.max(diff);
        }
        assert!(worst <= 1e-5, "worst oracle deviation {worst:.2e} exceeds 1e-5");
    });
}

// ---------------------------------------------------------------------------
// 5. Analytic gradients match central finite differences
// ---------------------------------------------------------------------------

/// Relative-error check with a floor that ignores central-difference
/// roundoff noise on near-zero gradients.
fn assert_grad(analytic: f64, numeric: f64, what: &str) {
    let diff = (numeric - analytic).abs();
    let denom = numeric.abs().max(analytic.abs()).max(1e-8);
    assert!(
        diff <= 1e-8 || diff / denom <= 1e-4,
        "{what}: analytic {analytic:.6e} vs numeric {numeric:.6e}"
    );
}

fn central_diff2<F: FnMut(&Array2<f64>) -> f64>(
    arr: &mut Array2<f64>,
    at: (usize, usize),
    mut eval: F,
) -> f64 {
    let h = 1e-6;
    let saved = arr[at];
    arr[at] = saved + h;
    let plus = eval(arr);
    arr[at] = saved - h;
    let minus = eval(arr);
    arr[at] = saved;
    (plus - minus) / (2.0 * h)
}

fn central_diff1<F: FnMut(&Array1<f64>) -> f64>(
    arr: &mut Array1<f64>,
    at: usize,
    mut eval: F,
) -> f64 {
    let h = 1e-6;
    let saved = arr[at];
    arr[at] = saved + h;
    let plus = eval(arr);
    arr[at] = saved - h;
    let minus = eval(arr);
    arr[at] = saved;
    (plus - minus) / (2.0 * h)
}

#[test]
fn criterion_05_gradient_checks() {
    criterion(5, "gradients match finite differences (losses, pooling, full model)", || {
        let mut rng = derive_rng(5, "grad-acceptance", 0);
        let labels = [0u8, 1, 0, 1, 1, 0];

        // Focal loss, with and without label smoothing.
        for smoothing in [0.05, 0.0] {
            let mut logits = random_array2(6, 2, &mut rng);
            let (_, grad) = focal_loss(&logits, &labels, 2.0, smoothing);
            for i in 0..6 {
                for j in 0..2 {
                    let numeric = central_diff2(&mut logits, (i, j), |a| {
                        focal_loss(a, &labels, 2.0, smoothing).0
                    });
                    assert_grad(grad[[i, j]], numeric, &format!("focal ε={smoothing} [{i},{j}]"));
                }
            }
        }

        // Supervised contrastive loss.
        let mut emb = random_array2(6, 5, &mut rng);
        let outcome = supcon_loss(&emb, &labels, 0.07);
        assert!(outcome.contributing_anchors > 0);
        for i in 0..6 {
            for j in 0..5 {
                let numeric =
                    central_diff2(&mut emb, (i, j), |a| supcon_loss(a, &labels, 0.07).loss);
                assert_grad(outcome.grad[[i, j]], numeric, &format!("supcon [{i},{j}]"));
            }
        }

        // Masked-feature contrastive loss (gradient w.r.t. predictions).
        let mut predictions = random_array2(5, 4, &mut rng);
        let targets = random_array2(5, 4, &mut rng);
        let (_, grad) = infonce_loss(&predictions, &targets, 0.1).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let numeric = central_diff2(&mut predictions, (i, j), |a| {
                    infonce_loss(a, &targets, 0.1).unwrap().0
                });
                assert_grad(grad[[i, j]], numeric, &format!("infonce [{i},{j}]"));
            }
        }

        // Attention pooling (through the full four-way pool).
        let mut h = random_array2(6, 8, &mut rng);
        let mut w1 = random_array2(8, 2, &mut rng);
        let mut w2 = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let g_out = Array1::from_shape_fn(32, |_| rng.random_range(-1.0..1.0));
        let (_, cache) = four_way_pool(&h, &w1, &w2);
        let mut dw1 = Array2::zeros((8, 2));
        let mut dw2 = Array1::zeros(2);
        let dh = four_way_pool_backward(&cache, &w1, &w2, &g_out, &mut dw1, &mut dw2);
        for i in 0..6 {
            for j in 0..8 {
                let numeric = central_diff2(&mut h, (i, j), |a| {
                    four_way_pool(a, &w1, &w2).0.dot(&g_out)
                });
                assert_grad(dh[[i, j]], numeric, &format!("pool dh [{i},{j}]"));
            }
        }
        for i in 0..8 {
            for j in 0..2 {
                let numeric = central_diff2(&mut w1, (i, j), |a| {
                    four_way_pool(&h, a, &w2).0.dot(&g_out)
                });
                assert_grad(dw1[[i, j]], numeric, &format!("pool dw1 [{i},{j}]"));
            }
        }
        for j in 0..2 {
            let numeric =
                central_diff1(&mut w2, j, |a| four_way_pool(&h, &w1, a).0.dot(&g_out));
            assert_grad(dw2[j], numeric, &format!("pool dw2 [{j}]"));
        }

        // Full small model: deterministic inference objective Σ logits⊙G.
        let config = small_config();
        let params = ModelParameters::init(&config, 9);
        let streams: Vec<Vec<u8>> =
            vec![(0..19).map(|i| (i * 7) as u8).collect(), (0..33).map(|i| (i * 13 + 5) as u8).collect()];
        let items: Vec<(&[u8], u8)> = streams.iter().map(|s| (s.as_slice(), 0)).collect();
        let batch = ByteBatch::from_streams(&items, &config);
        let g_logits = random_array2(2, 2, &mut rng);
        let eval_objective = |p: &ModelParameters| {
            let out = forward(&config, p, &batch, ForwardRequest::eval_logits());
            (out.logits.unwrap() * &g_logits).sum()
        };
        let out = forward(&config, &params, &batch, ForwardRequest::eval_logits());
        let mut grads = params.zeros_like();
        backward(&config, &params, &out.trace, Some(&g_logits), None, None, &mut grads);
        let names: Vec<String> = params.tensors().iter().map(|t| t.0.clone()).collect();
        for (index, name) in names.iter().enumerate() {
            let tensor_len = params.tensors()[index].2.len();
            for probe_at in [0, tensor_len / 2] {
                let analytic = grads.tensors()[index].2[probe_at];
                let mut perturbed = params.clone();
                let h = 1e-5;
                let base = params.tensors()[index].2[probe_at];
                perturbed.tensors_mut()[index].1[probe_at] = base + h;
                let plus = eval_objective(&perturbed);
                perturbed.tensors_mut()[index].1[probe_at] = base - h;
                let minus = eval_objective(&perturbed);
                let numeric = (plus - minus) / (2.0 * h);
                assert_grad(analytic, numeric, &format!("model {name}[{probe_at}]"));
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 6. Closed-form loss and schedule values
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_closed_form_values() {
    criterion(6, "closed-form loss and schedule values", || {
        // Focal at p_t = 0.5 without smoothing: (1−p)²·(−ln p) = 0.25·ln 2.
        let logits = ndarray::array![[0.37, 0.37]];
        let (loss, _) = focal_loss(&logits, &[1], 2.0, 0.0);
        assert!(
            (loss - 0.25 * std::f64::consts::LN_2).abs() <= 1e-9,
            "focal at even odds gave {loss}"
        );
        // Collapsed masked-feature predictions score exactly ln N.
        for n in [2usize, 5, 17] {
            let row: Vec<f64> = vec![0.3, -0.9, 0.4];
            let predictions =
                Array2::from_shape_fn((n, 3), |(_, j)| row[j]);
            let targets = predictions.clone();
            let (loss, _) = infonce_loss(&predictions, &targets, 0.1).unwrap();
            assert!(
                (loss - (n as f64).ln()).abs() <= 1e-6,
                "collapse at N={n} gave {loss}"
            );
        }
        // Contrastive-weight schedule endpoints and midpoint are exact in
        // real arithmetic; in f64 the pinned values are reproduced to within
        // one ulp (the decimal endpoints are not exact binary fractions).
        assert_eq!(lambda_schedule(0, 50, 0.05, 0.005), 0.05);
        assert!((lambda_schedule(25, 50, 0.05, 0.005) - 0.0275).abs() <= 1e-15);
        assert!((lambda_schedule(50, 50, 0.05, 0.005) - 0.005).abs() <= 1e-15);
    });
}

// ---------------------------------------------------------------------------
// 7. Priority sampler census
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_sampler_census() {
    criterion(7, "epoch draws split exactly 32/48 over 1,000 seeds", || {
        let mut labels = vec![0u8; 100];
        for i in [10usize, 20, 30, 40, 50] {
            labels[i] = 1;
        }
        let pool = build_priority_pool(&labels, 3);
        assert!(pool.len() >= 32, "fixture pool has {} members", pool.len());
        for seed in 0..1_000u64 {
            let mut rng = derive_rng(seed, "census", 0);
            let draw = sample_epoch(100, &pool, 0.8, &mut rng);
            assert_eq!(draw.len(), 80);
            let in_pool = draw.iter().filter(|i| pool.binary_search(i).is_ok()).count();
            assert_eq!(in_pool, 32, "seed {seed}: {in_pool} from the priority pool");
            assert_eq!(draw.len() - in_pool, 48);
        }
    });
}

// ---------------------------------------------------------------------------
// 8. Padding invisibility
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_padding_invisibility() {
    criterion(8, "extra padding shifts logits by ≤ 1e-5 on 100 samples", || {
        let config = small_config();
        let params = ModelParameters::init(&config, 3);
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let mut rng = derive_rng(seed, "padding", 0);
            let len = rng.random_range(1..=120usize);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random::<u8>()).collect();
            let extra = 1 + (seed as usize % 37);

            let make_batch = |width: usize| {
                let mut tokens = Array2::from_elem((1, width), PAD_ID);
                tokens[[0, 0]] = CLS_ID;
                for (j, &b) in bytes.iter().enumerate() {
                    tokens[[0, 1 + j]] = b as u16;
                }
                ByteBatch { tokens, lengths: vec![len], labels: vec![0] }
            };
            let tight = make_batch(1 + len);
            let padded = make_batch(1 + len + extra);
            let a = forward(&config, &params, &tight, ForwardRequest::eval_logits())
                .logits
                .unwrap();
            let b = forward(&config, &params, &padded, ForwardRequest::eval_logits())
                .logits
                .unwrap();
            let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            worst = worst.max(diff);
        }
        assert!(worst <= 1e-5, "padding shifted logits by {worst:.2e}");
    });
}

// ---------------------------------------------------------------------------
// 9. Desk-scale end-to-end run (drives the real binary)
// ---------------------------------------------------------------------------

const DESK_CONFIG: &str = r#"
seed = 2024

[synth]
n_windows = 2000
window_size = 100
anomaly_ratio = 0.10

[model]
window_size = 100
embed_dim = 16
max_stream_len = 3072
model_dim = 32
heads = 4
ffn_dim = 64
projection_dim = 16
cnn_blocks = [
  { channels = 16, kernel = 3, stride = 2, dilation = 1 },
  { channels = 32, kernel = 3, stride = 2, dilation = 2 },
  { channels = 32, kernel = 3, stride = 4, dilation = 4 },
]

[pretrain]
epochs = 6
batch_size = 32

[pretrain.optimizer]
learning_rate = 1e-3
warmup_epochs = 2

[finetune]
epochs = 30
batch_size = 16
ema_decay = 0.95

[finetune.optimizer]
learning_rate = 2e-3
warmup_epochs = 3
"#;

#[test]
fn criterion_09_desk_scale_end_to_end() {
    criterion(9, "desk-scale pipeline reaches F1 ≥ 0.90 within 30 minutes", || {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().join("work");
        let config_path = dir.path().join("desk.toml");
        std::fs::write(&config_path, DESK_CONFIG).unwrap();
        let started = Instant::now();
        for command in ["synth", "prepare", "pretrain", "finetune", "evaluate"] {
            let out = std::process::Command::new(env!("CARGO_BIN_EXE_clad"))
                .args(["--config", config_path.to_str().unwrap(), command])
                .env("CLAD_WORK_DIR", &work)
                .env("RUST_LOG", "warn")
                .output()
                .expect("binary runs");
            assert!(
                out.status.success(),
                "{command} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        let elapsed = started.elapsed();
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(work.join("reports/metrics_test.json")).unwrap(),
        )
        .unwrap();
        let f1 = report["f1"].as_f64().unwrap();
        println!(
            "    desk run: F1 {f1:.4} (precision {:.4}, recall {:.4}) in {:.0}s",
            report["precision"].as_f64().unwrap(),
            report["recall"].as_f64().unwrap(),
            elapsed.as_secs_f64()
        );
        assert!(
            elapsed.as_secs_f64() <= 1_800.0,
            "pipeline took {:.0}s, budget is 1800s",
            elapsed.as_secs_f64()
        );
        assert!(f1 >= 0.90, "test F1 {f1:.4} below the 0.90 gate");
    });
}

// ---------------------------------------------------------------------------
// 10. Metric algebra against the pinned reference row
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_metric_algebra_reference_row() {
    criterion(10, "precision/recall/F1 algebra matches the reference row", || {
        let p: f64 = 0.9768;
        let r: f64 = 0.9530;
        let f1 = 2.0 * p * r / (p + r);
        assert!((f1 - 0.9648).abs() <= 5e-5, "harmonic mean came out {f1:.5}");
        assert!((f1 - 0.9645).abs() <= 1e-3, "reference figure missed: {f1:.5}");
        // The same numbers through the metrics pipeline (counts scaled to
        // land on the pinned rates).
        let c = clad::evaluate::Confusion { tp: 9530, fp: 226, fn_: 470, tn: 0 };
        let m = clad::evaluate::prf1(&c);
        assert!((m.precision - p).abs() < 1e-4);
        assert!((m.recall - r).abs() < 1e-12);
        assert!((m.f1 - 0.9645).abs() <= 1e-3);
    });
}

// ---------------------------------------------------------------------------
// 11. Full-pipeline determinism
// ---------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"
seed = 5
deterministic = true

[synth]
n_windows = 40
window_size = 4
anomaly_ratio = 0.25

[model]
window_size = 4
embed_dim = 8
max_stream_len = 512
model_dim = 16
heads = 4
ffn_dim = 32
projection_dim = 8
cnn_blocks = [
  { channels = 8, kernel = 3, stride = 2, dilation = 1 },
  { channels = 16, kernel = 3, stride = 2, dilation = 2 },
  { channels = 16, kernel = 3, stride = 4, dilation = 4 },
]

[pretrain]
epochs = 2
batch_size = 8

[finetune]
epochs = 3
batch_size = 8
"#;

#[test]
fn criterion_11_pipeline_determinism() {
    criterion(11, "identical runs produce byte-identical artifacts", || {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(&config_path, DETERMINISM_CONFIG).unwrap();
        let run = |work: &std::path::Path| {
            for command in ["synth", "prepare", "pretrain", "finetune", "evaluate", "predict"] {
                let out = std::process::Command::new(env!("CARGO_BIN_EXE_clad"))
                    .args(["--config", config_path.to_str().unwrap(), command])
                    .env("CLAD_WORK_DIR", work)
                    .env("RUST_LOG", "warn")
                    .output()
                    .expect("binary runs");
                assert!(
                    out.status.success(),
                    "{command} failed: {}",
                    String::from_utf8_lossy(&out.stderr)
                );
            }
        };
        let work_a = dir.path().join("a");
        let work_b = dir.path().join("b");
        run(&work_a);
        run(&work_b);
        for artifact in [
            "manifest.json",
            "corpus/synthetic.log",
            "samples/train.cwbs",
            "samples/val.cwbs",
            "samples/test.cwbs",
            "samples/split_manifest.json",
            "checkpoints/pretrained.ckpt",
            "checkpoints/finetuned-ema.ckpt",
            "reports/pretrain_report.json",
            "reports/finetune_history.json",
            "reports/metrics_test.json",
            "reports/predictions.csv",
        ] {
            let a = std::fs::read(work_a.join(artifact)).unwrap();
            let b = std::fs::read(work_b.join(artifact)).unwrap();
            assert_eq!(a, b, "{artifact} differs between identical runs");
        }
    });
}
