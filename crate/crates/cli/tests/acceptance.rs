//! Runs the ten acceptance criteria in order and prints one line per
//! criterion. The test fails if any criterion fails.

use matchflow_core::eval::{aepe, corr_viz, fl_all, region_table, FlSemantics, VIZ_RADIUS};
use matchflow_core::flow::{flow_loss, loss_weights};
use matchflow_core::io::{decode_flo, decode_image, decode_weights, encode_flo, encode_weights, write_flo};
use matchflow_core::matching::{dual_softmax, matching_loss, GtMatches, TEMPERATURE};
use matchflow_core::selftest::{dense_oracle_case, model_gradients, op_gradients};
use matchflow_core::synth::{gen_static_pair, JitterSpec, Warp, WarpSpec};
use matchflow_core::tile::{blend, pixel_weight, resize_infer, split_patches, TileOptions, SIGMA};
use matchflow_core::train::{compare_curricula, pretrain_matching, CurriculumConfig, TrainConfig};
use matchflow_core::{Error, FlowModel, MatchFlow, ModelConfig, ModelWeights};
use matchflow_tensor::{Tape, Tensor};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Deterministic uniform values in [-1, 1).
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn tensor<T: matchflow_tensor::Real>(&mut self, shape: &[usize], scale: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.next() * scale))
    }
}

fn dense_attention_oracle() -> Outcome {
    let errors: Vec<f64> = (0..60).map(dense_oracle_case).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    ensure(worst < 1e-5, || format!("worst relative error {worst:.3e}"))?;
    Ok(format!("{} cases, worst relative error {worst:.2e}", errors.len()))
}

fn gradient_suite() -> Outcome {
    let mut checks = op_gradients().map_err(|e| e.to_string())?;
    checks.extend(model_gradients().map_err(|e| e.to_string())?);
    let worst = checks.iter().max_by(|a, b| a.error.total_cmp(&b.error)).expect("checks");
    let failed: Vec<&str> = checks.iter().filter(|c| !(c.error < 1e-4)).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed: {failed:?}"))?;
    Ok(format!("{} checks, worst {:.2e} ({})", checks.len(), worst.error, worst.name))
}

fn matching_anchors() -> Outcome {
    let mut g = Tape::<f64>::new();
    let c = g.constant(Tensor::eye(2));
    let p = dual_softmax(&mut g, c, TEMPERATURE).map_err(|e| e.to_string())?;
    let p00 = g.value(p).at(&[0, 0]);
    ensure((p00 - 0.9999092).abs() < 1e-5, || format!("P(0,0) = {p00}"))?;

    let mut rng = Lcg(33);
    let mut worst = 0.0f64;
    for case in 0..25 {
        let (n, m) = (2 + case % 4, 2 + (case / 4) % 4);
        let corr: Tensor<f64> = rng.tensor(&[n, m], 0.5);
        let gt = GtMatches((0..n).filter(|i| i % 2 == 0 || rng.next() > 0.0).map(|i| (i, (i * 7 + case) % m)).collect());
        let mut g = Tape::<f64>::new();
        let c = g.constant(corr.clone());
        let p = dual_softmax(&mut g, c, TEMPERATURE).map_err(|e| e.to_string())?;
        let l = matching_loss(&mut g, p, &gt).map_err(|e| e.to_string())?;
        let tape_loss = g.value(l).item();
        let e = |i: usize, j: usize| (corr.at(&[i, j]) / TEMPERATURE).exp();
        let direct = -gt
            .0
            .iter()
            .map(|&(i, j)| {
                let row: f64 = (0..m).map(|k| e(i, k)).sum();
                let col: f64 = (0..n).map(|k| e(k, j)).sum();
                (e(i, j) / row * (e(i, j) / col)).ln()
            })
            .sum::<f64>()
            / gt.0.len() as f64;
        worst = worst.max((tape_loss - direct).abs());
    }
    ensure(worst < 1e-10, || format!("loss mismatch {worst:.3e}"))?;
    Ok(format!("P(0,0) = {p00:.7}, loss recomputation within {worst:.1e}"))
}

fn flow_loss_anchor() -> Outcome {
    let mut rng = Lcg(4);
    let gt: Tensor<f64> = rng.tensor::<f64>(&[2, 4, 4], 3.0).map(f64::round);
    let mut g = Tape::<f64>::new();
    let flows = [g.constant(gt.map(|v| v + 1.0)), g.constant(gt.clone())];
    let l = flow_loss(&mut g, &flows, &gt, 0.8, None).map_err(|e| e.to_string())?;
    let v = g.value(l).item();
    ensure(v == 1.6, || format!("hand case gives {v}"))?;
    for n in 1..=20 {
        for gamma in [0.1, 0.5, 0.8, 0.99, 1.0] {
            let w = loss_weights(n, gamma);
            ensure(w.windows(2).all(|p| p[0] <= p[1]), || format!("weights decrease for N={n}, gamma={gamma}"))?;
        }
    }
    Ok(format!("hand case = {v}, weights non-decreasing"))
}

struct Tiny(MatchFlow);

impl FlowModel for Tiny {
    fn predict(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> matchflow_core::Result<Tensor<f32>> {
        self.0.predict(a, b)
    }
}

fn tile_suite() -> Outcome {
    let c = pixel_weight(208, 368, (416, 736), SIGMA);
    ensure((c - 7.9788).abs() < 1e-3, || format!("center weight {c}"))?;
    let plan = split_patches((416, 1000), (416, 736)).map_err(|e| e.to_string())?;
    ensure(plan.starts == [(0, 0), (0, 264)], || format!("starts {:?}", plan.starts))?;

    for (test, train) in [((100, 130), (64, 96)), ((64, 150), (64, 96)), ((128, 192), (64, 96))] {
        let plan = split_patches(test, train).map_err(|e| e.to_string())?;
        let patch = Tensor::from_fn(&[2, train.0, train.1], |i| if i < train.0 * train.1 { 0.3f32 } else { -1.7 });
        let out = blend(&vec![patch; plan.starts.len()], &plan, SIGMA).map_err(|e| e.to_string())?;
        let (u, v) = out.data().split_at(test.0 * test.1);
        ensure(u.iter().all(|&x| x == 0.3) && v.iter().all(|&x| x == -1.7), || format!("constant blend inexact for {test:?}"))?;
    }

    let model = Tiny(MatchFlow::new(ModelWeights::init(&ModelConfig::tiny(), 5).map_err(|e| e.to_string())?).with_iters(3));
    let mut rng = Lcg(9);
    let (a, b): (Tensor<f32>, Tensor<f32>) = (rng.tensor::<f32>(&[3, 64, 96], 0.5).map(|v| v + 0.5), rng.tensor::<f32>(&[3, 64, 96], 0.5).map(|v| v + 0.5));
    let tiled = resize_infer(&a, &b, &model, &TileOptions::new((64, 96))).map_err(|e| e.to_string())?;
    let direct = model.predict(&a, &b).map_err(|e| e.to_string())?;
    ensure(tiled == direct, || "equal-size tiling differs from direct inference".into())?;
    Ok(format!("center weight {c:.4}, starts {:?}, constant blends exact, tiling identity holds", plan.starts))
}

fn flow2(u: &[f32], v: &[f32], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[2, h, w], [u, v].concat()).expect("shape")
}

fn metric_suite() -> Outcome {
    let e = aepe(&flow2(&[0.0], &[0.0], 1, 1), &flow2(&[3.0], &[4.0], 1, 1), None).map_err(|e| e.to_string())?;
    ensure(e == 5.0, || format!("3-4-5 AEPE = {e}"))?;

    let mut rng = Lcg(77);
    for k in 0..100 {
        let gt: Tensor<f32> = rng.tensor(&[2, 6, 7], 40.0);
        let mut pred = gt.clone();
        pred.add_assign(&rng.tensor(&[2, 6, 7], 6.0));
        let and = fl_all(&pred, &gt, None, FlSemantics::And).map_err(|e| e.to_string())?;
        let or = fl_all(&pred, &gt, None, FlSemantics::Or).map_err(|e| e.to_string())?;
        ensure(or >= and, || format!("field {k}: or {or} < and {and}"))?;
    }

    let gt = flow2(&[100.0], &[0.0], 1, 1);
    let pred = flow2(&[104.0], &[0.0], 1, 1);
    let and = fl_all(&pred, &gt, None, FlSemantics::And).map_err(|e| e.to_string())?;
    let or = fl_all(&pred, &gt, None, FlSemantics::Or).map_err(|e| e.to_string())?;
    ensure(and == 0.0 && or == 100.0, || format!("flip pixel: and {and}, or {or}"))?;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gt: Tensor<f32> = rng.tensor(&[2, 8, 10], 6.0);
        let pred: Tensor<f32> = rng.tensor(&[2, 8, 10], 6.0);
        let occ = Tensor::from_fn(&[8, 10], |_| if rng.next() > 0.3 { 1.0f32 } else { 0.0 });
        let t = region_table(&pred, &gt, &occ).map_err(|e| e.to_string())?;
        let get = |name: &str| t.iter().find(|r| r.region == name).expect("region");
        let part = |name: &str| get(name).aepe.map_or(0.0, |a| a * get(name).pixels as f64);
        let all = get("all").aepe.expect("non-empty") * 80.0;
        worst = worst.max((all - part("noc") - part("occ-in") - part("occ-out")).abs() / 80.0);
        worst = worst.max((part("occ") - part("occ-in") - part("occ-out")).abs() / 80.0);
    }
    ensure(worst < 1e-6, || format!("region recomposition off by {worst:e}"))?;
    Ok(format!("3-4-5 = {e}, or >= and on 100 fields, flip pixel and/or = {and}/{or}, regions within {worst:.1e}"))
}

fn center_on_identical_frames(w: &ModelWeights) -> Result<(f64, bool), String> {
    let model = MatchFlow::new(w.clone());
    let p = gen_static_pair(0xc0ffee, (64, 96), &WarpSpec::Fixed(Warp::identity()), &JitterSpec::default()).map_err(|e| e.to_string())?;
    let corr = model.correlation(&p.i1, &p.i2).map_err(|e| e.to_string())?;
    let map = corr_viz(&corr, (8, 12), &Tensor::zeros(&[2, 64, 96]), None).map_err(|e| e.to_string())?;
    let c = map.at(&[VIZ_RADIUS, VIZ_RADIUS]);
    Ok((c, map.data().iter().all(|&v| v <= c)))
}

fn held_out_center(w: &ModelWeights, pairs: u64) -> Result<f64, String> {
    let model = MatchFlow::new(w.clone());
    let mut total = 0.0;
    for k in 0..pairs {
        let warp = WarpSpec::RandomTranslation { max: 8.0, integer: false };
        let p = gen_static_pair((1 << 62) + k, (64, 96), &warp, &JitterSpec { brightness: 0.05, contrast: 0.1 }).map_err(|e| e.to_string())?;
        let Warp::Translation { tx, ty } = p.warp else { return Err("expected a translation".into()) };
        let gt = Tensor::from_fn(&[2, 64, 96], |i| if i < 64 * 96 { tx as f32 } else { ty as f32 });
        let corr = model.correlation(&p.i1, &p.i2).map_err(|e| e.to_string())?;
        total += corr_viz(&corr, (8, 12), &gt, None).map_err(|e| e.to_string())?.at(&[VIZ_RADIUS, VIZ_RADIUS]);
    }
    Ok(total / pairs as f64)
}

fn correlation_diagnostic() -> Outcome {
    let cfg = TrainConfig::stage1(0);
    let init = ModelWeights::init(&cfg.model, cfg.seed).map_err(|e| e.to_string())?;
    let (trained, _) = pretrain_matching(&cfg).map_err(|e| e.to_string())?;
    let (c0, peak0) = center_on_identical_frames(&init)?;
    let (c1, peak1) = center_on_identical_frames(&trained)?;
    ensure(peak0 && peak1, || format!("identical frames: center is not the peak (untrained {peak0}, pretrained {peak1})"))?;
    let (h0, h1) = (held_out_center(&init, 8)?, held_out_center(&trained, 8)?);
    ensure(h1 > h0, || format!("held-out center {h1:.4} does not exceed untrained {h0:.4}"))?;
    Ok(format!(
        "identical-frame center {c0:.4} -> {c1:.4} (peak), held-out center {h0:.4} -> {h1:.4} ({:.2}x)",
        h1 / h0
    ))
}

fn curriculum() -> Outcome {
    let r = compare_curricula(&CurriculumConfig::desk(), &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let per_seed: Vec<String> = r
        .seeds
        .iter()
        .map(|s| {
            let f = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
            format!(
                "seed {}: steps {}/{} final {:.3}/{:.3}",
                s.seed,
                f(s.pretrained.steps_to_threshold),
                f(s.scratch.steps_to_threshold),
                s.pretrained.final_aepe,
                s.scratch.final_aepe
            )
        })
        .collect();
    for l in &per_seed {
        println!("    {l}");
    }
    let (faster, not_worse) = (r.faster_count(), r.not_worse_count());
    ensure(faster >= 4 && not_worse >= 4, || format!("faster {faster}/5, not worse {not_worse}/5"))?;
    Ok(format!("pretrained faster in {faster}/5 seeds, final AEPE not worse in {not_worse}/5 (pretrained/scratch)"))
}

fn format_suite() -> Outcome {
    let mut rng = Lcg(12);
    for (h, w) in [(1, 1), (3, 5), (17, 9)] {
        let f: Tensor<f32> = rng.tensor(&[2, h, w], 50.0);
        let bytes = encode_flo(&f).map_err(|e| e.to_string())?;
        let back = decode_flo(&bytes).map_err(|e| e.to_string())?;
        ensure(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || ".flo round trip not bit-exact".into())?;
    }
    for cfg in [ModelConfig::tiny(), ModelConfig::desk()] {
        let w = ModelWeights::init(&cfg, 8).map_err(|e| e.to_string())?;
        let back = decode_weights(&encode_weights(&w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back.len() == w.len(), || "entry count changed".into())?;
        for (n, t) in w.iter() {
            let b = back.get(n).ok_or_else(|| format!("lost {n}"))?;
            ensure(b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()), || format!("{n} changed"))?;
        }
    }

    let good = encode_flo(&rng.tensor::<f32>(&[2, 3, 4], 5.0)).map_err(|e| e.to_string())?;
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut huge = good.clone();
    huge[4..8].copy_from_slice(&100_000u32.to_le_bytes());
    let flo_cases: Vec<(&str, Vec<u8>)> = vec![
        ("bad magic", bad_magic),
        ("truncated header", good[..7].to_vec()),
        ("truncated payload", good[..good.len() - 3].to_vec()),
        ("trailing bytes", [good.clone(), vec![0]].concat()),
        ("size mismatch", huge),
        ("empty", vec![]),
    ];
    for (name, bytes) in &flo_cases {
        ensure(matches!(decode_flo(bytes), Err(Error::Format { .. })), || format!(".flo {name} not rejected as a format error"))?;
    }
    for (name, bytes) in [("P3", b"P3\n1 1\n255\n0 0 0\n".to_vec()), ("16-bit", b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec()), ("short raster", b"P6\n2 2\n255\n\0\0\0".to_vec())] {
        ensure(matches!(decode_image(&bytes), Err(Error::Format { .. })), || format!("image {name} not rejected"))?;
    }
    let w = encode_weights(&ModelWeights::init(&ModelConfig::tiny(), 1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut flipped = w.clone();
    flipped[w.len() / 2] ^= 0x10;
    for (name, bytes) in [("truncated", w[..w.len() - 9].to_vec()), ("bit flip", flipped), ("tiny", w[..10].to_vec())] {
        ensure(matches!(decode_weights(&bytes), Err(Error::Corruption(_))), || format!("weights {name} not rejected as corruption"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("nan.flo");
    let nan = Tensor::from_fn(&[2, 2, 2], |i| if i == 3 { f32::NAN } else { 0.0 });
    ensure(write_flo(&path, &nan).is_err() && !path.exists(), || "non-finite flow produced a file".into())?;
    Ok(format!("round trips bit-exact, {} malformed inputs rejected", flo_cases.len() + 3 + 3 + 1))
}

fn cli_determinism() -> Outcome {
    let script: &[&[&str]] = &[
        &["gen-data", "--out", "data", "--count", "2", "--seed", "11"],
        &["gen-data", "--out", "sdata", "--kind", "static", "--count", "1", "--seed", "11"],
        &["pretrain", "--model", "tiny", "--seed", "2", "--steps", "4", "--val-every", "2", "--val-pairs", "2", "--out", "s1.mfw", "--log", "s1.log"],
        &["finetune", "--init", "s1.mfw", "--seed", "2", "--steps", "4", "--val-every", "2", "--val-pairs", "2", "--out", "s2.mfw", "--log", "s2.log"],
        &["infer", "data/0000_img1.ppm", "data/0000_img2.ppm", "--weights", "s2.mfw", "--out", "f.flo", "--color", "f.ppm"],
        &["eval", "--pred", "f.flo", "--gt", "data/0000_flow.flo", "--occ", "data/0000_occ.pgm"],
        &["viz-corr", "--weights", "s2.mfw", "--out", "viz.ppm"],
        &["compare", "--model", "tiny", "--seeds", "0,1,2", "--pretrain-steps", "2", "--finetune-steps", "3", "--report", "cmp.txt"],
        &["selftest"],
    ];
    let files = [
        "data/0000_img1.ppm", "data/0000_img2.ppm", "data/0000_flow.flo", "data/0000_occ.pgm", "data/0001_flow.flo", "sdata/0000_flow.flo",
        "s1.mfw", "s1.log", "s2.mfw", "s2.log", "f.flo", "f.ppm", "viz.ppm", "cmp.txt",
    ];
    let run_all = |dir: &Path| -> Result<Vec<Vec<u8>>, String> {
        let mut out = Vec::new();
        for args in script {
            let o = Command::new(env!("CARGO_BIN_EXE_matchflow"))
                .current_dir(dir)
                .args(["--threads", "1"])
                .args(*args)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
            }
            out.push(o.stdout);
        }
        for f in files {
            out.push(std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        Ok(out)
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ra, rb) = (run_all(a.path())?, run_all(b.path())?);
    let names: Vec<String> = script.iter().map(|s| format!("stdout of {}", s[0])).chain(files.iter().map(|f| f.to_string())).collect();
    for ((x, y), name) in ra.iter().zip(&rb).zip(&names) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} commands, {} outputs bit-identical across two runs", script.len(), names.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("dense-attention oracle", dense_attention_oracle),
        ("gradient suite", gradient_suite),
        ("dual-softmax and matching-loss anchors", matching_anchors),
        ("sequence flow-loss anchor", flow_loss_anchor),
        ("tile suite", tile_suite),
        ("metric suite", metric_suite),
        ("correlation-volume diagnostic", correlation_diagnostic),
        ("curriculum reproduction", curriculum),
        ("format suite", format_suite),
        ("CLI determinism", cli_determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match &r {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                println!("criterion {:>2} FAIL  {name}: {d} [{secs:.1}s]", i + 1);
                failures.push(i + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
