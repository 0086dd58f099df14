//! Subcommand implementations. Each returns the text printed on stdout.

use crate::args::{CompareArgs, EvalArgs, FinetuneArgs, Fl, GenArgs, InferArgs, Kind, Motion, Preset, TrainArgs, VizArgs};
use crate::error::{CliError, CliResult};
use matchflow_core::eval::{aepe, corr_viz, fl_all, flow_to_color, heatmap, region_table, FlSemantics, VIZ_RADIUS};
use matchflow_core::io::{format_kv, load_weights, read_flo, read_image, read_mask, save_weights, write_flo, write_image};
use matchflow_core::selftest;
use matchflow_core::synth::{gen_flow_pair, gen_static_pair, JitterSpec, MotionSpec, Warp, WarpSpec};
use matchflow_core::tile::{resize_infer, TileOptions};
use matchflow_core::train::{compare_curricula, finetune_flow, pretrain_matching, CurriculumConfig, DataSpec, TrainConfig, TrainReport};
use matchflow_core::{MatchFlow, ModelConfig, ModelWeights, ParamGroup};
use matchflow_tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

fn preset(p: Preset) -> ModelConfig {
    match p {
        Preset::Desk => ModelConfig::desk(),
        Preset::Tiny => ModelConfig::tiny(),
    }
}

/// Writes `[3×H×W]` or `[H×W]` images as PNG when the extension asks for
/// it, P6/P5 otherwise.
fn write_picture(path: &Path, img: &Tensor<f32>) -> CliResult {
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !png {
        return Ok(write_image(path, img)?);
    }
    let bytes = matchflow_core::io::encode_image(img)?;
    // Reuse the PNM encoder's quantization and strip its three-line header.
    let raster = bytes.splitn(4, |&b| b == b'\n').nth(3).unwrap_or_default().to_vec();
    let (h, w) = (img.shape()[img.ndim() - 2] as u32, img.shape()[img.ndim() - 1] as u32);
    let color = if img.ndim() == 3 && img.shape()[0] == 3 { image::ColorType::Rgb8 } else { image::ColorType::L8 };
    image::save_buffer(path, &raster, w, h, color)?;
    Ok(())
}

fn apply_train_args(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.peak_lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    if let Some(v) = a.val_pairs {
        cfg.val_pairs = v;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if a.checkpoint_dir.is_some() {
        cfg.checkpoint_dir = a.checkpoint_dir.clone();
    }
}

fn train_summary(report: &TrainReport, a: &TrainArgs) -> CliResult<String> {
    if let Some(log) = &a.log {
        std::fs::write(log, report.to_json_lines())?;
    }
    eprintln!("trained {} steps in {:.1}s", report.losses.len(), report.wall_clock_secs);
    let mut kv = vec![("steps", report.losses.len().to_string())];
    if let Some(l) = report.losses.last() {
        kv.push(("final_loss", format!("{l:.6}")));
    }
    if let Some(v) = report.validation.last() {
        kv.push(("val_step", v.step.to_string()));
        kv.push(("val_metric", format!("{:.6}", v.metric)));
        if let Some(p) = v.precision {
            kv.push(("val_precision", format!("{p:.6}")));
        }
    }
    kv.push(("weights", a.out.display().to_string()));
    Ok(format_kv(kv))
}

pub fn pretrain(a: &TrainArgs) -> CliResult<String> {
    let mut cfg = TrainConfig::stage1(a.seed);
    cfg.model = preset(a.model.unwrap_or(Preset::Desk));
    apply_train_args(&mut cfg, a);
    let (w, report) = pretrain_matching(&cfg)?;
    save_weights(&a.out, &w.subset(&[ParamGroup::Features]))?;
    train_summary(&report, a)
}

pub fn finetune(a: &FinetuneArgs) -> CliResult<String> {
    let t = &a.train;
    let mut cfg = TrainConfig::stage2(t.seed);
    let loaded = a.init.as_ref().map(load_weights).transpose()?;
    cfg.model = match (t.model, &loaded) {
        (Some(p), _) => preset(p),
        (None, Some(w)) => w.config.clone(),
        (None, None) => ModelConfig::desk(),
    };
    if let (Motion::Uniform, DataSpec::Flow { motion, .. }) = (a.motion, &mut cfg.data) {
        *motion = MotionSpec::Uniform { max: 8.0, integer: false };
    }
    if let Some(n) = a.train_iters {
        cfg.train_iters = n;
    }
    apply_train_args(&mut cfg, t);
    let init = match loaded {
        Some(src) => {
            let mut w = ModelWeights::init(&cfg.model, t.seed)?;
            let n = w.merge_from(&src)?;
            eprintln!("{n} of {} parameters loaded from {}", w.len(), a.init.as_ref().expect("loaded").display());
            Some(w)
        }
        None => None,
    };
    let (w, report) = finetune_flow(&cfg, init)?;
    save_weights(&t.out, &w)?;
    train_summary(&report, t)
}

pub fn compare(a: &CompareArgs) -> CliResult<String> {
    let mut cc = CurriculumConfig::desk();
    cc.pretrain.model = preset(a.model);
    cc.finetune.model = preset(a.model);
    cc.threshold = a.threshold;
    if let Some(s) = a.pretrain_steps {
        cc.pretrain.steps = s;
    }
    if let Some(s) = a.finetune_steps {
        cc.finetune.steps = s;
    }
    let r = compare_curricula(&cc, &a.seeds)?;
    let steps = |s: Option<usize>| s.map_or_else(|| "none".to_string(), |v| v.to_string());
    let mut kv = Vec::new();
    let keys: Vec<(String, String)> = r
        .seeds
        .iter()
        .flat_map(|s| {
            [
                (format!("seed.{}.pretrained_steps", s.seed), steps(s.pretrained.steps_to_threshold)),
                (format!("seed.{}.scratch_steps", s.seed), steps(s.scratch.steps_to_threshold)),
                (format!("seed.{}.pretrained_final_aepe", s.seed), format!("{:.6}", s.pretrained.final_aepe)),
                (format!("seed.{}.scratch_final_aepe", s.seed), format!("{:.6}", s.scratch.final_aepe)),
            ]
        })
        .collect();
    for (k, v) in &keys {
        kv.push((k.as_str(), v.clone()));
    }
    kv.push(("threshold", format!("{}", r.threshold)));
    kv.push(("pretrained_faster", format!("{}/{}", r.faster_count(), r.seeds.len())));
    kv.push(("pretrained_not_worse", format!("{}/{}", r.not_worse_count(), r.seeds.len())));
    let text = format_kv(kv);
    if let Some(p) = &a.report {
        std::fs::write(p, &text)?;
    }
    Ok(text)
}

pub fn infer(a: &InferArgs) -> CliResult<String> {
    let w = load_weights(&a.weights)?;
    w.check_against_config()?;
    let model = MatchFlow::new(w).with_iters(a.iters as usize);
    let (i1, i2) = (read_image(&a.image1)?, read_image(&a.image2)?);
    let opts = TileOptions { train_size: (a.train_size.0, a.train_size.1), tile: !a.no_tile, sigma: a.sigma };
    let flow = resize_infer(&i1, &i2, &model, &opts)?;
    write_flo(&a.out, &flow)?;
    if let Some(c) = &a.color {
        write_picture(c, &flow_to_color(&flow, None)?)?;
    }
    Ok(format_kv([
        ("height", flow.shape()[1].to_string()),
        ("width", flow.shape()[2].to_string()),
        ("iters", a.iters.to_string()),
        ("tile", (!a.no_tile).to_string()),
        ("flow", a.out.display().to_string()),
    ]))
}

pub fn eval(a: &EvalArgs) -> CliResult<String> {
    let (pred, gt) = (read_flo(&a.pred)?, read_flo(&a.gt)?);
    let and = fl_all(&pred, &gt, None, FlSemantics::And)?;
    let or = fl_all(&pred, &gt, None, FlSemantics::Or)?;
    let chosen = if a.fl == Fl::And { and } else { or };
    let mut out = format_kv([
        ("aepe", format!("{:.6}", aepe(&pred, &gt, None)?)),
        ("fl_all", format!("{chosen:.4}")),
        ("fl_all_and", format!("{and:.4}")),
        ("fl_all_or", format!("{or:.4}")),
    ]);
    if let Some(occ) = &a.occ {
        let mask = read_mask(occ)?;
        for r in region_table(&pred, &gt, &mask)? {
            let ae = r.aepe.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "region.{}.pixels={}", r.region, r.pixels);
            let _ = writeln!(out, "region.{}.fraction={:.6}", r.region, r.fraction);
            let _ = writeln!(out, "region.{}.aepe={ae}", r.region);
        }
    }
    Ok(out)
}

pub fn viz_corr(a: &VizArgs) -> CliResult<String> {
    let weights = match &a.weights {
        Some(p) => load_weights(p)?,
        None => ModelWeights::init(&preset(a.model), a.seed)?,
    };
    let (i1, i2) = match (&a.image1, &a.image2) {
        (Some(p1), Some(p2)) => (read_image(p1)?, read_image(p2)?),
        _ => {
            let p = gen_static_pair(a.seed, (a.size.0, a.size.1), &WarpSpec::Fixed(Warp::identity()), &JitterSpec::default())?;
            (p.i1, p.i2)
        }
    };
    let (h, w) = (i1.shape()[1], i1.shape()[2]);
    let gt = match &a.gt {
        Some(p) => read_flo(p)?,
        None => Tensor::zeros(&[2, h, w]),
    };
    let model = MatchFlow::new(weights);
    let corr = model.correlation(&i1, &i2)?;
    let map = corr_viz(&corr, (h / 8, w / 8), &gt, None)?;
    let side = 2 * VIZ_RADIUS + 1;
    let mut out = String::new();
    for r in 0..side {
        let row: Vec<String> = (0..side).map(|c| format!("{:.6}", map.at(&[r, c]))).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "center={:.6}", map.at(&[VIZ_RADIUS, VIZ_RADIUS]));
    if let Some(p) = &a.out {
        write_picture(p, &heatmap(&map, a.cell.max(1)))?;
    }
    Ok(out)
}

pub fn gen_data(a: &GenArgs) -> CliResult<String> {
    std::fs::create_dir_all(&a.out)?;
    let size = (a.size.0, a.size.1);
    let (h, w) = size;
    for k in 0..a.count {
        let seed = a.seed.wrapping_add(k);
        let (i1, i2, flow, occ) = match a.kind {
            Kind::Static => {
                let warp = WarpSpec::RandomTranslation { max: a.max_motion, integer: false };
                let p = gen_static_pair(seed, size, &warp, &JitterSpec { brightness: 0.05, contrast: 0.1 })?;
                let mut flow = Tensor::zeros(&[2, h, w]);
                for y in 0..h {
                    for x in 0..w {
                        let (tx, ty) = p.warp.apply(x as f64, y as f64);
                        flow.data_mut()[y * w + x] = (tx - x as f64) as f32;
                        flow.data_mut()[h * w + y * w + x] = (ty - y as f64) as f32;
                    }
                }
                let occ = p.valid.map(|v| 1.0 - v);
                (p.i1, p.i2, flow, occ)
            }
            Kind::Flow => {
                let m = MotionSpec::Random { max_background: a.max_motion, max_foreground: a.max_motion, layers: 1, integer: false };
                let p = gen_flow_pair(seed, size, &m)?;
                (p.i1, p.i2, p.flow, p.occlusion)
            }
        };
        let stem = a.out.join(format!("{k:04}"));
        let path = |suffix: &str| stem.with_file_name(format!("{k:04}_{suffix}"));
        write_image(path("img1.ppm"), &i1)?;
        write_image(path("img2.ppm"), &i2)?;
        write_flo(path("flow.flo"), &flow)?;
        write_image(path("occ.pgm"), &occ)?;
    }
    Ok(format_kv([("pairs", a.count.to_string()), ("dir", a.out.display().to_string())]))
}

pub fn selftest() -> CliResult<String> {
    let checks = selftest::run_all()?;
    let mut out = String::new();
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag} {} (error {:.3e}, tolerance {:.1e})", c.name, c.error, c.tolerance);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let _ = writeln!(out, "{} checks, {failed} failed", checks.len());
    if failed > 0 {
        print!("{out}");
        return Err(CliError::Failed(format!("{failed} self-test checks failed")));
    }
    Ok(out)
}
