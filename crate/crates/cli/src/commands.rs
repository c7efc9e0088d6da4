use std::path::{Path, PathBuf};

use serde::Serialize;

use polguide::analysis::{
    eta_sweep, material_sweep, noise_sweep, normalize_by_p99, sensitivity_map, variant_ablation,
    MaterialPreset, RunScore,
};
use polguide::backbone::bridge::{self, BridgeClient};
use polguide::backbone::{BackboneSession, CorruptedOracle, LinearSmoother};
use polguide::decomposition::{decompose, edit, EditOp};
use polguide::fresnel::{Material, RadianceSplit};
use polguide::guidance::{refine, GroundTruth, GuidanceConfig, GuidanceTrace};
use polguide::metrics::{angular_error_map, summarize, NormalMetrics};
use polguide::polarimetry::{
    dolp_aolp, stokes_from_capture, validity_mask, IntensityCapture, StokesMap,
};
use polguide::synth::{add_noise, generate, SyntheticScene};
use polguide::{Image, Mask, NormalMap, Shape, VectorField};

use crate::config::{self, BackboneArg, OracleConfig, RunConfig, SweepConfig, SynthConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{pfm, render, Command, RefineArgs, SweepKind};

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Refine(args) => refine_cmd(args),
        Command::Metrics {
            pred,
            gt,
            mask,
            out,
        } => metrics(&pred, &gt, mask.as_deref(), &out),
        Command::Stokes { input, out } => stokes(&input, &out),
        Command::Jacobian {
            input,
            backbone,
            pixel,
            out,
        } => jacobian(&input, &backbone, pixel, &out),
        Command::Sweep { kind } => sweep(kind),
        Command::Decompose {
            input,
            normals,
            l_s,
            eta,
            camera,
            out,
        } => {
            let obs = load_observation(&input)?.0;
            let n = load_normals(&normals)?;
            let l_s_img = snap_to_s0(load(&l_s)?, &obs.s0);
            let shape = obs.shape();
            let view = camera
                .model(shape.height, shape.width)
                .view_field(shape.height, shape.width)?;
            let d = decompose(&obs, &n, &l_s_img, &view, &Material::new(eta)?)?;
            create_dir(&out)?;
            save(&out, "l_d.pfm", &d.split.l_d)?;
            save(&out, "l_s.pfm", &d.split.l_s)?;
            save_stokes(&out, "diffuse_", &d.diffuse)?;
            save_stokes(&out, "specular_", &d.specular)?;
            render::image_png(&d.diffuse_vis, &out.join("diffuse_vis.png"))?;
            render::image_png(&d.specular_vis, &out.join("specular_vis.png"))
        }
        Command::Edit { l_d, l_s, op, out } => {
            let split = RadianceSplit {
                l_d: load(&l_d)?,
                l_s: load(&l_s)?,
            };
            split.l_s.expect_shape("l_s", split.l_d.shape())?;
            let edited = edit(&split, &op)?;
            create_dir(&out)?;
            save(&out, "edited.pfm", &edited)?;
            render::image_png(&edited, &out.join("edited.png"))
        }
        Command::BridgeServe {
            backbone,
            shape,
            input,
        } => bridge_serve(&backbone, shape, input.as_deref()),
    }
}

pub fn parse_edit(s: &str) -> Result<EditOp, String> {
    let list = |t: &str| -> Result<Vec<f64>, String> {
        t.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad number {v:?}"))
            })
            .collect()
    };
    if let Some(rest) = s.strip_prefix("recolor:") {
        return Ok(EditOp::Recolor { scale: list(rest)? });
    }
    if let Some(rest) = s.strip_prefix("metallic:") {
        let (gain, tint) = rest
            .split_once(':')
            .ok_or("expected metallic:<gain>:<tint>")?;
        let gain = gain.parse().map_err(|_| format!("bad gain {gain:?}"))?;
        return Ok(EditOp::Metallic {
            tint: list(tint)?,
            gain,
        });
    }
    Err(format!("expected recolor:... or metallic:..., got {s:?}"))
}

fn load(path: &Path) -> CliResult<Image> {
    pfm::load(path).map_err(|e| CliError::io(path, e))
}

/// Samples stored at 32 bits may round just above `s0`; those are moved onto it.
fn snap_to_s0(mut l_s: Image, s0: &Image) -> Image {
    if l_s.shape() == s0.shape() {
        for (l, &s) in l_s.data_mut().iter_mut().zip(s0.data()) {
            if *l > s && *l as f32 == s as f32 {
                *l = s;
            }
        }
    }
    l_s
}

fn load_normals(path: &Path) -> CliResult<NormalMap> {
    VectorField::from_image(&load(path)?).map_err(|e| CliError::io(path, e))
}

fn save(dir: &Path, name: &str, img: &Image) -> CliResult<()> {
    let path = dir.join(name);
    pfm::save(&path, img).map_err(|e| CliError::io(&path, e))
}

fn save_stokes(dir: &Path, prefix: &str, s: &StokesMap) -> CliResult<()> {
    save(dir, &format!("{prefix}s0.pfm"), &s.s0)?;
    save(dir, &format!("{prefix}s1.pfm"), &s.s1)?;
    save(dir, &format!("{prefix}s2.pfm"), &s.s2)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

const CAPTURES: [&str; 4] = ["i000.pfm", "i045.pfm", "i090.pfm", "i135.pfm"];
const STOKES: [&str; 3] = ["s0.pfm", "s1.pfm", "s2.pfm"];

/// Stokes maps from a directory of captures, falling back to stored Stokes
/// components. Also returns the files read.
fn load_observation(dir: &Path) -> CliResult<(StokesMap, Vec<PathBuf>)> {
    let has_captures = CAPTURES.iter().all(|f| dir.join(f).is_file());
    if has_captures || !STOKES.iter().all(|f| dir.join(f).is_file()) {
        let cap = load_capture(dir)?;
        let files = CAPTURES.iter().map(|f| dir.join(f)).collect();
        return Ok((stokes_from_capture(&cap)?, files));
    }
    let files: Vec<PathBuf> = STOKES.iter().map(|f| dir.join(f)).collect();
    let s = StokesMap {
        s0: load(&files[0])?,
        s1: load(&files[1])?,
        s2: load(&files[2])?,
    };
    s.check()?;
    Ok((s, files))
}

fn load_capture(dir: &Path) -> CliResult<IntensityCapture> {
    Ok(IntensityCapture {
        i000: load(&dir.join(CAPTURES[0]))?,
        i045: load(&dir.join(CAPTURES[1]))?,
        i090: load(&dir.join(CAPTURES[2]))?,
        i135: load(&dir.join(CAPTURES[3]))?,
    })
}

fn synth(path: &Path, out: &Path) -> CliResult<()> {
    let cfg: SynthConfig = config::load(path)?;
    cfg.validate()?;
    let scene = generate(&cfg.scene).map_err(|e| config::validation("scene.", e))?;
    let capture = if cfg.noise.sigma > 0.0 {
        add_noise(&scene.capture, cfg.noise.sigma, cfg.noise.seed)?
    } else {
        scene.capture.clone()
    };
    let stokes = stokes_from_capture(&capture)?;
    create_dir(out)?;
    let mut outputs = vec![];
    let mut put = |name: &str, img: &Image| -> CliResult<()> {
        save(out, name, img)?;
        outputs.push(name.to_string());
        Ok(())
    };
    put("gt_normals.pfm", &scene.gt.to_image())?;
    put(CAPTURES[0], &capture.i000)?;
    put(CAPTURES[1], &capture.i045)?;
    put(CAPTURES[2], &capture.i090)?;
    put(CAPTURES[3], &capture.i135)?;
    put(STOKES[0], &stokes.s0)?;
    put(STOKES[1], &stokes.s1)?;
    put(STOKES[2], &stokes.s2)?;
    put("mask.pfm", &validity_mask(&stokes).to_image())?;
    let mut m = Manifest::new("synth", &cfg)?.seed("noise", cfg.noise.seed);
    m.input("config", path)?;
    m.outputs = outputs;
    m.write(out)
}

/// A backbone plus what the manifest should know about it.
struct Built {
    session: BackboneSession,
    oracle: Option<OracleConfig>,
    inputs: Vec<(String, PathBuf)>,
}

fn build_backbone(arg: &BackboneArg, x: &Image) -> CliResult<Built> {
    let spec = x.shape();
    match arg {
        BackboneArg::Smoother { radius } => Ok(Built {
            session: Box::new(LinearSmoother::new(spec, *radius)),
            oracle: None,
            inputs: vec![],
        }),
        BackboneArg::Oracle(path) => {
            let cfg: OracleConfig = config::load(path)?;
            let gt_path = path.parent().unwrap_or(Path::new(".")).join(&cfg.gt);
            let gt = load_normals(&gt_path)?;
            if (gt.height(), gt.width()) != (spec.height, spec.width) {
                return Err(CliError::Io(format!(
                    "{}: normals are {}x{} but the input is {}x{}",
                    gt_path.display(),
                    gt.height(),
                    gt.width(),
                    spec.height,
                    spec.width
                )));
            }
            let oracle =
                CorruptedOracle::corrupting(&gt, &cfg.corruption, x.clone(), cfg.gain, cfg.seed);
            Ok(Built {
                session: Box::new(oracle),
                oracle: Some(cfg),
                inputs: vec![
                    ("oracle".into(), path.clone()),
                    ("oracle_gt".into(), gt_path),
                ],
            })
        }
        BackboneArg::Bridge(cmd) => Ok(Built {
            session: Box::new(BridgeClient::spawn(
                cmd,
                spec,
                BridgeClient::DEFAULT_TIMEOUT,
            )?),
            oracle: None,
            inputs: vec![],
        }),
    }
}

#[derive(Serialize)]
struct RefineRecord<'a> {
    guidance: &'a GuidanceConfig,
    backbone: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<&'a OracleConfig>,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    loss: f64,
    mae: Option<f64>,
}

fn write_trace(dir: &Path, trace: &GuidanceTrace) -> CliResult<()> {
    let path = dir.join("trace.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    for e in &trace.entries {
        w.serialize(TraceRow {
            step: e.step,
            loss: e.loss,
            mae: e.mae,
        })
        .map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn refine_cmd(a: RefineArgs) -> CliResult<()> {
    let run_cfg: RunConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    let (obs, obs_files) = load_observation(&a.input)?;
    let shape = obs.shape();

    let mut g = run_cfg.guidance.clone();
    if let Some(v) = a.eta {
        g.eta = v;
    }
    if let Some(v) = a.steps {
        g.steps = v;
        if a.activation_step.is_none() {
            g.on_activation_step = g.on_activation_step.min(v);
        }
    }
    if let Some(v) = a.activation_step {
        g.on_activation_step = v;
    }
    if let Some(v) = a.lr_ls {
        g.lr_ls = v;
    }
    if let Some(v) = a.lr_ox {
        g.lr_ox = v;
    }
    if let Some(v) = a.lr_on {
        g.lr_on = v;
    }
    if let Some(c) = a.camera {
        g.camera = c.model(shape.height, shape.width);
    }
    if let Some(v) = a.seed {
        g.seed = v;
    }
    g.validate()
        .map_err(|e| config::validation("guidance.", e))?;

    let backbone = match (&a.backbone, &run_cfg.backbone) {
        (Some(b), _) => b.clone(),
        (None, Some(s)) => {
            let b: BackboneArg = s
                .parse()
                .map_err(|e| CliError::Config(format!("backbone: {e}")))?;
            match (b, &a.config) {
                (BackboneArg::Oracle(p), Some(cfg)) if p.is_relative() => {
                    BackboneArg::Oracle(cfg.parent().unwrap_or(Path::new(".")).join(p))
                }
                (b, _) => b,
            }
        }
        (None, None) => BackboneArg::Smoother { radius: 2 },
    };

    let gt_path = a.gt.clone().or_else(|| {
        let p = a.input.join("gt_normals.pfm");
        p.is_file().then_some(p)
    });
    let gt = gt_path.as_deref().map(load_normals).transpose()?;
    if let Some(n) = &gt {
        if (n.height(), n.width()) != (shape.height, shape.width) {
            return Err(CliError::Io(format!(
                "ground truth is {}x{} but the observation is {}x{}",
                n.height(),
                n.width(),
                shape.height,
                shape.width
            )));
        }
    }
    let mask = validity_mask(&obs);

    let mut built = build_backbone(&backbone, &obs.s0)?;
    create_dir(&a.out)?;
    let truth = gt.as_ref().map(|n| GroundTruth {
        normals: n,
        mask: &mask,
    });
    let result = refine(&obs, &mut built.session, &g, truth);
    drop(built.session);
    let r = match result {
        Ok(r) => r,
        Err(e) => {
            write_trace(&a.out, &e.trace)?;
            return Err(e.into());
        }
    };

    let out = &a.out;
    let mut outputs: Vec<String> = vec![];
    let mut put = |name: &str, img: &Image| -> CliResult<()> {
        save(out, name, img)?;
        outputs.push(name.to_string());
        Ok(())
    };
    put("normals.pfm", &r.normals.to_image())?;
    put("initial_normals.pfm", &r.initial.to_image())?;
    put("l_d.pfm", &r.split.l_d)?;
    put("l_s.pfm", &r.split.l_s)?;
    put("pred_s0.pfm", &r.predicted.s0)?;
    put("pred_s1.pfm", &r.predicted.s1)?;
    put("pred_s2.pfm", &r.predicted.s2)?;
    write_trace(out, &r.trace)?;
    outputs.push("trace.csv".into());
    render::normals_png(&r.normals, &out.join("normals.png"))?;
    outputs.push("normals.png".into());

    if let Some(gt) = &gt {
        let err = angular_error_map(&r.normals, gt, &mask)?;
        let initial = summarize(&angular_error_map(&r.initial, gt, &mask)?, &mask)?;
        let refined = summarize(&err, &mask)?;
        save(out, "error_map.pfm", &err)?;
        render::error_png(&err, &out.join("error_map.png"))?;
        write_json(
            &out.join("metrics.json"),
            &RefineMetrics { initial, refined },
        )?;
        outputs.extend(["error_map.pfm", "error_map.png", "metrics.json"].map(String::from));
    }

    let record = RefineRecord {
        guidance: &g,
        backbone: backbone.to_string(),
        oracle: built.oracle.as_ref(),
    };
    let mut m = Manifest::new("refine", &record)?.seed("guidance", g.seed);
    if let Some(o) = &built.oracle {
        m = m.seed("oracle", o.seed);
    }
    for f in &obs_files {
        m.input(f.file_name().unwrap().to_string_lossy(), f)?;
    }
    if let Some(p) = &gt_path {
        m.input("gt_normals", p)?;
    }
    if let Some(p) = &a.config {
        m.input("config", p)?;
    }
    for (role, p) in &built.inputs {
        m.input(role.clone(), p)?;
    }
    m.outputs = outputs;
    m.write(out)
}

#[derive(Serialize)]
struct RefineMetrics {
    initial: NormalMetrics,
    refined: NormalMetrics,
}

fn metrics(pred: &Path, gt: &Path, mask: Option<&Path>, out: &Path) -> CliResult<()> {
    let p = load_normals(pred)?;
    let g = load_normals(gt)?;
    let m = match mask {
        Some(path) => Mask::from_image(&load(path)?),
        None => Mask::filled(p.height(), p.width(), true),
    };
    let err = angular_error_map(&p, &g, &m)?;
    let summary = summarize(&err, &m)?;
    create_dir(out)?;
    save(out, "error_map.pfm", &err)?;
    render::error_png(&err, &out.join("error_map.png"))?;
    write_json(&out.join("metrics.json"), &summary)
}

fn stokes(input: &Path, out: &Path) -> CliResult<()> {
    let cap = load_capture(input)?;
    let s = stokes_from_capture(&cap)?;
    let pol = dolp_aolp(&s);
    create_dir(out)?;
    save_stokes(out, "", &s)?;
    save(out, "dolp.pfm", &pol.dolp)?;
    save(out, "aolp.pfm", &pol.aolp)?;
    save(out, "mask.pfm", &validity_mask(&s).to_image())
}

fn jacobian(input: &Path, arg: &BackboneArg, pixel: (usize, usize), out: &Path) -> CliResult<()> {
    let x = load(input)?;
    let mut built = build_backbone(arg, &x)?;
    let map = sensitivity_map(&mut built.session, &x, pixel)?;
    create_dir(out)?;
    save(out, "sensitivity.pfm", &map)?;
    render::image_png(&normalize_by_p99(&map), &out.join("sensitivity.png"))
}

fn oracle_factory<'a>(
    scene: &'a SyntheticScene,
    cfg: &'a SweepConfig,
) -> impl FnMut(&Image) -> polguide::Result<CorruptedOracle> + 'a {
    move |x: &Image| {
        Ok(CorruptedOracle::corrupting(
            &scene.gt,
            &cfg.oracle.corruption,
            x.clone(),
            cfg.oracle.gain,
            cfg.oracle.seed,
        ))
    }
}

#[derive(Serialize)]
struct ScoreRow {
    sigma: f64,
    mae_guided: f64,
    mae_unguided: f64,
    n_valid: usize,
}

impl ScoreRow {
    fn new(sigma: f64, s: &RunScore) -> Self {
        Self {
            sigma,
            mae_guided: s.mae_guided,
            mae_unguided: s.mae_unguided,
            n_valid: s.n_valid,
        }
    }
}

#[derive(Serialize)]
struct EtaCsv {
    eta: f64,
    mae_guided: f64,
    mae_unguided: f64,
    n_valid: usize,
}

#[derive(Serialize)]
struct MaterialCsv {
    preset: &'static str,
    mae_guided: f64,
    mae_unguided: f64,
    n_valid: usize,
}

fn sweep(kind: SweepKind) -> CliResult<()> {
    let (path, out) = match &kind {
        SweepKind::Noise { config, out, .. }
        | SweepKind::Eta { config, out, .. }
        | SweepKind::Ablation { config, out }
        | SweepKind::Material { config, out, .. } => (config.clone(), out.clone()),
    };
    let cfg: SweepConfig = config::load(&path)?;
    cfg.validate()?;
    create_dir(&out)?;
    let scene = || generate(&cfg.scene).map_err(|e| config::validation("scene.", e));
    let mut m = Manifest::new("sweep", &cfg)?
        .seed("oracle", cfg.oracle.seed)
        .seed("noise", cfg.noise_seed);
    m.input("config", &path)?;
    match kind {
        SweepKind::Noise { sigmas, .. } => {
            let s = scene()?;
            let rows = noise_sweep(
                &s,
                &mut oracle_factory(&s, &cfg),
                &cfg.guidance,
                &sigmas,
                cfg.noise_seed,
            )?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| ScoreRow::new(r.sigma, &r.score))
                .collect();
            write_csv(&out.join("noise.csv"), &table)?;
            let guided: Vec<f64> = rows.iter().map(|r| r.score.mae_guided).collect();
            let unguided: Vec<f64> = rows.iter().map(|r| r.score.mae_unguided).collect();
            render::line_plot(&sigmas, &[&unguided, &guided], &out.join("noise.png"))?;
            m.outputs = vec!["noise.csv".into(), "noise.png".into()];
        }
        SweepKind::Eta { etas, .. } => {
            for &eta in &etas {
                Material::new(eta).map_err(|e| config::validation("etas.", e))?;
            }
            let s = scene()?;
            let rows = eta_sweep(&s, &mut oracle_factory(&s, &cfg), &cfg.guidance, &etas)?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| EtaCsv {
                    eta: r.eta,
                    mae_guided: r.score.mae_guided,
                    mae_unguided: r.score.mae_unguided,
                    n_valid: r.score.n_valid,
                })
                .collect();
            write_csv(&out.join("eta.csv"), &table)?;
            let guided: Vec<f64> = rows.iter().map(|r| r.score.mae_guided).collect();
            let unguided: Vec<f64> = rows.iter().map(|r| r.score.mae_unguided).collect();
            render::line_plot(&etas, &[&unguided, &guided], &out.join("eta.png"))?;
            m.outputs = vec!["eta.csv".into(), "eta.png".into()];
        }
        SweepKind::Ablation { .. } => {
            let s = scene()?;
            let a = variant_ablation(&s, &mut oracle_factory(&s, &cfg), &cfg.guidance)?;
            #[derive(Serialize)]
            struct Row {
                variant: &'static str,
                mae: f64,
            }
            let rows = [
                Row {
                    variant: "none",
                    mae: a.none,
                },
                Row {
                    variant: "image_only",
                    mae: a.image_only,
                },
                Row {
                    variant: "joint",
                    mae: a.joint,
                },
            ];
            write_csv(&out.join("ablation.csv"), &rows)?;
            let groups: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.mae]).collect();
            render::bar_plot(&groups, &out.join("ablation.png"))?;
            m.outputs = vec!["ablation.csv".into(), "ablation.png".into()];
        }
        SweepKind::Material { size, .. } => {
            let mut rows = vec![];
            for preset in MaterialPreset::ALL {
                let s = generate(&preset.scene(size))?;
                let scenes = [(preset, s)];
                let sc = &scenes[0].1;
                rows.extend(material_sweep(
                    &scenes,
                    &mut oracle_factory(sc, &cfg),
                    &cfg.guidance,
                )?);
            }
            let table: Vec<_> = rows
                .iter()
                .map(|r| MaterialCsv {
                    preset: r.preset.name(),
                    mae_guided: r.score.mae_guided,
                    mae_unguided: r.score.mae_unguided,
                    n_valid: r.score.n_valid,
                })
                .collect();
            write_csv(&out.join("material.csv"), &table)?;
            let groups: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r.score.mae_unguided, r.score.mae_guided])
                .collect();
            render::bar_plot(&groups, &out.join("material.png"))?;
            m.outputs = vec!["material.csv".into(), "material.png".into()];
        }
    }
    m.write(&out)
}

fn bridge_serve(arg: &BackboneArg, shape: Shape, input: Option<&Path>) -> CliResult<()> {
    let x = match (arg, input) {
        (_, Some(p)) => load(p)?,
        (BackboneArg::Oracle(_), None) => {
            return Err(CliError::Config("oracle backbones need --input".into()))
        }
        (_, None) => Image::zeros(shape.height, shape.width, shape.channels),
    };
    x.expect_shape("input", shape)?;
    if matches!(arg, BackboneArg::Bridge(_)) {
        return Err(CliError::Config(
            "bridge-serve cannot forward to another bridge".into(),
        ));
    }
    let mut built = build_backbone(arg, &x)?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    bridge::serve(&mut built.session, stdin, stdout)?;
    Ok(())
}
