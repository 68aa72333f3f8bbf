use std::fmt;
use std::fs;
use std::os::unix::net::UnixListener;
use std::path::Path;

use forge_core::bundle::{self, BundleLock, Fingerprints, PackMode, PoseRecord, SceneBundle};
use forge_core::config::ForgeConfig;
use forge_core::error::Error;
use forge_core::expansion::orbit_plan;
use forge_core::geometry::{read_rgb_png, write_rgb_png, CameraPose};
use forge_core::pipeline;
use forge_core::plugins::remote;
use forge_core::plugins::synthetic::synthetic_manifest;
use forge_core::plugins::Plugins;
use forge_verify::{suites, CriterionReport};
use serde::Deserialize;

use crate::{ConfigArgs, ExportMode};

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Verification(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Plugin { .. } | Error::Wire(_)) => 3,
            Failure::Core(Error::Checksum { .. }) | Failure::Verification(_) => 4,
            Failure::Core(_) => 1,
        }
    }
}

type Result<T = ()> = std::result::Result<T, Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

/// Defaults, then `base` (a bundle snapshot) unless a file is given, then
/// `--set` overrides.
fn resolve_config(args: &ConfigArgs, base: Option<&ForgeConfig>) -> Result<ForgeConfig> {
    let text = match (&args.config, base) {
        (Some(path), _) => Some(
            fs::read_to_string(path)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?,
        ),
        (None, Some(cfg)) => Some(cfg.to_toml()?),
        (None, None) => None,
    };
    Ok(ForgeConfig::layered(text.as_deref(), &args.set)?)
}

fn read_poses<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

/// Fingerprints for `cfg`, failing when the stored expansion no longer matches it.
fn fresh_fingerprints(b: &SceneBundle, cfg: &ForgeConfig) -> Result<Fingerprints> {
    let exp = b
        .expansion
        .as_ref()
        .ok_or_else(|| config_error("bundle has no expansion; run `forge expand` first"))?;
    let plan: Vec<CameraPose> = exp.steps.iter().map(|s| s.pose).collect();
    let fp = Fingerprints::compute(cfg, &exp.input, Some(&plan));
    if fp.expansion != b.fingerprints.expansion {
        return Err(config_error(
            "expansion settings changed since the bundle was expanded; re-run `forge expand`",
        ));
    }
    Ok(fp)
}

pub fn synth_input(out: &Path, args: &ConfigArgs) -> Result {
    let cfg = resolve_config(args, None)?;
    write_rgb_png(out, &pipeline::synthetic_input(&cfg)?)?;
    Ok(())
}

pub fn expand(
    input: &Path,
    prompt: Option<String>,
    plan: Option<&Path>,
    out: &Path,
    args: &ConfigArgs,
) -> Result {
    fs::create_dir_all(out)?;
    let _lock = BundleLock::acquire(out)?;
    let existing = if out.join(bundle::MANIFEST).exists() {
        Some(bundle::load(out)?)
    } else {
        None
    };
    let mut cfg = resolve_config(args, existing.as_ref().map(|b| &b.config))?;
    if let Some(p) = prompt {
        cfg.expansion.prompt = p;
    }
    let image = read_rgb_png(input)?;
    let plan: Vec<CameraPose> = match plan {
        Some(path) => read_poses::<PoseRecord>(path)?
            .iter()
            .map(PoseRecord::to_pose)
            .collect::<forge_core::Result<_>>()
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?,
        None => orbit_plan(cfg.expansion.steps, cfg.expansion.max_yaw),
    };
    let fp = Fingerprints::compute(&cfg, &image, Some(&plan));

    let mut b = existing.unwrap_or_else(|| SceneBundle::new(cfg.clone()));
    if b.expansion.is_some() && b.fingerprints.expansion == fp.expansion {
        log::info!("expansion up to date");
        return snapshot_config(&mut b, cfg, out);
    }
    let (plugins, _) = pipeline::connect_plugins(&cfg)?;
    let exp = pipeline::expand(&image, Some(&plan), &cfg, &plugins)?;
    log::info!(
        "expanded to {} points over {} steps",
        exp.cloud.len(),
        exp.steps.len()
    );
    b.expansion = Some(exp);
    b.fingerprints.expansion = fp.expansion;
    b.config = cfg;
    bundle::save(&b, out)?;
    Ok(())
}

/// Saves only when the effective config differs from the snapshot.
fn snapshot_config(b: &mut SceneBundle, cfg: ForgeConfig, dir: &Path) -> Result {
    if b.config != cfg {
        b.config = cfg;
        bundle::save(b, dir)?;
    }
    Ok(())
}

pub fn animate(dir: &Path, args: &ConfigArgs) -> Result {
    let _lock = BundleLock::acquire(dir)?;
    let mut b = bundle::load(dir)?;
    let cfg = resolve_config(args, Some(&b.config))?;
    let fp = fresh_fingerprints(&b, &cfg)?;
    if b.animation.is_some() && b.masks.is_some() && b.fingerprints.animation == fp.animation {
        log::info!("animation up to date");
        return snapshot_config(&mut b, cfg, dir);
    }
    let (plugins, _) = pipeline::connect_plugins(&cfg)?;
    let exp = b.expansion.as_ref().expect("checked by fresh_fingerprints");
    let anim = pipeline::animate(exp, &cfg, &plugins)?;
    let masks = pipeline::masks(exp, &anim, &cfg)?;
    log::info!("animated {} videos", anim.videos.len());
    b.animation = Some(anim);
    b.masks = Some(masks);
    b.fingerprints.animation = fp.animation;
    b.config = cfg;
    bundle::save(&b, dir)?;
    Ok(())
}

pub fn train(
    dir: &Path,
    iters_canonical: Option<usize>,
    iters_4d: Option<usize>,
    args: &ConfigArgs,
) -> Result {
    let _lock = BundleLock::acquire(dir)?;
    let mut b = bundle::load(dir)?;
    let mut cfg = resolve_config(args, Some(&b.config))?;
    if let Some(n) = iters_canonical {
        cfg.canonical.iterations = n;
    }
    if let Some(n) = iters_4d {
        cfg.train.iterations = n;
    }
    let fp = fresh_fingerprints(&b, &cfg)?;
    if b.animation.is_none() || b.masks.is_none() || b.fingerprints.animation != fp.animation {
        return Err(config_error(
            "animation is missing or out of date; run `forge animate` first",
        ));
    }
    let canonical_done = b.canonical.is_some() && b.fingerprints.canonical == fp.canonical;
    let scene_done = b.scene.is_some() && b.fingerprints.scene == fp.scene;
    if canonical_done && scene_done {
        log::info!("training up to date");
        return snapshot_config(&mut b, cfg, dir);
    }
    b.config = cfg.clone();

    let exp = b.expansion.clone().expect("checked by fresh_fingerprints");
    let views = pipeline::canonical_supervision(&exp, &cfg)?;
    if !canonical_done {
        let splats = pipeline::fit_canonical(&exp, &views, &cfg)?;
        log::info!("canonical stage: {} splats", splats.len());
        b.canonical = Some(splats);
        b.fingerprints.canonical = fp.canonical.clone();
        bundle::save(&b, dir)?;
    }

    let anim = b.animation.clone().expect("checked above");
    let masks = b.masks.clone().expect("checked above");
    let videos = pipeline::video_set(&exp, &anim, &masks, &cfg)?;
    let canonical = b.canonical.clone().expect("set above");
    let scene = pipeline::fit_4d(canonical, &videos, &views, &cfg, &mut |it, scene| {
        log::info!("checkpoint at iteration {it}");
        b.checkpoint = Some((it, scene.clone()));
        bundle::save(&b, dir)?;
        Ok(())
    })?;
    b.scene = Some(scene);
    b.fingerprints.scene = fp.scene;
    bundle::save(&b, dir)?;
    Ok(())
}

fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let b = bundle::load(dir)?;
    if b.scene.is_none() {
        return Err(config_error(
            "bundle has no trained scene; run `forge train` first",
        ));
    }
    Ok(b)
}

pub fn export(dir: &Path, out: &Path, mode: ExportMode, times: &[f64]) -> Result {
    let b = load_scene(dir)?;
    let scene = b.scene.as_ref().expect("checked by load_scene");
    let intr = b.config.camera.intrinsics()?;
    let mode = match mode {
        ExportMode::Baked => PackMode::Baked,
        ExportMode::Live => PackMode::Live,
    };
    let times: Vec<f64> = if times.is_empty() {
        let n = b.config.animation.frames;
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    } else {
        times.to_vec()
    };
    if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(config_error("export times must lie in [0, 1]"));
    }
    let m = bundle::export_viewer_pack(scene, &intr, &times, mode, out)?;
    log::info!("wrote {} files to {}", m.files.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct PathPose {
    #[serde(flatten)]
    pose: PoseRecord,
    time: Option<f64>,
}

pub fn render_path(dir: &Path, poses: &Path, out: &Path) -> Result {
    let b = load_scene(dir)?;
    let scene = b.scene.as_ref().expect("checked by load_scene");
    let intr = b.config.camera.intrinsics()?;
    let path = read_poses::<PathPose>(poses)?;
    let e = scene.global_embedding();
    fs::create_dir_all(out)?;
    let n = path.len();
    for (i, p) in path.iter().enumerate() {
        let pose = p
            .pose
            .to_pose()
            .map_err(|e| config_error(format!("{} pose {i}: {e}", poses.display())))?;
        let t = p.time.unwrap_or(if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.0
        });
        let img = scene.render(&intr, &pose, t, &e).image;
        write_rgb_png(&out.join(format!("frame_{i:04}.png")), &img)?;
    }
    log::info!("rendered {n} frames to {}", out.display());
    Ok(())
}

pub fn verify(dir: Option<&Path>, e2e: bool, seed: u64) -> Result {
    let mut reports: Vec<CriterionReport> = vec![
        suites::render_suite(500, seed.wrapping_add(1)),
        suites::gradient_suite(200, seed.wrapping_add(2)),
        suites::alignment_suite(),
        suites::poisson_suite(),
        suites::sampler_suite(seed.wrapping_add(3)),
        suites::visibility_suite(seed.wrapping_add(4)),
        suites::constants_suite(),
    ];
    if e2e {
        reports.push(suites::e2e_suite(seed));
    }
    for r in &reports {
        println!("{}", r.line());
    }
    let mut failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.clone())
        .collect();
    if let Some(dir) = dir {
        match bundle::load(dir) {
            Ok(_) => println!("PASS bundle {}: checksums and decoding", dir.display()),
            Err(e) => {
                println!("FAIL bundle {}: {e}", dir.display());
                failed.push(format!("bundle {}", dir.display()));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join(", ")))
    }
}

pub fn plugin_serve(socket: &Path, args: &ConfigArgs) -> Result {
    let cfg = resolve_config(args, None)?;
    let plugins = Plugins::synthetic(cfg.world.clone(), &cfg.synthetic);
    let manifest = synthetic_manifest(&cfg.synthetic, cfg.camera.width, cfg.camera.height);
    let listener = UnixListener::bind(socket)?;
    log::info!("serving synthetic plugins on {}", socket.display());
    remote::serve(listener, plugins, manifest)?;
    Ok(())
}
