//! The scene bundle: a directory holding a JSON manifest, a config snapshot
//! and the arrays each pipeline stage produced. Every file the manifest names
//! carries a SHA-256 checksum that `load` verifies. The layout is described
//! in `docs/bundle-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ForgeConfig;
use crate::error::{Error, Result};
use crate::expansion::{DisparityFit, ExpansionStep};
use crate::gaussian::{
    Decoder, GaussianSplat, HexPlane, HexPlaneLevel, Scene4D, PLANES, SPLAT_FLOATS,
};
use crate::geometry::{
    read_depth_pfm, read_mask_png, read_ply, read_rgb_png, write_depth_pfm, write_mask_png,
    write_ply, write_rgb_png, CameraIntrinsics, CameraPose, ImagePlane, RegionMask,
};
use crate::pipeline::{Animation, Expansion};
use crate::trajectory::Trajectory;

pub const FORMAT: &str = "forge-bundle";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const LOCK: &str = ".forge.lock";

/// Camera pose as stored on disk: unit quaternion `(w, x, y, z)` and
/// translation of the world-to-camera map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<CameraPose> {
        let [w, x, y, z] = self.rotation;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n.is_finite() && (n - 1.0).abs() < 1e-6) {
            return Err(Error::contract(format!(
                "pose quaternion has norm {n}, expected 1"
            )));
        }
        Ok(CameraPose {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::from(self.translation),
        })
    }
}

/// Per-stage digests of the inputs and config sections a stage depends on.
/// A stage whose recorded digest matches the current one is complete.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub expansion: String,
    pub animation: String,
    pub canonical: String,
    pub scene: String,
}

fn section_digest(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_string().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn json(v: impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections serialize")
}

impl Fingerprints {
    pub fn compute(cfg: &ForgeConfig, input: &ImagePlane, plan: Option<&[CameraPose]>) -> Self {
        let mut h = Sha256::new();
        for px in &input.rgb {
            for c in px {
                h.update(c.to_le_bytes());
            }
        }
        let input_digest = hex::encode(h.finalize());
        let plan: Option<Vec<PoseRecord>> = plan.map(|p| p.iter().map(PoseRecord::from).collect());
        let expansion = section_digest(&[
            json(&input_digest),
            json(&plan),
            json(&cfg.camera),
            json(&cfg.expansion),
            json(&cfg.plugins),
            json(&cfg.synthetic),
            json(&cfg.world),
        ]);
        let animation = section_digest(&[
            json(&expansion),
            json(&cfg.animation),
            json(&cfg.sampler),
            json(&cfg.visibility),
        ]);
        let canonical = section_digest(&[json(&expansion), json(&cfg.canonical)]);
        let scene = section_digest(&[json(&animation), json(&canonical), json(&cfg.train)]);
        Self {
            expansion,
            animation,
            canonical,
            scene,
        }
    }
}

/// Everything a bundle can hold. Stages not yet run are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub config: ForgeConfig,
    pub fingerprints: Fingerprints,
    pub expansion: Option<Expansion>,
    pub animation: Option<Animation>,
    pub masks: Option<Vec<Vec<RegionMask>>>,
    pub canonical: Option<Vec<GaussianSplat>>,
    pub scene: Option<Scene4D>,
    /// Latest mid-training snapshot and its iteration.
    pub checkpoint: Option<(usize, Scene4D)>,
}

impl SceneBundle {
    pub fn new(config: ForgeConfig) -> Self {
        Self {
            config,
            fingerprints: Fingerprints::default(),
            expansion: None,
            animation: None,
            masks: None,
            canonical: None,
            scene: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: String,
    #[serde(default)]
    pub fingerprints: Fingerprints,
    #[serde(default)]
    pub expansion: Option<ExpansionRecord>,
    #[serde(default)]
    pub animation: Option<AnimationRecord>,
    #[serde(default)]
    pub canonical: Option<SplatsRecord>,
    #[serde(default)]
    pub scene: Option<SceneRecord>,
    #[serde(default)]
    pub checkpoint: Option<CheckpointRecord>,
    /// Relative path to lowercase hex SHA-256 of every file above.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub input: String,
    pub cloud: String,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pose: PoseRecord,
    pub source_pose: PoseRecord,
    pub new_points: [usize; 2],
    pub fit: DisparityFit,
    pub image: String,
    pub known_mask: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub source_step: usize,
    pub poses: Vec<PoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationRecord {
    pub trajectories: Vec<TrajectoryRecord>,
    /// `frames[k][j]`: frame `j` of video `k`.
    pub frames: Vec<Vec<String>>,
    #[serde(default)]
    pub masks: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatsRecord {
    pub count: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneRecord {
    pub levels: Vec<HexPlaneLevel>,
    pub features: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderRecord {
    pub input: usize,
    pub hidden: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsRecord {
    pub count: usize,
    pub dim: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub splats: SplatsRecord,
    pub hexplane: HexPlaneRecord,
    pub decoder: DecoderRecord,
    pub embeddings: EmbeddingsRecord,
    pub sh_degree: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub scene: SceneRecord,
}

/// Exclusive claim on a bundle directory, released on drop.
#[derive(Debug)]
pub struct BundleLock {
    path: PathBuf,
}

impl BundleLock {
    /// Fails with [`Error::Locked`] while another live process holds the
    /// lock. A lock left by a process that no longer exists is taken over.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        for _ in 0..2 {
            match fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if holder_alive(&path) {
                        return Err(Error::Locked(path));
                    }
                    fs::remove_file(&path)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::Locked(path))
    }
}

impl Drop for BundleLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn holder_alive(lock: &Path) -> bool {
    let Ok(text) = fs::read_to_string(lock) else {
        return true;
    };
    match text.trim().parse::<u32>() {
        Ok(pid) if Path::new("/proc").is_dir() => Path::new(&format!("/proc/{pid}")).exists(),
        _ => true,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `values` as little-endian `f32`.
pub fn write_f32s(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads exactly `expected` little-endian `f32` values.
pub fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {expected} floats, found {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn write_splats(path: &Path, splats: &[GaussianSplat]) -> Result<()> {
    write_f32s(path, splats.iter().flat_map(|s| s.to_array()))
}

pub fn read_splats(path: &Path, count: usize) -> Result<Vec<GaussianSplat>> {
    let flat = read_f32s(path, count * SPLAT_FLOATS)?;
    Ok(flat
        .chunks_exact(SPLAT_FLOATS)
        .map(|c| GaussianSplat::from_array(c.try_into().unwrap()))
        .collect())
}

fn hexplane_len(levels: &[HexPlaneLevel], features: usize) -> usize {
    let res = |l: &HexPlaneLevel, axis: usize| if axis == 3 { l.temporal } else { l.spatial };
    levels
        .iter()
        .map(|l| {
            PLANES
                .iter()
                .map(|&(a, b)| res(l, a) * res(l, b) * features)
                .sum::<usize>()
        })
        .sum()
}

/// Files written so far, relative path to digest.
struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn file(&mut self, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<String> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write(&path)?;
        self.files.insert(rel.to_string(), sha256_file(&path)?);
        Ok(rel.to_string())
    }

    fn scene(&mut self, prefix: &str, scene: &Scene4D) -> Result<SceneRecord> {
        let f = &scene.field;
        let e = &scene.embeddings;
        let dim = scene.embedding_dim();
        Ok(SceneRecord {
            splats: SplatsRecord {
                count: scene.splats.len(),
                path: self.file(&format!("{prefix}/splats.bin"), |p| {
                    write_splats(p, &scene.splats)
                })?,
            },
            hexplane: HexPlaneRecord {
                levels: f.levels.clone(),
                features: f.features,
                bounds_min: f.bounds_min,
                bounds_max: f.bounds_max,
                path: self.file(&format!("{prefix}/hexplane.bin"), |p| {
                    write_f32s(p, f.data.iter().copied())
                })?,
            },
            decoder: DecoderRecord {
                input: scene.decoder.input,
                hidden: scene.decoder.hidden,
                path: self.file(&format!("{prefix}/decoder.bin"), |p| {
                    write_f32s(p, scene.decoder.params.iter().copied())
                })?,
            },
            embeddings: EmbeddingsRecord {
                count: e.len(),
                dim,
                path: self.file(&format!("{prefix}/embeddings.bin"), |p| {
                    write_f32s(p, e.iter().flatten().copied())
                })?,
            },
            sh_degree: scene.sh_degree,
        })
    }
}

/// Writes `bundle` into `dir`. The manifest is written last, through a
/// temporary file, so a reader never sees a manifest naming missing files.
pub fn save(bundle: &SceneBundle, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut w = Writer {
        dir,
        files: BTreeMap::new(),
    };
    let config_text = bundle.config.to_toml()?;
    let config = w.file(CONFIG, |p| Ok(fs::write(p, &config_text)?))?;

    let expansion = match &bundle.expansion {
        None => None,
        Some(exp) => {
            let input = w.file("input.png", |p| write_rgb_png(p, &exp.input))?;
            let cloud = w.file("cloud.ply", |p| write_ply(p, &exp.cloud))?;
            let mut steps = Vec::new();
            for (i, s) in exp.steps.iter().enumerate() {
                let d = format!("expansion/step_{i:03}");
                steps.push(StepRecord {
                    pose: (&s.pose).into(),
                    source_pose: (&s.source_pose).into(),
                    new_points: [s.new_points.start, s.new_points.end],
                    fit: s.fit,
                    image: w.file(&format!("{d}/image.png"), |p| {
                        write_rgb_png(p, &s.blended_image)
                    })?,
                    known_mask: w.file(&format!("{d}/known_mask.png"), |p| {
                        write_mask_png(p, &s.known_mask)
                    })?,
                    depth: w.file(&format!("{d}/depth.pfm"), |p| {
                        write_depth_pfm(p, &s.aligned_depth)
                    })?,
                });
            }
            Some(ExpansionRecord {
                input,
                cloud,
                steps,
            })
        }
    };

    let animation = match &bundle.animation {
        None => None,
        Some(anim) => {
            let mut frames = Vec::new();
            for (k, video) in anim.videos.iter().enumerate() {
                let mut paths = Vec::new();
                for (j, img) in video.iter().enumerate() {
                    paths.push(
                        w.file(&format!("videos/video_{k:02}/frame_{j:03}.png"), |p| {
                            write_rgb_png(p, img)
                        })?,
                    );
                }
                frames.push(paths);
            }
            let masks = match &bundle.masks {
                None => None,
                Some(masks) => {
                    let mut all = Vec::new();
                    for (k, video) in masks.iter().enumerate() {
                        let mut paths = Vec::new();
                        for (j, m) in video.iter().enumerate() {
                            paths.push(
                                w.file(&format!("masks/video_{k:02}/frame_{j:03}.png"), |p| {
                                    write_mask_png(p, m)
                                })?,
                            );
                        }
                        all.push(paths);
                    }
                    Some(all)
                }
            };
            Some(AnimationRecord {
                trajectories: anim
                    .trajectories
                    .iter()
                    .map(|t| TrajectoryRecord {
                        source_step: t.source_step,
                        poses: t.poses.iter().map(PoseRecord::from).collect(),
                    })
                    .collect(),
                frames,
                masks,
            })
        }
    };

    let canonical = match &bundle.canonical {
        None => None,
        Some(splats) => Some(SplatsRecord {
            count: splats.len(),
            path: w.file("canonical/splats.bin", |p| write_splats(p, splats))?,
        }),
    };
    let scene = match &bundle.scene {
        None => None,
        Some(s) => Some(w.scene("scene", s)?),
    };
    let checkpoint = match &bundle.checkpoint {
        None => None,
        Some((iteration, s)) => Some(CheckpointRecord {
            iteration: *iteration,
            scene: w.scene("checkpoint", s)?,
        }),
    };

    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        config,
        fingerprints: bundle.fingerprints.clone(),
        expansion,
        animation,
        canonical,
        scene,
        checkpoint,
        files: w.files,
    };
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            &path,
            format!("not a {FORMAT} manifest: {}", manifest.format),
        ));
    }
    if manifest.version > VERSION {
        return Err(Error::format(
            &path,
            format!(
                "bundle version {} is newer than supported {VERSION}",
                manifest.version
            ),
        ));
    }
    Ok(manifest)
}

/// Checks every listed file against its recorded digest.
pub fn verify_checksums(dir: &Path, manifest: &Manifest) -> Result<()> {
    for (rel, digest) in &manifest.files {
        let path = dir.join(rel);
        if !path.is_file() || &sha256_file(&path)? != digest {
            return Err(Error::Checksum { path });
        }
    }
    Ok(())
}

struct Reader<'a> {
    dir: &'a Path,
    files: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    /// Path of a file the manifest lists; unlisted names are format errors.
    fn path(&self, rel: &str) -> Result<PathBuf> {
        if !self.files.contains_key(rel) {
            return Err(Error::format(
                self.dir,
                format!("{rel} has no checksum entry"),
            ));
        }
        Ok(self.dir.join(rel))
    }

    fn scene(&self, r: &SceneRecord) -> Result<Scene4D> {
        let h = &r.hexplane;
        let field = HexPlane {
            features: h.features,
            levels: h.levels.clone(),
            bounds_min: h.bounds_min,
            bounds_max: h.bounds_max,
            data: read_f32s(&self.path(&h.path)?, hexplane_len(&h.levels, h.features))?,
        };
        if r.decoder.input != field.output_dim() + r.embeddings.dim {
            return Err(Error::format(
                self.dir,
                "decoder input width disagrees with the field and embeddings",
            ));
        }
        let mut decoder = Decoder::new(r.decoder.input, r.decoder.hidden, 0);
        let n = decoder.params.len();
        decoder.params = read_f32s(&self.path(&r.decoder.path)?, n)?;
        let e = &r.embeddings;
        let flat = read_f32s(&self.path(&e.path)?, e.count * e.dim)?;
        Ok(Scene4D {
            splats: read_splats(&self.path(&r.splats.path)?, r.splats.count)?,
            field,
            decoder,
            embeddings: flat.chunks(e.dim.max(1)).map(<[f64]>::to_vec).collect(),
            sh_degree: r.sh_degree,
        })
    }
}

/// Loads a bundle after verifying every checksum. Manifest keys this
/// version does not know are ignored.
pub fn load(dir: &Path) -> Result<SceneBundle> {
    let manifest = read_manifest(dir)?;
    verify_checksums(dir, &manifest)?;
    let r = Reader {
        dir,
        files: &manifest.files,
    };
    let config = ForgeConfig::from_toml(&fs::read_to_string(r.path(&manifest.config)?)?)?;

    let expansion = match &manifest.expansion {
        None => None,
        Some(rec) => {
            let mut steps = Vec::new();
            for s in &rec.steps {
                steps.push(ExpansionStep {
                    pose: s.pose.to_pose()?,
                    source_pose: s.source_pose.to_pose()?,
                    known_mask: read_mask_png(&r.path(&s.known_mask)?)?,
                    blended_image: read_rgb_png(&r.path(&s.image)?)?,
                    aligned_depth: read_depth_pfm(&r.path(&s.depth)?)?,
                    new_points: s.new_points[0]..s.new_points[1],
                    fit: s.fit,
                });
            }
            Some(Expansion {
                input: read_rgb_png(&r.path(&rec.input)?)?,
                cloud: read_ply(&r.path(&rec.cloud)?)?,
                steps,
            })
        }
    };

    let (animation, masks) = match &manifest.animation {
        None => (None, None),
        Some(rec) => {
            let trajectories = rec
                .trajectories
                .iter()
                .map(|t| {
                    Ok(Trajectory {
                        poses: t
                            .poses
                            .iter()
                            .map(PoseRecord::to_pose)
                            .collect::<Result<_>>()?,
                        source_step: t.source_step,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let videos = rec
                .frames
                .iter()
                .map(|v| v.iter().map(|p| read_rgb_png(&r.path(p)?)).collect())
                .collect::<Result<Vec<Vec<_>>>>()?;
            let masks = match &rec.masks {
                None => None,
                Some(m) => Some(
                    m.iter()
                        .map(|v| v.iter().map(|p| read_mask_png(&r.path(p)?)).collect())
                        .collect::<Result<Vec<Vec<_>>>>()?,
                ),
            };
            (
                Some(Animation {
                    trajectories,
                    videos,
                }),
                masks,
            )
        }
    };

    let canonical = match &manifest.canonical {
        None => None,
        Some(s) => Some(read_splats(&r.path(&s.path)?, s.count)?),
    };
    let scene = match &manifest.scene {
        None => None,
        Some(s) => Some(r.scene(s)?),
    };
    let checkpoint = match &manifest.checkpoint {
        None => None,
        Some(c) => Some((c.iteration, r.scene(&c.scene)?)),
    };
    Ok(SceneBundle {
        config,
        fingerprints: manifest.fingerprints.clone(),
        expansion,
        animation,
        masks,
        canonical,
        scene,
        checkpoint,
    })
}

pub const PACK_FORMAT: &str = "forge-viewer-pack";
pub const PACK_MANIFEST: &str = "pack.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackMode {
    /// Deformed splats precomputed at each requested time.
    Baked,
    /// Canonical splats plus the field, decoder and global embedding, for
    /// deformation on the client.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BakedFrame {
    pub time: f64,
    pub splats: SplatsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format: String,
    pub version: u32,
    pub mode: PackMode,
    pub intrinsics: CameraIntrinsics,
    pub sh_degree: usize,
    #[serde(default)]
    pub frames: Vec<BakedFrame>,
    #[serde(default)]
    pub live: Option<SceneRecord>,
    pub files: BTreeMap<String, String>,
}

/// Writes a viewer pack for `scene` into `out`. Live packs carry a single
/// embedding, the global one.
pub fn export_viewer_pack(
    scene: &Scene4D,
    intr: &CameraIntrinsics,
    times: &[f64],
    mode: PackMode,
    out: &Path,
) -> Result<PackManifest> {
    if mode == PackMode::Baked && times.is_empty() {
        return Err(Error::contract("a baked pack needs at least one time"));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("time {t} is outside [0, 1]")));
    }
    fs::create_dir_all(out)?;
    let mut w = Writer {
        dir: out,
        files: BTreeMap::new(),
    };
    let global = scene.global_embedding();
    let mut frames = Vec::new();
    let mut live = None;
    match mode {
        PackMode::Baked => {
            for (i, &t) in times.iter().enumerate() {
                let splats = scene.deform_all(t, &global);
                frames.push(BakedFrame {
                    time: t,
                    splats: SplatsRecord {
                        count: splats.len(),
                        path: w.file(&format!("frames/frame_{i:04}.bin"), |p| {
                            write_splats(p, &splats)
                        })?,
                    },
                });
            }
        }
        PackMode::Live => {
            let mut single = scene.clone();
            single.embeddings = vec![global];
            live = Some(w.scene("live", &single)?);
        }
    }
    let manifest = PackManifest {
        format: PACK_FORMAT.to_string(),
        version: VERSION,
        mode,
        intrinsics: *intr,
        sh_degree: scene.sh_degree,
        frames,
        live,
        files: w.files,
    };
    fs::write(
        out.join(PACK_MANIFEST),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads a pack manifest and verifies its checksums.
pub fn read_viewer_pack(dir: &Path) -> Result<PackManifest> {
    let path = dir.join(PACK_MANIFEST);
    let m: PackManifest = serde_json::from_slice(&fs::read(&path)?)?;
    if m.format != PACK_FORMAT {
        return Err(Error::format(&path, format!("not a {PACK_FORMAT}")));
    }
    for (rel, digest) in &m.files {
        let p = dir.join(rel);
        if !p.is_file() || &sha256_file(&p)? != digest {
            return Err(Error::Checksum { path: p });
        }
    }
    Ok(m)
}

/// The deformation model stored in a live pack.
pub fn load_live_scene(dir: &Path, m: &PackManifest) -> Result<Scene4D> {
    let rec = m
        .live
        .as_ref()
        .ok_or_else(|| Error::format(dir.join(PACK_MANIFEST), "not a live pack"))?;
    Reader {
        dir,
        files: &m.files,
    }
    .scene(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline;

    fn tiny_bundle() -> SceneBundle {
        let cfg = ForgeConfig::layered(
            None,
            &[
                "camera.width=16",
                "camera.height=12",
                "camera.focal=14.0",
                "expansion.steps=1",
                "animation.videos=1",
                "animation.frames=3",
                "synthetic.frames=3",
                "synthetic.diffusion_steps=4",
                "sampler.tau_tr=3",
                "sampler.tau_refine=2",
                "sampler.end_transition_n=1",
                "canonical.iterations=3",
                "canonical.max_splats=20",
                "train.iterations=3",
                "train.levels=[{spatial=3, temporal=2}]",
                "train.features=2",
                "train.embedding_dim=3",
                "train.decoder_hidden=4",
            ]
            .map(String::from),
        )
        .unwrap();
        let (plugins, _) = pipeline::connect_plugins(&cfg).unwrap();
        let input = pipeline::synthetic_input(&cfg).unwrap();
        let out = pipeline::run(&input, &cfg, &plugins).unwrap();
        let mut b = SceneBundle::new(cfg.clone());
        b.fingerprints = Fingerprints::compute(&cfg, &input, None);
        b.expansion = Some(out.expansion);
        b.animation = Some(out.animation);
        b.masks = Some(out.masks);
        b.canonical = Some(out.canonical);
        b.checkpoint = Some((2, out.scene.clone()));
        b.scene = Some(out.scene);
        b
    }

    #[test]
    fn load_after_save_is_identity_once_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save(&tiny_bundle(), &a).unwrap();
        let first = load(&a).unwrap();
        let m = save(&first, &b).unwrap();
        let second = load(&b).unwrap();
        assert_eq!(first, second);
        assert_eq!(m.files, read_manifest(&a).unwrap().files);
    }

    #[test]
    fn corrupted_file_fails_its_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save(&tiny_bundle(), dir.path()).unwrap();
        let victim = dir.path().join("scene/decoder.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] ^= 1;
        fs::write(&victim, bytes).unwrap();
        match load(dir.path()) {
            Err(Error::Checksum { path }) => assert_eq!(path, victim),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_manifest_keys_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        save(&tiny_bundle(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v["added_later"] = serde_json::json!({"x": 1});
        v["scene"]["compression"] = serde_json::json!("none");
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        load(dir.path()).unwrap();
    }

    #[test]
    fn lock_is_exclusive_and_stale_locks_are_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        let lock = BundleLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            BundleLock::acquire(dir.path()),
            Err(Error::Locked(_))
        ));
        drop(lock);
        fs::write(dir.path().join(LOCK), "4294967295\n").unwrap();
        BundleLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn viewer_packs() {
        let b = tiny_bundle();
        let intr = b.config.camera.intrinsics().unwrap();
        let mut scene = b.scene.unwrap();
        let dir = tempfile::tempdir().unwrap();

        let times = [0.0, 0.4, 1.0];
        let baked = export_viewer_pack(&scene, &intr, &times, PackMode::Baked, dir.path()).unwrap();
        assert_eq!(read_viewer_pack(dir.path()).unwrap(), baked);
        let g = scene.global_embedding();
        for f in &baked.frames {
            let got = read_splats(&dir.path().join(&f.splats.path), f.splats.count).unwrap();
            let want = scene.deform_all(f.time, &g);
            for (a, b) in got.iter().zip(&want) {
                for (x, y) in a.to_array().iter().zip(b.to_array()) {
                    assert_eq!(*x, y as f32 as f64);
                }
            }
        }

        let head = scene.decoder.head_range();
        scene.decoder.params[head].iter_mut().for_each(|v| *v = 0.0);
        let zero = tempfile::tempdir().unwrap();
        let m = export_viewer_pack(&scene, &intr, &[0.0], PackMode::Baked, zero.path()).unwrap();
        let f = &m.frames[0];
        let got = read_splats(&zero.path().join(&f.splats.path), f.splats.count).unwrap();
        let canon: Vec<_> = scene
            .splats
            .iter()
            .map(|s| s.to_array().map(|v| v as f32 as f64))
            .collect();
        assert_eq!(got.iter().map(|s| s.to_array()).collect::<Vec<_>>(), canon);

        let live = tempfile::tempdir().unwrap();
        let m = export_viewer_pack(&scene, &intr, &[], PackMode::Live, live.path()).unwrap();
        let back = load_live_scene(live.path(), &read_viewer_pack(live.path()).unwrap()).unwrap();
        assert_eq!(back.embeddings.len(), 1);
        assert_eq!(m.mode, PackMode::Live);
        assert!(export_viewer_pack(&scene, &intr, &[], PackMode::Baked, live.path()).is_err());
    }

    #[test]
    fn fingerprints_track_their_sections() {
        let cfg = ForgeConfig::default();
        let img = ImagePlane::new(4, 4);
        let a = Fingerprints::compute(&cfg, &img, None);
        let mut c2 = cfg.clone();
        c2.train.iterations += 1;
        let b = Fingerprints::compute(&c2, &img, None);
        assert_eq!(a.expansion, b.expansion);
        assert_eq!(a.animation, b.animation);
        assert_eq!(a.canonical, b.canonical);
        assert_ne!(a.scene, b.scene);
        let mut c3 = cfg.clone();
        c3.expansion.prompt = "x".into();
        let c = Fingerprints::compute(&c3, &img, None);
        assert!(a.expansion != c.expansion && a.scene != c.scene);
    }
}
