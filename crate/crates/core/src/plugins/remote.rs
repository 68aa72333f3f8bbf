//! Plugins reached over a local Unix socket, plus the matching server loop
//! that exposes any in-process [`Plugins`] set on such a socket.

use std::io::ErrorKind;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{self, Message, Tensor};
use super::{
    ConditioningPayload, Denoiser, DepthEstimator, FrameInterpolator, InpaintRequest, Inpainter,
    LatentCodec, LatentVideo, NoiseSchedule, PluginManifest, Plugins, ViewHint,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane};

fn remote_error(message: impl Into<String>) -> Error {
    Error::Plugin {
        stage: "remote".into(),
        message: message.into(),
    }
}

/// One socket shared by every capability client. Requests are serialized, so
/// a single-flight server is never sent overlapping calls.
pub struct Connection {
    stream: Mutex<UnixStream>,
}

impl Connection {
    pub fn open(path: &Path) -> Result<Self> {
        let stream = UnixStream::connect(path)
            .map_err(|e| remote_error(format!("connect {}: {e}", path.display())))?;
        Ok(Self {
            stream: Mutex::new(stream),
        })
    }

    pub fn call(&self, request: &Message) -> Result<Message> {
        let mut stream = self.stream.lock().unwrap();
        wire::write_message(&mut *stream, request).map_err(|e| remote_error(e.to_string()))?;
        let reply = wire::read_message(&mut *stream).map_err(|e| remote_error(e.to_string()))?;
        if reply.kind == wire::ERROR {
            let msg = reply.meta["message"]
                .as_str()
                .unwrap_or("unspecified error");
            return Err(remote_error(msg));
        }
        if reply.kind != request.kind | wire::REPLY {
            return Err(remote_error(format!(
                "reply kind {:#x} to request {:#x}",
                reply.kind, request.kind
            )));
        }
        Ok(reply)
    }

    pub fn manifest(&self) -> Result<PluginManifest> {
        let reply = self.call(&Message::new(wire::MANIFEST, json!({}), vec![]))?;
        serde_json::from_value(reply.meta).map_err(|e| remote_error(format!("bad manifest: {e}")))
    }
}

/// Connects to a plugin server and wraps every capability it serves.
pub fn connect(path: &Path) -> Result<(Plugins, PluginManifest)> {
    let conn = Arc::new(Connection::open(path)?);
    let manifest = conn.manifest()?;
    let plugins = Plugins {
        inpainter: Arc::new(RemoteInpainter(conn.clone())),
        depth: Arc::new(RemoteDepth(conn.clone())),
        denoiser: Arc::new(RemoteDenoiser {
            conn: conn.clone(),
            schedule: manifest.schedule.clone(),
        }),
        codec: Arc::new(RemoteCodec(conn.clone())),
        interpolator: Arc::new(RemoteInterpolator(conn)),
    };
    Ok((plugins, manifest))
}

pub struct RemoteInpainter(Arc<Connection>);

impl Inpainter for RemoteInpainter {
    fn fill(&self, req: &InpaintRequest, seed: u64) -> Result<ImagePlane> {
        req.validate()?;
        let msg = Message::new(
            wire::INPAINT,
            json!({ "prompt": req.prompt, "seed": seed, "view": req.view }),
            vec![
                Tensor::from_image(&req.image),
                Tensor::from_mask(&req.inpaint_mask),
            ],
        );
        self.0.call(&msg)?.tensor(0)?.to_image()
    }
}

pub struct RemoteDepth(Arc<Connection>);

impl DepthEstimator for RemoteDepth {
    fn estimate(&self, image: &ImagePlane, view: Option<&ViewHint>) -> Result<DepthMap> {
        let msg = Message::new(
            wire::DEPTH,
            json!({ "view": view }),
            vec![Tensor::from_image(image)],
        );
        self.0.call(&msg)?.tensor(0)?.to_depth()
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiseMeta {
    step: usize,
    seed: u64,
    schedule_step: usize,
    poses: Vec<CameraPose>,
    times: Vec<f64>,
    intrinsics: Option<CameraIntrinsics>,
    motion_scalars: Vec<f64>,
}

pub struct RemoteDenoiser {
    conn: Arc<Connection>,
    schedule: NoiseSchedule,
}

impl Denoiser for RemoteDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn step(
        &self,
        z: &LatentVideo,
        step: usize,
        condition: &ConditioningPayload,
        seed: u64,
    ) -> Result<LatentVideo> {
        super::check_step(step, self.steps())?;
        let meta = DenoiseMeta {
            step,
            seed,
            schedule_step: z.schedule_step,
            poses: condition.poses.clone(),
            times: condition.times.clone(),
            intrinsics: condition.intrinsics,
            motion_scalars: condition.motion_scalars.clone(),
        };
        let msg = Message::new(
            wire::DENOISE,
            serde_json::to_value(meta)?,
            vec![Tensor::from_latent(z), Tensor::from_image(&condition.image)],
        );
        self.conn.call(&msg)?.tensor(0)?.to_latent(step - 1)
    }
}

pub struct RemoteCodec(Arc<Connection>);

impl LatentCodec for RemoteCodec {
    fn encode(&self, video: &[ImagePlane]) -> Result<LatentVideo> {
        let msg = Message::new(wire::ENCODE, json!({}), vec![Tensor::from_video(video)]);
        self.0.call(&msg)?.tensor(0)?.to_latent(0)
    }

    fn decode(&self, z: &LatentVideo) -> Result<Vec<ImagePlane>> {
        let msg = Message::new(wire::DECODE, json!({}), vec![Tensor::from_latent(z)]);
        self.0.call(&msg)?.tensor(0)?.to_video()
    }
}

pub struct RemoteInterpolator(Arc<Connection>);

impl FrameInterpolator for RemoteInterpolator {
    fn interpolate(&self, a: &ImagePlane, b: &ImagePlane, count: usize) -> Result<Vec<ImagePlane>> {
        let msg = Message::new(
            wire::INTERPOLATE,
            json!({ "count": count }),
            vec![Tensor::from_image(a), Tensor::from_image(b)],
        );
        let frames = self.0.call(&msg)?.tensor(0)?.to_video()?;
        if frames.len() != count {
            return Err(remote_error(format!(
                "asked for {count} frames, got {}",
                frames.len()
            )));
        }
        Ok(frames)
    }
}

fn field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    serde_json::from_value(meta.get(key).cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Wire(format!("field {key}: {e}")))
}

/// Answers one request with `plugins`.
pub fn handle(plugins: &Plugins, manifest: &PluginManifest, req: &Message) -> Result<Message> {
    let reply =
        |meta: Value, tensors: Vec<Tensor>| Message::new(req.kind | wire::REPLY, meta, tensors);
    match req.kind {
        wire::MANIFEST => Ok(reply(serde_json::to_value(manifest)?, vec![])),
        wire::INPAINT => {
            let view: Option<ViewHint> = field(&req.meta, "view")?;
            let request = InpaintRequest {
                image: req.tensor(0)?.to_image()?,
                inpaint_mask: req.tensor(1)?.to_mask()?,
                prompt: field(&req.meta, "prompt")?,
                view,
            };
            let out = plugins
                .inpainter
                .fill(&request, field(&req.meta, "seed")?)?;
            Ok(reply(json!({}), vec![Tensor::from_image(&out)]))
        }
        wire::DEPTH => {
            let view: Option<ViewHint> = field(&req.meta, "view")?;
            let out = plugins
                .depth
                .estimate(&req.tensor(0)?.to_image()?, view.as_ref())?;
            Ok(reply(json!({}), vec![Tensor::from_depth(&out)]))
        }
        wire::DENOISE => {
            let meta: DenoiseMeta = serde_json::from_value(req.meta.clone())?;
            let z = req.tensor(0)?.to_latent(meta.schedule_step)?;
            let cond = ConditioningPayload {
                image: req.tensor(1)?.to_image()?,
                poses: meta.poses,
                times: meta.times,
                intrinsics: meta.intrinsics,
                motion_scalars: meta.motion_scalars,
            };
            let out = plugins.denoiser.step(&z, meta.step, &cond, meta.seed)?;
            Ok(reply(json!({}), vec![Tensor::from_latent(&out)]))
        }
        wire::ENCODE => {
            let out = plugins.codec.encode(&req.tensor(0)?.to_video()?)?;
            Ok(reply(json!({}), vec![Tensor::from_latent(&out)]))
        }
        wire::DECODE => {
            let out = plugins.codec.decode(&req.tensor(0)?.to_latent(0)?)?;
            Ok(reply(json!({}), vec![Tensor::from_video(&out)]))
        }
        wire::INTERPOLATE => {
            let count: usize = field(&req.meta, "count")?;
            let a = req.tensor(0)?.to_image()?;
            let b = req.tensor(1)?.to_image()?;
            let out = plugins.interpolator.interpolate(&a, &b, count)?;
            Ok(reply(json!({}), vec![Tensor::from_video(&out)]))
        }
        other => Err(Error::Wire(format!("unknown message kind {other:#x}"))),
    }
}

/// Serves requests on one connection until the peer hangs up.
pub fn serve_connection(
    mut stream: UnixStream,
    plugins: &Plugins,
    manifest: &PluginManifest,
) -> Result<()> {
    loop {
        let req = match wire::read_message(&mut stream) {
            Ok(m) => m,
            Err(Error::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply =
            handle(plugins, manifest, &req).unwrap_or_else(|e| Message::error(&e.to_string()));
        wire::write_message(&mut stream, &reply)?;
    }
}

/// Accepts connections forever, one thread per client.
pub fn serve(listener: UnixListener, plugins: Plugins, manifest: PluginManifest) -> Result<()> {
    let shared = Arc::new((plugins, manifest));
    for stream in listener.incoming() {
        let stream = stream?;
        let shared = shared.clone();
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &shared.0, &shared.1) {
                log::warn!("plugin connection closed: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RegionMask;
    use crate::plugins::synthetic::{synthetic_manifest, SyntheticSettings};
    use crate::world::SyntheticWorld;

    fn start() -> (tempfile::TempDir, Plugins, Plugins, PluginManifest) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plugins.sock");
        let settings = SyntheticSettings {
            disparity_warp: [2.0, 0.1],
            ..Default::default()
        };
        let local = Plugins::synthetic(SyntheticWorld::default(), &settings);
        let listener = UnixListener::bind(&path).unwrap();
        let served = local.clone();
        let manifest = synthetic_manifest(&settings, 12, 10);
        std::thread::spawn(move || serve(listener, served, synthetic_manifest(&settings, 12, 10)));
        let (remote, got) = connect(&path).unwrap();
        assert_eq!(got, manifest);
        (dir, local, remote, manifest)
    }

    fn view() -> ViewHint {
        ViewHint {
            intrinsics: CameraIntrinsics::centered(10.0, 12, 10).unwrap(),
            pose: CameraPose::identity(),
        }
    }

    #[test]
    fn remote_depth_matches_local_to_f32() {
        let (_dir, local, remote, _) = start();
        let img = ImagePlane::filled(12, 10, [0.5; 3]);
        let a = local.depth.estimate(&img, Some(&view())).unwrap();
        let b = remote.depth.estimate(&img, Some(&view())).unwrap();
        assert_eq!(a.valid, b.valid);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6 * x);
        }
    }

    #[test]
    fn remote_codec_and_interpolator_round_trip() {
        let (_dir, _local, remote, _) = start();
        let frames: Vec<_> = (0..3)
            .map(|j| {
                ImagePlane::from_fn(12, 10, |x, y| {
                    [x as f64 / 16.0, y as f64 / 16.0, j as f64 / 4.0]
                })
            })
            .collect();
        let z = remote.codec.encode(&frames).unwrap();
        assert_eq!((z.frames, z.channels, z.height, z.width), (3, 3, 10, 12));
        assert_eq!(remote.codec.decode(&z).unwrap(), frames);
        let mid = remote
            .interpolator
            .interpolate(&frames[0], &frames[2], 1)
            .unwrap();
        assert_eq!(mid[0], frames[1]);
        assert!(remote
            .interpolator
            .interpolate(&frames[0], &frames[2], 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn remote_inpaint_and_denoise_errors_propagate() {
        let (_dir, _local, remote, manifest) = start();
        let img = ImagePlane::filled(12, 10, [0.25; 3]);
        let req = InpaintRequest {
            image: img.clone(),
            inpaint_mask: RegionMask::zeros(12, 10),
            prompt: "a meadow".into(),
            view: None,
        };
        assert_eq!(remote.inpainter.fill(&req, 3).unwrap(), img);
        let z = LatentVideo::zeros(2, 3, 10, 12);
        let cond = ConditioningPayload {
            image: img,
            poses: vec![CameraPose::identity(); 2],
            times: vec![0.0, 1.0],
            intrinsics: None,
            motion_scalars: vec![],
        };
        // Missing intrinsics fail inside the served stand-in.
        let err = remote.denoiser.step(&z, 1, &cond, 0).unwrap_err();
        assert!(matches!(err, Error::Plugin { .. }), "{err}");
        assert_eq!(remote.denoiser.steps(), manifest.diffusion_steps);
        assert!(matches!(
            remote.denoiser.step(&z, 0, &cond, 0),
            Err(Error::ScheduleOutOfRange { .. })
        ));
    }
}
