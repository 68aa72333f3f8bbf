//! Deterministic stand-ins for the generative models, all sampling one
//! [`SyntheticWorld`].

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    check_step, ConditioningPayload, Denoiser, DepthEstimator, FrameInterpolator, InpaintRequest,
    Inpainter, LatentCodec, LatentDims, LatentVideo, NoiseSchedule, PluginManifest, Plugins,
    ViewHint,
};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImagePlane};
use crate::world::SyntheticWorld;

fn synthetic_error(msg: impl Into<String>) -> Error {
    Error::Plugin {
        stage: "synthetic".into(),
        message: msg.into(),
    }
}

/// Knobs of the synthetic stand-ins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSettings {
    /// Constant color offset added to inpainted pixels, mimicking the VAE
    /// color shift of real inpainting models.
    pub inpaint_color_shift: [f64; 3],
    /// Depth estimates report disparity `a / z + b` instead of `1 / z`.
    pub disparity_warp: [f64; 2],
    /// Box-blur radius applied on decode; 0 makes the codec lossless.
    pub codec_blur_radius: usize,
    pub diffusion_steps: usize,
    pub frames: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            inpaint_color_shift: [0.0; 3],
            disparity_warp: [1.0, 0.0],
            codec_blur_radius: 0,
            diffusion_steps: 25,
            frames: 25,
        }
    }
}

/// Fills masked pixels with the world texture seen from the request's view.
/// Any nonempty request drifts every pixel by `color_shift`, the way a real
/// inpainting autoencoder shifts colors outside the hole too.
pub struct SyntheticInpainter {
    world: Arc<SyntheticWorld>,
    color_shift: [f64; 3],
}

impl SyntheticInpainter {
    pub fn new(world: Arc<SyntheticWorld>, color_shift: [f64; 3]) -> Self {
        Self { world, color_shift }
    }
}

impl Inpainter for SyntheticInpainter {
    fn fill(&self, req: &InpaintRequest, _seed: u64) -> Result<ImagePlane> {
        req.validate()?;
        let mut out = req.image.clone();
        if !req.inpaint_mask.weights.iter().any(|w| *w > 0.5) {
            return Ok(out);
        }
        let view = req
            .view
            .ok_or_else(|| synthetic_error("synthetic inpainter needs a view hint"))?;
        let (truth, _) = self.world.render_static(&view.intrinsics, &view.pose);
        for i in 0..out.rgb.len() {
            let mut c = if req.inpaint_mask.contains(i) {
                truth.rgb[i]
            } else {
                out.rgb[i]
            };
            for ch in 0..3 {
                c[ch] = (c[ch] + self.color_shift[ch]).clamp(0.0, 1.0);
            }
            out.rgb[i] = c;
        }
        Ok(out)
    }
}

/// Analytic depth passed through the disparity warp `d -> a·d + b`.
pub struct SyntheticDepth {
    world: Arc<SyntheticWorld>,
    warp: [f64; 2],
}

impl SyntheticDepth {
    pub fn new(world: Arc<SyntheticWorld>, warp: [f64; 2]) -> Self {
        Self { world, warp }
    }
}

impl DepthEstimator for SyntheticDepth {
    fn estimate(&self, image: &ImagePlane, view: Option<&ViewHint>) -> Result<DepthMap> {
        let view = view.ok_or_else(|| synthetic_error("synthetic depth needs a view hint"))?;
        if !image.same_size(&view.intrinsics) {
            return Err(Error::contract("depth request image differs from camera"));
        }
        let (_, truth) = self.world.render_static(&view.intrinsics, &view.pose);
        let [a, b] = self.warp;
        let mut values = Vec::with_capacity(truth.values.len());
        for (d, valid) in truth.values.iter().zip(&truth.valid) {
            if !valid {
                return Err(synthetic_error("view sees past the world plane"));
            }
            let disparity = a / d + b;
            if disparity <= 0.0 {
                return Err(synthetic_error(
                    "disparity warp produced non-positive disparity",
                ));
            }
            values.push(1.0 / disparity);
        }
        Ok(DepthMap::from_values(image.width, image.height, values))
    }
}

/// Identity latent space (`C = 3`, `h × w` = image size); optional box blur on
/// decode stands in for a lossy VAE.
pub struct SyntheticCodec {
    pub blur_radius: usize,
}

impl LatentCodec for SyntheticCodec {
    fn encode(&self, video: &[ImagePlane]) -> Result<LatentVideo> {
        let Some(first) = video.first() else {
            return Err(Error::contract("cannot encode an empty video"));
        };
        let (w, h) = (first.width, first.height);
        let mut z = LatentVideo::zeros(video.len(), 3, h, w);
        for (j, frame) in video.iter().enumerate() {
            if frame.width != w || frame.height != h {
                return Err(Error::contract("frames differ in size"));
            }
            let dst = z.frame_mut(j);
            for (i, px) in frame.rgb.iter().enumerate() {
                for c in 0..3 {
                    dst[c * w * h + i] = px[c];
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, z: &LatentVideo) -> Result<Vec<ImagePlane>> {
        if z.channels != 3 {
            return Err(Error::contract("synthetic codec expects 3 latent channels"));
        }
        let (w, h) = (z.width, z.height);
        Ok((0..z.frames)
            .map(|j| {
                let src = z.frame(j);
                let img = ImagePlane::from_fn(w, h, |x, y| {
                    let i = y * w + x;
                    [src[i], src[w * h + i], src[2 * w * h + i]]
                });
                box_blur(&img, self.blur_radius).clamped()
            })
            .collect())
    }
}

fn box_blur(img: &ImagePlane, r: usize) -> ImagePlane {
    if r == 0 {
        return img.clone();
    }
    let (w, h) = (img.width as i64, img.height as i64);
    let r = r as i64;
    ImagePlane::from_fn(img.width, img.height, |x, y| {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for yy in (y as i64 - r).max(0)..=(y as i64 + r).min(h - 1) {
            for xx in (x as i64 - r).max(0)..=(x as i64 + r).min(w - 1) {
                let c = img.get(xx as usize, yy as usize);
                for k in 0..3 {
                    acc[k] += c[k];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    })
}

/// Per-pixel linear blends at uniform weights.
pub struct LinearInterpolator;

impl FrameInterpolator for LinearInterpolator {
    fn interpolate(&self, a: &ImagePlane, b: &ImagePlane, count: usize) -> Result<Vec<ImagePlane>> {
        if !a.same_size(b) {
            return Err(Error::contract("interpolation endpoints differ in size"));
        }
        Ok((1..=count)
            .map(|i| {
                let s = i as f64 / (count + 1) as f64;
                let mut out = a.clone();
                for (o, q) in out.rgb.iter_mut().zip(&b.rgb) {
                    for c in 0..3 {
                        o[c] = (1.0 - s) * o[c] + s * q[c];
                    }
                }
                out
            })
            .collect())
    }
}

/// Deterministic DDIM update whose clean-sample prediction is an oracle
/// target: the world animated along the payload's cameras and timestamps,
/// with frame 0 pinned to the conditioning view. The motion variant comes from
/// the seed, so different seeds animate differently.
///
/// The update is affine in `z` and lands exactly on the target at step 0.
pub struct SyntheticDenoiser {
    world: Arc<SyntheticWorld>,
    schedule: NoiseSchedule,
    codec: SyntheticCodec,
    cache: Mutex<HashMap<u64, Arc<LatentVideo>>>,
}

impl SyntheticDenoiser {
    pub fn new(world: Arc<SyntheticWorld>, steps: usize) -> Self {
        Self {
            world,
            schedule: NoiseSchedule::cosine(steps),
            codec: SyntheticCodec { blur_radius: 0 },
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn cache_key(cond: &ConditioningPayload, seed: u64) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        seed.hash(&mut h);
        for px in &cond.image.rgb {
            for c in px {
                c.to_bits().hash(&mut h);
            }
        }
        for p in &cond.poses {
            for v in p.wxyz().iter().chain(p.xyz().iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        for t in &cond.times {
            t.to_bits().hash(&mut h);
        }
        if let Some(i) = cond.intrinsics {
            for v in [i.fx, i.fy, i.cx, i.cy] {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Clean video the stand-in converges to.
    pub fn target_video(&self, cond: &ConditioningPayload, seed: u64) -> Result<Vec<ImagePlane>> {
        let intr = cond
            .intrinsics
            .ok_or_else(|| synthetic_error("synthetic denoiser needs intrinsics"))?;
        if cond.poses.len() != cond.times.len() || cond.poses.is_empty() {
            return Err(synthetic_error("payload poses and times disagree"));
        }
        let variant = self.world.motion.variant(seed);
        let mut frames = Vec::with_capacity(cond.poses.len());
        frames.push(cond.image.clone());
        for (pose, t) in cond.poses.iter().zip(&cond.times).skip(1) {
            frames.push(self.world.render(&intr, pose, *t, variant).0);
        }
        Ok(frames)
    }

    fn target(&self, cond: &ConditioningPayload, seed: u64) -> Result<Arc<LatentVideo>> {
        let key = Self::cache_key(cond, seed);
        if let Some(z) = self.cache.lock().unwrap().get(&key) {
            return Ok(z.clone());
        }
        let z = Arc::new(self.codec.encode(&self.target_video(cond, seed)?)?);
        self.cache.lock().unwrap().insert(key, z.clone());
        Ok(z)
    }
}

impl Denoiser for SyntheticDenoiser {
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
        check_step(step, self.steps())?;
        let x0 = self.target(condition, seed)?;
        if !x0.same_shape(z) {
            return Err(Error::contract(format!(
                "latent {}x{}x{}x{} does not match conditioned video {}x{}x{}x{}",
                z.frames,
                z.channels,
                z.height,
                z.width,
                x0.frames,
                x0.channels,
                x0.height,
                x0.width
            )));
        }
        let s = &self.schedule;
        let (sig, sd) = (s.signal(step), s.noise_std(step));
        let (sig_prev, sd_prev) = (s.signal(step - 1), s.noise_std(step - 1));
        let mut out = z.clone();
        out.schedule_step = step - 1;
        for ((o, zi), xi) in out.data.iter_mut().zip(&z.data).zip(&x0.data) {
            let eps = (zi - sig * xi) / sd;
            *o = sig_prev * xi + sd_prev * eps;
        }
        Ok(out)
    }
}

impl Plugins {
    /// Stand-ins for every capability, sharing `world`.
    pub fn synthetic(world: SyntheticWorld, settings: &SyntheticSettings) -> Self {
        let world = Arc::new(world);
        Self {
            inpainter: Arc::new(SyntheticInpainter::new(
                world.clone(),
                settings.inpaint_color_shift,
            )),
            depth: Arc::new(SyntheticDepth::new(world.clone(), settings.disparity_warp)),
            denoiser: Arc::new(SyntheticDenoiser::new(world, settings.diffusion_steps)),
            codec: Arc::new(SyntheticCodec {
                blur_radius: settings.codec_blur_radius,
            }),
            interpolator: Arc::new(LinearInterpolator),
        }
    }
}

/// Manifest describing the synthetic stand-ins at the given image size.
pub fn synthetic_manifest(
    settings: &SyntheticSettings,
    width: usize,
    height: usize,
) -> PluginManifest {
    PluginManifest {
        capabilities: ["inpaint", "depth", "denoise", "codec", "interpolate"]
            .map(String::from)
            .to_vec(),
        latent: LatentDims {
            channels: 3,
            height,
            width,
        },
        frames: settings.frames,
        diffusion_steps: settings.diffusion_steps,
        single_flight: false,
        schedule: NoiseSchedule::cosine(settings.diffusion_steps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose, RegionMask};
    use nalgebra::Vector3;

    fn setup() -> (Arc<SyntheticWorld>, CameraIntrinsics, CameraPose) {
        (
            Arc::new(SyntheticWorld::default()),
            CameraIntrinsics::centered(14.0, 16, 16).unwrap(),
            CameraPose::look_from(Vector3::new(0.1, 0.0, 0.0), 0.1, 0.0),
        )
    }

    #[test]
    fn inpaint_with_empty_mask_is_identity() {
        let (world, intr, pose) = setup();
        let inp = SyntheticInpainter::new(world, [0.1, 0.0, 0.0]);
        let image = ImagePlane::filled(16, 16, [0.3, 0.2, 0.1]);
        let req = InpaintRequest {
            image: image.clone(),
            inpaint_mask: RegionMask::zeros(16, 16),
            prompt: "a lake".into(),
            view: Some(ViewHint {
                intrinsics: intr,
                pose,
            }),
        };
        assert_eq!(inp.fill(&req, 3).unwrap(), image);
    }

    #[test]
    fn inpaint_fills_with_world_texture_deterministically() {
        let (world, intr, pose) = setup();
        let inp = SyntheticInpainter::new(world.clone(), [0.0; 3]);
        let mask = RegionMask::from_fn(16, 16, |x, _| if x >= 8 { 1.0 } else { 0.0 });
        let req = InpaintRequest {
            image: ImagePlane::new(16, 16),
            inpaint_mask: mask,
            prompt: String::new(),
            view: Some(ViewHint {
                intrinsics: intr,
                pose,
            }),
        };
        let a = inp.fill(&req, 1).unwrap();
        assert_eq!(a, inp.fill(&req, 1).unwrap());
        // Oracle: unproject each filled pixel onto the plane, sample the texture.
        for y in 0..16 {
            for x in 0..16 {
                let got = a.get(x, y);
                if x < 8 {
                    assert_eq!(got, [0.0; 3]);
                    continue;
                }
                let dir = pose.rotation.inverse() * intr.ray(x as f64, y as f64);
                let o = pose.center();
                let s = (world.z0 - o.z + world.slope * o.y) / (dir.z - world.slope * dir.y);
                let hit = o + dir * s;
                let want = world.albedo(hit.x, hit.y);
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depth_warp_on_constant_plane() {
        let world = Arc::new(SyntheticWorld {
            slope: 0.0,
            ..SyntheticWorld::default()
        });
        let (_, intr, _) = setup();
        let view = ViewHint {
            intrinsics: intr,
            pose: CameraPose::identity(),
        };
        let img = ImagePlane::new(16, 16);
        let exact = SyntheticDepth::new(world.clone(), [1.0, 0.0])
            .estimate(&img, Some(&view))
            .unwrap();
        assert!(exact.values.iter().all(|d| (d - world.z0).abs() < 1e-12));
        let warped = SyntheticDepth::new(world.clone(), [2.0, 0.1])
            .estimate(&img, Some(&view))
            .unwrap();
        let want = 2.0 / world.z0 + 0.1;
        assert!(warped.values.iter().all(|d| (1.0 / d - want).abs() < 1e-12));
    }

    #[test]
    fn codec_is_lossless_and_shape_preserving() {
        let codec = SyntheticCodec { blur_radius: 0 };
        let video: Vec<ImagePlane> = (0..4)
            .map(|j| {
                ImagePlane::from_fn(5, 3, |x, y| {
                    [x as f64 / 7.0, y as f64 / 3.0, j as f64 / 5.0]
                })
            })
            .collect();
        let z = codec.encode(&video).unwrap();
        assert_eq!((z.frames, z.channels, z.height, z.width), (4, 3, 3, 5));
        assert_eq!(codec.decode(&z).unwrap(), video);
    }

    #[test]
    fn lossy_codec_costs_psnr() {
        let (world, intr, pose) = setup();
        let (img, _) = world.render_static(&intr, &pose);
        let lossy = SyntheticCodec { blur_radius: 2 };
        let out = lossy
            .decode(&lossy.encode(std::slice::from_ref(&img)).unwrap())
            .unwrap();
        let psnr = out[0].psnr(&img, None);
        assert!(psnr < 40.0, "psnr {psnr}");
    }

    #[test]
    fn interpolator_blends_at_uniform_weights() {
        let a = ImagePlane::filled(2, 2, [0.0; 3]);
        let b = ImagePlane::filled(2, 2, [1.0; 3]);
        let mids = LinearInterpolator.interpolate(&a, &b, 3).unwrap();
        let got: Vec<f64> = mids.iter().map(|m| m.get(0, 0)[0]).collect();
        assert_eq!(got, vec![0.25, 0.5, 0.75]);
        let same = LinearInterpolator.interpolate(&a, &a, 1).unwrap();
        assert_eq!(same, vec![a]);
    }

    fn payload(
        world: &SyntheticWorld,
        intr: CameraIntrinsics,
        frames: usize,
    ) -> ConditioningPayload {
        let poses: Vec<CameraPose> = (0..frames)
            .map(|j| CameraPose::look_from(Vector3::new(0.02 * j as f64, 0.0, 0.0), 0.0, 0.0))
            .collect();
        ConditioningPayload {
            image: world.render_static(&intr, &poses[0]).0,
            times: (0..frames)
                .map(|j| j as f64 / (frames - 1) as f64)
                .collect(),
            poses,
            intrinsics: Some(intr),
            motion_scalars: vec![],
        }
    }

    #[test]
    fn denoiser_lands_on_target_and_rejects_bad_steps() {
        let (world, intr, _) = setup();
        let den = SyntheticDenoiser::new(world.clone(), 25);
        let cond = payload(&world, intr, 5);
        let target = den
            .codec
            .encode(&den.target_video(&cond, 9).unwrap())
            .unwrap();
        let mut z = LatentVideo::zeros(5, 3, 16, 16);
        for (i, v) in z.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
        }
        z.schedule_step = 25;
        for s in (1..=25).rev() {
            z = den.step(&z, s, &cond, 9).unwrap();
        }
        assert_eq!(z.schedule_step, 0);
        assert_eq!(z.data, target.data);
        assert!(matches!(
            den.step(&z, 0, &cond, 9),
            Err(Error::ScheduleOutOfRange { step: 0, max: 25 })
        ));
        assert!(den.step(&z, 26, &cond, 9).is_err());
    }

    #[test]
    fn different_conditions_have_different_fixed_points() {
        let (world, intr, _) = setup();
        let den = SyntheticDenoiser::new(world.clone(), 25);
        let cond = payload(&world, intr, 5);
        let mut other = cond.clone();
        other.image = ImagePlane::filled(16, 16, [0.9; 3]);
        let a = den.target(&cond, 1).unwrap();
        let b = den.target(&other, 1).unwrap();
        assert_ne!(a.data, b.data);
        let c = den.target(&cond, 2).unwrap();
        assert_ne!(a.data, c.data, "seed selects the motion variant");
    }
}
