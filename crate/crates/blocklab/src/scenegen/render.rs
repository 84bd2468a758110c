//! Flat-shaded perspective software rasterizer.
//!
//! Renders the two blocks with a single fixed directional light over a
//! uniform gray room (floor and back wall share one unlit gray, so an empty
//! view is a constant-gray frame). Triangles are clipped against the near
//! plane, projected, and scan-converted with a depth buffer. Everything is
//! plain float arithmetic in a fixed order, so identical inputs render to
//! bit-identical frames.

use super::kinematics::{simulate_kinematics, KinematicsConfig, Pose};
use super::stability::stability_oracle;
use super::{BlockSpec, Frame, SceneSpec, StabilityOutcome, VideoSequence};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};

/// Camera, light and room constants.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Distance from the look-at point to the camera.
    pub camera_distance: f64,
    /// Camera elevation above the horizontal, radians.
    pub camera_elevation: f64,
    /// Point the camera orbits and looks at.
    pub look_at: Vec3,
    /// Vertical field of view, radians.
    pub fov_y: f64,
    pub near: f64,
    /// Unlit gray of floor, wall and clear color.
    pub room_gray: f32,
    /// Directional light (pointing from the scene toward the light).
    pub light_dir: Vec3,
    pub ambient: f32,
    pub diffuse: f32,
    pub kinematics: KinematicsConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            camera_distance: 5.2,
            camera_elevation: 0.35,
            look_at: Vec3::new(0.0, 0.0, 0.9),
            fov_y: 0.72,
            near: 0.1,
            room_gray: 0.52,
            light_dir: Vec3::new(0.35, -0.5, 0.85),
            ambient: 0.4,
            diffuse: 0.6,
            kinematics: KinematicsConfig::default(),
        }
    }
}

struct Tri {
    v: [Vec3; 3],
    color: [f32; 3],
    lit: bool,
}

/// Axis-aligned box [min, max] as 12 triangles with outward winding.
fn box_tris(min: Vec3, max: Vec3, color: [f32; 3], out: &mut Vec<Tri>) {
    let corners = [
        Vec3::new(min.x, min.y, min.z),
        Vec3::new(max.x, min.y, min.z),
        Vec3::new(max.x, max.y, min.z),
        Vec3::new(min.x, max.y, min.z),
        Vec3::new(min.x, min.y, max.z),
        Vec3::new(max.x, min.y, max.z),
        Vec3::new(max.x, max.y, max.z),
        Vec3::new(min.x, max.y, max.z),
    ];
    const FACES: [[usize; 4]; 6] = [
        [0, 3, 2, 1], // bottom (normal -z)
        [4, 5, 6, 7], // top (+z)
        [0, 1, 5, 4], // -y
        [2, 3, 7, 6], // +y
        [1, 2, 6, 5], // +x
        [3, 0, 4, 7], // -x
    ];
    for f in FACES {
        out.push(Tri { v: [corners[f[0]], corners[f[1]], corners[f[2]]], color, lit: true });
        out.push(Tri { v: [corners[f[0]], corners[f[2]], corners[f[3]]], color, lit: true });
    }
}

fn block_tris(block: &BlockSpec, pose: &Pose, out: &mut Vec<Tri>) {
    let h = block.extent[2];
    let start = out.len();
    for quad in block.footprint_rects() {
        let min = Vec3::new(quad[0].x.min(quad[2].x), quad[0].y.min(quad[2].y), 0.0);
        let max = Vec3::new(quad[0].x.max(quad[2].x), quad[0].y.max(quad[2].y), h);
        box_tris(min, max, block.color, out);
    }
    for tri in &mut out[start..] {
        for v in &mut tri.v {
            *v = pose.rot.mul_vec(*v).add(pose.trans);
        }
    }
}

fn room_tris(cfg: &RenderConfig, out: &mut Vec<Tri>) {
    let g = [cfg.room_gray; 3];
    let s = 14.0;
    // Floor at z = 0.
    let f = [
        Vec3::new(-s, -s, 0.0),
        Vec3::new(s, -s, 0.0),
        Vec3::new(s, s, 0.0),
        Vec3::new(-s, s, 0.0),
    ];
    out.push(Tri { v: [f[0], f[1], f[2]], color: g, lit: false });
    out.push(Tri { v: [f[0], f[2], f[3]], color: g, lit: false });
    // Back wall behind the stack, facing the camera (camera sits at -y).
    let w = [
        Vec3::new(-s, 4.0, 0.0),
        Vec3::new(s, 4.0, 0.0),
        Vec3::new(s, 4.0, 2.0 * s),
        Vec3::new(-s, 4.0, 2.0 * s),
    ];
    out.push(Tri { v: [w[0], w[1], w[2]], color: g, lit: false });
    out.push(Tri { v: [w[0], w[2], w[3]], color: g, lit: false });
}

struct Camera {
    /// World-to-view rotation rows (right, up, forward).
    rows: [Vec3; 3],
    eye: Vec3,
    /// Projection scale factors.
    sx: f64,
    sy: f64,
    near: f64,
}

fn camera(scene_azimuth: f64, cfg: &RenderConfig, aspect: f64) -> Camera {
    let az = scene_azimuth;
    let el = cfg.camera_elevation;
    // Camera orbits the look-at point; azimuth 0 puts it on the -y side.
    let back = Vec3::new(az.sin() * el.cos(), -az.cos() * el.cos(), el.sin());
    let eye = cfg.look_at.add(back.scale(cfg.camera_distance));
    let forward = cfg.look_at.sub(eye).normalized();
    let world_up = Vec3::new(0.0, 0.0, 1.0);
    let right = forward.cross(world_up).normalized();
    let up = right.cross(forward);
    let sy = 1.0 / (cfg.fov_y / 2.0).tan();
    let sx = sy / aspect;
    Camera { rows: [right, up, forward], eye, sx, sy, near: cfg.near }
}

impl Camera {
    fn to_view(&self, p: Vec3) -> Vec3 {
        let d = p.sub(self.eye);
        Vec3::new(self.rows[0].dot(d), self.rows[1].dot(d), self.rows[2].dot(d))
    }
}

/// Clips a polygon in view space against the near plane z = near.
fn clip_near(poly: &[Vec3], near: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let pin = p.z >= near;
        let qin = q.z >= near;
        if pin {
            out.push(p);
        }
        if pin != qin {
            let t = (near - p.z) / (q.z - p.z);
            out.push(p.add(q.sub(p).scale(t)));
        }
    }
    out
}

/// Renders the two blocks at the given upper-block pose.
pub fn render_frame(scene: &SceneSpec, pose: &Pose, height: usize, width: usize, cfg: &RenderConfig) -> Result<Frame> {
    if height < 8 || width < 8 {
        return Err(Error::Argument(format!("frame size must be >= 8, got {height}x{width}")));
    }
    let mut tris = Vec::with_capacity(64);
    room_tris(cfg, &mut tris);
    let lower_pose = Pose { rot: Mat3::rot_z(scene.lower.yaw), trans: Vec3::new(0.0, 0.0, 0.0) };
    block_tris(&scene.lower, &lower_pose, &mut tris);
    block_tris(&scene.upper, pose, &mut tris);

    let cam = camera(scene.camera_azimuth, cfg, width as f64 / height as f64);
    let light = cfg.light_dir.normalized();

    let mut frame = Frame::filled(height, width, [cfg.room_gray; 3]);
    let mut depth = vec![f64::INFINITY; height * width];

    for tri in &tris {
        // Shade from the world-space face normal before any clipping.
        let n = tri.v[1].sub(tri.v[0]).cross(tri.v[2].sub(tri.v[0])).normalized();
        let shade = if tri.lit {
            cfg.ambient + cfg.diffuse * (n.dot(light).max(0.0) as f32)
        } else {
            1.0
        };
        let color = [
            (tri.color[0] * shade).clamp(0.0, 1.0),
            (tri.color[1] * shade).clamp(0.0, 1.0),
            (tri.color[2] * shade).clamp(0.0, 1.0),
        ];

        let view: Vec<Vec3> = tri.v.iter().map(|&p| cam.to_view(p)).collect();
        let clipped = clip_near(&view, cam.near);
        if clipped.len() < 3 {
            continue;
        }
        // Project to screen space; z kept as 1/depth-compatible view z.
        let project = |p: &Vec3| {
            let x = cam.sx * p.x / p.z;
            let y = cam.sy * p.y / p.z;
            (
                (x + 1.0) * 0.5 * width as f64,
                (1.0 - y) * 0.5 * height as f64,
                p.z,
            )
        };
        let screen: Vec<(f64, f64, f64)> = clipped.iter().map(project).collect();
        // Fan-triangulate the clipped polygon.
        for k in 1..screen.len() - 1 {
            raster_triangle(&mut frame, &mut depth, screen[0], screen[k], screen[k + 1], color);
        }
    }
    Ok(frame)
}

fn raster_triangle(
    frame: &mut Frame,
    depth: &mut [f64],
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    c: (f64, f64, f64),
    color: [f32; 3],
) {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let min_x = a.0.min(b.0).min(c.0).floor().max(0.0) as i64;
    let max_x = (a.0.max(b.0).max(c.0).ceil() as i64).min(w - 1);
    let min_y = a.1.min(b.1).min(c.1).floor().max(0.0) as i64;
    let max_y = (a.1.max(b.1).max(c.1).ceil() as i64).min(h - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    if area.abs() < 1e-12 {
        return;
    }
    // Interpolate 1/z for perspective-correct depth.
    let (iza, izb, izc) = (1.0 / a.2, 1.0 / b.2, 1.0 / c.2);
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let w0 = ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) / area;
            let w1 = ((c.0 - b.0) * (y - b.1) - (c.1 - b.1) * (x - b.0)) / area;
            let w2 = ((a.0 - c.0) * (y - c.1) - (a.1 - c.1) * (x - c.0)) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            // Barycentric weights: w1 belongs to vertex a, w2 to b, w0 to c.
            let iz = w1 * iza + w2 * izb + w0 * izc;
            let z = 1.0 / iz;
            let di = (py as usize) * frame.width + px as usize;
            if z < depth[di] {
                depth[di] = z;
                frame.set_pixel(py as usize, px as usize, color);
            }
        }
    }
}

/// Renders a labeled episode: oracle outcome, kinematics, frames.
pub fn render_sequence(
    scene: &SceneSpec,
    frame_count: usize,
    height: usize,
    width: usize,
    cfg: &RenderConfig,
) -> Result<VideoSequence> {
    let label = stability_oracle(scene);
    let video = render_with_outcome(scene, label, frame_count, height, width, cfg)?;
    Ok(video)
}

/// Renders an episode with a forced outcome in place of the oracle's, keeping
/// the oracle label out of it; used to construct violation stimuli. Paired
/// calls that differ only in the forced outcome share frame 0 exactly.
pub fn render_counterfactual(
    scene: &SceneSpec,
    forced: StabilityOutcome,
    frame_count: usize,
    height: usize,
    width: usize,
    cfg: &RenderConfig,
) -> Result<VideoSequence> {
    render_with_outcome(scene, forced, frame_count, height, width, cfg)
}

fn render_with_outcome(
    scene: &SceneSpec,
    outcome: StabilityOutcome,
    frame_count: usize,
    height: usize,
    width: usize,
    cfg: &RenderConfig,
) -> Result<VideoSequence> {
    scene.validate()?;
    let poses = simulate_kinematics(scene, outcome, frame_count, &cfg.kinematics)?;
    let mut frames = Vec::with_capacity(frame_count);
    for pose in &poses {
        frames.push(render_frame(scene, pose, height, width, cfg)?);
    }
    Ok(VideoSequence { frames, meta: scene.clone(), label: outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{sample_scene, BlockSpec, FallMode, GenConfig};

    fn scene() -> SceneSpec {
        SceneSpec {
            lower: BlockSpec::cube(1.2, [0.2, 0.3, 0.8], 0.0),
            upper: BlockSpec::cube(0.8, [0.85, 0.1, 0.1], 0.0),
            upper_offset: [0.0, 0.0],
            upper_height: 0.0,
            camera_azimuth: 0.0,
            rng_seed: 1,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = RenderConfig::default();
        let s = scene();
        let a = render_sequence(&s, 4, 32, 32, &cfg).unwrap();
        let b = render_sequence(&s, 4, 32, 32, &cfg).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
    }

    #[test]
    fn blocks_behind_camera_leave_pure_gray() {
        // Aim the camera away from the room: with the look-at point pulled far
        // out along +y the eye sits at y ~ +195 facing further +y, so both
        // blocks (and the room geometry) fall behind the near plane and
        // nothing is rasterized over the clear color.
        let cfg = RenderConfig {
            look_at: crate::geom::Vec3::new(0.0, 200.0, 0.9),
            ..RenderConfig::default()
        };
        let v = render_sequence(&scene(), 2, 16, 16, &cfg).unwrap();
        for px in v.frames[0].data.chunks(3) {
            assert_eq!(px, [cfg.room_gray; 3]);
        }
    }

    #[test]
    fn red_cube_reddens_center_pixel() {
        // Aim the camera at the red upper block so it fills the image center.
        let cfg = RenderConfig {
            look_at: crate::geom::Vec3::new(0.0, 0.0, 1.6),
            ..RenderConfig::default()
        };
        let v = render_sequence(&scene(), 2, 32, 32, &cfg).unwrap();
        let center = v.frames[0].pixel(16, 16);
        assert!(center[0] > center[2], "center pixel {center:?} not red-dominant");
    }

    #[test]
    fn stable_scene_frames_identical_unstable_differ() {
        let cfg = RenderConfig::default();
        let stable = render_sequence(&scene(), 6, 32, 32, &cfg).unwrap();
        assert!(stable.label.is_stable());
        for f in &stable.frames {
            assert_eq!(f.data, stable.frames[0].data);
        }

        let mut s = scene();
        s.upper_offset = [0.95, 0.0];
        let falling = render_sequence(&s, 6, 32, 32, &cfg).unwrap();
        assert!(!falling.label.is_stable());
        let any_motion = falling
            .frames
            .windows(2)
            .any(|w| w[0].data != w[1].data);
        assert!(any_motion, "unstable scene rendered static");
    }

    #[test]
    fn counterfactual_identity_and_shared_prefix() {
        let cfg = RenderConfig::default();
        let mut s = scene();
        s.upper_offset = [0.95, 0.0];
        let oracle = stability_oracle(&s);
        assert!(matches!(oracle, StabilityOutcome::Falls(FallMode::TipOverEdge(_))));

        let expected = render_sequence(&s, 8, 32, 32, &cfg).unwrap();
        let same = render_counterfactual(&s, oracle, 8, 32, 32, &cfg).unwrap();
        for (a, b) in expected.frames.iter().zip(&same.frames) {
            assert_eq!(a.data, b.data);
        }

        let violated = render_counterfactual(&s, StabilityOutcome::Stable, 8, 32, 32, &cfg).unwrap();
        assert_eq!(expected.frames[0].data, violated.frames[0].data);
        for f in &violated.frames {
            assert_eq!(f.data, violated.frames[0].data);
        }
    }

    #[test]
    fn pixel_range_is_unit_interval() {
        let cfg = RenderConfig::default();
        for i in 0..8u64 {
            let s = sample_scene(crate::rng::derive(5150, &[i]), &GenConfig::default()).unwrap();
            let v = render_sequence(&s, 4, 16, 16, &cfg).unwrap();
            for f in &v.frames {
                for &x in &f.data {
                    assert!((0.0..=1.0).contains(&x) && x.is_finite());
                }
            }
        }
    }

    #[test]
    fn tiny_frames_rejected() {
        let cfg = RenderConfig::default();
        let s = scene();
        assert!(render_sequence(&s, 4, 4, 4, &cfg).is_err());
    }
}
