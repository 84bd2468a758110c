//! Piecewise-analytic rigid motion of the upper block.
//!
//! Stable scenes hold their pose. Free drops accelerate straight down until
//! the block meets the floor. Tip-overs rotate about the violated support
//! edge at constant angular acceleration, release at a fixed angle, then drop
//! to the floor. Every pose is a closed-form function of the frame index, so
//! trajectories replay bit-exactly.

use super::stability::stability_report;
use super::{FallMode, SceneSpec, StabilityOutcome};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec2, Vec3};

/// Rigid placement of the upper block: `world = rot * local + trans`, with
/// block-local coordinates centered on the bounding footprint at z = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Mat3,
    pub trans: Vec3,
}

/// Motion constants in scene units per frame^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicsConfig {
    /// Vertical drop acceleration.
    pub gravity: f64,
    /// Angular acceleration of a tip-over, radians per frame^2.
    pub tip_accel: f64,
    /// Tip angle at which the block leaves its support and starts to drop.
    pub release_angle: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self { gravity: 0.045, tip_accel: 0.032, release_angle: 0.9 }
    }
}

/// Corner vertices of the upper block in local coordinates.
fn local_vertices(scene: &SceneSpec) -> Vec<Vec3> {
    let h = scene.upper.extent[2];
    let mut verts = Vec::new();
    for quad in scene.upper.footprint_rects() {
        for p in quad {
            verts.push(Vec3::new(p.x, p.y, 0.0));
            verts.push(Vec3::new(p.x, p.y, h));
        }
    }
    verts
}

fn min_vertex_z(verts: &[Vec3], pose: &Pose) -> f64 {
    verts
        .iter()
        .map(|&v| pose.rot.mul_vec(v).add(pose.trans).z)
        .fold(f64::INFINITY, f64::min)
}

/// Whether the two blocks' footprints intersect with positive area.
fn footprints_overlap(scene: &SceneSpec) -> bool {
    let ground = SceneSpec { upper_height: 0.0, ..scene.clone() };
    !stability_report(&ground).support.is_empty()
}

/// Pose at tip angle `theta` about the world-space pivot line (`pivot_point`,
/// `axis`), starting from `initial`.
fn tipped_pose(initial: &Pose, pivot_point: Vec3, axis: Vec3, theta: f64) -> Pose {
    let rot = Mat3::rot_axis(axis, theta);
    // world' = R * (world - pivot) + pivot, world = R0 * local + t0
    let new_rot = rot.mul_mat(&initial.rot);
    let t = rot.mul_vec(initial.trans.sub(pivot_point)).add(pivot_point);
    Pose { rot: new_rot, trans: t }
}

/// Per-frame poses of the upper block for an episode of `frame_count` frames.
///
/// The pose at frame 0 is the initial placement for every outcome, so paired
/// renders with different forced outcomes share their first frame exactly.
pub fn simulate_kinematics(
    scene: &SceneSpec,
    outcome: StabilityOutcome,
    frame_count: usize,
    config: &KinematicsConfig,
) -> Result<Vec<Pose>> {
    if frame_count < 2 {
        return Err(Error::Argument(format!("frame_count must be >= 2, got {frame_count}")));
    }
    let z_base = scene.lower.extent[2] + scene.upper_height;
    let initial = Pose {
        rot: Mat3::rot_z(scene.upper.yaw),
        trans: Vec3::new(scene.upper_offset[0], scene.upper_offset[1], z_base),
    };

    match outcome {
        StabilityOutcome::Stable => Ok(vec![initial; frame_count]),
        StabilityOutcome::Falls(FallMode::FreeDrop) => {
            // A dropping block lands on the lower block when their footprints
            // overlap (the hovering-probe case), otherwise on the floor.
            let rest_z = if footprints_overlap(scene) { scene.lower.extent[2] } else { 0.0 };
            let mut poses = Vec::with_capacity(frame_count);
            for t in 0..frame_count {
                let drop = 0.5 * config.gravity * (t as f64) * (t as f64);
                let z = (z_base - drop).max(rest_z);
                poses.push(Pose { trans: Vec3::new(initial.trans.x, initial.trans.y, z), ..initial });
            }
            Ok(poses)
        }
        StabilityOutcome::Falls(FallMode::TipOverEdge(edge)) => {
            let report = stability_report(scene);
            let support = &report.support;
            if support.len() < 3 || edge >= support.len() {
                return Err(Error::Argument(format!(
                    "tip edge {edge} not present in support polygon of {} vertices",
                    support.len()
                )));
            }
            let a2 = support[edge];
            let b2 = support[(edge + 1) % support.len()];
            let pivot_point = Vec3::new(a2.x, a2.y, scene.lower.extent[2]);
            let edge_dir = Vec3::new(b2.x - a2.x, b2.y - a2.y, 0.0).normalized();
            // Support polygons are CCW, so the outward normal of edge a->b is
            // (dy, -dx). A positive rotation about the edge direction moves
            // points above the pivot along that outward normal (right-hand
            // rule), which is the direction an overhanging COM tips.
            let outward = Vec2::new(b2.y - a2.y, -(b2.x - a2.x));
            let com_side = report.com.sub(a2).dot(outward);
            let spin = if com_side >= 0.0 { 1.0 } else { -1.0 };

            let verts = local_vertices(scene);
            let release_t = (2.0 * config.release_angle / config.tip_accel).sqrt();

            let mut poses = Vec::with_capacity(frame_count);
            let mut resting: Option<Pose> = None;
            for t in 0..frame_count {
                if let Some(p) = resting {
                    poses.push(p);
                    continue;
                }
                let tf = t as f64;
                let theta = 0.5 * config.tip_accel * tf * tf;
                let pose = if theta < config.release_angle {
                    let p = tipped_pose(&initial, pivot_point, edge_dir, spin * theta);
                    // A corner may reach the floor before the release angle;
                    // freeze the rotation at the touching angle.
                    if min_vertex_z(&verts, &p) < 0.0 {
                        let touch = touch_angle(&initial, pivot_point, edge_dir, spin, theta, &verts);
                        let frozen = tipped_pose(&initial, pivot_point, edge_dir, spin * touch);
                        resting = Some(frozen);
                        frozen
                    } else {
                        p
                    }
                } else {
                    // Released: frozen rotation, ballistic drop measured from
                    // the release instant.
                    let released = tipped_pose(&initial, pivot_point, edge_dir, spin * config.release_angle);
                    let gap = min_vertex_z(&verts, &released);
                    let fall_t = tf - release_t;
                    let drop = 0.5 * config.gravity * fall_t * fall_t;
                    if drop >= gap {
                        let p = Pose {
                            trans: Vec3::new(released.trans.x, released.trans.y, released.trans.z - gap),
                            ..released
                        };
                        resting = Some(p);
                        p
                    } else {
                        Pose {
                            trans: Vec3::new(released.trans.x, released.trans.y, released.trans.z - drop),
                            ..released
                        }
                    }
                };
                poses.push(pose);
            }
            Ok(poses)
        }
    }
}

/// Largest angle in [0, upper] at which the lowest vertex still clears the
/// floor, by bisection (min_vertex_z decreases as the block swings down).
fn touch_angle(initial: &Pose, pivot: Vec3, axis: Vec3, spin: f64, upper: f64, verts: &[Vec3]) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = upper;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let p = tipped_pose(initial, pivot, axis, spin * mid);
        if min_vertex_z(verts, &p) < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::BlockSpec;

    fn drop_scene(gap: f64) -> SceneSpec {
        SceneSpec {
            lower: BlockSpec::cube(1.2, [0.5; 3], 0.0),
            upper: BlockSpec::cube(0.8, [0.5; 3], 0.0),
            upper_offset: [0.0, 0.0],
            upper_height: gap,
            camera_azimuth: 0.0,
            rng_seed: 0,
        }
    }

    #[test]
    fn stable_scene_has_constant_pose() {
        let s = drop_scene(0.0);
        let cfg = KinematicsConfig::default();
        let poses = simulate_kinematics(&s, StabilityOutcome::Stable, 20, &cfg).unwrap();
        assert_eq!(poses.len(), 20);
        for p in &poses {
            assert_eq!(*p, poses[0]);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let s = drop_scene(0.0);
        let cfg = KinematicsConfig::default();
        assert!(simulate_kinematics(&s, StabilityOutcome::Stable, 1, &cfg).is_err());
    }

    #[test]
    fn free_drop_matches_numeric_stepping_and_rests_on_floor() {
        // Disjoint footprints: the block clears the lower block and falls all
        // the way to the floor.
        let s = SceneSpec { upper_offset: [2.5, 0.0], ..drop_scene(0.5) };
        let cfg = KinematicsConfig::default();
        let frames = 24;
        let poses = simulate_kinematics(&s, StabilityOutcome::Falls(FallMode::FreeDrop), frames, &cfg).unwrap();

        // Numeric stepping oracle: fine substeps of constant acceleration.
        let z0 = s.lower.extent[2] + 0.5;
        let sub = 10_000usize;
        for t in 0..frames {
            let mut z = z0;
            let mut v = 0.0;
            let dt = 1.0 / sub as f64;
            for _ in 0..t * sub {
                v += cfg.gravity * dt;
                z -= v * dt;
                if z <= 0.0 {
                    z = 0.0;
                    v = 0.0;
                }
            }
            assert!((poses[t].trans.z - z).abs() < 5e-3, "frame {t}: {} vs {}", poses[t].trans.z, z);
        }
        // Final rest: footprint origin on the floor, i.e. block bottom at z=0
        // and block center at half its height.
        let last = poses.last().unwrap();
        assert_eq!(last.trans.z, 0.0);
        let center_z = last.trans.z + s.upper.extent[2] / 2.0;
        assert!((center_z - s.upper.extent[2] / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hovering_block_with_overlap_lands_on_lower_block() {
        let s = drop_scene(0.5);
        let cfg = KinematicsConfig::default();
        let poses = simulate_kinematics(&s, StabilityOutcome::Falls(FallMode::FreeDrop), 24, &cfg).unwrap();
        let last = poses.last().unwrap();
        assert_eq!(last.trans.z, s.lower.extent[2], "should rest on the lower block's top face");
        assert!(poses[0].trans.z > last.trans.z);
    }

    #[test]
    fn tip_angle_is_monotone_nondecreasing() {
        let s = SceneSpec {
            upper_offset: [0.95, 0.0],
            ..drop_scene(0.0)
        };
        let report = crate::scenegen::stability_report(&s);
        let StabilityOutcome::Falls(FallMode::TipOverEdge(_)) = report.outcome else {
            panic!("expected tip, got {:?}", report.outcome);
        };
        let cfg = KinematicsConfig::default();
        let poses = simulate_kinematics(&s, report.outcome, 20, &cfg).unwrap();
        // Angle recovered from how far the local z axis has rotated.
        let mut last_angle = -1.0;
        for p in &poses {
            let up = p.rot.mul_vec(Vec3::new(0.0, 0.0, 1.0));
            let angle = up.z.clamp(-1.0, 1.0).acos();
            assert!(angle >= last_angle - 1e-9, "angle regressed: {angle} after {last_angle}");
            last_angle = angle;
        }
        assert!(last_angle > 0.1, "block never tipped");
    }

    #[test]
    fn fall_ends_at_rest_within_sequence() {
        let s = SceneSpec { upper_offset: [0.95, 0.0], ..drop_scene(0.0) };
        let report = crate::scenegen::stability_report(&s);
        let cfg = KinematicsConfig::default();
        let poses = simulate_kinematics(&s, report.outcome, 20, &cfg).unwrap();
        let last = &poses[19];
        let prev = &poses[18];
        assert_eq!(last, prev, "block still moving at the end of the sequence");
    }
}
