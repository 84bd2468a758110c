//! Center-of-mass-over-support stability test.
//!
//! The upper block rests on the lower block's top face. Its support region is
//! the convex hull of the intersection between the two footprints projected
//! onto the contact plane; the block is stable iff its center of mass projects
//! strictly inside that hull. Zero intersection area (or a positive vertical
//! gap) means no support at all.

use super::{FallMode, SceneSpec, StabilityOutcome};
use crate::geom::{clip_convex, convex_hull, polygon_area, signed_distance_convex, transform_poly, Polygon, Vec2};

/// Contact area below this is treated as no contact.
const CONTACT_AREA_EPS: f64 = 1e-12;

/// Everything the oracle derived about a scene, for tests, kinematics and
/// boundary-band analysis.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub outcome: StabilityOutcome,
    /// Convex hull of the footprint intersection, world xy; empty if no contact.
    pub support: Polygon,
    /// Upper block's center of mass projected to world xy.
    pub com: Vec2,
    /// Signed distance from the COM to the support boundary (positive inside).
    /// `None` when there is no contact.
    pub margin: Option<f64>,
}

/// Upper-block footprint rectangles in world xy.
fn upper_footprint_world(scene: &SceneSpec) -> Vec<Polygon> {
    let off = Vec2::new(scene.upper_offset[0], scene.upper_offset[1]);
    scene
        .upper
        .footprint_rects()
        .into_iter()
        .map(|quad| transform_poly(&quad, scene.upper.yaw, off))
        .collect()
}

/// Lower-block top-face polygon in world xy (lower blocks are convex cubes;
/// an L-shaped lower would need per-rect handling here as well).
fn lower_top_world(scene: &SceneSpec) -> Vec<Polygon> {
    scene
        .lower
        .footprint_rects()
        .into_iter()
        .map(|quad| transform_poly(&quad, scene.lower.yaw, Vec2::new(0.0, 0.0)))
        .collect()
}

/// Full stability analysis of a scene.
pub fn stability_report(scene: &SceneSpec) -> StabilityReport {
    let com_local = scene.upper.center_of_mass();
    let com = com_local
        .rotate(scene.upper.yaw)
        .add(Vec2::new(scene.upper_offset[0], scene.upper_offset[1]));

    if scene.upper_height > 0.0 {
        return StabilityReport {
            outcome: StabilityOutcome::Falls(FallMode::FreeDrop),
            support: Vec::new(),
            com,
            margin: None,
        };
    }

    // Intersect every upper footprint rect with every lower footprint rect and
    // pool the vertices; the support polygon is their convex hull.
    let mut area = 0.0;
    let mut contact_pts: Vec<Vec2> = Vec::new();
    for upper_rect in upper_footprint_world(scene) {
        for lower_rect in lower_top_world(scene) {
            let piece = clip_convex(&upper_rect, &lower_rect);
            area += polygon_area(&piece);
            contact_pts.extend(piece);
        }
    }
    if area <= CONTACT_AREA_EPS {
        return StabilityReport {
            outcome: StabilityOutcome::Falls(FallMode::FreeDrop),
            support: Vec::new(),
            com,
            margin: None,
        };
    }

    let support = convex_hull(&contact_pts);
    if support.len() < 3 {
        // Degenerate sliver contact: no polygon to stand on.
        return StabilityReport {
            outcome: StabilityOutcome::Falls(FallMode::FreeDrop),
            support: Vec::new(),
            com,
            margin: None,
        };
    }

    let (margin, nearest_edge) = signed_distance_convex(com, &support);
    let outcome = if margin > 0.0 {
        StabilityOutcome::Stable
    } else {
        StabilityOutcome::Falls(FallMode::TipOverEdge(nearest_edge))
    };
    StabilityReport { outcome, support, com, margin: Some(margin) }
}

/// Stability decision for a scene. Total on valid scenes.
pub fn stability_oracle(scene: &SceneSpec) -> StabilityOutcome {
    stability_report(scene).outcome
}
