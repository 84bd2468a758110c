//! Procedural two-block support scenes: sampling, stability, kinematics and
//! rendering. A scene is a lower block on the floor and an upper block at the
//! plane of the lower block's top face; the upper block then stays put, tips
//! over a support edge, or drops free, and the whole episode is rendered to a
//! short video.

mod kinematics;
mod render;
mod stability;

pub use kinematics::{simulate_kinematics, KinematicsConfig, Pose};
pub use render::{render_counterfactual, render_frame, render_sequence, RenderConfig};
pub use stability::{stability_oracle, stability_report, StabilityReport};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::rng::{self, tag};
use serde::{Deserialize, Serialize};

/// Solid shape of a block. Arm lengths of an L live in `BlockSpec::extent`
/// (x arm = extent\[0\], y arm = extent\[1\]); only the thickness is stored here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BlockShape {
    Cube,
    LShape { thickness: f64 },
}

/// One block: shape, bounding extent in scene units, albedo and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub shape: BlockShape,
    /// Bounding box edge lengths (x, y, z).
    pub extent: [f64; 3],
    /// Linear RGB albedo, each channel in [0, 1].
    pub color: [f32; 3],
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
}

impl BlockSpec {
    pub fn cube(edge: f64, color: [f32; 3], yaw: f64) -> Self {
        Self { shape: BlockShape::Cube, extent: [edge, edge, edge], color, yaw }
    }

    pub fn l_shape(arm_a: f64, arm_b: f64, thickness: f64, height: f64, color: [f32; 3], yaw: f64) -> Self {
        Self { shape: BlockShape::LShape { thickness }, extent: [arm_a, arm_b, height], color, yaw }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config(format!("block extent must be positive, got {:?}", self.extent)));
        }
        for (i, &c) in self.color.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("color channel {i} out of [0,1]: {c}")));
            }
        }
        if let BlockShape::LShape { thickness } = self.shape {
            if !(thickness > 0.0) {
                return Err(Error::Config(format!("L thickness must be positive, got {thickness}")));
            }
            if self.extent[0] < thickness || self.extent[1] < thickness {
                return Err(Error::Config(format!(
                    "L arm lengths {:?} must be >= thickness {thickness}",
                    &self.extent[..2]
                )));
            }
        }
        Ok(())
    }

    /// Footprint decomposed into convex rectangles in block-local coordinates
    /// (bounding box centered at the origin). A cube is one rectangle; an L is
    /// two disjoint rectangles sharing the corner at the bbox's (-x, -y) side.
    pub fn footprint_rects(&self) -> Vec<[Vec2; 4]> {
        let hx = self.extent[0] / 2.0;
        let hy = self.extent[1] / 2.0;
        match self.shape {
            BlockShape::Cube => vec![[
                Vec2::new(-hx, -hy),
                Vec2::new(hx, -hy),
                Vec2::new(hx, hy),
                Vec2::new(-hx, hy),
            ]],
            BlockShape::LShape { thickness } => {
                let t = thickness;
                // x arm: full x extent, thickness in y
                let arm_x = [
                    Vec2::new(-hx, -hy),
                    Vec2::new(hx, -hy),
                    Vec2::new(hx, -hy + t),
                    Vec2::new(-hx, -hy + t),
                ];
                // y arm: remaining strip above the x arm, thickness in x
                let arm_y = [
                    Vec2::new(-hx, -hy + t),
                    Vec2::new(-hx + t, -hy + t),
                    Vec2::new(-hx + t, hy),
                    Vec2::new(-hx, hy),
                ];
                vec![arm_x, arm_y]
            }
        }
    }

    /// Center of mass in block-local coordinates (uniform density).
    pub fn center_of_mass(&self) -> Vec2 {
        match self.shape {
            BlockShape::Cube => Vec2::new(0.0, 0.0),
            BlockShape::LShape { .. } => {
                let mut mass = 0.0;
                let mut acc = Vec2::new(0.0, 0.0);
                for quad in self.footprint_rects() {
                    let cx = (quad[0].x + quad[2].x) / 2.0;
                    let cy = (quad[0].y + quad[2].y) / 2.0;
                    let area = (quad[2].x - quad[0].x) * (quad[2].y - quad[0].y);
                    mass += area;
                    acc = acc.add(Vec2::new(cx, cy).scale(area));
                }
                acc.scale(1.0 / mass)
            }
        }
    }
}

/// Full parameterization of one scene. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub lower: BlockSpec,
    pub upper: BlockSpec,
    /// Horizontal displacement of the upper block's footprint center from the
    /// lower block's top-face center, in world axes.
    pub upper_offset: [f64; 2],
    /// Vertical gap between the lower top face and the upper bottom face.
    /// Zero in every training scene; positive only in probe construction.
    pub upper_height: f64,
    /// Camera azimuth about the stack, radians.
    pub camera_azimuth: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.lower.validate()?;
        self.upper.validate()?;
        if self.upper_height < 0.0 {
            return Err(Error::Config(format!("upper_height must be >= 0, got {}", self.upper_height)));
        }
        Ok(())
    }
}

/// Which support edge the block tips about, or a straight drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallMode {
    /// Rotation about the given edge of the support polygon.
    TipOverEdge(usize),
    /// No contact at all: constant-acceleration vertical drop.
    FreeDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityOutcome {
    Stable,
    Falls(FallMode),
}

impl StabilityOutcome {
    pub fn is_stable(&self) -> bool {
        matches!(self, StabilityOutcome::Stable)
    }
}

/// One rendered image: H x W pixels, 3 channels, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantizes to 8-bit storage: round(clamp(v) * 255).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Inverse of [`Frame::to_u8`] up to quantization: v / 255.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * 3);
        Self { height, width, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }
}

/// A rendered episode with its scene and ground-truth stability label.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    pub meta: SceneSpec,
    pub label: StabilityOutcome,
}

/// Inclusive ranges for every sampled scene property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub lower_edge: [f64; 2],
    /// Per-channel albedo range shared by all three channels.
    pub lower_color: [f64; 2],
    pub upper_color: [f64; 2],
    /// Yaw range (radians) for both blocks.
    pub lower_yaw: [f64; 2],
    pub upper_yaw: [f64; 2],
    /// Offset along x as a fraction of the combined half-extents of the two
    /// footprints on that axis; |fraction| > 1 clears the lower block.
    pub offset_frac: [f64; 2],
    /// Cross-axis (y) jitter, same units as `offset_frac`.
    pub offset_cross_frac: [f64; 2],
    pub camera_azimuth: [f64; 2],
    /// Edge length of a cube upper block (not varied; the paper varies only
    /// the lower block size and the L side lengths).
    pub upper_cube_edge: f64,
    /// Side length range for L-shaped upper blocks.
    pub l_arm: [f64; 2],
    pub l_thickness: f64,
    pub l_height: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lower_edge: [0.8, 1.6],
            lower_color: [0.0, 1.0],
            upper_color: [0.0, 1.0],
            lower_yaw: [-0.26, 0.26], // about +/-15 degrees
            upper_yaw: [-0.26, 0.26],
            offset_frac: [-1.15, 1.15],
            offset_cross_frac: [-0.3, 0.3],
            camera_azimuth: [-0.35, 0.35], // about +/-20 degrees
            upper_cube_edge: 0.75,
            l_arm: [0.6, 1.1],
            l_thickness: 0.32,
            l_height: 0.55,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges: [(&str, [f64; 2]); 8] = [
            ("lower_edge", self.lower_edge),
            ("lower_color", self.lower_color),
            ("upper_color", self.upper_color),
            ("lower_yaw", self.lower_yaw),
            ("upper_yaw", self.upper_yaw),
            ("offset_frac", self.offset_frac),
            ("offset_cross_frac", self.offset_cross_frac),
            ("camera_azimuth", self.camera_azimuth),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("range {name}: min {lo} > max {hi}")));
            }
        }
        if !(self.l_arm[0] <= self.l_arm[1]) {
            return Err(Error::Config(format!("range l_arm: min {} > max {}", self.l_arm[0], self.l_arm[1])));
        }
        if !(self.lower_edge[0] > 0.0) {
            return Err(Error::Config("lower_edge must be positive".into()));
        }
        if self.lower_color[0] < 0.0 || self.lower_color[1] > 1.0 {
            return Err(Error::Config("lower_color must lie in [0,1]".into()));
        }
        if self.upper_color[0] < 0.0 || self.upper_color[1] > 1.0 {
            return Err(Error::Config("upper_color must lie in [0,1]".into()));
        }
        if !(self.upper_cube_edge > 0.0) {
            return Err(Error::Config("upper_cube_edge must be positive".into()));
        }
        if self.l_arm[0] < self.l_thickness {
            return Err(Error::Config(format!(
                "l_arm min {} must be >= l_thickness {}",
                self.l_arm[0], self.l_thickness
            )));
        }
        if !(self.l_height > 0.0) || !(self.l_thickness > 0.0) {
            return Err(Error::Config("l_height and l_thickness must be positive".into()));
        }
        Ok(())
    }
}

/// Samples one scene from `config` ranges. The same seed always yields the
/// same scene; all draws come from one ChaCha8 stream keyed by the seed.
pub fn sample_scene(seed: u64, config: &GenConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[tag::SCENE]);

    let lower_edge = rng::uniform(&mut rng, config.lower_edge[0], config.lower_edge[1]);
    let mut lower_color = [0.0f32; 3];
    for c in lower_color.iter_mut() {
        *c = rng::uniform(&mut rng, config.lower_color[0], config.lower_color[1]) as f32;
    }
    let mut upper_color = [0.0f32; 3];
    for c in upper_color.iter_mut() {
        *c = rng::uniform(&mut rng, config.upper_color[0], config.upper_color[1]) as f32;
    }
    let lower_yaw = rng::uniform(&mut rng, config.lower_yaw[0], config.lower_yaw[1]);
    let upper_yaw = rng::uniform(&mut rng, config.upper_yaw[0], config.upper_yaw[1]);
    let frac_x = rng::uniform(&mut rng, config.offset_frac[0], config.offset_frac[1]);
    let frac_y = rng::uniform(&mut rng, config.offset_cross_frac[0], config.offset_cross_frac[1]);
    let camera_azimuth = rng::uniform(&mut rng, config.camera_azimuth[0], config.camera_azimuth[1]);
    let coin: bool = rand::Rng::gen(&mut rng);

    let upper = if coin {
        BlockSpec::cube(config.upper_cube_edge, upper_color, upper_yaw)
    } else {
        let arm_a = rng::uniform(&mut rng, config.l_arm[0], config.l_arm[1]);
        let arm_b = rng::uniform(&mut rng, config.l_arm[0], config.l_arm[1]);
        BlockSpec::l_shape(arm_a, arm_b, config.l_thickness, config.l_height, upper_color, upper_yaw)
    };
    let lower = BlockSpec::cube(lower_edge, lower_color, lower_yaw);

    // Fractions scale the combined half-extents so |frac| = 1 is the contact
    // boundary; sampled per world axis.
    let half_sum_x = lower.extent[0] / 2.0 + upper.extent[0] / 2.0;
    let half_sum_y = lower.extent[1] / 2.0 + upper.extent[1] / 2.0;
    let upper_offset = [frac_x * half_sum_x, frac_y * half_sum_y];

    let scene = SceneSpec {
        lower,
        upper,
        upper_offset,
        upper_height: 0.0,
        camera_azimuth,
        rng_seed: seed,
    };
    scene.validate()?;
    Ok(scene)
}
