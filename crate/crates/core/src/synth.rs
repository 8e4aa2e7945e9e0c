//! SemShapes: procedurally rendered street-like scenes with exact masks.
//!
//! A scene has a sky above a horizon, a road below it, one or two buildings,
//! an optional tree and cloud, a traffic light in the top band, a sign in the
//! middle band and an obstacle in the bottom band. The label is `go` iff the
//! light is green and the obstacle is not blocking. Geometry is given in
//! units of a 64×64 canvas and scaled to the profile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, Profile, SemanticMask};

pub const SKY: u8 = 1;
pub const ROAD: u8 = 2;
pub const LIGHT: u8 = 3;
pub const OBSTACLE: u8 = 4;
pub const BUILDING: u8 = 5;
pub const TREE: u8 = 6;
pub const SIGN: u8 = 7;
pub const CLOUD: u8 = 8;

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["sky", "road", "light", "obstacle", "building", "tree", "sign", "cloud"];

pub const STOP: usize = 1;
pub const GO: usize = 2;
pub const LABEL_NAMES: [&str; 2] = ["stop", "go"];

pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "light_green",
    "obstacle_blocking",
    "sign_blue",
    "sky_dusk",
    "building_lit",
    "tree_present",
    "cloud_present",
    "road_wet",
];

/// Number of distinct identity palettes.
pub const NUM_IDENTITIES: u32 = 24;

const P_GREEN: f64 = 0.7;
const P_BLOCKING: f64 = 0.3;
const P_SIGN_BLUE_GIVEN_GO: f64 = 0.8;
const JITTER: f32 = 0.03;

/// 64×64 / 8 classes / 64-dimensional codes.
pub fn desk_profile() -> Profile {
    Profile {
        height: 64,
        width: 64,
        num_classes: NUM_CLASSES,
        code_dim: 64,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Ground truth of one scene. Rendering is a pure function of these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub layout_seed: u64,
    pub identity: u32,
    pub light_green: bool,
    pub obstacle_blocking: bool,
    pub sign_blue: bool,
    pub sky_dusk: bool,
    pub building_lit: bool,
    pub tree_present: bool,
    pub cloud_present: bool,
    pub road_wet: bool,
    /// Per-class colour offsets, index `class - 1`.
    pub jitter: Vec<[f32; 3]>,
}

pub struct RenderedScene {
    pub image: ImageTensor,
    pub mask: SemanticMask,
    pub label: usize,
    pub attributes: [bool; 8],
}

impl SceneSpec {
    pub fn label(&self) -> usize {
        if self.light_green && !self.obstacle_blocking {
            GO
        } else {
            STOP
        }
    }

    pub fn attributes(&self) -> [bool; 8] {
        [
            self.light_green,
            self.obstacle_blocking,
            self.sign_blue,
            self.sky_dusk,
            self.building_lit,
            self.tree_present,
            self.cloud_present,
            self.road_wet,
        ]
    }

    /// Draws a scene with the requested label.
    pub fn sample_with_label<R: Rng>(rng: &mut R, label: usize) -> SceneSpec {
        let (light_green, obstacle_blocking) = loop {
            let g = rng.random_bool(P_GREEN);
            let b = rng.random_bool(P_BLOCKING);
            if (g && !b) == (label == GO) {
                break (g, b);
            }
        };
        let p_blue = if label == GO { P_SIGN_BLUE_GIVEN_GO } else { 1.0 - P_SIGN_BLUE_GIVEN_GO };
        SceneSpec {
            layout_seed: rng.random(),
            identity: rng.random_range(0..NUM_IDENTITIES),
            light_green,
            obstacle_blocking,
            sign_blue: rng.random_bool(p_blue),
            sky_dusk: rng.random_bool(0.3),
            building_lit: rng.random_bool(0.4),
            tree_present: rng.random_bool(0.5),
            cloud_present: rng.random_bool(0.5),
            road_wet: rng.random_bool(0.3),
            jitter: (0..NUM_CLASSES)
                .map(|_| std::array::from_fn(|_| rng.random_range(-JITTER..JITTER)))
                .collect(),
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> SceneSpec {
        let label = if rng.random_bool(0.5) { GO } else { STOP };
        Self::sample_with_label(rng, label)
    }

    fn check(&self) -> Result<()> {
        if self.identity >= NUM_IDENTITIES {
            return Err(Error::Dataset(format!("identity {} out of range", self.identity)));
        }
        if self.jitter.len() != NUM_CLASSES {
            return Err(Error::Dataset("scene jitter needs one entry per class".into()));
        }
        Ok(())
    }
}

/// Base colours of an identity in `[0, 1]`: sky, road, building, tree.
pub fn identity_palette(identity: u32) -> [[f32; 3]; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_ed00 + identity as u64);
    let mut c = |lo: [f32; 3], hi: [f32; 3]| -> [f32; 3] {
        std::array::from_fn(|i| rng.random_range(lo[i]..hi[i]))
    };
    let sky = c([0.30, 0.50, 0.75], [0.65, 0.85, 1.0]);
    let grey = c([0.22; 3], [0.52; 3])[0];
    let tint = c([-0.06; 3], [0.06; 3]);
    let road = [grey + tint[0], grey + tint[1], grey + tint[2]];
    let building = c([0.40, 0.25, 0.15], [0.80, 0.60, 0.50]);
    let tree = c([0.05, 0.30, 0.05], [0.30, 0.60, 0.30]);
    [sky, road, building, tree]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// Flat colour of each class for a spec, `[0, 1]`, index `class - 1`.
fn class_colours(spec: &SceneSpec) -> [[f32; 3]; NUM_CLASSES] {
    let [sky, road, building, tree] = identity_palette(spec.identity);
    let sky = if spec.sky_dusk { mix(sky, [0.95, 0.55, 0.45], 0.6) } else { sky };
    let road = if spec.road_wet { [road[0] * 0.6, road[1] * 0.6 + 0.05, road[2] * 0.6 + 0.15] } else { road };
    let building = if spec.building_lit { mix(building, [1.0, 0.9, 0.5], 0.45) } else { building };
    let light = if spec.light_green { [0.10, 0.85, 0.25] } else { [0.90, 0.12, 0.10] };
    let obstacle = if spec.obstacle_blocking { [1.0, 0.55, 0.05] } else { [0.35, 0.42, 0.55] };
    let sign = if spec.sign_blue { [0.10, 0.25, 0.85] } else { [0.95, 0.85, 0.10] };
    let cloud = [0.93, 0.93, 0.95];
    let mut out = [sky, road, light, obstacle, building, tree, sign, cloud];
    for (c, j) in out.iter_mut().zip(&spec.jitter) {
        for i in 0..3 {
            c[i] = (c[i] + j[i]).clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Copy)]
struct Rect {
    y0: f32,
    x0: f32,
    y1: f32,
    x1: f32,
}

impl Rect {
    fn contains(&self, y: f32, x: f32) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    fn contains_ellipse(&self, y: f32, x: f32) -> bool {
        let (cy, cx) = ((self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0);
        let (ry, rx) = ((self.y1 - self.y0) / 2.0, (self.x1 - self.x0) / 2.0);
        ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
    }
}

struct Layout {
    horizon: f32,
    buildings: Vec<Rect>,
    tree: Rect,
    cloud: Rect,
    light: Rect,
    sign: Rect,
    obstacle: Rect,
}

fn layout(seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(30..=36) as f32;
    let mut buildings = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let w = rng.random_range(10..=20) as f32;
        let x0 = rng.random_range(0..=(64 - w as i32)) as f32;
        let top = rng.random_range(17..=24) as f32;
        buildings.push(Rect { y0: top, x0, y1: horizon, x1: x0 + w });
    }
    let tw = rng.random_range(8..=12) as f32;
    let th = rng.random_range(8..=11) as f32;
    let tx = rng.random_range(0..=(64 - tw as i32)) as f32;
    let tree = Rect { y0: horizon - th, x0: tx, y1: horizon + 1.0, x1: tx + tw };
    let cw = rng.random_range(10..=16) as f32;
    let cx = rng.random_range(0..=(64 - cw as i32)) as f32;
    let cy = rng.random_range(3..=8) as f32;
    let cloud = Rect { y0: cy, x0: cx, y1: cy + rng.random_range(4..=6) as f32, x1: cx + cw };
    let lx = rng.random_range(10..=48) as f32;
    let ly = rng.random_range(2..=4) as f32;
    let light = Rect { y0: ly, x0: lx, y1: ly + 10.0, x1: lx + 6.0 };
    let sw = rng.random_range(8..=12) as f32;
    let sh = rng.random_range(6..=9) as f32;
    let sx = rng.random_range(19..=(45 - sw as i32)) as f32;
    let sy = rng.random_range(25..=(38 - sh as i32)) as f32;
    let sign = Rect { y0: sy, x0: sx, y1: sy + sh, x1: sx + sw };
    let ow = rng.random_range(12..=20) as f32;
    let oh = rng.random_range(8..=10) as f32;
    let ox = rng.random_range(2..=(62 - ow as i32)) as f32;
    let oy = rng.random_range(50..=(62 - oh as i32)) as f32;
    let obstacle = Rect { y0: oy, x0: ox, y1: oy + oh, x1: ox + ow };
    Layout { horizon, buildings, tree, cloud, light, sign, obstacle }
}

pub fn render_scene(spec: &SceneSpec, profile: &Profile) -> Result<RenderedScene> {
    spec.check()?;
    if profile.num_classes != NUM_CLASSES {
        return Err(Error::Config(format!(
            "scenes have {NUM_CLASSES} classes, profile declares {}",
            profile.num_classes
        )));
    }
    let (h, w) = (profile.height, profile.width);
    let (sy, sx) = (64.0 / h as f32, 64.0 / w as f32);
    let lay = layout(spec.layout_seed);
    let colours = class_colours(spec);
    let mut labels = Vec::with_capacity(h * w);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            // canvas coordinates of the pixel centre
            let (y, x) = ((py as f32 + 0.5) * sy, (px as f32 + 0.5) * sx);
            let mut class = if y < lay.horizon { SKY } else { ROAD };
            if lay.buildings.iter().any(|b| b.contains(y, x)) {
                class = BUILDING;
            }
            if spec.tree_present && lay.tree.contains_ellipse(y, x) {
                class = TREE;
            }
            if spec.cloud_present && lay.cloud.contains_ellipse(y, x) {
                class = CLOUD;
            }
            if lay.sign.contains(y, x) {
                class = SIGN;
            }
            if lay.light.contains(y, x) {
                class = LIGHT;
            }
            if lay.obstacle.contains(y, x) {
                class = OBSTACLE;
            }
            let mut rgb = colours[class as usize - 1];
            if class == SKY {
                let shade = 0.15 * (y / lay.horizon - 0.5);
                rgb = rgb.map(|v| (v + shade).clamp(0.0, 1.0));
            }
            labels.push(class);
            pixels.extend(rgb.map(|v| v * 2.0 - 1.0));
        }
    }
    Ok(RenderedScene {
        image: ImageTensor::new(h, w, pixels)?,
        mask: SemanticMask::new(h, w, NUM_CLASSES, labels)?,
        label: spec.label(),
        attributes: spec.attributes(),
    })
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

fn scale_rect(profile: &Profile, y0: usize, x0: usize, y1: usize, x1: usize) -> PixelRect {
    let sy = |v: usize| (v * profile.height).div_ceil(64);
    let sx = |v: usize| (v * profile.width).div_ceil(64);
    PixelRect { y0: sy(y0), x0: sx(x0), y1: sy(y1), x1: sx(x1) }
}

/// Top band containing the light: the upper quarter of the rows.
pub fn top_region(profile: &Profile) -> PixelRect {
    scale_rect(profile, 0, 0, 16, 64)
}

/// Centred rectangle containing the sign.
pub fn mid_region(profile: &Profile) -> PixelRect {
    scale_rect(profile, 24, 18, 39, 46)
}

/// Bottom band containing the obstacle: the lower 22% of the rows.
pub fn bottom_region(profile: &Profile) -> PixelRect {
    scale_rect(profile, 50, 0, 64, 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = desk_profile();
        let s = spec(3);
        let (a, b) = (render_scene(&s, &p).unwrap(), render_scene(&s, &p).unwrap());
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn green_light_without_obstacle_is_go() {
        let mut s = spec(1);
        s.light_green = true;
        s.obstacle_blocking = false;
        assert_eq!(s.label(), GO);
        s.obstacle_blocking = true;
        assert_eq!(s.label(), STOP);
    }

    #[test]
    fn light_flip_changes_only_light_pixels() {
        let p = desk_profile();
        for seed in 0..20 {
            let mut s = spec(seed);
            s.obstacle_blocking = false;
            let a = render_scene(&s, &p).unwrap();
            s.light_green = !s.light_green;
            let b = render_scene(&s, &p).unwrap();
            assert_ne!(a.label, b.label);
            assert_eq!(a.mask, b.mask);
            for y in 0..p.height {
                for x in 0..p.width {
                    if a.mask.label(y, x) != LIGHT {
                        assert_eq!(a.image.rgb(y, x), b.image.rgb(y, x));
                    } else {
                        assert_ne!(a.image.rgb(y, x), b.image.rgb(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn decisive_objects_stay_inside_their_bands() {
        let p = desk_profile();
        let (top, mid, bot) = (top_region(&p), mid_region(&p), bottom_region(&p));
        assert_eq!(top, PixelRect { y0: 0, x0: 0, y1: 16, x1: 64 });
        for seed in 0..200 {
            let r = render_scene(&spec(seed), &p).unwrap();
            let counts = r.mask.class_counts();
            assert!(counts[(LIGHT - 1) as usize] > 0 && counts[(OBSTACLE - 1) as usize] > 0);
            assert!(counts[(SIGN - 1) as usize] > 0);
            for y in 0..p.height {
                for x in 0..p.width {
                    match r.mask.label(y, x) {
                        LIGHT => assert!(top.contains(y, x)),
                        OBSTACLE => assert!(bot.contains(y, x)),
                        SIGN => assert!(mid.contains(y, x)),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn top_and_bottom_bands_hold_no_other_objects() {
        let p = desk_profile();
        let (top, bot) = (top_region(&p), bottom_region(&p));
        for seed in 0..200 {
            let r = render_scene(&spec(seed), &p).unwrap();
            for y in 0..p.height {
                for x in 0..p.width {
                    let l = r.mask.label(y, x);
                    if top.contains(y, x) {
                        assert!([SKY, LIGHT, CLOUD].contains(&l), "class {l} in top band");
                    }
                    if bot.contains(y, x) {
                        assert!([ROAD, OBSTACLE].contains(&l), "class {l} in bottom band");
                    }
                }
            }
        }
    }

    #[test]
    fn renders_at_other_resolutions() {
        let mut p = desk_profile();
        p.height = 32;
        p.width = 48;
        let r = render_scene(&spec(5), &p).unwrap();
        assert_eq!((r.image.height(), r.image.width()), (32, 48));
        assert!(r.mask.present()[(LIGHT - 1) as usize]);
    }

    #[test]
    fn label_conditional_sampling_respects_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(SceneSpec::sample_with_label(&mut rng, GO).label(), GO);
            assert_eq!(SceneSpec::sample_with_label(&mut rng, STOP).label(), STOP);
        }
    }
}
