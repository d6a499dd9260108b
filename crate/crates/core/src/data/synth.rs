//! Seeded scene generator with roads, long-tailed class frequencies and
//! spatial priors: small vehicles ride along roads, buildings line them.

use glod_tensor::Tensor;
use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GlodError, Result};
use crate::targets::GroundTruthObject;

/// Where a class prefers to appear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    OnRoad,
    BesideRoad,
    Anywhere,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub frequency: f64,
    /// Long side in pixels, inclusive range.
    pub length: (f32, f32),
    /// Short side as a fraction of the long side.
    pub aspect: (f32, f32),
    pub color: [f32; 3],
    pub color_jitter: f32,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    /// Object count, inclusive range.
    pub objects: (usize, usize),
    /// Road count, inclusive range.
    pub roads: (usize, usize),
    pub road_width: f32,
    /// Half-width of the band around a road centreline holding on-road objects.
    pub road_band: f32,
    /// Minimum Chebyshev distance between object centres, in pixels.
    pub min_separation: f32,
    pub noise_std: f32,
    pub placement_attempts: usize,
}

impl SceneSpec {
    pub fn desk(size: usize) -> Self {
        let class = |name: &str, frequency, length, aspect, color, placement| ClassSpec {
            name: name.to_string(),
            frequency,
            length,
            aspect,
            color,
            color_jitter: 20.0,
            placement,
        };
        Self {
            width: size,
            height: size,
            classes: vec![
                class("small-vehicle", 0.70, (4.0, 8.0), (0.5, 0.8), [225.0, 225.0, 230.0], Placement::OnRoad),
                class("large-vehicle", 0.15, (10.0, 18.0), (0.4, 0.6), [235.0, 195.0, 50.0], Placement::OnRoad),
                class("building", 0.10, (16.0, 36.0), (0.7, 1.0), [150.0, 85.0, 70.0], Placement::BesideRoad),
                class("container", 0.04, (6.0, 12.0), (0.4, 0.7), [50.0, 105.0, 200.0], Placement::Anywhere),
                class("rare-class", 0.01, (8.0, 14.0), (0.8, 1.0), [185.0, 55.0, 185.0], Placement::Anywhere),
            ],
            objects: (8, 24),
            roads: (1, 2),
            road_width: 12.0,
            road_band: 4.0,
            min_separation: 6.0,
            noise_std: 6.0,
            placement_attempts: 200,
        }
    }

    /// The desk layout with every length scaled by `size / 128`.
    pub fn scaled(size: usize) -> Self {
        let k = size as f32 / 128.0;
        let mut spec = Self::desk(size);
        for c in &mut spec.classes {
            c.length = (c.length.0 * k, c.length.1 * k);
        }
        spec.road_width *= k;
        spec.road_band *= k;
        spec.min_separation *= k;
        spec
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.classes.is_empty() {
            return Err(GlodError::Config("scene needs a positive size and at least one class".into()));
        }
        if self.objects.0 > self.objects.1 || self.roads.0 > self.roads.1 {
            return Err(GlodError::Config("count ranges must be ordered".into()));
        }
        for c in &self.classes {
            let fits = c.length.1 < self.width.min(self.height) as f32;
            if !fits || c.length.0 <= 0.0 || c.length.0 > c.length.1 || c.frequency < 0.0 {
                return Err(GlodError::Config(format!("class `{}` has an invalid size or frequency", c.name)));
            }
        }
        if self.classes.iter().map(|c| c.frequency).sum::<f64>() <= 0.0 {
            return Err(GlodError::Config("class frequencies sum to zero".into()));
        }
        Ok(())
    }
}

/// A rendered scene: `[3, H, W]` integer-valued image in [0, 255] and its
/// objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub objects: Vec<GroundTruthObject>,
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index
}

#[derive(Clone, Copy, Debug)]
struct Road {
    a: (f32, f32),
    b: (f32, f32),
}

impl Road {
    fn point_at(&self, t: f32) -> (f32, f32) {
        (self.a.0 + (self.b.0 - self.a.0) * t, self.a.1 + (self.b.1 - self.a.1) * t)
    }

    fn normal(&self) -> (f32, f32) {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let n = (dx * dx + dy * dy).sqrt().max(1e-6);
        (-dy / n, dx / n)
    }

    fn distance(&self, p: (f32, f32)) -> f32 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        let t = (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0);
        let q = self.point_at(t);
        ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
    }
}

fn random_road(rng: &mut ChaCha8Rng, w: f32, h: f32) -> Road {
    // Enter on one border, leave on the opposite one.
    if rng.gen_bool(0.5) {
        Road { a: (0.0, rng.gen_range(0.15..0.85) * h), b: (w, rng.gen_range(0.15..0.85) * h) }
    } else {
        Road { a: (rng.gen_range(0.15..0.85) * w, 0.0), b: (rng.gen_range(0.15..0.85) * w, h) }
    }
}

fn propose(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    class: &ClassSpec,
    roads: &[Road],
    size: (f32, f32),
    fallback: bool,
) -> (f32, f32) {
    let (w, h) = (spec.width as f32, spec.height as f32);
    let placement = if roads.is_empty() || fallback { Placement::Anywhere } else { class.placement };
    match placement {
        Placement::Anywhere => (rng.gen_range(0.0..w), rng.gen_range(0.0..h)),
        Placement::OnRoad | Placement::BesideRoad => {
            let road = roads[rng.gen_range(0..roads.len())];
            let (px, py) = road.point_at(rng.gen_range(0.0..1.0));
            let (nx, ny) = road.normal();
            let d = if placement == Placement::OnRoad {
                rng.gen_range(-spec.road_band..=spec.road_band)
            } else {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                side * (spec.road_width / 2.0 + size.0.max(size.1) / 2.0 + rng.gen_range(1.0..4.0))
            };
            (px + nx * d, py + ny * d)
        }
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f32, spec.height as f32);
    let n_roads = rng.gen_range(spec.roads.0..=spec.roads.1);
    let roads: Vec<Road> = (0..n_roads).map(|_| random_road(&mut rng, w, h)).collect();
    let weights = WeightedIndex::new(spec.classes.iter().map(|c| c.frequency)).expect("validated frequencies");
    let n_objects = rng.gen_range(spec.objects.0..=spec.objects.1);

    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class_id = weights.sample(&mut rng);
        let class = &spec.classes[class_id];
        // Class is fixed before placement so frequencies stay unbiased; only
        // the position is retried.
        let long = rng.gen_range(class.length.0..=class.length.1);
        let short = (long * rng.gen_range(class.aspect.0..=class.aspect.1)).max(1.0);
        let size = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
        let mut placed = None;
        for attempt in 0..spec.placement_attempts {
            let fallback = attempt >= spec.placement_attempts / 2;
            let (cx, cy) = propose(&mut rng, spec, class, &roads, size, fallback);
            let inside = cx - size.0 / 2.0 >= 0.0 && cy - size.1 / 2.0 >= 0.0 && cx + size.0 / 2.0 <= w && cy + size.1 / 2.0 <= h;
            let apart = objects
                .iter()
                .all(|o| (o.cx - cx).abs().max((o.cy - cy).abs()) >= spec.min_separation);
            if inside && apart {
                placed = Some((cx, cy));
                break;
            }
        }
        match placed {
            Some((cx, cy)) => objects.push(GroundTruthObject::new(class_id, cx, cy, size.0, size.1)),
            None => log::warn!("scene {seed}: could not place a `{}` object", class.name),
        }
    }
    let image = render(&mut rng, spec, &roads, &objects);
    Ok(Scene { image, objects })
}

fn render(rng: &mut ChaCha8Rng, spec: &SceneSpec, roads: &[Road], objects: &[GroundTruthObject]) -> Tensor<f32> {
    let (w, h) = (spec.width, spec.height);
    let plane = w * h;
    let ground = [rng.gen_range(70.0..110.0), rng.gen_range(90.0..130.0), rng.gen_range(55.0..85.0)];
    let tilt = (rng.gen_range(-0.15f32..0.15), rng.gen_range(-0.15f32..0.15));
    let road_color = [rng.gen_range(105.0..135.0f32); 3];
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let on_road = roads.iter().any(|r| r.distance(p) <= spec.road_width / 2.0);
            let shade = tilt.0 * x as f32 + tilt.1 * y as f32;
            for c in 0..3 {
                img[c * plane + y * w + x] = if on_road { road_color[c] } else { ground[c] + shade };
            }
        }
    }
    // Large objects first so small ones stay visible on top.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&objects[a], &objects[b]);
        (ob.w * ob.h).partial_cmp(&(oa.w * oa.h)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in order {
        let o = &objects[i];
        let class = &spec.classes[o.class_id];
        let jitter = Normal::new(0.0f32, class.color_jitter.max(1e-6)).expect("positive std");
        let color: Vec<f32> = class.color.iter().map(|&c| c + jitter.sample(rng)).collect();
        let [x1, y1, x2, y2] = o.bbox();
        let (xs, xe) = ((x1.round().max(0.0)) as usize, (x2.round() as usize).min(w));
        let (ys, ye) = ((y1.round().max(0.0)) as usize, (y2.round() as usize).min(h));
        for y in ys..ye.max(ys + 1).min(h) {
            for x in xs..xe.max(xs + 1).min(w) {
                let edge = y == ys || x == xs || y + 1 == ye || x + 1 == xe;
                let k = if edge { 0.75 } else { 1.0 };
                for c in 0..3 {
                    img[c * plane + y * w + x] = color[c] * k;
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, spec.noise_std.max(1e-6)).expect("positive std");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(rng)).round().clamp(0.0, 255.0);
    }
    Tensor::new(vec![3, h, w], img).expect("sized above")
}
