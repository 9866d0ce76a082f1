use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{COLORS, DIRECTIONS, SHAPES};
use super::{mask_box, quantize, Clip};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.85, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.1, 0.9, 0.9],
    [0.9, 0.15, 0.85],
    [1.0, 0.55, 0.05],
    [0.95, 0.95, 0.95],
];

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Frame side in pixels.
    pub size: usize,
    pub length: usize,
    pub distractors: usize,
    /// Target speed in pixels per frame.
    pub speed: f64,
    /// Uniform per-frame position jitter amplitude in pixels.
    pub jitter: f64,
    /// Object side range as a fraction of the frame side.
    pub min_object: f64,
    pub max_object: f64,
    /// Forces the target to stay in place.
    pub static_target: bool,
    /// RGB-only corruption strength in `[0, 1]`: per-pixel noise plus
    /// randomly placed occluding blocks. Other modalities stay clean.
    pub occluder_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 128,
            length: 24,
            distractors: 0,
            speed: 2.0,
            jitter: 0.5,
            min_object: 0.14,
            max_object: 0.24,
            static_target: false,
            occluder_noise: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("size: {} is below the 16 px minimum", self.size)));
        }
        if self.length == 0 {
            return Err(Error::Config("length: must be positive".into()));
        }
        if !(self.min_object > 0.0 && self.min_object <= self.max_object && self.max_object < 0.5) {
            return Err(Error::Config(format!(
                "min_object/max_object: need 0 < {} <= {} < 0.5",
                self.min_object, self.max_object
            )));
        }
        if !(0.0..=1.0).contains(&self.occluder_noise) {
            return Err(Error::Config(format!("occluder_noise: {} is outside [0, 1]", self.occluder_noise)));
        }
        if !(self.speed >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("speed/jitter: must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Object {
    shape: usize,
    color: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Object {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / (self.w / 2.0);
        let dy = (y as f64 + 0.5 - self.cy) / (self.h / 2.0);
        if SHAPES[self.shape] == "square" {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        } else {
            dx * dx + dy * dy <= 1.0
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, jitter: f64, size: f64) {
        let jx = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let jy = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        self.cx = (self.cx + self.vx + jx).clamp(self.w / 2.0, size - self.w / 2.0);
        self.cy = (self.cy + self.vy + jy).clamp(self.h / 2.0, size - self.h / 2.0);
    }
}

fn velocity(direction: &str, speed: f64) -> (f64, f64) {
    match direction {
        "left" => (-speed, 0.0),
        "right" => (speed, 0.0),
        "up" => (0.0, -speed),
        "down" => (0.0, speed),
        _ => (0.0, 0.0),
    }
}

fn spawn(rng: &mut ChaCha8Rng, cfg: &GenConfig, shape: usize, color: usize, direction: &str) -> Object {
    let s = cfg.size as f64;
    let w = rng.gen_range(cfg.min_object..=cfg.max_object) * s;
    let h = rng.gen_range(cfg.min_object..=cfg.max_object) * s;
    let cx = rng.gen_range(w / 2.0..=s - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=s - h / 2.0);
    let (vx, vy) = velocity(direction, cfg.speed);
    Object { shape, color, cx, cy, w, h, vx, vy }
}

/// Builds one clip; the output depends only on `seed` and `cfg`.
pub fn generate_clip(seed: u64, cfg: &GenConfig) -> Result<Clip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let s = n as f64;
    let plane = n * n;

    let shape = rng.gen_range(0..SHAPES.len());
    let color = rng.gen_range(0..COLORS.len());
    let direction = if cfg.static_target { "nowhere" } else { DIRECTIONS[rng.gen_range(0..4)] };
    let mut target = spawn(&mut rng, cfg, shape, color, direction);
    if cfg.static_target {
        target.vx = 0.0;
        target.vy = 0.0;
    }
    let mut distractors: Vec<Object> = (0..cfg.distractors)
        .map(|_| {
            let (ds, dc) = if rng.gen_bool(0.5) {
                (1 - shape, color)
            } else {
                let others: Vec<usize> = (0..COLORS.len()).filter(|&c| c != color).collect();
                (shape, *others.choose(&mut rng).expect("palette has several colors"))
            };
            let dir = DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())];
            spawn(&mut rng, cfg, ds, dc, dir)
        })
        .collect();

    // Static textures shared by every frame.
    let base: [f64; 3] = [rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45)];
    let background: Vec<f64> = (0..3 * plane).map(|i| base[i / plane] + rng.gen_range(-0.1..0.1)).collect();
    let depth_bg: Vec<f64> = (0..plane).map(|_| rng.gen_range(0.0..0.1)).collect();
    let thermal_bg: Vec<f64> = (0..plane).map(|_| rng.gen_range(0.0..0.15)).collect();

    let mut clip = Clip {
        id: format!("clip_{seed}"),
        seed,
        size: n,
        frames: Vec::with_capacity(cfg.length),
        boxes: Vec::with_capacity(cfg.length),
        masks: Vec::with_capacity(cfg.length),
        depth: Vec::with_capacity(cfg.length),
        thermal: Vec::with_capacity(cfg.length),
        event: Vec::with_capacity(cfg.length),
        text: format!("track the {} {} moving {}", COLORS[color], SHAPES[shape], direction),
    };

    let mut prev_gray: Option<Vec<f64>> = None;
    for t in 0..cfg.length {
        if t > 0 {
            let jitter = if cfg.static_target { 0.0 } else { cfg.jitter };
            target.step(&mut rng, jitter, s);
            for d in &mut distractors {
                d.step(&mut rng, cfg.jitter, s);
            }
        }
        let mut rgb = background.clone();
        let mut depth = depth_bg.clone();
        let mut thermal = thermal_bg.clone();
        let mut mask = vec![0.0; plane];
        for (k, obj) in distractors.iter().chain(std::iter::once(&target)).enumerate() {
            let is_target = k == distractors.len();
            let col = PALETTE[obj.color];
            let dval = (0.08 * s / (obj.w * obj.h).sqrt()).clamp(0.15, 1.0);
            for y in 0..n {
                for x in 0..n {
                    if !obj.covers(x, y) {
                        continue;
                    }
                    let i = y * n + x;
                    for c in 0..3 {
                        rgb[c * plane + i] = col[c];
                    }
                    depth[i] = dval;
                    if is_target {
                        thermal[i] = 1.0;
                        mask[i] = 1.0;
                    }
                }
            }
        }
        if cfg.occluder_noise > 0.0 {
            corrupt(&mut rng, &mut rgb, n, cfg, &target);
        }
        for v in rgb.iter_mut().chain(depth.iter_mut()).chain(thermal.iter_mut()) {
            *v = quantize(*v);
        }
        let gray: Vec<f64> = (0..plane).map(|i| (rgb[i] + rgb[plane + i] + rgb[2 * plane + i]) / 3.0).collect();
        let event: Vec<f64> = match &prev_gray {
            None => vec![0.0; plane],
            Some(p) => gray.iter().zip(p).map(|(a, b)| quantize((a - b).abs())).collect(),
        };
        prev_gray = Some(gray);

        let mask = Tensor::new(vec![1, n, n], mask)?;
        let bbox = mask_box(&mask)
            .ok_or_else(|| Error::InvalidInput(format!("clip {seed}: empty target mask at frame {t}")))?;
        clip.frames.push(Tensor::new(vec![3, n, n], rgb)?);
        clip.boxes.push(bbox);
        clip.masks.push(mask);
        clip.depth.push(Tensor::new(vec![1, n, n], depth)?);
        clip.thermal.push(Tensor::new(vec![1, n, n], thermal)?);
        clip.event.push(Tensor::new(vec![1, n, n], event)?);
    }
    Ok(clip)
}

/// Per-pixel noise plus a few solid blocks, some in the target's color.
fn corrupt(rng: &mut ChaCha8Rng, rgb: &mut [f64], n: usize, cfg: &GenConfig, target: &Object) {
    let plane = n * n;
    let a = cfg.occluder_noise;
    for v in rgb.iter_mut() {
        *v += rng.gen_range(-a..=a);
    }
    let blocks = (a * 6.0).round() as usize;
    for b in 0..blocks {
        let side = rng.gen_range(0.6..1.4) * (target.w * target.h).sqrt();
        let x0 = rng.gen_range(0.0..(n as f64 - side).max(1.0));
        let y0 = rng.gen_range(0.0..(n as f64 - side).max(1.0));
        let col = if b % 2 == 0 { PALETTE[target.color] } else { PALETTE[rng.gen_range(0..PALETTE.len())] };
        for y in (y0 as usize)..((y0 + side) as usize).min(n) {
            for x in (x0 as usize)..((x0 + side) as usize).min(n) {
                for c in 0..3 {
                    rgb[c * plane + y * n + x] = col[c];
                }
            }
        }
    }
}

/// `count` clips with seeds `seed, seed + 1, …`, named `clip_0000`, ….
pub fn generate_dataset(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<Clip>> {
    (0..count)
        .map(|i| {
            let mut c = generate_clip(seed.wrapping_add(i as u64), cfg)?;
            c.id = format!("clip_{i:04}");
            Ok(c)
        })
        .collect()
}
